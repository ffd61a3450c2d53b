// Wire shapes of the broker and validator JSON APIs. These mirror what
// the services actually send; optional fields appear only at the trust
// levels that produce them.

export interface OscInfo {
  name: string;
  osc_hash: string;
  trust_level: number;
  svn?: number;
  declared_paths?: string[];
}

export interface AttestationSummary {
  ok: boolean;
  reason?: string;
  svn?: number;
  nonce?: string;
  verified_at?: number;
  skipped?: boolean;
  report?: string;
  retryable?: boolean;
  verdict?: VerifierVerdict;
}

export interface VerifierVerdict {
  ok: boolean;
  reason: string;
  svn?: number;
  group_id?: string;
  revoked_at?: number;
}

export interface Provision {
  provision_id: string;
  filter: Record<string, unknown>;
  provisioned_at?: number;
  data_token?: string;
  gateway_url?: string;
}

export interface Anchor {
  block_height: number;
  block_hash: string;
  ts: number;
  OTK: string;
}

export interface Quote {
  report: {
    measurement: { osc_hash: string; signer: string | null };
    svn: number;
    user_data: string;
    nonce: string | null;
  };
  group_id: string;
  signature: string;
  issued_at: number;
}

export interface Pac {
  id: string;
  osc_name: string;
  osc_hash: string;
  trust_level: number;
  channel: string | null;
  provision_id: string | null;
  filter: Record<string, unknown>;
  result: Record<string, unknown>;
  data_hash: string;
  pac_hash: string;
  created_rev: number | null;
  created_at: number;
  report_hash?: string;
  quote?: Quote;
  quote_hash?: string;
  anchor?: Anchor | null;
}

export interface Channel {
  osc_info: OscInfo | null;
  status: string | null;
  attestation: AttestationSummary | null;
  pac_link: string | null;
  discovered_at: number | null;
  provisions: Provision[];
  exception_reports: string[];
  provisioned?: Provision;
  pac?: Pac | null;
}

export interface ExceptionReport {
  channel: string;
  reason: string;
  attempt: number;
  at: number;
  [extra: string]: unknown;
}

export interface BrokerState {
  channels: Record<string, Channel>;
  trusted: Record<string, string>;
  authorized: Record<string, { name?: string; authorized_at?: number }>;
  exception_reports: Record<string, ExceptionReport>;
  policy: { min_svn: number | null; gateway_url: string | null };
}

export interface ValidationCheck {
  name: string;
  ok: boolean;
  detail: string;
}

export interface ValidationReport {
  verdict: "PASS" | "FAIL" | "LIKELY_VALID";
  level: number;
  pac_id: string | null;
  checks: ValidationCheck[];
}

export type Jwk = Record<string, string>;
