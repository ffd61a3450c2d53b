/**
 * DOM builders for every view. All functions are pure: data plus
 * callbacks in, detached elements out. The app decides where they go;
 * tests can call them with fixtures and read the result.
 *
 * Hash values are always rendered verbatim in full, character for
 * character, inside <code data-hash="..."> nodes. Auditors compare
 * them against validator output, so no abbreviation anywhere.
 */

import type {
  AttestationSummary,
  Channel,
  ExceptionReport,
  Pac,
  ValidationReport,
} from "./types.js";

export interface ChannelHandlers {
  onAttest: (hk: string) => void;
  onProvision: (hk: string, filter: Record<string, string>) => void;
  onViewPac: (hk: string) => void;
}

type Child = Node | string | null | undefined;

export function el(
  tag: string,
  attrs: Record<string, string> = {},
  ...children: Child[]
): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  for (const child of children) {
    if (child === null || child === undefined) continue;
    node.append(child);
  }
  return node;
}

function fmtTime(ms: number | null | undefined): string {
  if (typeof ms !== "number") return "";
  return new Date(ms).toISOString();
}

// ---- badges ----

const KNOWN_STATUSES = new Set([
  "started",
  "attested",
  "attest_failed",
  "provisioned",
  "complete",
  "unanchored",
  "failed",
]);

export function statusBadge(status: string | null): HTMLElement {
  const label = status ?? "discovered";
  const cls = KNOWN_STATUSES.has(label) ? label : "other";
  return el("span", { class: `badge badge-${cls}`, "data-status": label }, label);
}

/** Attestation outcome as a badge plus the details that justify it. */
export function verdictBadge(att: AttestationSummary): HTMLElement {
  const box = el("span", { class: "verdict" });
  if (att.skipped) {
    box.append(el("span", { class: "badge badge-skipped" }, "not required"));
    box.append(el("small", {}, " trust level 1 artifacts are owner attested"));
    return box;
  }
  if (att.ok) {
    box.append(el("span", { class: "badge badge-ok" }, "attested"));
    if (typeof att.svn === "number") box.append(el("small", {}, ` svn ${att.svn}`));
    if (att.verified_at) box.append(el("small", {}, ` at ${fmtTime(att.verified_at)}`));
    return box;
  }
  box.append(el("span", { class: "badge badge-bad" }, att.reason ?? "failed"));
  const verdict = att.verdict;
  if (verdict?.revoked_at) {
    box.append(el("small", {}, ` platform key revoked at ${fmtTime(verdict.revoked_at)}`));
  }
  if (typeof verdict?.svn === "number") {
    box.append(el("small", {}, ` reported svn ${verdict.svn}`));
  }
  if (att.report) box.append(el("small", {}, ` report: ${att.report}`));
  return box;
}

// ---- generic pieces ----

export function inlineError(message: string): HTMLElement {
  return el("p", { class: "error", role: "alert" }, message);
}

function kvTable(entries: [string, unknown][]): HTMLElement {
  const table = el("table", { class: "kv" });
  for (const [key, value] of entries) {
    const rendered =
      typeof value === "string" ? value : JSON.stringify(value, null, 1);
    table.append(
      el("tr", {}, el("th", {}, key), el("td", {}, el("code", {}, rendered))),
    );
  }
  return table;
}

function hashRow(name: string, value: string): HTMLElement {
  return el(
    "tr",
    {},
    el("th", {}, name),
    el("td", {}, el("code", { "data-hash": name }, value)),
  );
}

// ---- PAC detail ----

export function pacDetail(pac: Pac): HTMLElement {
  const view = el("section", { class: "pac-detail", "data-pac-id": pac.id });
  view.append(el("h3", {}, `artifact ${pac.id}`));
  view.append(
    el(
      "p",
      {},
      `${pac.osc_name}, trust level ${pac.trust_level}, created ${fmtTime(pac.created_at)}`,
    ),
  );

  view.append(el("h4", {}, "result"));
  view.append(kvTable(Object.entries(pac.result)));

  view.append(el("h4", {}, "hashes"));
  const hashes = el("table", { class: "kv hashes" });
  hashes.append(hashRow("osc_hash", pac.osc_hash));
  hashes.append(hashRow("data_hash", pac.data_hash));
  hashes.append(hashRow("pac_hash", pac.pac_hash));
  if (pac.report_hash) hashes.append(hashRow("report_hash", pac.report_hash));
  if (pac.quote_hash) hashes.append(hashRow("quote_hash", pac.quote_hash));
  view.append(hashes);

  if (pac.quote) {
    view.append(el("h4", {}, "quote"));
    view.append(
      kvTable([
        ["group", pac.quote.group_id],
        ["svn", pac.quote.report.svn],
        ["user_data", pac.quote.report.user_data],
        ["nonce", pac.quote.report.nonce ?? "none"],
        ["issued_at", fmtTime(pac.quote.issued_at)],
        ["signature", pac.quote.signature],
      ]),
    );
  }

  if (pac.anchor) {
    view.append(el("h4", {}, "ledger receipt"));
    view.append(
      kvTable([
        ["block_height", pac.anchor.block_height],
        ["block_hash", pac.anchor.block_hash],
        ["anchored_at", fmtTime(pac.anchor.ts)],
        ["OTK", pac.anchor.OTK],
      ]),
    );
  } else if (pac.trust_level >= 3) {
    view.append(inlineError("level 3 artifact without a ledger anchor"));
  }

  view.append(el("h4", {}, "filter"));
  view.append(kvTable(Object.entries(pac.filter)));
  return view;
}

// ---- provisioning form ----

const PLACEHOLDER = /\{(\w+)\}/g;

export function placeholderKeys(templates: string[]): string[] {
  const keys: string[] = [];
  for (const template of templates) {
    for (const match of template.matchAll(PLACEHOLDER)) {
      const key = match[1];
      if (key && !keys.includes(key)) keys.push(key);
    }
  }
  return keys;
}

/**
 * The concrete prefixes a filter would unlock, for the live preview.
 *
 * A literal template allows itself. A template with a placeholder is a
 * location constraint: the filter's value for that key is the full path,
 * and it must sit directly under the template's stem (one extra segment,
 * no slashes). The broker refuses anything else, so the preview goes
 * quiet instead of showing a scope that would never be granted.
 */
export function scopePreview(
  templates: string[],
  filter: Record<string, string>,
): string[] {
  const resolved: string[] = [];
  for (const template of templates) {
    const match = /\{(\w+)\}/.exec(template);
    if (!match) {
      resolved.push(template);
      continue;
    }
    const value = filter[match[1] ?? ""];
    if (value === undefined || value === "") continue;
    const stem = template.slice(0, match.index);
    const tail = value.slice(stem.length);
    if (value.startsWith(stem) && tail !== "" && !tail.includes("/")) {
      resolved.push(value);
    }
  }
  return resolved;
}

function readFilter(form: HTMLElement): Record<string, string> {
  const filter: Record<string, string> = {};
  for (const row of form.querySelectorAll<HTMLElement>(".filter-row")) {
    const keyInput = row.querySelector<HTMLInputElement>("input[data-role=key]");
    const valueInput = row.querySelector<HTMLInputElement>("input[data-role=value]");
    const key = keyInput?.value.trim() ?? "";
    if (key) filter[key] = valueInput?.value ?? "";
  }
  return filter;
}

function filterRow(key: string, fixed: boolean): HTMLElement {
  const keyInput = el("input", {
    "data-role": "key",
    value: key,
    placeholder: "field",
  }) as HTMLInputElement;
  if (fixed) keyInput.setAttribute("readonly", "readonly");
  const valueInput = el("input", {
    "data-role": "value",
    "data-filter-key": key,
    placeholder: "value",
  });
  return el("span", { class: "filter-row" }, keyInput, " = ", valueInput, " ");
}

export function provisionForm(
  hk: string,
  templates: string[],
  onProvision: (hk: string, filter: Record<string, string>) => void,
): HTMLElement {
  const form = el("div", { class: "provision", "data-provision-for": hk });
  form.append(el("h4", {}, "provision"));

  const scopes = el("ul", { class: "scopes" });
  const refreshScopes = () => {
    scopes.replaceChildren();
    const filter = readFilter(form);
    const resolved = scopePreview(templates, filter);
    for (const template of templates) {
      const item = el("li", { class: "scope" }, el("code", {}, template));
      // mark the templates the current filter values fully resolve
      const concrete = scopePreview([template], filter);
      if (concrete.length && concrete[0] !== template) {
        item.append(" ", el("code", { class: "scope-resolved" }, concrete[0] ?? ""));
      } else if (!concrete.length) {
        const key = /\{(\w+)\}/.exec(template)?.[1];
        const typed = key ? filter[key] : undefined;
        if (typed) {
          // a full path under the stem is required; warn before the broker does
          item.append(" ", el("span", { class: "scope-escapes" }, "value must live under this path"));
        }
      }
      scopes.append(item);
    }
    form.setAttribute("data-scope-count", String(resolved.length));
  };

  form.append(el("p", {}, "grants read access to:"), scopes);

  const rows = el("div", { class: "filter-rows" });
  for (const key of placeholderKeys(templates)) rows.append(filterRow(key, true));
  form.append(rows);
  rows.addEventListener("input", refreshScopes);

  const addBtn = el("button", { type: "button", "data-action": "add-field" }, "add field");
  addBtn.addEventListener("click", () => rows.append(filterRow("", false)));

  const sendBtn = el("button", { type: "button", "data-action": "provision" }, "provision");
  sendBtn.addEventListener("click", () => onProvision(hk, readFilter(form)));

  form.append(el("p", {}, addBtn, " ", sendBtn));
  form.append(el("div", { class: "provision-note", "data-note-for": hk }));
  refreshScopes();
  return form;
}

// ---- channel card ----

export function channelCard(
  hk: string,
  channel: Channel,
  handlers: ChannelHandlers,
): HTMLElement {
  const info = channel.osc_info;
  const card = el("article", { class: "channel", "data-hk": hk });

  const head = el("header", {});
  head.append(el("strong", {}, info?.name ?? "(unannounced)"));
  head.append(" ", statusBadge(channel.status));
  if (info) head.append(el("small", {}, ` trust level ${info.trust_level}, svn ${info.svn ?? "?"}`));
  card.append(head);

  card.append(el("p", { class: "hk" }, el("code", {}, hk)));
  if (info) {
    card.append(
      el("p", {}, "code ", el("code", { "data-hash": "osc_hash" }, info.osc_hash)),
    );
  }
  if (channel.discovered_at) {
    card.append(el("p", { class: "muted" }, `discovered ${fmtTime(channel.discovered_at)}`));
  }

  const attBox = el("div", { class: "attestation" });
  attBox.append(el("h4", {}, "attestation"));
  if (channel.attestation) attBox.append(verdictBadge(channel.attestation));
  else attBox.append(el("span", { class: "muted" }, "not yet challenged"));
  const attestBtn = el("button", { type: "button", "data-action": "attest" }, "attest");
  attestBtn.addEventListener("click", () => handlers.onAttest(hk));
  attBox.append(" ", attestBtn, el("div", { class: "attest-note", "data-note-for": hk }));
  card.append(attBox);

  card.append(provisionForm(hk, info?.declared_paths ?? [], handlers.onProvision));

  if (channel.provisions.length) {
    const list = el("ul", { class: "provisions" });
    for (const p of channel.provisions) {
      list.append(
        el(
          "li",
          {},
          el("code", {}, p.provision_id),
          ` filter ${JSON.stringify(p.filter)} at ${fmtTime(p.provisioned_at)}`,
        ),
      );
    }
    card.append(el("h4", {}, "provisions"), list);
  }
  if (channel.provisioned?.data_token) {
    // the broker masks the token; show exactly what it sent
    card.append(el("p", { class: "muted" }, `data token: ${channel.provisioned.data_token}`));
  }

  if (channel.exception_reports.length) {
    const list = el("ul", { class: "exception-links" });
    for (const path of channel.exception_reports) list.append(el("li", {}, el("code", {}, path)));
    card.append(el("h4", {}, "exception reports"), list);
  }

  if (channel.pac_link && channel.pac) {
    const viewBtn = el("button", { type: "button", "data-action": "view-pac" }, "view artifact");
    viewBtn.addEventListener("click", () => handlers.onViewPac(hk));
    card.append(el("p", {}, el("code", {}, channel.pac_link), " ", viewBtn));
  }
  return card;
}

// ---- validation report ----

export function validationReportView(report: ValidationReport): HTMLElement {
  const view = el("section", { class: "validation", "data-verdict": report.verdict });
  const badgeClass =
    report.verdict === "PASS" ? "ok" : report.verdict === "FAIL" ? "bad" : "warn";
  view.append(
    el(
      "h3",
      {},
      el("span", { class: `badge badge-${badgeClass}` }, report.verdict),
      ` at level ${report.level}`,
    ),
  );
  if (report.pac_id) view.append(el("p", {}, "artifact ", el("code", {}, report.pac_id)));
  const table = el("table", { class: "checks" });
  for (const check of report.checks) {
    table.append(
      el(
        "tr",
        { class: check.ok ? "check-ok" : "check-bad", "data-check": check.name },
        el("td", {}, check.ok ? "✓" : "✗"),
        el("td", {}, check.name),
        el("td", {}, check.detail),
      ),
    );
  }
  view.append(table);
  return view;
}

// ---- exception reports ----

export function exceptionReportView(key: string, report: ExceptionReport): HTMLElement {
  const view = el("article", { class: "exception-report", "data-report": key });
  view.append(
    el(
      "h4",
      {},
      el("span", { class: "badge badge-bad" }, report.reason),
      ` attempt ${report.attempt} on `,
      el("code", {}, report.channel),
    ),
  );
  const rest = Object.entries(report).filter(
    ([field]) => !["reason", "attempt", "channel"].includes(field),
  );
  const shaped: [string, unknown][] = rest.map(([field, value]) =>
    field === "at" ? [field, fmtTime(value as number)] : [field, value],
  );
  view.append(kvTable(shaped));
  return view;
}
