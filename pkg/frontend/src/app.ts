/**
 * The broker dashboard. One page, no stored state: everything shown
 * is reconstructed from the broker's state document on every poll, so
 * a reload lands on the same view. Session-only bits (which artifact
 * is open, text typed into forms) live in the DOM and nowhere else.
 *
 * Every mutation goes through the broker API exactly once; failures
 * land inline next to the button that caused them.
 */

import { ApiError, BrokerApi, ValidatorApi, type FetchLike } from "./api.js";
import { Poller } from "./poll.js";
import {
  channelCard,
  el,
  exceptionReportView,
  inlineError,
  pacDetail,
  validationReportView,
  verdictBadge,
} from "./render.js";
import type { BrokerState, Jwk, Pac } from "./types.js";

export interface AppOptions {
  fetchFn?: FetchLike;
  pollIntervalMs?: number;
}

function errorText(err: unknown): string {
  if (err instanceof ApiError) {
    return err.reason ? `${err.reason}: ${err.message}` : err.message;
  }
  return err instanceof Error ? err.message : String(err);
}

export class App {
  readonly root: HTMLElement;
  private fetchFn: FetchLike | undefined;
  private pollIntervalMs: number;

  broker: BrokerApi | null = null;
  validator: ValidatorApi | null = null;
  private poller: Poller | null = null;
  state: BrokerState | null = null;

  // fingerprint -> rendered card, so an unchanged channel keeps its DOM
  // (and whatever the operator has typed into its provision form)
  private cards = new Map<string, { fingerprint: string; node: HTMLElement }>();
  private openPac: string | null = null;
  private pacFingerprint = "";
  private exceptionsFingerprint = "";

  constructor(root: HTMLElement, opts: AppOptions = {}) {
    this.root = root;
    this.fetchFn = opts.fetchFn;
    this.pollIntervalMs = opts.pollIntervalMs ?? 1000;
  }

  // ---- skeleton ----

  mount(): this {
    this.root.replaceChildren();
    this.root.append(this.buildHeader());
    this.root.append(el("div", { id: "banner" }));
    this.root.append(this.buildAuthorizeSection());
    this.root.append(
      el("section", { id: "channels-section" }, el("h2", {}, "channels"), el("div", { id: "channels" })),
    );
    this.root.append(
      el("section", { id: "pac-section" }, el("h2", {}, "artifact"), el("div", { id: "pac-view" })),
    );
    this.root.append(this.buildValidatorPanel());
    this.root.append(
      el(
        "section",
        { id: "exceptions-section" },
        el("h2", {}, "exception reports"),
        el("div", { id: "exceptions" }),
      ),
    );
    this.prefillFromQuery();
    return this;
  }

  private region(id: string): HTMLElement {
    const node = this.root.querySelector<HTMLElement>(`#${id}`);
    if (!node) throw new Error(`app region #${id} missing`);
    return node;
  }

  private buildHeader(): HTMLElement {
    const brokerInput = el("input", { id: "broker-url", placeholder: "broker url", size: "28" });
    const validatorInput = el("input", { id: "validator-url", placeholder: "validator url", size: "28" });
    const tokenInput = el("input", { id: "owner-token", placeholder: "owner token", type: "password" });
    const connectBtn = el("button", { type: "button", id: "connect" }, "connect");
    const status = el("span", { id: "conn-status", class: "muted" }, "disconnected");
    connectBtn.addEventListener("click", () => {
      const broker = (brokerInput as HTMLInputElement).value.trim();
      const validator = (validatorInput as HTMLInputElement).value.trim();
      const token = (tokenInput as HTMLInputElement).value;
      if (!broker || !token) {
        this.banner("broker url and owner token are required");
        return;
      }
      this.connect(broker, validator || null, token);
    });
    return el(
      "header",
      { id: "top" },
      el("h1", {}, "certification broker"),
      el("p", {}, brokerInput, " ", validatorInput, " ", tokenInput, " ", connectBtn, " ", status),
    );
  }

  private buildAuthorizeSection(): HTMLElement {
    const jwkInput = el("textarea", {
      id: "jwk-input",
      rows: "3",
      cols: "70",
      placeholder: '{"kty":"OKP","crv":"Ed25519","x":"..."}',
    });
    const fileInput = el("input", { id: "jwk-file", type: "file", accept: ".json,.jwk" });
    fileInput.addEventListener("change", () => {
      const file = (fileInput as HTMLInputElement).files?.[0];
      if (!file) return;
      void file.text().then((text) => {
        (jwkInput as HTMLTextAreaElement).value = text;
      });
    });
    const nameInput = el("input", { id: "osc-name", placeholder: "contract name", value: "osc" });
    const button = el("button", { type: "button", id: "authorize" }, "authorize");
    button.addEventListener("click", () => void this.authorize());
    return el(
      "section",
      { id: "authorize-section" },
      el("h2", {}, "authorize a contract"),
      el("p", {}, "paste the contract's public key (JWK), or pick a file:"),
      el("p", {}, jwkInput),
      el("p", {}, fileInput, " ", nameInput, " ", button),
      el("div", { id: "authorize-note" }),
    );
  }

  private buildValidatorPanel(): HTMLElement {
    const pacInput = el("textarea", {
      id: "pac-input",
      rows: "4",
      cols: "70",
      placeholder: "paste an artifact JSON here",
    });
    const fileInput = el("input", { id: "pac-file", type: "file", accept: ".json" });
    fileInput.addEventListener("change", () => {
      const file = (fileInput as HTMLInputElement).files?.[0];
      if (!file) return;
      void file.text().then((text) => {
        (pacInput as HTMLTextAreaElement).value = text;
      });
    });
    const level = el("select", { id: "validate-level" });
    for (const n of [1, 2, 3]) level.append(el("option", { value: String(n) }, `level ${n}`));
    const minSvn = el("input", { id: "validate-min-svn", placeholder: "min svn", size: "7" });
    const button = el("button", { type: "button", id: "validate" }, "validate");
    button.addEventListener("click", () => void this.validatePasted());
    return el(
      "section",
      { id: "validator-section" },
      el("h2", {}, "validate an artifact"),
      el("p", {}, pacInput),
      el("p", {}, fileInput, " ", level, " ", minSvn, " ", button),
      el("div", { id: "validation-out" }),
    );
  }

  private prefillFromQuery(): void {
    try {
      const params = new URLSearchParams(globalThis.location?.search ?? "");
      const broker = params.get("broker");
      const validator = params.get("validator");
      if (broker) (this.region("top").querySelector("#broker-url") as HTMLInputElement).value = broker;
      if (validator)
        (this.region("top").querySelector("#validator-url") as HTMLInputElement).value = validator;
    } catch {
      // no usable location, e.g. detached test document
    }
  }

  // ---- connection ----

  connect(brokerUrl: string, validatorUrl: string | null, token: string): void {
    this.disconnect();
    this.broker = new BrokerApi(brokerUrl, token, this.fetchFn);
    this.validator = validatorUrl ? new ValidatorApi(validatorUrl, this.fetchFn) : null;
    this.poller = new Poller(
      this.broker,
      { onState: (state) => this.onState(state), onError: (err) => this.onPollError(err) },
      this.pollIntervalMs,
    );
    this.setConnStatus(`polling ${brokerUrl}`);
    this.poller.start();
  }

  disconnect(): void {
    this.poller?.stop();
    this.poller = null;
    this.broker = null;
    this.validator = null;
    this.cards.clear();
    this.setConnStatus("disconnected");
  }

  private setConnStatus(text: string): void {
    const status = this.root.querySelector("#conn-status");
    if (status) status.textContent = text;
  }

  private banner(message: string | null): void {
    const region = this.region("banner");
    region.replaceChildren();
    if (message) region.append(inlineError(message));
  }

  /** Ask for a refresh now instead of waiting out the poll interval. */
  refresh(): Promise<void> {
    return this.poller?.tick() ?? Promise.resolve();
  }

  // ---- state rendering ----

  onState(state: BrokerState): void {
    this.state = state;
    this.banner(null);
    this.renderChannels(state);
    this.renderExceptions(state);
    this.renderOpenPac(state);
  }

  onPollError(err: unknown): void {
    this.banner(`state refresh failed: ${errorText(err)}`);
  }

  private handlers = {
    onAttest: (hk: string) => void this.attest(hk),
    onProvision: (hk: string, filter: Record<string, string>) => void this.provision(hk, filter),
    onViewPac: (hk: string) => this.viewPac(hk),
  };

  private renderChannels(state: BrokerState): void {
    const region = this.region("channels");
    const seen = new Set<string>();
    for (const [hk, channel] of Object.entries(state.channels).sort()) {
      seen.add(hk);
      const fingerprint = JSON.stringify(channel);
      const existing = this.cards.get(hk);
      if (existing && existing.fingerprint === fingerprint) continue;
      const node = channelCard(hk, channel, this.handlers);
      if (existing) existing.node.replaceWith(node);
      else region.append(node);
      this.cards.set(hk, { fingerprint, node });
    }
    for (const [hk, entry] of this.cards) {
      if (!seen.has(hk)) {
        entry.node.remove();
        this.cards.delete(hk);
      }
    }
    if (!this.cards.size && !region.querySelector(".empty")) {
      region.append(el("p", { class: "empty muted" }, "no channels yet"));
    } else if (this.cards.size) {
      region.querySelector(".empty")?.remove();
    }
  }

  private renderExceptions(state: BrokerState): void {
    const fingerprint = JSON.stringify(state.exception_reports);
    if (fingerprint === this.exceptionsFingerprint) return;
    this.exceptionsFingerprint = fingerprint;
    const region = this.region("exceptions");
    region.replaceChildren();
    const entries = Object.entries(state.exception_reports).sort();
    if (!entries.length) {
      region.append(el("p", { class: "muted" }, "none"));
      return;
    }
    for (const [key, report] of entries) region.append(exceptionReportView(key, report));
  }

  private renderOpenPac(state: BrokerState): void {
    if (!this.openPac) return;
    const pac = state.channels[this.openPac]?.pac;
    const region = this.region("pac-view");
    if (!pac) {
      region.replaceChildren(el("p", { class: "muted" }, "artifact no longer in broker state"));
      return;
    }
    const fingerprint = JSON.stringify(pac);
    if (fingerprint === this.pacFingerprint) return;
    this.pacFingerprint = fingerprint;
    const view = pacDetail(pac);
    const toValidator = el("button", { type: "button", "data-action": "send-to-validator" }, "send to validator");
    toValidator.addEventListener("click", () => {
      const input = this.root.querySelector<HTMLTextAreaElement>("#pac-input");
      const level = this.root.querySelector<HTMLSelectElement>("#validate-level");
      if (input) input.value = JSON.stringify(pac);
      if (level) level.value = String(pac.trust_level);
    });
    view.append(el("p", {}, toValidator));
    region.replaceChildren(view);
  }

  viewPac(hk: string): void {
    this.openPac = hk;
    this.pacFingerprint = "";
    if (this.state) this.renderOpenPac(this.state);
  }

  // ---- actions ----

  private note(selector: string): HTMLElement | null {
    return this.root.querySelector<HTMLElement>(selector);
  }

  async authorize(): Promise<void> {
    const note = this.note("#authorize-note");
    if (!this.broker) {
      note?.replaceChildren(inlineError("connect first"));
      return;
    }
    const text = this.root.querySelector<HTMLTextAreaElement>("#jwk-input")?.value ?? "";
    const name = this.root.querySelector<HTMLInputElement>("#osc-name")?.value || "osc";
    let jwk: Jwk;
    try {
      jwk = JSON.parse(text) as Jwk;
    } catch {
      note?.replaceChildren(inlineError("that is not JSON"));
      return;
    }
    try {
      const reply = await this.broker.authorize(jwk, name);
      note?.replaceChildren(
        el("p", { class: "ok-note" }, `authorized as client `, el("code", {}, reply.client_id)),
      );
      await this.refresh();
    } catch (err) {
      note?.replaceChildren(inlineError(errorText(err)));
    }
  }

  async attest(hk: string): Promise<void> {
    const note = this.note(`.attest-note[data-note-for="${hk}"]`);
    if (!this.broker) return;
    note?.replaceChildren(el("span", { class: "muted" }, "challenging enclave..."));
    try {
      const summary = await this.broker.attest(hk);
      note?.replaceChildren(verdictBadge(summary));
      await this.refresh();
    } catch (err) {
      note?.replaceChildren(inlineError(errorText(err)));
    }
  }

  async provision(hk: string, filter: Record<string, string>): Promise<void> {
    const note = this.note(`.provision-note[data-note-for="${hk}"]`);
    if (!this.broker) return;
    try {
      const reply = await this.broker.provision(hk, filter);
      note?.replaceChildren(
        el(
          "p",
          { class: "ok-note" },
          `provisioned `,
          el("code", {}, reply.provision_id),
          ` over ${reply.scopes.length} scope(s)`,
        ),
      );
      await this.refresh();
    } catch (err) {
      note?.replaceChildren(inlineError(errorText(err)));
    }
  }

  async validatePasted(): Promise<void> {
    const out = this.region("validation-out");
    if (!this.validator) {
      out.replaceChildren(inlineError("no validator url configured"));
      return;
    }
    const text = this.root.querySelector<HTMLTextAreaElement>("#pac-input")?.value ?? "";
    let pac: Pac;
    try {
      pac = JSON.parse(text) as Pac;
    } catch {
      out.replaceChildren(inlineError("that is not JSON"));
      return;
    }
    const level = Number(this.root.querySelector<HTMLSelectElement>("#validate-level")?.value ?? "1");
    const minSvnRaw = this.root.querySelector<HTMLInputElement>("#validate-min-svn")?.value.trim();
    const minSvn = minSvnRaw ? Number(minSvnRaw) : null;
    try {
      const report = await this.validator.validate(pac, level, minSvn);
      out.replaceChildren(validationReportView(report));
    } catch (err) {
      out.replaceChildren(inlineError(errorText(err)));
    }
  }
}
