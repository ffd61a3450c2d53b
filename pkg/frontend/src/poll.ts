/**
 * The liveness loop: ask the broker for its state document on a fixed
 * cadence and hand every answer (or failure) to the view layer. A tick
 * that is still in flight when the next one fires is not doubled up;
 * the interval just skips. Errors do not stop the loop, the next tick
 * may find the service back.
 */

import type { BrokerApi } from "./api.js";
import type { BrokerState } from "./types.js";

export interface PollerHooks {
  onState: (state: BrokerState) => void;
  onError: (err: unknown) => void;
}

export class Poller {
  private api: BrokerApi;
  private hooks: PollerHooks;
  private intervalMs: number;
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;
  private stopped = false;

  constructor(api: BrokerApi, hooks: PollerHooks, intervalMs = 1000) {
    this.api = api;
    this.hooks = hooks;
    this.intervalMs = intervalMs;
  }

  /** Begin polling. The first request goes out immediately. */
  start(): void {
    this.stopped = false;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** One refresh outside the cadence, e.g. right after a mutation. */
  async tick(): Promise<void> {
    if (this.inFlight || this.stopped) return;
    this.inFlight = true;
    try {
      const state = await this.api.state();
      if (!this.stopped) this.hooks.onState(state);
    } catch (err) {
      if (!this.stopped) this.hooks.onError(err);
    } finally {
      this.inFlight = false;
    }
  }
}
