/** Console workflow: a session view fed exclusively by service responses.
 *
 * The view model holds no clinical computation; every number it exposes is a
 * service response field.  Dose confirmation awaits the service ack before
 * the view advances (no optimistic updates).
 */

import { DosingClient } from "./client.js";
import type {
  Covariates,
  PolicyId,
  Recommendation,
  SessionSummary,
  WhatIfResult,
} from "./types.js";
import { CYCLE_LENGTH_H, DOSE_GRID_MGM2 } from "./types.js";

export interface SessionView {
  summary: SessionSummary | null;
  recommendations: Partial<Record<PolicyId, Recommendation>>;
  whatif: WhatIfResult | null;
  whatifDoseMgm2: number | null;
  error: string | null;
  busy: boolean;
}

export const POLICIES: readonly PolicyId[] = [
  "standard",
  "map-target",
  "map-utility",
  "da",
  "rl",
  "da-rl",
];

export function snapToGrid(doseMgm2: number): number {
  let best = DOSE_GRID_MGM2[0]!;
  for (const level of DOSE_GRID_MGM2) {
    if (Math.abs(level - doseMgm2) < Math.abs(best - doseMgm2)) {
      best = level;
    }
  }
  return best;
}

export class ConsoleApp {
  readonly view: SessionView = {
    summary: null,
    recommendations: {},
    whatif: null,
    whatifDoseMgm2: null,
    error: null,
    busy: false,
  };
  private sessionId: string | null = null;
  private requestCounter = 0;

  constructor(
    private readonly client: DosingClient,
    private readonly policies: readonly PolicyId[] = POLICIES,
  ) {}

  private nextRequestId(kind: string): string {
    this.requestCounter += 1;
    return `${this.sessionId ?? "new"}-${kind}-${this.requestCounter}`;
  }

  get currentCycle(): number {
    return (this.view.summary?.completed_cycles ?? 0) + 1;
  }

  get bsa(): number {
    return this.view.summary?.covariates.bsa_m2 ?? NaN;
  }

  /** Doses already confirmed are immutable: the earliest editable time is the
   * current cycle's start. */
  get editableFromH(): number {
    return (this.view.summary?.completed_cycles ?? 0) * CYCLE_LENGTH_H;
  }

  async createSession(covariates: Covariates, seed?: number): Promise<string> {
    const created = await this.client.createSession(
      covariates,
      seed,
      this.nextRequestId("create"),
    );
    this.sessionId = created.session_id;
    await this.refresh();
    return created.session_id;
  }

  /** Restore an existing session after reload; all state comes from the
   * service. */
  async open(sessionId: string): Promise<void> {
    this.sessionId = sessionId;
    await this.refresh();
  }

  async refresh(): Promise<void> {
    if (!this.sessionId) throw new Error("no session");
    this.view.summary = await this.client.getSession(this.sessionId);
    this.view.whatif = null;
    this.view.whatifDoseMgm2 = null;
    this.view.recommendations = {};
  }

  async enterObservation(timeH: number, value: number): Promise<void> {
    if (!this.sessionId) throw new Error("no session");
    this.view.summary = await this.client.recordEvent(this.sessionId, {
      request_id: this.nextRequestId("obs"),
      type: "observation",
      time_h: timeH,
      value,
      kind: "neutrophil",
    });
  }

  async loadRecommendations(seed = 0): Promise<void> {
    if (!this.sessionId) throw new Error("no session");
    this.view.recommendations = {};
    for (const policy of this.policies) {
      try {
        this.view.recommendations[policy] = await this.client.recommendation(
          this.sessionId,
          policy,
          seed,
        );
      } catch (err) {
        // a missing prerequisite (e.g. no QTable) disables one card only
        this.view.recommendations[policy] = undefined;
      }
    }
  }

  /** Slider handler: snaps to the dose grid and reuses cached responses, so
   * sweeping the slider issues at most one call per grid dose. */
  async whatifAt(doseMgm2: number): Promise<WhatIfResult> {
    if (!this.sessionId) throw new Error("no session");
    const snapped = snapToGrid(doseMgm2);
    const result = await this.client.whatif(
      this.sessionId,
      this.currentCycle,
      snapped * this.bsa,
    );
    this.view.whatifDoseMgm2 = snapped;
    this.view.whatif = result;
    return result;
  }

  /** Confirm the administered dose; resolves only after the service ack. */
  async confirmDose(doseMg: number): Promise<SessionSummary> {
    if (!this.sessionId) throw new Error("no session");
    const timeH = (this.currentCycle - 1) * CYCLE_LENGTH_H;
    const summary = await this.client.recordEvent(this.sessionId, {
      request_id: this.nextRequestId("dose"),
      type: "dose",
      time_h: timeH,
      amount_mg: doseMg,
    });
    this.view.summary = summary;
    this.view.whatif = null;
    this.view.whatifDoseMgm2 = null;
    this.view.recommendations = {};
    return summary;
  }
}
