/** In-memory fixture service implementing the slice of the JSON API the
 * console exercises, with deterministic canned numbers and a call counter. */

import type { FetchLike } from "../src/client.js";
import type {
  Recommendation,
  SessionSummary,
  WhatIfResult,
} from "../src/types.js";
import { CYCLE_LENGTH_H, DOSE_GRID_MGM2 } from "../src/types.js";

interface StoredEvent {
  request_id: string;
  type: "dose" | "observation";
  time_h: number;
  amount_mg?: number;
  value?: number;
  kind?: string;
}

export class FixtureService {
  calls: Record<string, number> = {};
  private sessions = new Map<
    string,
    { covariates: Record<string, number>; events: StoredEvent[] }
  >();
  private counter = 0;

  /** Per-policy recommended dose in mg/m^2, varied by cycle for realism. */
  recommendedMgm2(policy: string, cycle: number): number {
    const base: Record<string, number> = {
      standard: 200,
      "map-target": 180,
      "map-utility": 150,
      da: 140,
      rl: 160,
      "da-rl": 145,
    };
    const level = (base[policy] ?? 100) - 10 * (cycle - 1);
    return Math.max(60, Math.min(250, level));
  }

  private count(name: string): void {
    this.calls[name] = (this.calls[name] ?? 0) + 1;
  }

  private summary(id: string): SessionSummary {
    const s = this.sessions.get(id)!;
    const doses = s.events.filter((e) => e.type === "dose");
    const obs = s.events.filter((e) => e.type === "observation");
    const completed = obs.filter((e) => e.time_h % CYCLE_LENGTH_H !== 0).length;
    return {
      session_id: id,
      covariates: {
        sex: s.covariates["sex"] ?? 0,
        age_y: s.covariates["age"] ?? 56,
        bsa_m2: s.covariates["bsa"] ?? 1.8,
        bili_umol_L: s.covariates["bili"] ?? 7,
        anc0_1e9_L: s.covariates["anc0"] ?? 5,
      },
      class_index: 6,
      n_events: s.events.length + 1,
      doses: doses.map((e) => ({ time_h: e.time_h, amount_mg: e.amount_mg! })),
      observations: obs.map((e) => ({
        time_h: e.time_h,
        value: e.value!,
        kind: e.kind ?? "neutrophil",
      })),
      completed_cycles: completed,
      ensemble: { m: 100, t_h: completed * CYCLE_LENGTH_H, ess: 87.3, degenerate_warnings: 0 },
      grade_history: {
        observed: obs.slice(0, completed).map((_, i) => (i % 3) + 1),
        "expected-nadir": obs.slice(0, completed).map((_, i) => (i % 3) + 1),
        "map-grade": obs.slice(0, completed).map((_, i) => (i % 3) + 1),
      },
      schema_version: 1,
    };
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(init.body) : undefined;
    const u = new URL(url, "http://fixture");
    const path = u.pathname;

    const json = (status: number, data: unknown) => ({
      status,
      json: async () => data,
    });

    if (method === "POST" && path === "/v1/sessions") {
      this.count("create");
      if (body.covariates.anc0 < 1.5) {
        return json(422, { detail: "anc0 must be >= 1.5e9 cells/L" });
      }
      this.counter += 1;
      const id = `fx-${this.counter}`;
      this.sessions.set(id, { covariates: body.covariates, events: [] });
      return json(201, { session_id: id, seed: body.seed ?? 1 });
    }

    const sessionMatch = path.match(/^\/v1\/sessions\/([^/]+)(\/.*)?$/);
    if (!sessionMatch) return json(404, { detail: "not found" });
    const id = sessionMatch[1]!;
    const rest = sessionMatch[2] ?? "";
    if (!this.sessions.has(id)) return json(404, { detail: `unknown session ${id}` });

    if (method === "GET" && rest === "") {
      this.count("get");
      return json(200, this.summary(id));
    }

    if (method === "POST" && rest === "/events") {
      this.count("events");
      const s = this.sessions.get(id)!;
      if (s.events.some((e) => e.request_id === body.request_id)) {
        return json(200, this.summary(id));
      }
      const last = s.events[s.events.length - 1];
      if (last && body.time_h < last.time_h) {
        return json(409, { detail: "events are append-only" });
      }
      s.events.push(body);
      return json(200, this.summary(id));
    }

    if (method === "GET" && rest === "/recommendation") {
      this.count("recommendation");
      const policy = u.searchParams.get("policy")!;
      const cycle = this.summary(id).completed_cycles + 1;
      const mgm2 = this.recommendedMgm2(policy, cycle);
      const bsa = this.summary(id).covariates.bsa_m2;
      const rec: Recommendation = {
        dose_mg: mgm2 * bsa,
        dose_mgm2: mgm2,
        report: {
          policy: policy as Recommendation["report"]["policy"],
          cycle,
          ...(policy === "da"
            ? {
                risk_curve: {
                  doses_mgm2: [...DOSE_GRID_MGM2],
                  risk: DOSE_GRID_MGM2.map(
                    (d) => 0.3 + 0.5 * ((d - mgm2) / 190) ** 2,
                  ),
                },
              }
            : {}),
          ...(policy === "rl"
            ? {
                q_row: DOSE_GRID_MGM2.map((d) => 1 - ((d - mgm2) / 100) ** 2),
                visits: DOSE_GRID_MGM2.map((d) => (d === mgm2 ? 40 : 5)),
              }
            : {}),
        },
      };
      return json(200, rec);
    }

    if (method === "GET" && rest === "/whatif") {
      this.count("whatif");
      const doseMg = Number(u.searchParams.get("dose_mg"));
      const cycle = this.summary(id).completed_cycles + 1;
      const t0 = (cycle - 1) * CYCLE_LENGTH_H;
      const times = Array.from({ length: 22 }, (_, i) => t0 + 24 * i);
      const depth = Math.min(0.9, doseMg / 700);
      const curve = times.map(
        (t) => 5 * (1 - depth * Math.exp(-(((t - t0 - 264) / 120) ** 2))),
      );
      const result: WhatIfResult = {
        dose_mg: doseMg,
        cycle,
        grade_probabilities: [0.1, 0.2, 0.3, 0.25, 0.15],
        nadir_quantiles_1e9_L: { "0.05": 0.4, "0.5": 1.1, "0.95": 2.6 },
        expected_nadir_1e9_L: 5 * (1 - depth),
        band_times_h: times,
        circ_bands_1e9_L: {
          p5: curve.map((v) => v * 0.55),
          p50: curve,
          p95: curve.map((v) => v * 1.5),
        },
      };
      return json(200, result);
    }

    return json(404, { detail: "not found" });
  };
}
