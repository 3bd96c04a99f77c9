/** Payload types mirroring the dosing-service JSON API (v1). */

export interface Covariates {
  sex: 0 | 1;
  age: number; // years
  bsa: number; // m^2
  bili: number; // umol/L
  anc0: number; // 1e9 cells/L
}

export interface SessionCreated {
  session_id: string;
  seed: number;
}

export interface EnsembleInfo {
  m: number;
  t_h: number;
  ess: number;
  degenerate_warnings: number;
}

export interface DoseEvent {
  request_id: string;
  type: "dose";
  time_h: number;
  amount_mg: number;
  duration_h?: number;
}

export interface ObservationEvent {
  request_id: string;
  type: "observation";
  time_h: number;
  value: number;
  kind: "neutrophil" | "drug";
}

export type SessionEvent = DoseEvent | ObservationEvent;

export interface SessionSummary {
  session_id: string;
  covariates: {
    sex: number;
    age_y: number;
    bsa_m2: number;
    bili_umol_L: number;
    anc0_1e9_L: number;
  };
  class_index: number;
  n_events: number;
  doses: Array<{ time_h: number; amount_mg: number }>;
  observations: Array<{ time_h: number; value: number; kind: string }>;
  completed_cycles: number;
  ensemble: EnsembleInfo;
  grade_history: {
    observed: number[];
    "expected-nadir": number[];
    "map-grade": number[];
  };
  schema_version: number;
}

export type PolicyId =
  | "standard"
  | "pk"
  | "map-target"
  | "map-utility"
  | "da"
  | "rl"
  | "da-rl";

export interface Recommendation {
  dose_mg: number;
  dose_mgm2: number;
  report: {
    policy: PolicyId;
    cycle: number;
    rule?: string;
    risk_curve?: { doses_mgm2: number[]; risk: number[] };
    q_row?: number[];
    local_q?: number[];
    prior_row?: number[] | null;
    visits?: number[];
    [key: string]: unknown;
  };
}

export interface WhatIfResult {
  dose_mg: number;
  cycle: number;
  grade_probabilities: number[]; // grades 0..4, sums to 1
  nadir_quantiles_1e9_L: Record<string, number>;
  expected_nadir_1e9_L: number;
  band_times_h: number[];
  circ_bands_1e9_L: { p5: number[]; p50: number[]; p95: number[] };
}

/** Dose grid of the service interface: 60..250 mg/m^2 in 5 mg/m^2 steps. */
export const DOSE_GRID_MGM2: readonly number[] = Array.from(
  { length: 39 },
  (_, i) => 60 + 5 * i,
);

export const CYCLE_LENGTH_H = 504;

/** CTCAE neutropenia bands for display shading (1e9 cells/L). */
export const GRADE_BANDS: ReadonlyArray<{
  grade: number;
  lo: number;
  hi: number;
}> = [
  { grade: 0, lo: 2.0, hi: Infinity },
  { grade: 1, lo: 1.5, hi: 2.0 },
  { grade: 2, lo: 1.0, hi: 1.5 },
  { grade: 3, lo: 0.5, hi: 1.0 },
  { grade: 4, lo: 0, hi: 0.5 },
];
