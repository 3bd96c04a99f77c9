/** Dashboard renderer: session header, charts, recommendation cards,
 * what-if panel, and the confirm control.  Pure string output from the view
 * model; every displayed number is a service response field with its unit. */

import type { SessionView } from "./app.js";
import { neutrophilChart, qChart, riskChart } from "./charts.js";
import type { PolicyId, Recommendation } from "./types.js";
import { DOSE_GRID_MGM2 } from "./types.js";

const POLICY_LABELS: Record<PolicyId, string> = {
  standard: "Standard (BSA)",
  pk: "PK-guided",
  "map-target": "MAP target",
  "map-utility": "MAP utility",
  da: "Posterior risk (DA)",
  rl: "Dosing table (RL)",
  "da-rl": "Individualized table (DA-RL)",
};

function fmt(x: number, digits = 1): string {
  return x.toFixed(digits);
}

export function renderHeader(view: SessionView): string {
  const s = view.summary;
  if (!s) return "<header><h1>neutrodose console</h1></header>";
  const cov = s.covariates;
  const grades = s.grade_history["expected-nadir"].join(", ") || "–";
  return `
<header>
  <h1>neutrodose console</h1>
  <div class="patient-line" data-session="${s.session_id}">
    ${cov.sex ? "male" : "female"}, ${fmt(cov.age_y, 0)} y,
    BSA ${fmt(cov.bsa_m2, 2)} m², bilirubin ${fmt(cov.bili_umol_L)} µmol/L,
    baseline ANC ${fmt(cov.anc0_1e9_L)} ·10⁹/L
  </div>
  <div class="cycle-line">
    completed cycles: <b>${s.completed_cycles}</b> /
    posterior grades: ${grades} /
    ensemble ESS ${fmt(s.ensemble.ess)} of ${s.ensemble.m}
  </div>
</header>`;
}

export function renderCourseChart(view: SessionView): string {
  const s = view.summary;
  const w = view.whatif;
  const observations = (s?.observations ?? []).filter(
    (o) => o.kind === "neutrophil",
  );
  return neutrophilChart({
    bandTimesH: w?.band_times_h ?? [],
    p5: w?.circ_bands_1e9_L.p5 ?? [],
    p50: w?.circ_bands_1e9_L.p50 ?? [],
    p95: w?.circ_bands_1e9_L.p95 ?? [],
    observations,
  });
}

export function renderRecommendationCards(view: SessionView): string {
  const entries = Object.entries(view.recommendations) as Array<
    [PolicyId, Recommendation | undefined]
  >;
  if (!entries.length) return `<div class="cards" id="cards"></div>`;
  const cards = entries
    .map(([policy, rec]) => {
      if (!rec) {
        return `<div class="card disabled" data-policy="${policy}">
          <h3>${POLICY_LABELS[policy]}</h3><p>unavailable</p></div>`;
      }
      return `<div class="card" data-policy="${policy}" data-dose-mg="${rec.dose_mg}">
        <h3>${POLICY_LABELS[policy]}</h3>
        <p class="dose">${fmt(rec.dose_mg, 0)} mg
           <span class="unit">(${fmt(rec.dose_mgm2, 1)} mg/m²)</span></p>
        <button class="use-dose" data-dose-mg="${rec.dose_mg}">use</button>
      </div>`;
    })
    .join("");
  return `<div class="cards" id="cards">${cards}</div>`;
}

export function renderPolicyPanels(view: SessionView): string {
  const da = view.recommendations["da"];
  const rl = view.recommendations["rl"];
  const darl = view.recommendations["da-rl"];
  const panels: string[] = [];
  if (da?.report.risk_curve) {
    panels.push(
      `<figure><figcaption>Posterior risk vs dose</figcaption>` +
        riskChart(
          da.report.risk_curve.doses_mgm2,
          da.report.risk_curve.risk,
          da.dose_mgm2,
        ) +
        `</figure>`,
    );
  }
  const qRow = darl?.report.local_q ?? rl?.report.q_row;
  const visits = darl?.report.visits ?? rl?.report.visits;
  const chosen = (darl ?? rl)?.dose_mgm2;
  if (qRow) {
    panels.push(
      `<figure><figcaption>Expected long-term return vs dose</figcaption>` +
        qChart([...DOSE_GRID_MGM2], qRow, visits, chosen) +
        `</figure>`,
    );
  }
  return `<div class="panels">${panels.join("")}</div>`;
}

export function renderWhatIf(view: SessionView): string {
  const w = view.whatif;
  const dose = view.whatifDoseMgm2;
  const body = w
    ? `<div class="whatif-result">
        <p>dose ${fmt(w.dose_mg, 0)} mg → expected nadir
           <b>${fmt(w.expected_nadir_1e9_L, 2)}</b> ·10⁹/L</p>
        <table class="grades"><tr>${w.grade_probabilities
          .map((p, g) => `<td data-grade="${g}">g${g}: ${(100 * p).toFixed(0)}%</td>`)
          .join("")}</tr></table>
      </div>`
    : `<p class="hint">move the slider to preview a dose</p>`;
  return `
<section class="whatif">
  <h3>What-if dose (cycle ${view.summary ? view.summary.completed_cycles + 1 : 1})</h3>
  <input type="range" id="whatif-slider" min="60" max="250" step="5"
         value="${dose ?? 200}" list="dose-grid"/>
  <datalist id="dose-grid">${DOSE_GRID_MGM2.map((d) => `<option value="${d}"/>`).join("")}</datalist>
  <span id="whatif-dose">${dose ?? "–"} mg/m²</span>
  ${body}
</section>`;
}

export function renderDashboard(view: SessionView): string {
  if (view.error) {
    return `<div class="error" role="alert">${view.error}
      <button id="retry">retry</button></div>`;
  }
  return (
    renderHeader(view) +
    `<main>` +
    renderCourseChart(view) +
    renderRecommendationCards(view) +
    renderPolicyPanels(view) +
    renderWhatIf(view) +
    `</main>`
  );
}
