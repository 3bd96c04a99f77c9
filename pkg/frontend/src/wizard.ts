/** Covariate entry: client-side validation mirrors the service rules so a
 * rejected payload never leaves the browser; the service remains the
 * authority (its 422 responses are surfaced verbatim). */

import type { Covariates } from "./types.js";

export interface FieldError {
  field: keyof Covariates;
  message: string;
}

export function validateCovariates(input: {
  sex: number;
  age: number;
  bsa: number;
  bili: number;
  anc0: number;
}): FieldError[] {
  const errors: FieldError[] = [];
  if (input.sex !== 0 && input.sex !== 1) {
    errors.push({ field: "sex", message: "sex must be 0 (female) or 1 (male)" });
  }
  if (!(input.age > 0)) {
    errors.push({ field: "age", message: "age must be positive (years)" });
  }
  if (!(input.bsa > 0)) {
    errors.push({ field: "bsa", message: "body surface area must be positive (m²)" });
  }
  if (!(input.bili > 0)) {
    errors.push({ field: "bili", message: "bilirubin must be positive (µmol/L)" });
  }
  if (!(input.anc0 >= 1.5)) {
    errors.push({
      field: "anc0",
      message: "baseline ANC must be ≥ 1.5·10⁹ cells/L (inclusion criterion)",
    });
  }
  return errors;
}

export function renderWizard(errors: FieldError[] = []): string {
  const err = (field: string) => {
    const e = errors.find((x) => x.field === field);
    return e ? `<div class="field-error" data-field="${field}">${e.message}</div>` : "";
  };
  return `
<form id="wizard" class="wizard">
  <h2>New dosing session</h2>
  <label>Sex
    <select name="sex"><option value="0">female</option><option value="1">male</option></select>
  </label>${err("sex")}
  <label>Age <input name="age" type="number" step="1" value="56"/> <span class="unit">years</span></label>${err("age")}
  <label>Body surface area <input name="bsa" type="number" step="0.01" value="1.8"/> <span class="unit">m²</span></label>${err("bsa")}
  <label>Bilirubin <input name="bili" type="number" step="0.1" value="7"/> <span class="unit">µmol/L</span></label>${err("bili")}
  <label>Baseline ANC <input name="anc0" type="number" step="0.1" value="5"/> <span class="unit">10⁹ cells/L</span></label>${err("anc0")}
  <button type="submit">Start session</button>
</form>`;
}
