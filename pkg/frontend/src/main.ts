/** Browser entry point: binds the string renderers to the DOM and wires
 * events.  Session id lives in the URL hash so a reload restores everything
 * from the service. */

import { ConsoleApp } from "./app.js";
import { DosingClient } from "./client.js";
import { renderDashboard } from "./dashboard.js";
import { renderWizard, validateCovariates } from "./wizard.js";
import type { Covariates } from "./types.js";

const BASE_URL = (window as unknown as { NEUTRODOSE_URL?: string }).NEUTRODOSE_URL ?? "";

const root = document.getElementById("root")!;
const app = new ConsoleApp(new DosingClient(BASE_URL));

let debounceTimer: number | undefined;

function bindDashboard(): void {
  root.innerHTML = renderDashboard(app.view);
  const slider = document.getElementById("whatif-slider") as HTMLInputElement | null;
  if (slider) {
    slider.addEventListener("input", () => {
      window.clearTimeout(debounceTimer);
      debounceTimer = window.setTimeout(async () => {
        try {
          await app.whatifAt(Number(slider.value));
          bindDashboard();
        } catch (err) {
          showError(err);
        }
      }, 180);
    });
  }
  root.querySelectorAll<HTMLButtonElement>(".use-dose").forEach((btn) => {
    btn.addEventListener("click", async () => {
      try {
        await app.confirmDose(Number(btn.dataset["doseMg"]));
        await app.loadRecommendations();
        bindDashboard();
      } catch (err) {
        showError(err);
      }
    });
  });
  const retry = document.getElementById("retry");
  if (retry) {
    retry.addEventListener("click", () => {
      app.view.error = null;
      bindDashboard();
    });
  }
}

function showError(err: unknown): void {
  app.view.error = err instanceof Error ? err.message : String(err);
  bindDashboard();
}

function bindWizard(): void {
  root.innerHTML = renderWizard();
  const form = document.getElementById("wizard") as HTMLFormElement;
  form.addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const data = new FormData(form);
    const cov = {
      sex: Number(data.get("sex")) as 0 | 1,
      age: Number(data.get("age")),
      bsa: Number(data.get("bsa")),
      bili: Number(data.get("bili")),
      anc0: Number(data.get("anc0")),
    };
    const errors = validateCovariates(cov);
    if (errors.length) {
      root.innerHTML = renderWizard(errors);
      bindWizard();
      return;
    }
    try {
      const id = await app.createSession(cov as Covariates);
      window.location.hash = id;
      await app.loadRecommendations();
      bindDashboard();
    } catch (err) {
      showError(err);
    }
  });
}

async function boot(): Promise<void> {
  const sessionId = window.location.hash.replace(/^#/, "");
  if (sessionId) {
    await app.open(sessionId);
    await app.loadRecommendations();
    bindDashboard();
  } else {
    bindWizard();
  }
}

boot().catch(showError);
