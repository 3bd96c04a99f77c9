"""Population PK/PD model: constants, covariate model, and per-patient parameterization.

The drug model is a three-compartment paclitaxel PK model with saturable
elimination and saturable distribution to the first peripheral compartment,
coupled to a bone-marrow PD model (stem cell + proliferating pool + three
transit compartments + circulating neutrophils) whose proliferation rates are
suppressed linearly by plasma drug concentration.  Constants default to the
published population estimates and can be loaded from a JSON document.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

# mg -> umol conversion for paclitaxel (853.906 g/mol)
PACLITAXEL_MW = 853.906
MG_TO_UMOL = 1000.0 / PACLITAXEL_MW

# Layout of the random-effect vectors.
# IIV (eta, log scale) applies to these parameters:
ETA_NAMES = ("V3", "VM_EL", "KM_TR", "VM_TR", "k21", "Q", "Slope")
# IOV (kappa, log scale, one draw per treatment cycle) applies to:
KAPPA_NAMES = ("V1", "VM_EL")

# Order of the per-occasion parameter vector handed to the ODE kernel.
PARAM_NAMES = (
    "V1", "V3", "KM_EL", "VM_EL", "KM_TR", "VM_TR", "k21", "Q",
    "MTT", "Slope", "gamma_fb", "ftr", "circ0",
)
N_PARAMS = len(PARAM_NAMES)


class DomainError(ValueError):
    """Raised when an input is outside the model's domain."""


@dataclass(frozen=True)
class PatientCovariates:
    """Patient covariates entering the covariate and baseline models.

    sex: 0 female / 1 male; age in years; bsa in m^2; bili in umol/L;
    anc0 is the pre-treatment neutrophil observation y0 in 1e9 cells/L.
    """

    sex: int
    age: float
    bsa: float
    bili: float
    anc0: float

    def __post_init__(self) -> None:
        if self.sex not in (0, 1):
            raise DomainError(f"sex must be 0 (female) or 1 (male), got {self.sex}")
        if not self.age > 0:
            raise DomainError(f"age must be positive, got {self.age}")
        if not self.bsa > 0:
            raise DomainError(f"bsa must be positive, got {self.bsa}")
        if not self.bili > 0:
            raise DomainError(f"bili must be positive, got {self.bili}")
        if not self.anc0 >= 1.5:
            raise DomainError(
                f"anc0 must be >= 1.5e9 cells/L (study inclusion criterion), got {self.anc0}"
            )


@dataclass(frozen=True)
class PopulationModel:
    """Structural, covariate, and statistical constants of the population model."""

    # PK structural
    v1: float = 10.8            # L
    v3: float = 301.0           # L
    km_el: float = 0.667        # uM
    vm_el_pop: float = 35.9     # umol/h
    km_tr: float = 1.44         # uM
    vm_tr: float = 175.0        # umol/h
    k21: float = 1.12           # 1/h
    q: float = 16.8             # L/h flow; k13 = q/v1, k31 = q/v3

    # covariate exponents on VM_EL
    theta_bsa: float = 1.14
    theta_sex: float = 1.07     # multiplicative factor for male
    theta_age: float = -0.447
    theta_bili: float = -0.0942

    # IIV variances, diagonal, order ETA_NAMES
    omega2: tuple[float, ...] = (0.1639, 0.0253, 0.3885, 0.077, 0.008, 0.1660, 0.2007)
    # IOV variances, diagonal, order KAPPA_NAMES
    pi2: tuple[float, ...] = (0.1391, 0.0231)

    sigma2_pk: float = 0.0317   # residual variance, log scale, drug conc
    sigma2_pd: float = 0.2652   # residual variance, log scale, neutrophils

    # PD structural
    mtt: float = 145.0          # h, mean transit time; k_tr = 4/MTT
    slope: float = 13.1         # 1/uM, linear drug effect
    gamma_fb: float = 0.257     # feedback exponent (Circ0/Circ)^gamma_fb
    ftr: float = 0.787          # fraction of proliferative input via replication

    def __post_init__(self) -> None:
        for name in ("v1", "v3", "km_el", "vm_el_pop", "km_tr", "vm_tr", "k21",
                     "q", "mtt", "slope", "gamma_fb", "ftr"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if len(self.omega2) != len(ETA_NAMES):
            raise DomainError(f"omega2 must have {len(ETA_NAMES)} entries")
        if len(self.pi2) != len(KAPPA_NAMES):
            raise DomainError(f"pi2 must have {len(KAPPA_NAMES)} entries")
        for v in (*self.omega2, *self.pi2, self.sigma2_pk, self.sigma2_pd):
            if v < 0:
                raise DomainError("variances must be non-negative")

    @property
    def sigma_pk(self) -> float:
        return math.sqrt(self.sigma2_pk)

    @property
    def sigma_pd(self) -> float:
        return math.sqrt(self.sigma2_pd)

    def to_json(self, path: str | Path | None = None) -> str:
        doc = asdict(self)
        doc["omega2"] = dict(zip(ETA_NAMES, self.omega2))
        doc["pi2"] = dict(zip(KAPPA_NAMES, self.pi2))
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "PopulationModel":
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        doc = json.loads(text)
        if isinstance(doc.get("omega2"), dict):
            doc["omega2"] = tuple(doc["omega2"][n] for n in ETA_NAMES)
        else:
            doc["omega2"] = tuple(doc["omega2"])
        if isinstance(doc.get("pi2"), dict):
            doc["pi2"] = tuple(doc["pi2"][n] for n in KAPPA_NAMES)
        else:
            doc["pi2"] = tuple(doc["pi2"])
        return cls(**doc)


def typical_vmel(cov: PatientCovariates, model: PopulationModel) -> float:
    """Typical maximum elimination capacity VM_EL for the given covariates, umol/h."""
    return (
        model.vm_el_pop
        * (cov.bsa / 1.8) ** model.theta_bsa
        * model.theta_sex ** cov.sex
        * (cov.age / 56.0) ** model.theta_age
        * (cov.bili / 7.0) ** model.theta_bili
    )


@dataclass(frozen=True)
class IndividualParameters:
    """Per-patient random effects and the derived per-occasion parameter matrix.

    theta has one row per cycle in PARAM_NAMES order; rows differ only through
    the inter-occasion effects kappa (on V1 and VM_EL).
    """

    eta: np.ndarray          # (len(ETA_NAMES),), log scale
    eta_circ0: float         # standard normal; circ0 = y0 * exp(sigma_pd * eta_circ0)
    kappa: np.ndarray        # (n_cycles, len(KAPPA_NAMES)), log scale
    circ0: float             # 1e9 cells/L
    theta: np.ndarray        # (n_cycles, N_PARAMS)

    @property
    def n_cycles(self) -> int:
        return self.theta.shape[0]

    def occasion(self, cycle: int) -> np.ndarray:
        """Parameter vector for cycle (1-based)."""
        return self.theta[cycle - 1]


def individualize(
    cov: PatientCovariates,
    model: PopulationModel,
    eta: np.ndarray | None = None,
    kappa: np.ndarray | None = None,
    eta_circ0: float = 0.0,
    y0: float | None = None,
    n_cycles: int = 6,
) -> IndividualParameters:
    """Map random effects to per-occasion parameter values.

    Deterministic: theta_{i,c} = theta_TV(cov) * exp(eta + kappa_c) on the
    affected parameters, circ0 = y0 * exp(sigma_pd * eta_circ0).
    """
    eta = np.zeros(len(ETA_NAMES)) if eta is None else np.asarray(eta, dtype=float)
    if eta.shape != (len(ETA_NAMES),):
        raise DomainError(f"eta must have shape ({len(ETA_NAMES)},), got {eta.shape}")
    if kappa is None:
        kappa = np.zeros((n_cycles, len(KAPPA_NAMES)))
    else:
        kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim != 2 or kappa.shape[1] != len(KAPPA_NAMES):
        raise DomainError(
            f"kappa must have shape (n_cycles, {len(KAPPA_NAMES)}), got {kappa.shape}"
        )
    n_cycles = kappa.shape[0]
    y0 = cov.anc0 if y0 is None else float(y0)

    e = dict(zip(ETA_NAMES, eta))
    vm_el_tv = typical_vmel(cov, model)
    circ0 = y0 * math.exp(model.sigma_pd * eta_circ0)

    theta = np.empty((n_cycles, N_PARAMS))
    for c in range(n_cycles):
        k_v1, k_vm = kappa[c]
        theta[c] = (
            model.v1 * math.exp(k_v1),
            model.v3 * math.exp(e["V3"]),
            model.km_el,
            vm_el_tv * math.exp(e["VM_EL"] + k_vm),
            model.km_tr * math.exp(e["KM_TR"]),
            model.vm_tr * math.exp(e["VM_TR"]),
            model.k21 * math.exp(e["k21"]),
            model.q * math.exp(e["Q"]),
            model.mtt,
            model.slope * math.exp(e["Slope"]),
            model.gamma_fb,
            model.ftr,
            circ0,
        )
    if not np.all(theta > 0):
        raise DomainError("derived parameters must be strictly positive")
    return IndividualParameters(
        eta=eta, eta_circ0=float(eta_circ0), kappa=kappa, circ0=circ0, theta=theta
    )
