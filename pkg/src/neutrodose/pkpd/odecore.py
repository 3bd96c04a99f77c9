"""Compiled ODE core: Dormand-Prince 5(4) with dense output for the PK/PD system.

State layout (umol for PK, 1e9 cells/L for PD):
    0 Cent, 1 Per1, 2 Per2, 3 Stem, 4 Prol, 5 Transit1, 6 Transit2,
    7 Transit3, 8 Circ
Parameter vector layout: see population.PARAM_NAMES.

The integrator restarts hard at every infusion start/stop (the caller splits
the horizon into constant-input segments).  Cleared PK compartments are
frozen to exactly zero once all three fall below PK_ZERO_UMOL in a drug-free
segment; zero is an exact equilibrium of the PK subsystem, so the step-size
controller is then limited by the slow PD dynamics only.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

NSTATE = 9
STATUS_OK = 0
STATUS_STEP_UNDERFLOW = 1
STATUS_NEGATIVE_STATE = 2
STATUS_SWITCH_LINEAR = 3

# umol threshold below which drug amounts are numerically zero; the implied
# drug-effect error (Slope * C1 < 2e-8) is far below solver tolerances.
PK_ZERO_UMOL = 1e-8

# fast-path switch: once plasma concentration falls below this (uM) in a
# drug-free segment, the saturable fluxes are within 0.3 % of linear and the
# PK subsystem is propagated exactly by modal decomposition while the
# (non-stiff) PD states keep the adaptive solver.  Exact-model runs pass 0.
C1_LINEAR_UM = 0.002

# PD states may dip this far below zero before it is treated as a solver bug.
PD_FLOOR = -1e-12

# Dormand-Prince 5(4) tableau
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = (
    19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0,
)
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = (
    35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0,
)
# error weights b - bhat
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0,
    22.0 / 525.0, -1.0 / 40.0,
)
# dense-output weights
_D1 = -12715105075.0 / 11282082432.0
_D3 = 87487479700.0 / 32700410799.0
_D4 = -10690763975.0 / 1880347072.0
_D5 = 701980252875.0 / 199316789632.0
_D6 = -1453857185.0 / 822651844.0
_D7 = 69997945.0 / 29380423.0


@njit(cache=True, nogil=True)
def _rhs(y, u, p, dy):
    v1 = p[0]
    v3 = p[1]
    km_el = p[2]
    vm_el = p[3]
    km_tr = p[4]
    vm_tr = p[5]
    k21 = p[6]
    q = p[7]
    mtt = p[8]
    slope = p[9]
    gamma_fb = p[10]
    ftr = p[11]
    circ0 = p[12]

    c1 = y[0] / v1
    k13 = q / v1
    k31 = q / v3
    mm_el = vm_el * c1 / (km_el + c1)
    mm_tr = vm_tr * c1 / (km_tr + c1)

    dy[0] = u - mm_el - mm_tr + k21 * y[1] + k31 * y[2] - k13 * y[0]
    dy[1] = mm_tr - k21 * y[1]
    dy[2] = k13 * y[0] - k31 * y[2]

    ktr = 4.0 / mtt
    kprol = ftr * ktr
    kstem = (1.0 - ftr) * ktr
    edrug = slope * c1
    circ = y[8]
    if circ < 1e-12:
        circ = 1e-12
    fb = (circ0 / circ) ** gamma_fb

    dy[3] = kstem * y[3] * ((1.0 - edrug) * fb - 1.0)
    dy[4] = kprol * y[4] * (1.0 - edrug) * fb + kstem * y[3] - ktr * y[4]
    dy[5] = ktr * (y[4] - y[5])
    dy[6] = ktr * (y[5] - y[6])
    dy[7] = ktr * (y[6] - y[7])
    dy[8] = ktr * y[7] - ktr * y[8]


@njit(cache=True, nogil=True)
def _integrate_segment(y, t0, t1, u, p, rtol, atol, grid, g_lo, g_hi, out,
                       h_start, c_lin):
    """Advance y from t0 to t1 with constant input u, filling out[g_lo:g_hi].

    grid[g_lo:g_hi] are output times inside (t0, t1]; out rows receive the
    dense-output interpolation.  Returns (status, aux, gi): aux is the next
    step size on success, the failing time on error, or the switch time when
    c_lin > 0 and the drug-free fast path takes over; gi is the next unfilled
    grid index.  Step-size selection uses PI control, which avoids
    accept/reject thrashing when the step is limited by the stability
    boundary rather than accuracy.
    """
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    k5 = np.empty(NSTATE)
    k6 = np.empty(NSTATE)
    k7 = np.empty(NSTATE)
    ytmp = np.empty(NSTATE)
    ynew = np.empty(NSTATE)

    t = t0
    span = t1 - t0
    tiny = 1e-9 * (1.0 + abs(t1))
    h = h_start
    if h <= 0.0 or h > span:
        h = min(0.1, span)
    gi = g_lo
    err_prev = 1.0
    rejected = False

    if u == 0.0 and c_lin > 0.0 and y[0] / p[0] < c_lin:
        return STATUS_SWITCH_LINEAR, t, gi

    _rhs(y, u, p, k1)
    while t < t1:
        last = False
        if h >= t1 - t - tiny:
            h = t1 - t
            last = True
        if h < 1e-12 * max(1.0, abs(t)):
            return STATUS_STEP_UNDERFLOW, t, gi

        for i in range(NSTATE):
            ytmp[i] = y[i] + h * _A21 * k1[i]
        _rhs(ytmp, u, p, k2)
        for i in range(NSTATE):
            ytmp[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
        _rhs(ytmp, u, p, k3)
        for i in range(NSTATE):
            ytmp[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
        _rhs(ytmp, u, p, k4)
        for i in range(NSTATE):
            ytmp[i] = y[i] + h * (
                _A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i]
            )
        _rhs(ytmp, u, p, k5)
        for i in range(NSTATE):
            ytmp[i] = y[i] + h * (
                _A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i]
                + _A65 * k5[i]
            )
        _rhs(ytmp, u, p, k6)
        for i in range(NSTATE):
            ynew[i] = y[i] + h * (
                _B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i]
                + _B6 * k6[i]
            )
        _rhs(ynew, u, p, k7)

        errnorm = 0.0
        for i in range(NSTATE):
            e = h * (
                _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i]
                + _E6 * k6[i] + _E7 * k7[i]
            )
            ay = abs(y[i])
            ayn = abs(ynew[i])
            sc = atol + rtol * (ay if ay > ayn else ayn)
            r = e / sc
            errnorm += r * r
        errnorm = np.sqrt(errnorm / NSTATE)

        if errnorm <= 1.0:
            tnew = t1 if last else t + h
            # dense output for grid points in (t, tnew]
            while gi < g_hi and grid[gi] <= tnew + 1e-12:
                theta = (grid[gi] - t) / h
                if theta > 1.0:
                    theta = 1.0
                if theta < 0.0:
                    theta = 0.0
                for i in range(NSTATE):
                    ydiff = ynew[i] - y[i]
                    bspl = h * k1[i] - ydiff
                    cont4 = ydiff - h * k7[i] - bspl
                    cont5 = h * (
                        _D1 * k1[i] + _D3 * k3[i] + _D4 * k4[i]
                        + _D5 * k5[i] + _D6 * k6[i] + _D7 * k7[i]
                    )
                    v = y[i] + theta * (
                        ydiff + (1.0 - theta) * (
                            bspl + theta * (cont4 + (1.0 - theta) * cont5)
                        )
                    )
                    if i >= 3 and PD_FLOOR < v < 0.0:
                        v = 0.0
                    out[gi, i] = v
                gi += 1

            t = tnew
            for i in range(NSTATE):
                y[i] = ynew[i]
                k1[i] = k7[i]  # FSAL
            for i in range(3, NSTATE):
                if y[i] < 0.0:
                    if y[i] < PD_FLOOR:
                        return STATUS_NEGATIVE_STATE, t, gi
                    y[i] = 0.0
            if u == 0.0:
                apk = abs(y[0])
                if abs(y[1]) > apk:
                    apk = abs(y[1])
                if abs(y[2]) > apk:
                    apk = abs(y[2])
                if apk < PK_ZERO_UMOL:
                    y[0] = 0.0
                    y[1] = 0.0
                    y[2] = 0.0
                if c_lin > 0.0 and t < t1 and y[0] / p[0] < c_lin:
                    return STATUS_SWITCH_LINEAR, t, gi
            # PI step control (orders 0.7/5 and -0.4/5)
            if errnorm < 1e-14:
                fac = 5.0
            else:
                fac = 0.9 * errnorm ** -0.14 * err_prev ** 0.08
            if fac > 5.0:
                fac = 5.0
            if rejected and fac > 1.0:
                fac = 1.0
            err_prev = errnorm if errnorm > 1e-14 else 1e-14
            rejected = False
            h *= fac
        else:
            rejected = True
            fac = 0.9 * errnorm ** -0.2
            if fac < 0.2:
                fac = 0.2
            h *= fac
    return STATUS_OK, h, gi


_LINEAR_FALLBACK = 4


@njit(cache=True, nogil=True)
def _rhs_pd(dt_rel, y6, beta, w, p, dy6):
    """PD subsystem rhs with the plasma concentration from the modal sum."""
    c1 = 0.0
    for i in range(3):
        c1 += (beta[i] * np.exp(w[i] * dt_rel)).real
    if c1 < 0.0:
        c1 = 0.0
    ktr = 4.0 / p[8]
    kprol = p[11] * ktr
    kstem = (1.0 - p[11]) * ktr
    edrug = p[9] * c1
    circ = y6[5]
    if circ < 1e-12:
        circ = 1e-12
    fb = (p[12] / circ) ** p[10]
    dy6[0] = kstem * y6[0] * ((1.0 - edrug) * fb - 1.0)
    dy6[1] = kprol * y6[1] * (1.0 - edrug) * fb + kstem * y6[0] - ktr * y6[1]
    dy6[2] = ktr * (y6[1] - y6[2])
    dy6[3] = ktr * (y6[2] - y6[3])
    dy6[4] = ktr * (y6[3] - y6[4])
    dy6[5] = ktr * y6[4] - ktr * y6[5]


# stage abscissae of the Dormand-Prince pair (for the non-autonomous PD rhs)
_C2, _C3, _C4, _C5, _C6 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0


@njit(cache=True, nogil=True)
def _integrate_pd_linear(y, t0, t1, p, rtol, atol, grid, g_lo, g_hi, out):
    """Drug-free-segment fast path: exact linear PK, adaptive PD integration.

    Below C1_LINEAR_UM the saturable fluxes are linear to within 0.3 %, so the
    PK amounts follow exp(A dt) exactly (computed by eigen decomposition) and
    only the slow PD subsystem needs stepping.  Falls back (status
    _LINEAR_FALLBACK) when the decomposition cannot reproduce the initial
    amounts, e.g. for a defective eigenbasis.
    """
    v1 = p[0]
    a = np.zeros((3, 3), dtype=np.complex128)
    ke = p[3] / (p[2] * v1)     # VM_EL / (KM_EL V1)
    kt = p[5] / (p[4] * v1)     # VM_TR / (KM_TR V1)
    k21 = p[6]
    k13 = p[7] / v1
    k31 = p[7] / p[1]
    a[0, 0] = -(ke + kt + k13)
    a[0, 1] = k21
    a[0, 2] = k31
    a[1, 0] = kt
    a[1, 1] = -k21
    a[2, 0] = k13
    a[2, 2] = -k31
    w, vv = np.linalg.eig(a)
    pk0 = y[:3].astype(np.complex128)
    alpha = np.linalg.solve(vv, pk0)
    # verify the decomposition reproduces the initial condition
    recon_err = 0.0
    for j in range(3):
        r = 0.0j
        for i in range(3):
            r += vv[j, i] * alpha[i]
        recon_err = max(recon_err, abs((r - pk0[j]).real) + abs(r.imag - pk0[j].imag))
    if recon_err > 1e-8 * (1.0 + abs(y[0]) + abs(y[1]) + abs(y[2])):
        return _LINEAR_FALLBACK, t0, g_lo
    beta = alpha * vv[0, :] / v1  # c1(t0 + dt) = Re sum beta exp(w dt)

    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    k5 = np.empty(6)
    k6 = np.empty(6)
    k7 = np.empty(6)
    ytmp = np.empty(6)
    ynew = np.empty(6)
    y6 = y[3:].copy()

    t = t0
    tiny = 1e-9 * (1.0 + abs(t1))
    h = min(1.0, t1 - t0)
    gi = g_lo
    err_prev = 1.0
    rejected = False

    _rhs_pd(t - t0, y6, beta, w, p, k1)
    while t < t1:
        last = False
        if h >= t1 - t - tiny:
            h = t1 - t
            last = True
        if h < 1e-12 * max(1.0, abs(t)):
            return STATUS_STEP_UNDERFLOW, t, gi
        dt0 = t - t0

        for i in range(6):
            ytmp[i] = y6[i] + h * _A21 * k1[i]
        _rhs_pd(dt0 + _C2 * h, ytmp, beta, w, p, k2)
        for i in range(6):
            ytmp[i] = y6[i] + h * (_A31 * k1[i] + _A32 * k2[i])
        _rhs_pd(dt0 + _C3 * h, ytmp, beta, w, p, k3)
        for i in range(6):
            ytmp[i] = y6[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
        _rhs_pd(dt0 + _C4 * h, ytmp, beta, w, p, k4)
        for i in range(6):
            ytmp[i] = y6[i] + h * (
                _A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i]
            )
        _rhs_pd(dt0 + _C5 * h, ytmp, beta, w, p, k5)
        for i in range(6):
            ytmp[i] = y6[i] + h * (
                _A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i]
                + _A65 * k5[i]
            )
        _rhs_pd(dt0 + _C6 * h, ytmp, beta, w, p, k6)
        for i in range(6):
            ynew[i] = y6[i] + h * (
                _B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i]
                + _B6 * k6[i]
            )
        _rhs_pd(dt0 + h, ynew, beta, w, p, k7)

        errnorm = 0.0
        for i in range(6):
            e = h * (
                _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i]
                + _E6 * k6[i] + _E7 * k7[i]
            )
            ay = abs(y6[i])
            ayn = abs(ynew[i])
            sc = atol + rtol * (ay if ay > ayn else ayn)
            r = e / sc
            errnorm += r * r
        errnorm = np.sqrt(errnorm / 6.0)

        if errnorm <= 1.0:
            tnew = t1 if last else t + h
            while gi < g_hi and grid[gi] <= tnew + 1e-12:
                theta = (grid[gi] - t) / h
                if theta > 1.0:
                    theta = 1.0
                if theta < 0.0:
                    theta = 0.0
                for i in range(6):
                    ydiff = ynew[i] - y6[i]
                    bspl = h * k1[i] - ydiff
                    cont4 = ydiff - h * k7[i] - bspl
                    cont5 = h * (
                        _D1 * k1[i] + _D3 * k3[i] + _D4 * k4[i]
                        + _D5 * k5[i] + _D6 * k6[i] + _D7 * k7[i]
                    )
                    v = y6[i] + theta * (
                        ydiff + (1.0 - theta) * (
                            bspl + theta * (cont4 + (1.0 - theta) * cont5)
                        )
                    )
                    if PD_FLOOR < v < 0.0:
                        v = 0.0
                    out[gi, 3 + i] = v
                dtg = grid[gi] - t0
                for j in range(3):
                    pkv = 0.0
                    for i in range(3):
                        pkv += (vv[j, i] * alpha[i] * np.exp(w[i] * dtg)).real
                    out[gi, j] = pkv if pkv > 0.0 else 0.0
                gi += 1

            t = tnew
            for i in range(6):
                y6[i] = ynew[i]
                k1[i] = k7[i]
            for i in range(6):
                if y6[i] < 0.0:
                    if y6[i] < PD_FLOOR:
                        return STATUS_NEGATIVE_STATE, t, gi
                    y6[i] = 0.0
            if errnorm < 1e-14:
                fac = 5.0
            else:
                fac = 0.9 * errnorm ** -0.14 * err_prev ** 0.08
            if fac > 5.0:
                fac = 5.0
            if rejected and fac > 1.0:
                fac = 1.0
            err_prev = errnorm if errnorm > 1e-14 else 1e-14
            rejected = False
            h *= fac
        else:
            rejected = True
            fac = 0.9 * errnorm ** -0.2
            if fac < 0.2:
                fac = 0.2
            h *= fac

    dz = t1 - t0
    for j in range(3):
        pkv = 0.0
        for i in range(3):
            pkv += (vv[j, i] * alpha[i] * np.exp(w[i] * dz)).real
        y[j] = pkv if pkv > 0.0 else 0.0
    for i in range(6):
        y[3 + i] = y6[i]
    return STATUS_OK, t1, gi


@njit(cache=True, nogil=True)
def _simulate_span(y, p, t0, t1, inf_start, inf_end, inf_rate, grid, out,
                   rtol, atol, c_lin):
    """Integrate y over [t0, t1] under piecewise-constant infusions.

    inf_* arrays describe non-overlapping infusion windows sorted by start
    time; grid must be sorted ascending within [t0, t1] and out has matching
    rows.  c_lin > 0 enables the drug-free fast path (see _integrate_pd_linear).
    Returns (status, t_fail); t_fail is meaningful on failure only.
    """
    n_inf = inf_start.shape[0]
    edges = np.empty(2 + 2 * n_inf)
    ne = 0
    edges[ne] = t0
    ne += 1
    for j in range(n_inf):
        if t0 < inf_start[j] and inf_start[j] < t1:
            edges[ne] = inf_start[j]
            ne += 1
        if t0 < inf_end[j] and inf_end[j] < t1:
            edges[ne] = inf_end[j]
            ne += 1
    edges[ne] = t1
    ne += 1
    edges = np.sort(edges[:ne])

    gi = 0
    n_grid = grid.shape[0]
    while gi < n_grid and grid[gi] <= t0 + 1e-12:
        for i in range(NSTATE):
            out[gi, i] = y[i]
        gi += 1

    h = 0.0
    for s in range(ne - 1):
        a = edges[s]
        b = edges[s + 1]
        if b - a <= 1e-12:
            continue
        tm = 0.5 * (a + b)
        u = 0.0
        for j in range(n_inf):
            if inf_start[j] - 1e-12 <= tm and tm < inf_end[j] - 1e-12:
                u = inf_rate[j]
        g_hi = gi
        while g_hi < n_grid and grid[g_hi] <= b + 1e-12:
            g_hi += 1
        status, aux, gi = _integrate_segment(
            y, a, b, u, p, rtol, atol, grid, gi, g_hi, out, h, c_lin
        )
        if status == STATUS_SWITCH_LINEAR:
            t_sw = aux
            status, aux, gi = _integrate_pd_linear(
                y, t_sw, b, p, rtol, atol, grid, gi, g_hi, out
            )
            if status == _LINEAR_FALLBACK:
                status, aux, gi = _integrate_segment(
                    y, t_sw, b, u, p, rtol, atol, grid, gi, g_hi, out, 0.0, 0.0
                )
            h = 0.0
        else:
            h = aux
        if status != STATUS_OK:
            return status, aux
    return STATUS_OK, t1


@njit(cache=True, nogil=True, parallel=True)
def _simulate_span_batch(y0s, ps, t0, t1, inf_start, inf_end, inf_rates,
                         grid, outs, status, rtol, atol, c_lin):
    """Independent per-member integrations (shared windows, per-member rates).

    y0s is updated in place to the end-of-span states.  Members write disjoint
    rows, so results are bit-identical for any thread count; callers serialize
    invocations (the parallel region is not re-entrant).
    """
    m = y0s.shape[0]
    for j in prange(m):
        y = y0s[j].copy()
        st, _ = _simulate_span(
            y, ps[j], t0, t1, inf_start, inf_end, inf_rates[j], grid, outs[j],
            rtol, atol, c_lin,
        )
        status[j] = st
        y0s[j] = y
