"""Two-compartment exchange model (2CXM) forward model.

The tissue curve is the convolution of the plasma-flow-scaled bi-exponential
residue function with the delayed arterial input function.  The delayed AIF is
resampled onto the acquisition grid by linear interpolation and each
exponential is then integrated exactly against the resulting piecewise-linear
input, which keeps the model accurate for stiff kernels (small ``v_p``) where a
plain trapezoidal sum breaks down.

A Runge-Kutta integration of the compartment ODEs (:func:`ode_oracle`) is kept
as an independent check of the analytic route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

PARAM_NAMES = ("f_b", "v_p", "v_e", "ps", "tau0")
KINETIC_NAMES = PARAM_NAMES[:4]

_DISC_CLAMP = 1e-12


class DegenerateModelError(ValueError):
    """The two residue exponents coincide and the bi-exponential collapses."""


@dataclass(frozen=True)
class KineticParams:
    """Blood flow, volumes, permeability and bolus delay of one voxel.

    Units: ``f_b`` and ``ps`` in mL/min/mL, ``v_p`` and ``v_e`` as volume
    fractions, ``tau0`` in minutes.
    """

    f_b: float
    v_p: float
    v_e: float
    ps: float
    tau0: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.f_b, self.v_p, self.v_e, self.ps, self.tau0], dtype=float)

    @classmethod
    def from_array(cls, values) -> "KineticParams":
        v = [float(x) for x in values]
        if len(v) == 4:
            v.append(0.0)
        return cls(*v[:5])

    def validate(self, *, allow_zero_ps: bool = False) -> None:
        """Raise ``ValueError`` unless the parameters describe a physical voxel."""
        for name in ("f_b", "v_p", "v_e"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if allow_zero_ps:
            if not self.ps >= 0:
                raise ValueError(f"ps must be >= 0, got {self.ps}")
        elif not self.ps > 0:
            raise ValueError(f"ps must be > 0, got {self.ps}")
        if not self.tau0 >= 0:
            raise ValueError(f"tau0 must be >= 0, got {self.tau0}")
        if self.v_p + self.v_e > 1.0:
            raise ValueError("v_p + v_e must not exceed 1")


@dataclass(frozen=True)
class ResidueCoefficients:
    alpha: float
    beta: float
    a: float

    def residue(self, t) -> np.ndarray:
        """Evaluate R(t) = a exp(alpha t) + (1 - a) exp(beta t)."""
        t = np.asarray(t, dtype=float)
        return self.a * np.exp(self.alpha * t) + (1.0 - self.a) * np.exp(self.beta * t)


@dataclass(frozen=True)
class SampledCurve:
    """Concentration (mM) sampled on a uniform time grid (minutes)."""

    times: np.ndarray
    values: np.ndarray
    dt: float = field(init=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if times.size < 2:
            raise ValueError("a sampled curve needs at least 2 samples")
        steps = np.diff(times)
        dt = float(steps[0])
        if dt <= 0 or np.any(np.abs(steps - dt) > 1e-9 * max(abs(dt), times[-1])):
            raise ValueError("times must be strictly increasing with uniform spacing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dt", dt)

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class AcquisitionConfig:
    """Sampling and signal-conversion constants.

    ``r1`` is the contrast-agent relaxivity in 1/s per mmol/L and ``t1b`` the
    native blood T1 in ms.
    """

    dt: float = 0.012
    total_time: float = 3.0
    hct: float = 0.45
    r1: float = 4.5
    t1b: float = 1736.0
    n_baseline: int = 5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.total_time < self.dt:
            raise ValueError("total_time must be >= dt")
        if self.n_baseline < 1:
            raise ValueError("n_baseline must be >= 1")
        if not 0 <= self.hct < 1:
            raise ValueError("hct must lie in [0, 1)")

    def grid(self) -> np.ndarray:
        return time_grid(self.dt, self.total_time)


def time_grid(dt: float, total_time: float) -> np.ndarray:
    """Uniform grid ``0, dt, ..., floor(T/dt) * dt``."""
    if not dt > 0 or total_time < dt:
        raise ValueError("need dt > 0 and total_time >= dt")
    n = int(math.floor(total_time / dt + 1e-9)) + 1
    return dt * np.arange(n, dtype=float)


# --------------------------------------------------------------------------
# numba kernels (shared with the fitting modules)


@numba.njit(cache=True, nogil=True)
def _coefficients(fp, vp, ve, ps):
    """Return (alpha, beta, a, ok).  ``ok`` is False for a repeated root."""
    s = ps / vp + ps / ve + fp / vp
    prod = ps * fp / (ve * vp)
    disc = s * s - 4.0 * prod
    if disc < 0.0:
        if disc > -_DISC_CLAMP:
            disc = 0.0
        else:
            return np.nan, np.nan, np.nan, False
    root = math.sqrt(disc)
    beta = -0.5 * (s + root)
    if beta == 0.0:
        return np.nan, np.nan, np.nan, False
    # product of roots is prod; avoids cancellation in -s + root
    alpha = prod / beta
    if alpha == beta:
        return alpha, beta, np.nan, False
    a = (alpha + ps / vp + ps / ve) / (alpha - beta)
    return alpha, beta, a, True


@numba.njit(cache=True, nogil=True)
def _shift_aif(aif, dt, tau0, out):
    n = aif.size
    lag = tau0 / dt
    for j in range(n):
        x = j - lag
        if x <= 0.0:
            out[j] = aif[0]
        elif x >= n - 1:
            out[j] = aif[n - 1]
        else:
            k = int(x)
            f = x - k
            out[j] = aif[k] * (1.0 - f) + aif[k + 1] * f


@numba.njit(cache=True, nogil=True)
def _expconv_add(u, dt, lam, weight, out):
    """out += weight * int_0^t exp(lam (t - s)) u(s) ds, u piecewise linear."""
    x = lam * dt
    decay = math.exp(x)
    if abs(x) < 1e-3:
        w_sum = dt * (1.0 + x / 2.0 + x * x / 6.0)
        w_old = dt * (0.5 + x / 3.0 + x * x / 8.0)
    else:
        w_sum = dt * math.expm1(x) / x
        w_old = dt * (x * decay - math.expm1(x)) / (x * x)
    w_new = w_sum - w_old
    acc = 0.0
    for n in range(1, u.size):
        acc = decay * acc + w_old * u[n - 1] + w_new * u[n]
        out[n] += weight * acc


@numba.njit(cache=True, nogil=True)
def _convolve_shifted(fb, vp, ve, ps, hct, shifted, dt, out):
    """Tissue curve for an already delayed AIF; False on a degenerate model."""
    fp = fb / (1.0 - hct)
    alpha, beta, a, ok = _coefficients(fp, vp, ve, ps)
    out[:] = 0.0
    if not ok:
        out[:] = np.nan
        return False
    if a != 0.0:
        _expconv_add(shifted, dt, alpha, fp * a, out)
    if a != 1.0:
        _expconv_add(shifted, dt, beta, fp * (1.0 - a), out)
    return True


@numba.njit(cache=True, nogil=True)
def _forward_into(fb, vp, ve, ps, tau0, hct, aif, dt, shifted, out):
    """Write the tissue curve into ``out``; returns False on a degenerate model."""
    _shift_aif(aif, dt, tau0, shifted)
    return _convolve_shifted(fb, vp, ve, ps, hct, shifted, dt, out)


@numba.njit(cache=True, nogil=True)
def _forward_batch(params, hct, aif, dt):
    m = params.shape[0]
    n = aif.size
    result = np.empty((m, n))
    shifted = np.empty(n)
    for i in range(m):
        _forward_into(params[i, 0], params[i, 1], params[i, 2], params[i, 3],
                      params[i, 4], hct, aif, dt, shifted, result[i])
    return result


@numba.njit(cache=True, nogil=True)
def _rk4_2cxm(fp, vp, ve, ps, u, dt, substeps):
    n = u.size
    out = np.zeros(n)
    cp = 0.0
    ce = 0.0
    h = dt / substeps
    for j in range(n - 1):
        u0 = u[j]
        slope = (u[j + 1] - u[j]) / dt
        for s in range(substeps):
            t0 = s * h
            ua = u0 + slope * t0
            um = u0 + slope * (t0 + 0.5 * h)
            ub = u0 + slope * (t0 + h)
            k1p = (fp * (ua - cp) + ps * (ce - cp)) / vp
            k1e = ps * (cp - ce) / ve
            p2 = cp + 0.5 * h * k1p
            e2 = ce + 0.5 * h * k1e
            k2p = (fp * (um - p2) + ps * (e2 - p2)) / vp
            k2e = ps * (p2 - e2) / ve
            p3 = cp + 0.5 * h * k2p
            e3 = ce + 0.5 * h * k2e
            k3p = (fp * (um - p3) + ps * (e3 - p3)) / vp
            k3e = ps * (p3 - e3) / ve
            p4 = cp + h * k3p
            e4 = ce + h * k3e
            k4p = (fp * (ub - p4) + ps * (e4 - p4)) / vp
            k4e = ps * (p4 - e4) / ve
            cp += h * (k1p + 2.0 * k2p + 2.0 * k3p + k4p) / 6.0
            ce += h * (k1e + 2.0 * k2e + 2.0 * k3e + k4e) / 6.0
        out[j + 1] = vp * cp + ve * ce
    return out


# --------------------------------------------------------------------------
# public API


def _check_params(params: KineticParams, hct: float) -> None:
    params.validate(allow_zero_ps=True)
    if not 0 <= hct < 1:
        raise ValueError("hct must lie in [0, 1)")


def residue_coefficients(params: KineticParams, hct: float = 0.0) -> ResidueCoefficients:
    """Exponents and mixing weight of the 2CXM residue function.

    Plasma flow is ``f_b / (1 - hct)``.  Raises :class:`DegenerateModelError`
    when the two exponents coincide.
    """
    _check_params(params, hct)
    fp = params.f_b / (1.0 - hct)
    alpha, beta, a, ok = _coefficients(fp, params.v_p, params.v_e, params.ps)
    if not ok:
        raise DegenerateModelError(
            f"repeated residue exponent (alpha={alpha}, beta={beta}) for {params}"
        )
    return ResidueCoefficients(float(alpha), float(beta), float(a))


def _check_grid(aif: SampledCurve, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.shape != aif.times.shape or not np.allclose(grid, aif.times, rtol=0, atol=1e-9):
        raise ValueError("AIF must be sampled on the requested time grid")
    return grid


def forward_model(params: KineticParams, aif: SampledCurve, grid=None, hct: float = 0.0) -> SampledCurve:
    """Tissue concentration ``C(t) = [F_p R] * C_AIF(t - tau0)`` on ``grid``."""
    _check_params(params, hct)
    grid = aif.times if grid is None else _check_grid(aif, grid)
    out = np.empty(grid.size)
    shifted = np.empty(grid.size)
    ok = _forward_into(params.f_b, params.v_p, params.v_e, params.ps, params.tau0,
                       hct, aif.values, aif.dt, shifted, out)
    if not ok:
        raise DegenerateModelError(f"repeated residue exponent for {params}")
    return SampledCurve(grid, out)


def forward_batch(params: np.ndarray, aif: SampledCurve, hct: float = 0.0) -> np.ndarray:
    """Evaluate many parameter rows ``(f_b, v_p, v_e, ps, tau0)`` at once."""
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=float)
    return _forward_batch(params, hct, np.ascontiguousarray(aif.values), aif.dt)


def ode_oracle(params: KineticParams, aif: SampledCurve, grid=None, hct: float = 0.0,
               substeps: int = 10, max_step_stiffness: float = 0.2) -> SampledCurve:
    """Integrate the plasma/interstitium ODEs with classical RK4.

    Each sampling interval is split into ``substeps`` RK4 steps.  For stiff
    parameter sets the split is refined until ``h * |fastest rate|`` is at
    most ``max_step_stiffness``, since fixed-step RK4 diverges otherwise.
    The delayed AIF is interpolated linearly between its (delayed) samples.
    Returns ``v_p C_p + v_e C_e``.
    """
    _check_params(params, hct)
    grid = aif.times if grid is None else _check_grid(aif, grid)
    fp = params.f_b / (1.0 - hct)
    fastest = fp / params.v_p + params.ps / params.v_p + params.ps / params.v_e
    m = max(int(substeps), int(math.ceil(aif.dt * fastest / max_step_stiffness)))
    shifted = np.empty(grid.size)
    _shift_aif(aif.values, aif.dt, params.tau0, shifted)
    out = _rk4_2cxm(fp, params.v_p, params.v_e, params.ps, shifted, aif.dt, m)
    return SampledCurve(grid, out)


def signal_to_concentration(signal: SampledCurve, s_lv0: float, cfg: AcquisitionConfig) -> SampledCurve:
    """Relative signal enhancement to gadolinium concentration (mM).

    ``S(0)`` is the mean of the first ``cfg.n_baseline`` samples and
    ``s_lv0`` the pre-contrast left-ventricular blood signal.
    """
    if not s_lv0 > 0:
        raise ValueError(f"s_lv0 must be > 0, got {s_lv0}")
    if len(signal) < cfg.n_baseline:
        raise ValueError("signal shorter than the baseline window")
    s0 = float(np.mean(signal.values[: cfg.n_baseline]))
    scale = cfg.r1 * cfg.t1b * 1e-3  # r1 [1/(s mM)] * T1 [s]
    return SampledCurve(signal.times, (signal.values - s0) / s_lv0 / scale)


def concentration_to_enhancement(conc: SampledCurve, s_lv0: float, cfg: AcquisitionConfig) -> np.ndarray:
    """Inverse of :func:`signal_to_concentration`: returns ``S(t) - S(0)``."""
    if not s_lv0 > 0:
        raise ValueError(f"s_lv0 must be > 0, got {s_lv0}")
    return conc.values * (cfg.r1 * cfg.t1b * 1e-3) * s_lv0


def gamma_variate_aif(grid, peak_amplitude: float = 5.0, onset: float = 0.1,
                      shape: float = 3.0, scale: float = 0.06) -> SampledCurve:
    """Gamma-variate bolus peaking at ``onset + shape * scale`` with height ``peak_amplitude``."""
    if not (shape > 0 and scale > 0 and peak_amplitude > 0):
        raise ValueError("shape, scale and peak_amplitude must be > 0")
    grid = np.asarray(grid, dtype=float)
    t_pk = shape * scale
    x = np.clip(grid - onset, 0.0, None) / t_pk
    values = np.where(grid > onset, peak_amplitude * x**shape * np.exp(shape * (1.0 - x)), 0.0)
    return SampledCurve(grid, values)
