"""Hierarchical Bayesian 2CXM fitting with a Laplace (L1) spatial prior.

Every masked voxel carries its own kinetic parameters, bolus delay, noise
variance and a pair of hyperparameters (the means of the Gaussian priors on
``f_b`` and ``ps``).  A single-site Metropolis-Hastings sampler sweeps the
voxels in ascending id order:

* each of ``f_b, v_p, v_e, ps, tau0`` gets a Gaussian random-walk proposal,
  scored by the Gaussian likelihood, its own prior terms and the spatial
  terms it shares with its neighbours;
* the noise variance is drawn from its conjugate inverse-gamma conditional;
* the two hyperparameters get random-walk proposals against their flat
  bounded hyperpriors.

Proposal scales adapt towards an acceptance rate of 0.234 during burn-in and
are frozen afterwards.  The inner loop is compiled with numba; random numbers
are drawn in blocks by NumPy so chains are reproducible from their seed.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .kinetics import KineticParams, SampledCurve, _convolve_shifted, _forward_into, _shift_aif
from .phantom import NoisySeries

PARAMS = ("f_b", "v_p", "v_e", "ps", "tau0")
UPDATES = PARAMS + ("alpha_fb", "alpha_ps")
TARGET_RATE = 0.234
WEIGHT_FLOOR = 1e-3
RHAT_LIMIT = 1.1
WEIGHT_MODES = ("previous", "current")


@dataclass(frozen=True)
class PriorSpec:
    """Prior configuration.

    ``fb_var``/``ps_var`` are the variances of the Gaussian priors on flow and
    permeability; in hierarchical mode their means are sampled within
    ``alpha_fb_bounds``/``alpha_ps_bounds``, otherwise they are fixed at
    ``fixed_fb_mean``/``fixed_ps_mean``.  ``spatial_scale=inf`` switches the
    spatial prior off.

    ``weights`` picks how the spatial weight ``1/|theta|`` is evaluated.
    ``"current"`` uses the value of the state being scored, so the spatial
    term is an ordinary density and the sampler is a valid Metropolis-Hastings
    chain.  ``"previous"`` freezes the weights at the start of each sweep;
    that kernel has no stationary density of this form and drifts towards
    the weight floor on flat likelihood ridges.
    """

    fb_var: float = 0.2
    ps_var: float = 0.1
    vp_max: float = 0.4
    ve_max: float = 0.5
    tau0_max: float = 0.5
    ig_shape: float = 0.001
    ig_scale: float = 0.001
    spatial_scale: float = 0.2
    alpha_fb_bounds: tuple = (0.001, 7.0)
    alpha_ps_bounds: tuple = (0.001, 5.0)
    hierarchical: bool = True
    fixed_fb_mean: float = 3.5
    fixed_ps_mean: float = 1.0
    weights: str = "current"

    def __post_init__(self):
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weights must be one of {WEIGHT_MODES}")
        for name in ("fb_var", "ps_var", "vp_max", "ve_max", "tau0_max", "ig_shape", "ig_scale",
                     "spatial_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("alpha_fb_bounds", "alpha_ps_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a nonempty interval")

    @classmethod
    def non_hierarchical(cls, **overrides) -> "PriorSpec":
        """Fixed prior means: f_b ~ N(3.5, 0.2), ps ~ N(1.0, 0.2)."""
        kw = {"hierarchical": False, "ps_var": 0.2}
        kw.update(overrides)
        return cls(**kw)

    def config_vector(self) -> np.ndarray:
        inv_b = 0.0 if math.isinf(self.spatial_scale) else 1.0 / self.spatial_scale
        return np.array([
            self.fb_var, self.ps_var, self.vp_max, self.ve_max, self.tau0_max,
            self.ig_shape, self.ig_scale, inv_b,
            self.alpha_fb_bounds[0], self.alpha_fb_bounds[1],
            self.alpha_ps_bounds[0], self.alpha_ps_bounds[1],
            1.0 if self.weights == "current" else 0.0,
        ], dtype=float)

    def in_support(self, theta) -> bool:
        f_b, v_p, v_e, ps, tau0 = (float(x) for x in theta)
        return (f_b > 0 and 0 < v_p <= self.vp_max and 0 < v_e <= self.ve_max and ps > 0
                and 0 <= tau0 <= self.tau0_max)

    def support_mask(self, thetas) -> np.ndarray:
        """Row-wise :meth:`in_support` for an array whose last axis holds the five parameters."""
        t = np.asarray(thetas, dtype=float)
        return ((t[..., 0] > 0) & (t[..., 1] > 0) & (t[..., 1] <= self.vp_max) & (t[..., 2] > 0)
                & (t[..., 2] <= self.ve_max) & (t[..., 3] > 0) & (t[..., 4] >= 0)
                & (t[..., 4] <= self.tau0_max))


# ---------------------------------------------------------------------------
# neighbour graph


@dataclass
class NeighborGraph:
    """Neighbour lists of the masked voxels, keyed by voxel id (``row * width + col``)."""

    shape: tuple
    voxel_ids: np.ndarray
    neighbors: dict

    def csr(self):
        """Forward and reverse adjacency as CSR arrays over voxel rows."""
        row_of = {int(v): i for i, v in enumerate(self.voxel_ids)}
        ptr, idx = [0], []
        reverse = [[] for _ in self.voxel_ids]
        for i, vid in enumerate(self.voxel_ids):
            for nb in self.neighbors[int(vid)]:
                idx.append(row_of[nb])
                reverse[row_of[nb]].append(i)
            ptr.append(len(idx))
        rptr, ridx = [0], []
        for lst in reverse:
            ridx.extend(lst)
            rptr.append(len(ridx))
        as_int = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
        return as_int(ptr), as_int(idx), as_int(rptr), as_int(ridx)


# diagonal offsets tried for each missing axial neighbour, in order
_FALLBACK = {
    (-1, 0): ((-1, -1), (-1, 1), (1, -1), (1, 1)),
    (1, 0): ((1, -1), (1, 1), (-1, -1), (-1, 1)),
    (0, -1): ((-1, -1), (1, -1), (-1, 1), (1, 1)),
    (0, 1): ((-1, 1), (1, 1), (-1, -1), (1, -1)),
}


def build_neighbor_graph(mask) -> NeighborGraph:
    """Axial neighbours, with diagonal then nearest-voxel fallbacks at the mask edge.

    A missing axial neighbour (above, below, left, right) is replaced by the
    first in-mask diagonal in :data:`_FALLBACK` order, else by the nearest
    in-mask voxel (ties to the lowest id).  Repeats are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    height, width = mask.shape
    ids = np.flatnonzero(mask.ravel())
    if ids.size == 0:
        raise ValueError("mask is empty")
    if ids.size == 1:
        raise ValueError("a single-voxel mask has no neighbours")
    rows, cols = np.divmod(ids, width)

    def inside(r, c):
        return 0 <= r < height and 0 <= c < width and mask[r, c]

    neighbors = {}
    for vid, r, c in zip(ids, rows, cols):
        chosen = []
        for (dr, dc), diagonals in _FALLBACK.items():
            if inside(r + dr, c + dc):
                chosen.append((r + dr) * width + c + dc)
                continue
            for er, ec in diagonals:
                if inside(r + er, c + ec):
                    chosen.append((r + er) * width + c + ec)
                    break
            else:
                d2 = (rows - r) ** 2 + (cols - c) ** 2
                d2 = np.where(ids == vid, np.iinfo(np.int64).max, d2)
                chosen.append(int(ids[np.argmin(d2)]))  # argmin picks the lowest id on ties
        neighbors[int(vid)] = tuple(dict.fromkeys(int(x) for x in chosen))
    return NeighborGraph((height, width), ids, neighbors)


# ---------------------------------------------------------------------------
# densities (reference implementations; the sampler uses compiled deltas)


def log_likelihood(params: KineticParams, sigma2: float, curve: SampledCurve, aif: SampledCurve,
                   hct: float = 0.0) -> float:
    """Gaussian log-likelihood of ``curve`` with noise variance ``sigma2``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    n = curve.values.size
    model = np.empty(n)
    _forward_into(params.f_b, params.v_p, params.v_e, params.ps, params.tau0, hct,
                  np.ascontiguousarray(aif.values), aif.dt, np.empty(n), model)
    sse = float(np.sum((curve.values - model) ** 2))
    return -0.5 * n * math.log(2.0 * math.pi * sigma2) - sse / (2.0 * sigma2)


def spatial_weights(previous: KineticParams | np.ndarray) -> np.ndarray:
    """Inverse magnitude of the previous sample of ``f_b, v_p, v_e, ps`` (floored)."""
    prev = previous.as_array() if isinstance(previous, KineticParams) else np.asarray(previous, float)
    return 1.0 / np.maximum(np.abs(prev[:4]), WEIGHT_FLOOR)


def _log_norm_cdf(x: float) -> float:
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


def log_prior(params: KineticParams, sigma2: float, alpha, neighbor_params, weights,
              spec: PriorSpec = PriorSpec()) -> float:
    """Log prior of one voxel up to a constant.

    Gaussian terms for ``f_b`` and ``ps`` around the voxel's hyperparameters
    (truncated to positive values), support indicators for ``v_p``, ``v_e``
    and ``tau0``, an inverse-gamma term for ``sigma2`` and the weighted L1
    distance to every neighbour over the four kinetic parameters.
    """
    theta = params.as_array()
    if not spec.in_support(theta) or not sigma2 > 0:
        return -math.inf
    a_fb, a_ps = (float(a) for a in alpha)
    lp = -((theta[0] - a_fb) ** 2) / (2 * spec.fb_var) - _log_norm_cdf(a_fb / math.sqrt(spec.fb_var))
    lp += -((theta[3] - a_ps) ** 2) / (2 * spec.ps_var) - _log_norm_cdf(a_ps / math.sqrt(spec.ps_var))
    lp += -(spec.ig_shape + 1.0) * math.log(sigma2) - spec.ig_scale / sigma2
    if not math.isinf(spec.spatial_scale):
        w = np.asarray(weights, dtype=float)
        dist = sum(float(np.sum(w * np.abs(theta[:4] - nb.as_array()[:4]))) for nb in neighbor_params)
        lp -= dist / spec.spatial_scale
    return lp


def log_hyperprior(alpha, spec: PriorSpec = PriorSpec()) -> float:
    lo_f, hi_f = spec.alpha_fb_bounds
    lo_p, hi_p = spec.alpha_ps_bounds
    return 0.0 if (lo_f <= alpha[0] <= hi_f and lo_p <= alpha[1] <= hi_p) else -math.inf


# ---------------------------------------------------------------------------
# compiled sampler


@numba.njit(cache=True, nogil=True)
def _in_support(k, x, cfg):
    if k == 0 or k == 3:
        return x > 0.0
    if k == 1:
        return 0.0 < x <= cfg[2]
    if k == 2:
        return 0.0 < x <= cfg[3]
    return 0.0 <= x <= cfg[4]


@numba.njit(cache=True, nogil=True)
def _log_phi(x):
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@numba.njit(cache=True, nogil=True)
def _spatial_delta(i, k, old, new, theta, weights, nbr_ptr, nbr_idx, rev_ptr, rev_idx, current):
    """Change in the weighted L1 distance when theta[i, k] moves old -> new.

    With ``current`` every weight is the inverse of the value it belongs to
    in the state being scored; otherwise the sweep-start ``weights`` are used.
    """
    acc = 0.0
    w_old = weights[i, k]
    w_new = w_old
    if current:
        w_old = 1.0 / max(abs(old), 1e-3)
        w_new = 1.0 / max(abs(new), 1e-3)
    for p in range(nbr_ptr[i], nbr_ptr[i + 1]):
        t = theta[nbr_idx[p], k]
        acc += w_new * abs(new - t) - w_old * abs(old - t)
    for p in range(rev_ptr[i], rev_ptr[i + 1]):
        j = rev_idx[p]
        t = theta[j, k]
        w = 1.0 / max(abs(t), 1e-3) if current else weights[j, k]
        acc += w * (abs(t - new) - abs(t - old))
    return acc


@numba.njit(cache=True, nogil=True)
def _prior_delta(i, k, old, new, theta, alpha, weights, cfg, nbr_ptr, nbr_idx, rev_ptr, rev_idx):
    d = 0.0
    if k == 0:
        d += ((old - alpha[i, 0]) ** 2 - (new - alpha[i, 0]) ** 2) / (2.0 * cfg[0])
    elif k == 3:
        d += ((old - alpha[i, 1]) ** 2 - (new - alpha[i, 1]) ** 2) / (2.0 * cfg[1])
    if k < 4 and cfg[7] > 0.0:
        d -= cfg[7] * _spatial_delta(i, k, old, new, theta, weights, nbr_ptr, nbr_idx, rev_ptr, rev_idx,
                                     cfg[12] > 0.0)
    return d


@numba.njit(cache=True, nogil=True)
def _sweeps(theta, sigma2, alpha, scales, acc, prop, model, shifted, sse,
            curves, aif, dt, hct, nbr_ptr, nbr_idx, rev_ptr, rev_idx,
            cfg, update, use_lik, update_sigma2, z, u, g, temps,
            out_theta, out_sigma2, out_alpha, offset, store):
    n_sweeps = z.shape[0]
    nvox = theta.shape[0]
    n = aif.size
    weights = np.empty((nvox, 4))
    trial = np.empty(n)
    trial_shift = np.empty(n)
    for s in range(n_sweeps):
        for i in range(nvox):
            for k in range(4):
                weights[i, k] = 1.0 / max(abs(theta[i, k]), 1e-3)
        for i in range(nvox):
            for k in range(5):
                if not update[k]:
                    continue
                prop[i, k] += 1
                old = theta[i, k]
                new = old + scales[i, k] * z[s, i, k]
                if not _in_support(k, new, cfg):
                    continue
                d = _prior_delta(i, k, old, new, theta, alpha, weights, cfg,
                                 nbr_ptr, nbr_idx, rev_ptr, rev_idx)
                sse_new = 0.0
                if use_lik:
                    theta[i, k] = new
                    if k == 4:
                        _shift_aif(aif, dt, new, trial_shift)
                        _convolve_shifted(theta[i, 0], theta[i, 1], theta[i, 2], theta[i, 3],
                                          hct, trial_shift, dt, trial)
                    else:
                        _convolve_shifted(theta[i, 0], theta[i, 1], theta[i, 2], theta[i, 3],
                                          hct, shifted[i], dt, trial)
                    theta[i, k] = old
                    for j in range(n):
                        r = curves[i, j] - trial[j]
                        sse_new += r * r
                    if not math.isfinite(sse_new):
                        continue
                    d -= (sse_new - sse[i]) / (2.0 * sigma2[i] * temps[s])
                if math.log(u[s, i, k]) < d:
                    theta[i, k] = new
                    acc[i, k] += 1
                    if use_lik:
                        sse[i] = sse_new
                        model[i, :] = trial
                        if k == 4:
                            shifted[i, :] = trial_shift
            if update_sigma2:
                sigma2[i] = (cfg[6] + 0.5 * sse[i]) / g[s, i]
            for h in range(2):
                if not update[5 + h]:
                    continue
                k = 5 + h
                prop[i, k] += 1
                old = alpha[i, h]
                new = old + scales[i, k] * z[s, i, k]
                lo = cfg[8 + 2 * h]
                hi = cfg[9 + 2 * h]
                if new < lo or new > hi:
                    continue
                var = cfg[h]
                x = theta[i, 0] if h == 0 else theta[i, 3]
                d = ((x - old) ** 2 - (x - new) ** 2) / (2.0 * var)
                d += _log_phi(old / math.sqrt(var)) - _log_phi(new / math.sqrt(var))
                if math.log(u[s, i, k]) < d:
                    alpha[i, h] = new
                    acc[i, k] += 1
        if store:
            out_theta[offset + s] = theta
            out_sigma2[offset + s] = sigma2
            out_alpha[offset + s] = alpha


# ---------------------------------------------------------------------------
# chain state and driver


@dataclass
class SamplerData:
    """Observed curves for the sampled voxels (rows in voxel-id order)."""

    curves: np.ndarray
    aif: np.ndarray
    dt: float
    hct: float = 0.0

    @classmethod
    def from_series(cls, series: NoisySeries, rows=None) -> "SamplerData":
        curves = series.curves if rows is None else series.curves[rows]
        return cls(np.ascontiguousarray(curves, dtype=float), np.ascontiguousarray(series.aif.values),
                   series.aif.dt, series.hct)


@dataclass
class ChainState:
    theta: np.ndarray  # (V, 5)
    sigma2: np.ndarray  # (V,)
    alpha: np.ndarray  # (V, 2)
    scales: np.ndarray  # (V, 7)
    accepted: np.ndarray  # (V, 7) int64
    proposed: np.ndarray  # (V, 7) int64
    model: np.ndarray = None  # (V, N) current model curves
    shifted: np.ndarray = None  # (V, N) delayed AIF per voxel
    sse: np.ndarray = None  # (V,)
    step: int = 0

    def copy(self) -> "ChainState":
        return replace(self, **{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                for k, v in self.__dict__.items()})

    def refresh(self, data: SamplerData) -> None:
        """Recompute cached model curves from ``theta``."""
        nvox, n = data.curves.shape
        self.model = np.empty((nvox, n))
        self.shifted = np.empty((nvox, n))
        self.sse = np.empty(nvox)
        for i in range(nvox):
            t = self.theta[i]
            _forward_into(t[0], t[1], t[2], t[3], t[4], data.hct, data.aif, data.dt,
                          self.shifted[i], self.model[i])
            self.sse[i] = float(np.sum((data.curves[i] - self.model[i]) ** 2))


DEFAULT_SCALES = (0.1, 0.01, 0.02, 0.05, 0.01, 0.3, 0.2)


@dataclass(frozen=True)
class SamplerOptions:
    """Switches used by calibration runs; production runs keep the defaults."""

    use_likelihood: bool = True
    update_sigma2: bool = True
    update: tuple = (True,) * 5
    initial_scales: tuple = DEFAULT_SCALES
    window: int = 50
    gain: float = 1.0
    fixed_sigma2: float | None = None
    anneal_start: float = 1.0
    anneal_fraction: float = 0.5


def burn_in_temperatures(burn_in: int, start: float, fraction: float) -> np.ndarray:
    """Likelihood temperature per burn-in sweep: geometric decay from ``start`` to 1.

    The decay spans the first ``fraction`` of burn-in; the remaining burn-in
    sweeps run at temperature 1 so the proposal scales settle on the target.
    """
    temps = np.ones(burn_in)
    k = int(round(burn_in * fraction))
    if start > 1.0 and k > 0:
        temps[:k] = start ** (1.0 - np.arange(k) / k)
    return temps


def initial_state(nvox: int, spec: PriorSpec, rng: np.random.Generator,
                  options: SamplerOptions = SamplerOptions(), data: SamplerData | None = None) -> ChainState:
    """Independent uniform draws within the prior supports."""
    lo_f, hi_f = spec.alpha_fb_bounds
    lo_p, hi_p = spec.alpha_ps_bounds
    theta = np.empty((nvox, 5))
    theta[:, 0] = rng.uniform(lo_f, hi_f, nvox)
    theta[:, 1] = spec.vp_max * (1.0 - rng.random(nvox))
    theta[:, 2] = spec.ve_max * (1.0 - rng.random(nvox))
    theta[:, 3] = rng.uniform(lo_p, hi_p, nvox)
    theta[:, 4] = rng.uniform(0.0, spec.tau0_max, nvox)
    alpha = np.empty((nvox, 2))
    if spec.hierarchical:
        alpha[:, 0] = rng.uniform(lo_f, hi_f, nvox)
        alpha[:, 1] = rng.uniform(lo_p, hi_p, nvox)
    else:
        alpha[:, 0] = spec.fixed_fb_mean
        alpha[:, 1] = spec.fixed_ps_mean
    state = ChainState(theta, np.ones(nvox), alpha,
                       np.tile(np.asarray(options.initial_scales, float), (nvox, 1)),
                       np.zeros((nvox, 7), np.int64), np.zeros((nvox, 7), np.int64))
    if data is not None:
        state.refresh(data)
        n = data.curves.shape[1]
        if options.fixed_sigma2 is not None:
            state.sigma2[:] = options.fixed_sigma2
        else:
            state.sigma2[:] = np.maximum(state.sse / n, 1e-12)
    elif options.fixed_sigma2 is not None:
        state.sigma2[:] = options.fixed_sigma2
    return state


def _update_mask(spec: PriorSpec, options: SamplerOptions) -> np.ndarray:
    return np.array(tuple(options.update) + (spec.hierarchical,) * 2, dtype=np.bool_)


def _draw_randoms(rng: np.random.Generator, n_sweeps: int, nvox: int, ntimes: int, spec: PriorSpec):
    z = rng.standard_normal((n_sweeps, nvox, 7))
    u = rng.random((n_sweeps, nvox, 7))
    g = rng.standard_gamma(spec.ig_shape + 0.5 * ntimes, (n_sweeps, nvox))
    return z, u, g


def _run_sweeps(state: ChainState, data: SamplerData, graph_csr, spec: PriorSpec,
                options: SamplerOptions, randoms, store=None, offset: int = 0, temps=None) -> None:
    z, u, g = randoms
    if temps is None:
        temps = np.ones(z.shape[0])
    nvox = state.theta.shape[0]
    if store is None:
        store_arrays = (np.empty((1, nvox, 5)), np.empty((1, nvox)), np.empty((1, nvox, 2)))
        do_store = False
    else:
        store_arrays = store
        do_store = True
    if state.model is None:
        state.refresh(data)
    _sweeps(state.theta, state.sigma2, state.alpha, state.scales, state.accepted, state.proposed,
            state.model, state.shifted, state.sse, data.curves, data.aif, data.dt, data.hct,
            *graph_csr, spec.config_vector(), _update_mask(spec, options),
            options.use_likelihood, options.update_sigma2 and options.use_likelihood,
            z, u, g, np.ascontiguousarray(temps, dtype=float), *store_arrays, offset, do_store)
    state.step += z.shape[0]


def _empty_csr(nvox: int):
    zeros = np.zeros(nvox + 1, dtype=np.int64)
    return zeros, np.zeros(0, np.int64), zeros.copy(), np.zeros(0, np.int64)


def mh_sweep(state: ChainState, data: SamplerData, graph: NeighborGraph | None, spec: PriorSpec,
             rng: np.random.Generator, options: SamplerOptions = SamplerOptions()) -> ChainState:
    """One Metropolis-within-Gibbs sweep over all voxels; updates ``state`` in place."""
    nvox, ntimes = data.curves.shape
    csr = graph.csr() if graph is not None else _empty_csr(nvox)
    _run_sweeps(state, data, csr, spec, options, _draw_randoms(rng, 1, nvox, ntimes, spec))
    return state


def tune_proposals(state: ChainState, accepted: np.ndarray, proposed: np.ndarray,
                   gain: float = 1.0, target: float = TARGET_RATE) -> np.ndarray:
    """Scale each proposal by ``exp(gain * (rate - target))`` from one window's counts."""
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(proposed > 0, accepted / np.maximum(proposed, 1), target)
    state.scales *= np.exp(gain * (rate - target))
    return state.scales


# ---------------------------------------------------------------------------
# diagnostics and summaries


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction over axis 0 (chains) and axis 1 (draws).

    ``chains`` has shape ``(m, n, ...)``; the result has the trailing shape.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError("gelman_rubin needs at least 2 chains")
    n = x.shape[1]
    if n < 2:
        raise ValueError("chains need at least 2 draws")
    means = x.mean(axis=1)
    b = n * means.var(axis=0, ddof=1)
    w = x.var(axis=1, ddof=1).mean(axis=0)
    pooled = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(pooled / w)
    rhat = np.where(w > 0, rhat, np.where(b > 0, np.inf, math.sqrt((n - 1) / n)))
    return rhat


@dataclass
class PosteriorSummary:
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    cov: np.ndarray


def posterior_summary(chains, burn_in: int = 0) -> PosteriorSummary:
    """Summaries over post-burn-in draws pooled across chains.

    ``chains`` is ``(m, n, ...)`` or a single chain ``(n, ...)``.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] <= burn_in:
        raise ValueError("chain length must exceed burn_in")
    draws = x[:, burn_in:].reshape((-1,) + x.shape[2:])
    mean = draws.mean(axis=0)
    std = draws.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = np.where(std == 0, 0.0, std / np.abs(mean))
    return PosteriorSummary(np.median(draws, axis=0), mean, std, cov)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class ChainRun:
    theta: np.ndarray  # (n_steps, V, 5)
    sigma2: np.ndarray  # (n_steps, V)
    alpha: np.ndarray  # (n_steps, V, 2)
    acceptance: np.ndarray  # (V, 7) post-burn-in acceptance rate
    scales: np.ndarray  # (V, 7) frozen proposal scales


@dataclass
class BayesResult:
    voxel_ids: np.ndarray
    chains: list
    summary: PosteriorSummary
    rhat: np.ndarray  # (V, 5)
    burn_in: int
    seed: int
    spec: PriorSpec
    converged: bool = True
    warnings: list = field(default_factory=list)

    @property
    def medians(self) -> np.ndarray:
        return self.summary.median

    @property
    def acceptance(self) -> np.ndarray:
        """Post-burn-in acceptance rates, ``(n_chains, V, 7)``."""
        return np.stack([c.acceptance for c in self.chains])

    def samples(self, burn_in: bool = True) -> np.ndarray:
        start = self.burn_in if burn_in else 0
        return np.stack([c.theta[start:] for c in self.chains])


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(chain),)))


def sample_chain(data: SamplerData, graph_csr, spec: PriorSpec, n_steps: int, burn_in: int,
                 rng: np.random.Generator, options: SamplerOptions = SamplerOptions()) -> ChainRun:
    """Adaptive burn-in followed by fixed-kernel sampling; stores every sweep."""
    if n_steps <= burn_in:
        raise ValueError("n_steps must exceed burn_in")
    nvox, ntimes = data.curves.shape
    state = initial_state(nvox, spec, rng, options, data)
    theta = np.empty((n_steps, nvox, 5))
    sigma2 = np.empty((n_steps, nvox))
    alpha = np.empty((n_steps, nvox, 2))
    store = (theta, sigma2, alpha)
    window = max(1, int(options.window))
    temps = burn_in_temperatures(burn_in, options.anneal_start, options.anneal_fraction)

    done = 0
    while done < burn_in:
        block = min(window, burn_in - done)
        state.accepted[:] = 0
        state.proposed[:] = 0
        _run_sweeps(state, data, graph_csr, spec, options,
                    _draw_randoms(rng, block, nvox, ntimes, spec), store, done,
                    temps[done:done + block])
        tune_proposals(state, state.accepted, state.proposed, options.gain)
        done += block
    state.accepted[:] = 0
    state.proposed[:] = 0
    while done < n_steps:
        block = min(window, n_steps - done)
        _run_sweeps(state, data, graph_csr, spec, options,
                    _draw_randoms(rng, block, nvox, ntimes, spec), store, done)
        done += block
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(state.proposed > 0, state.accepted / np.maximum(state.proposed, 1), np.nan)
    return ChainRun(theta, sigma2, alpha, rate, state.scales.copy())


def _chain_job(job):
    data, csr, spec, n_steps, burn_in, seed, chain, options = job
    return sample_chain(data, csr, spec, n_steps, burn_in, chain_rng(seed, chain), options)


def run_chain(series: NoisySeries, mask=None, spec: PriorSpec = PriorSpec(), n_steps: int = 4000,
              burn_in: int = 1000, n_chains: int = 2, seed: int = 0, workers: int = 1,
              options: SamplerOptions = SamplerOptions()) -> BayesResult:
    """Sample the posterior over all masked voxels with ``n_chains`` independent chains.

    Returns posterior medians, coefficients of variation and R-hat per voxel
    and kinetic parameter.  R-hat above 1.1 raises a warning, not an error.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    mask = series.mask if mask is None else np.asarray(mask, dtype=bool)
    rows = [r for r, vid in enumerate(series.voxel_ids) if mask.ravel()[vid]]
    ids = series.voxel_ids[rows]
    empty = np.zeros((0, 5))
    if not rows:
        summary = PosteriorSummary(empty, empty.copy(), empty.copy(), empty.copy())
        return BayesResult(ids, [], summary, empty.copy(), burn_in, seed, spec)
    data = SamplerData.from_series(series, rows)
    if len(rows) == 1:
        csr = _empty_csr(1)
    else:
        sub = np.zeros(series.mask.size, dtype=bool)
        sub[ids] = True
        csr = build_neighbor_graph(sub.reshape(series.mask.shape)).csr()
    jobs = [(data, csr, spec, n_steps, burn_in, seed, c, options) for c in range(n_chains)]
    if workers > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]

    stacked = np.stack([c.theta for c in chains])
    summary = posterior_summary(stacked, burn_in)
    notes = []
    if n_chains >= 2:
        rhat = gelman_rubin(stacked[:, burn_in:])
    else:
        rhat = np.full((len(rows), 5), np.nan)
        notes.append("R-hat needs at least 2 chains")
    converged = bool(np.all(np.nan_to_num(rhat, nan=0.0) <= RHAT_LIMIT))
    if not converged:
        msg = f"R-hat above {RHAT_LIMIT} for {int(np.sum(rhat > RHAT_LIMIT))} voxel-parameters"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return BayesResult(ids, chains, summary, rhat, burn_in, seed, spec, converged, notes)
