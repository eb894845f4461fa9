"""Accuracy metrics, rank statistics and Monte-Carlo comparison of estimators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.stats

from .bayes import PriorSpec, SamplerOptions, run_chain
from .kinetics import KINETIC_NAMES, SampledCurve, forward_batch
from .nlls import FB_OUTLIER, FitBounds, _objective, fit_map_nlls
from .phantom import build_phantom, realization_seed, simulate_series

METHODS = ("nlls", "bayes", "bayes-nonhier")
POOLED = "all"
EXACT_LIMIT = 400


def nmse(estimate, truth, valid=None) -> float:
    """Squared error normalised by the energy of ``truth``.

    Rows where ``valid`` is False (or the estimate is NaN) are dropped from
    both sums.  An all-zero estimate scores 1.
    """
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth must have the same shape")
    keep = ~np.isnan(est)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    if not keep.any():
        return math.nan
    denom = float(np.sum(tru[keep] ** 2))
    if denom == 0:
        raise ValueError("truth has zero energy over the kept entries")
    return float(np.sum((est[keep] - tru[keep]) ** 2) / denom)


def parameter_nmse(estimates, truth, valid=None) -> np.ndarray:
    """NMSE per kinetic parameter for ``(n_voxels, >=4)`` maps."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if valid is None:
        valid = ~np.isnan(est[:, 0])
    return np.array([nmse(est[:, k], tru[:, k], valid) for k in range(len(KINETIC_NAMES))])


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float  # statistic of the first sample
    p: float  # two-sided
    method: str  # "exact" | "normal"


def _midranks(x: np.ndarray) -> np.ndarray:
    return scipy.stats.rankdata(x, method="average")


def _exact_counts(doubled: np.ndarray, n_a: int) -> np.ndarray:
    """Number of size-``n_a`` subsets of ``doubled`` for every possible sum."""
    total = int(doubled.sum())
    counts = np.zeros((n_a + 1, total + 1))
    counts[0, 0] = 1.0
    for seen, r in enumerate(doubled.tolist()):
        for k in range(min(n_a, seen + 1), 0, -1):
            counts[k, r:] += counts[k - 1, :total + 1 - r]
    return counts[n_a]


def mann_whitney_u(a, b, exact_limit: int = EXACT_LIMIT) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test on midranks.

    The null distribution is enumerated exactly, ties included, when
    ``len(a) * len(b) <= exact_limit``; otherwise the normal approximation
    with tie and continuity corrections is used.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n_a, n_b = a.size, b.size
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be nonempty")
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("samples must not contain NaN")
    ranks = _midranks(np.concatenate([a, b]))
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2)
    mean_u = n_a * n_b / 2
    n = n_a + n_b

    if np.all(ranks == ranks[0]):
        warnings.warn("all observations are tied; the test carries no information",
                      RuntimeWarning, stacklevel=2)
        return MannWhitneyResult(u, 1.0, "exact" if n_a * n_b <= exact_limit else "normal")

    if n_a * n_b <= exact_limit:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_counts(doubled, n_a)
        sums = np.arange(counts.size)
        target = int(round(2 * (u + n_a * (n_a + 1) / 2)))
        total = counts.sum()
        lower = counts[sums <= target].sum() / total
        upper = counts[sums >= target].sum() / total
        return MannWhitneyResult(u, float(min(1.0, 2 * min(lower, upper))), "exact")

    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    var_u = n_a * n_b / 12 * ((n + 1) - tie_term / (n * (n - 1)))
    z = (abs(u - mean_u) - 0.5) / math.sqrt(var_u)
    p = 2 * scipy.stats.norm.sf(max(z, 0.0))
    return MannWhitneyResult(u, min(1.0, float(p)), "normal")


def outlier_stats(estimates, statuses=None, threshold: float = FB_OUTLIER) -> tuple[float, float]:
    """Fractions of voxels that failed and of voxels with ``f_b > threshold``."""
    est = np.asarray(estimates, dtype=float)
    n = est.shape[0]
    if n == 0:
        return 0.0, 0.0
    if statuses is None:
        failed = np.isnan(est[:, 0])
    else:
        failed = np.array([s == "failed" for s in statuses])
    high = ~failed & (np.nan_to_num(est[:, 0], nan=-np.inf) > threshold)
    return float(failed.mean()), float(high.mean())


# ---------------------------------------------------------------------------
# Monte-Carlo study


@dataclass
class StudyConfig:
    scenario: str = "ischaemia"
    n_realizations: int = 20
    methods: tuple = METHODS
    seed: int = 0
    snr: float = 15.0
    n_steps: int = 4000
    burn_in: int = 1000
    n_chains: int = 2
    n_starts: int = 100
    workers: int = 1
    options: SamplerOptions = field(default_factory=SamplerOptions)
    bounds: FitBounds = field(default_factory=FitBounds)
    specs: dict = field(default_factory=dict)  # method -> PriorSpec override


@dataclass
class MethodRun:
    """One estimator applied to one noise realization."""

    method: str
    seed: int
    voxel_ids: np.ndarray
    estimates: np.ndarray  # (V, 5), NaN rows for failures
    statuses: list
    nmse: np.ndarray  # (4,)
    rhat: np.ndarray | None = None
    acceptance: np.ndarray | None = None  # (chains, V, 7)
    cov: np.ndarray | None = None
    samples_in_support: bool | None = None


@dataclass
class NmseReport:
    config: StudyConfig
    truth: np.ndarray  # (V, 5)
    defect_ids: np.ndarray
    runs: dict  # method -> list[MethodRun]

    def table(self, method: str) -> np.ndarray:
        """``(n_realizations, 4)`` NMSE values."""
        return np.array([r.nmse for r in self.runs[method]])

    def pooled(self, method: str) -> np.ndarray:
        """Every per-parameter NMSE value of ``method`` in one sample."""
        return self.table(method).ravel()

    def summary(self, method: str) -> dict:
        t = self.table(method)
        out = {name: (float(np.nanmean(t[:, k])), float(np.nanstd(t[:, k], ddof=1)))
               for k, name in enumerate(KINETIC_NAMES)}
        pool = t.ravel()
        out[POOLED] = (float(np.nanmean(pool)), float(np.nanstd(pool, ddof=1)))
        return out

    def compare(self, first: str, second: str) -> dict:
        """Mann-Whitney p-values of ``first`` against ``second`` per parameter and pooled."""
        ta, tb = self.table(first), self.table(second)
        out = {}
        for k, name in enumerate(KINETIC_NAMES):
            a, b = ta[:, k], tb[:, k]
            out[name] = mann_whitney_u(a[~np.isnan(a)], b[~np.isnan(b)])
        pa, pb = ta.ravel(), tb.ravel()
        out[POOLED] = mann_whitney_u(pa[~np.isnan(pa)], pb[~np.isnan(pb)])
        return out

    def p_values(self) -> dict:
        """All pairwise comparisons available for the methods that were run."""
        pairs = [("bayes", "nlls"), ("bayes", "bayes-nonhier"), ("bayes-nonhier", "nlls")]
        return {f"{a}:{b}": self.compare(a, b) for a, b in pairs if a in self.runs and b in self.runs}


def run_method(method: str, series, truth: np.ndarray, seed: int, cfg: StudyConfig) -> MethodRun:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "nlls":
        fit = fit_map_nlls(series, bounds=cfg.bounds, n_starts=cfg.n_starts, seed=seed,
                           workers=cfg.workers)
        est = fit.estimates()
        statuses = fit.statuses()
        return MethodRun(method, seed, fit.voxel_ids, est, statuses, parameter_nmse(est, truth))
    spec = PriorSpec() if method == "bayes" else PriorSpec.non_hierarchical()
    spec = cfg.specs.get(method, spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_chain(series, spec=spec, n_steps=cfg.n_steps, burn_in=cfg.burn_in,
                        n_chains=cfg.n_chains, seed=seed, workers=cfg.workers, options=cfg.options)
    est = res.medians
    in_support = all(bool(spec.support_mask(c.theta).all()) for c in res.chains)
    in_support = in_support and bool(spec.support_mask(est).all())
    return MethodRun(method, seed, res.voxel_ids, est, ["ok"] * len(est), parameter_nmse(est, truth),
                     res.rhat, res.acceptance, res.summary.cov, in_support)


def monte_carlo_study(cfg: StudyConfig | None = None, progress=None) -> NmseReport:
    """Simulate ``n_realizations`` noisy phantoms and score every method on each.

    Realization ``n`` uses seed ``cfg.seed + n``; the same seed drives the
    noise and the estimator so the report is a pure function of ``cfg``.
    """
    cfg = cfg or StudyConfig()
    if cfg.n_realizations < 2:
        raise ValueError("n_realizations must be >= 2")
    phantom = build_phantom(cfg.scenario)
    truth = phantom.param_matrix()
    runs = {m: [] for m in cfg.methods}
    for n in range(1, cfg.n_realizations + 1):
        seed = realization_seed(cfg.seed, n)
        series = simulate_series(phantom, snr=cfg.snr, seed=seed)
        for method in cfg.methods:
            runs[method].append(run_method(method, series, truth, seed, cfg))
            if progress is not None:
                progress(n, method)
    return NmseReport(cfg, truth, phantom.defect_ids(), runs)


# ---------------------------------------------------------------------------
# cost landscape


@dataclass
class CostSurface:
    f_b: np.ndarray
    tau0: np.ndarray
    chi2: np.ndarray  # (len(f_b), len(tau0))

    def argmin(self) -> tuple[int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmin(self.chi2), self.chi2.shape))

    def minimum(self) -> tuple[float, float]:
        i, j = self.argmin()
        return float(self.f_b[i]), float(self.tau0[j])

    def cell_of(self, f_b: float, tau0: float) -> tuple[int, int]:
        """Index of the grid node whose cell (nearest node) holds the point."""
        return int(np.argmin(np.abs(self.f_b - f_b))), int(np.argmin(np.abs(self.tau0 - tau0)))


def _polish(theta, lo, hi, y, aif, hct):
    """Local bounded search over ``(v_p, v_e, ps)`` with ``f_b`` and ``tau0`` pinned."""
    base = np.array([theta[0], lo[1], lo[2], lo[3], theta[4]])
    span = np.array([0.0, hi[1] - lo[1], hi[2] - lo[2], hi[3] - lo[3], 0.0])
    x0 = np.zeros(5)
    x0[1:4] = (theta[1:4] - base[1:4]) / span[1:4]
    res = scipy.optimize.minimize(
        _objective, x0, args=(base, span, y, aif.values, aif.dt, hct, 1.0, 1e-6), jac=True,
        method="L-BFGS-B", bounds=[(0.0, 0.0)] + [(0.0, 1.0)] * 3 + [(0.0, 0.0)],
        options={"gtol": 1e-12, "ftol": 1e-14, "maxiter": 500},
    )
    return float(res.fun)


def cost_surface(curve: SampledCurve, aif: SampledCurve, f_b_grid=None, tau0_grid=None,
                 n_inner: int = 15, bounds: FitBounds | None = None, hct: float = 0.0,
                 refine: bool = True) -> CostSurface:
    """Minimum chi-squared over ``(v_p, v_e, ps)`` at every ``(f_b, tau0)`` node.

    The inner search starts from a grid of ``n_inner`` evenly spaced points
    per parameter across the fit bounds.  With ``refine`` the best grid point
    of each node is polished by a bounded local search, so the projection is
    not limited by the grid spacing.
    """
    bounds = bounds or FitBounds()
    lo, hi = bounds.lo, bounds.hi
    f_b = np.round(np.linspace(0.1, hi[0], 60), 12) if f_b_grid is None else np.asarray(f_b_grid, float)
    tau0 = np.round(np.linspace(lo[4], hi[4], 21), 12) if tau0_grid is None else np.asarray(tau0_grid, float)
    if f_b.size == 0 or tau0.size == 0 or n_inner < 1:
        raise ValueError("grids must be nonempty")
    y = np.ascontiguousarray(curve.values, dtype=float)
    if y.shape != aif.values.shape:
        raise ValueError("curve and AIF must share a time grid")
    axes = [np.linspace(lo[k], hi[k], n_inner) for k in (1, 2, 3)]
    inner = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    block = np.empty((inner.shape[0], 5))
    block[:, 1:4] = inner
    chi2 = np.empty((f_b.size, tau0.size))
    for i, fb in enumerate(f_b):
        block[:, 0] = fb
        for j, t0 in enumerate(tau0):
            block[:, 4] = t0
            cost = np.mean((forward_batch(block, aif, hct) - y) ** 2, axis=1)
            best = int(np.argmin(cost))
            chi2[i, j] = cost[best]
            if refine:
                chi2[i, j] = min(chi2[i, j], _polish(block[best], lo, hi, y, aif, hct))
    return CostSurface(f_b, tau0, chi2)
