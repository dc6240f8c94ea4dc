"""Bootstrap variance and percentile intervals for the population size.

Three resampling schemes are available:

``nonparametric``
    resample the observed rows with replacement;
``semiparametric``
    draw a population size around the estimate, then a binomial number
    of observed units, then that many rows with replacement;
``parametric``
    draw covariate rows with probability proportional to their
    Horvitz-Thompson contribution, simulate untruncated counts from the
    fitted model and keep the observable ones.

Every replicate ``i`` draws from its own stream
``SeedSequence(seed, spawn_key=(i,))``, so results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import stats

from .families import CountFamily
from .fitting import FitControl, fit_irls
from .model_frame import DesignBlocks

log = logging.getLogger(__name__)

__all__ = [
    "BootControl",
    "BootResult",
    "run_bootstrap",
    "bootstrap_nonparametric",
    "bootstrap_semiparametric",
    "bootstrap_parametric",
    "percentile_ci",
    "replicate_rng",
]

BOOT_TYPES = ("parametric", "semiparametric", "nonparametric")


@dataclass(frozen=True)
class BootControl:
    boot_type: str = "parametric"
    B: int = 500
    alpha: float = 0.05
    cores: int = 1
    seed: int | None = None
    keep_replicates: bool = True
    fit_control: FitControl = field(default_factory=lambda: FitControl(max_iter=50, silent=True))

    def __post_init__(self):
        if self.boot_type not in BOOT_TYPES:
            raise ValueError(f"boot_type must be one of {BOOT_TYPES}")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.cores < 1:
            raise ValueError("cores must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class BootResult:
    replicates: np.ndarray
    failures: int
    variance: float
    ci: tuple[float, float] | None
    skewness: float
    boot_type: str
    B: int
    alpha: float
    not_converged: int = 0

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    def to_dict(self, with_replicates: bool = False) -> dict:
        out = {
            "boot_type": self.boot_type,
            "B": self.B,
            "successful": int(self.replicates.size),
            "failures": self.failures,
            "not_converged": self.not_converged,
            "variance": self.variance,
            "se": self.se,
            "skewness": self.skewness,
            "percentile_ci": None if self.ci is None else list(self.ci),
            "alpha": self.alpha,
        }
        if with_replicates:
            out["replicates"] = self.replicates.tolist()
        return out


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def percentile_ci(replicates, alpha: float = 0.05) -> tuple[float, float]:
    """Empirical ``alpha/2`` and ``1 - alpha/2`` quantiles (linear interpolation)."""
    r = np.asarray(replicates, dtype=float)
    if r.size < 10:
        raise ValueError(f"percentile interval needs at least 10 replicates, got {r.size}")
    lo, hi = np.quantile(r, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return float(lo), float(hi)


def _split_population(point: float, rng: np.random.Generator) -> int:
    """``floor(N) + Bernoulli(frac(N))``: an integer with expectation ``N``."""
    base = np.floor(point)
    return int(base + (rng.random() < point - base))


def _bare(frame: DesignBlocks, rows) -> DesignBlocks:
    return replace(
        frame,
        y=frame.y[rows],
        blocks=tuple(b[rows] for b in frame.blocks),
        offsets=frame.offsets[rows],
        weights=frame.weights[rows],
        data=None,
    )


# state shared with worker processes, set once per process
_STATE: dict = {}


def _init_state(frame, family, beta, eta, point, boot_type, fit_control, seed):
    _STATE.update(
        frame=frame, family=family, beta=beta, eta=eta, point=point,
        boot_type=boot_type, fit_control=fit_control, seed=seed,
    )
    if boot_type == "parametric":
        contr = family.point_estimate(eta, frame.weights, frame.y, contribution=True)
        _STATE["draw_prob"] = contr / contr.sum()


def _resample(index: int) -> DesignBlocks:
    s = _STATE
    frame, family = s["frame"], s["family"]
    rng = replicate_rng(s["seed"], index)
    n = frame.n
    kind = s["boot_type"]
    if kind == "nonparametric":
        return _bare(frame, rng.integers(0, n, n))
    if kind == "semiparametric":
        N = _split_population(s["point"], rng)
        n_obs = rng.binomial(N, n / N) if N > 0 else 0
        if n_obs == 0:
            raise ValueError("empty resample")
        # with replacement even when n_obs <= n: a subsample without
        # replacement nearly reproduces the data and understates the spread
        rows = rng.integers(0, n, n_obs)
        return _bare(frame, rows)
    N = _split_population(s["point"], rng)
    rows = rng.choice(n, N, replace=True, p=s["draw_prob"])
    y = family.simulate(s["eta"][rows], seed=rng, truncated=False)
    keep = y >= family.min_count
    if not keep.any():
        raise ValueError("no observable units simulated")
    out = _bare(frame, rows[keep])
    return replace(out, y=y[keep])


def _replicate(index: int) -> tuple[float, bool] | None:
    s = _STATE
    family: CountFamily = s["family"]
    try:
        frame = _resample(index)
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            res = fit_irls(frame.y, frame, family, frame.offsets, frame.weights, s["beta"], s["fit_control"])
            value = family.point_estimate(res.eta, frame.weights, frame.y)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.debug("replicate %d failed: %s", index, exc)
        return None
    return (float(value), res.converged) if np.isfinite(value) else None


def _replicate_chunk(indices):
    return [(i, _replicate(i)) for i in indices]


def _run(model, control: BootControl, progress: Callable[[int, int], None] | None) -> BootResult:
    seed = control.seed
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (1 << 63))
    fit = model.fit
    args = (model.frame, model.family, fit.beta, fit.eta, model.popsize.point,
            control.boot_type, control.fit_control, seed)
    B = control.B
    values = np.full(B, np.nan)
    converged = np.zeros(B, dtype=bool)
    done = 0
    if control.cores == 1:
        saved = dict(_STATE)
        _init_state(*args)
        try:
            for i in range(B):
                v = _replicate(i)
                if v is not None:
                    values[i], converged[i] = v
                done += 1
                if progress:
                    progress(done, B)
        finally:
            _STATE.clear()
            _STATE.update(saved)
    else:
        chunks = np.array_split(np.arange(B), min(B, control.cores * 8))
        with ProcessPoolExecutor(control.cores, initializer=_init_state, initargs=args) as pool:
            futures = [pool.submit(_replicate_chunk, c.tolist()) for c in chunks if c.size]
            for fut in as_completed(futures):
                for i, v in fut.result():
                    if v is not None:
                        values[i], converged[i] = v
                    done += 1
                    if progress:
                        progress(done, B)
    ok = np.isfinite(values)
    failures = int(B - ok.sum())
    if failures > B / 2:
        raise RuntimeError(f"{failures} of {B} bootstrap replicates failed")
    if failures:
        log.warning("%d of %d bootstrap replicates failed and were dropped", failures, B)
    not_converged = int(np.sum(ok & ~converged))
    if not_converged:
        log.warning("%d of %d bootstrap refits hit the iteration limit; their estimates are kept", not_converged, B)
    reps = values[ok]
    variance = float(np.var(reps, ddof=1)) if reps.size > 1 else 0.0
    ci = percentile_ci(reps, control.alpha) if reps.size >= 10 else None
    skew = float(stats.skew(reps)) if reps.size > 2 else float("nan")
    return BootResult(
        replicates=reps if control.keep_replicates else np.empty(0), failures=failures,
        variance=variance, ci=ci, skewness=skew, boot_type=control.boot_type, B=B, alpha=control.alpha,
        not_converged=not_converged,
    )


def run_bootstrap(model, control: BootControl | None = None, progress=None) -> BootResult:
    """Bootstrap the population size of a :class:`~sscr.popsize.ModelFit`."""
    control = control or BootControl()
    return _run(model, control, progress)


def bootstrap_nonparametric(model, control: BootControl | None = None, progress=None) -> BootResult:
    return _run(model, replace(control or BootControl(), boot_type="nonparametric"), progress)


def bootstrap_semiparametric(model, control: BootControl | None = None, progress=None) -> BootResult:
    return _run(model, replace(control or BootControl(), boot_type="semiparametric"), progress)


def bootstrap_parametric(model, control: BootControl | None = None, progress=None) -> BootResult:
    return _run(model, replace(control or BootControl(), boot_type="parametric"), progress)


def default_cores() -> int:
    """Core count from the ``SSCR_CORES`` environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("SSCR_CORES", "1")))
    except ValueError:
        return 1
