"""Nonstationary Gaussian-process smoothing of a Phase-I RUL trajectory.

Model: ``Y(x) = H(x) beta + Z(x)`` with ``H(x) = [1, x, x^2]`` and a covariance
that sums a dot-product kernel and a kernel whose length scale varies with x.
The length-scale field is the noise-free interpolant of latent log-lengths at
fixed support points under a squared-exponential second-level GP.

Time is normalized to [0, 1] over the observed window and RUL by its largest
magnitude; everything public that takes seconds converts internally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg, optimize, stats

from .errors import FitError, InputError, NumericalError, ParameterError

log = logging.getLogger(__name__)

LEVELS = (0.80, 0.90, 0.95)
SUPPORT_COUNT = 8
SUPPORT_SPAN = 1.25
MAX_POINTS = 500
# Relative jitter on the second-level covariance. The smallest value that factorizes
# is used, so interpolation at support points stays exact whenever conditioning allows.
FIELD_JITTER = 1e-14
FIELD_JITTER_MAX = 1e-6

# Box for the hyperparameter search (log space); values outside are clipped.
LOG_SIGMA_BOUNDS = (np.log(1e-5), np.log(10.0))
LOG_LENGTH_BOUNDS = (np.log(0.01), np.log(5.0))
LOG_L2_BOUNDS = (np.log(0.05), np.log(2.0))


def dot_product_kernel(xi, xj, sigma0):
    return sigma0**2 + np.multiply(xi, xj)


def local_length_scale_kernel(xi, xj, li, lj, sigmaf):
    li, lj = np.asarray(li, dtype=float), np.asarray(lj, dtype=float)
    if np.any(li <= 0) or np.any(lj <= 0) or sigmaf <= 0:
        raise ParameterError("length scales and sigmaf must be positive")
    li2, lj2 = li * li, lj * lj
    avg = 0.5 * li2 + 0.5 * lj2
    prefactor = (li2**0.25) * (lj2**0.25) * avg**-0.5
    diff = np.subtract(xi, xj)
    return sigmaf**2 * prefactor * np.exp(-(diff * diff) / avg)


def se_kernel(xi, xj, length, scale):
    if length <= 0 or scale <= 0:
        raise ParameterError("SE length and scale must be positive")
    diff = np.subtract(xi, xj)
    return scale**2 * np.exp(-(diff * diff) / length**2)


def design_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones_like(x), x, x * x])


def default_support(count: int = SUPPORT_COUNT, span: float = SUPPORT_SPAN) -> np.ndarray:
    return np.linspace(0.0, span, count)


@dataclass(frozen=True)
class KernelParams:
    """Covariance hyperparameters, stored as logs.

    ``kind="local"`` uses the varying length-scale kernel with latent
    ``log_lengths`` at ``support``; ``kind="se"`` uses one universal length
    ``exp(log_lengths[0])`` with the squared-exponential kernel.
    """

    log_sigma0: float
    log_sigmaf: float
    log_sigmae: float
    log_lengths: np.ndarray
    support: np.ndarray = field(default_factory=default_support)
    log_l2: float = float(np.log(0.3))
    log_s2: float = 0.0
    kind: str = "local"

    def __post_init__(self):
        object.__setattr__(self, "log_lengths", np.atleast_1d(np.asarray(self.log_lengths, dtype=float)))
        object.__setattr__(self, "support", np.atleast_1d(np.asarray(self.support, dtype=float)))
        if self.kind not in ("local", "se"):
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "local":
            if self.log_lengths.shape != self.support.shape:
                raise ParameterError("one latent log-length per support point is required")
            if np.any(np.diff(self.support) <= 0):
                raise ParameterError("support points must be strictly increasing")
        elif self.log_lengths.size != 1:
            raise ParameterError("the SE kernel takes a single length")

    sigma0 = property(lambda self: float(np.exp(self.log_sigma0)))
    sigmaf = property(lambda self: float(np.exp(self.log_sigmaf)))
    sigmae = property(lambda self: float(np.exp(self.log_sigmae)))
    l2 = property(lambda self: float(np.exp(self.log_l2)))
    s2 = property(lambda self: float(np.exp(self.log_s2)))


def length_scale_field(params: KernelParams, x) -> np.ndarray:
    """Local length scale l(x) > 0.

    Interpolates the latent log-lengths with a noise-free SE-kernel GP whose
    prior mean is their average, then exponentiates.
    """
    x = np.asarray(x, dtype=float)
    lam = params.log_lengths
    if params.kind == "se" or lam.size == 1:
        return np.full(x.shape, np.exp(lam[0]))
    s = params.support
    if np.any(np.diff(s) <= 0):
        raise ParameterError("duplicate or unsorted support points")
    k_ss = se_kernel(s[:, None], s[None, :], params.l2, params.s2)
    factor = None
    jitter = FIELD_JITTER
    while factor is None and jitter <= FIELD_JITTER_MAX:
        try:
            factor = linalg.cho_factor(k_ss + np.eye(s.size) * jitter * params.s2**2, lower=True)
        except linalg.LinAlgError:
            jitter *= 100.0
    if factor is None:
        raise ParameterError("second-level covariance is singular")
    base = lam.mean()
    weights = linalg.cho_solve(factor, lam - base)
    k_xs = se_kernel(x.reshape(-1, 1), s[None, :], params.l2, params.s2)
    return np.exp(base + k_xs @ weights).reshape(x.shape)


def combined_kernel_matrix(xa, xb, params: KernelParams) -> np.ndarray:
    xa = np.asarray(xa, dtype=float).reshape(-1)
    xb = np.asarray(xb, dtype=float).reshape(-1)
    k = dot_product_kernel(xa[:, None], xb[None, :], params.sigma0)
    if params.kind == "se":
        return k + se_kernel(xa[:, None], xb[None, :], float(np.exp(params.log_lengths[0])), params.sigmaf)
    la = length_scale_field(params, xa)
    lb = la if xb is xa or (xa.shape == xb.shape and np.array_equal(xa, xb)) else length_scale_field(params, xb)
    return k + local_length_scale_kernel(xa[:, None], xb[None, :], la[:, None], lb[None, :], params.sigmaf)


def fit_mean_beta(x, y, solve) -> np.ndarray:
    """Generalized least squares for the quadratic mean.

    ``solve(B)`` must apply the inverse of the noisy covariance to B.
    """
    h = design_matrix(x)
    if h.shape[0] < 3 or np.linalg.matrix_rank(h) < 3:
        raise FitError("quadratic mean needs at least three distinct inputs")
    kinv_h = solve(h)
    gram = h.T @ kinv_h
    try:
        return np.linalg.solve(gram, kinv_h.T @ np.asarray(y, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise FitError("mean design is rank deficient under this covariance") from exc


@dataclass
class GprDataset:
    x: np.ndarray
    y: np.ndarray
    t_offset: float = 0.0
    t_scale: float = 1.0
    y_scale: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise InputError("inputs and outputs must be matching 1-d arrays")
        if self.x.size < 4:
            raise InputError(f"need at least 4 points, got {self.x.size}")
        if np.any(np.diff(self.x) <= 0):
            raise InputError("inputs must be strictly increasing")

    @classmethod
    def from_trajectory(cls, times, rul, max_points: int = MAX_POINTS) -> "GprDataset":
        """Normalize a (t, RUL) trajectory; evenly subsample if it is too long."""
        times = np.asarray(times, dtype=float)
        rul = np.asarray(rul, dtype=float)
        if times.size < 4:
            raise InputError(f"need at least 4 trajectory points, got {times.size}")
        if times.size > max_points:
            idx = np.unique(np.round(np.linspace(0, times.size - 1, max_points)).astype(int))
            times, rul = times[idx], rul[idx]
        t0, span = times[0], times[-1] - times[0]
        if span <= 0:
            raise InputError("trajectory must span a positive time interval")
        y_scale = float(np.max(np.abs(rul))) or 1.0
        return cls((times - t0) / span, rul / y_scale, float(t0), float(span), y_scale)

    def to_x(self, t):
        return (np.asarray(t, dtype=float) - self.t_offset) / self.t_scale

    def to_time(self, x):
        return np.asarray(x, dtype=float) * self.t_scale + self.t_offset


@dataclass
class _Factor:
    chol: tuple
    beta: np.ndarray
    alpha: np.ndarray
    log_likelihood: float


def _factorize(dataset: GprDataset, params: KernelParams) -> _Factor:
    k = combined_kernel_matrix(dataset.x, dataset.x, params)
    k[np.diag_indices_from(k)] += params.sigmae**2
    chol = linalg.cho_factor(k, lower=True, check_finite=True)
    beta = fit_mean_beta(dataset.x, dataset.y, lambda b: linalg.cho_solve(chol, b))
    r = dataset.y - design_matrix(dataset.x) @ beta
    alpha = linalg.cho_solve(chol, r)
    m = dataset.x.size
    ll = -0.5 * r @ alpha - np.sum(np.log(np.diag(chol[0]))) - 0.5 * m * np.log(2 * np.pi)
    return _Factor(chol, beta, alpha, float(ll))


def log_marginal_likelihood(dataset: GprDataset, params: KernelParams) -> float:
    """Gaussian log evidence with the mean coefficients profiled by GLS.

    Returns ``-inf`` if the covariance cannot be factorized.
    """
    try:
        with np.errstate(all="ignore"):
            value = _factorize(dataset, params).log_likelihood
    except (linalg.LinAlgError, ValueError, FitError, ParameterError):
        return -np.inf
    return value if np.isfinite(value) else -np.inf


@dataclass
class GprModel:
    dataset: GprDataset
    params: KernelParams
    beta: np.ndarray
    log_likelihood: float
    _factor: _Factor = field(repr=False)

    @classmethod
    def from_params(cls, dataset: GprDataset, params: KernelParams) -> "GprModel":
        try:
            f = _factorize(dataset, params)
        except (linalg.LinAlgError, ValueError) as exc:
            raise FitError("noisy covariance is not positive definite") from exc
        return cls(dataset, params, f.beta, f.log_likelihood, f)


@dataclass(frozen=True)
class SearchConfig:
    seed: int = 0
    restarts: int = 5
    max_iter: int = 2000
    kind: str = "local"
    support_count: int = SUPPORT_COUNT
    support_span: float = SUPPORT_SPAN
    restart_scale: float = 0.5


def _pack(params: KernelParams) -> np.ndarray:
    head = [params.log_sigma0, params.log_sigmaf, params.log_sigmae]
    tail = [params.log_l2] if params.kind == "local" else []
    return np.concatenate([head, params.log_lengths, tail])


def _unpack(theta: np.ndarray, template: KernelParams) -> KernelParams:
    k = template.log_lengths.size
    sig = np.clip(theta[:3], *LOG_SIGMA_BOUNDS)
    lam = np.clip(theta[3 : 3 + k], *LOG_LENGTH_BOUNDS)
    kw = dict(log_sigma0=float(sig[0]), log_sigmaf=float(sig[1]), log_sigmae=float(sig[2]), log_lengths=lam)
    if template.kind == "local":
        kw["log_l2"] = float(np.clip(theta[3 + k], *LOG_L2_BOUNDS))
    return replace(template, **kw)


def initial_params(dataset: GprDataset, config: SearchConfig = SearchConfig()) -> KernelParams:
    """Heuristic starting point from an ordinary quadratic fit."""
    h = design_matrix(dataset.x)
    coef, *_ = np.linalg.lstsq(h, dataset.y, rcond=None)
    resid = dataset.y - h @ coef
    noise = np.median(np.abs(np.diff(resid))) / (0.6745 * np.sqrt(2.0))
    noise = max(float(noise), 1e-3)
    signal = max(float(np.std(resid)), noise)
    if config.kind == "se":
        return KernelParams(np.log(0.1), np.log(signal), np.log(noise), [np.log(0.2)], support=[0.0], kind="se")
    support = default_support(config.support_count, config.support_span)
    return KernelParams(
        np.log(0.1), np.log(signal), np.log(noise), np.full(support.size, np.log(0.2)), support=support,
        log_l2=float(np.log(1.5 * config.support_span / max(config.support_count - 1, 1))),
    )


def fit(dataset: GprDataset, config: SearchConfig = SearchConfig()) -> GprModel:
    """Maximize the log evidence by Nelder-Mead with seeded restarts.

    Restart 0 starts at :func:`initial_params`; the others start from Gaussian
    perturbations of it. Ties are broken by restart index.
    """
    template = initial_params(dataset, config)
    theta0 = _pack(template)
    rng = np.random.default_rng(config.seed)

    def objective(theta):
        ll = log_marginal_likelihood(dataset, _unpack(theta, template))
        return -ll if np.isfinite(ll) else 1e300

    best_value, best_theta = objective(theta0), theta0
    for restart in range(config.restarts):
        start = theta0 if restart == 0 else theta0 + rng.normal(0.0, config.restart_scale, theta0.size)
        res = optimize.minimize(
            objective, start, method="Nelder-Mead",
            options={"maxiter": config.max_iter, "xatol": 1e-5, "fatol": 1e-9, "adaptive": True},
        )
        log.debug("restart %d: -ll=%.6g (%d evals)", restart, res.fun, res.nfev)
        if res.fun < best_value:
            best_value, best_theta = float(res.fun), res.x
    if best_value >= 1e300:
        raise FitError("no restart produced a factorizable covariance")
    return GprModel.from_params(dataset, _unpack(best_theta, template))


def posterior(model: GprModel, x_new) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation of the latent function at normalized inputs."""
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    ds, f = model.dataset, model._factor
    k_star = combined_kernel_matrix(ds.x, x_new, model.params)
    mean = k_star.T @ f.alpha + design_matrix(x_new) @ f.beta
    prior_var = np.diag(combined_kernel_matrix(x_new, x_new, model.params))
    v = linalg.cho_solve(f.chol, k_star)
    var = prior_var - np.sum(k_star * v, axis=0)
    if np.any(var < -1e-10):
        raise NumericalError(f"negative posterior variance {var.min():.3e}")
    return mean, np.sqrt(np.clip(var, 0.0, None))


def confidence_interval(mu, sigma, level: float):
    if not any(np.isclose(level, lv) for lv in LEVELS):
        raise ParameterError(f"unsupported confidence level {level}")
    if np.any(np.asarray(sigma) < 0):
        raise ParameterError("sigma must be nonnegative")
    z = stats.norm.ppf(0.5 + level / 2.0)
    return mu - z * sigma, mu + z * sigma


@dataclass(frozen=True)
class RulPrediction:
    t: float
    mean: float
    std: float
    bounds: dict

    def interval(self, level: float) -> tuple[float, float]:
        return self.bounds[level]


def predict_rul(model: GprModel, times, levels=LEVELS) -> list[RulPrediction]:
    """Posterior RUL (seconds) with confidence bounds at query times (seconds)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    mu, sd = posterior(model, model.dataset.to_x(times))
    scale = model.dataset.y_scale
    mu, sd = mu * scale, sd * scale
    out = []
    for t, m, s in zip(times, mu, sd):
        bounds = {lv: tuple(float(b) for b in confidence_interval(m, s, lv)) for lv in levels}
        out.append(RulPrediction(float(t), float(m), float(s), bounds))
    return out


def _mean_rul(model: GprModel, times) -> np.ndarray:
    mu, _ = posterior(model, model.dataset.to_x(times))
    return mu * model.dataset.y_scale


@dataclass(frozen=True)
class FailureTime:
    rul_at_tc: float
    failure_time: float | None
    horizon_exceeded: bool
    mean_at_horizon: float | None = None


def predict_failure_time(model: GprModel, t_c: float, horizon: float, step: float = 10.0, tol: float = 0.1) -> FailureTime:
    """First time at or after ``t_c`` where the posterior mean RUL reaches zero."""
    rul_tc = float(_mean_rul(model, [t_c])[0])
    if rul_tc <= 0:
        return FailureTime(rul_tc, float(t_c), False)
    grid = t_c + np.arange(1, int(np.floor(horizon / step)) + 1) * step
    if grid.size == 0 or grid[-1] < t_c + horizon:
        grid = np.append(grid, t_c + horizon)
    values = _mean_rul(model, grid)
    hits = np.nonzero(values <= 0)[0]
    if hits.size == 0:
        return FailureTime(rul_tc, None, True, float(values[-1]))
    i = hits[0]
    lo, hi = (t_c if i == 0 else grid[i - 1]), grid[i]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _mean_rul(model, [mid])[0] <= 0:
            hi = mid
        else:
            lo = mid
    return FailureTime(rul_tc, float(hi), False)


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in np.atleast_1d(values))


def dump_model(model: GprModel) -> str:
    """Diffable key=value text; floats use repr so reloading is exact."""
    p, ds = model.params, model.dataset
    lines = [
        f"kind={p.kind}",
        f"log_sigma0={p.log_sigma0!r}",
        f"log_sigmaf={p.log_sigmaf!r}",
        f"log_sigmae={p.log_sigmae!r}",
        f"log_l2={p.log_l2!r}",
        f"log_s2={p.log_s2!r}",
        f"support={_fmt(p.support)}",
        f"log_lengths={_fmt(p.log_lengths)}",
        f"beta={_fmt(model.beta)}",
        f"log_likelihood={model.log_likelihood!r}",
        f"t_offset={ds.t_offset!r}",
        f"t_scale={ds.t_scale!r}",
        f"y_scale={ds.y_scale!r}",
        f"x={_fmt(ds.x)}",
        f"y={_fmt(ds.y)}",
    ]
    return "\n".join(lines) + "\n"


def load_model(text: str) -> GprModel:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"malformed model dump line: {line!r}")
        kv[key.strip()] = value.strip()

    def arr(key):
        return np.array([float(v) for v in kv[key].split(",")])

    try:
        params = KernelParams(
            float(kv["log_sigma0"]), float(kv["log_sigmaf"]), float(kv["log_sigmae"]), arr("log_lengths"),
            support=arr("support"), log_l2=float(kv["log_l2"]), log_s2=float(kv["log_s2"]), kind=kv["kind"],
        )
        dataset = GprDataset(arr("x"), arr("y"), float(kv["t_offset"]), float(kv["t_scale"]), float(kv["y_scale"]))
    except KeyError as exc:
        raise InputError(f"model dump lacks key {exc}") from None
    return GprModel.from_params(dataset, params)


def save_model_text(path, model: GprModel) -> None:
    Path(path).write_text(dump_model(model))


def load_model_text(path) -> GprModel:
    return load_model(Path(path).read_text())
