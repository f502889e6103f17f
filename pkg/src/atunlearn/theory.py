"""Numerical checks of the divergence identities behind the repulsion losses.

Two isotropic Gaussians over parameters have closed-form KL and squared
Hellinger divergences; pushing both through a generator with a fixed latent
cannot increase any f-divergence (data processing inequality). The functions
here compute the closed forms, Monte Carlo estimates of them, and a
histogram-based check of the inequality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gan import GeneratorSpec

LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class GaussianPair:
    """Two Gaussians ``N(mean_a, scale^2 I)`` and ``N(mean_b, scale^2 I)``."""

    mean_a: np.ndarray
    mean_b: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.mean_a, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.mean_b, dtype=np.float64))
        if a.shape != b.shape:
            raise ValueError(f"mean dimensions differ: {a.shape} vs {b.shape}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "mean_a", a)
        object.__setattr__(self, "mean_b", b)

    @property
    def dim(self) -> int:
        return self.mean_a.size

    @property
    def sq_mahalanobis(self) -> float:
        d = (self.mean_a - self.mean_b) / self.scale
        return float(d @ d)


def kl_gaussian(pair: GaussianPair, convention: str = "standard") -> float:
    """KL(a || b). ``convention="unscaled"`` drops the 1/2 factor."""
    m = pair.sq_mahalanobis
    if convention == "standard":
        return 0.5 * m
    if convention == "unscaled":
        return m
    raise ValueError(f"unknown convention {convention!r}")


def hellinger_sq_gaussian(pair: GaussianPair, convention: str = "standard") -> float:
    """Squared Hellinger distance ``1 - BC``; ``convention="unscaled"`` drops the 1/8."""
    m = pair.sq_mahalanobis
    if convention == "standard":
        return float(-np.expm1(-m / 8.0))
    if convention == "unscaled":
        return float(-np.expm1(-m))
    raise ValueError(f"unknown convention {convention!r}")


def _log_ratio(pair: GaussianPair, x):
    """log p_a(x) - log p_b(x) for rows of x."""
    s2 = pair.scale**2
    da = x - pair.mean_a
    db = x - pair.mean_b
    return (np.einsum("ij,ij->i", db, db) - np.einsum("ij,ij->i", da, da)) / (2 * s2)


def mc_kl(pair: GaussianPair, n: int = 1_000_000, seed: int = 0, chunk: int = 250_000) -> tuple[float, float]:
    """Monte Carlo KL(a || b) and its standard error from samples of ``a``."""
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = pair.mean_a + pair.scale * rng.standard_normal((m, pair.dim))
        r = _log_ratio(pair, x)
        total += r.sum()
        total_sq += (r * r).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / n))


def mc_hellinger_sq(pair: GaussianPair, n: int = 1_000_000, seed: int = 0, chunk: int = 250_000) -> tuple[float, float]:
    """Monte Carlo ``1 - E_a[sqrt(p_b / p_a)]`` and its standard error."""
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = pair.mean_a + pair.scale * rng.standard_normal((m, pair.dim))
        w = np.exp(-0.5 * _log_ratio(pair, x))
        total += w.sum()
        total_sq += (w * w).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return float(1.0 - mean), float(np.sqrt(var / n))


def _grid(x, y, bins):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64).T).T
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sample sets must be nonempty")
    both = np.concatenate([x, y])
    lo, hi = both.min(axis=0), both.max(axis=0)
    if np.any(hi <= lo):
        raise ValueError("joint bounding box has zero volume")
    edges = [np.linspace(l, h, bins + 1) for l, h in zip(lo, hi)]
    return x, y, edges


def _hist(x, edges):
    return np.histogramdd(x, bins=edges)[0].ravel()


def jsd_estimate(x, y, bins: int = 32) -> float:
    """Plug-in Jensen-Shannon divergence (natural log) on a shared grid."""
    x, y, edges = _grid(x, y, bins)
    p = _hist(x, edges)
    q = _hist(y, edges)
    return _jsd(p / p.sum(), q / q.sum())


def _jsd(p, q):
    m = 0.5 * (p + q)
    out = 0.0
    for r in (p, q):
        nz = r > 0
        out += 0.5 * float(np.sum(r[nz] * np.log(r[nz] / m[nz])))
    return min(max(out, 0.0), LOG2)


def _kl_counts(cp, cq):
    # pseudo-count of one in every cell either sample occupies
    occupied = (cp > 0) | (cq > 0)
    p = cp[occupied] + 1.0
    q = cq[occupied] + 1.0
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def kl_histogram(x, y, bins: int = 32) -> float:
    """Smoothed plug-in KL(x || y) on a shared grid."""
    x, y, edges = _grid(x, y, bins)
    return _kl_counts(_hist(x, edges), _hist(y, edges))


def kl_histogram_bootstrap(x, y, bins: int = 32, n_boot: int = 50, seed: int = 0) -> tuple[float, float, float]:
    """Histogram KL with bootstrap standard deviation and bias estimates."""
    x, y, edges = _grid(x, y, bins)
    est = _kl_counts(_hist(x, edges), _hist(y, edges))
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        xb = x[rng.integers(0, len(x), len(x))]
        yb = y[rng.integers(0, len(y), len(y))]
        boots[b] = _kl_counts(_hist(xb, edges), _hist(yb, edges))
    return est, float(boots.std(ddof=1)), float(boots.mean() - est)


def pushforward(spec, thetas, z) -> np.ndarray:
    """``G_theta(z)`` for each row of ``thetas`` and one fixed latent ``z``.

    ``spec`` is a :class:`GeneratorSpec` or any callable ``(thetas, z) -> outputs``.
    """
    if callable(spec) and not isinstance(spec, GeneratorSpec):
        return np.asarray(spec(thetas, z), dtype=np.float64).reshape(len(thetas), -1)
    net = spec.build()
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    h = np.broadcast_to(z, (len(thetas), z.size))
    layers = [(thetas[:, ws].reshape(len(thetas), *shape), thetas[:, bs]) for ws, shape, bs in net._slices]
    for i, (w, b) in enumerate(layers):
        pre = np.einsum("noi,ni->no", w, h) + b
        if i < len(layers) - 1:
            h = np.maximum(pre, 0.2 * pre)
        elif spec.output_activation == "tanh":
            h = np.tanh(pre)
        else:
            h = pre
    return h


@dataclass
class DPIRecord:
    param_div: float
    pushforward_div: float
    epsilon: float
    bootstrap_std: float
    bootstrap_bias: float
    holds: bool

    def as_dict(self) -> dict:
        return {k: (bool(v) if k == "holds" else float(v)) for k, v in self.__dict__.items()}


def dpi_check(
    pair: GaussianPair,
    spec,
    z,
    n: int = 20000,
    bins: int = 30,
    n_boot: int = 50,
    seed: int = 0,
    n_sigma: float = 3.0,
) -> DPIRecord:
    """Compare closed-form parameter KL with histogram KL of the pushforwards.

    ``epsilon`` is ``n_sigma`` bootstrap standard deviations plus any positive
    bootstrap bias estimate of the histogram estimator.
    """
    n_params = spec.build().n_params if isinstance(spec, GeneratorSpec) else pair.dim
    if pair.dim != n_params:
        raise ValueError(f"pair has dimension {pair.dim}, generator has {n_params} parameters")
    rng = np.random.default_rng(seed)
    ta = pair.mean_a + pair.scale * rng.standard_normal((n, n_params))
    tb = pair.mean_b + pair.scale * rng.standard_normal((n, n_params))
    xa = pushforward(spec, ta, z)
    xb = pushforward(spec, tb, z)
    param_div = kl_gaussian(pair)
    est, std, bias = kl_histogram_bootstrap(xa, xb, bins, n_boot, seed + 1)
    eps = n_sigma * std + max(bias, 0.0)
    return DPIRecord(param_div, est, eps, std, bias, bool(est <= param_div + eps))


def random_dpi_trials(
    trials: int = 50,
    spec: GeneratorSpec | None = None,
    shift: float = 1.0,
    scale: float = 0.5,
    n: int = 20000,
    bins: int = 30,
    seed: int = 0,
) -> list[DPIRecord]:
    """Random parameter-distribution pairs over a tiny generator (20 parameters by default)."""
    spec = spec or GeneratorSpec(latent_dim=3, hidden=(3,), output_dim=2)
    n_params = spec.build().n_params
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        mean_a = rng.standard_normal(n_params)
        direction = rng.standard_normal(n_params)
        mean_b = mean_a + shift * direction / np.linalg.norm(direction)
        z = rng.standard_normal(spec.latent_dim)
        out.append(dpi_check(GaussianPair(mean_a, mean_b, scale), spec, z, n=n, bins=bins, seed=seed * 1000 + t))
    return out


def closed_form_checks(dims=range(2, 11), distance: float = 2.0, n: int = 1_000_000, seed: int = 0) -> list[dict]:
    """Closed-form KL and squared Hellinger against Monte Carlo, one record per dimension."""
    rng = np.random.default_rng(seed)
    out = []
    for dim in dims:
        direction = rng.standard_normal(dim)
        mean_a = rng.standard_normal(dim)
        pair = GaussianPair(mean_a, mean_a + distance * direction / np.linalg.norm(direction))
        kl, h = kl_gaussian(pair), hellinger_sq_gaussian(pair)
        kl_mc, kl_se = mc_kl(pair, n, seed + dim)
        h_mc, h_se = mc_hellinger_sq(pair, n, seed + 100 + dim)
        out.append(
            {
                "dim": int(dim),
                "kl": kl,
                "kl_mc": kl_mc,
                "kl_se": kl_se,
                "kl_rel_err": abs(kl_mc - kl) / kl,
                "hellinger_sq": h,
                "hellinger_sq_mc": h_mc,
                "hellinger_sq_se": h_se,
                "hellinger_sq_rel_err": abs(h_mc - h) / h,
            }
        )
    return out


def scale_map(thetas, z):
    """The one-parameter generator ``G_theta(z) = theta * z``; a bijection in theta for z != 0."""
    return np.asarray(thetas, dtype=np.float64).reshape(-1, 1) * np.asarray(z, dtype=np.float64).reshape(1, -1)


def bijection_check(delta: float = 1.0, n: int = 100_000, bins: int = 100, seed: int = 0) -> tuple[DPIRecord, bool]:
    """For an invertible one-parameter map the inequality is tight.

    Returns the record and whether the pushforward divergence matches the
    parameter divergence within the bootstrap tolerance.
    """
    pair = GaussianPair(np.zeros(1), np.full(1, float(delta)))
    rec = dpi_check(pair, scale_map, np.ones(1), n=n, bins=bins, seed=seed)
    return rec, bool(abs(rec.pushforward_div - rec.param_div) <= rec.epsilon)
