"""Unlearning metrics: PUL, Frechet distance, mode statistics and per-feature change."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import distance_to_centers
from .gan import network_of, generate
from .params import Checkpoint

DEFAULT_EVAL_N = 15000
EIG_CLIP = 1e-8


class UndefinedPULError(ZeroDivisionError):
    pass


class IllConditionedCovarianceError(ValueError):
    pass


def pul(neg_count_before: int, neg_count_after: int) -> float:
    """Percentage of un-learning; negative when the negative count grew."""
    if neg_count_before < 1:
        raise UndefinedPULError("PUL is undefined when the original model produced no negatives")
    return (neg_count_before - neg_count_after) / neg_count_before * 100.0


def samples_of(gen: Checkpoint, n: int, seed: int) -> np.ndarray:
    return generate(network_of(gen), gen.params.values, n, seed)


def count_negatives(gen: Checkpoint, oracle, n: int = DEFAULT_EVAL_N, seed: int = 0) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    return int(np.count_nonzero(oracle.is_negative(samples_of(gen, n, seed))))


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("sample sets must be 2-d arrays")
    if len(x) <= x.shape[1]:
        raise IllConditionedCovarianceError(
            f"{len(x)} samples cannot estimate a {x.shape[1]}-dimensional covariance"
        )
    return x.mean(axis=0), np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])


def _sqrt_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    w = np.where(np.abs(w) < EIG_CLIP, 0.0, w)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sa, sb) -> float:
    """``Tr((sa sb)^(1/2))`` via the symmetric form ``sa^(1/2) sb sa^(1/2)``."""
    ra = _sqrt_psd(sa)
    m = ra @ sb @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    w = np.where(np.abs(w) < EIG_CLIP, 0.0, w)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_from_moments(mu_a, sa, mu_b, sb) -> float:
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt_product(sa, sb))
    return max(value, 0.0)


def frechet_distance(x, y) -> float:
    """Frechet distance between Gaussians fitted to two sample sets."""
    mu_x, sx = _moments(x)
    mu_y, sy = _moments(y)
    if mu_x.shape != mu_y.shape:
        raise ValueError("sample sets have different dimensionality")
    return frechet_from_moments(mu_x, sx, mu_y, sy)


def quality_fraction(samples, centers, radius: float) -> float:
    """Fraction of samples within ``radius`` of any of ``centers``."""
    if len(centers) == 0:
        return 0.0
    return float(np.mean(distance_to_centers(samples, np.asarray(centers)).min(axis=1) <= radius))


@dataclass
class MetricsReport:
    pul: float
    fid: float
    ret_fid: float | None
    mode_histogram: list[int]
    quality: float | None
    feature_changes: dict[str, float] = field(default_factory=dict)
    n: int = 0
    neg_count_before: int = 0
    neg_count_after: int = 0

    def __post_init__(self):
        if self.n and sum(self.mode_histogram) != self.n:
            raise ValueError("mode histogram does not sum to the sample count")
        if self.quality is not None and not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")

    @property
    def mode_fractions(self) -> list[float]:
        return [c / self.n for c in self.mode_histogram]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


@dataclass
class EvalReferences:
    """What a generator is compared against.

    ``pretrained`` supplies the negative count before unlearning; ``data`` is a
    sample of the positives-only data distribution; ``gold`` is an optional
    generator retrained from scratch on positives only.
    """

    pretrained: Checkpoint
    data: np.ndarray
    gold: Checkpoint | None = None


@dataclass
class EvalConfig:
    n: int = DEFAULT_EVAL_N
    seed: int = 0
    quality_radius: float | None = None


def _features(oracle, x):
    return oracle.features(x) if hasattr(oracle, "features") else np.asarray(x, dtype=np.float64)


def feature_counts(samples, oracle) -> np.ndarray:
    return np.bincount(oracle.label(samples), minlength=oracle.n_labels)


def evaluate(gen: Checkpoint, oracle, refs: EvalReferences, cfg: EvalConfig | None = None) -> MetricsReport:
    """Fill every report field from ``cfg.n`` seeded samples of each generator."""
    cfg = cfg or EvalConfig()
    x_after = samples_of(gen, cfg.n, cfg.seed)
    x_before = samples_of(refs.pretrained, cfg.n, cfg.seed)
    after_counts = feature_counts(x_after, oracle)
    before_counts = feature_counts(x_before, oracle)
    negative = sorted(oracle.negative)
    neg_before = int(before_counts[negative].sum())
    neg_after = int(after_counts[negative].sum())
    feats_after = _features(oracle, x_after)
    fid = frechet_distance(feats_after, _features(oracle, refs.data))
    ret_fid = None
    if refs.gold is not None:
        ret_fid = frechet_distance(feats_after, _features(oracle, samples_of(refs.gold, cfg.n, cfg.seed)))
    quality = None
    spec = getattr(oracle, "spec", None)
    if spec is not None:
        positive_centers = [c for i, c in enumerate(spec.centers) if i not in oracle.negative]
        radius = cfg.quality_radius if cfg.quality_radius is not None else 4 * spec.sigma
        quality = quality_fraction(x_after, positive_centers, radius)
    return MetricsReport(
        pul=pul(neg_before, neg_after),
        fid=fid,
        ret_fid=ret_fid,
        mode_histogram=[int(c) for c in after_counts],
        quality=quality,
        feature_changes=_changes(before_counts, after_counts),
        n=cfg.n,
        neg_count_before=neg_before,
        neg_count_after=neg_after,
    )


def _changes(before, after) -> dict[str, float]:
    return {str(f): (int(a) - int(b)) / max(int(b), 1) * 100.0 for f, (b, a) in enumerate(zip(before, after))}


def feature_change_report(gen_before: Checkpoint, gen_after: Checkpoint, oracle, n: int = DEFAULT_EVAL_N, seed: int = 0):
    """Percent change in how often each oracle feature occurs after unlearning."""
    before = feature_counts(samples_of(gen_before, n, seed), oracle)
    after = feature_counts(samples_of(gen_after, n, seed), oracle)
    return _changes(before, after)
