"""Positive/negative partitions of generated samples, from an oracle or from a curated dataset."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classifier
from .data import LabeledBatch, MoGSpec, assign_modes
from .params import Checkpoint, CheckpointMeta, dumps_checkpoint, flatten, loads_checkpoint
from .gan import sample

DEFAULT_FEEDBACK_N = 1000


class DegenerateFeedbackError(ValueError):
    """Feedback left the positive or the negative set empty."""


class OracleLabelError(ValueError):
    pass


class MoGModeOracle:
    """Labels a 2-d point by its nearest mixture center."""

    kind = "mog_modes"

    def __init__(self, spec: MoGSpec, negative):
        self.spec = spec
        self.negative = frozenset(int(m) for m in negative)
        _check_negative(self.negative, spec.n_modes)

    @property
    def n_labels(self) -> int:
        return self.spec.n_modes

    def label(self, samples) -> np.ndarray:
        return assign_modes(samples, self.spec)

    def is_negative(self, samples) -> np.ndarray:
        return np.isin(self.label(samples), sorted(self.negative))

    def features(self, samples) -> np.ndarray:
        return np.asarray(samples, dtype=np.float64)


class ClassifierOracle:
    """Labels samples with a trained classifier; features are its penultimate activations."""

    kind = "classifier"

    def __init__(self, model: Checkpoint, negative):
        self.model = model
        self.negative = frozenset(int(c) for c in negative)
        _check_negative(self.negative, self.n_labels)

    @property
    def n_labels(self) -> int:
        return classifier.classifier_net(self.model).sizes[-1]

    def label(self, samples) -> np.ndarray:
        return classifier.predict(self.model, samples)

    def is_negative(self, samples) -> np.ndarray:
        return np.isin(self.label(samples), sorted(self.negative))

    def features(self, samples) -> np.ndarray:
        return classifier.penultimate(self.model, samples)


def _check_negative(negative, n_labels):
    if not negative:
        raise OracleLabelError("the negative label set must be nonempty")
    bad = [m for m in negative if not 0 <= m < n_labels]
    if bad:
        raise OracleLabelError(f"negative labels {sorted(bad)} outside [0, {n_labels})")


@dataclass(frozen=True)
class FeedbackSet:
    samples: np.ndarray
    positive_idx: np.ndarray
    negative_idx: np.ndarray

    def __post_init__(self):
        n = len(self.samples)
        pos = np.asarray(self.positive_idx, dtype=np.int64)
        neg = np.asarray(self.negative_idx, dtype=np.int64)
        both = np.concatenate([pos, neg])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValueError("positive and negative indices must partition range(n)")
        object.__setattr__(self, "positive_idx", np.sort(pos))
        object.__setattr__(self, "negative_idx", np.sort(neg))

    @classmethod
    def from_mask(cls, samples, negative_mask) -> "FeedbackSet":
        negative_mask = np.asarray(negative_mask, dtype=bool)
        fs = cls(np.asarray(samples, dtype=np.float32), np.flatnonzero(~negative_mask), np.flatnonzero(negative_mask))
        fs.require_both()
        return fs

    @property
    def positives(self) -> np.ndarray:
        return self.samples[self.positive_idx]

    @property
    def negatives(self) -> np.ndarray:
        return self.samples[self.negative_idx]

    def require_both(self) -> None:
        if len(self.negative_idx) == 0:
            raise DegenerateFeedbackError("no sample was marked negative")
        if len(self.positive_idx) == 0:
            raise DegenerateFeedbackError("every sample was marked negative")


def collect_feedback(gen: Checkpoint, oracle, n: int = DEFAULT_FEEDBACK_N, seed: int = 0) -> FeedbackSet:
    if n < 2:
        raise ValueError("n must be >= 2")
    samples = sample(gen, n, seed).astype(np.float32)
    labels = oracle.label(samples)
    if labels.min() < 0 or labels.max() >= oracle.n_labels:
        raise OracleLabelError("oracle produced a label outside its range")
    return FeedbackSet.from_mask(samples, np.isin(labels, sorted(oracle.negative)))


def curated_feedback(data: LabeledBatch, negative_labels) -> FeedbackSet:
    negative_labels = sorted(set(int(v) for v in negative_labels))
    if negative_labels and (negative_labels[0] < 0 or negative_labels[-1] > int(data.labels.max(initial=0))):
        raise OracleLabelError(f"negative labels {negative_labels} outside the data's label range")
    return FeedbackSet.from_mask(data.points, np.isin(data.labels, negative_labels))


def save_feedback(fs: FeedbackSet, samples_path, negatives_path) -> None:
    """Samples go in the checkpoint tensor container; negatives as one index per line."""
    meta = CheckpointMeta("samples", "pretrained", extra=(("kind", "feedback"),))
    Path(samples_path).write_bytes(dumps_checkpoint(Checkpoint(flatten({"samples": fs.samples}), meta)))
    Path(negatives_path).write_text("".join(f"{i}\n" for i in fs.negative_idx))


def load_feedback(samples_path, negatives_path) -> FeedbackSet:
    ckpt = loads_checkpoint(Path(samples_path).read_bytes())
    samples = ckpt.params.tensor("samples")
    text = Path(negatives_path).read_text().split()
    mask = np.zeros(len(samples), dtype=bool)
    mask[[int(t) for t in text]] = True
    return FeedbackSet.from_mask(samples, mask)
