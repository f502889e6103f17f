"""Stage runners shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf
from .config import Config
from .data import LabeledBatch, load_idx_images, sample_mog
from .feedback import ClassifierOracle, FeedbackSet, MoGModeOracle, collect_feedback
from .gan import MetricSink, pretrain
from .metrics import EvalConfig, EvalReferences, MetricsReport, evaluate
from .params import Checkpoint
from .unlearn import FisherDiagonal, adapt_negative, estimate_fisher, extrapolate, unlearn

logger = logging.getLogger(__name__)


def training_data(cfg: Config) -> LabeledBatch:
    if cfg.uses_images:
        return load_idx_images(cfg.idx_images, cfg.idx_labels)
    return sample_mog(cfg.mog, cfg.data_n)


def train_oracle_classifier(cfg: Config, data: LabeledBatch) -> tuple[Checkpoint, float]:
    """Fit the image-track classifier on 90% of the data; returns it with held-out accuracy."""
    rng = np.random.default_rng(cfg.seed_for("data") + 1)
    order = rng.permutation(len(data))
    cut = int(0.9 * len(data))
    train, test = order[:cut], order[cut:]
    n_classes = int(data.labels.max()) + 1
    model = clf.train_classifier(
        data.points[train], data.labels[train], n_classes, cfg.classifier_hidden, cfg.classifier_epochs, seed=cfg.seed
    )
    acc = float(np.mean(clf.predict(model, data.points[test]) == data.labels[test])) if len(test) else float("nan")
    return model, acc


def make_oracle(cfg: Config, model: Checkpoint | None = None):
    if cfg.uses_images:
        if model is None:
            raise ValueError("the image track needs a classifier checkpoint for its oracle")
        return ClassifierOracle(model, cfg.negative_modes)
    return MoGModeOracle(cfg.mog, cfg.negative_modes)


def output_dim(cfg: Config, data: LabeledBatch | None = None) -> int:
    if not cfg.uses_images:
        return 2
    data = data if data is not None else training_data(cfg)
    return data.points.shape[1]


def run_pretrain(cfg: Config, data: LabeledBatch | None = None, sink: MetricSink | None = None):
    data = data if data is not None else training_data(cfg)
    dim = data.points.shape[1]
    return pretrain(data, cfg.generator_spec(dim), cfg.discriminator_spec(dim), cfg.train_config(), sink=sink)


def positives_only(cfg: Config, data: LabeledBatch | None = None) -> LabeledBatch:
    """Training distribution with every negative label removed."""
    if not cfg.uses_images:
        spec = cfg.mog
        keep = [m for m in range(spec.n_modes) if m not in set(cfg.negative_modes)]
        return sample_mog(spec, cfg.data_n, modes=keep)
    data = data if data is not None else training_data(cfg)
    return data.subset(~np.isin(data.labels, cfg.negative_modes))


def reference_sample(cfg: Config) -> np.ndarray:
    """Independent positives-only sample used as the Frechet reference set."""
    if cfg.uses_images:
        return positives_only(cfg).points
    spec = cfg.mog
    keep = [m for m in range(spec.n_modes) if m not in set(cfg.negative_modes)]
    from .data import MoGSpec

    ref_spec = MoGSpec(spec.n_modes, spec.radius, spec.sigma, cfg.seed_for("reference"))
    return sample_mog(ref_spec, cfg.reference_n, modes=keep).points


def run_gold(cfg: Config, sink: MetricSink | None = None):
    """A GAN trained from scratch on positives-only data (the retraining gold standard)."""
    data = positives_only(cfg)
    dim = data.points.shape[1]
    return pretrain(
        data,
        cfg.generator_spec(dim),
        cfg.discriminator_spec(dim),
        cfg.train_config(seed=cfg.seed_for("gold")),
        sink=sink,
    )


def run_feedback(cfg: Config, gen: Checkpoint, oracle) -> FeedbackSet:
    return collect_feedback(gen, oracle, cfg.feedback_n, cfg.seed_for("feedback"))


def run_adapt(cfg: Config, pair, fs: FeedbackSet, oracle=None, sink=None, fisher: FisherDiagonal | None = None):
    ucfg = cfg.unlearn_config()
    if fisher is None:
        fisher = estimate_fisher(pair[0], pair[1], ucfg.fisher_samples, ucfg.fisher_seed)
    return adapt_negative(pair, fs.negatives, ucfg, oracle=oracle, fisher=fisher, sink=sink), fisher


def run_unlearn(cfg: Config, pair, fs: FeedbackSet, anchors, sink=None) -> Checkpoint:
    return unlearn(pair, fs.positives, anchors, cfg.unlearn_config(), sink=sink)


def run_extrapolate(pretrained: Checkpoint, anchors, t: float) -> Checkpoint:
    """Extrapolate away from the first adapted model."""
    return extrapolate(pretrained, anchors[0], t)


def run_evaluate(cfg: Config, gen: Checkpoint, oracle, pretrained: Checkpoint, gold: Checkpoint | None = None, reference=None) -> MetricsReport:
    reference = reference if reference is not None else reference_sample(cfg)
    refs = EvalReferences(pretrained=pretrained, data=reference, gold=gold)
    return evaluate(gen, oracle, refs, EvalConfig(cfg.eval_n, cfg.eval_seed, cfg.quality_radius))


@dataclass
class ReferenceRun:
    config: Config
    pretrained: tuple
    feedback: FeedbackSet
    fisher: FisherDiagonal
    adapted: list
    unlearned: Checkpoint
    gold: tuple | None
    report: MetricsReport
    metrics: list = field(default_factory=list)


def run_reference(cfg: Config, with_gold: bool = True) -> ReferenceRun:
    """pretrain -> feedback -> adapt -> unlearn -> evaluate, all from ``cfg``."""
    records = []

    def sink(step, name, value):
        records.append((step, name, value))

    data = training_data(cfg)
    oracle_model = None
    if cfg.uses_images:
        oracle_model, _ = train_oracle_classifier(cfg, data)
    oracle = make_oracle(cfg, oracle_model)
    pair = run_pretrain(cfg, data, sink)
    fs = run_feedback(cfg, pair[0], oracle)
    anchors, fisher = run_adapt(cfg, pair, fs, oracle, sink)
    unlearned = run_unlearn(cfg, pair, fs, anchors, sink)
    gold = run_gold(cfg) if with_gold else None
    report = run_evaluate(cfg, unlearned, oracle, pair[0], gold[0] if gold else None)
    return ReferenceRun(cfg, pair, fs, fisher, anchors, unlearned, gold, report, records)
