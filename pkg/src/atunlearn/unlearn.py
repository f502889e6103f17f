"""Negative adaptation with an EWC anchor, repulsion-regularized unlearning, and extrapolation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .gan import (
    DivergenceError,
    MetricSink,
    TrainConfig,
    TrainState,
    network_of,
    train_adversarial,
    generate,
)
from .params import Checkpoint, ParameterVector, affine_combine, LayoutError

logger = logging.getLogger(__name__)

REPULSION_KINDS = ("il2", "nl2", "el2", "none")
ANCHOR_REDUCTIONS = ("mean", "sum", "min")
# repulsion weight that works out of the box for each kind on the MoG task.
# nl2 is unbounded below: under Adam any weight eventually drives the parameters
# outward along the leaky-ReLU rescaling directions, so it needs a tiny one
DEFAULT_GAMMA = {"el2": 10.0, "il2": 1.0, "nl2": 1e-4, "none": 0.0}
IL2_CAP = 1e12
STAGE1_TARGET = 0.9
STAGE1_CHECK_N = 2000


class RepulsionSingularityWarning(RuntimeWarning):
    """The inverse-l2 repulsion was evaluated at an anchor and capped."""


class Stage1ContractWarning(UserWarning):
    """An adapted generator emits fewer negatives than the stage-1 target."""


@dataclass(frozen=True)
class FisherDiagonal:
    values: ParameterVector

    def __post_init__(self):
        if np.any(self.values.values < 0):
            raise ValueError("Fisher entries must be nonnegative")

    @property
    def mean(self) -> float:
        return float(self.values.values.mean())


@dataclass
class UnlearnConfig:
    """Hyperparameters for both stages.

    ``adapt_gamma * ewc_lambda`` is the effective stage-1 anchor strength. When
    ``ewc_lambda`` is None it is set to ``ewc_scale / mean(F)`` so that the
    penalty weight is independent of the Fisher's absolute magnitude.
    """

    repulsion: str = "el2"
    gamma: float = 10.0
    alpha: float = 0.01
    anchor_reduce: str = "mean"
    k: int = 3
    adapt_gamma: float = 1.0
    ewc_lambda: float | None = None
    ewc_scale: float = 1.0
    fisher_samples: int = 10000
    adapt_steps: int = 5000
    unlearn_steps: int = 80000
    batch_size: int = 256
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    disc_steps: int = 1
    r1_gamma: float = 0.1
    lr_decay: bool = True
    adapt_seed: int = 0
    unlearn_seed: int = 0
    fisher_seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.repulsion not in REPULSION_KINDS:
            raise ValueError(f"repulsion must be one of {REPULSION_KINDS}")
        if self.anchor_reduce not in ANCHOR_REDUCTIONS:
            raise ValueError(f"anchor_reduce must be one of {ANCHOR_REDUCTIONS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.repulsion == "el2" and not self.alpha > 0:
            raise ValueError("alpha must be positive for el2")

    def train_config(self, steps: int, seed: int) -> TrainConfig:
        return TrainConfig(
            steps=steps,
            batch_size=self.batch_size,
            lr_gen=self.lr_gen,
            lr_disc=self.lr_disc,
            beta1=self.beta1,
            beta2=self.beta2,
            disc_steps=self.disc_steps,
            r1_gamma=self.r1_gamma,
            lr_decay=self.lr_decay,
            seed=seed,
            log_every=self.log_every,
        )


def estimate_fisher(gen: Checkpoint, disc: Checkpoint, m: int = 10000, seed: int = 0, chunk: int = 2048) -> FisherDiagonal:
    """Diagonal empirical Fisher of the generator at its current parameters.

    Each entry is the mean over ``m`` latent draws of the squared gradient of
    ``-log sigmoid(D(G(z)))`` with respect to that generator parameter.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    gnet, dnet = network_of(gen), network_of(disc)
    theta = gen.params.values.astype(np.float64)
    phi = disc.params.values.astype(np.float64)
    z_all = np.random.default_rng(seed).standard_normal((m, gnet.sizes[0]))
    total = np.zeros(gnet.n_params)
    for start in range(0, m, chunk):
        z = z_all[start : start + chunk]
        fake, gcache = gnet.forward(theta, z)
        logits, dcache = dnet.forward(phi, fake)
        s = expit(logits[:, 0])
        # d/dlogit of -log(max(sigmoid, floor)) per sample
        dlogit = np.where(s > 1e-7, -expit(-logits[:, 0]), 0.0)
        _, gx = dnet.backward(phi, dcache, dlogit[:, None])
        sq, _ = gnet.backward(theta, gcache, gx, squared=True, need_input=False)
        total += sq
    fisher = total / m
    if not np.all(np.isfinite(fisher)):
        raise DivergenceError("non-finite gradient while estimating the Fisher diagonal")
    return FisherDiagonal(gen.params.with_values(fisher))


def _vals(v):
    if isinstance(v, FisherDiagonal):
        v = v.values
    return v.values if isinstance(v, ParameterVector) else np.asarray(v)


def _pv(v):
    return v.values if isinstance(v, FisherDiagonal) else v


def ewc_penalty(theta, theta_g, fisher, lam: float) -> float:
    """``lam * sum_i F_i (theta_i - theta_g_i)^2``."""
    if isinstance(theta, ParameterVector) and not (
        theta.compatible(theta_g) and theta.compatible(_pv(fisher))
    ):
        raise LayoutError("EWC inputs have different layouts")
    diff = _vals(theta).astype(np.float64) - _vals(theta_g).astype(np.float64)
    return float(lam * np.sum(_vals(fisher) * diff * diff))


def ewc_grad(theta, theta_g, fisher, lam: float) -> np.ndarray:
    diff = _vals(theta).astype(np.float64) - _vals(theta_g).astype(np.float64)
    return 2.0 * lam * _vals(fisher) * diff


def _per_anchor(kind, d, alpha):
    """Per-anchor repulsion values and their derivatives with respect to d."""
    if kind == "il2":
        safe = np.where(d > 0, d, 1.0)
        value = np.where(d > 0, 1.0 / safe, IL2_CAP)
        deriv = np.where(d > 0, -1.0 / (safe * safe), 0.0)
    elif kind == "nl2":
        value, deriv = -d, -np.ones_like(d)
    elif kind == "el2":
        value = np.exp(-alpha * d)
        deriv = -alpha * value
    else:
        raise ValueError(f"unknown repulsion kind {kind!r}")
    return value, deriv


def _reduce_weights(d, how):
    """Anchor weights; ``min`` keeps only the nearest anchor."""
    k = len(d)
    if how == "mean":
        return np.full(k, 1.0 / k)
    if how == "sum":
        return np.ones(k)
    w = np.zeros(k)
    w[int(np.argmin(d))] = 1.0
    return w


def repulsion_value_and_grad(kind, theta, anchors, alpha=0.01, reduce="mean"):
    """Repulsion loss over all anchors and its gradient with respect to ``theta``."""
    theta = _vals(theta).astype(np.float64)
    if kind == "none":
        return 0.0, np.zeros_like(theta)
    A = np.stack([_vals(a).astype(np.float64) for a in anchors])
    if A.shape[1:] != theta.shape:
        raise LayoutError("anchor and parameter shapes differ")
    diffs = theta[None, :] - A
    d = np.einsum("ij,ij->i", diffs, diffs)
    values, deriv = _per_anchor(kind, d, alpha)
    if kind == "il2" and np.any(d == 0):
        warnings.warn("inverse-l2 repulsion evaluated at an anchor; value capped", RepulsionSingularityWarning, stacklevel=2)
    w = _reduce_weights(d, reduce)
    value = float(w @ values)
    grad = 2.0 * ((w * deriv) @ diffs)
    return value, grad


def repulsion_loss(kind, theta, anchors, alpha=0.01, reduce="mean") -> float:
    if isinstance(theta, ParameterVector):
        for a in anchors:
            if not theta.compatible(a):
                raise LayoutError("anchor layout differs from the parameters")
    return repulsion_value_and_grad(kind, theta, anchors, alpha, reduce)[0]


def _params_of(x):
    return x.params if isinstance(x, Checkpoint) else x


def _sink_with_prefix(sink, prefix):
    if sink is None:
        return None
    return lambda step, name, value: sink(step, f"{prefix}{name}", value)


def negative_fraction(gen: Checkpoint, oracle, n: int = STAGE1_CHECK_N, seed: int = 0) -> float:
    samples = generate(network_of(gen), gen.params.values, n, seed)
    return float(np.mean(oracle.is_negative(samples)))


def adapt_one(pretrained, negatives, cfg: UnlearnConfig, fisher: FisherDiagonal, run: int, sink=None) -> Checkpoint:
    gen, disc = pretrained
    gnet, dnet = network_of(gen), network_of(disc)
    seed = cfg.adapt_seed + run
    lam = cfg.ewc_lambda if cfg.ewc_lambda is not None else cfg.ewc_scale / max(fisher.mean, 1e-300)
    weight = cfg.adapt_gamma * lam * fisher.values.values.astype(np.float64)
    anchor = gen.params.values.astype(np.float64)

    def regularizer(theta):
        diff = theta.astype(np.float64) - anchor
        return float(np.sum(weight * diff * diff)), (2.0 * weight * diff).astype(theta.dtype)

    state = TrainState.start(gen.params.values, disc.params.values, seed)
    train_adversarial(
        state,
        gnet,
        dnet,
        negatives,
        cfg.train_config(cfg.adapt_steps, seed),
        regularizer=regularizer,
        sink=_sink_with_prefix(sink, f"adapt{run}/"),
    )
    return gen.replace(
        params=gnet.to_vector(state.theta), stage="adapted", seed=seed, step=state.step, extra={"run": run}
    )


def adapt_negative(pretrained, negatives, cfg: UnlearnConfig, oracle=None, fisher=None, sink: MetricSink | None = None):
    """Adapt the pretrained pair to the negative samples ``cfg.k`` times.

    Run ``j`` uses seed ``cfg.adapt_seed + j``; runs differ only in that seed. If an
    oracle is given, each adapted generator is checked against the stage-1
    target and a :class:`Stage1ContractWarning` is issued on failure.
    """
    negatives = np.asarray(negatives)
    if len(negatives) < 1:
        raise ValueError("need at least one negative sample")
    gen, disc = pretrained
    if fisher is None:
        fisher = estimate_fisher(gen, disc, cfg.fisher_samples, cfg.fisher_seed)
    adapted = []
    for j in range(cfg.k):
        ckpt = adapt_one(pretrained, negatives, cfg, fisher, j, sink)
        if oracle is not None:
            frac = negative_fraction(ckpt, oracle, STAGE1_CHECK_N, cfg.adapt_seed + 10_000 + j)
            if sink is not None:
                sink(ckpt.meta.step, f"adapt{j}/negative_fraction", frac)
            if frac < STAGE1_TARGET:
                msg = f"adapted model {j} emits only {frac:.3f} negatives (target {STAGE1_TARGET})"
                logger.warning(msg)
                warnings.warn(msg, Stage1ContractWarning, stacklevel=2)
                if sink is not None:
                    sink(ckpt.meta.step, f"adapt{j}/warning_stage1_contract", frac)
        adapted.append(ckpt)
    return adapted


def unlearn(pretrained, positives, anchors, cfg: UnlearnConfig, sink: MetricSink | None = None) -> Checkpoint:
    """Retrain the pretrained pair on positives while repelling from the adapted anchors."""
    positives = np.asarray(positives)
    if len(positives) < 1:
        raise ValueError("need at least one positive sample")
    anchors = [_params_of(a) for a in anchors]
    if not anchors:
        raise ValueError("need at least one anchor")
    gen, disc = pretrained
    for a in anchors:
        if not gen.params.compatible(a):
            raise LayoutError("anchor layout differs from the generator")
    gnet, dnet = network_of(gen), network_of(disc)
    regularizer = None
    if cfg.repulsion != "none":
        A = [a.values.astype(np.float64) for a in anchors]
        hit = []

        def regularizer(theta):
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                value, grad = repulsion_value_and_grad(cfg.repulsion, theta, A, cfg.alpha, cfg.anchor_reduce)
            if caught and not hit:
                hit.append(True)
                warnings.warn(str(caught[0].message), RepulsionSingularityWarning, stacklevel=2)
                if sink is not None:
                    sink(state.step, "unlearn/warning_il2_cap", IL2_CAP)
            return cfg.gamma * value, (cfg.gamma * grad).astype(theta.dtype)

    state = TrainState.start(gen.params.values, disc.params.values, cfg.unlearn_seed)
    train_adversarial(
        state,
        gnet,
        dnet,
        positives,
        cfg.train_config(cfg.unlearn_steps, cfg.unlearn_seed),
        regularizer=regularizer,
        sink=_sink_with_prefix(sink, "unlearn/"),
    )
    return gen.replace(
        params=gnet.to_vector(state.theta),
        stage="unlearned",
        seed=cfg.unlearn_seed,
        step=state.step,
        extra={"repulsion": cfg.repulsion},
    )


def extrapolate(theta_g: Checkpoint, theta_n: Checkpoint, t: float) -> Checkpoint:
    """Move along the line from the adapted to the pretrained generator.

    t=0 gives the adapted parameters, t=1 the pretrained ones, t>1 goes
    further away from the adapted model.
    """
    params = affine_combine(_params_of(theta_n), _params_of(theta_g), t)
    return theta_g.replace(params=params, stage="extrapolated", extra={"t": repr(float(t))})
