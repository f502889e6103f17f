"""Generator/discriminator specs, the non-saturating GAN loss and the shared training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import LabeledBatch
from .nets import MLP, Adam
from .params import Checkpoint, CheckpointMeta

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-7

# (theta) -> (value, gradient); an extra generator objective added during training
Regularizer = Callable[[np.ndarray], tuple[float, np.ndarray]]
MetricSink = Callable[[int, str, float], None]


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64, 64)
    output_dim: int = 2
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    def build(self) -> MLP:
        return MLP([self.latent_dim, *self.hidden, self.output_dim], self.output_activation)

    def descriptor(self) -> str:
        return (
            f"generator;latent={self.latent_dim};hidden={','.join(map(str, self.hidden))};"
            f"out={self.output_dim};act={self.output_activation}"
        )


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int = 2
    hidden: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def build(self) -> MLP:
        return MLP([self.input_dim, *self.hidden, 1], "linear")

    def descriptor(self) -> str:
        return f"discriminator;in={self.input_dim};hidden={','.join(map(str, self.hidden))}"


def spec_from_descriptor(text: str) -> GeneratorSpec | DiscriminatorSpec:
    kind, *parts = text.split(";")
    kv = dict(p.split("=", 1) for p in parts)
    hidden = tuple(int(h) for h in kv["hidden"].split(",") if h)
    if kind == "generator":
        return GeneratorSpec(int(kv["latent"]), hidden, int(kv["out"]), kv["act"])
    if kind == "discriminator":
        return DiscriminatorSpec(int(kv["in"]), hidden)
    raise ValueError(f"unknown architecture descriptor {text!r}")


def network_of(ckpt: Checkpoint) -> MLP:
    return spec_from_descriptor(ckpt.meta.architecture).build()


def _log_sigmoid_terms(logits):
    """Clamped ``log sigmoid(l)`` and ``log(1 - sigmoid(l))`` with their derivatives."""
    s, one_minus = expit(logits), expit(-logits)
    pos = np.log(np.maximum(s, LOG_FLOOR))
    neg = np.log(np.maximum(one_minus, LOG_FLOOR))
    dpos = np.where(s > LOG_FLOOR, one_minus, 0.0)
    dneg = np.where(one_minus > LOG_FLOOR, -s, 0.0)
    return pos, dpos, neg, dneg


def disc_loss_from_logits(real_logits, fake_logits) -> float:
    pos, _, _, _ = _log_sigmoid_terms(real_logits)
    _, _, neg, _ = _log_sigmoid_terms(fake_logits)
    return float(-pos.mean() - neg.mean())


def gen_loss_from_logits(fake_logits) -> float:
    pos, _, _, _ = _log_sigmoid_terms(fake_logits)
    return float(-pos.mean())


def adversarial_losses(gnet: MLP, theta, dnet: MLP, phi, real, z) -> tuple[float, float]:
    """Discriminator BCE loss and the non-saturating generator loss."""
    real = np.atleast_2d(real)
    z = np.atleast_2d(z)
    if len(real) == 0 or len(z) == 0:
        raise ValueError("batches must be nonempty")
    if real.shape[1] != dnet.sizes[0] or z.shape[1] != gnet.sizes[0]:
        raise ValueError("batch shapes do not match the networks")
    fake = gnet(theta, z)
    return disc_loss_from_logits(dnet(phi, real)[:, 0], dnet(phi, fake)[:, 0]), gen_loss_from_logits(
        dnet(phi, fake)[:, 0]
    )


def disc_step_grad(gnet, theta, dnet, phi, real, z, r1_gamma=0.0):
    """Discriminator loss and its gradient w.r.t. ``phi`` (generator held fixed).

    ``r1_gamma`` adds ``r1_gamma / 2 * E||grad_x D(x)||^2`` on the real batch.
    """
    fake = gnet(theta, z)
    x = np.concatenate([real, fake])
    logits, cache = dnet.forward(phi, x)
    logits = logits[:, 0]
    nr = len(real)
    pos, dpos, _, _ = _log_sigmoid_terms(logits[:nr])
    _, _, neg, dneg = _log_sigmoid_terms(logits[nr:])
    loss = float(-pos.mean() - neg.mean())
    g = np.concatenate([-dpos / nr, -dneg / len(fake)])[:, None]
    grad, _ = dnet.backward(phi, cache, g, need_input=False)
    if r1_gamma:
        r1, r1_grad = dnet.input_grad_penalty(phi, real)
        loss += 0.5 * r1_gamma * r1
        grad += (0.5 * r1_gamma) * r1_grad
    return loss, grad


def gen_step_grad(gnet, theta, dnet, phi, z):
    """Non-saturating generator loss and its gradient w.r.t. ``theta``."""
    fake, gcache = gnet.forward(theta, z)
    logits, dcache = dnet.forward(phi, fake)
    pos, dpos, _, _ = _log_sigmoid_terms(logits[:, 0])
    loss = float(-pos.mean())
    _, gx = dnet.backward(phi, dcache, (-dpos / len(z))[:, None])
    grad, _ = gnet.backward(theta, gcache, gx, need_input=False)
    return loss, grad


@dataclass
class TrainConfig:
    steps: int = 40000
    batch_size: int = 256
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    disc_steps: int = 1
    r1_gamma: float = 0.0
    lr_decay: bool = False
    seed: int = 0
    log_every: int = 500
    dtype: str = "float32"


@dataclass
class TrainState:
    theta: np.ndarray
    phi: np.ndarray
    gen_opt: dict
    disc_opt: dict
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def start(cls, theta, phi, seed, dtype="float32") -> "TrainState":
        theta = np.array(theta, dtype=dtype)
        phi = np.array(phi, dtype=dtype)
        return cls(
            theta,
            phi,
            {"m": np.zeros_like(theta), "v": np.zeros_like(theta), "t": 0},
            {"m": np.zeros_like(phi), "v": np.zeros_like(phi), "t": 0},
            0,
            np.random.default_rng(seed),
        )

    def save(self, path) -> None:
        path = Path(path)
        np.savez(
            path,
            theta=self.theta,
            phi=self.phi,
            gm=self.gen_opt["m"],
            gv=self.gen_opt["v"],
            dm=self.disc_opt["m"],
            dv=self.disc_opt["v"],
            counters=np.array([self.step, self.gen_opt["t"], self.disc_opt["t"]], dtype=np.int64),
            rng=np.array(json.dumps(self.rng.bit_generator.state)),
        )

    @classmethod
    def load(cls, path) -> "TrainState":
        with np.load(path) as f:
            step, gt, dt = (int(c) for c in f["counters"])
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(str(f["rng"]))
            return cls(
                f["theta"].copy(),
                f["phi"].copy(),
                {"m": f["gm"].copy(), "v": f["gv"].copy(), "t": gt},
                {"m": f["dm"].copy(), "v": f["dv"].copy(), "t": dt},
                step,
                rng,
            )


def train_adversarial(
    state: TrainState,
    gnet: MLP,
    dnet: MLP,
    pool: np.ndarray,
    cfg: TrainConfig,
    n_steps: int | None = None,
    regularizer: Regularizer | None = None,
    sink: MetricSink | None = None,
) -> TrainState:
    """Alternating updates against samples drawn with replacement from ``pool``.

    ``regularizer`` is added to the generator objective only.
    """
    n_steps = cfg.steps if n_steps is None else n_steps
    dtype = state.theta.dtype
    pool = np.asarray(pool, dtype=dtype)
    if len(pool) == 0:
        raise ValueError("empty training pool")
    gopt = Adam(cfg.lr_gen, cfg.beta1, cfg.beta2)
    dopt = Adam(cfg.lr_disc, cfg.beta1, cfg.beta2)
    rng = state.rng
    latent = gnet.sizes[0]
    for _ in range(n_steps):
        if cfg.lr_decay:
            # linear decay to zero over cfg.steps, keyed on the absolute step so resuming is exact
            frac = max(0.0, 1.0 - state.step / max(cfg.steps, 1))
            gopt.lr, dopt.lr = cfg.lr_gen * frac, cfg.lr_disc * frac
        for _ in range(cfg.disc_steps):
            real = pool[rng.integers(0, len(pool), size=cfg.batch_size)]
            z = rng.standard_normal((cfg.batch_size, latent), dtype=dtype)
            d_loss, d_grad = disc_step_grad(gnet, state.theta, dnet, state.phi, real, z, cfg.r1_gamma)
            if not np.isfinite(d_loss) or not np.all(np.isfinite(d_grad)):
                raise DivergenceError(f"discriminator loss non-finite at step {state.step}")
            dopt.step(state.phi, d_grad, state.disc_opt)
        z = rng.standard_normal((cfg.batch_size, latent), dtype=dtype)
        g_loss, g_grad = gen_step_grad(gnet, state.theta, dnet, state.phi, z)
        reg = 0.0
        if regularizer is not None:
            reg, r_grad = regularizer(state.theta)
            g_grad = g_grad + r_grad
        if not np.isfinite(g_loss + reg) or not np.all(np.isfinite(g_grad)):
            raise DivergenceError(f"generator loss non-finite at step {state.step}")
        gopt.step(state.theta, g_grad, state.gen_opt)
        state.step += 1
        if sink is not None and cfg.log_every and state.step % cfg.log_every == 0:
            sink(state.step, "disc_loss", d_loss)
            sink(state.step, "gen_loss", g_loss)
            if regularizer is not None:
                sink(state.step, "regularizer", float(reg))
    return state


def init_pair(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int):
    rng = np.random.default_rng([seed, 0xA7])
    gnet, dnet = gen_spec.build(), disc_spec.build()
    return gnet, gnet.init_params(rng), dnet, dnet.init_params(rng)


def make_checkpoint(net: MLP, values, architecture: str, stage: str, seed: int, step: int, **extra) -> Checkpoint:
    meta = CheckpointMeta(
        architecture=architecture,
        stage=stage,
        seed=int(seed),
        step=int(step),
        extra=tuple(sorted((str(k), str(v)) for k, v in extra.items())),
    )
    return Checkpoint(net.to_vector(values), meta)


def pretrain(
    data: LabeledBatch | np.ndarray,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    cfg: TrainConfig,
    sink: MetricSink | None = None,
) -> tuple[Checkpoint, Checkpoint]:
    """Train a GAN from scratch; returns (generator, discriminator) checkpoints tagged pretrained."""
    points = data.points if isinstance(data, LabeledBatch) else np.asarray(data)
    gnet, theta, dnet, phi = init_pair(gen_spec, disc_spec, cfg.seed)
    state = TrainState.start(theta, phi, cfg.seed, cfg.dtype)
    train_adversarial(state, gnet, dnet, points, cfg, sink=sink)
    logger.info("pretrain finished after %d steps", state.step)
    return (
        make_checkpoint(gnet, state.theta, gen_spec.descriptor(), "pretrained", cfg.seed, state.step),
        make_checkpoint(dnet, state.phi, disc_spec.descriptor(), "pretrained", cfg.seed, state.step),
    )


def generate(gnet: MLP, theta, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.random.default_rng(seed).standard_normal((n, gnet.sizes[0]))
    return gnet(np.asarray(theta, dtype=np.float64), z)


def sample(gen: Checkpoint, n: int, seed: int) -> np.ndarray:
    """``n`` generator outputs from latents drawn i.i.d. N(0, I) with ``seed``."""
    return generate(network_of(gen), gen.params.values, n, seed)
