"""Flat ``key = value`` run configuration with documented defaults."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import MoGSpec
from .gan import DiscriminatorSpec, GeneratorSpec, TrainConfig
from .unlearn import UnlearnConfig

ENV_VAR = "ATU_CONFIG"

# fixed offsets from the base seed for each stage
SEED_OFFSETS = {
    "data": 0,
    "pretrain": 0,
    "feedback": 1000,
    "adapt": 2000,
    "unlearn": 3000,
    "fisher": 4000,
    "gold": 5000,
    "reference": 6000,
}


class ConfigError(ValueError):
    pass


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "auto", "none"):
        return None
    return float(text)


@dataclass
class Config:
    # base seed; every stage seed is derived from it (see SEED_OFFSETS)
    seed: int = 0
    # mixture of Gaussians
    mog_modes: int = 8
    mog_radius: float = 2.0
    mog_sigma: float = 0.05
    data_n: int = 50000
    # optional IDX image track (used when idx_images is set)
    idx_images: str = ""
    idx_labels: str = ""
    classifier_hidden: tuple = (128, 64)
    classifier_epochs: int = 10
    # networks
    latent_dim: int = 2
    gen_hidden: tuple = (64, 64, 64)
    disc_hidden: tuple = (64, 64, 64)
    gen_output: str = "linear"
    # optimisation shared by all stages
    batch_size: int = 256
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    disc_steps: int = 1
    r1_gamma: float = 0.1
    lr_decay: bool = True
    log_every: int = 500
    pretrain_steps: int = 40000
    # feedback
    negative_modes: tuple = (0, 1)
    feedback_n: int = 1000
    # stage 1
    k: int = 3
    adapt_steps: int = 5000
    adapt_gamma: float = 1.0
    ewc_lambda: float | None = None
    ewc_scale: float = 1.0
    fisher_samples: int = 10000
    # stage 2
    repulsion: str = "el2"
    gamma: float = 10.0
    alpha: float = 0.01
    anchor_reduce: str = "mean"
    unlearn_steps: int = 80000
    # extrapolation baseline
    extrapolate_t: float = 2.0
    # evaluation
    eval_n: int = 15000
    eval_seed: int = 12345
    reference_n: int = 15000
    quality_radius: float | None = None

    def seed_for(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    @property
    def mog(self) -> MoGSpec:
        return MoGSpec(self.mog_modes, self.mog_radius, self.mog_sigma, self.seed_for("data"))

    @property
    def uses_images(self) -> bool:
        return bool(self.idx_images)

    def generator_spec(self, output_dim: int = 2) -> GeneratorSpec:
        return GeneratorSpec(self.latent_dim, self.gen_hidden, output_dim, self.gen_output)

    def discriminator_spec(self, input_dim: int = 2) -> DiscriminatorSpec:
        return DiscriminatorSpec(input_dim, self.disc_hidden)

    def train_config(self, steps: int | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            steps=self.pretrain_steps if steps is None else steps,
            batch_size=self.batch_size,
            lr_gen=self.lr_gen,
            lr_disc=self.lr_disc,
            beta1=self.beta1,
            beta2=self.beta2,
            disc_steps=self.disc_steps,
            r1_gamma=self.r1_gamma,
            lr_decay=self.lr_decay,
            seed=self.seed_for("pretrain") if seed is None else seed,
            log_every=self.log_every,
        )

    def unlearn_config(self) -> UnlearnConfig:
        return UnlearnConfig(
            repulsion=self.repulsion,
            gamma=self.gamma,
            alpha=self.alpha,
            anchor_reduce=self.anchor_reduce,
            k=self.k,
            adapt_gamma=self.adapt_gamma,
            ewc_lambda=self.ewc_lambda,
            ewc_scale=self.ewc_scale,
            fisher_samples=self.fisher_samples,
            adapt_steps=self.adapt_steps,
            unlearn_steps=self.unlearn_steps,
            batch_size=self.batch_size,
            lr_gen=self.lr_gen,
            lr_disc=self.lr_disc,
            beta1=self.beta1,
            beta2=self.beta2,
            disc_steps=self.disc_steps,
            r1_gamma=self.r1_gamma,
            lr_decay=self.lr_decay,
            adapt_seed=self.seed_for("adapt"),
            unlearn_seed=self.seed_for("unlearn"),
            fisher_seed=self.seed_for("fisher"),
            log_every=self.log_every,
        )

    def replace(self, **kw) -> "Config":
        return parse_values(dataclasses.asdict(self) | kw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


_CONVERTERS = {
    "tuple": _ints,
    "bool": _bool,
    "int": int,
    "float": float,
    "str": str,
    "float | None": _opt_float,
}

KEYS = tuple(f.name for f in fields(Config))


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "auto"
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_values(values: dict) -> Config:
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {}
    for f in fields(Config):
        if f.name in values:
            try:
                kw[f.name] = _CONVERTERS[str(f.type)](values[f.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {f.name}: {values[f.name]!r} ({exc})") from None
    return Config(**kw)


def read_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the file (``path`` or $ATU_CONFIG), then ``overrides``."""
    values = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(read_config_text(p.read_text(encoding="utf-8"), str(p)))
    values.update(overrides or {})
    return parse_values(values)
