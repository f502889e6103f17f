"""scikit-learn style wrappers around the training stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import LabeledBatch
from .gan import DiscriminatorSpec, GeneratorSpec, TrainConfig, pretrain, sample
from .unlearn import UnlearnConfig, adapt_negative, estimate_fisher, unlearn


def _points(X, min_samples=1):
    return check_array(X, dtype=np.float32, ensure_min_samples=min_samples)


def _check_mask(mask, n):
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise ValueError(f"negative mask must have shape ({n},), got {mask.shape}")
    if mask.dtype != bool:
        if not np.all(np.isin(mask, (0, 1))):
            raise ValueError("negative mask must be boolean or 0/1")
        mask = mask.astype(bool)
    if mask.all() or not mask.any():
        raise ValueError("negative mask must contain both positives and negatives")
    return mask


class _TrainParams(BaseEstimator):
    """Hyperparameters shared by every estimator here."""

    def _train_config(self, steps, seed):
        return TrainConfig(
            steps=steps,
            batch_size=self.batch_size,
            lr_gen=self.lr,
            lr_disc=self.lr,
            r1_gamma=self.r1_gamma,
            lr_decay=self.lr_decay,
            seed=seed,
        )

    def sample(self, n_samples: int = 1000, random_state: int | None = None) -> np.ndarray:
        check_is_fitted(self, "generator_")
        seed = self.random_state if random_state is None else random_state
        return sample(self.generator_, int(n_samples), int(seed))


class GAN(_TrainParams):
    """Generator/discriminator MLP pair fitted to a point cloud.

    >>> gan = GAN(steps=200).fit(X)            # doctest: +SKIP
    >>> gan.sample(100).shape                  # doctest: +SKIP
    (100, 2)
    """

    def __init__(
        self,
        latent_dim: int = 2,
        hidden=(64, 64, 64),
        steps: int = 40000,
        batch_size: int = 256,
        lr: float = 1e-3,
        r1_gamma: float = 0.1,
        lr_decay: bool = True,
        random_state: int = 0,
    ):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.r1_gamma = r1_gamma
        self.lr_decay = lr_decay
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _points(X)
        self.n_features_in_ = X.shape[1]
        labels = np.zeros(len(X), dtype=np.int64) if y is None else np.asarray(y, dtype=np.int64)
        data = LabeledBatch(X, labels)
        self.generator_, self.discriminator_ = pretrain(
            data,
            GeneratorSpec(self.latent_dim, tuple(self.hidden), self.n_features_in_),
            DiscriminatorSpec(self.n_features_in_, tuple(self.hidden)),
            self._train_config(self.steps, self.random_state),
        )
        return self


class AdaptThenUnlearn(_TrainParams):
    """Remove the regions of a fitted GAN that produced the flagged samples.

    ``fit(X, negative_mask)`` takes generator samples ``X`` and a boolean mask of
    the undesired ones. ``gan`` must already be fitted. The adapted generators
    are kept in ``adapted_``; the result is in ``generator_``.
    """

    def __init__(
        self,
        gan: GAN | None = None,
        repulsion: str = "el2",
        gamma: float = 10.0,
        alpha: float = 0.01,
        k: int = 3,
        adapt_steps: int = 5000,
        unlearn_steps: int = 80000,
        ewc_scale: float = 1.0,
        fisher_samples: int = 10000,
        batch_size: int = 256,
        lr: float = 1e-3,
        r1_gamma: float = 0.1,
        lr_decay: bool = True,
        random_state: int = 0,
    ):
        self.gan = gan
        self.repulsion = repulsion
        self.gamma = gamma
        self.alpha = alpha
        self.k = k
        self.adapt_steps = adapt_steps
        self.unlearn_steps = unlearn_steps
        self.ewc_scale = ewc_scale
        self.fisher_samples = fisher_samples
        self.batch_size = batch_size
        self.lr = lr
        self.r1_gamma = r1_gamma
        self.lr_decay = lr_decay
        self.random_state = random_state

    def _unlearn_config(self) -> UnlearnConfig:
        s = self.random_state
        return UnlearnConfig(
            repulsion=self.repulsion,
            gamma=self.gamma,
            alpha=self.alpha,
            k=self.k,
            ewc_scale=self.ewc_scale,
            fisher_samples=self.fisher_samples,
            adapt_steps=self.adapt_steps,
            unlearn_steps=self.unlearn_steps,
            batch_size=self.batch_size,
            lr_gen=self.lr,
            lr_disc=self.lr,
            r1_gamma=self.r1_gamma,
            lr_decay=self.lr_decay,
            adapt_seed=s + 2000,
            unlearn_seed=s + 3000,
            fisher_seed=s + 4000,
        )

    def fit(self, X, negative_mask):
        if self.gan is None:
            raise ValueError("AdaptThenUnlearn needs a fitted GAN")
        check_is_fitted(self.gan, "generator_")
        X = _points(X, min_samples=2)
        if X.shape[1] != self.gan.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the GAN expects {self.gan.n_features_in_}")
        mask = _check_mask(negative_mask, len(X))
        cfg = self._unlearn_config()
        pair = (self.gan.generator_, self.gan.discriminator_)
        self.fisher_ = estimate_fisher(*pair, cfg.fisher_samples, cfg.fisher_seed)
        self.adapted_ = adapt_negative(pair, X[mask], cfg, fisher=self.fisher_)
        self.generator_ = unlearn(pair, X[~mask], self.adapted_, cfg)
        self.n_features_in_ = X.shape[1]
        return self
