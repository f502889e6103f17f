"""Small softmax MLP used as the labelling oracle and feature extractor for the image track."""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, softmax

from .nets import MLP, Adam
from .params import Checkpoint, CheckpointMeta


def classifier_descriptor(input_dim: int, hidden, n_classes: int) -> str:
    return f"classifier;in={input_dim};hidden={','.join(map(str, hidden))};classes={n_classes}"


def classifier_net(ckpt: Checkpoint) -> MLP:
    kind, *parts = ckpt.meta.architecture.split(";")
    if kind != "classifier":
        raise ValueError(f"{ckpt.meta.architecture!r} is not a classifier checkpoint")
    kv = dict(p.split("=", 1) for p in parts)
    hidden = [int(h) for h in kv["hidden"].split(",") if h]
    return MLP([int(kv["in"]), *hidden, int(kv["classes"])])


def train_classifier(
    x, y, n_classes: int, hidden=(128, 64), epochs: int = 10, batch_size: int = 256, lr: float = 2e-3, seed: int = 0
) -> Checkpoint:
    """Cross-entropy training with Adam(0.9, 0.999); returns a float32 checkpoint."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    net = MLP([x.shape[1], *hidden, n_classes])
    rng = np.random.default_rng(seed)
    theta = net.init_params(rng, np.float32)
    opt = Adam(lr, 0.9, 0.999)
    state = {"m": np.zeros_like(theta), "v": np.zeros_like(theta), "t": 0}
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            logits, cache = net.forward(theta, x[idx])
            g = softmax(logits, axis=1)
            g[np.arange(len(idx)), y[idx]] -= 1.0
            grad, _ = net.backward(theta, cache, g / len(idx), need_input=False)
            opt.step(theta, grad, state)
    meta = CheckpointMeta(classifier_descriptor(x.shape[1], hidden, n_classes), "pretrained", seed, epochs)
    return Checkpoint(net.to_vector(theta), meta)


def predict_proba(ckpt: Checkpoint, x) -> np.ndarray:
    net = classifier_net(ckpt)
    return softmax(net(ckpt.params.values.astype(np.float64), np.asarray(x, dtype=np.float64)), axis=1)


def predict(ckpt: Checkpoint, x) -> np.ndarray:
    return predict_proba(ckpt, x).argmax(axis=1)


def log_likelihood(ckpt: Checkpoint, x, y) -> float:
    net = classifier_net(ckpt)
    lp = log_softmax(net(ckpt.params.values.astype(np.float64), np.asarray(x, dtype=np.float64)), axis=1)
    return float(lp[np.arange(len(y)), y].mean())


def penultimate(ckpt: Checkpoint, x) -> np.ndarray:
    """Activations of the last hidden layer, the feature space for image Frechet distances."""
    net = classifier_net(ckpt)
    _, (acts, _) = net.forward(ckpt.params.values.astype(np.float64), np.asarray(x, dtype=np.float64))
    return acts[-2]
