"""Multilayer perceptrons on flat parameter arrays, with hand-written backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParameterVector, Slot

LEAK = 0.2


class MLP:
    """Fully connected net whose parameters live in one flat float array.

    Hidden units are leaky-ReLU; the head is ``linear`` or ``tanh``.
    Tensors are named ``layer{i}.weight`` (shape ``(out, in)``) and
    ``layer{i}.bias``, stored in lexicographic name order.
    """

    def __init__(self, sizes, output="linear"):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if output not in ("linear", "tanh"):
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = sizes
        self.output = output
        shapes = {}
        width = len(str(len(sizes) - 2))
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"layer{i:0{width}d}.bias"] = (n_out,)
            shapes[f"layer{i:0{width}d}.weight"] = (n_out, n_in)
        offset, layout = 0, []
        for name in sorted(shapes):
            layout.append(Slot(name, shapes[name], offset))
            offset += layout[-1].size
        self.layout = tuple(layout)
        self.n_params = offset
        by_name = {s.name: s for s in layout}
        self._slices = []
        for i in range(len(sizes) - 1):
            w = by_name[f"layer{i:0{width}d}.weight"]
            b = by_name[f"layer{i:0{width}d}.bias"]
            self._slices.append(
                (slice(w.offset, w.offset + w.size), w.shape, slice(b.offset, b.offset + b.size))
            )

    @property
    def n_layers(self) -> int:
        return len(self._slices)

    def unpack(self, theta):
        return [(theta[ws].reshape(shape), theta[bs]) for ws, shape, bs in self._slices]

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
        theta = np.empty(self.n_params, dtype=dtype)
        for ws, shape, bs in self._slices:
            bound = 1.0 / np.sqrt(shape[1])
            theta[ws] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
            theta[bs] = rng.uniform(-bound, bound, size=shape[0])
        return theta

    def to_vector(self, theta) -> ParameterVector:
        return ParameterVector(theta, [(s.name, s.shape, s.offset) for s in self.layout])

    def forward(self, theta, x):
        """Return ``(output, cache)``; ``cache`` feeds :meth:`backward`."""
        acts, pres = [x], []
        h = x
        layers = self.unpack(theta)
        for i, (w, b) in enumerate(layers):
            pre = h @ w.T + b
            pres.append(pre)
            if i < len(layers) - 1:
                h = np.maximum(pre, LEAK * pre)
            elif self.output == "tanh":
                h = np.tanh(pre)
            else:
                h = pre
            acts.append(h)
        return h, (acts, pres)

    def __call__(self, theta, x):
        return self.forward(theta, x)[0]

    def backward(self, theta, cache, grad_out, *, squared=False, need_input=True):
        """Backpropagate ``grad_out`` (dLoss/dOutput, one row per sample).

        Returns ``(grad_theta, grad_input)``. With ``squared=True`` the first
        element is instead the sum over samples of the squared per-sample
        parameter gradients.
        """
        acts, pres = cache
        layers = self.unpack(theta)
        grad = np.zeros(self.n_params, dtype=np.result_type(theta, grad_out))
        delta = grad_out
        last = len(layers) - 1
        for i in range(last, -1, -1):
            w, _ = layers[i]
            pre = pres[i]
            if i == last:
                if self.output == "tanh":
                    delta = delta * (1.0 - acts[i + 1] ** 2)
            else:
                slope = (pre > 0).astype(pre.dtype)
                slope *= 1.0 - LEAK
                slope += LEAK
                delta = delta * slope
            ws, shape, bs = self._slices[i]
            a = acts[i]
            if squared:
                grad[ws] = ((delta * delta).T @ (a * a)).ravel()
                grad[bs] = (delta * delta).sum(axis=0)
            else:
                grad[ws] = (delta.T @ a).ravel()
                grad[bs] = delta.sum(axis=0)
            if i > 0 or need_input:
                delta = delta @ w
        return grad, (delta if need_input else None)

    def input_grad_penalty(self, theta, x):
        """Mean squared norm of d(output)/d(input) and its gradient w.r.t. ``theta``.

        Only defined for a scalar linear head. Leaky-ReLU slopes are piecewise
        constant, so the penalty is multilinear in the weights and has no
        bias dependence almost everywhere.
        """
        if self.sizes[-1] != 1 or self.output != "linear":
            raise ValueError("input gradient penalty needs a scalar linear head")
        _, (acts, pres) = self.forward(theta, x)
        layers = self.unpack(theta)
        n, last = len(x), len(layers) - 1
        slopes = []
        for pre in pres[:-1]:
            s = (pre > 0).astype(pre.dtype)
            s *= 1.0 - LEAK
            s += LEAK
            slopes.append(s)
        deltas = [None] * len(layers)
        deltas[last] = np.ones((n, 1), dtype=np.result_type(theta, x))
        for i in range(last - 1, -1, -1):
            deltas[i] = (deltas[i + 1] @ layers[i + 1][0]) * slopes[i]
        g = deltas[0] @ layers[0][0]
        value = float(np.mean(np.sum(g * g, axis=1)))
        grad = np.zeros(self.n_params, dtype=deltas[last].dtype)
        f = g
        for i in range(len(layers)):
            ws, _, _ = self._slices[i]
            grad[ws] = (2.0 / n) * (deltas[i].T @ f).ravel()
            if i < last:
                f = (f @ layers[i][0].T) * slopes[i]
        return value, grad


@dataclass
class Adam:
    """Adam on a flat array; state is plain arrays so it checkpoints exactly."""

    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, theta, grad, state) -> None:
        state["t"] += 1
        t = state["t"]
        m, v = state["m"], state["v"]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
