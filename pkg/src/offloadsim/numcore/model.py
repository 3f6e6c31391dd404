"""A small multilayer perceptron with a hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from offloadsim.errors import DomainError


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class TinyModel:
    """tanh MLP with a mean-squared-error loss.

    Parameters are flattened as W1, b1, W2, b2, ... in layer order; weights
    are stored (fan_in, fan_out) row-major.
    """

    dims: tuple[int, ...] = (16, 32, 4)
    bias: bool = True

    def __post_init__(self) -> None:
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise DomainError("dims needs at least an input and an output width")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.dims[:-1], self.dims[1:]))

    @property
    def param_sizes(self) -> list[int]:
        sizes = []
        for fi, fo in self.layer_shapes:
            sizes.append(fi * fo)
            if self.bias:
                sizes.append(fo)
        return sizes

    @property
    def param_count(self) -> int:
        return sum(self.param_sizes)

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        for fi, fo in self.layer_shapes:
            parts.append(rng.standard_normal(fi * fo) / np.sqrt(fi))
            if self.bias:
                parts.append(np.zeros(fo))
        return np.concatenate(parts).astype(np.float32)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
        if params.shape != (self.param_count,):
            raise DomainError(f"expected {self.param_count} parameters, got {params.shape}")
        out, pos = [], 0
        for fi, fo in self.layer_shapes:
            w = params[pos:pos + fi * fo].reshape(fi, fo)
            pos += fi * fo
            b = None
            if self.bias:
                b = params[pos:pos + fo]
                pos += fo
            out.append((w, b))
        return out

    def _check_batch(self, batch: Batch) -> None:
        x, y = batch
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise DomainError(f"inputs must be (n, {self.dims[0]}), got {x.shape}")
        if y.shape != (x.shape[0], self.dims[-1]):
            raise DomainError(f"targets must be ({x.shape[0]}, {self.dims[-1]}), got {y.shape}")

    def forward(self, params: np.ndarray, batch: Batch) -> tuple[float, list[np.ndarray]]:
        """Loss and the activations backward needs, in the dtype of ``params``."""
        self._check_batch(batch)
        dtype = params.dtype
        h = batch.x.astype(dtype)
        acts = [h]
        layers = self.unpack(params)
        for k, (w, b) in enumerate(layers):
            z = h @ w
            if b is not None:
                z = z + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            acts.append(h)
        diff = h - batch.y.astype(dtype)
        loss = float(np.mean(diff * diff))
        return loss, acts

    def backward(self, params: np.ndarray, batch: Batch, acts: list[np.ndarray]) -> np.ndarray:
        dtype = params.dtype
        layers = self.unpack(params)
        n_out = acts[-1].size
        delta = (2.0 / n_out) * (acts[-1] - batch.y.astype(dtype))
        grads: list[np.ndarray] = []
        for k in range(len(layers) - 1, -1, -1):
            w, b = layers[k]
            inp = acts[k]
            gw = inp.T @ delta
            grads.append(gw.reshape(-1) if b is None else
                         np.concatenate([gw.reshape(-1), delta.sum(axis=0)]))
            if k > 0:
                delta = (delta @ w.T) * (1.0 - inp * inp)
        return np.concatenate(grads[::-1]).astype(dtype, copy=False)


def tiny_model_grads(model: TinyModel, params: np.ndarray, batch: Batch) -> tuple[np.ndarray, float]:
    loss, acts = model.forward(params, batch)
    return model.backward(params, batch, acts), loss


@dataclass(frozen=True)
class SyntheticStream:
    """Regression batches from a fixed random teacher network; batch ``i``
    depends only on (seed, i)."""

    model: TinyModel
    seed: int = 0
    batch_size: int = 32
    noise: float = 0.01

    def teacher(self) -> np.ndarray:
        return self.model.init_params(10_000 + self.seed).astype(np.float64)

    def batch(self, i: int) -> Batch:
        rng = np.random.default_rng([self.seed, i])
        x = rng.standard_normal((self.batch_size, self.model.dims[0]))
        loss_free = self.model.forward(self.teacher(), Batch(x, np.zeros((self.batch_size,
                                                                          self.model.dims[-1]))))
        y = loss_free[1][-1] + self.noise * rng.standard_normal((self.batch_size,
                                                                 self.model.dims[-1]))
        return Batch(x.astype(np.float32), y.astype(np.float32))

    def __iter__(self) -> Iterator[Batch]:
        i = 0
        while True:
            yield self.batch(i)
            i += 1
