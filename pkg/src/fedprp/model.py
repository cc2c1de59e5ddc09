"""Decoupled local model: shared feature extractor plus personalized linear head."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .numerics import GradTape, affine_forward, relu


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SharedParams:
    """Feature extractor: a stack of affine+ReLU layers."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("feature extractor needs at least one layer")
        layers = tuple((_frozen(W), _frozen(b)) for W, b in self.layers)
        prev = None
        for i, (W, b) in enumerate(layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ConfigError(f"layer {i}: W{W.shape} does not match b{b.shape}")
            if prev is not None and W.shape[1] != prev:
                raise ConfigError(f"layer {i}: expects input {W.shape[1]}, previous outputs {prev}")
            prev = W.shape[0]
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [s for W, b in self.layers for s in (W.shape, b.shape)]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    @classmethod
    def from_arrays(cls, arrays) -> SharedParams:
        arrays = list(arrays)
        return cls(tuple(zip(arrays[::2], arrays[1::2])))

    def digest(self) -> str:
        return params_digest(self.arrays())


@dataclass(frozen=True, eq=False)
class PersonalParams:
    """Linear classification head mapping embeddings to class logits."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W, b = _frozen(self.W), _frozen(self.b)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ConfigError(f"head W{W.shape} does not match b{b.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def digest(self) -> str:
        return params_digest(self.arrays())


def params_digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def init_shared(
    input_dim: int,
    hidden: tuple[int, ...] = (64, 64),
    embedding_dim: int = 64,
    seed: int = 0,
) -> SharedParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng([seed, 100])
    dims = [input_dim, *hidden, embedding_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return SharedParams(tuple(layers))


def init_personal(num_classes: int, embedding_dim: int) -> PersonalParams:
    return PersonalParams(np.zeros((num_classes, embedding_dim)), np.zeros(num_classes))


def embed(mu: SharedParams, x, tape: GradTape | None = None) -> np.ndarray:
    """Forward pass through the feature extractor (vector or batch)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1:] != (mu.input_dim,):
        raise InputError(f"expected input dim {mu.input_dim}, got {h.shape}")
    for W, b in mu.layers:
        h = relu(affine_forward(h, W, b, tape), tape)
    return h


def head(nu: PersonalParams, z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ nu.W.T + nu.b


def forward(mu: SharedParams, nu: PersonalParams, x, tape: GradTape | None = None):
    """Return ``(logits, embedding)`` from one pass through extractor and head."""
    z = embed(mu, x, tape)
    if nu.W.shape[1] != z.shape[-1]:
        raise InputError(f"head expects embedding dim {nu.W.shape[1]}, got {z.shape[-1]}")
    return head(nu, z), z
