"""Class prototypes, their server-side moving average, and the prototype losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, InputError, MissingPrototypeError
from .model import SharedParams, embed
from .numerics import log_softmax, logsumexp

MARGIN_MIN = 0.0
MARGIN_MAX = 10.0


@dataclass
class EmpiricalPrototypes:
    """Per-client class centroids in embedding space."""

    protos: dict[int, np.ndarray]
    counts: dict[int, int] = field(default_factory=dict)
    client_id: int | None = None

    def classes(self) -> list[int]:
        return sorted(self.protos)


@dataclass
class GlobalPrototypes:
    """Server-side rectified centroids; a class present in ``protos`` is initialized."""

    protos: dict[int, np.ndarray] = field(default_factory=dict)

    def is_initialized(self, cls: int) -> bool:
        return cls in self.protos

    def classes(self) -> list[int]:
        return sorted(self.protos)

    def copy(self) -> GlobalPrototypes:
        return GlobalPrototypes({c: v.copy() for c, v in self.protos.items()})


@dataclass
class Margins:
    epsilon: float = 0.5
    epsilon_prime: float = 0.0

    def clamped(self) -> Margins:
        return Margins(
            float(np.clip(self.epsilon, MARGIN_MIN, MARGIN_MAX)),
            float(np.clip(self.epsilon_prime, MARGIN_MIN, MARGIN_MAX)),
        )


def class_means(Z: np.ndarray, y: np.ndarray) -> tuple[dict[int, np.ndarray], dict[int, int]]:
    protos, counts = {}, {}
    for c in np.unique(y):
        rows = Z[y == c]
        protos[int(c)] = rows.mean(axis=0)
        counts[int(c)] = int(rows.shape[0])
    return protos, counts


def empirical_prototypes(
    mu: SharedParams, data: LabeledDataset, client_id: int | None = None
) -> EmpiricalPrototypes:
    if len(data) == 0:
        raise InputError("cannot compute prototypes of an empty dataset")
    protos, counts = class_means(embed(mu, data.X), data.y)
    return EmpiricalPrototypes(protos, counts, client_id)


def ema_update(
    global_protos: GlobalPrototypes,
    client_protos: list[EmpiricalPrototypes],
    beta: float,
) -> GlobalPrototypes:
    """Blend each class's global centroid with this round's mean of client centroids.

    Classes seen for the first time take the round mean directly. Classes no
    client reported this round are left as they were.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    # fixed accumulation order keeps the result independent of report order
    ordered = sorted(
        client_protos, key=lambda p: (p.client_id is None, p.client_id if p.client_id is not None else 0)
    )
    sums: dict[int, np.ndarray] = {}
    owners: dict[int, int] = {}
    for cp in ordered:
        for c in sorted(cp.protos):
            v = cp.protos[c]
            sums[c] = sums[c] + v if c in sums else np.array(v, dtype=np.float64)
            owners[c] = owners.get(c, 0) + 1
    out = global_protos.copy()
    for c in sorted(sums):
        mean = sums[c] / owners[c]
        if c in out.protos:
            out.protos[c] = beta * out.protos[c] + (1.0 - beta) * mean
        else:
            out.protos[c] = mean
    return out


# ----------------------------------------------------------------------------
# distances between anchor prototypes (rows of A) and embeddings (rows of Z)


def softmax_kl_matrix(A: np.ndarray, Z: np.ndarray):
    """``D[i, j] = KL(softmax(A[i]) || softmax(Z[j]))`` plus what the gradient needs."""
    logP = log_softmax(A)
    P = np.exp(logP)
    logQ = log_softmax(Z)
    D = (P * logP).sum(axis=1)[:, None] - P @ logQ.T
    return D, (P, np.exp(logQ))


def sq_euclid_matrix(A: np.ndarray, Z: np.ndarray):
    diff = A[:, None, :] - Z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff), None


DISTANCES = {"kl": softmax_kl_matrix, "euclid": sq_euclid_matrix}


def _distance_grad(kind: str, G: np.ndarray, A: np.ndarray, Z: np.ndarray, aux) -> np.ndarray:
    """Gradient wrt Z of ``sum_ij G[i, j] * D[i, j]``."""
    col = G.sum(axis=0)[:, None]
    if kind == "kl":
        P, Q = aux
        return Q * col - G.T @ P
    return 2.0 * (Z * col - G.T @ A)


@dataclass
class IDResult:
    loss: float
    grad_z: np.ndarray
    grad_epsilon: float
    grad_epsilon_prime: float


def inter_class_discrimination_loss(
    Z: np.ndarray,
    y: np.ndarray,
    protos: EmpiricalPrototypes,
    margins: Margins,
    distance: str = "kl",
    own_margin: str = "epsilon",
    reduction: str = "sum",
) -> IDResult:
    """Margin contrastive loss of each embedding against its class prototype.

    For sample ``i`` with prototype ``c``, the positive logit is
    ``-d(c, z_i) - epsilon`` and every other batch embedding ``z_j`` contributes
    ``-d(c, z_j) - epsilon'`` to the normalizer. Prototypes are constants.
    """
    if distance not in DISTANCES:
        raise ConfigError(f"unknown distance {distance!r}")
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    B = Z.shape[0]
    try:
        A = np.stack([protos.protos[int(c)] for c in y])
    except KeyError as exc:
        raise MissingPrototypeError(f"no empirical prototype for class {exc.args[0]}") from None
    D, aux = DISTANCES[distance](A, Z)
    eps, eps_p = margins.epsilon, margins.epsilon_prime
    own = eps if own_margin == "epsilon" else eps_p
    M = np.full((B, B), eps_p)
    np.fill_diagonal(M, own)
    logits = -D - M
    lse = logsumexp(logits, axis=1)
    per_sample = -np.diag(logits) + lse
    S = np.exp(logits - lse[:, None])
    scale = 1.0 / B if reduction == "mean" else 1.0
    # dloss/dD = I - S
    G = (np.eye(B) - S) * scale
    grad_z = _distance_grad(distance, G, A, Z, aux)
    diag_s = np.diag(S)
    off = S.sum(axis=1) - diag_s
    if own_margin == "epsilon":
        g_eps = float((1.0 - diag_s).sum()) * scale
        g_eps_p = float(-off.sum()) * scale
    else:
        g_eps = 0.0
        g_eps_p = float((1.0 - S.sum(axis=1)).sum()) * scale
    return IDResult(float(per_sample.sum() * scale), grad_z, g_eps, g_eps_p)


def intra_class_consistency_loss(
    Z: np.ndarray, y: np.ndarray, global_protos: GlobalPrototypes, n_samples: int
) -> tuple[float, np.ndarray]:
    """Squared distance to the global class centroid, summed and divided by ``n_samples``."""
    Z = np.asarray(Z, dtype=np.float64)
    try:
        C = np.stack([global_protos.protos[int(c)] for c in y])
    except KeyError as exc:
        raise MissingPrototypeError(f"no global prototype for class {exc.args[0]}") from None
    diff = Z - C
    return float(np.sum(diff * diff) / n_samples), 2.0 * diff / n_samples
