"""Local client updates: head-only CE, then the shared extractor under the total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, UpdateError
from .model import PersonalParams, SharedParams, embed, forward, head
from .numerics import GradTape, softmax_ce
from .prototypes import (
    EmpiricalPrototypes,
    GlobalPrototypes,
    Margins,
    class_means,
    inter_class_discrimination_loss,
    intra_class_consistency_loss,
)


@dataclass(frozen=True)
class LocalSchedule:
    t_shared: int = 25
    s_personal: int = 5
    lr: float = 0.01
    batch_size: int = 128

    def __post_init__(self):
        if self.t_shared < 0 or self.s_personal < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.t_shared + self.s_personal


@dataclass(frozen=True)
class LossOptions:
    """How the prototype terms are evaluated during the shared update."""

    distance: str = "kl"
    own_margin: str = "epsilon"
    id_reduction: str = "sum"
    use_id: bool = True
    use_ic: bool = True
    learn_margin: bool = True
    # "epoch": recompute empirical prototypes once per local epoch; "batch": before every step
    proto_refresh: str = "epoch"


@dataclass
class LossParts:
    ce: float = 0.0
    id: float = 0.0
    ic: float = 0.0
    computed: frozenset = frozenset({"ce"})

    @property
    def total(self) -> float:
        return self.ce + self.id + self.ic


@dataclass
class TotalLoss:
    loss: float
    parts: LossParts
    grads: list[np.ndarray]
    grad_epsilon: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def ce_loss(mu: SharedParams, nu: PersonalParams, data: LabeledDataset) -> float:
    logits, _ = forward(mu, nu, data.X)
    return softmax_ce(logits, data.y)[0]


def update_personal(
    mu: SharedParams,
    nu: PersonalParams,
    data: LabeledDataset,
    schedule: LocalSchedule,
    rng: np.random.Generator,
) -> PersonalParams:
    """``s_personal`` epochs of minibatch SGD on cross-entropy, head only."""
    if len(data) == 0:
        raise UpdateError("client has no data")
    if schedule.s_personal == 0:
        return nu
    Z = embed(mu, data.X)
    W, b = nu.W.copy(), nu.b.copy()
    for _ in range(schedule.s_personal):
        for idx in _batches(len(data), schedule.batch_size, rng):
            z = Z[idx]
            _, g = softmax_ce(z @ W.T + b, data.y[idx])
            W -= schedule.lr * (g.T @ z)
            b -= schedule.lr * g.sum(axis=0)
    return PersonalParams(W, b)


def total_loss(
    mu: SharedParams,
    nu: PersonalParams,
    X: np.ndarray,
    y: np.ndarray,
    empirical: EmpiricalPrototypes | None,
    global_protos: GlobalPrototypes | None,
    lam: float,
    margins: Margins,
    opts: LossOptions = LossOptions(),
    n_samples: int | None = None,
) -> TotalLoss:
    """CE + lam * ID + (1 - lam) * IC on one batch, with gradients wrt the extractor.

    CE is the batch mean, ID is summed over the batch and IC is divided by
    ``n_samples`` (the client's dataset size; defaults to the batch size).
    Terms whose weight is zero (or that ``opts`` disables) are not evaluated.
    """
    tape = GradTape()
    logits, Z = forward(mu, nu, X, tape)
    ce, g_logits = softmax_ce(logits, y)
    g_Z = g_logits @ nu.W
    parts = LossParts(ce=ce)
    computed = {"ce"}
    g_eps = 0.0
    if lam > 0 and opts.use_id:
        r = inter_class_discrimination_loss(
            Z, y, empirical, margins, opts.distance, opts.own_margin, opts.id_reduction
        )
        parts.id = lam * r.loss
        g_Z = g_Z + lam * r.grad_z
        g_eps = lam * r.grad_epsilon
        computed.add("id")
    if lam < 1 and opts.use_ic:
        ic, g_ic = intra_class_consistency_loss(Z, y, global_protos, n_samples or Z.shape[0])
        parts.ic = (1.0 - lam) * ic
        g_Z = g_Z + (1.0 - lam) * g_ic
        computed.add("ic")
    _, layer_grads = tape.backward(g_Z)
    grads = [g for pair in layer_grads for g in pair]
    parts.computed = frozenset(computed)
    return TotalLoss(parts.total, parts, grads, g_eps)


def _fill_missing(global_protos: GlobalPrototypes, emp: EmpiricalPrototypes) -> GlobalPrototypes:
    out = global_protos.copy()
    for c, v in emp.protos.items():
        out.protos.setdefault(c, v.copy())
    return out


def update_shared(
    mu: SharedParams,
    nu: PersonalParams,
    data: LabeledDataset,
    schedule: LocalSchedule,
    global_protos: GlobalPrototypes,
    lam: float,
    margins: Margins,
    rng: np.random.Generator,
    opts: LossOptions = LossOptions(),
) -> tuple[SharedParams, Margins, LossParts]:
    """``t_shared`` epochs of minibatch SGD on the total loss, extractor and margin only.

    Returns the new extractor, the new margins and the mean loss parts of the
    last epoch.
    """
    if len(data) == 0:
        raise UpdateError("client has no data")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    params = [a.copy() for a in mu.arrays()]
    eps = margins.epsilon
    last = LossParts()
    glob = None
    for _ in range(schedule.t_shared):
        cur = SharedParams.from_arrays(params)
        emp = EmpiricalPrototypes(*class_means(embed(cur, data.X), data.y))
        if glob is None:
            # classes the server has never seen use this client's centroid
            glob = _fill_missing(global_protos, emp)
        acc = LossParts()
        n_batches = 0
        for idx in _batches(len(data), schedule.batch_size, rng):
            cur = SharedParams.from_arrays(params)
            if opts.proto_refresh == "batch":
                emp = EmpiricalPrototypes(*class_means(embed(cur, data.X), data.y))
            m = Margins(eps, margins.epsilon_prime)
            res = total_loss(
                cur, nu, data.X[idx], data.y[idx], emp, glob, lam, m, opts, len(data)
            )
            for p, g in zip(params, res.grads):
                p -= schedule.lr * g
            if opts.learn_margin:
                eps = float(np.clip(eps - schedule.lr * res.grad_epsilon, 0.0, 10.0))
            acc.ce += res.parts.ce
            acc.id += res.parts.id
            acc.ic += res.parts.ic
            n_batches += 1
        last = LossParts(
            acc.ce / n_batches, acc.id / n_batches, acc.ic / n_batches, res.parts.computed
        )
    return SharedParams.from_arrays(params), Margins(eps, margins.epsilon_prime), last


def update_joint(
    mu: SharedParams,
    nu: PersonalParams,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[SharedParams, PersonalParams, float]:
    """Plain CE training of extractor and head together (FedAvg local step)."""
    if len(data) == 0:
        raise UpdateError("client has no data")
    params = [a.copy() for a in mu.arrays()]
    W, b = nu.W.copy(), nu.b.copy()
    last = 0.0
    for _ in range(epochs):
        total, n_batches = 0.0, 0
        for idx in _batches(len(data), batch_size, rng):
            tape = GradTape()
            cur = SharedParams.from_arrays(params)
            z = embed(cur, data.X[idx], tape)
            loss, g = softmax_ce(head(PersonalParams(W, b), z), data.y[idx])
            g_Z = g @ W
            W -= lr * (g.T @ z)
            b -= lr * g.sum(axis=0)
            _, layer_grads = tape.backward(g_Z)
            for p, gp in zip(params, (x for pair in layer_grads for x in pair)):
                p -= lr * gp
            total += loss
            n_batches += 1
        last = total / n_batches
    return SharedParams.from_arrays(params), PersonalParams(W, b), last
