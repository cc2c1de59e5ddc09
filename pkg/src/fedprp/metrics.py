"""Accuracy metrics and nearest-prototype inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import ClassGroups, LabeledDataset
from .errors import InputError
from .model import PersonalParams, SharedParams, embed, head

log = logging.getLogger(__name__)


@dataclass
class MetricSet:
    acc_glo: float
    acc_loc: float
    acc_sel: float
    group_acc: dict[str, float]


def _proto_table(protos) -> tuple[np.ndarray, np.ndarray]:
    table: Mapping[int, np.ndarray] = getattr(protos, "protos", protos)
    classes = np.array(sorted(table), dtype=np.int64)
    if classes.size == 0:
        return classes, np.zeros((0, 0))
    return classes, np.stack([table[int(c)] for c in classes])


def nearest_prototype(Z: np.ndarray, protos) -> np.ndarray:
    """Label of the L2-nearest prototype per embedding row; ties go to the smaller id.

    Rows get -1 when there are no prototypes at all.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    classes, C = _proto_table(protos)
    if classes.size == 0:
        return np.full(Z.shape[0], -1, dtype=np.int64)
    d2 = ((Z[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    # classes are ascending, so argmin's first-hit rule is the tie-break
    return classes[np.argmin(d2, axis=1)]


def predict_prototype(mu: SharedParams, protos, x):
    """Class of the nearest prototype to ``embed(mu, x)``; int for a single vector."""
    x = np.asarray(x, dtype=np.float64)
    pred = nearest_prototype(embed(mu, x), protos)
    return int(pred[0]) if x.ndim == 1 else pred


def predict_head(mu: SharedParams, nu: PersonalParams, X) -> np.ndarray:
    return np.argmax(head(nu, embed(mu, X)), axis=-1)


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("empty test set")
    return float(np.mean(np.asarray(pred) == labels))


def prototype_accuracy(mu: SharedParams, protos, test: LabeledDataset, quiet: bool = False) -> float:
    """Nearest-prototype accuracy; classes without a prototype are never predicted.

    Missing classes are logged as a warning, or at debug level with ``quiet``
    (client models cover only their own classes, so this is expected there).
    """
    if len(test) == 0:
        raise InputError("empty test set")
    classes, _ = _proto_table(protos)
    missing = sorted(set(test.present_classes) - set(classes.tolist()))
    if missing:
        log.log(logging.DEBUG if quiet else logging.WARNING,
                "no prototype for classes %s; their samples count as errors", missing)
    return accuracy(nearest_prototype(embed(mu, test.X), protos), test.y)


def head_accuracy(mu: SharedParams, nu: PersonalParams, test: LabeledDataset) -> float:
    return accuracy(predict_head(mu, nu, test.X), test.y)


def model_accuracy(
    model, test: LabeledDataset, inference: str = "prototype", quiet: bool = False
) -> float:
    """Accuracy of a ``(mu, nu, protos)`` triple under prototype or head inference."""
    mu, nu, protos = model
    if inference == "head":
        return head_accuracy(mu, nu, test)
    return prototype_accuracy(mu, protos, test, quiet)


def acc_glo(state, balanced_test: LabeledDataset, inference: str = "prototype") -> float:
    """Global-model accuracy: global extractor with global prototypes (or global head)."""
    return model_accuracy(
        (state.global_mu, state.global_nu, state.global_protos), balanced_test, inference
    )


def acc_loc(models, balanced_test: LabeledDataset, inference: str = "prototype") -> float:
    """Mean balanced-test accuracy over the given personalized models."""
    models = list(models)
    if not models:
        raise InputError("no client models")
    return float(np.mean([model_accuracy(m, balanced_test, inference, True) for m in models]))


def acc_sel(model, client_test: LabeledDataset, inference: str = "prototype") -> float:
    """Accuracy of one personalized model on that client's own-distribution test set."""
    return model_accuracy(model, client_test, inference)


def group_report(predictions, labels, groups: ClassGroups) -> dict[str, float]:
    """Per-group accuracy plus ``all`` (sample weighted) and ``average`` (of the groups).

    A group with no test samples reports NaN and is left out of the average.
    """
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    members = [set(g) for g in (groups.many, groups.medium, groups.few)]
    union = set().union(*members)
    if sum(len(m) for m in members) != len(union):
        raise InputError("class groups overlap")
    if not set(labels.tolist()) <= union:
        raise InputError("class groups do not cover every label")
    out = {}
    for name, m in zip(("many", "medium", "few"), members):
        mask = np.isin(labels, list(m)) if m else np.zeros(labels.shape, bool)
        out[name] = float(np.mean(pred[mask] == labels[mask])) if mask.any() else math.nan
    out["all"] = accuracy(pred, labels)
    vals = [out[k] for k in ("many", "medium", "few") if not math.isnan(out[k])]
    out["average"] = float(np.mean(vals)) if vals else math.nan
    return out
