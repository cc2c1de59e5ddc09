"""Server-side orchestration: selection, local updates, aggregation, evaluation."""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ClassGroups, LabeledDataset
from .errors import ConfigError, InputError, LoadError, ProtocolError, RoundError, UpdateError
from .metrics import group_report, model_accuracy, nearest_prototype, predict_head
from .model import PersonalParams, SharedParams, embed, init_personal, init_shared
from .prototypes import EmpiricalPrototypes, GlobalPrototypes, Margins, ema_update, empirical_prototypes
from .training import LocalSchedule, LossOptions, LossParts, update_joint, update_personal, update_shared

log = logging.getLogger(__name__)

ALGORITHMS = ("fedprp", "fedavg", "proto")

# stream tags for np.random.default_rng([seed, round, ..., tag])
_SELECT = 7
_LOCAL = 8


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    clients_per_round: int = 8
    rounds: int = 30
    schedule: LocalSchedule = field(default_factory=LocalSchedule)
    lam: float = 0.5
    beta: float = 0.5
    algorithm: str = "fedprp"
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 64
    inference: str = "prototype"
    weighted_aggregation: bool = False
    loss: LossOptions = field(default_factory=LossOptions)
    epsilon_init: float = 0.5
    epsilon_prime: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1 or not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("need 1 <= clients_per_round <= num_clients")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.inference not in ("prototype", "head"):
            raise ConfigError(f"inference must be 'prototype' or 'head', got {self.inference!r}")

    @property
    def personal_inference(self) -> str:
        return "head" if self.algorithm == "fedavg" else self.inference

    @property
    def global_inference(self) -> str:
        return "head" if self.algorithm == "fedavg" else "prototype"

    def loss_options(self) -> LossOptions:
        if self.algorithm == "proto":
            return replace(self.loss, use_id=False, use_ic=False)
        return self.loss


@dataclass
class Client:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class ClientSlot:
    """What persists on a client between the rounds it takes part in."""

    nu: PersonalParams
    margins: Margins
    protos: EmpiricalPrototypes | None = None


@dataclass
class FederationState:
    global_mu: SharedParams
    global_protos: GlobalPrototypes
    round: int
    clients: dict[int, ClientSlot]
    global_nu: PersonalParams | None = None


@dataclass
class ClientReport:
    """Upload from one client. Never carries samples or the personalized head.

    ``public_head`` is set only by the FedAvg baseline, whose whole model is shared.
    """

    client_id: int
    mu: SharedParams
    prototypes: EmpiricalPrototypes
    losses: LossParts
    n_samples: int
    public_head: PersonalParams | None = None


RECORD_FIELDS = (
    "round", "acc_glo", "acc_loc", "acc_sel", "many", "medium", "few",
    "loss_ce", "loss_id", "loss_ic",
)


@dataclass
class RunRecord:
    round: int
    acc_glo: float
    acc_loc: float
    acc_sel: float
    many: float
    medium: float
    few: float
    loss_ce: float | None
    loss_id: float | None
    loss_ic: float | None

    def to_json(self) -> str:
        d = asdict(self)
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        return json.dumps({k: d[k] for k in RECORD_FIELDS})

    @classmethod
    def from_json(cls, line: str) -> RunRecord:
        d = json.loads(line)
        return cls(**{k: (math.nan if d[k] is None and k in ("many", "medium", "few") else d[k])
                      for k in RECORD_FIELDS})


def init_state(config: FederationConfig, input_dim: int, num_classes: int) -> FederationState:
    mu = init_shared(input_dim, config.hidden, config.embedding_dim, config.seed)
    slots = {
        k: ClientSlot(init_personal(num_classes, config.embedding_dim),
                      Margins(config.epsilon_init, config.epsilon_prime))
        for k in range(config.num_clients)
    }
    nu = init_personal(num_classes, config.embedding_dim) if config.algorithm == "fedavg" else None
    return FederationState(mu, GlobalPrototypes(), 0, slots, nu)


def select_clients(client_ids, k: int, seed: int, round_index: int) -> list[int]:
    """Uniform sample of ``k`` ids without replacement, fixed by (seed, round)."""
    ids = sorted(client_ids)
    if not 1 <= k <= len(ids):
        raise ConfigError(f"cannot select {k} of {len(ids)} clients")
    rng = np.random.default_rng([seed, round_index, _SELECT])
    return sorted(ids[i] for i in rng.choice(len(ids), size=k, replace=False))


def local_update(
    client: Client,
    slot: ClientSlot,
    global_mu: SharedParams,
    global_protos: GlobalPrototypes,
    config: FederationConfig,
    round_index: int,
    global_nu: PersonalParams | None = None,
) -> tuple[ClientReport, ClientSlot]:
    """Run one client's local update starting from the broadcast global model."""
    data = client.train
    if len(data) == 0:
        raise UpdateError(f"client {client.client_id} has no data")
    rng = np.random.default_rng([config.seed, round_index, client.client_id, _LOCAL])
    sched = config.schedule
    if config.algorithm == "fedavg":
        nu0 = global_nu if global_nu is not None else slot.nu
        mu, nu, ce = update_joint(
            global_mu, nu0, data, sched.total_epochs, sched.lr, sched.batch_size, rng
        )
        protos = empirical_prototypes(mu, data, client.client_id)
        report = ClientReport(client.client_id, mu, protos, LossParts(ce=ce), len(data), nu)
        return report, ClientSlot(nu, slot.margins, protos)
    nu = update_personal(global_mu, slot.nu, data, sched, rng)
    mu, margins, losses = update_shared(
        global_mu, nu, data, sched, global_protos, config.lam, slot.margins, rng,
        config.loss_options(),
    )
    protos = empirical_prototypes(mu, data, client.client_id)
    return ClientReport(client.client_id, mu, protos, losses, len(data)), ClientSlot(nu, margins, protos)


def _running_mean(arrays_by_client: list[list[np.ndarray]], weights: list[float]) -> list[np.ndarray]:
    # incremental mean: identical inputs come back bit-exact
    mean = [a.copy() for a in arrays_by_client[0]]
    seen = weights[0]
    for arrs, w in zip(arrays_by_client[1:], weights[1:]):
        seen += w
        for m, a in zip(mean, arrs):
            m += (w / seen) * (a - m)
    return mean


def aggregate_shared(reports: list[ClientReport], weighted: bool = False) -> SharedParams:
    """Coordinate-wise mean of the uploaded extractors, in client-id order."""
    if not reports:
        raise ProtocolError("nothing to aggregate")
    reports = sorted(reports, key=lambda r: r.client_id)
    shapes = reports[0].mu.shapes
    for r in reports[1:]:
        if r.mu.shapes != shapes:
            raise ProtocolError(f"client {r.client_id} sent shapes {r.mu.shapes}, expected {shapes}")
    weights = [float(r.n_samples) if weighted else 1.0 for r in reports]
    return SharedParams.from_arrays(_running_mean([r.mu.arrays() for r in reports], weights))


def aggregate_heads(reports: list[ClientReport], weighted: bool = False) -> PersonalParams:
    reports = sorted(reports, key=lambda r: r.client_id)
    weights = [float(r.n_samples) if weighted else 1.0 for r in reports]
    W, b = _running_mean([r.public_head.arrays() for r in reports], weights)
    return PersonalParams(W, b)


def _mean_loss(reports: list[ClientReport], name: str) -> float | None:
    vals = [getattr(r.losses, name) for r in reports if name in r.losses.computed]
    return float(np.mean(vals)) if vals else None


def global_predictions(state: FederationState, X: np.ndarray, config: FederationConfig) -> np.ndarray:
    if config.global_inference == "head":
        return predict_head(state.global_mu, state.global_nu, X)
    return nearest_prototype(embed(state.global_mu, X), state.global_protos)


def run_round(
    state: FederationState,
    clients: dict[int, Client],
    config: FederationConfig,
    balanced_test: LabeledDataset,
    groups: ClassGroups,
    per_round: int | None = None,
) -> tuple[FederationState, RunRecord]:
    """One round: select, broadcast, local updates, prototype EMA, averaging, evaluation."""
    round_index = state.round + 1
    k = config.clients_per_round if per_round is None else per_round
    selected = select_clients(clients, k, config.seed, round_index)
    active = [cid for cid in selected if len(clients[cid].train) > 0]
    for cid in sorted(set(selected) - set(active)):
        log.warning("round %d: client %d has no data, skipped", round_index, cid)
    if not active:
        raise RoundError(f"round {round_index}: every selected client is empty")

    def work(cid: int):
        return local_update(
            clients[cid], state.clients[cid], state.global_mu, state.global_protos,
            config, round_index, state.global_nu,
        )

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, active))
    else:
        results = [work(cid) for cid in active]
    reports = [r for r, _ in results]
    slots = dict(state.clients)
    for cid, (_, slot) in zip(active, results):
        slots[cid] = slot

    if config.algorithm == "fedavg":
        new_protos = state.global_protos
        new_nu = aggregate_heads(reports, config.weighted_aggregation)
    else:
        new_protos = ema_update(state.global_protos, [r.prototypes for r in reports], config.beta)
        new_nu = state.global_nu
    new_mu = aggregate_shared(reports, config.weighted_aggregation)
    new_state = FederationState(new_mu, new_protos, round_index, slots, new_nu)

    pred = global_predictions(new_state, balanced_test.X, config)
    groups_acc = group_report(pred, balanced_test.y, groups)
    inference = config.personal_inference
    loc, sel = [], []
    for r in sorted(reports, key=lambda r: r.client_id):
        model = (r.mu, slots[r.client_id].nu, r.prototypes)
        loc.append(model_accuracy(model, balanced_test, inference, quiet=True))
        test = clients[r.client_id].test
        if len(test):
            sel.append(model_accuracy(model, test, inference, quiet=True))
    record = RunRecord(
        round=round_index,
        acc_glo=groups_acc["all"],
        acc_loc=float(np.mean(loc)),
        acc_sel=float(np.mean(sel)) if sel else math.nan,
        many=groups_acc["many"],
        medium=groups_acc["medium"],
        few=groups_acc["few"],
        loss_ce=_mean_loss(reports, "ce"),
        loss_id=_mean_loss(reports, "id"),
        loss_ic=_mean_loss(reports, "ic"),
    )
    return new_state, record


def run_rounds(
    state: FederationState,
    clients: dict[int, Client],
    config: FederationConfig,
    balanced_test: LabeledDataset,
    groups: ClassGroups,
    n_rounds: int,
    on_record=None,
) -> tuple[FederationState, list[RunRecord]]:
    records = []
    for _ in range(n_rounds):
        state, rec = run_round(state, clients, config, balanced_test, groups)
        records.append(rec)
        if on_record is not None:
            on_record(state, rec)
    return state, records


def run_baseline(
    config: FederationConfig,
    clients: dict[int, Client],
    balanced_test: LabeledDataset,
    groups: ClassGroups,
) -> list[RunRecord]:
    """Run the FedAvg or prototype-only baseline on the same clients as a FedPRP run."""
    if config.algorithm not in ("fedavg", "proto"):
        raise ConfigError(f"{config.algorithm!r} is not a baseline")
    any_client = next(iter(clients.values()))
    state = init_state(config, any_client.train.dim, any_client.train.num_classes)
    _, records = run_rounds(state, clients, config, balanced_test, groups, config.rounds)
    return records


def init_new_client(
    state: FederationState,
    client: Client,
    config: FederationConfig,
    require_trained: bool = True,
) -> ClientSlot:
    """Register a newcomer: global extractor, zero head, prototypes from its own data."""
    if require_trained and state.round < 1:
        raise InputError("state has not completed any round")
    if len(client.train) == 0:
        raise InputError("new client has no data")
    if client.client_id in state.clients:
        raise InputError(f"client id {client.client_id} already registered")
    slot = ClientSlot(
        init_personal(client.train.num_classes, state.global_mu.embedding_dim),
        Margins(config.epsilon_init, config.epsilon_prime),
        empirical_prototypes(state.global_mu, client.train, client.client_id),
    )
    state.clients[client.client_id] = slot
    return slot


# ----------------------------------------------------------------------------
# checkpoints
#
# b"FPRPCKPT", u32 format version, u64 header length, UTF-8 JSON header, then a
# little-endian float64 blob. The header lists every array as
# {"name", "shape", "offset"} (offset in float64 elements) plus scalar state.

CKPT_MAGIC = b"FPRPCKPT"
CKPT_VERSION = 1


def _pack(arrays: dict[str, np.ndarray]):
    index, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.reshape(-1))
        offset += a.size
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    return index, blob


def save_checkpoint(path, state: FederationState, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, a in enumerate(state.global_mu.arrays()):
        arrays[f"mu/{i}"] = a
    if state.global_nu is not None:
        arrays["gnu/W"], arrays["gnu/b"] = state.global_nu.arrays()
    for c in state.global_protos.classes():
        arrays[f"gproto/{c}"] = state.global_protos.protos[c]
    clients = {}
    for cid in sorted(state.clients):
        slot = state.clients[cid]
        arrays[f"client/{cid}/W"], arrays[f"client/{cid}/b"] = slot.nu.arrays()
        entry = {"epsilon": slot.margins.epsilon, "epsilon_prime": slot.margins.epsilon_prime}
        if slot.protos is not None:
            entry["proto_counts"] = {str(c): slot.protos.counts.get(c, 0) for c in slot.protos.classes()}
            for c in slot.protos.classes():
                arrays[f"client/{cid}/proto/{c}"] = slot.protos.protos[c]
        clients[str(cid)] = entry
    index, blob = _pack(arrays)
    header = {
        "version": CKPT_VERSION,
        "round": state.round,
        "n_mu_arrays": len(state.global_mu.arrays()),
        "clients": clients,
        "meta": meta or {},
        "arrays": index,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(blob)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise LoadError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CKPT_VERSION:
        raise LoadError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + hlen].decode())
    return header, raw[pos + hlen :]


def load_checkpoint(path) -> tuple[FederationState, dict]:
    header, blob = read_checkpoint_header(path)
    flat = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > flat.size:
            raise LoadError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
    mu = SharedParams.from_arrays([arrays[f"mu/{i}"] for i in range(header["n_mu_arrays"])])
    nu = PersonalParams(arrays["gnu/W"], arrays["gnu/b"]) if "gnu/W" in arrays else None
    gprotos = GlobalPrototypes({
        int(name.split("/")[1]): a for name, a in arrays.items() if name.startswith("gproto/")
    })
    slots = {}
    for key, entry in header["clients"].items():
        cid = int(key)
        protos = None
        if "proto_counts" in entry:
            counts = {int(c): n for c, n in entry["proto_counts"].items()}
            protos = EmpiricalPrototypes(
                {c: arrays[f"client/{cid}/proto/{c}"] for c in counts}, counts, cid
            )
        slots[cid] = ClientSlot(
            PersonalParams(arrays[f"client/{cid}/W"], arrays[f"client/{cid}/b"]),
            Margins(entry["epsilon"], entry["epsilon_prime"]),
            protos,
        )
    return FederationState(mu, gprotos, header["round"], slots, nu), header["meta"]
