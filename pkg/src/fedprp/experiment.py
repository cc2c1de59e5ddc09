"""Experiment plans: config files, dataset/partition building, run directories."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    ClassGroups,
    LabeledDataset,
    PartitionSpec,
    SkewProfile,
    apply_longtail,
    blob_centers,
    class_groups,
    client_test_split,
    load_dataset,
    sample_blobs,
    split_holdout,
)
from .errors import ConfigError
from .federation import (
    RECORD_FIELDS,
    Client,
    FederationConfig,
    FederationState,
    RunRecord,
    init_new_client,
    init_state,
    load_checkpoint,
    run_round,
    save_checkpoint,
)
from .model import init_shared
from .prototypes import GlobalPrototypes
from .training import LocalSchedule, LossOptions

log = logging.getLogger(__name__)

# stream used for newcomer data, distinct from the training draw (1) and holdout (2)
_NEWCOMER_STREAM = 3


@dataclass(frozen=True)
class ExperimentPlan:
    dataset: str = "blobs"
    num_classes: int = 10
    dim: int = 32
    per_class: int = 500
    spread: float = 1.0
    center_scale: float | None = None
    test_per_class: int = 100
    client_test_size: int = 100
    gamma: float = 0.1
    partition: str = "sharding"
    shards: int = 4
    alpha: float = 0.5
    federation: FederationConfig = field(default_factory=FederationConfig)
    out: str | None = None
    window: int = 10
    new_clients: int = 10
    new_rounds: int = 1
    new_per_class: int = 100

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.partition not in ("sharding", "dirichlet"):
            raise ConfigError(f"partition must be 'sharding' or 'dirichlet', got {self.partition!r}")
        if self.dataset != "blobs" and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset file {self.dataset!r} does not exist")

    @property
    def seed(self) -> int:
        return self.federation.seed

    def partition_spec(self, num_clients: int | None = None) -> PartitionSpec:
        return PartitionSpec(
            self.partition,
            num_clients or self.federation.num_clients,
            self.seed,
            shards_per_client=self.shards,
            alpha=self.alpha,
        )


# ----------------------------------------------------------------------------
# flat "key = value" config files

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


# key -> (section, attribute, parser); section is plan / fed / schedule / loss
KEYS = {
    "dataset": ("plan", "dataset", str),
    "num_classes": ("plan", "num_classes", int),
    "dim": ("plan", "dim", int),
    "per_class": ("plan", "per_class", int),
    "spread": ("plan", "spread", float),
    "center_scale": ("plan", "center_scale", _opt_float),
    "test_per_class": ("plan", "test_per_class", int),
    "client_test_size": ("plan", "client_test_size", int),
    "gamma": ("plan", "gamma", float),
    "partition": ("plan", "partition", str),
    "shards": ("plan", "shards", int),
    "alpha": ("plan", "alpha", float),
    "out": ("plan", "out", str),
    "window": ("plan", "window", int),
    "new_clients": ("plan", "new_clients", int),
    "new_rounds": ("plan", "new_rounds", int),
    "new_per_class": ("plan", "new_per_class", int),
    "num_clients": ("fed", "num_clients", int),
    "clients_per_round": ("fed", "clients_per_round", int),
    "rounds": ("fed", "rounds", int),
    "lambda": ("fed", "lam", float),
    "beta": ("fed", "beta", float),
    "algorithm": ("fed", "algorithm", str),
    "seed": ("fed", "seed", int),
    "hidden": ("fed", "hidden", _int_tuple),
    "embedding_dim": ("fed", "embedding_dim", int),
    "inference": ("fed", "inference", str),
    "weighted_aggregation": ("fed", "weighted_aggregation", _bool),
    "epsilon": ("fed", "epsilon_init", float),
    "epsilon_prime": ("fed", "epsilon_prime", float),
    "workers": ("fed", "workers", int),
    "t_shared": ("schedule", "t_shared", int),
    "s_personal": ("schedule", "s_personal", int),
    "lr": ("schedule", "lr", float),
    "batch_size": ("schedule", "batch_size", int),
    "distance": ("loss", "distance", str),
    "own_margin": ("loss", "own_margin", str),
    "id_reduction": ("loss", "id_reduction", str),
    "use_id": ("loss", "use_id", _bool),
    "use_ic": ("loss", "use_ic", _bool),
    "learn_margin": ("loss", "learn_margin", _bool),
    "proto_refresh": ("loss", "proto_refresh", str),
}


def parse_config(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Split a config file into ``{key: (raw value, line number)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: {key!r} already set on line {out[key][1]}")
        out[key] = (value, lineno)
    return out


def build_plan(values: dict[str, tuple[str, int]], source: str = "<config>") -> ExperimentPlan:
    """Turn parsed (or override) values into a validated plan."""
    parts: dict[str, dict] = {"plan": {}, "fed": {}, "schedule": {}, "loss": {}}
    for key, (raw, lineno) in values.items():
        section, attr, conv = KEYS[key]
        where = f"{source}:{lineno}" if lineno else source
        try:
            parts[section][attr] = conv(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{where}: field {key!r}: {exc}") from None

    def check(section: str, build):
        try:
            return build()
        except ConfigError as exc:
            keys = [k for k, (s, a, _) in KEYS.items() if s == section and a in parts[section]]
            named = [k for k in keys if k in str(exc) or KEYS[k][1] in str(exc)]
            lines = sorted(values[k][1] for k in (named or keys) if values[k][1])
            hint = f" (line {', '.join(map(str, lines))})" if lines else ""
            raise ConfigError(f"{source}: {exc}{hint}") from None

    schedule = check("schedule", lambda: LocalSchedule(**parts["schedule"]))
    loss = check("loss", lambda: _loss_options(parts["loss"]))
    fed = check("fed", lambda: FederationConfig(schedule=schedule, loss=loss, **parts["fed"]))
    return check("plan", lambda: ExperimentPlan(federation=fed, **parts["plan"]))


def _loss_options(kw: dict) -> LossOptions:
    opts = LossOptions(**kw)
    if opts.distance not in ("kl", "euclid"):
        raise ConfigError(f"distance must be 'kl' or 'euclid', got {opts.distance!r}")
    if opts.own_margin not in ("epsilon", "epsilon_prime"):
        raise ConfigError(f"own_margin must be 'epsilon' or 'epsilon_prime', got {opts.own_margin!r}")
    if opts.id_reduction not in ("sum", "mean"):
        raise ConfigError(f"id_reduction must be 'sum' or 'mean', got {opts.id_reduction!r}")
    if opts.proto_refresh not in ("epoch", "batch"):
        raise ConfigError(f"proto_refresh must be 'epoch' or 'batch', got {opts.proto_refresh!r}")
    return opts


def load_plan(path, overrides: dict | None = None) -> ExperimentPlan:
    values = parse_config(Path(path).read_text(), str(path)) if path else {}
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = (str(val), 0)
    return build_plan(values, str(path) if path else "<defaults>")


def plan_to_config(plan: ExperimentPlan) -> dict[str, object]:
    """Every key with its effective value, in ``KEYS`` order."""
    roots = {
        "plan": plan,
        "fed": plan.federation,
        "schedule": plan.federation.schedule,
        "loss": plan.federation.loss,
    }
    out = {}
    for key, (section, attr, _) in KEYS.items():
        out[key] = getattr(roots[section], attr)
    return out


def format_config(plan: ExperimentPlan) -> str:
    lines = []
    for key, val in plan_to_config(plan).items():
        if isinstance(val, tuple):
            val = ",".join(map(str, val))
        elif val is None:
            val = "auto" if key == "center_scale" else ""
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# data


@dataclass
class Setup:
    clients: dict[int, Client]
    test: LabeledDataset
    groups: ClassGroups
    train: LabeledDataset

    def fingerprint(self) -> str:
        """Hash of every client's training data; equal fingerprints mean equal partitions."""
        h = hashlib.sha256()
        for cid in sorted(self.clients):
            ds = self.clients[cid].train
            h.update(str(cid).encode())
            h.update(np.ascontiguousarray(ds.X).tobytes())
            h.update(np.ascontiguousarray(ds.y).tobytes())
        h.update(np.ascontiguousarray(self.test.X).tobytes())
        return h.hexdigest()


def _centers(plan: ExperimentPlan) -> np.ndarray:
    return blob_centers(plan.num_classes, plan.dim, plan.spread, plan.seed, plan.center_scale)


def _base_dataset(plan: ExperimentPlan) -> LabeledDataset:
    if plan.dataset == "blobs":
        return sample_blobs(_centers(plan), plan.per_class + plan.test_per_class, plan.spread, plan.seed)
    return load_dataset(plan.dataset)


def _make_clients(
    plan: ExperimentPlan, parts: list[LabeledDataset], pool: LabeledDataset, first_id: int
) -> dict[int, Client]:
    clients = {}
    for i, part in enumerate(parts):
        cid = first_id + i
        test = client_test_split(part, pool, plan.client_test_size, plan.seed + cid)
        clients[cid] = Client(cid, part, test)
    return clients


def build_setup(plan: ExperimentPlan) -> Setup:
    """Dataset -> balanced holdout -> long-tail skew -> client partition."""
    full = _base_dataset(plan)
    train, test = split_holdout(full, plan.test_per_class, plan.seed)
    train = apply_longtail(train, SkewProfile(plan.gamma), plan.seed)
    parts = plan.partition_spec().apply(train)
    clients = _make_clients(plan, parts, test, 0)
    return Setup(clients, test, class_groups(train.class_counts), train)


def newcomer_clients(plan: ExperimentPlan, n_new: int, first_id: int, test: LabeledDataset):
    """Fresh skewed clients drawn around the same class centers as the training data."""
    if n_new == 0:
        return {}
    if plan.dataset == "blobs":
        ds = sample_blobs(_centers(plan), plan.new_per_class, plan.spread, plan.seed, _NEWCOMER_STREAM)
    else:
        rng = np.random.default_rng([plan.seed, _NEWCOMER_STREAM])
        full = _base_dataset(plan)
        ds = full.subset(np.sort(rng.permutation(len(full))[: plan.new_per_class * full.num_classes]))
    ds = apply_longtail(ds, SkewProfile(plan.gamma), plan.seed + 1) if _is_balanced(ds) else ds
    parts = replace(plan.partition_spec(n_new), seed=plan.seed + 1).apply(ds)
    return _make_clients(plan, parts, test, first_id)


def _is_balanced(ds: LabeledDataset) -> bool:
    counts = ds.class_counts
    return bool(counts.size) and bool(np.all(counts == counts[0]))


# ----------------------------------------------------------------------------
# run directories


def window_summary(records: list[RunRecord], window: int) -> dict[str, float | None]:
    """Mean of every metric over the last ``window`` rounds (NaN/None entries skipped)."""
    tail = records[-window:]
    out: dict[str, float | None] = {"rounds": len(records), "window": len(tail)}
    for name in RECORD_FIELDS[1:]:
        vals = [getattr(r, name) for r in tail]
        vals = [v for v in vals if v is not None and not math.isnan(v)]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def read_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


def format_summary(summary: dict, title: str = "") -> str:
    rows = [title] if title else []
    rows.append(f"window: last {summary['window']} of {summary['rounds']} rounds")
    for name in RECORD_FIELDS[1:]:
        v = summary.get(name)
        rows.append(f"  {name:<8} {'-' if v is None else f'{v:.4f}'}")
    return "\n".join(rows) + "\n"


@dataclass
class RunResult:
    state: FederationState
    records: list[RunRecord]
    summary: dict
    setup: Setup


def run_plan(plan: ExperimentPlan, out: str | Path | None = None, resume: bool = False) -> RunResult:
    """Run a plan to completion, writing artifacts to ``out`` when given.

    With ``resume``, an existing ``checkpoint.bin`` in ``out`` is picked up and
    the remaining rounds are appended to ``metrics.jsonl``.
    """
    out = Path(out) if out is not None else (Path(plan.out) if plan.out else None)
    setup = build_setup(plan)
    cfg = plan.federation
    state = init_state(cfg, setup.train.dim, setup.train.num_classes)
    records: list[RunRecord] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.bin"
        metrics = out / "metrics.jsonl"
        if resume and ckpt.exists():
            state, meta = load_checkpoint(ckpt)
            if meta.get("fingerprint") != setup.fingerprint():
                raise ConfigError(f"{ckpt}: checkpoint was written for a different partition")
            records = read_records(metrics)[: state.round]
        (out / "config.txt").write_text(format_config(plan))
        metrics.write_text("".join(r.to_json() + "\n" for r in records))
    meta = {"fingerprint": setup.fingerprint(), "algorithm": cfg.algorithm, "seed": cfg.seed}

    while state.round < cfg.rounds:
        state, rec = run_round(state, setup.clients, cfg, setup.test, setup.groups)
        records.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
            save_checkpoint(out / "checkpoint.bin", state, meta)

    summary = window_summary(records, plan.window)
    summary.update(meta)
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", state, meta)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(format_summary(summary, f"{cfg.algorithm} seed={cfg.seed}"))
    return RunResult(state, records, summary, setup)


def run_newcomers(
    plan: ExperimentPlan,
    state: FederationState,
    n_new: int,
    rounds: int | None = None,
    random_mu: bool = False,
) -> list[RunRecord]:
    """Add ``n_new`` clients to a trained federation and run rounds on them alone.

    ``random_mu`` swaps the trained extractor for a fresh random one (the
    control arm); everything else, including data and seeds, is unchanged.
    """
    if n_new == 0:
        return []
    setup = build_setup(plan)
    cfg = plan.federation
    first = max(state.clients) + 1 if state.clients else 0
    new = newcomer_clients(plan, n_new, first, setup.test)
    work = FederationState(state.global_mu, state.global_protos.copy(), state.round,
                           dict(state.clients), state.global_nu)
    if random_mu:
        work.global_mu = init_shared(
            setup.train.dim, cfg.hidden, cfg.embedding_dim, cfg.seed + 1_000_003
        )
        work.global_protos = GlobalPrototypes()
    for client in new.values():
        init_new_client(work, client, cfg, require_trained=not random_mu)
    records = []
    for _ in range(plan.new_rounds if rounds is None else rounds):
        work, rec = run_round(work, new, cfg, setup.test, setup.groups, per_round=len(new))
        records.append(rec)
    return records

