"""Round-by-round federated simulation with attacks, defenses and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .adversary import (
    BackdoorPattern,
    backdoor_test_set,
    boost_update,
    flip_labels,
    inject_backdoor,
    random_weights_update,
)
from .config import ExperimentConfig
from .data import (
    ClientProfile,
    Dataset,
    FederatedDataset,
    partition,
    read_cifar_files,
    read_idx_files,
    synth_blobs,
    validation_split,
)
from .errors import DivergenceError
from .explain import LLEConfig
from .model import ModelLayout, local_train, predict

log = logging.getLogger(__name__)

BYZANTINE = ("label_flip", "random_weights")


def derive_seed(seed: int, *keys) -> int:
    """Independent 63-bit seed for a (master seed, purpose, ...) tuple."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode())
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------- metrics

def evaluate(layout: ModelLayout, params: np.ndarray, data: Dataset) -> float:
    """Share of argmax-correct predictions (ties go to the lowest class)."""
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(layout, params, data.features) == data.labels))


def evaluate_backdoor(layout: ModelLayout, params: np.ndarray, data: Dataset, pattern: BackdoorPattern) -> float:
    return evaluate(layout, params, backdoor_test_set(data, pattern))


# ---------------------------------------------------------------- reports

@dataclass
class RoundReport:
    round: int
    participants: list[int]
    weights: dict[int, float] | None
    scores: dict[int, float] | None
    x_values: dict[int, float] | None
    discarded: dict[str, list[int]]
    accuracy: float
    backdoor_accuracy: float | None
    fallback: bool
    quantifier: agg.QuantifierParams | None = None
    printed_y_b: float | None = None
    poor_local_accuracy: dict[int, float] = field(default_factory=dict)
    diverged: list[int] = field(default_factory=list)
    models: dict[int, np.ndarray] | None = None

    def discard_count(self, role: str) -> int:
        return len(self.discarded.get(role, []))


@dataclass
class FairnessSummary:
    adversarial: tuple[float, float, float]  # min, max, mean
    poor: tuple[float, float, float]
    poor_accuracy: dict[int, float]

    @property
    def poor_accuracy_mean(self) -> float:
        vals = list(self.poor_accuracy.values())
        return float(np.mean(vals)) if vals else float("nan")


def fairness_summary(reports: list[RoundReport], profiles: list[ClientProfile]) -> FairnessSummary:
    """Discard statistics per role and the final accuracy of every poor client.

    A poor client discarded in its last participating round keeps its local
    model; otherwise it holds the global model of that round.  Poor clients
    that never took part hold the final global model.
    """
    def stats(role):
        counts = [r.discard_count(role) for r in reports]
        if not counts:
            return (0.0, 0.0, 0.0)
        return (float(min(counts)), float(max(counts)), float(np.mean(counts)))

    poor_acc = {}
    for p in profiles:
        if p.role != "poor":
            continue
        acc = reports[-1].accuracy if reports else float("nan")
        for r in reversed(reports):
            if p.id in r.participants:
                if p.id in r.discarded.get("poor", []) and p.id in r.poor_local_accuracy:
                    acc = r.poor_local_accuracy[p.id]
                else:
                    acc = r.accuracy
                break
        poor_acc[p.id] = acc
    return FairnessSummary(stats("adversarial"), stats("poor"), poor_acc)


# ---------------------------------------------------------------- setup

@dataclass
class SimState:
    config: ExperimentConfig
    layout: ModelLayout
    federation: FederatedDataset
    train_data: list[Dataset]  # what each client actually trains on (poisoned for attackers)
    pattern: BackdoorPattern | None
    initial: np.ndarray

    @property
    def profiles(self) -> list[ClientProfile]:
        return [p for _, p in self.federation.clients]


def load_source(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Return (train, test) splits for the configured data source."""
    if cfg.dataset == "synth":
        per = cfg.synth_train_per_class + cfg.synth_test_per_class
        full = synth_blobs(cfg.synth_classes, cfg.synth_dims, per, cfg.synth_spread, derive_seed(cfg.seed, "synth"))
        rng = np.random.default_rng(derive_seed(cfg.seed, "synth-split"))
        train_idx, test_idx = [], []
        for c in range(cfg.synth_classes):
            ix = rng.permutation(np.flatnonzero(full.labels == c))
            train_idx.append(ix[:cfg.synth_train_per_class])
            test_idx.append(ix[cfg.synth_train_per_class:])
        train = full.subset(np.sort(np.concatenate(train_idx)))
        test = full.subset(np.sort(np.concatenate(test_idx)))
    elif cfg.dataset == "idx":
        train = read_idx_files(cfg.train_images, cfg.train_labels)
        test = read_idx_files(cfg.test_images, cfg.test_labels)
        classes = max(train.classes, test.classes)
        train = Dataset(train.features, train.labels, classes, train.image_shape)
        test = Dataset(test.features, test.labels, classes, test.image_shape)
    else:
        train = read_cifar_files([p.strip() for p in cfg.cifar_train.split(",") if p.strip()])
        test = read_cifar_files([p.strip() for p in cfg.cifar_test.split(",") if p.strip()])

    def cap(ds, n, tag):
        if n and len(ds) > n:
            idx = np.random.default_rng(derive_seed(cfg.seed, tag)).choice(len(ds), size=n, replace=False)
            return ds.subset(np.sort(idx))
        return ds

    return cap(train, cfg.max_train, "cap-train"), cap(test, cfg.max_test, "cap-test")


def prepare(cfg: ExperimentConfig) -> SimState:
    train, test = load_source(cfg)
    validation, server_test = validation_split(test, cfg.validation_fraction, derive_seed(cfg.seed, "validation"))
    shards = partition(train, cfg.n_clients, cfg.n_poor, cfg.poor_skew, derive_seed(cfg.seed, "partition"))

    regular_ids = [p.id for _, p in shards if p.role == "regular"]
    rng = np.random.default_rng(derive_seed(cfg.seed, "adversaries"))
    adv_ids = set(rng.choice(regular_ids, size=cfg.n_adversarial, replace=False).tolist()) if cfg.n_adversarial else set()

    pattern = None
    if cfg.attack == "backdoor":
        pattern = BackdoorPattern.bottom_right(
            cfg.pattern, cfg.pattern_size, train.image_shape, cfg.pattern_intensity, cfg.target_label
        )
        pattern.footprint(train.image_shape)  # raises if it does not fit

    clients, train_data = [], []
    for ds, prof in shards:
        if prof.id in adv_ids:
            prof = ClientProfile(prof.id, "adversarial", cfg.attack)
            if cfg.attack == "label_flip":
                poisoned = flip_labels(ds, derive_seed(cfg.seed, "flip", prof.id))
            elif cfg.attack == "backdoor":
                poisoned = inject_backdoor(ds, pattern, cfg.poison_fraction, derive_seed(cfg.seed, "poison", prof.id))
            else:
                poisoned = ds
        else:
            poisoned = ds
        clients.append((ds, prof))
        train_data.append(poisoned)

    layout = ModelLayout((train.dims, *cfg.hidden_sizes, train.classes), cfg.activation)
    initial = layout.init_params(derive_seed(cfg.seed, "init"))
    fed = FederatedDataset(clients, validation, server_test)
    return SimState(cfg, layout, fed, train_data, pattern, initial)


# ---------------------------------------------------------------- one round

def select_clients(cfg: ExperimentConfig, rnd: int) -> list[int]:
    if cfg.clients_per_round == cfg.n_clients:
        return list(range(cfg.n_clients))
    rng = np.random.default_rng(derive_seed(cfg.seed, "select", rnd))
    return sorted(rng.choice(cfg.n_clients, size=cfg.clients_per_round, replace=False).tolist())


def _expected_byz(cfg: ExperimentConfig, n: int) -> int:
    if cfg.n_byz is not None:
        return cfg.n_byz
    return int(round(cfg.n_adversarial * n / cfg.n_clients))


def round_lle_config(cfg: ExperimentConfig, rnd: int) -> LLEConfig:
    return LLEConfig(
        mode=cfg.lle_mode,
        n_perturb=cfg.lle_perturb,
        radius=cfg.lle_radius,
        max_instances=cfg.lle_instances,
        seed=derive_seed(cfg.seed, "lle", rnd) % (2**31),
    )


def _aggregate(state: SimState, G: np.ndarray, models: list[np.ndarray], ids: list[int], rnd: int):
    """Apply the configured defense; returns (params, weights, kept mask, extras)."""
    cfg = state.config
    n = len(models)
    deltas = [m - G for m in models]
    keep = np.ones(n, dtype=bool)
    weights = None
    extra = {}
    d = cfg.defense
    if d == "fedavg":
        out = agg.fedavg(G, deltas, cfg.server_lr)
        weights = agg.uniform_weights(n)
    elif d == "median":
        out = agg.coordinate_median(models)
    elif d == "trimmed_mean":
        out = agg.trimmed_mean(models, cfg.trim)
    elif d == "multikrum":
        n_sel = cfg.n_select if cfg.n_select is not None else max(1, int(round(0.2 * n)))
        sel = agg.multikrum_select(models, n_sel, _expected_byz(cfg, n))
        out = np.mean([models[i] for i in sel], axis=0)
        keep[:] = False
        keep[sel] = True
        weights = keep / keep.sum()
    elif d == "bulyan":
        f = _expected_byz(cfg, n)
        sel = agg.bulyan_select(models, f, cfg.n_select)
        out = agg.trimmed_mean([models[i] for i in sel], cfg.trim)
        keep[:] = False
        keep[sel] = True
    elif d == "norm_clip":
        out = agg.norm_clip(G, deltas, cfg.clip_norm, cfg.server_lr)
        weights = agg.uniform_weights(n)
    elif d == "wdp":
        out = agg.wdp(G, deltas, cfg.clip_norm, cfg.noise_sigma, cfg.server_lr, derive_seed(cfg.seed, "wdp", rnd))
        weights = agg.uniform_weights(n)
    elif d == "rlr":
        theta = cfg.rlr_theta if cfg.rlr_theta is not None else _expected_byz(cfg, n) + 1
        out = agg.rlr(G, deltas, theta, cfg.server_lr)
        weights = agg.uniform_weights(n)
    else:
        if d == "rab2def":
            res = agg.rab2def_aggregate(state.layout, models, state.federation.server_validation,
                                        round_lle_config(cfg, rnd), client_ids=ids)
        else:
            res = agg.ddaba_aggregate(state.layout, models, state.federation.server_validation, client_ids=ids)
        out = res.params
        weights = res.weights
        keep = res.weights > 0
        extra = {
            "scores": res.ordering.scores,
            "x_values": res.ordering.x_values,
            "fallback": res.fallback,
            "quantifier": res.quantifier,
        }
    return out, weights, keep, extra


def run_round(state: SimState, params: np.ndarray, rnd: int, keep_models: bool = False) -> tuple[np.ndarray, RoundReport]:
    cfg = state.config
    layout = state.layout
    G = np.asarray(params, dtype=np.float64)
    ids = select_clients(cfg, rnd)
    n = len(ids)
    profiles = state.profiles

    submitted, local_models, diverged = [], {}, []
    for cid in ids:
        prof = profiles[cid]
        if prof.attack == "random_weights":
            local = random_weights_update(layout, cfg.random_scale, derive_seed(cfg.seed, "random", rnd, cid))
        else:
            try:
                local = local_train(
                    layout, G, state.train_data[cid].as_batch(), cfg.local_epochs, cfg.lr,
                    cfg.batch_size, derive_seed(cfg.seed, "train", rnd, cid),
                )
            except DivergenceError as exc:
                log.warning("round %d: client %d diverged in epoch %d", rnd, cid, exc.epoch)
                diverged.append(cid)
                local = G.copy()
        model = local
        boosted = prof.attack == "backdoor" or (cfg.boost_byzantine and prof.attack in BYZANTINE)
        if boosted and cid not in diverged:
            model = G + boost_update(local, G, n, cfg.server_lr)
        local_models[cid] = local
        submitted.append(model)

    new_G, weights, keep, extra = _aggregate(state, G, submitted, ids, rnd)

    discarded = {"adversarial": [], "poor": [], "regular": []}
    for cid, kept in zip(ids, keep):
        if not kept:
            discarded[profiles[cid].role].append(cid)

    test = state.federation.server_test
    accuracy = evaluate(layout, new_G, test)
    backdoor = evaluate_backdoor(layout, new_G, test, state.pattern) if state.pattern is not None else None
    poor_local = {cid: evaluate(layout, local_models[cid], test) for cid in ids if profiles[cid].role == "poor"}

    q = extra.get("quantifier")
    report = RoundReport(
        round=rnd,
        participants=list(ids),
        weights=None if weights is None else {cid: float(w) for cid, w in zip(ids, weights)},
        scores=None if "scores" not in extra else {cid: float(s) for cid, s in zip(ids, extra["scores"])},
        x_values=None if "x_values" not in extra else {cid: float(x) for cid, x in zip(ids, extra["x_values"])},
        discarded=discarded,
        accuracy=accuracy,
        backdoor_accuracy=backdoor,
        fallback=bool(extra.get("fallback", False)),
        quantifier=q,
        printed_y_b=agg.printed_y_b(q, n) if q is not None else None,
        poor_local_accuracy=poor_local,
        diverged=diverged,
        models=dict(zip(ids, submitted)) if keep_models else None,
    )
    return new_G, report


def run_experiment(cfg: ExperimentConfig, keep_models_round: int | None = None, state: SimState | None = None):
    """Run every round; returns (final params, reports, fairness summary, state)."""
    state = state or prepare(cfg)
    params = state.initial.copy()
    reports = []
    for rnd in range(cfg.rounds):
        params, rep = run_round(state, params, rnd, keep_models=(rnd == keep_models_round))
        reports.append(rep)
        log.info("round %d: accuracy %.4f", rnd, rep.accuracy)
    return params, reports, fairness_summary(reports, state.profiles), state


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{float(v):.6f}"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


ROUND_COLUMNS = [
    "round", "accuracy", "backdoor_accuracy", "discarded_adversarial", "discarded_poor",
    "discarded_regular", "participants", "fallback", "diverged", "q_b", "q_c", "q_y_b", "q_y_b_printed",
]


def emit_reports(reports: list[RoundReport], summary: FairnessSummary, out_dir, n_clients: int, images=None) -> list[Path]:
    """Write rounds.csv, weights.csv, fairness.csv and any requested PGM images."""
    from .explain import encode_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "rounds.csv"
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ROUND_COLUMNS)
        for r in reports:
            q = r.quantifier
            w.writerow([
                _fmt(r.round), _fmt(r.accuracy), _fmt(r.backdoor_accuracy),
                _fmt(r.discard_count("adversarial")), _fmt(r.discard_count("poor")),
                _fmt(r.discard_count("regular")), _fmt(len(r.participants)), _fmt(r.fallback),
                _fmt(len(r.diverged)),
                _fmt(q.b if q else None), _fmt(q.c if q else None), _fmt(q.y_b if q else None),
                _fmt(r.printed_y_b),
            ])
    written.append(path)

    path = out / "weights.csv"
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["round"] + [f"client_{i}" for i in range(n_clients)])
        for r in reports:
            row = [_fmt(r.round)]
            for cid in range(n_clients):
                row.append(_fmt(r.weights.get(cid)) if r.weights is not None else "")
            w.writerow(row)
    written.append(path)

    path = out / "fairness.csv"
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["metric", "value"])
        for role, (lo, hi, mean) in (("adversarial", summary.adversarial), ("poor", summary.poor)):
            w.writerow([f"{role}_discard_min", _fmt(lo)])
            w.writerow([f"{role}_discard_max", _fmt(hi)])
            w.writerow([f"{role}_discard_mean", _fmt(mean)])
        for cid in sorted(summary.poor_accuracy):
            w.writerow([f"poor_client_{cid}_accuracy", _fmt(summary.poor_accuracy[cid])])
        w.writerow(["poor_accuracy_mean", _fmt(summary.poor_accuracy_mean)])
    written.append(path)

    for name, img in sorted((images or {}).items()):
        path = out / f"{name}.pgm"
        path.write_bytes(encode_pgm(img))
        written.append(path)
    return written


def read_fairness(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {k: v for k, v in rows[1:]}


def read_rounds(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

