"""Dataset construction, stratified splits, cross-validation, training and metrics."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from doublespend_gnn import gnn
from doublespend_gnn.errors import InvalidInputError, InvalidParametersError
from doublespend_gnn.observation import (
    FEATURE_DIM, LABEL_VALUES, assign_labels, extract_features, select_observers)
from doublespend_gnn.propagation import (
    GraphLabel, Scenario, ScenarioParams, run_propagation, sample_scenario)
from doublespend_gnn.topology import DEFAULT_BA_M, Topology, generate_ba

log = logging.getLogger(__name__)

DATASET_FORMAT = "doublespend_gnn.dataset"
DATASET_VERSION = 1
STUDY_OBSERVER_COUNTS = (10, 50, 100, 150, 200, 250)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    node_count: int = 14000
    observer_count: int = 250
    total_samples: int = 1000
    positive_fraction: float = 0.5
    ba_m: int = DEFAULT_BA_M
    master_seed: int = 0
    latency_mean: float = 1.0
    # Attack delays are uniform on [0, max_attack_delay]; None selects
    # delay_factor * latency_mean * ceil(mean shortest-path length).
    max_attack_delay: float | None = 0.0
    delay_factor: float = 2.0
    shared_topology: bool = False

    def __post_init__(self):
        if self.total_samples < 2:
            raise InvalidParametersError("total_samples must be at least 2")
        if not 0 < self.positive_fraction < 1:
            raise InvalidParametersError("positive_fraction must lie in (0, 1)")
        if not 1 <= self.observer_count <= self.node_count:
            raise InvalidParametersError("observer_count must satisfy 1 <= k <= node_count")
        if not 1 <= self.ba_m < self.node_count:
            raise InvalidParametersError("ba_m must satisfy 1 <= m < node_count")
        if self.max_attack_delay is not None and self.max_attack_delay < 0:
            raise InvalidParametersError("max_attack_delay must be non-negative")

    @property
    def positive_count(self) -> int:
        return min(self.total_samples - 1, max(1, round(self.positive_fraction * self.total_samples)))


@dataclass(eq=False)
class GraphSample:
    index: int
    sample_seed: int
    topology: Topology
    observer_set: tuple[int, ...]
    label_codes: np.ndarray  # int8 per node: 0 / 1 / 2 for labels 0.0 / 0.5 / 1.0
    features: np.ndarray  # int64, (n, 12)
    graph_label: int
    scenario: ScenarioParams
    pay_holder_count: int

    @property
    def node_labels(self) -> np.ndarray:
        return self.label_codes / 2.0

    @property
    def node_count(self) -> int:
        return self.topology.node_count


# --------------------------------------------------------------------------
# dataset construction


def _sample_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def _positive_indices(spec: DatasetSpec) -> set[int]:
    rng = np.random.default_rng(np.random.SeedSequence(spec.master_seed, spawn_key=(2**32,)))
    return set(rng.choice(spec.total_samples, size=spec.positive_count, replace=False).tolist())


def _shared_topology(spec: DatasetSpec) -> Topology:
    return generate_ba(spec.node_count, spec.ba_m, _sample_seed(spec.master_seed, 2**32 + 1))


def make_sample(spec: DatasetSpec, index: int, positive: bool,
                topology: Topology | None = None) -> GraphSample:
    """Build sample ``index`` of ``spec``; depends only on the spec and the index."""
    seed = _sample_seed(spec.master_seed, index)
    rng = np.random.default_rng(seed)
    topo_seed = int(rng.integers(2**63))
    if topology is None:
        topology = generate_ba(spec.node_count, spec.ba_m, topo_seed)
    scenario = sample_scenario(topology, Scenario.NO_ATTACK if positive else Scenario.ATTACK, rng,
                               latency_mean=spec.latency_mean, max_delay=spec.max_attack_delay,
                               delay_factor=spec.delay_factor)
    outcome = run_propagation(topology, scenario)
    observers = select_observers(spec.node_count, spec.observer_count, rng)
    assignment = assign_labels(outcome, observers)
    codes = np.rint(assignment.labels * 2).astype(np.int8)
    return GraphSample(index, seed, topology, assignment.observer_set, codes,
                       extract_features(topology, assignment), int(outcome.graph_label),
                       scenario, outcome.pay_holder_count)


def _make_sample_job(args):
    return make_sample(*args)


def build_dataset(spec: DatasetSpec, workers: int | None = None) -> list[GraphSample]:
    """Generate ``spec.total_samples`` samples, reproducible from ``spec.master_seed``.

    Results do not depend on ``workers``: every sample has its own seed.
    """
    positives = _positive_indices(spec)
    shared = _shared_topology(spec) if spec.shared_topology else None
    jobs = [(spec, i, i in positives, shared) for i in range(spec.total_samples)]
    workers = workers or os.cpu_count() or 1
    if workers <= 1:
        return [make_sample(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_make_sample_job, jobs, chunksize=4))


# --------------------------------------------------------------------------
# dataset files


def sample_record(spec: DatasetSpec, s: GraphSample, inline_edges: bool = True,
                  include_features: bool = True) -> dict:
    topo = {"n": s.topology.node_count, "m": s.topology.ba_m, "seed": s.topology.seed}
    if inline_edges:
        topo["edges"] = [[u, v] for u, v in s.topology.edges()]
    rec = {
        "index": s.index,
        "spec": asdict(spec),
        "sample_seed": s.sample_seed,
        "topology": topo,
        "scenario": {"kind": s.scenario.scenario.value, "pay_origin": s.scenario.pay_origin,
                     "attack_origin": s.scenario.attack_origin,
                     "attack_delay": s.scenario.attack_delay,
                     "latency_mean": s.scenario.latency_mean, "seed": s.scenario.seed},
        "observers": list(s.observer_set),
        "node_labels": [LABEL_VALUES[c] for c in s.label_codes.tolist()],
        "graph_label": GraphLabel(s.graph_label).name,
        "pay_holder_count": s.pay_holder_count,
    }
    if include_features:
        rec["features"] = s.features.tolist()
    return rec


def write_dataset(spec: DatasetSpec, samples: Sequence[GraphSample], path: str | Path,
                  inline_edges: bool = True, include_features: bool = True) -> None:
    """One JSON record per line; the first line is a header echoing the spec."""
    with open(path, "w") as fh:
        header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "spec": asdict(spec),
                  "samples": len(samples)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(sample_record(spec, s, inline_edges, include_features),
                                sort_keys=True) + "\n")


def _sample_from_record(rec: dict, topo_cache: dict) -> GraphSample:
    t = rec["topology"]
    key = (t["n"], t["m"], t["seed"])
    if "edges" in t:
        topology = Topology.from_edges(t["n"], [tuple(e) for e in t["edges"]], t["m"], t["seed"])
    elif key in topo_cache:
        topology = topo_cache[key]
    else:
        topology = generate_ba(t["n"], t["m"], t["seed"])
    topo_cache[key] = topology
    sc = rec["scenario"]
    scenario = ScenarioParams(Scenario(sc["kind"]), sc["pay_origin"], sc["attack_origin"],
                              sc["attack_delay"], sc["latency_mean"], sc["seed"])
    codes = np.rint(np.asarray(rec["node_labels"], dtype=np.float64) * 2).astype(np.int8)
    features = extract_features(topology, codes / 2.0)
    if "features" in rec and not np.array_equal(np.asarray(rec["features"]), features):
        raise InvalidInputError(f"sample {rec['index']}: stored features disagree with labels")
    return GraphSample(rec["index"], rec["sample_seed"], topology, tuple(rec["observers"]), codes,
                       features, int(GraphLabel[rec["graph_label"]]), scenario,
                       rec["pay_holder_count"])


def read_dataset(path: str | Path) -> tuple[DatasetSpec, list[GraphSample]]:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"dataset file {path} does not exist")
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError:
            raise InvalidInputError(f"{path} has no dataset header") from None
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise InvalidInputError(f"{path} is not a version {DATASET_VERSION} dataset")
        spec = DatasetSpec(**header["spec"])
        cache: dict = {}
        samples = [_sample_from_record(json.loads(line), cache) for line in fh if line.strip()]
    return spec, samples


# --------------------------------------------------------------------------
# splits


def _largest_remainder(sizes: Sequence[int], total: int) -> list[int]:
    whole = sum(sizes)
    quotas = [s * total / whole for s in sizes]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _by_class(samples: Sequence[GraphSample]) -> dict[int, list[GraphSample]]:
    groups: dict[int, list[GraphSample]] = {}
    for s in samples:
        groups.setdefault(s.graph_label, []).append(s)
    return dict(sorted(groups.items()))


def split_dataset(samples: Sequence[GraphSample], train_fraction: float = 0.7,
                  seed: int = 0) -> tuple[list[GraphSample], list[GraphSample]]:
    """Stratified train/test split; both parts keep the input order."""
    if not 0 < train_fraction < 1:
        raise InvalidParametersError("train_fraction must lie in (0, 1)")
    if not samples:
        raise InvalidParametersError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    groups = _by_class(samples)
    counts = _largest_remainder([len(g) for g in groups.values()], round(train_fraction * len(samples)))
    chosen: set[int] = set()
    for group, c in zip(groups.values(), counts):
        picks = rng.permutation(len(group))[:c]
        chosen.update(id(group[i]) for i in picks)
    train = [s for s in samples if id(s) in chosen]
    test = [s for s in samples if id(s) not in chosen]
    return train, test


def stratified_folds(samples: Sequence[GraphSample], k: int = 5, seed: int = 0) -> list[list[GraphSample]]:
    if k < 2 or len(samples) < k:
        raise InvalidParametersError(f"need at least k={k} >= 2 samples for k-fold CV, got {len(samples)}")
    rng = np.random.default_rng(seed)
    dealt: list[GraphSample] = []
    for group in _by_class(samples).values():
        dealt.extend(group[i] for i in rng.permutation(len(group)))
    folds: list[list[GraphSample]] = [[] for _ in range(k)]
    for j, s in enumerate(dealt):
        folds[j % k].append(s)
    return folds


# --------------------------------------------------------------------------
# training


SCALINGS = ("none", "degree", "log")


@dataclass(frozen=True)
class TrainConfig:
    layer_kind: str = "gcn"
    hidden: int = 32
    dropout: float = 0.5
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    patience: int = 10
    feature_scaling: str = "none"  # "none", "degree" or "log"
    dtype: str = "float64"

    def __post_init__(self):
        gnn.LayerKind(self.layer_kind)
        if self.feature_scaling not in SCALINGS:
            raise InvalidParametersError(f"unknown feature scaling {self.feature_scaling!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise InvalidParametersError("batch_size, hidden must be positive and epochs >= 0")


def model_inputs(features: np.ndarray, scaling: str = "none", dtype="float64") -> np.ndarray:
    """Turn raw label counts into network inputs.

    ``"degree"`` divides the neighbour counts by the node degree and the 2-hop
    pair counts by the number of 2-hop walks, leaving proportions.  ``"log"``
    applies ``log1p`` to every count, which tames hub nodes while keeping a
    single neighbour of a given label clearly visible.
    """
    x = features.astype(dtype)
    if scaling == "degree":
        one = x[:, :3].sum(axis=1, keepdims=True)
        two = x[:, 3:].sum(axis=1, keepdims=True)
        x[:, :3] /= np.where(one > 0, one, 1.0)
        x[:, 3:] /= np.where(two > 0, two, 1.0)
    elif scaling == "log":
        np.log1p(x, out=x)
    return x


class GraphCache:
    """Per-sample graph operators and model inputs, kept while memory allows."""

    def __init__(self, config: TrainConfig, max_nodes: int = 1_000_000):
        self.config = config
        self.max_nodes = max_nodes
        self._store: dict[int, tuple[gnn.GraphData, np.ndarray]] = {}
        self._graphs: dict[int, gnn.GraphData] = {}
        self._nodes = 0

    def get(self, s: GraphSample) -> tuple[gnn.GraphData, np.ndarray]:
        key = id(s)
        if key in self._store:
            return self._store[key]
        tkey = id(s.topology)
        g = self._graphs.get(tkey) or gnn.GraphData.from_topology(s.topology)
        x = model_inputs(s.features, self.config.feature_scaling, self.config.dtype)
        if self._nodes + s.node_count <= self.max_nodes:
            self._store[key] = (g, x)
            self._graphs[tkey] = g
            self._nodes += s.node_count
        return g, x


@dataclass
class TrainResult:
    params: gnn.ModelParams
    loss_curve: list[float] = field(default_factory=list)
    validation_curve: list[float] = field(default_factory=list)
    stopped_early: bool = False
    config_scaling: str = "none"


def predict(params: gnn.ModelParams, s: GraphSample, scaling: str = "none",
            cache: GraphCache | None = None) -> int:
    return gnn.predict_label(logits_for(params, s, scaling, cache))


def logits_for(params: gnn.ModelParams, s: GraphSample, scaling: str = "none",
               cache: GraphCache | None = None) -> np.ndarray:
    if cache is not None:
        g, x = cache.get(s)
    else:
        g = gnn.GraphData.from_topology(s.topology)
        x = model_inputs(s.features, scaling, params.blocks["head.W"].dtype)
    return gnn.forward(params, g, x).logits


def mean_loss(params: gnn.ModelParams, samples: Sequence[GraphSample], cache: GraphCache) -> float:
    return float(np.mean([gnn.cross_entropy(gnn.forward(params, *cache.get(s)).logits, s.graph_label)
                          for s in samples]))


def train_model(train: Sequence[GraphSample], config: TrainConfig = TrainConfig(), seed: int = 0,
                validation: Sequence[GraphSample] | None = None,
                cache: GraphCache | None = None) -> TrainResult:
    """Mini-batch Adam on the mean per-graph cross-entropy.

    Early stopping watches the validation loss when a validation set is given
    and the epoch training loss otherwise; the best parameters seen are
    returned.
    """
    if not train:
        raise InvalidParametersError("training set is empty")
    dims = {s.features.shape[1] for s in train}
    if dims != {FEATURE_DIM}:
        raise InvalidInputError(f"inconsistent feature dimensions {sorted(dims)}")
    cache = cache or GraphCache(config)
    rng = np.random.default_rng(seed)
    params = gnn.init_params(config.layer_kind, FEATURE_DIM, config.hidden, config.dropout,
                             seed=rng, dtype=np.dtype(config.dtype))
    state = gnn.AdamState.fresh(params.blocks, config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(params.copy(), config_scaling=config.feature_scaling)
    best, since_best = math.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            total = {k: np.zeros_like(v) for k, v in params.blocks.items()}
            for s in batch:
                g, x = cache.get(s)
                loss, grads = gnn.loss_and_grads(params, g, x, s.graph_label, training=True, rng=rng)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}: lr={config.lr}, "
                        f"max |weight|={max(float(np.abs(v).max()) for v in params.blocks.values()):.3g}, "
                        f"feature scaling={config.feature_scaling!r}")
                epoch_losses.append(loss)
                for k in total:
                    total[k] += grads[k]
            mean_grads = {k: v / len(batch) for k, v in total.items()}
            params.blocks, state = gnn.adam_step(params.blocks, mean_grads, state)
            if not params.is_finite():
                raise TrainingDivergedError(f"non-finite weights after epoch {epoch}: lr={config.lr}")
        result.loss_curve.append(float(np.mean(epoch_losses)))
        if validation:
            monitored = mean_loss(params, validation, cache)
            result.validation_curve.append(monitored)
        else:
            monitored = result.loss_curve[-1]
        log.debug("epoch %d loss %.5f monitored %.5f", epoch, result.loss_curve[-1], monitored)
        if monitored < best:
            best, since_best = monitored, 0
            result.params = params.copy()
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalMetrics:
    """Confusion counts with "no attack" as the positive class.

    Ratios whose denominator is zero are ``None`` (undefined).
    """

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def metrics_from_predictions(truth: Iterable[int], predicted: Iterable[int]) -> EvalMetrics:
    tp = fp = fn = tn = 0
    for y, p in zip(truth, predicted):
        if p == 1:
            tp, fp = (tp + 1, fp) if y == 1 else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if y == 1 else (fn, tn + 1)
    return EvalMetrics(tp, fp, fn, tn)


Predictor = Callable[[GraphSample], int]


def as_predictor(model: gnn.ModelParams | TrainResult | Predictor, scaling: str = "none",
                 cache: GraphCache | None = None) -> Predictor:
    if isinstance(model, TrainResult):
        scaling, model = model.config_scaling, model.params
    if isinstance(model, gnn.ModelParams):
        params = model
        return lambda s: predict(params, s, scaling, cache)
    return model


def evaluate(model, test: Sequence[GraphSample], scaling: str = "none",
             cache: GraphCache | None = None) -> EvalMetrics:
    if not test:
        raise InvalidParametersError("test set is empty")
    fn = as_predictor(model, scaling, cache)
    return metrics_from_predictions((s.graph_label for s in test), (fn(s) for s in test))


@dataclass
class CVResult:
    fold_accuracies: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


Fitter = Callable[[Sequence[GraphSample], Sequence[GraphSample], int], Predictor]


def gnn_fitter(config: TrainConfig, cache: GraphCache | None = None) -> Fitter:
    def fit(train, held_out, seed):
        result = train_model(train, config, seed, validation=held_out, cache=cache)
        return as_predictor(result, cache=cache)
    return fit


def kfold_cv(train: Sequence[GraphSample], k: int = 5, config: TrainConfig = TrainConfig(),
             seed: int = 0, fitter: Fitter | None = None) -> CVResult:
    """Stratified k-fold CV; every fold trains a freshly initialised model."""
    folds = stratified_folds(train, k, seed)
    fitter = fitter or gnn_fitter(config, GraphCache(config))
    accs = []
    for i, held_out in enumerate(folds):
        rest = [s for j, f in enumerate(folds) if j != i for s in f]
        predict_fn = fitter(rest, held_out, seed + 1 + i)
        accs.append(evaluate(predict_fn, held_out).accuracy)
    return CVResult(accs)


# --------------------------------------------------------------------------
# reports


def _fmt(x: float | None) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def format_metrics(m: EvalMetrics, title: str = "") -> str:
    lines = [title] if title else []
    lines += [
        "confusion matrix (positive = no attack)",
        "                 pred_no_attack  pred_attack",
        f"  no_attack      {m.tp:>14d}  {m.fn:>11d}",
        f"  attack         {m.fp:>14d}  {m.tn:>11d}",
        f"accuracy  {_fmt(m.accuracy)}",
        f"precision {_fmt(m.precision)}",
        f"recall    {_fmt(m.recall)}",
        f"f1        {_fmt(m.f1)}",
    ]
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    observers: int
    layer_kind: str
    cv_mean_accuracy: float | None
    test: EvalMetrics


def format_table(results: Sequence[ExperimentResult]) -> str:
    """Observer counts as column groups, one column per layer kind, metrics as rows."""
    cols = [(r.observers, r.layer_kind) for r in results]
    head1 = ["Observer Nodes"] + [str(o) for o, _ in cols]
    head2 = ["GNN Layer"] + [k for _, k in cols]
    rows = [
        ["CV Avg. Accuracy"] + [_fmt(r.cv_mean_accuracy) for r in results],
        ["Test Accuracy"] + [_fmt(r.test.accuracy) for r in results],
        ["Precision"] + [_fmt(r.test.precision) for r in results],
        ["Recall"] + [_fmt(r.test.recall) for r in results],
        ["F1-score"] + [_fmt(r.test.f1) for r in results],
    ]
    table = [head1, head2] + rows
    widths = [max(len(row[i]) for row in table) for i in range(len(head1))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in table) + "\n"


def run_experiment(spec: DatasetSpec, config: TrainConfig, seed: int = 0, cv_folds: int = 5,
                   samples: Sequence[GraphSample] | None = None,
                   workers: int | None = None) -> tuple[ExperimentResult, TrainResult]:
    """Build (or reuse) a dataset, split 70/30, optionally cross-validate, train and test."""
    samples = samples if samples is not None else build_dataset(spec, workers)
    train, test = split_dataset(samples, 0.7, seed)
    cache = GraphCache(config)
    cv = None
    if cv_folds:
        cv = kfold_cv(train, cv_folds, config, seed, gnn_fitter(config, cache)).mean_accuracy
    result = train_model(train, config, seed, cache=cache)
    metrics = evaluate(result, test, cache=cache)
    return ExperimentResult(spec.observer_count, config.layer_kind, cv, metrics), result


def with_layer(config: TrainConfig, kind: str) -> TrainConfig:
    return replace(config, layer_kind=gnn.LayerKind(kind).value)
