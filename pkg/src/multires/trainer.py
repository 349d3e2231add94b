"""Joint multi-resolution training, lambda selection, and the baseline methods."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .consistency import (
    ATTENTION,
    MIL,
    AttentionParams,
    GroupIndex,
    SmaxConfig,
    group_index,
    group_smax,
    init_attention,
    pair_consistency,
)
from .data import (
    CorrespondenceMap,
    InstanceSet,
    MultiResDataset,
    ResolutionLayer,
    build_correspondence,
    split_folds,
)
from .models import BoundClassifier, Classifier, ModelSpec, cross_entropy_loss, init
from .numcore import Tape, Tensor

log = logging.getLogger(__name__)

METHODS = ("OnlyFine", "SSRManifold", "Propagate", "Augment", "MultiResMIL", "MultiResAttention")
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0)

# independent RNG streams per purpose, keyed by (seed, stream, resolution)
_INIT, _ATT, _BATCH, _GROUPS, _SSR = range(5)


class TrainingDiverged(RuntimeError):
    pass


def canonical_method(name: str) -> str:
    for m in METHODS:
        if m.lower() == name.replace("-", "").replace("_", "").lower():
            return m
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "MultiResAttention"
    lambdas: tuple[float, ...] = (1.0,)
    lr: float = 0.1
    epochs: int = 300
    batch_size: int = 0
    seed: int = 0
    smax: SmaxConfig = SmaxConfig()
    model: str = "logreg"
    hidden_dim: int = 8
    init_scale: float = 0.1
    align_dim: int = 8
    attention_init_scale: float = 0.1
    consistency_reduce: str = "mean"
    ssr_gamma: float = 1e-3
    ssr_subsample: int = 100
    augment_threshold: float = 0.9
    augment_max_iters: int = 5
    propagate_confidence: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambda values must be >= 0")
        if self.consistency_reduce not in ("mean", "sum"):
            raise ValueError("consistency_reduce must be 'mean' or 'sum'")

    def spec_for(self, input_dim: int) -> ModelSpec:
        return ModelSpec(self.model, input_dim, self.hidden_dim, self.init_scale)

    def lambda_for(self, position: int) -> float:
        if not self.lambdas:
            return 0.0
        if len(self.lambdas) == 1:
            return self.lambdas[0]
        return self.lambdas[position]


@dataclass
class TrainResult:
    method: str
    seed: int
    lambdas: tuple[float, ...]
    epochs: int
    models: dict[int, Classifier]
    attention: dict[int, AttentionParams]
    losses: dict[str, list]
    test_accuracy: float | None
    train_accuracy: float
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def fine(self) -> Classifier:
        return self.models[0]

    def metrics(self) -> dict:
        """Serializable record; wall time is left out so reruns compare byte-for-byte."""
        return {
            "method": self.method,
            "seed": self.seed,
            "lambda": list(self.lambdas),
            "epochs": self.epochs,
            "test_accuracy": self.test_accuracy,
            "train_accuracy": self.train_accuracy,
            "losses": self.losses,
            "extra": self.extra,
        }


def write_metrics(results: Sequence[TrainResult], path) -> None:
    payload = {"schema": "multires.metrics/1", "runs": [r.metrics() for r in results]}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _rng(seed: int, stream: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, k])


def evaluate(model: Classifier, test: InstanceSet) -> float:
    """Accuracy with predictions thresholded at 0.5; exactly 0.5 counts as positive."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    labels = test.labels
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("test instances must all be labeled")
    pred = (model.predict(test.features) >= 0.5).astype(np.int64)
    return float(np.mean(pred == labels))


# -- objective ---------------------------------------------------------------


def correspondences(dataset: MultiResDataset) -> dict[int, GroupIndex]:
    out = {}
    for layer in dataset.coarse:
        corr = build_correspondence(layer, dataset.fine)
        out[layer.resolution_id] = group_index(corr, layer.unlabeled, dataset.fine.unlabeled)
    return out


def _mode(method: str) -> str | None:
    return {"MultiResMIL": MIL, "MultiResAttention": ATTENTION}.get(method)


@dataclass
class Batch:
    """Labeled rows per resolution and consistency groups per coarse resolution."""

    labeled: dict[int, np.ndarray]
    groups: dict[int, GroupIndex]


def assemble_objective(
    dataset: MultiResDataset,
    corr: dict[int, CorrespondenceMap | GroupIndex],
    models: dict[int, BoundClassifier],
    attention: dict[int, object] | None,
    config: TrainConfig,
    batch: Batch | None = None,
) -> tuple[Tensor, dict[str, dict[int, float]]]:
    """Sum of labeled cross-entropies plus lambda-weighted consistency terms.

    Returns the scalar loss and the value of each term. Pairs with a zero
    lambda are not evaluated at all.
    """
    layers = {0: dataset.fine, **{c.resolution_id: c for c in dataset.coarse}}
    terms: dict[str, dict[int, float]] = {"labeled": {}, "consistency": {}}
    loss = None
    for k, layer in layers.items():
        if k not in models:
            continue
        lab = layer.labeled
        rows = batch.labeled[k] if batch is not None else slice(None)
        if len(lab) == 0:
            raise ValueError(f"resolution {k} has no labeled instances")
        ce = cross_entropy_loss(models[k], Tensor(lab.features[rows]), lab.labels[rows])
        terms["labeled"][k] = ce.item()
        loss = ce if loss is None else nc.add(loss, ce)

    mode = _mode(config.method)
    if mode is not None:
        for pos, layer in enumerate(dataset.coarse):
            k = layer.resolution_id
            lam = config.lambda_for(pos)
            if lam == 0.0:
                continue
            if k not in corr:
                raise ValueError(f"no correspondence for coarse resolution {k}")
            att = None
            if mode == ATTENTION:
                if not attention or k not in attention:
                    raise ValueError(f"attention parameters missing for coarse resolution {k}")
                att = attention[k]
            idx = batch.groups[k] if batch is not None else corr[k]
            d = pair_consistency(
                layer.unlabeled,
                dataset.fine.unlabeled,
                idx,
                mode,
                models[k],
                models[0],
                att,
                config.smax,
                config.consistency_reduce,
            )
            terms["consistency"][k] = d.item()
            loss = nc.add(loss, nc.mul(d, lam))
    return loss, terms


# -- gradient descent --------------------------------------------------------


def _batches(n: int, size: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``steps`` batches of ``size`` rows drawn from successive shuffles of ``range(n)``."""
    if size == 0 or size >= n:
        return [np.arange(n)] * steps if size == 0 else [np.sort(rng.permutation(n)) for _ in range(steps)]
    out: list[np.ndarray] = []
    pool = np.zeros(0, dtype=np.intp)
    while len(out) < steps:
        if pool.size < size:
            pool = np.concatenate([pool, rng.permutation(n)])
        out.append(pool[:size])
        pool = pool[size:]
    return out


def _descend(
    dataset: MultiResDataset,
    config: TrainConfig,
    models: dict[int, Classifier],
    attention: dict[int, AttentionParams],
    corr: dict[int, GroupIndex],
    extra_loss=None,
) -> dict[str, list]:
    """Run gradient descent in place on ``models`` and ``attention``; return the loss curves."""
    layers = {0: dataset.fine, **{c.resolution_id: c for c in dataset.coarse}}
    mode = _mode(config.method)
    n0 = len(dataset.fine.labeled)
    bs = config.batch_size
    steps = 1 if bs == 0 else max(1, math.ceil(n0 / bs))
    batch_rngs = {k: _rng(config.seed, _BATCH, k) for k in models}
    group_rngs = {k: _rng(config.seed, _GROUPS, k) for k in corr}

    curves: dict[str, list] = {
        "total": [],
        "labeled": {str(k): [] for k in models},
        "consistency": {str(k): [] for k in corr} if mode else {},
    }
    for epoch in range(config.epochs):
        lab_rows = {k: _batches(len(layers[k].labeled), bs, steps, batch_rngs[k]) for k in models}
        grp_rows = {k: _batches(corr[k].n_groups, bs, steps, group_rngs[k]) for k in corr}
        sums = {"total": 0.0, "labeled": dict.fromkeys(models, 0.0), "consistency": dict.fromkeys(corr, 0.0)}
        for step in range(steps):
            tape = Tape()
            bound = {k: m.bind(tape, f"w{k}.") for k, m in models.items()}
            batt = {k: a.bind(tape, f"att{k}.") for k, a in attention.items()}
            batch = Batch(
                {k: lab_rows[k][step] for k in models},
                {k: corr[k] if bs == 0 else corr[k].select(grp_rows[k][step]) for k in corr},
            )
            try:
                # overflow surfaces as NonFiniteError from the tape, not as a warning
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, terms = assemble_objective(dataset, corr, bound, batt, config, batch)
                    if extra_loss is not None:
                        loss = nc.add(loss, extra_loss(bound[0]))
                    grads = nc.backward(tape, loss)
            except nc.NonFiniteError as err:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {err}") from err
            for k, m in models.items():
                for name in m.params:
                    m.params[name] = m.params[name] - config.lr * grads[f"w{k}.{name}"]
            for k, a in attention.items():
                for name in a.params:
                    a.params[name] = a.params[name] - config.lr * grads[f"att{k}.{name}"]
            sums["total"] += loss.item()
            for k, v in terms["labeled"].items():
                sums["labeled"][k] += v
            for k, v in terms["consistency"].items():
                sums["consistency"][k] += v
        if not math.isfinite(sums["total"]):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        curves["total"].append(sums["total"] / steps)
        for k in models:
            curves["labeled"][str(k)].append(sums["labeled"][k] / steps)
        if mode:
            for k in corr:
                curves["consistency"][str(k)].append(sums["consistency"][k] / steps)
    return curves


def _init_models(dataset: MultiResDataset, config: TrainConfig, resolutions) -> dict[int, Classifier]:
    dims = {0: dataset.fine.feature_dim, **{c.resolution_id: c.feature_dim for c in dataset.coarse}}
    return {k: init(config.spec_for(dims[k]), _rng(config.seed, _INIT, k)) for k in resolutions}


def _result(dataset, config, models, attention, curves, started, **extra) -> TrainResult:
    fine = models[0]
    test_acc = evaluate(fine, dataset.test) if dataset.test is not None and len(dataset.test) else None
    return TrainResult(
        method=config.method,
        seed=config.seed,
        lambdas=config.lambdas,
        epochs=config.epochs,
        models={k: m.copy() for k, m in models.items()},
        attention={k: AttentionParams(a.fine_dim, a.coarse_dim, a.align_dim, dict(a.params)) for k, a in attention.items()},
        losses=curves,
        test_accuracy=test_acc,
        train_accuracy=evaluate(fine, dataset.fine.labeled),
        wall_time=time.perf_counter() - started,
        extra=extra,
    )


def _train_joint(dataset: MultiResDataset, config: TrainConfig, corr=None) -> TrainResult:
    started = time.perf_counter()
    mode = _mode(config.method)
    if len(dataset.fine.labeled) == 0:
        raise ValueError("fine resolution has no labeled instances")
    if mode is None:
        dataset = dataset.fine_only()
    elif dataset.K < 1:
        raise ValueError(f"{config.method} needs at least one coarse resolution")
    resolutions = [0] + [c.resolution_id for c in dataset.coarse]
    models = _init_models(dataset, config, resolutions)
    corr = corr if corr is not None else (correspondences(dataset) if mode else {})
    attention = {}
    if mode == ATTENTION:
        for c in dataset.coarse:
            attention[c.resolution_id] = init_attention(
                models[0].spec.out_dim,
                models[c.resolution_id].spec.out_dim,
                _rng(config.seed, _ATT, c.resolution_id),
                config.align_dim,
                config.attention_init_scale,
            )
    curves = _descend(dataset, config, models, attention, corr)
    return _result(dataset, config, models, attention, curves, started)


def train(dataset: MultiResDataset, config: TrainConfig, corr=None) -> TrainResult:
    """Train with ``config.method`` and return frozen models and metrics."""
    method = config.method
    if method == "OnlyFine":
        return train_only_fine(dataset, config)
    if method == "SSRManifold":
        return train_ssr_manifold(dataset, config)
    if method == "Propagate":
        return train_propagate(dataset, config)
    if method == "Augment":
        return train_augment(dataset, config)
    return _train_joint(dataset, config, corr)


# -- lambda selection --------------------------------------------------------


def cross_validate_lambda(
    dataset: MultiResDataset,
    config: TrainConfig,
    grid: Sequence[Sequence[float]] | None = None,
    folds: int = 5,
) -> tuple[tuple[float, ...], dict[tuple[float, ...], float]]:
    """Pick the lambda vector with the best mean fine validation accuracy.

    Ties go to the lexicographically smallest vector. Returns the winner and
    the mean accuracy of every candidate.
    """
    if grid is None:
        grid = [(v,) * max(1, dataset.K) for v in DEFAULT_LAMBDA_GRID]
    grid = [tuple(float(v) for v in g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    splits = split_folds(dataset.fine.labeled, folds, config.seed)
    corr = correspondences(dataset) if _mode(config.method) else None
    scores = {}
    for cand in grid:
        accs = []
        for tr, va in splits:
            sub = dataset.with_fine_labeled(dataset.fine.labeled.subset(tr))
            res = train(sub, replace(config, lambdas=cand), corr)
            accs.append(evaluate(res.fine, dataset.fine.labeled.subset(va)))
        scores[cand] = float(np.mean(accs))
    best = max(scores.values())
    winner = min(c for c, s in scores.items() if s == best)
    return winner, scores


# -- baselines ---------------------------------------------------------------


def train_only_fine(dataset: MultiResDataset, config: TrainConfig) -> TrainResult:
    """Fine labels only; coarse data is ignored."""
    if len(dataset.fine.labeled) == 0:
        raise ValueError("fine resolution has no labeled instances")
    return _train_joint(dataset.fine_only(), replace(config, method="OnlyFine"))


def manifold_weights(x: np.ndarray) -> np.ndarray:
    """Gaussian affinities on a fully connected graph, bandwidth = median pairwise distance."""
    diff = x[:, None, :] - x[None, :, :]
    d2 = (diff**2).sum(axis=2)
    iu = np.triu_indices(len(x), k=1)
    sigma = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    if sigma == 0.0:
        w = np.ones_like(d2)
    else:
        w = np.exp(-d2 / (2 * sigma**2))
    np.fill_diagonal(w, 0.0)
    return w


def manifold_penalty(p: Tensor, weights: np.ndarray) -> Tensor:
    """``sum_{i<j} w_ij (p_i - p_j)^2`` written as ``p' L p`` with ``L = D - W``."""
    lap = np.diag(weights.sum(axis=1)) - weights
    return nc.dot(p, nc.matmul(Tensor(lap), p))


def train_ssr_manifold(dataset: MultiResDataset, config: TrainConfig) -> TrainResult:
    started = time.perf_counter()
    fine = dataset.fine
    if len(fine.labeled) == 0 or len(fine.unlabeled) == 0:
        raise ValueError("SSRManifold needs labeled and unlabeled fine instances")
    if config.ssr_subsample > len(fine.unlabeled):
        raise ValueError(
            f"ssr_subsample {config.ssr_subsample} exceeds {len(fine.unlabeled)} unlabeled instances"
        )
    rows = np.sort(_rng(config.seed, _SSR).choice(len(fine.unlabeled), config.ssr_subsample, replace=False))
    xs = fine.unlabeled.features[rows]
    weights = manifold_weights(xs)
    config = replace(config, method="SSRManifold")
    ds = dataset.fine_only()
    models = _init_models(ds, config, [0])

    def extra(bound: BoundClassifier) -> Tensor:
        return nc.mul(manifold_penalty(bound.predict(Tensor(xs)), weights), config.ssr_gamma)

    curves = _descend(ds, config, models, {}, {}, extra)
    return _result(ds, config, models, {}, curves, started)


def _train_single(layer: ResolutionLayer, config: TrainConfig, location_dim: int) -> Classifier:
    """Supervised model for one resolution, seeded as that resolution's model."""
    k = layer.resolution_id
    as_fine = ResolutionLayer(0, layer.feature_dim, layer.labeled, layer.unlabeled)
    ds = MultiResDataset(as_fine, (), location_dim)
    model = init(config.spec_for(layer.feature_dim), _rng(config.seed, _INIT, k))
    _descend(ds, replace(config, method="OnlyFine"), {0: model}, {}, {})
    return model


def propagate_labels(
    coarse_probs: np.ndarray, idx: GroupIndex, confidence: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Fine rows receiving pseudo-labels, those labels, and the number of gated coarse instances."""
    rows, labels = [], []
    gated = 0
    starts = np.searchsorted(idx.segments, np.arange(idx.n_groups + 1))
    for g in range(idx.n_groups):
        p = coarse_probs[idx.coarse_rows[g]]
        if confidence >= 0.5 or abs(p - 0.5) < confidence:
            continue
        gated += 1
        members = idx.fine_rows[starts[g]:starts[g + 1]]
        rows.extend(members.tolist())
        labels.extend([int(p >= 0.5)] * len(members))
    return np.array(rows, dtype=np.intp), np.array(labels, dtype=np.int64), gated


def train_propagate(dataset: MultiResDataset, config: TrainConfig) -> TrainResult:
    """Copy confident coarse predictions onto their fine instances, then train the fine model.

    Only the first coarse resolution is used.
    """
    if dataset.K < 1:
        raise ValueError("Propagate needs at least one coarse resolution")
    config = replace(config, method="Propagate")
    layer = dataset.coarse[0]
    k = layer.resolution_id
    coarse_model = _train_single(layer, config, dataset.location_dim)
    idx = correspondences(dataset)[k]
    probs = coarse_model.predict(layer.unlabeled.features)
    rows, labels, gated = propagate_labels(probs, idx, config.propagate_confidence)
    if gated == 0:
        log.warning("no coarse prediction passed the confidence gate; falling back to OnlyFine")
        res = train_only_fine(dataset, config)
        res.method = "Propagate"
        res.models[k] = coarse_model
        res.extra = {"pseudo_labels": 0, "gated": 0, "fallback": True}
        return res
    started = time.perf_counter()
    fine = dataset.fine
    pseudo = fine.unlabeled.subset(rows).relabel(labels)
    labeled = fine.labeled.concat(pseudo)
    remaining = fine.unlabeled.subset(np.setdiff1d(np.arange(len(fine.unlabeled)), rows))
    ds = MultiResDataset(ResolutionLayer(0, fine.feature_dim, labeled, remaining), (), dataset.location_dim, dataset.test)
    models = _init_models(ds, config, [0])
    curves = _descend(ds, config, models, {}, {})
    res = _result(ds, config, models, {}, curves, started, pseudo_labels=int(rows.size), gated=gated, fallback=False)
    res.train_accuracy = evaluate(res.fine, fine.labeled)
    res.models[k] = coarse_model
    return res


def augment_step(
    coarse_probs: np.ndarray,
    fine_probs: np.ndarray,
    idx: GroupIndex,
    threshold: float,
    cfg: SmaxConfig = SmaxConfig(),
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Agreeing groups as ``(coarse_row, label)`` and ``(fine_row, label)`` additions.

    A group agrees when the coarse prediction and the soft maximum of its
    fine predictions differ by at most ``1 - threshold`` and both are at
    least ``threshold`` confident in the same class. A positive group
    contributes only its most probable fine member; a negative group
    contributes all members.
    """
    if idx.n_groups == 0:
        return [], []
    pooled = group_smax(fine_probs[idx.fine_rows], idx.segments, idx.n_groups, cfg).value
    starts = np.searchsorted(idx.segments, np.arange(idx.n_groups + 1))
    coarse_add, fine_add = [], []
    for g in range(idx.n_groups):
        pc, pf = coarse_probs[idx.coarse_rows[g]], pooled[g]
        if abs(pc - pf) > 1.0 - threshold:
            continue
        conf_c, conf_f = max(pc, 1 - pc), max(pf, 1 - pf)
        if conf_c < threshold or conf_f < threshold or (pc >= 0.5) != (pf >= 0.5):
            continue
        label = int(pc >= 0.5)
        members = idx.fine_rows[starts[g]:starts[g + 1]]
        coarse_add.append((int(idx.coarse_rows[g]), label))
        if label == 1:
            fine_add.append((int(members[np.argmax(fine_probs[members])]), 1))
        else:
            fine_add.extend((int(m), 0) for m in members)
    return coarse_add, fine_add


def _move(layer: ResolutionLayer, additions: list[tuple[int, int]]) -> ResolutionLayer:
    if not additions:
        return layer
    rows = np.array([r for r, _ in additions], dtype=np.intp)
    labels = np.array([y for _, y in additions], dtype=np.int64)
    moved = layer.unlabeled.subset(rows).relabel(labels)
    keep = np.setdiff1d(np.arange(len(layer.unlabeled)), rows)
    return ResolutionLayer(layer.resolution_id, layer.feature_dim, layer.labeled.concat(moved), layer.unlabeled.subset(keep))


def train_augment(dataset: MultiResDataset, config: TrainConfig) -> TrainResult:
    """Grow both labeled sets with unlabeled groups on which the two resolutions agree."""
    if dataset.K < 1:
        raise ValueError("Augment needs at least one coarse resolution")
    started = time.perf_counter()
    config = replace(config, method="Augment")
    fine, coarse = dataset.fine, dataset.coarse[0]
    k = coarse.resolution_id
    sizes = []
    added_last = False
    curves = None
    for it in range(config.augment_max_iters):
        sizes.append([len(fine.labeled), len(coarse.labeled)])
        ds = MultiResDataset(fine, (), dataset.location_dim, dataset.test)
        models = _init_models(ds, config, [0])
        curves = _descend(ds, config, models, {}, {})
        coarse_model = _train_single(coarse, config, dataset.location_dim)
        if len(coarse.unlabeled) == 0:
            added_last = False
            break
        corr = correspond_unlabeled(coarse, fine)
        c_add, f_add = augment_step(
            coarse_model.predict(coarse.unlabeled.features),
            models[0].predict(fine.unlabeled.features),
            corr,
            config.augment_threshold,
            config.smax,
        )
        added_last = bool(c_add or f_add)
        if not added_last:
            break
        coarse = _move(coarse, c_add)
        fine = _move(fine, f_add)
    if added_last:
        sizes.append([len(fine.labeled), len(coarse.labeled)])
        ds = MultiResDataset(fine, (), dataset.location_dim, dataset.test)
        models = _init_models(ds, config, [0])
        curves = _descend(ds, config, models, {}, {})
        coarse_model = _train_single(coarse, config, dataset.location_dim)
    res = _result(ds, config, models, {}, curves, started, labeled_sizes=sizes)
    res.train_accuracy = evaluate(res.fine, dataset.fine.labeled)
    res.models[k] = coarse_model
    return res


def correspond_unlabeled(coarse: ResolutionLayer, fine: ResolutionLayer) -> GroupIndex:
    corr = build_correspondence(coarse, fine)
    return group_index(corr, coarse.unlabeled, fine.unlabeled)
