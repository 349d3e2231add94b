"""Command-line harness for the multi-resolution experiments.

Every command accepts ``--config FILE`` with a JSON object whose keys mirror
the long flag names (``batch_size`` or ``batch-size``); flags given on the
command line win. A ``synth`` object in the config file overrides the
synthetic generator settings used when no ``--data-dir`` is given.

Exit status is 0 on success, 1 on data or runtime errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .consistency import AttentionParams, SmaxConfig, group_attention_weights
from .data import (
    DataError,
    MultiResDataset,
    SynthConfig,
    nested_sample,
    read_dataset,
    generate_synthetic,
    write_dataset,
)
from .models import load_checkpoint, read_params, save_checkpoint, write_params
from .numcore import Tensor
from .trainer import (
    METHODS,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    canonical_method,
    correspondences,
    cross_validate_lambda,
    train,
    write_metrics,
)

log = logging.getLogger("multires")

MULTIRES = ("MultiResMIL", "MultiResAttention")

DEFAULTS = {
    "data_dir": None,
    "out": None,
    "method": None,
    "seeds": None,
    "lambda": "cv",
    "lr": 0.1,
    "epochs": 300,
    "batch_size": 0,
    "smax_base": math.e,
    "consistency_reduce": "mean",
    "model": "mlp1",
    "hidden_dim": 8,
    "budgets": "20,200,900",
    "folds": 5,
    "checkpoint": None,
}


class UsageError(Exception):
    pass


# -- running -----------------------------------------------------------------


@dataclass(frozen=True)
class RunOptions:
    """Training settings shared by every run of a command.

    ``lambdas`` of None means pick lambda by cross-validation per run.
    """

    base: TrainConfig = field(default_factory=lambda: TrainConfig(model="mlp1"))
    lambdas: tuple[float, ...] | None = None
    folds: int = 5


def run_method(ds: MultiResDataset, method: str, seed: int, opts: RunOptions) -> TrainResult:
    cfg = replace(opts.base, method=method, seed=seed)
    scores = None
    if method in MULTIRES:
        if opts.lambdas is None:
            lam, scores = cross_validate_lambda(ds, cfg, folds=opts.folds)
        else:
            lam = opts.lambdas
        cfg = replace(cfg, lambdas=lam)
    res = train(ds, cfg)
    if scores is not None:
        res.extra["cv_scores"] = {",".join(map(repr, k)): v for k, v in scores.items()}
    return res


@dataclass
class Row:
    label: tuple[str, ...]
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def compare(datasets, methods, seeds, opts: RunOptions) -> tuple[list[Row], list[TrainResult]]:
    """Run every method on every seed; ``datasets(seed)`` supplies the data.

    Rows come back sorted by mean accuracy, best first; equal means keep the
    order of ``methods``.
    """
    acc = {m: [] for m in methods}
    results = []
    for seed in seeds:
        ds = datasets(seed)
        for m in methods:
            try:
                res = run_method(ds, m, seed, opts)
            except (ValueError, TrainingDiverged) as err:
                raise RuntimeError(f"{m} failed for seed {seed}: {err}") from err
            log.info("%s seed=%d lambda=%s test=%.4f", m, seed, res.lambdas, res.test_accuracy)
            acc[m].append(res.test_accuracy)
            results.append(res)
    rows = [Row((m,), acc[m]) for m in methods]
    return sorted(rows, key=lambda r: -r.mean), results


def sweep_labels(datasets, budgets, methods, seeds, opts: RunOptions) -> list[Row]:
    """Accuracy per (budget, method) with nested fine label subsets per seed."""
    acc = {(b, m): [] for b in budgets for m in methods}
    for seed in seeds:
        ds = datasets(seed)
        pool = ds.fine.labeled
        subsets = nested_sample(len(pool), sorted(budgets), np.random.default_rng([seed, 7]))
        by_budget = dict(zip(sorted(budgets), subsets))
        for b in budgets:
            sub = ds.with_fine_labeled(pool.subset(by_budget[b]))
            for m in methods:
                res = run_method(sub, m, seed, opts)
                log.info("budget=%d %s seed=%d test=%.4f", b, m, seed, res.test_accuracy)
                acc[b, m].append(res.test_accuracy)
    return [Row((str(b), m), acc[b, m]) for b in budgets for m in methods]


def model_complexity(datasets, seeds, opts: RunOptions) -> list[Row]:
    rows = []
    for kind in ("logreg", "mlp1"):
        o = replace(opts, base=replace(opts.base, model=kind))
        for m in ("OnlyFine", "MultiResAttention"):
            acc = [run_method(datasets(s), m, s, o).test_accuracy for s in seeds]
            rows.append(Row((kind, m), acc))
    return rows


def format_table(header: list[str], rows: list[Row]) -> tuple[str, str]:
    """Text and CSV renderings built from the same formatted numbers."""
    cells = [[*r.label, f"{r.mean:.6f}", f"{r.std:.6f}", str(len(r.accuracies))] for r in rows]
    cols = [*header, "mean", "std", "n"]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    writer.writerows(cells)
    return "\n".join(lines) + "\n", buf.getvalue()


# -- attention export --------------------------------------------------------


def save_run(res: TrainResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics([res], out / "metrics.json")
    for k, m in res.models.items():
        save_checkpoint(m, out / f"model-{k}.txt")
    for k, a in res.attention.items():
        write_params(out / f"attention-{k}.txt", a.describe(), a.params)


def attention_rows(run_dir: Path, ds: MultiResDataset) -> dict[int, list[list]]:
    """Attention weight of every unlabeled fine instance within its coarse group."""
    files = sorted(run_dir.glob("attention-*.txt"))
    if not files:
        raise DataError(f"{run_dir} holds no attention parameters; train with MultiResAttention")
    fine_model = load_checkpoint(run_dir / "model-0.txt")
    corr = correspondences(ds)
    out = {}
    for path in files:
        k = int(path.stem.split("-")[1])
        descriptor, params = read_params(path)
        att = AttentionParams.from_descriptor(descriptor, params)
        coarse_model = load_checkpoint(run_dir / f"model-{k}.txt")
        idx = corr[k]
        layer = ds.coarse_layer(k)
        hf = fine_model.hidden(ds.fine.unlabeled.features[idx.fine_rows])
        hc = coarse_model.hidden(layer.unlabeled.features[idx.coarse_rows])
        a = group_attention_weights(Tensor(hf), Tensor(hc), idx.segments, idx.n_groups, att.bind()).value
        fine = ds.fine.unlabeled
        cids = layer.unlabeled.ids[idx.coarse_rows][idx.segments]
        out[k] = [
            [int(c), int(fine.ids[r]), *fine.locations[r].tolist(), float(w)]
            for c, r, w in zip(cids, idx.fine_rows, a)
        ]
    return out


def write_attention_csv(rows: list[list], location_dim: int, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["coarse_id", "fine_id", *(f"loc{i}" for i in range(location_dim)), "attention_weight"])
        for row in rows:
            writer.writerow([row[0], row[1], *(format(v, ".17g") for v in row[2:])])


# -- argument handling -------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys mirror the flags")
    common.add_argument("--data-dir", help="directory of CSV files; synthetic data per seed if omitted")
    common.add_argument("--out", help="output directory (file for export-attention)")
    common.add_argument("--method", help="method name, or a comma list for compare/sweep-labels")
    common.add_argument("--seeds", help="comma list of integer seeds")
    common.add_argument("--lambda", dest="lambda", help="'cv' or comma list of lambda values per coarse layer")
    common.add_argument("--lr", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--smax-base", type=float)
    common.add_argument("--consistency-reduce", choices=("mean", "sum"))
    common.add_argument("--model", choices=("logreg", "mlp1"))
    common.add_argument("--hidden-dim", type=int)
    common.add_argument("--budgets", help="comma list of fine label budgets")
    common.add_argument("--folds", type=int)
    common.add_argument("--checkpoint", help="run directory written by train (export-attention)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="multires", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("generate", "write a seeded synthetic dataset as CSV files"),
        ("train", "train one method and write metrics and checkpoints"),
        ("compare", "mean and std test accuracy per method over seeds"),
        ("sweep-labels", "accuracy against the fine label budget"),
        ("model-complexity", "logreg/mlp1 against OnlyFine/MultiResAttention"),
        ("export-attention", "attention weights of a trained run as CSV"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    return p


def _settings(args: argparse.Namespace) -> dict:
    merged = dict(DEFAULTS)
    synth = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key == "synth":
                synth.update(value)
            elif key in merged:
                merged[key] = value
            else:
                raise UsageError(f"unknown config key {key!r}")
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    merged["synth"] = synth
    return merged


def _int_list(text, what: str) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as err:
        raise UsageError(f"bad {what}: {text!r}") from err


def _methods(text, default) -> list[str]:
    if text is None:
        return list(default)
    names = text if isinstance(text, list) else str(text).split(",")
    try:
        return [canonical_method(n.strip()) for n in names]
    except ValueError as err:
        raise UsageError(str(err)) from err


def _options(s: dict) -> RunOptions:
    lam = s["lambda"]
    if isinstance(lam, str) and lam.strip().lower() == "cv":
        lambdas = None
    else:
        try:
            vals = lam if isinstance(lam, list) else [lam] if isinstance(lam, (int, float)) else lam.split(",")
            lambdas = tuple(float(v) for v in vals)
        except ValueError as err:
            raise UsageError(f"bad lambda: {lam!r}") from err
    try:
        base = TrainConfig(
            lambdas=lambdas or (1.0,),
            lr=float(s["lr"]),
            epochs=int(s["epochs"]),
            batch_size=int(s["batch_size"]),
            smax=SmaxConfig(float(s["smax_base"])),
            consistency_reduce=s["consistency_reduce"],
            model=s["model"],
            hidden_dim=int(s["hidden_dim"]),
        )
    except (ValueError, TypeError) as err:
        raise UsageError(str(err)) from err
    if int(s["folds"]) < 2:
        raise UsageError("--folds must be at least 2")
    return RunOptions(base, lambdas, int(s["folds"]))


def _data_source(s: dict, n_fine_labeled: int | None = None):
    if s["data_dir"]:
        ds = read_dataset(s["data_dir"])
        return lambda seed: ds
    try:
        cfg = SynthConfig(**s["synth"])
    except (TypeError, DataError) as err:
        raise UsageError(f"bad synth config: {err}") from err
    if n_fine_labeled is not None:
        cfg = replace(cfg, n_fine_labeled=n_fine_labeled)
    cache = {}

    def datasets(seed):
        if seed not in cache:
            cache.clear()
            cache[seed] = generate_synthetic(cfg, seed)
        return cache[seed]

    return datasets


def _require_out(s: dict) -> Path:
    if not s["out"]:
        raise UsageError("--out is required")
    return Path(s["out"])


def _emit_table(out: Path, stem: str, header: list[str], rows: list[Row]) -> None:
    text, table = format_table(header, rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    (out / f"{stem}.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(text)


def _dispatch(cmd: str, s: dict) -> None:
    seeds = _int_list(s["seeds"], "seeds") if s["seeds"] is not None else None
    if cmd == "generate":
        out = _require_out(s)
        seed = seeds[0] if seeds else 0
        datasets = _data_source({**s, "data_dir": None})
        for p in write_dataset(datasets(seed), out):
            print(p)
        return

    opts = _options(s)
    if cmd == "train":
        out = _require_out(s)
        methods = _methods(s["method"], ["MultiResAttention"])
        if len(methods) != 1:
            raise UsageError("train takes a single --method")
        seed = seeds[0] if seeds else 0
        res = run_method(_data_source(s)(seed), methods[0], seed, opts)
        save_run(res, out)
        print(f"{res.method} seed={seed} lambda={list(res.lambdas)} test_accuracy={res.test_accuracy}")
        return

    if seeds is None:
        seeds = [0, 1, 2, 3, 4]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    if cmd == "compare":
        out = _require_out(s)
        rows, results = compare(_data_source(s), _methods(s["method"], METHODS), seeds, opts)
        _emit_table(out, "compare", ["method"], rows)
        write_metrics(results, out / "metrics.json")
    elif cmd == "sweep-labels":
        out = _require_out(s)
        budgets = _int_list(s["budgets"], "budgets")
        if not budgets or min(budgets) < 1:
            raise UsageError("--budgets must be positive integers")
        source = _data_source(s, None if s["data_dir"] else max(budgets))
        rows = sweep_labels(source, budgets, _methods(s["method"], METHODS), seeds, opts)
        _emit_table(out, "sweep", ["budget", "method"], rows)
    elif cmd == "model-complexity":
        out = _require_out(s)
        rows = model_complexity(_data_source(s), seeds, opts)
        _emit_table(out, "complexity", ["model", "method"], rows)
    elif cmd == "export-attention":
        out = _require_out(s)
        if not s["checkpoint"]:
            raise UsageError("--checkpoint is required")
        ds = _data_source(s)(seeds[0])
        per_layer = attention_rows(Path(s["checkpoint"]), ds)
        for k, rows in per_layer.items():
            path = out if len(per_layer) == 1 else out.with_name(f"{out.stem}-{k}{out.suffix}")
            path.parent.mkdir(parents=True, exist_ok=True)
            write_attention_csv(rows, ds.location_dim, path)
            print(path)


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        _dispatch(args.command, _settings(args))
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"multires: error: {err}", file=sys.stderr)
        return 2
    except (OSError, DataError, ValueError, RuntimeError) as err:
        print(f"multires: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
