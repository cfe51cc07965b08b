"""Experiment harness and command line.

Commands::

    pmlgan run --config <path> [--seed N] [--variant V] [--beta B] [--out DIR]
    pmlgan corrupt --in <path> --format F --target-cl C --seed N --out <path>
    pmlgan eval --scores <csv> --truth <path>
    pmlgan compare --table <csv> --metric M --baseline V
    pmlgan gradcheck

Exit codes: 0 success, 1 usage error, 2 run failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, metrics
from .model import predict
from .train import (
    TrainConfig,
    TrainingDiverged,
    config_from_mapping,
    make_variant,
    parse_config_text,
    select_beta,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_VERIFY = 0, 1, 2, 3

METRICS = ("hamming_loss", "ranking_loss", "one_error", "average_precision")
COLUMNS = (
    "row_type", "dataset", "c", "realized_avg_cl", "variant", "repeat", "seed", "beta",
    "n_test", *METRICS, *(f"{m}_std" for m in METRICS), "n_runs", "status", "message",
    "seconds",
)
# wall-clock columns sit outside the determinism contract
NONDETERMINISTIC_COLUMNS = ("seconds",)


@dataclass
class ExperimentSpec:
    dataset: str = "synthetic"        # "synthetic" or a file path
    format: str = "dense_csv"
    synthetic_n: int = 2000
    synthetic_d: int = 20
    synthetic_labels: int = 8
    synthetic_avg_labels: float = 3.0
    max_classes: int = 15
    targets: tuple = (5,)             # candidate-count targets c; empty = no corruption
    variants: tuple = ("PML-GAN",)
    repeats: int = 10
    split_ratio: float = 0.8
    seed: int = 0
    out: str = "results"
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.targets = tuple(int(c) for c in self.targets)
        self.variants = tuple(self.variants)
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.dataset == "synthetic" and not self.targets:
            raise ValueError("synthetic experiments need at least one corruption target")
        for v in self.variants:
            make_variant(v)

    @property
    def dataset_name(self) -> str:
        return "synthetic" if self.dataset == "synthetic" else Path(self.dataset).stem


_SPEC_KEYS = {f.name for f in dataclasses.fields(ExperimentSpec)} - {"train"}


def spec_from_text(text: str, overrides: dict | None = None) -> ExperimentSpec:
    """Parse a ``key = value`` document holding experiment and training keys together."""
    values = parse_config_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    spec_vals, train_vals = {}, {}
    types = {f.name: f.type for f in dataclasses.fields(ExperimentSpec)}
    for key, raw in values.items():
        if key not in _SPEC_KEYS:
            train_vals[key] = raw
            continue
        if not isinstance(raw, str):
            spec_vals[key] = raw
        elif key in ("targets", "variants"):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            spec_vals[key] = tuple(int(v) for v in items) if key == "targets" else tuple(items)
        elif types[key] == "int":
            spec_vals[key] = int(raw)
        elif types[key] == "float":
            spec_vals[key] = float(raw)
        else:
            spec_vals[key] = raw
    if "seed" in spec_vals:
        train_vals.setdefault("seed", spec_vals["seed"])
    return ExperimentSpec(train=config_from_mapping(train_vals), **spec_vals)


def load_source(spec: ExperimentSpec) -> data.MultiLabelDataset:
    if spec.dataset == "synthetic":
        return data.make_synthetic(spec.synthetic_n, spec.synthetic_d, spec.synthetic_labels,
                                   spec.synthetic_avg_labels, seed=spec.seed)
    ds = data.load_dataset(spec.dataset, spec.format)
    return data.filter_labels(ds, spec.max_classes)


def _cell_seed(spec: ExperimentSpec, repeat: int) -> int:
    # matched across variants and targets so runs pair up for t-tests
    return spec.seed * 1000 + repeat


def run_cell(spec: ExperimentSpec, source: data.MultiLabelDataset, c, variant: str,
             repeat: int) -> dict:
    seed = _cell_seed(spec, repeat)
    row = {"row_type": "run", "dataset": spec.dataset_name, "c": "" if c is None else c,
           "variant": variant, "repeat": repeat, "seed": seed}
    start = time.perf_counter()
    try:
        train_set, test_set = data.split(source, spec.split_ratio, np.random.default_rng(seed))
        if c is not None:
            if train_set.Y_true is None:
                train_set = dataclasses.replace(train_set, Y_true=train_set.Y.copy())
            train_set = data.inject_noise(train_set, c, seed=seed)
        train_set, test_set = data.normalize_features(train_set, test_set)
        truth = test_set.Y_true if test_set.Y_true is not None else test_set.Y
        cfg = dataclasses.replace(spec.train, variant=variant, seed=seed)
        sel = select_beta(train_set, cfg)
        report = metrics.evaluate(predict(sel.model, test_set.X), truth)
        row.update(report.as_row())
        row.update(beta=sel.best_beta, realized_avg_cl=train_set.avg_candidates(),
                   n_test=report.n_instances, status="ok", message="")
        del row["n_instances"]
    except (TrainingDiverged, ValueError, FloatingPointError) as exc:
        row.update(status="failed", message=str(exc))
    row["seconds"] = round(time.perf_counter() - start, 3)
    return row


def _cell_job(args):
    return run_cell(*args)


def summarize(rows: list[dict]) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        if r["row_type"] == "run" and r.get("status") == "ok":
            groups[(r["dataset"], r["c"], r["variant"])].append(r)
    out = []
    for (ds, c, variant), rs in groups.items():
        s = {"row_type": "summary", "dataset": ds, "c": c, "variant": variant,
             "n_runs": len(rs), "status": "ok",
             "realized_avg_cl": float(np.mean([r["realized_avg_cl"] for r in rs]))}
        for m in METRICS:
            vals = np.array([r[m] for r in rs], dtype=float)
            s[m] = float(vals.mean())
            s[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(s)
    return out


def run_experiment(spec: ExperimentSpec, out_path: Path | None = None) -> list[dict]:
    """Every (c, variant, repeat) cell plus per-(c, variant) mean/std rows."""
    source = load_source(spec)
    targets = spec.targets or (None,)
    jobs = [(spec, source, c, v, r) for c in targets for v in spec.variants
            for r in range(spec.repeats)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(_cell_job, jobs))
    else:
        rows = [_cell_job(j) for j in jobs]
    rows += summarize(rows)
    if out_path is not None:
        write_table(rows, out_path)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_table(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(col)) for col in COLUMNS])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare_runs(rows: list[dict], baseline: str, metric: str) -> dict:
    """Win/tie/loss of each variant against ``baseline`` over (dataset, c) cells."""
    if metric not in metrics.LOWER_IS_BETTER:
        raise ValueError(f"unknown metric {metric!r}")
    lower = metrics.LOWER_IS_BETTER[metric]
    cells = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        if r["row_type"] != "run" or r.get("status") != "ok":
            continue
        cells[(r["dataset"], str(r["c"]))][r["variant"]][str(r["seed"])] = float(r[metric])
    counts = {}
    for key, by_variant in sorted(cells.items()):
        if baseline not in by_variant:
            raise ValueError(f"cell {key} has no runs for baseline {baseline!r}")
        base = by_variant[baseline]
        for variant, runs in by_variant.items():
            if variant == baseline:
                continue
            if set(runs) != set(base):
                raise ValueError(f"cell {key}: {variant} and {baseline} runs are not paired")
            seeds = sorted(base, key=int)
            outcome = metrics.paired_t_test([runs[s] for s in seeds], [base[s] for s in seeds],
                                            lower_is_better=lower)
            counts.setdefault(variant, {"win": 0, "tie": 0, "loss": 0})[outcome] += 1
    return counts


# ---------------------------------------------------------------------------
# command line

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmlgan", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment described by a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--variant")
    r.add_argument("--beta", type=float)
    r.add_argument("--out")

    c = sub.add_parser("corrupt", help="add random irrelevant candidate labels")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--format", default="dense_csv", choices=["dense_csv", "sparse_svm"])
    c.add_argument("--target-cl", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--scores", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--format", default="dense_csv", choices=["dense_csv", "sparse_svm"])

    m = sub.add_parser("compare", help="win/tie/loss table from a results CSV")
    m.add_argument("--table", required=True)
    m.add_argument("--metric", required=True, choices=list(METRICS))
    m.add_argument("--baseline", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    overrides = {"seed": args.seed, "beta": args.beta, "out": args.out,
                 "variants": args.variant}
    try:
        spec = spec_from_text(Path(args.config).read_text(), overrides)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    out = Path(spec.out)
    rows = run_experiment(spec, out / "results.csv")
    failed = sum(r.get("status") == "failed" for r in rows)
    print(f"wrote {out / 'results.csv'} ({len(rows)} rows, {failed} failed runs)")
    return EXIT_RUN if failed else EXIT_OK


def _cmd_corrupt(args) -> int:
    ds = data.load_dataset(args.inp, args.format)
    ds = dataclasses.replace(ds, Y_true=ds.Y.copy())
    noisy = data.inject_noise(ds, args.target_cl, seed=args.seed)
    data.save_dense_csv(noisy, args.out)
    print(f"avg candidates {ds.avg_candidates():.4f} -> {noisy.avg_candidates():.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    scores = np.loadtxt(args.scores, delimiter=",", ndmin=2)
    truth = data.load_dataset(args.truth, args.format).Y
    report = metrics.evaluate(scores, truth)
    row = report.as_row()
    print(",".join(row))
    print(",".join(_fmt(v) for v in row.values()))
    return EXIT_OK


def _cmd_compare(args) -> int:
    counts = compare_runs(read_table(args.table), args.baseline, args.metric)
    print("variant,win,tie,loss")
    for variant, c in sorted(counts.items()):
        print(f"{variant},{c['win']},{c['tie']},{c['loss']}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .verify import run_gradchecks

    results = run_gradchecks(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.error:.3e} {r.name}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


COMMANDS = {"run": _cmd_run, "corrupt": _cmd_corrupt, "eval": _cmd_eval,
            "compare": _cmd_compare, "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"pmlgan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pmlgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"pmlgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUN if args.command == "run" else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
