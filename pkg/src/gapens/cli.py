"""Command-line entry point: ``gapens <command> ...``.

Commands: inspect, synth, split, train, grid, predict, ensemble, analyze.
Outputs are written atomically; exit code 0 means the artifact was fully written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import ensemble as ens
from ._io import atomic_write_text
from .errors import GapEnsError, IndexMismatch, TooFewLearners
from .models import VARIANTS
from .synthetic import make_corpus, write_corpus
from .training import (
    TrainConfig,
    history_csv,
    load_checkpoint,
    load_dataset,
    load_split,
    make_split,
    predict,
    read_dataset,
    save_checkpoint,
    save_split,
    train,
)

log = logging.getLogger("gapens")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def parse_indices(selector: str | None, n: int) -> list[int]:
    """``path.json:name`` selects one array of a split file; a bare path holds a JSON array."""
    if selector is None:
        return list(range(n))
    path, _, key = selector.partition(":")
    if key and not Path(selector).exists():
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if key not in doc:
            raise ValueError(f"{path} has no array named {key!r}")
        idx = doc[key]
    else:
        idx = json.loads(Path(selector).read_text(encoding="utf-8"))
    idx = [int(i) for i in idx]
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise ValueError(f"index {bad[0]} outside dataset of {n} molecules")
    return idx


def build_config(args) -> TrainConfig:
    doc = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model = dict(doc.get("model", {}))
    if getattr(args, "variant", None):
        model["variant"] = args.variant
    doc["model"] = model
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    return TrainConfig.from_dict(doc)


# --- commands ----------------------------------------------------------------


def cmd_inspect(args) -> int:
    dataset, failures = read_dataset(args.data)
    if len(dataset) == 0 and not failures:
        return _fail(f"{args.data} holds no molecules")
    n_bonds = sum(len(m.bonds) for m in dataset.molecules)
    print(f"molecules {len(dataset)}")
    print(f"bonds {n_bonds}")
    print(f"parse_failures {len(failures)}")
    for f in failures:
        print(f"  row {f.row}: {f.smiles!r} ({f.reason})")
    ys = np.array([t for t in dataset.targets if t is not None])
    if ys.size:
        print(f"targets n={ys.size} min={ys.min():.6f} max={ys.max():.6f} mean={ys.mean():.6f}")
    else:
        print("targets n=0")
    return 0


def cmd_synth(args) -> int:
    rows = make_corpus(args.n, args.seed)
    write_corpus(args.out, rows)
    if args.split_out:
        save_split(args.split_out, make_split(args.n, seed=args.seed))
    print(f"wrote {len(rows)} molecules to {args.out}")
    return 0


def cmd_split(args) -> int:
    dataset = load_dataset(args.data)
    split = make_split(len(dataset), tuple(args.fractions), args.seed)
    save_split(args.out, split)
    print(f"train {len(split.train)} valid {len(split.valid)} test {len(split.test)}")
    return 0


def _train_one(data: str, split_path: str, config: TrainConfig, ckpt_path: str, history_path: str | None) -> float | None:
    dataset = load_dataset(data)
    split = load_split(split_path, len(dataset))
    ckpt, history = train(dataset, split, config)
    save_checkpoint(ckpt_path, ckpt)
    if history_path:
        atomic_write_text(history_path, history_csv(history))
    return history[-1].valid_mae


def cmd_train(args) -> int:
    config = build_config(args)
    valid_mae = _train_one(args.data, args.split, config, args.out_checkpoint, args.out_history)
    shown = "none" if valid_mae is None else f"{valid_mae:.6f}"
    print(f"variant {config.model.variant} seed {config.seed} final valid_mae={shown}")
    return 0


def _grid_job(data, split_path, config_dict, ckpt, hist, pred_path, subset):
    config = TrainConfig.from_dict(config_dict)
    valid_mae = _train_one(data, split_path, config, ckpt, hist)
    dataset = load_dataset(data)
    split = load_split(split_path, len(dataset))
    indices = getattr(split, subset)
    ens.write_predictions(pred_path, indices, predict(load_checkpoint(ckpt), dataset, indices))
    return valid_mae


def cmd_grid(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = build_config(args)
    runs = []
    for variant in args.variants:
        for seed in args.seeds:
            cfg = base.to_dict()
            cfg["seed"] = seed
            cfg["model"]["variant"] = variant
            stem = out / f"{variant}_s{seed}"
            runs.append({
                "variant": variant,
                "seed": seed,
                "checkpoint": f"{stem}.ckpt.json",
                "history": f"{stem}.history.csv",
                "prediction": f"{stem}.pred.csv",
                "config": cfg,
            })
    jobs = [(args.data, args.split, r["config"], r["checkpoint"], r["history"], r["prediction"], args.predict_on)
            for r in runs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_grid_job, *zip(*jobs)))
    else:
        results = [_grid_job(*j) for j in jobs]

    manifest = {
        "data": args.data,
        "split": args.split,
        "predict_on": args.predict_on,
        "runs": [{k: r[k] for k in ("variant", "seed", "checkpoint", "prediction")} | {"valid_mae": v}
                 for r, v in zip(runs, results)],
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    for r, v in zip(runs, results):
        print(f"{r['variant']} seed {r['seed']} valid_mae={v if v is None else f'{v:.6f}'}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, args.variant)
    dataset, failures = read_dataset(args.data)
    if failures:
        return _fail(f"{len(failures)} unparseable row(s) in {args.data}, first at row {failures[0].row}")
    indices = parse_indices(args.indices, len(dataset))
    ens.write_predictions(args.out, indices, predict(ckpt, dataset, indices))
    print(f"wrote {len(indices)} predictions to {args.out}")
    return 0


def cmd_ensemble(args) -> int:
    m = ens.load_prediction_files(args.preds)
    ens.write_ensemble(args.out, m)
    print(f"ensembled {m.num_learners} learner(s) over {m.values.shape[1]} molecules into {args.out}")
    return 0


def cmd_analyze(args) -> int:
    idx, mean, std = ens.read_ensemble(args.ensemble)
    if std is None:
        raise TooFewLearners("ensemble file has no spread column; need >= 2 learners")
    dataset = load_dataset(args.data)
    if args.indices is not None:
        wanted = parse_indices(args.indices, len(dataset))
        pos = {int(i): k for k, i in enumerate(idx)}
        missing = [i for i in wanted if i not in pos]
        if missing:
            raise IndexMismatch(f"ensemble file lacks index {missing[0]}")
        sel = np.array([pos[i] for i in wanted], dtype=np.int64)
        idx, mean, std = idx[sel], mean[sel], std[sel]
    if np.any((idx < 0) | (idx >= len(dataset))):
        raise IndexMismatch("ensemble indices fall outside the dataset")
    targets = dataset.target_array(idx.tolist())
    err = np.abs(mean - targets)

    bins = ens.bin_by_uncertainty(std, err, args.bins)
    zero_var = False
    try:
        r_raw = ens.pearson(std, err)
    except GapEnsError:
        r_raw, zero_var = None, True
    full = [b for b in bins if b.count]
    try:
        r_bin = ens.pearson([b.mean_uncertainty for b in full], [b.mean_abs_error for b in full]) if len(full) >= 2 else None
    except GapEnsError:
        r_bin = None

    ens_mae = float(err.mean())
    indiv = None
    if args.preds:
        m = ens.load_prediction_files(args.preds)
        if not set(idx.tolist()) <= set(m.indices.tolist()):
            raise IndexMismatch("per-learner files do not cover the analysed molecules")
        pos = {int(i): k for k, i in enumerate(m.indices)}
        cols = np.array([pos[int(i)] for i in idx])
        sub = ens.PredictionMatrix(m.learner_labels, m.values[:, cols], idx)
        indiv = ens.ensemble_mae_bound_check(sub, targets).mean_individual_mae

    atomic_write_text(args.out_report, ens.report_csv(bins))
    summary_path = args.out_summary or f"{args.out_report}.summary.txt"
    line = ens.summary_line(r_raw, r_bin, ens_mae, indiv, zero_var)
    atomic_write_text(summary_path, line + "\n")
    print(line)
    return 0


# --- parser ------------------------------------------------------------------


def _add_train_flags(p, single: bool) -> None:
    p.add_argument("--data", required=True, help="CSV with header smiles,homolumogap")
    p.add_argument("--split", required=True, help="JSON split file with train/valid/test arrays")
    p.add_argument("--config", help="JSON TrainConfig; flags below override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    if single:
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gapens", description="GNN weak learners, ensembles and uncertainty for gap regression")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="summarize a dataset file")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic SMILES corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split-out", dest="split_out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a seeded random split file")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one weak learner")
    _add_train_flags(p, single=True)
    p.add_argument("--out-checkpoint", dest="out_checkpoint", required=True)
    p.add_argument("--out-history", dest="out_history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="train every variant x seed and predict one split subset")
    _add_train_flags(p, single=False)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--predict-on", dest="predict_on", choices=("train", "valid", "test"), default="valid")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("predict", help="write index,prediction CSV from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", help="split.json:valid or a JSON array file; default all rows")
    p.add_argument("--variant", choices=VARIANTS, help="require the checkpoint to hold this variant")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="average per-learner prediction files")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("analyze", help="uncertainty vs error report for an ensemble file")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--preds", nargs="*", help="per-learner files, for the mean individual MAE")
    p.add_argument("--out-report", dest="out_report", required=True)
    p.add_argument("--out-summary", dest="out_summary")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GapEnsError, OSError, ValueError, KeyError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
