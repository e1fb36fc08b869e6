"""Command-line entry points: gen, train, eval, sweep, probe, gradcheck.

Exit codes: 0 success, 2 config error, 3 data/checkpoint error, 4 numeric failure.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import load_config
from .datagen import eval_spec, generate_corpus, load_corpus, save_corpus
from .errors import AdvKwsError, ConfigError, DataError, NumericalError
from .evaluation import (DEFAULT_TARGET_FA_PER_HOUR, probe_accuracy, probe_csv,
                         relative_improvement, roc_and_frr, score_utterances, table2_sweep)
from .model import TAP_ORDER, check_params, config_from_params
from .training import gradient_check, train

log = logging.getLogger("advkws")

SWEEP_FIELDS = ("model", "lambda", "real_pos_weight", "seed", "baseline", "frr", "threshold",
                "probe_accuracy", "relative_improvement", "status")


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _corpus_dir(root, sub):
    root = Path(root)
    if (root / sub / "manifest.json").exists():
        return root / sub
    if (root / "manifest.json").exists():
        return root
    raise DataError(f"no corpus found at {root} (looked for {root / sub} and {root})")


# -- gen ---------------------------------------------------------------------------

def cmd_gen(args):
    exp = load_config(args.config)
    spec = exp.corpus if args.seed is None else replace(exp.corpus, seed=args.seed)
    ev = exp.eval_corpus
    out = Path(args.out)
    jobs = {
        "train": spec,
        "eval": eval_spec(spec, ev.seed, ev.n_positive, ev.n_negative),
        "probe": replace(spec, seed=ev.probe_seed, counts=(ev.probe_per_bucket,) * 4),
    }
    for sub, s in jobs.items():
        manifest = out / sub / "manifest.json"
        if manifest.exists():
            try:
                old = json.loads(manifest.read_text()).get("spec_hash")
            except json.JSONDecodeError:
                old = None
            if old != s.spec_hash():
                warnings.warn(f"{manifest}: spec hash changed ({old} -> {s.spec_hash()}); "
                              "regenerating", stacklevel=1)
                log.warning("spec hash mismatch for %s; regenerating", manifest)
        corpus = generate_corpus(s)
        save_corpus(corpus, out / sub)
        log.info("wrote %s corpus (%d examples) to %s", sub, len(corpus), out / sub)
    return 0


# -- train -------------------------------------------------------------------------

def _experiment_train(exp, seed=None):
    cfg = exp.train if seed is None else replace(exp.train, seed=seed)
    return cfg


def cmd_train(args):
    exp = load_config(args.config)
    cfg = _experiment_train(exp, args.seed)
    corpus = load_corpus(_corpus_dir(args.corpus, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(corpus, exp.model, exp.loss, cfg,
                callback=lambda row: log.info("step %(step)d L_sup %(L_sup).4f L_total %(L_total).4f", row))
    checkpoint.save(out / "checkpoint.svdf", res.params)
    if res.head is not None:
        checkpoint.save(out / "head.svdf", res.head)
    _write(out / "train_log.csv", res.log_csv())
    return 0


# -- eval --------------------------------------------------------------------------

def _load_checkpoint(path, exp=None):
    params = checkpoint.load(path)
    if exp is not None:
        check_params(exp.model, params)
    else:
        config_from_params(params)
    return params


def evaluate(params, examples, target):
    scores = score_utterances(params, examples, streaming=True)
    return roc_and_frr(scores, target)


def cmd_eval(args):
    exp = load_config(args.config) if args.config else None
    params = _load_checkpoint(args.checkpoint, exp)
    corpus = load_corpus(_corpus_dir(args.corpus, "eval"))
    examples = corpus.examples(("real_positive", "real_negative"))
    res = evaluate(params, examples, args.target_fah)
    out = Path(args.out)
    _write(out / "roc.csv", res.curve.to_csv())
    summary = {
        "target_fa_per_hour": res.target_fa_per_hour,
        "threshold": res.threshold,
        "fa_per_hour": res.fa_per_hour,
        "frr": res.frr,
        "degenerate": res.degenerate,
        "n_positive": sum(e.labels.positive for e in examples),
        "n_negative": sum(not e.labels.positive for e in examples),
    }
    _write(out / "summary.json", _json(summary))
    print(f"FRR {res.frr:.4f} at threshold {res.threshold:.6f} "
          f"({res.fa_per_hour:.4f} FA/h, target {res.target_fa_per_hour})")
    return 0


# -- sweep ---------------------------------------------------------------------------

def _cell_id(lam, weight, seed):
    tag = "baseline" if lam is None else f"adv_l{lam:.2f}"
    return f"{tag}_w{weight:.2f}_s{seed}"


def _cells(grid):
    for seed in grid.seeds:
        for w in grid.real_pos_weights:
            yield None, w, seed
            for lam in grid.lambdas:
                yield lam, w, seed


def _run_cell(job):
    """Train, evaluate and probe one sweep cell (runs in a worker process)."""
    exp, corpus_root, lam, weight, seed, target = job
    corpus = load_corpus(_corpus_dir(corpus_root, "train"))
    ev = load_corpus(_corpus_dir(corpus_root, "eval")).examples(("real_positive", "real_negative"))
    probe_root = Path(corpus_root) / "probe"
    cfg = replace(exp.train, seed=seed, real_positive_weight=weight, adversarial=lam is not None)
    loss = replace(exp.loss, lam=lam if lam is not None else exp.loss.lam)
    row = {"model": _cell_id(lam, weight, seed), "lambda": lam, "real_pos_weight": weight,
           "seed": seed, "baseline": lam is None}
    try:
        res = train(corpus, exp.model, loss, cfg)
        r = evaluate(res.params, ev, target)
        row.update(frr=r.frr, threshold=r.threshold, status="ok")
        if (probe_root / "manifest.json").exists():
            pr = load_corpus(probe_root).examples()
            row["probe_accuracy"] = probe_accuracy(res.params, TAP_ORDER, pr, exp.probe_seed,
                                                   exp.probe).accuracy
    except AdvKwsError as e:
        row.update(status=f"failed: {type(e).__name__}: {e}")
    return row


def _config_hash(exp, target):
    blob = json.dumps({"corpus": asdict(exp.corpus), "model": asdict(exp.model),
                       "loss": asdict(exp.loss), "train": asdict(exp.train),
                       "probe": asdict(exp.probe), "target": target}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def sweep_rows(cells):
    """Attach relative improvement vs. the matched (weight, seed) baseline."""
    base = {(c["real_pos_weight"], c["seed"]): c.get("frr") for c in cells if c["baseline"]}
    rows = []
    for c in cells:
        c = dict(c)
        if not c["baseline"] and c.get("frr") is not None:
            b = base.get((c["real_pos_weight"], c["seed"]))
            c["relative_improvement"] = (relative_improvement(b, c["frr"])
                                         if b is not None else float("nan"))
        rows.append(c)
    return rows


def _csv(fields, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


def sweep_table(rows, grid):
    """Grid summary: seed-mean FRR per cell plus per-weight averages over lambda."""
    def mean(vals):
        vals = [v for v in vals if v is not None and not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def frr(lam, w):
        return mean([r.get("frr") for r in rows
                     if r["real_pos_weight"] == w and r["lambda"] == lam and r["status"] == "ok"])

    out = []
    for i, w in enumerate(grid.real_pos_weights, 1):
        out.append({"model": f"Baseline {i}", "lambda": "-", "real_pos_weight": w,
                    "frr": frr(None, w), "relative_improvement": None})
    for j, lam in enumerate(grid.lambdas):
        for i, w in enumerate(grid.real_pos_weights, 1):
            f, b = frr(lam, w), frr(None, w)
            out.append({"model": f"Adv. {chr(65 + j)}{i}", "lambda": lam, "real_pos_weight": w,
                        "frr": f, "relative_improvement": relative_improvement(b, f)})
    lo, hi = min(grid.lambdas), max(grid.lambdas)
    for i, w in enumerate(grid.real_pos_weights, 1):
        f = mean([frr(lam, w) for lam in grid.lambdas])
        out.append({"model": f"Averaged {i}", "lambda": f"{lo:g}-{hi:g}", "real_pos_weight": w,
                    "frr": f, "relative_improvement": relative_improvement(frr(None, w), f)})
    return _csv(("model", "lambda", "real_pos_weight", "frr", "relative_improvement"), out)


def run_sweep(exp, corpus_root, out, target=DEFAULT_TARGET_FA_PER_HOUR, workers=1):
    out = Path(out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    chash = _config_hash(exp, target)
    manifest = out / "sweep_manifest.json"
    if manifest.exists() and json.loads(manifest.read_text()).get("config_hash") != chash:
        log.warning("sweep config changed; previously completed cells will be recomputed")
    _write(manifest, _json({"config_hash": chash}))
    todo, rows = [], {}
    for lam, w, seed in _cells(exp.grid):
        cid = _cell_id(lam, w, seed)
        path = cells_dir / f"{cid}.json"
        if path.exists():
            done = json.loads(path.read_text())
            if done.get("config_hash") == chash and done["row"]["status"] == "ok":
                rows[cid] = done["row"]
                continue
        todo.append((exp, str(corpus_root), lam, w, seed, target))
    log.info("%d cells cached, %d to run", len(rows), len(todo))

    def record(row):
        _write(cells_dir / f"{row['model']}.json", _json({"config_hash": chash, "row": row}))
        rows[row["model"]] = row
        log.info("cell %s: %s frr=%s", row["model"], row["status"], row.get("frr"))

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for row in pool.map(_run_cell, todo):
                record(row)
    else:
        for job in todo:
            record(_run_cell(job))
    ordered = sweep_rows([rows[_cell_id(lam, w, s)] for lam, w, s in _cells(exp.grid)])
    _write(out / "sweep.csv", _csv(SWEEP_FIELDS, ordered))
    _write(out / "sweep_table.csv", sweep_table(ordered, exp.grid))
    return ordered


def cmd_sweep(args):
    exp = load_config(args.config)
    rows = run_sweep(exp, args.corpus, args.out, args.target_fah, args.workers)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"cell {r['model']} {r['status']}", file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok; results in {args.out}")
    return NumericalError.exit_code if failed else 0


# -- probe ----------------------------------------------------------------------------

def cmd_probe(args):
    exp = load_config(args.config)
    if "probe" in exp.sections and not exp.probe_taps:
        raise ConfigError("[probe] taps is empty")
    params = _load_checkpoint(args.checkpoint)
    corpus = load_corpus(_corpus_dir(args.corpus, "probe"))
    reports = table2_sweep(params, corpus.examples(), exp.probe_taps, exp.probe_seed, exp.probe)
    _write(Path(args.out) / "probe.csv", probe_csv(reports))
    for r in reports:
        print(f"{r.accuracy * 100:6.1f}%  {' '.join(r.taps)}")
    return 0


# -- gradcheck --------------------------------------------------------------------------

def cmd_gradcheck(args):
    from .training import LossConfig

    seed = 0 if args.seed is None else args.seed
    ok = True
    for lam in args.lambdas:
        rep = gradient_check(seed=seed, loss_cfg=LossConfig(beta=0.3, lam=lam))
        print(f"lambda={lam}: worst relative error {rep.worst:.3e} over {rep.checked} coordinates "
              f"({rep.skipped} skipped at kinks) -> {'PASS' if rep.passed else 'FAIL'}")
        if args.verbose:
            print(rep.format())
        ok &= rep.passed
    return 0 if ok else NumericalError.exit_code


def build_parser():
    p = argparse.ArgumentParser(prog="advkws", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="INI experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out")
        sp.add_argument("--target-fah", type=float, default=DEFAULT_TARGET_FA_PER_HOUR)

    sp = sub.add_parser("gen", help="generate train/eval/probe corpora")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a baseline or adversarial model")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="ROC and FRR at a fixed FA/h")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="lambda x real-positive-weight grid")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe", help="gradient-stop domain probes per tap subset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check on a toy model")
    common(sp, config_required=False)
    sp.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.35, 1.0])
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AdvKwsError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
