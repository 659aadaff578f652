"""Command-line harness: ``adacs <command> --config <path> [options]``.

Commands are ``synth``, ``train``, ``eval``, ``compare``, ``gradcheck`` and
``gridsearch``. Exit codes: 0 success, 1 config error, 2 runtime abort,
3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, dump_config, load_config
from .estimators import forward_displacement, forward_score, load_checkpoint, save_checkpoint
from .field_core import ShapeError
from .ingestion import FormatError, write_pgm
from .metrics import detection_auc, endpoint_error, evaluate_pair, paired_ttest
from .synthetic import generate_dataset, load_dataset, save_dataset
from .training import TrainingAborted, phase_for_epoch, run_training, stack_pairs

log = logging.getLogger("adacs")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
EVAL_COLUMNS = ("pair_id", "method", "dsc", "hd", "asd", "epe")
METRICS = ("dsc", "hd", "asd", "epe")


def workers():
    raw = os.environ.get("ADACS_WORKERS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADACS_WORKERS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ADACS_WORKERS must be a positive integer, got {n}")
    return n


def _map(fn, jobs):
    """Run ``fn`` over ``jobs`` on up to ADACS_WORKERS processes, results in job order."""
    n = min(workers(), len(jobs))
    if n <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def load_data(cfg):
    if cfg.data_dir is not None:
        if not (Path(cfg.data_dir) / "manifest.txt").is_file():
            raise FileNotFoundError(f"no dataset manifest under {cfg.data_dir}")
        return load_dataset(cfg.data_dir)
    return generate_dataset(cfg.synth, cfg.count, cfg.split)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


# -- evaluation -----------------------------------------------------------------------

def evaluate_pairs(params, spec, pairs, method):
    """Per-pair dicts with the :data:`EVAL_COLUMNS` keys."""
    if spec.head != "displacement":
        raise ShapeError(f"checkpoint head is {spec.head!r}; evaluation needs a displacement estimator")
    if spec.kind == "direct" and pairs and tuple(spec.shape) != pairs[0].src.shape:
        raise ShapeError(f"checkpoint grid {spec.shape} does not match data {pairs[0].src.shape}")
    src, tgt = stack_pairs(pairs)
    u, _ = forward_displacement(params, spec, src, tgt)
    rows = []
    for field, pair in zip(u, pairs):
        rep = evaluate_pair(field, pair.mask_s, pair.mask_t)
        epe = endpoint_error(field, pair.u_gt) if pair.u_gt is not None else math.nan
        rows.append({"pair_id": pair.pair_id, "method": method, "dsc": rep.dsc,
                     "hd": rep.hd, "asd": rep.asd, "epe": epe})
    return rows


def summary_row(rows, method):
    row = {"pair_id": "mean", "method": method}
    for k in METRICS:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        row[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else math.nan
    return row


def score_localization(score_params, score_spec, pairs):
    """Per-pair mean score inside/outside the nuisance mask and the (1 - S) detection AUC."""
    _, tgt = stack_pairs(pairs)
    s, _ = forward_score(score_params, score_spec, tgt)
    out = []
    for si, pair in zip(s, pairs):
        nz = pair.nuisance
        if nz is None or not nz.any() or nz.all():
            out.append((pair.pair_id, math.nan, math.nan, math.nan))
            continue
        out.append((pair.pair_id, float(si[nz].mean()), float(si[~nz].mean()), detection_auc(1.0 - si, nz)))
    return out


# -- commands -------------------------------------------------------------------------

def cmd_synth(cfg):
    if cfg.synth is None:
        raise ConfigError("synth needs synthetic generator settings, not data_dir")
    splits = generate_dataset(cfg.synth, cfg.count, cfg.split)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    save_dataset(cfg.out, splits)
    print(f"wrote {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])} "
          f"train/val/test pairs to {cfg.out}")
    return EXIT_OK


def _score_exporter(cfg, out, pairs):
    """Epoch callback writing the score map of the first pair every ``score_every`` epochs."""
    if not pairs:
        return None
    pair = pairs[0]
    directory = Path(out) / "scores"

    def callback(epoch, state, record):
        if state.score is None or (epoch + 1) % cfg.score_every:
            return
        if not phase_for_epoch(epoch, cfg.train.warmup).flag_score:
            return
        directory.mkdir(parents=True, exist_ok=True)
        s, _ = forward_score(state.score.params, state.score.spec, pair.tgt)
        write_pgm(s, directory / f"epoch{epoch + 1:04d}_{pair.pair_id}.pgm")
    return callback


def train_one(cfg, splits, out=None):
    callback = _score_exporter(cfg, out, splits["val"] or splits["train"]) if out else None
    result = run_training(cfg.train, splits["train"], splits["val"], callback=callback)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        result.history.write_csv(out / "history.csv")
        save_checkpoint(out / "checkpoint.adcs", result.best_disp, result.state.disp.spec)
        if result.state.score is not None:
            save_checkpoint(out / "score.adcs", result.state.score.params, result.state.score.spec)
        (out / "config.txt").write_text(dump_config(cfg))
    return result


def cmd_train(cfg):
    splits = load_data(cfg)
    result = train_one(cfg, splits, cfg.out)
    print(f"history and checkpoint written to {cfg.out}")
    print(f"best validation Dice: {result.best_val_dice:.4f} (epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(cfg):
    splits = load_data(cfg)
    path = cfg.checkpoint or Path(cfg.out) / "checkpoint.adcs"
    params, spec = load_checkpoint(path)
    pairs = splits[cfg.eval_split]
    if not pairs:
        raise ValueError(f"split {cfg.eval_split!r} is empty")
    rows = evaluate_pairs(params, spec, pairs, cfg.train.method)
    rows.append(summary_row(rows, cfg.train.method))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    _write_csv(Path(cfg.out) / "eval.csv", EVAL_COLUMNS, [[_fmt(r[k]) for k in EVAL_COLUMNS] for r in rows])
    s = rows[-1]
    print(f"{len(pairs)} {cfg.eval_split} pairs: dsc {s['dsc']:.4f} hd {s['hd']:.3f} "
          f"asd {s['asd']:.3f} epe {s['epe']:.3f}")
    return EXIT_OK


def _compare_job(job):
    cfg, splits, method, seed = job
    run_cfg = replace(cfg, train=replace(cfg.train, method=method, seed=seed))
    result = train_one(run_cfg, splits)
    rows = evaluate_pairs(result.best_disp, result.state.disp.spec, splits["test"], method)
    loc = None
    if result.state.score is not None:
        loc = score_localization(result.state.score.params, result.state.score.spec, splits["test"])
    return rows, loc, result.history


def pick_reference(means, requested="auto"):
    """Reference method for the t-tests: the best non-AdaCS mean Dice unless set."""
    if requested != "auto":
        return requested
    others = [m for m in means if m != "adacs"] or list(means)
    return max(others, key=lambda m: (means[m], -others.index(m)))


def compare(cfg, splits):
    """Train every method for every seed; returns the per-pair rows, summary rows and localization rows."""
    if len(cfg.methods) < 2:
        raise ConfigError("compare needs at least two methods")
    if len(splits["test"]) < 2:
        raise ValueError("compare needs at least two test pairs")
    if cfg.reference != "auto" and cfg.reference not in cfg.methods:
        raise ConfigError(f"reference method {cfg.reference!r} is not among the compared methods")
    jobs = [(cfg, splits, m, s) for s in cfg.eval_seeds for m in cfg.methods]
    results = _map(_compare_job, jobs)
    per_pair, loc_rows, histories = [], [], {}
    for (_, _, method, seed), (rows, loc, hist) in zip(jobs, results):
        for r in rows:
            per_pair.append({"seed": seed, **r})
        for pid, s_in, s_out, auc in loc or ():
            loc_rows.append({"seed": seed, "pair_id": pid, "method": method,
                             "s_in": s_in, "s_out": s_out, "auc": auc})
        histories[(method, seed)] = hist
    samples = {m: {k: np.array([r[k] for r in per_pair if r["method"] == m]) for k in METRICS}
               for m in cfg.methods}
    means = {m: float(np.mean(samples[m]["dsc"])) for m in cfg.methods}
    ref = pick_reference(means, cfg.reference)
    summary = []
    for m in cfg.methods:
        row = {"method": m, "n": len(samples[m]["dsc"]), "reference": ref}
        for k in METRICS:
            v = samples[m][k]
            row[f"{k}_mean"] = float(np.nanmean(v)) if np.isfinite(v).any() else math.nan
            row[f"{k}_sd"] = float(np.nanstd(v, ddof=1)) if np.isfinite(v).sum() > 1 else math.nan
        row["t"], row["p"] = paired_ttest(samples[m]["dsc"], samples[ref]["dsc"])
        summary.append(row)
    return per_pair, summary, loc_rows, histories


SUMMARY_COLUMNS = ("method", "n") + tuple(f"{k}_{s}" for k in METRICS for s in ("mean", "sd")) + ("reference", "t", "p")


def cmd_compare(cfg):
    splits = load_data(cfg)
    per_pair, summary, loc_rows, histories = compare(cfg, splits)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ("seed",) + EVAL_COLUMNS
    _write_csv(out / "compare_pairs.csv", cols, [[_fmt(r[k]) for k in cols] for r in per_pair])
    _write_csv(out / "compare_summary.csv", SUMMARY_COLUMNS, [[_fmt(r[k]) for k in SUMMARY_COLUMNS] for r in summary])
    if loc_rows:
        cols = ("seed", "pair_id", "method", "s_in", "s_out", "auc")
        _write_csv(out / "compare_scores.csv", cols, [[_fmt(r[k]) for k in cols] for r in loc_rows])
    for (method, seed), hist in histories.items():
        hist.write_csv(out / f"history_{method}_seed{seed}.csv")
    ref = summary[0]["reference"]
    print(f"{'method':<10} {'dsc':>15} {'epe':>15} {'p vs ' + ref:>12}")
    for r in summary:
        print(f"{r['method']:<10} {r['dsc_mean']:.4f} +- {r['dsc_sd']:.4f} "
              f"{r['epe_mean']:.4f} +- {r['epe_sd']:.4f} {r['p']:12.3g}")
    return EXIT_OK


def _grid_job(job):
    cfg, splits, stage, alpha, beta = job
    run_cfg = replace(cfg, train=replace(cfg.train, method="adacs", alpha=alpha, beta=beta))
    result = train_one(run_cfg, splits)
    mean_s = result.history.column("mean_s")
    finite = mean_s[np.isfinite(mean_s)]
    return {
        "stage": stage, "alpha": alpha, "beta": beta,
        "val_dice": result.best_val_dice, "best_epoch": result.best_epoch,
        "final_mean_s": float(finite[-1]) if finite.size else math.nan,
        "min_mean_s": float(finite.min()) if finite.size else math.nan,
    }


def _best(cells):
    # ties keep the earliest grid value
    return max(cells, key=lambda c: (-math.inf if math.isnan(c["val_dice"]) else c["val_dice"], -cells.index(c)))


def gridsearch(cfg, splits):
    """Search alpha with beta = 0, then beta with the chosen alpha; selection by validation Dice."""
    if not cfg.alpha_grid or not cfg.beta_grid:
        raise ConfigError("alpha_grid and beta_grid must be nonempty")
    stage1 = _map(_grid_job, [(cfg, splits, "alpha", a, 0.0) for a in cfg.alpha_grid])
    alpha = _best(stage1)["alpha"]
    stage2 = _map(_grid_job, [(cfg, splits, "beta", alpha, b) for b in cfg.beta_grid])
    best = _best(stage2)
    return stage1 + stage2, best


GRID_COLUMNS = ("stage", "alpha", "beta", "val_dice", "best_epoch", "final_mean_s", "min_mean_s")


def cmd_gridsearch(cfg):
    splits = load_data(cfg)
    cells, best = gridsearch(cfg, splits)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "gridsearch.csv", GRID_COLUMNS, [[_fmt(c[k]) for k in GRID_COLUMNS] for c in cells])
    best_cfg = replace(cfg, train=replace(cfg.train, method="adacs", alpha=best["alpha"], beta=best["beta"]))
    (out / "best_config.txt").write_text(dump_config(best_cfg))
    print(f"best alpha={best['alpha']} beta={best['beta']} val Dice {best['val_dice']:.4f}")
    return EXIT_OK


def cmd_gradcheck(seed=0, tol=gradcheck.DEFAULT_TOL, step=gradcheck.DEFAULT_STEP):
    results = gradcheck.run_checks(seed=seed, tol=tol, step=step)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")
        return EXIT_GRADCHECK
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "compare": cmd_compare, "gridsearch": cmd_gridsearch,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser():
    p = _Parser(prog="adacs", description="Deformable registration with adaptive correspondence scoring.")
    p.add_argument("command", choices=sorted(list(COMMANDS) + ["gradcheck"]))
    p.add_argument("--config", type=Path, help="key=value config file (optional for gradcheck)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="training seed (overrides the config and eval seeds)")
    p.add_argument("--methods", help="comma-separated method list for compare")
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL, help="gradcheck relative tolerance")
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP, help="gradcheck finite-difference step")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            if not (args.tol > 0 and args.step > 0):
                raise ConfigError("--tol and --step must be positive")
            return cmd_gradcheck(seed=args.seed or 0, tol=args.tol, step=args.step)
        if args.config is None:
            raise ConfigError(f"{args.command} requires --config")
        cfg = load_config(args.config).with_overrides(args.out, args.seed, args.methods)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, ShapeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
