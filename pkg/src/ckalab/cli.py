"""Command-line front end: train, sweep, prune, diagnose.

Every command materializes a run directory named
<command>-<config-hash-8>-seed<seed> under --out-dir; existing directories
are refused unless --force. All outputs are CSV/JSON plus the resolved
config, so any run is re-executable from its own artifacts. Exit codes:
0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    apply_overrides,
    canonical_text,
    config_hash,
    default_raw_config,
    make_datasets,
    make_mask,
    make_model_spec,
    make_train_config,
    parse_config_file,
    resolve,
)
from .diagnostics import (
    cka_mi_association,
    gaussian_mi,
    rho_grid_family,
    weight_histogram,
    write_histogram_csv,
)
from .linalg import Rng
from .model import (
    RunRecord,
    evaluate_accuracy,
    forward_capture,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
    unique_feature_maps,
)
from .similarity import FeatureMap, linear_cka, pairwise_cka
from .config import SCHEMA
from .sparsify import (
    PruneResult,
    epsilon_sparsity,
    epsilon_zeroing_deviation,
    knapsack_channel_prune,
    l1_filter_prune,
    magnitude_prune,
    random_sparse_mask,
)
from .model import SparseMask

PRUNE_METHODS = ("magnitude", "l1_filter", "knapsack", "random")
DIAGNOSTICS = ("heatmap", "histogram", "mi_association", "epsilon_curve", "theorem1")

SWEEP_KEYS = {
    "seed": "train.seed",
    "beta": "cka_sr.beta",
    "sparsity": "sparsify.mask_ratio",
}


def _fmt(x) -> str:
    return repr(float(x))


def _eps_columns(epsilons) -> list[str]:
    return [f"eps_{e:g}" for e in epsilons]


def write_records_csv(path, records: list[RunRecord], epsilons) -> None:
    """Deterministic per-epoch metrics; wall time goes to timings.csv so a
    rerun with the same config reproduces this file byte for byte."""
    cols = ["run_id", "epoch", "train_loss", "cka_loss", "eval_accuracy",
            "mean_pairwise_cka"] + _eps_columns(epsilons) + ["cka_applied"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in records:
            row = [r.run_id, str(r.epoch), _fmt(r.train_loss), _fmt(r.cka_loss),
                   _fmt(r.eval_accuracy), _fmt(r.mean_pairwise_cka)]
            row += [_fmt(r.epsilon_sparsity[e]) for e in epsilons]
            row.append(str(r.cka_applied))
            f.write(",".join(row) + "\n")


def _prepare_run_dir(out_dir: Path, name: str, force: bool) -> Path:
    run_dir = out_dir / name
    if run_dir.exists():
        if not force:
            raise RuntimeError(f"run directory {run_dir} exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    return run_dir


def _probe_batch(eval_set, batch_size: int) -> np.ndarray:
    from .model import PROBE_MIN_ROWS

    return eval_set.features[: min(len(eval_set), max(batch_size, PROBE_MIN_ROWS))]


def cmd_train(resolved: dict, out_dir: Path, force: bool = False) -> Path:
    """Run one training job and persist records, checkpoint and exports."""
    chash = config_hash(resolved)
    seed = resolved["train.seed"]
    run_dir = _prepare_run_dir(out_dir, f"train-{chash}-seed{seed}", force)

    train_set, eval_set = make_datasets(resolved)
    spec = make_model_spec(resolved, train_set.features.shape[1], train_set.num_classes)
    mask = make_mask(resolved, spec)
    cfg = make_train_config(resolved, mask)
    probe = _probe_batch(eval_set, cfg.batch_size)

    heatmaps: dict[int, object] = {}

    def snapshot(epoch, params):
        if epoch == 0 or epoch == cfg.epochs - 1:
            _, captures = forward_capture(params, mask, probe, spec)
            heatmaps[epoch] = pairwise_cka(unique_feature_maps(captures))

    run_id = f"{chash}-seed{seed}"
    params, records = train(spec, train_set, eval_set, cfg, run_id=run_id,
                            on_epoch=snapshot)

    (run_dir / "resolved-config.txt").write_text(canonical_text(resolved))
    write_records_csv(run_dir / "records.csv", records, cfg.epsilons)
    with open(run_dir / "timings.csv", "w") as f:
        f.write("epoch,wall_time\n")
        for r in records:
            f.write(f"{r.epoch},{r.wall_time!r}\n")
    save_checkpoint(run_dir / "checkpoint.json", spec, params, mask, chash)
    heatmaps[0].write_csv(run_dir / "cka_heatmap_first.csv")
    heatmaps[cfg.epochs - 1].write_csv(run_dir / "cka_heatmap.csv")
    write_histogram_csv(weight_histogram(params), run_dir / "weight_histogram.csv")
    return run_dir


def _sweep_one(task):
    """One sweep sub-run (top level so process pools can pickle it)."""
    resolved, out_dir, force = task
    try:
        run_dir = cmd_train(resolved, Path(out_dir), force)
        with open(run_dir / "records.csv") as f:
            header = f.readline().strip().split(",")
            last = f.readlines()[-1].strip().split(",")
        finals = dict(zip(header, last))
        return {"status": "ok", "finals": finals, "run_dir": str(run_dir)}
    except Exception as err:  # sub-run failures must not kill the sweep
        return {"status": f"failed: {err}", "finals": None, "run_dir": ""}


def cmd_sweep(resolved: dict, axis: str, values: list[str],
              seeds: list[int] | None, out_dir: Path, force: bool = False,
              workers: int = 1) -> Path:
    """One sub-run per (value, seed); summary of final-epoch metrics per value."""
    if axis not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_KEYS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis == "seed" and seeds:
        raise ConfigError("--seeds cannot be combined with axis=seed")
    base_hash = config_hash(resolved)
    sweep_dir = _prepare_run_dir(out_dir, f"sweep-{axis}-{base_hash}", force)

    key = SWEEP_KEYS[axis]
    tasks = []
    layout = []  # (value, [task indices])
    for value in values:
        indices = []
        for seed in seeds or [None]:
            sub = dict(resolved)
            sub[key] = _parse_value(key, value)
            if seed is not None:
                sub["train.seed"] = int(seed)
                sub["model.seed"] = int(seed)
            if axis == "seed":
                sub["model.seed"] = sub["train.seed"]
            indices.append(len(tasks))
            tasks.append((sub, str(sweep_dir), force))
        layout.append((value, indices))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]

    metric_cols = None
    for r in results:
        if r["finals"]:
            metric_cols = [c for c in r["finals"] if c not in ("run_id", "epoch")]
            break
    if metric_cols is None:
        metric_cols = []
    with open(sweep_dir / "summary.csv", "w") as f:
        f.write(",".join([axis, "runs"] + metric_cols + ["status"]) + "\n")
        for value, indices in layout:
            subset = [results[i] for i in indices]
            ok = [r for r in subset if r["status"] == "ok"]
            status = "ok" if len(ok) == len(subset) else ";".join(
                r["status"] for r in subset if r["status"] != "ok"
            )
            row = [str(value), str(len(ok))]
            for col in metric_cols:
                if ok:
                    mean = sum(float(r["finals"][col]) for r in ok) / len(ok)
                    row.append(_fmt(mean))
                else:
                    row.append("nan")
            row.append(status)
            f.write(",".join(row) + "\n")
    return sweep_dir


def _parse_value(key: str, value: str):
    return SCHEMA[key][0](value)


def _result_from_mask(mask: SparseMask, ratio: float, method: str) -> PruneResult:
    removed = [int((m == 0).sum()) for m in mask.masks]
    return PruneResult(mask, ratio, mask.sparsity(), method, removed)


def _structured_mask_from_selection(params, layer: int, kept: list[int]) -> SparseMask:
    masks = [np.ones_like(w) for w in params.weights]
    removed = [r for r in range(params.weights[layer].shape[0]) if r not in set(kept)]
    masks[layer][removed, :] = 0.0
    masks[layer + 1][:, removed] = 0.0
    return SparseMask(masks)


def _build_prune_result(method: str, params, spec, ratio: float, layer: int,
                        budget: int | None, seed: int, index: int) -> PruneResult:
    if method == "magnitude":
        return magnitude_prune(params, ratio)
    if method == "l1_filter":
        return l1_filter_prune(params, layer, ratio)
    if method == "random":
        mask = random_sparse_mask(spec, ratio, Rng(seed, key=(97, index)))
        return _result_from_mask(mask, ratio, "random")
    # knapsack: keep the channel subset maximizing summed row-L1 importance
    if layer >= len(params.weights) - 1:
        raise ConfigError("knapsack pruning needs a layer with a downstream layer")
    w = params.weights[layer]
    importances = np.abs(w).sum(axis=1)
    costs = np.ones(w.shape[0], dtype=np.int64)
    keep_budget = budget if budget is not None else w.shape[0] - int(np.floor(ratio * w.shape[0]))
    kept = knapsack_channel_prune(importances, costs, keep_budget)
    if not kept:
        raise RuntimeError("knapsack selection kept no channels")
    return _result_from_mask(_structured_mask_from_selection(params, layer, kept),
                             ratio, "knapsack")


def cmd_prune(run_path: Path, method: str, ratios: list[float],
              budget: int | None, layer: int, finetune_epochs: int,
              out_dir: Path, force: bool = False) -> Path:
    """Prune a trained checkpoint, evaluate before/after, optionally finetune."""
    if method not in PRUNE_METHODS:
        raise ConfigError(f"unknown prune method {method!r}; choose from {PRUNE_METHODS}")
    for r in ratios:
        if not 0 <= r < 1:
            raise ConfigError(f"prune ratio {r} out of range [0, 1)")
    run_path = Path(run_path)
    resolved = resolve(parse_config_file(run_path / "resolved-config.txt"))
    spec, params, base_mask, chash = load_checkpoint(run_path / "checkpoint.json")
    seed = resolved["train.seed"]
    prune_dir = _prepare_run_dir(out_dir, f"prune-{method}-{chash}-seed{seed}", force)

    train_set, eval_set = make_datasets(resolved)
    accuracy_before = evaluate_accuracy(params, base_mask, eval_set, spec)

    rows = []
    results_payload = []
    for i, ratio in enumerate(ratios):
        result = _build_prune_result(method, params, spec, ratio, layer, budget, seed, i)
        combined = result.mask
        if base_mask is not None:
            combined = SparseMask(
                [m0 * m1 for m0, m1 in zip(base_mask.masks, result.mask.masks)]
            )
        accuracy_after = evaluate_accuracy(params, combined, eval_set, spec)
        accuracy_final = accuracy_after
        if finetune_epochs > 0:
            cfg = make_train_config(resolved, combined)
            cfg = replace(cfg, epochs=finetune_epochs)
            pruned_params = params.copy()
            for w, m in zip(pruned_params.weights, combined.masks):
                w *= m
            tuned, _ = train(spec, train_set, eval_set, cfg,
                             run_id=f"finetune-{method}", initial_params=pruned_params)
            accuracy_final = evaluate_accuracy(tuned, combined, eval_set, spec)
        payload = result.to_dict()
        payload["config_hash"] = chash
        payload["accuracy_before"] = accuracy_before
        payload["accuracy_after"] = accuracy_after
        if finetune_epochs > 0:
            payload["accuracy_after_finetune"] = accuracy_final
        results_payload.append(payload)
        rows.append((ratio, result.achieved_sparsity, accuracy_before, accuracy_after, accuracy_final))

    with open(prune_dir / "prune_result.json", "w") as f:
        json.dump(results_payload[0] if len(results_payload) == 1 else results_payload,
                  f, indent=2)
    if len(results_payload) > 1:
        with open(prune_dir / "accuracy_vs_ratio.csv", "w") as f:
            f.write("ratio,achieved_sparsity,accuracy_before,accuracy_after,accuracy_final\n")
            for row in rows:
                f.write(",".join(_fmt(v) for v in row) + "\n")
    (prune_dir / "resolved-config.txt").write_text(canonical_text(resolved))
    return prune_dir


def cmd_diagnose(which: str, run_path: Path | None, resolved: dict,
                 out_dir: Path, force: bool = False, synthetic: bool = False) -> Path:
    """Write the CSV exports behind the similarity/sparsity visualizations."""
    if which not in DIAGNOSTICS:
        raise ConfigError(f"unknown diagnostic {which!r}; choose from {DIAGNOSTICS}")
    needs_checkpoint = which in ("heatmap", "epsilon_curve", "theorem1") or (
        which == "histogram" and not synthetic
    )
    if needs_checkpoint and run_path is None:
        raise ConfigError(f"diagnostic {which!r} needs --run pointing at a training run")

    if run_path is not None:
        resolved = resolve(parse_config_file(Path(run_path) / "resolved-config.txt"))
        spec, params, mask, chash = load_checkpoint(Path(run_path) / "checkpoint.json")
    else:
        chash = config_hash(resolved)
        spec = params = mask = None
    seed = resolved["train.seed"]
    diag_dir = _prepare_run_dir(out_dir, f"diagnose-{which}-{chash}-seed{seed}", force)
    (diag_dir / "resolved-config.txt").write_text(canonical_text(resolved))

    if which == "heatmap":
        _, eval_set = make_datasets(resolved)
        probe = _probe_batch(eval_set, resolved["train.batch_size"])
        _, captures = forward_capture(params, mask, probe, spec)
        pairwise_cka(unique_feature_maps(captures)).write_csv(diag_dir / "cka_heatmap.csv")
    elif which == "histogram":
        if params is None:
            train_set, _ = make_datasets(resolved)
            spec = make_model_spec(resolved, train_set.features.shape[1], train_set.num_classes)
            params = init_params(spec, Rng(resolved["model.seed"]))
        write_histogram_csv(weight_histogram(params), diag_dir / "weight_histogram.csv")
    elif which == "mi_association":
        rhos = [i * 0.05 for i in range(20)]
        family = rho_grid_family(rhos, 4000, Rng(seed, key=(5,)))
        correlation = cka_mi_association(family)
        with open(diag_dir / "mi_pairs.csv", "w") as f:
            f.write("rho,cka,mi\n")
            for rho, sample in zip(rhos, family):
                cka = linear_cka(FeatureMap(sample.x), FeatureMap(sample.y, layer_index=1))
                f.write(f"{_fmt(rho)},{_fmt(cka)},{_fmt(gaussian_mi(sample))}\n")
        (diag_dir / "mi_association.txt").write_text(
            f"spearman_rank_correlation = {correlation!r}\n"
        )
        print(f"mi_association: spearman rank correlation = {correlation:.4f}")
    elif which == "epsilon_curve":
        epsilons = np.logspace(-6, -1, 26)
        with open(diag_dir / "epsilon_curve.csv", "w") as f:
            f.write("epsilon,s_epsilon\n")
            for eps in epsilons:
                report = epsilon_sparsity(params, float(eps))
                f.write(f"{_fmt(eps)},{_fmt(report.s_epsilon)}\n")
    else:  # theorem1
        _, eval_set = make_datasets(resolved)
        probe = _probe_batch(eval_set, resolved["train.batch_size"])
        deviations = epsilon_zeroing_deviation(params, mask, spec, probe,
                                               (1e-6, 1e-4, 1e-2))
        with open(diag_dir / "theorem1.csv", "w") as f:
            f.write("epsilon,max_logit_deviation\n")
            for eps, dev in deviations:
                f.write(f"{_fmt(eps)},{_fmt(dev)}\n")
    return diag_dir


def _add_common(parser):
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out-dir", default=None, help="directory for run outputs")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed")
    parser.add_argument("--force", action="store_true",
                        help="overwrite an existing run directory")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel sub-runs (sweep only)")


def _resolve_from_args(args) -> dict:
    raw = parse_config_file(args.config) if args.config else default_raw_config()
    raw = apply_overrides(raw, args.set)
    if args.seed is not None:
        raw["train.seed"] = str(args.seed)
    return resolve(raw)


def _out_dir(args, resolved) -> Path:
    return Path(args.out_dir if args.out_dir is not None else resolved["output.dir"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckalab",
        description="Sparse-training laboratory with interlayer-similarity regularization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job")
    _add_common(p_train)

    p_sweep = sub.add_parser("sweep", help="run a hyperparameter sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_KEYS))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--seeds", default=None,
                         help="comma-separated seeds to average over")

    p_prune = sub.add_parser("prune", help="prune a trained checkpoint")
    _add_common(p_prune)
    p_prune.add_argument("--run", required=True, help="training run directory")
    p_prune.add_argument("--method", required=True, choices=PRUNE_METHODS)
    p_prune.add_argument("--ratios", default="0.5",
                         help="comma-separated pruning ratios")
    p_prune.add_argument("--budget", type=int, default=None,
                         help="knapsack keep budget (overrides ratio)")
    p_prune.add_argument("--layer", type=int, default=0,
                         help="layer index for structured methods")
    p_prune.add_argument("--finetune-epochs", type=int, default=0)

    p_diag = sub.add_parser("diagnose", help="export diagnostic CSVs")
    _add_common(p_diag)
    p_diag.add_argument("--which", required=True, choices=DIAGNOSTICS)
    p_diag.add_argument("--run", default=None, help="training run directory")
    p_diag.add_argument("--synthetic", action="store_true",
                        help="use a fresh seeded init instead of a checkpoint")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            resolved = _resolve_from_args(args)
            run_dir = cmd_train(resolved, _out_dir(args, resolved), args.force)
            print(run_dir)
        elif args.command == "sweep":
            resolved = _resolve_from_args(args)
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            seeds = ([int(s) for s in args.seeds.split(",") if s.strip()]
                     if args.seeds else None)
            run_dir = cmd_sweep(resolved, args.axis, values, seeds,
                                _out_dir(args, resolved), args.force, args.workers)
            print(run_dir)
        elif args.command == "prune":
            resolved = _resolve_from_args(args)
            ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
            run_dir = cmd_prune(Path(args.run), args.method, ratios, args.budget,
                                args.layer, args.finetune_epochs,
                                _out_dir(args, resolved), args.force)
            print(run_dir)
        else:
            resolved = _resolve_from_args(args)
            run_dir = cmd_diagnose(args.which, args.run and Path(args.run), resolved,
                                   _out_dir(args, resolved), args.force, args.synthetic)
            print(run_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    sys.exit(main())
