"""Command-line interface.

Subcommands cover the full workflow: synthesize planted data, train and
evaluate encoders, run leave-one-modality-out ablations, fit the lagged ridge
baseline, ensemble checkpoints, export attention attribution profiles, and
sweep the query count.  Every command echoes its fully resolved configuration,
and reruns with the same seed and output directory produce byte-identical
CSVs and checkpoints.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attribution import PROFILE_KINDS, collect_attention, profile_to_csv
from .checkpoint import load_model, save_model
from .config import (
    ConfigError,
    build_model_spec,
    build_planted_spec,
    build_ridge_design,
    build_train_config,
    dump_config,
    resolve_config,
)
from .ensemble import EnsembleSpec, compute_weights, ensemble_predict, select_top_members
from .features import (
    MODALITIES,
    generate_planted_dataset,
    load_dataset,
    save_dataset,
    write_prediction,
)
from .plots import save_curve, save_heatmap
from .ridge import run_linear_baseline
from .scoring import (
    ablation_drops,
    build_model,
    dominant_modality,
    evaluate_model,
    synthetic_network_map,
)
from .training import NumericalInstabilityError, split_windows, train, train_config_meta

__all__ = ["main"]


def _add_common(parser: argparse.ArgumentParser, *, checkpoint: bool = False) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML/JSON config overlay")
    parser.add_argument("--preset", choices=("desk", "paper"), default="desk")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--pooler", choices=("xattn", "mean", "depth_groups"), default=None)
    parser.add_argument(
        "--modalities", type=str, default=None,
        help="comma-separated subset, e.g. 'vision,text'",
    )
    parser.add_argument("--capture-attn", action="store_true",
                        help="export attention profiles after the command's main pass")
    parser.add_argument("--batches", type=int, default=None,
                        help="cap the number of batches used for attention capture")
    if checkpoint:
        parser.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint to load")


def _overrides(args) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.pooler is not None:
        overrides.setdefault("pooler", {})["kind"] = args.pooler
    if args.modalities is not None:
        overrides["modalities"] = [m.strip() for m in args.modalities.split(",") if m.strip()]
    if args.batches is not None:
        overrides.setdefault("attribution", {})["batches"] = args.batches
    return overrides


def _resolve(args) -> dict:
    cfg = resolve_config(args.preset, args.config, _overrides(args))
    return cfg


def _echo(cfg: dict) -> Path | None:
    text = dump_config(cfg)
    sys.stdout.write("# resolved configuration\n" + text)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "resolved_config.yaml")
        return out
    return None


def _load_windows(cfg: dict):
    if cfg["data"]["source"] == "manifest":
        windows, _ = load_dataset(cfg["data"]["manifest"])
        return windows
    spec = build_planted_spec(cfg)
    return generate_planted_dataset(spec, cfg["data"]["planted"]["n_windows"],
                                    cfg["data"]["planted"]["seed"]).windows


def _split(cfg: dict, windows):
    return split_windows(windows, cfg["data"]["val_fraction"])


def _pick_split(cfg: dict, windows, which: str):
    if which == "all":
        return windows
    train_part, val_part = _split(cfg, windows)
    return train_part if which == "train" else val_part


def _require_out(cfg: dict, command: str) -> Path:
    if not cfg["out"]:
        raise ConfigError(f"{command} writes artifacts; pass --out or set 'out' in the config")
    return Path(cfg["out"])


def _require_checkpoint(args, cfg: dict) -> Path:
    path = args.checkpoint or cfg["evaluate"]["checkpoint"]
    if not path:
        raise ConfigError("no checkpoint given; pass --checkpoint or set evaluate.checkpoint")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _model_spec_from_windows(cfg: dict, windows):
    first = windows[0]
    channels = {m: f.n_channels for m, f in first.features.items()}
    n_subjects = max(w.subject for w in windows) + 1
    return build_model_spec(
        cfg,
        channels=channels,
        parcels=first.parcels,
        k_out=first.k_out,
        n_subjects=n_subjects,
        max_frames=first.n_frames,
    )


def _write_attribution(model, windows, out: Path, batch_size: int, max_batches):
    out.mkdir(parents=True, exist_ok=True)
    for m, acc in collect_attention(model, windows, batch_size=batch_size,
                                    max_batches=max_batches).items():
        profiles = acc.profiles()
        row_names = {"modality": "modality", "per_head": "head",
                     "per_query": "query", "tr_resolved": "frame"}
        for kind in PROFILE_KINDS:
            profile_to_csv(profiles[kind], out / f"{m}_{kind}.csv", row_name=row_names[kind])
            save_heatmap(profiles[kind], out / f"{m}_{kind}.png",
                         title=f"{m}: {kind}", ylabel=row_names[kind])
    return out


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "generate")
    spec = build_planted_spec(cfg)
    dataset = generate_planted_dataset(spec, cfg["data"]["planted"]["n_windows"],
                                       cfg["data"]["planted"]["seed"])
    manifest = save_dataset(dataset.windows, out / "dataset", frame_rate_hz=spec.frame_rate_hz)
    print(f"wrote {len(dataset.windows)} windows -> {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "train")
    windows = _load_windows(cfg)
    train_part, val_part = _split(cfg, windows)
    spec = _model_spec_from_windows(cfg, windows)
    train_cfg = build_train_config(cfg)
    model = build_model(spec, train_cfg.seed)
    result = train(model, train_part, val_part, train_cfg)
    result.write_log(out / "train_log.tsv")
    table = evaluate_model(result.model, val_part, batch_size=train_cfg.batch_size,
                           active=train_cfg.modalities)
    table.to_csv(out / "val_scores.csv")
    save_model(
        out / "checkpoint.mirc",
        result.model,
        extra_meta={
            "best_epoch": result.best_epoch,
            "best_val_pearson": result.best_val_pearson,
            "train_config": train_config_meta(train_cfg),
        },
    )
    if args.capture_attn and spec.pooler_kind == "xattn":
        _write_attribution(result.model, val_part, out / "attribution",
                           train_cfg.batch_size, cfg["attribution"]["batches"])
    print(f"best epoch {result.best_epoch}: val mean Pearson {result.best_val_pearson:.4f}")
    print(f"checkpoint -> {out / 'checkpoint.mirc'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "evaluate")
    model, _ = load_model(_require_checkpoint(args, cfg))
    windows = _pick_split(cfg, _load_windows(cfg), args.split)
    active = tuple(cfg["modalities"]) if cfg["modalities"] else None
    table = evaluate_model(model, windows, batch_size=cfg["evaluate"]["batch_size"], active=active)
    table.to_csv(out / "scores.csv")
    network_ids = synthetic_network_map(table.scores.shape[1])
    means = table.network_means(network_ids)
    with open(out / "network_means.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["network"] + [f"subject_{s}" for s in table.subjects])
        for g in range(means.shape[1]):
            writer.writerow([g] + [repr(float(v)) for v in means[:, g]])
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    from .estimators import GatedEncodingModel  # reuse batched prediction path

    wrapper = GatedEncodingModel()
    wrapper.model_ = model
    preds = wrapper.predict(windows, active=active)
    for win, pred in zip(windows, preds):
        write_prediction(pred_dir / f"{win.window_id}.mirp", pred, win.subject)
    print(f"mean Pearson over {len(windows)} windows: {table.mean_score():.4f}")
    if args.capture_attn and model.spec.pooler_kind == "xattn":
        _write_attribution(model, windows, out / "attribution",
                           cfg["evaluate"]["batch_size"], cfg["attribution"]["batches"])
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "ablate")
    model, _ = load_model(_require_checkpoint(args, cfg))
    windows = _pick_split(cfg, _load_windows(cfg), args.split)
    full, ablated, drops = ablation_drops(model, windows, batch_size=cfg["evaluate"]["batch_size"])
    full.to_csv(out / "full_scores.csv")
    for m, table in ablated.items():
        table.to_csv(out / f"ablated_{m}.csv")
    with open(out / "drops.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality"] + [str(p) for p in range(drops.shape[1])])
        for i, m in enumerate(MODALITIES):
            writer.writerow([m] + [repr(float(v)) for v in drops[i]])
    dominant, strength = dominant_modality(drops)
    with open(out / "dominance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parcel", "dominant", "strength"])
        for p in range(drops.shape[1]):
            writer.writerow([p, MODALITIES[dominant[p]], repr(float(strength[p]))])
    for i, m in enumerate(MODALITIES):
        print(f"ablate {m}: mean drop {drops[i].mean():+.4f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "baseline")
    windows = _load_windows(cfg)
    train_part, val_part = _split(cfg, windows)
    design = build_ridge_design(cfg)
    table, fits = run_linear_baseline(train_part, val_part, design)
    table.to_csv(out / "baseline_scores.csv")
    with open(out / "chosen_lambdas.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "parcel", "lambda"])
        for s in sorted(fits):
            for p, lam in enumerate(fits[s].result.chosen_lambda):
                writer.writerow([s, p, repr(float(lam))])
    print(f"baseline mean Pearson: {table.mean_score():.4f}")
    return 0


def cmd_ensemble(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "ensemble")
    members = list(cfg["ensemble"]["members"])
    if not members:
        raise ConfigError("ensemble.members must list at least one checkpoint")
    windows = _load_windows(cfg)
    _, val_part = _split(cfg, windows)
    batch = cfg["evaluate"]["batch_size"]

    tables = {}
    for path in members:
        model, _ = load_model(Path(path))
        tables[path] = evaluate_model(model, val_part, batch_size=batch)
    if cfg["ensemble"]["top_n"]:
        keep = select_top_members({p: t.mean_score() for p, t in tables.items()},
                                  cfg["ensemble"]["top_n"])
        members = [p for p in members if p in keep]
    subjects = tables[members[0]].subjects
    rho = np.stack([tables[p].scores for p in members])  # (M, S, P)
    weights = compute_weights(rho, cfg["ensemble"]["tau"])

    subject_row = {s: i for i, s in enumerate(subjects)}
    models = [load_model(Path(p))[0] for p in members]
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    rows = {s: {"pred": [], "truth": []} for s in subjects}
    from .estimators import GatedEncodingModel

    member_preds = []
    for model in models:
        wrapper = GatedEncodingModel()
        wrapper.model_ = model
        member_preds.append(wrapper.predict(val_part))
    for i, win in enumerate(val_part):
        stack = np.stack([member_preds[m][i] for m in range(len(members))])
        combined = ensemble_predict(stack, weights[:, subject_row[win.subject], :])
        write_prediction(pred_dir / f"{win.window_id}.mirp", combined, win.subject)
        rows[win.subject]["pred"].append(combined)
        rows[win.subject]["truth"].append(win.target)

    from .scoring import ScoreTable, pearson_per_parcel

    scores = np.stack([
        pearson_per_parcel(
            np.concatenate(rows[s]["pred"], axis=0), np.concatenate(rows[s]["truth"], axis=0)
        )
        for s in subjects
    ])
    table = ScoreTable(scores=scores, subjects=subjects)
    table.to_csv(out / "ensemble_scores.csv")
    with open(out / "member_scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "mean_pearson"])
        for p in members:
            writer.writerow([p, repr(tables[p].mean_score())])
    EnsembleSpec(members=members, tau=cfg["ensemble"]["tau"]).to_json(out / "ensemble.json")
    print(f"ensemble of {len(members)} members: mean Pearson {table.mean_score():.4f}")
    return 0


def cmd_attribute(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "attribute")
    model, _ = load_model(_require_checkpoint(args, cfg))
    windows = _pick_split(cfg, _load_windows(cfg), args.split)
    _write_attribution(model, windows, out, cfg["evaluate"]["batch_size"],
                       cfg["attribution"]["batches"])
    print(f"attribution profiles -> {out}")
    return 0


def cmd_sweep_nq(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    out = _require_out(cfg, "sweep-nq")
    windows = _load_windows(cfg)
    train_part, val_part = _split(cfg, windows)
    base_train = build_train_config(cfg)
    if cfg["sweep"]["epochs"]:
        base_train = replace(base_train, epochs=cfg["sweep"]["epochs"])

    grid = list(cfg["sweep"]["n_queries"])
    seeds = list(cfg["sweep"]["seeds"])
    results = []
    for n_q in grid:
        for seed in seeds:
            run_cfg = dict(cfg, pooler=dict(cfg["pooler"], n_queries=n_q))
            spec = _model_spec_from_windows(run_cfg, windows)
            train_cfg = replace(base_train, seed=seed)
            model = build_model(spec, seed)
            result = train(model, train_part, val_part, train_cfg)
            results.append((n_q, seed, result.best_val_pearson))
            print(f"n_q={n_q} seed={seed}: val mean Pearson {result.best_val_pearson:.4f}")

    with open(out / "sweep_nq.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_queries", "seed", "val_pearson"])
        for n_q, seed, score in results:
            writer.writerow([n_q, seed, repr(float(score))])
    means = [float(np.mean([r[2] for r in results if r[0] == n_q])) for n_q in grid]
    save_curve(grid, {"mean val Pearson": np.asarray(means)}, out / "sweep_nq.png",
               xlabel="queries", ylabel="val Pearson", title="query-count sweep")
    best = grid[int(np.argmax(means))]
    print(f"best mean val Pearson at n_q={best}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layergate",
        description="Multimodal brain-response encoding with learned layer pooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    handlers = {
        "generate": (cmd_generate, "synthesize a planted dataset", False, False),
        "train": (cmd_train, "train an encoder", False, False),
        "evaluate": (cmd_evaluate, "score a checkpoint", True, True),
        "ablate": (cmd_ablate, "leave-one-modality-out ablation", True, True),
        "baseline": (cmd_baseline, "lagged ridge baseline", False, False),
        "ensemble": (cmd_ensemble, "validation-weighted ensembling", False, False),
        "attribute": (cmd_attribute, "export attention attribution profiles", True, True),
        "sweep-nq": (cmd_sweep_nq, "sweep the pooler query count", False, False),
    }
    for name, (handler, help_text, needs_ckpt, has_split) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p, checkpoint=needs_ckpt)
        if has_split:
            p.add_argument("--split", choices=("train", "val", "all"), default="val")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalInstabilityError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
