"""Command-line driver: dataset generation, training, evaluation, sweeps.

Every run resolves its full configuration, hashes it, and writes the
resolved config next to its outputs, so any artifact can be reproduced
from the files alone. Output root comes from --out or the CONSEQ_OUT
environment variable (default ./runs).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import metrics, relcap, synth
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _out_root(args) -> Path:
    root = args.out or os.environ.get("CONSEQ_OUT", "runs")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(directory: Path, config: dict) -> str:
    h = config_hash(config)
    config = dict(config, config_hash=h)
    with open(directory / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, default=str)
    return h


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    out = _out_root(args)
    if args.task == "synth":
        if args.scale == "full":
            cfg = synth.SynthConfig.full(seed=args.seed)
        else:
            cfg = synth.SynthConfig.desk(seed=args.seed)
        if args.n_train:
            cfg.n_train = args.n_train
        if args.n_val:
            cfg.n_val = args.n_val
        if args.n_test:
            cfg.n_test = args.n_test
        splits = synth.build_dataset(cfg)
        for name, split in splits.items():
            synth.save_split(out / f"{name}.csv", split)
        h = _write_config(out, {"command": "gen", "task": "synth", **dataclasses.asdict(cfg)})
        sizes = {k: len(v) for k, v in splits.items()}
        coeff_mean = float(np.mean(splits["train"].a))
        print(f"synth dataset at {out}: sizes={sizes} mean(a)={coeff_mean:.3f} config={h}")
        return EXIT_OK
    cfg = relcap.RelcapConfig(
        n_scenes=args.scenes,
        n_eval_scenes=args.eval_scenes,
        n_regions=args.regions,
        n_pairs=args.pairs,
        synonym_rate=args.synonym_rate,
        seed=args.seed,
    )
    train, evals = relcap.build_corpus(cfg)
    relcap.save_scenes(out / "train_scenes.jsonl", train, cfg)
    relcap.save_scenes(out / "eval_scenes.jsonl", evals, cfg)
    h = _write_config(out, {"command": "gen", "task": "relcap", **dataclasses.asdict(cfg)})
    n_caps = sum(s.n_pairs for s in train)
    print(f"relcap corpus at {out}: {len(train)} train / {len(evals)} eval scenes, "
          f"{n_caps} captions, config={h}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _synth_config_from_args(args, data_cfg: dict) -> synth.SynthConfig:
    cfg = synth.SynthConfig(**{f.name: data_cfg[f.name] for f in dataclasses.fields(synth.SynthConfig)
                               if f.name in data_cfg})
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.lr is not None:
        cfg.lr = args.lr
    if args.hidden is not None:
        cfg.hidden = args.hidden
    if args.embed is not None:
        cfg.embed = args.embed
    if args.K is not None:
        cfg.k = args.K
    if args.fusion is not None:
        cfg.fusion_mode = args.fusion
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    out = _out_root(args)
    data = Path(args.data)
    ckpt_path = out / "checkpoint.npz"
    if args.task == "synth":
        with open(data / "config.json") as fh:
            data_cfg = json.load(fh)
        cfg = _synth_config_from_args(args, data_cfg)
        dataset = {name: synth.load_split(data / f"{name}.csv") for name in ("train", "val", "test")}
        resolved = {"command": "train", "task": "synth", "mode": args.mode, **dataclasses.asdict(cfg)}
        h = _write_config(out, resolved)
        resume_state = None
        if args.resume and ckpt_path.exists():
            arrays, momenta, meta = load_checkpoint(ckpt_path)
            resume_state = {
                "params": arrays, "momenta": momenta, "epoch": meta["epoch"],
                "rng_state": meta["rng_state"], "lr": meta["lr"], "best_val": meta["best_val"],
                "stall": meta.get("stall", 0),
                "trace": [tuple(t) for t in meta["trace"]],
            }

        def save_progress(model, trace):
            state = model._train_state
            meta = {
                "task": "synth", "mode": args.mode, "config": dataclasses.asdict(cfg),
                "config_hash": h, "epoch": state["epoch"], "rng_state": state["rng_state"],
                "lr": state["lr"], "best_val": state["best_val"], "stall": state["stall"],
                "trace": state["trace"],
                "norm": dataclasses.asdict(model.norm),
            }
            save_checkpoint(ckpt_path, model.checkpoint_parameters(), meta)

        def progress(epoch, train_loss, val_loss, lr):
            print(f"epoch {epoch}: train={train_loss:.6f} val={val_loss:.6f} lr={lr:.2e}", flush=True)

        model, trace = synth.train_synth(dataset, cfg, args.mode, progress=progress,
                                         resume_state=resume_state)
        save_progress(model, trace)
        _write_trace(out / "trace.csv", ["epoch", "train_loss", "val_loss", "lr"], trace, h)
        mse1, mse2 = synth.eval_mse(model, dataset["val"])
        print(f"trained synth {args.mode}: val mse_y1={mse1:.4f} mse_y2={mse2:.4f} -> {ckpt_path}")
        return EXIT_OK

    scenes, data_cfg = relcap.load_scenes(data / "train_scenes.jsonl")
    cfg = dataclasses.replace(data_cfg)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.lr is not None:
        cfg.lr = args.lr
    if args.hidden is not None:
        cfg.hidden = args.hidden
    if args.embed is not None:
        cfg.embed = args.embed
    if args.K is not None:
        cfg.k = args.K
    if args.fusion is not None:
        cfg.fusion_mode = args.fusion
    if args.label_set is not None:
        cfg.label_set = args.label_set
    if args.seed is not None:
        cfg.seed = args.seed
    resolved = {"command": "train", "task": "relcap", "mode": args.mode, **dataclasses.asdict(cfg)}
    h = _write_config(out, resolved)
    resume_state = None
    if args.resume and ckpt_path.exists():
        arrays, momenta, meta = load_checkpoint(ckpt_path)
        resume_state = {"params": arrays, "momenta": momenta, "epoch": meta["epoch"],
                        "rng_state": meta["rng_state"], "trace": [tuple(t) for t in meta["trace"]]}

    def progress(epoch, loss, lr):
        print(f"epoch {epoch}: loss={loss:.4f} lr={lr:.2e}", flush=True)

    model, trace = relcap.train_relcap(scenes, cfg, args.mode, progress=progress,
                                       resume_state=resume_state)
    state = model._train_state
    meta = {
        "task": "relcap", "mode": args.mode, "config": dataclasses.asdict(cfg), "config_hash": h,
        "epoch": state["epoch"], "rng_state": state["rng_state"], "trace": state["trace"],
    }
    save_checkpoint(ckpt_path, model.checkpoint_parameters(), meta)
    _write_trace(out / "trace.csv", ["epoch", "train_loss", "lr"], trace, h)
    print(f"trained relcap {args.mode}: final loss={trace[-1][1] if trace else float('nan'):.4f} -> {ckpt_path}")
    return EXIT_OK


def _write_trace(path, header, rows, config_hash: str):
    import csv

    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# eval


def _load_synth_model(ckpt_path) -> tuple[synth.SynthModel, dict]:
    arrays, momenta, meta = load_checkpoint(ckpt_path)
    if meta["task"] != "synth":
        raise ConfigError(f"checkpoint {ckpt_path} is for task {meta['task']!r}, not synth")
    cfg = synth.SynthConfig(**meta["config"])
    norm = synth.Normalization(**meta["norm"])
    model = synth.SynthModel(cfg, meta["mode"], norm, np.random.default_rng(cfg.seed + 1))
    for p in model.checkpoint_parameters():
        p.data = arrays[p.name].copy()
        p.momentum = momenta[p.name].copy()
    return model, meta


def _load_relcap_model(ckpt_path) -> tuple[relcap.CaptionModel, dict]:
    arrays, momenta, meta = load_checkpoint(ckpt_path)
    if meta["task"] != "relcap":
        raise ConfigError(f"checkpoint {ckpt_path} is for task {meta['task']!r}, not relcap")
    cfg = relcap.RelcapConfig(**meta["config"])
    model = relcap.CaptionModel(cfg, meta["mode"], np.random.default_rng(cfg.seed + 11))
    for p in model.checkpoint_parameters():
        p.data = arrays[p.name].copy()
        p.momentum = momenta[p.name].copy()
    return model, meta


def evaluate_relcap_model(model: relcap.CaptionModel, scenes: list[relcap.Scene],
                          diversity_runs: int = 5, seed: int = 0,
                          label_set: str | None = None) -> dict:
    """Greedy consistency + recall, and sampled cross-run box diversity."""
    label = label_set or model.config.label_set
    per_image_groups = []
    recall_inputs = []
    for scene in scenes:
        caps = relcap.caption_scene(model, scene)[0]
        per_image_groups.append(relcap.box_groups(scene, caps))
        gt = [c.tokens for c in scene.captions(label)]
        recall_inputs.append((gt, [c.tokens for c in caps]))
    consistency, n_boxes = metrics.consistency_score(per_image_groups)
    recall, n_images = metrics.image_level_recall(recall_inputs)
    result = {
        "consistency": (consistency, n_boxes),
        "img_lv_recall": (recall, n_images),
    }
    if diversity_runs >= 2:
        rng = np.random.default_rng(seed)
        slots = []
        for scene in scenes:
            runs = relcap.caption_scene(model, scene, sampling="sample", runs=diversity_runs, rng=rng)
            slots.extend(relcap.slot_descriptions_across_runs(scene, runs))
        diversity, n_slots = metrics.bbox_diversity(slots)
        result["bbox_div"] = (diversity, n_slots)
    return result


def cmd_eval(args) -> int:
    out = _out_root(args)
    data = Path(args.data)
    report = Path(args.report) if args.report else out / "report.csv"
    if args.task == "synth":
        model, meta = _load_synth_model(args.checkpoint)
        test = synth.load_split(data / "test.csv")
        mse1, mse2 = synth.eval_mse(model, test)
        records = [
            {"metric": "mse_y1", "value": mse1, "n_items": len(test)},
            {"metric": "mse_y2", "value": mse2, "n_items": len(test)},
        ]
        metrics.write_metric_report(report, records, meta["config_hash"])
        print(f"synth eval ({meta['mode']}): mse_y1={mse1:.4f} mse_y2={mse2:.4f} -> {report}")
        return EXIT_OK
    model, meta = _load_relcap_model(args.checkpoint)
    scenes, _ = relcap.load_scenes(data / "eval_scenes.jsonl")
    result = evaluate_relcap_model(model, scenes, diversity_runs=args.runs, seed=args.seed or 0)
    records = [{"metric": name, "value": value, "n_items": n} for name, (value, n) in result.items()]
    metrics.write_metric_report(report, records, meta["config_hash"])
    shown = " ".join(f"{name}={value:.2f}" for name, (value, _) in result.items())
    print(f"relcap eval ({meta['mode']}): {shown} -> {report}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    out = _out_root(args)
    variants: list[tuple[str, list[str]]] = []
    for mode in args.fusion or []:
        variants.append((f"fusion={mode}", ["--fusion", mode, "--K", "1"]))
    for k in args.K or []:
        variants.append((f"K={k}", ["--fusion", "full", "--K", str(k)]))
    if not variants:
        raise ConfigError("sweep needs --K values and/or --fusion modes")
    rows = []
    for label, extra in variants:
        run_dir = out / label.replace("=", "_")
        run_dir.mkdir(parents=True, exist_ok=True)
        base = [sys.executable, "-m", "conseq.cli"]
        train_cmd = base + ["train", "--task", args.task, "--mode", args.mode, "--data", args.data,
                            "--out", str(run_dir)] + extra
        if args.epochs is not None:
            train_cmd += ["--epochs", str(args.epochs)]
        if args.seed is not None:
            train_cmd += ["--seed", str(args.seed)]
        subprocess.run(train_cmd, check=True)
        eval_cmd = base + ["eval", "--task", args.task, "--data", args.data,
                           "--checkpoint", str(run_dir / "checkpoint.npz"),
                           "--report", str(run_dir / "report.csv"), "--runs", str(args.runs)]
        subprocess.run(eval_cmd, check=True)
        for rec in metrics.read_metric_report(run_dir / "report.csv"):
            rows.append({"variant": label, **rec})
    report = out / "sweep_report.csv"
    import csv

    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "metric", "value", "n_items", "config_hash"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep report -> {report}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conseq", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a dataset")
    gen.add_argument("--task", choices=("synth", "relcap"), required=True)
    gen.add_argument("--out", default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--scale", choices=("desk", "full"), default="desk")
    gen.add_argument("--n-train", type=int, default=None)
    gen.add_argument("--n-val", type=int, default=None)
    gen.add_argument("--n-test", type=int, default=None)
    gen.add_argument("--scenes", type=int, default=200)
    gen.add_argument("--eval-scenes", type=int, default=40)
    gen.add_argument("--regions", type=int, default=8)
    gen.add_argument("--pairs", type=int, default=20)
    gen.add_argument("--synonym-rate", type=float, default=0.5)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train a model variant")
    train.add_argument("--task", choices=("synth", "relcap"), required=True)
    train.add_argument("--mode", choices=("independent", "baseline2x", "consistent"), required=True)
    train.add_argument("--data", required=True)
    train.add_argument("--out", default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--hidden", type=int, default=None)
    train.add_argument("--embed", type=int, default=None)
    train.add_argument("--K", type=int, default=None)
    train.add_argument("--fusion", choices=("full", "no_gnn", "equal_attention"), default=None)
    train.add_argument("--label-set", choices=("original", "consistent"), default=None)
    train.add_argument("--resume", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--task", choices=("synth", "relcap"), required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--report", default=None)
    ev.add_argument("--runs", type=int, default=5, help="sampled captioning runs for diversity (<2 skips)")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="train+eval a row per configuration")
    sweep.add_argument("--task", choices=("synth", "relcap"), required=True)
    sweep.add_argument("--mode", default="consistent")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--K", type=int, nargs="*", default=None)
    sweep.add_argument("--fusion", nargs="*", choices=("full", "no_gnn", "equal_attention"), default=None)
    sweep.add_argument("--epochs", type=int, default=None)
    sweep.add_argument("--runs", type=int, default=5)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
