"""Command-line pipeline driver.

Subcommands: pretrain, finetune, eval, param-plan, grad-check, selftest.
Every run writes a resolved-config snapshot next to its outputs; metrics
are JSON-lines (one object per epoch); timestamps live only in a sidecar
log so artifacts are byte-reproducible for a fixed seed. Exit codes:
0 success, 2 config error, 3 numerical-check failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from .adapter import AdapterConfig
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     GeometryError, ShapeError, TrainingError)
from .model import (BackboneConfig, build_model, load_backbone, param_report,
                    plan_params)
from .rng import Rng
from .training import (TrainConfig, evaluate_segmentation, finetune_loop,
                       pretrain_loop, synth_classification_set, synth_volume_set)

DEFAULT_CONFIG = {
    "backbone": {
        "layout": "flat", "width": 48, "depths": [1, 1, 1, 1], "patch": 4,
        "heads": 4, "input_channels": 1, "image_size": 32,
    },
    "adapter": {
        "alpha": 6, "branches": ["conv3", "conv5", "fft", "mix"],
        "fft_bias": False, "inter": "add", "activation": "gelu",
    },
    "train": {
        "lr": 0.002, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
        "weight_decay": 1e-5, "epochs": 12, "batch_size": 4, "seed": 0,
        "loss_ce": 0.5, "loss_dice": 0.5, "mode": "med_tuning",
    },
    "pretrain": {
        "images": 2000, "epochs": 6, "batch_size": 32, "lr": 0.002,
        "target_accuracy": 0.9,
    },
    "data": {
        "volumes": 40, "depth": 16, "height": 32, "width": 32,
        "num_classes": 4, "train_split": 32,
    },
}

MODE_FLAGS = {"scratch": "scratch", "full": "full", "head": "head",
              "vanilla-adapter": "vanilla_adapter", "med-tuning": "med_tuning"}


def _coerce(old, raw: str, key: str):
    if isinstance(old, bool):
        if raw.lower() in ("1", "true", "on", "yes"):
            return True
        if raw.lower() in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"expected a boolean for {key}, got {raw!r}")
    if isinstance(old, int):
        return int(raw)
    if isinstance(old, float):
        return float(raw)
    if isinstance(old, list):
        items = [p for p in raw.split(",") if p]
        if old and isinstance(old[0], int):
            return [int(p) for p in items]
        return items
    return raw


def _apply_override(config: dict, key: str, raw: str) -> None:
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = _coerce(node[leaf], raw, key)


def _merge(base: dict, other: dict, path: str = "") -> None:
    for key, val in other.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {here!r} must be a section")
            _merge(base[key], val, here)
        else:
            base[key] = val


def resolve_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            _merge(config, json.load(fh))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        _apply_override(config, key, raw)
    if seed is not None:
        config["train"]["seed"] = seed
    return config


def _backbone_config(config: dict) -> BackboneConfig:
    b = config["backbone"]
    n = len(b["depths"])
    if b["layout"] == "hierarchical":
        dims = tuple(b["width"] * (2 ** i) for i in range(n))
    else:
        dims = (b["width"],) * n
    return BackboneConfig(layout=b["layout"], stage_dims=dims,
                          stage_depths=tuple(b["depths"]), patch=b["patch"],
                          heads=b["heads"], input_channels=b["input_channels"],
                          image_size=b["image_size"])


def _adapter_config(config: dict, width: int) -> AdapterConfig:
    a = config["adapter"]
    branches = set(a["branches"])
    unknown = branches - {"conv3", "conv5", "fft", "mix"}
    if unknown:
        raise ConfigError(f"unknown branches: {sorted(unknown)}")
    return AdapterConfig(c=width, alpha=a["alpha"],
                         conv3="conv3" in branches, conv5="conv5" in branches,
                         fft="fft" in branches, channel_mix="mix" in branches,
                         fft_bias=a["fft_bias"], inter_mode=a["inter"],
                         act=a["activation"])


def _train_config(config: dict, mode: str) -> TrainConfig:
    t = config["train"]
    return TrainConfig(lr=t["lr"], betas=(t["beta1"], t["beta2"]), eps=t["eps"],
                       weight_decay=t["weight_decay"], epochs=t["epochs"],
                       batch_size=t["batch_size"], seed=t["seed"],
                       loss_weights=(t["loss_ce"], t["loss_dice"]), mode=mode)


def _prepare_out(out_dir: str, config: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    snap = os.path.join(out_dir, "resolved_config.json")
    with open(snap, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def _log(out_dir: str, message: str) -> None:
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {message}\n")


def _write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _volume_sets(config: dict):
    d = config["data"]
    samples = synth_volume_set(Rng(config["train"]["seed"]).derive("volumes"),
                               d["volumes"], (d["depth"], d["height"], d["width"]),
                               d["num_classes"])
    split = d["train_split"]
    if not 0 < split < len(samples):
        raise ConfigError(f"train_split {split} out of range for {len(samples)} volumes")
    return samples[:split], samples[split:]


def cmd_pretrain(args) -> int:
    config = resolve_config(args.config, args.override, args.seed)
    out = _prepare_out(args.out, config)
    p = config["pretrain"]
    seed = config["train"]["seed"]
    images, labels = synth_classification_set(
        Rng(seed).derive("pretrain.data"), p["images"], config["backbone"]["image_size"])
    graph = build_model(_backbone_config(config), None, "pretrain",
                        Rng(seed).derive("pretrain.model"),
                        num_classes=len(set(labels.tolist())))
    cfg = TrainConfig(lr=p["lr"], epochs=p["epochs"], batch_size=p["batch_size"],
                      weight_decay=config["train"]["weight_decay"], seed=seed,
                      mode="pretrain", target_accuracy=p["target_accuracy"])
    _log(out, f"pretraining on {p['images']} synthetic images")
    table, history = pretrain_loop(graph, images, labels, cfg)
    ckpt = os.path.join(out, "pretrain.ckpt")
    save_checkpoint(ckpt, table)
    records = [{"run": "pretrain", "seed": seed, **h.to_dict()} for h in history]
    _write_jsonl(os.path.join(out, "pretrain_metrics.jsonl"), records)
    acc = history[-1].accuracy
    _log(out, f"saved {ckpt} (final accuracy {acc:.3f})")
    print(f"pretrain: accuracy={acc:.3f} checkpoint={ckpt}")
    return 0


def _build_finetune_model(config: dict, mode: str, pretrained: str | None):
    bc = _backbone_config(config)
    ac = None
    if mode in ("vanilla_adapter", "med_tuning"):
        ac = _adapter_config(config, bc.stage_dims[0])
    graph = build_model(bc, ac, mode, Rng(config["train"]["seed"]).derive("segment.model"),
                        num_classes=config["data"]["num_classes"])
    if mode != "scratch":
        if not pretrained:
            raise ConfigError(f"mode {mode} requires --pretrained CHECKPOINT")
        load_backbone(graph, load_checkpoint(pretrained))
    return graph


def cmd_finetune(args) -> int:
    config = resolve_config(args.config, args.override, args.seed)
    mode = MODE_FLAGS[args.mode]
    config["train"]["mode"] = mode
    if args.alpha is not None:
        config["adapter"]["alpha"] = args.alpha
    if args.branches is not None:
        config["adapter"]["branches"] = [p for p in args.branches.split(",") if p]
    if args.inter is not None:
        config["adapter"]["inter"] = args.inter
    if args.fft_bias is not None:
        config["adapter"]["fft_bias"] = args.fft_bias == "on"
    out = _prepare_out(args.out, config)
    graph = _build_finetune_model(config, mode, args.pretrained)
    train_set, eval_set = _volume_sets(config)
    cfg = _train_config(config, mode)
    _log(out, f"fine-tuning mode={mode} on {len(train_set)} volumes")
    table, record, history = finetune_loop(graph, train_set, eval_set, cfg)
    ckpt = os.path.join(out, f"finetune_{mode}.ckpt")
    save_checkpoint(ckpt, table)
    report = param_report(graph)
    records = [{"run": f"finetune_{mode}", "mode": mode, "seed": cfg.seed,
                **h.to_dict()} for h in history]
    _write_jsonl(os.path.join(out, f"metrics_{mode}.jsonl"), records)
    _log(out, f"saved {ckpt}")
    print(f"finetune[{mode}]: mean_dice={record.mean_dice:.4f} "
          f"tuned={report.tuned} inserted={report.inserted} checkpoint={ckpt}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args.config, args.override, args.seed)
    mode = MODE_FLAGS[args.mode]
    config["train"]["mode"] = mode
    out = _prepare_out(args.out, config)
    bc = _backbone_config(config)
    ac = None
    if mode in ("vanilla_adapter", "med_tuning"):
        ac = _adapter_config(config, bc.stage_dims[0])
    graph = build_model(bc, ac, mode, Rng(config["train"]["seed"]).derive("segment.model"),
                        num_classes=config["data"]["num_classes"])
    apply_checkpoint(graph, load_checkpoint(args.checkpoint))
    _, eval_set = _volume_sets(config)
    record = evaluate_segmentation(graph, [(s.volume, s.labels) for s in eval_set],
                                   config["data"]["num_classes"])
    report = param_report(graph)
    record.tuned = report.tuned
    record.inserted = report.inserted
    rec = {"run": "eval", "mode": mode, "seed": config["train"]["seed"],
           "epoch": None, "loss": None, **record.to_dict()}
    _write_jsonl(os.path.join(out, "eval_metrics.jsonl"), [rec])
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_param_plan(args) -> int:
    host = args.host.replace("-", "_")
    alpha = args.alpha
    branches = set((args.branches or "conv3,conv5,fft,mix").split(","))
    unknown = branches - {"conv3", "conv5", "fft", "mix"}
    if unknown:
        raise ConfigError(f"unknown branches: {sorted(unknown)}")
    dims = depths = None
    if host == "custom":
        if not args.dims or not args.depths:
            raise ConfigError("custom host requires --dims and --depths")
        dims = [int(x) for x in args.dims.split(",")]
        depths = [int(x) for x in args.depths.split(",")]
    # template width is a placeholder; plan_params specializes it per stage
    ac = AdapterConfig(c=alpha, alpha=alpha,
                       conv3="conv3" in branches, conv5="conv5" in branches,
                       fft="fft" in branches, channel_mix="mix" in branches,
                       fft_bias=args.fft_bias == "on",
                       inter_mode=args.inter)
    report = plan_params(host, ac, dims=dims, depths=depths)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
        return 0
    name_w = max(len(r[0]) for r in report.rows) + 2
    print(f"inserted-parameter plan: host={args.host} alpha={alpha} "
          f"branches={','.join(sorted(branches))} inter={args.inter} "
          f"fft_bias={args.fft_bias}")
    for name, _, count in report.rows:
        print(f"  {name:<{name_w}} {count:>12,}")
    print(f"  {'total inserted':<{name_w}} {report.inserted:>12,} "
          f"({report.inserted / 1e6:.3f}M)")
    print("assumptions:")
    for line in report.assumptions:
        print(f"  - {line}")
    return 0


def _print_checks(checks, label: str) -> int:
    failed = 0
    for name, err, bound in checks:
        ok = err < bound
        failed += 0 if ok else 1
        print(f"  {'PASS' if ok else 'FAIL'}  {name:<36} err={err:.3e} bound={bound:.0e}")
    print(f"{label}: {len(checks) - failed}/{len(checks)} passed")
    return failed


def cmd_grad_check(args) -> int:
    from .audit import gradient_audit
    failed = _print_checks(gradient_audit(max_coords=args.max_coords), "grad-check")
    if failed:
        print(json.dumps({"error": {"code": 3, "kind": "numerical",
                                    "message": f"{failed} gradient checks failed"}}),
              file=sys.stderr)
        return 3
    return 0


def cmd_selftest(args) -> int:
    from .audit import selftest
    failed = _print_checks(selftest(), "selftest")
    if failed:
        print(json.dumps({"error": {"code": 3, "kind": "numerical",
                                    "message": f"{failed} self-tests failed"}}),
              file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medtuning",
        description="Adapter-based parameter-efficient tuning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("override", nargs="*", metavar="key=value",
                       help="dotted-key config overrides (e.g. train.lr=0.01)")

    p = sub.add_parser("pretrain", help="train the classification backbone")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a segmentation model")
    common(p)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="med-tuning")
    p.add_argument("--pretrained", help="pretrain checkpoint path")
    p.add_argument("--alpha", type=int, default=None)
    p.add_argument("--branches", default=None, help="comma list of conv3,conv5,fft,mix")
    p.add_argument("--inter", choices=["none", "add", "max", "concat"], default=None)
    p.add_argument("--fft-bias", choices=["on", "off"], default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(p)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="med-tuning")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("param-plan", help="analytic inserted-parameter ledger")
    p.add_argument("--host", choices=["vit-b16", "swin-t", "custom"], required=True)
    p.add_argument("--alpha", type=int, default=6)
    p.add_argument("--branches", default=None)
    p.add_argument("--inter", choices=["none", "add", "max", "concat"], default="add")
    p.add_argument("--fft-bias", choices=["on", "off"], default="off")
    p.add_argument("--dims", help="custom host widths, comma-separated")
    p.add_argument("--depths", help="custom host depths, comma-separated")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_param_plan)

    p = sub.add_parser("grad-check", help="gradient audit over all operations")
    p.add_argument("--max-coords", type=int, default=None,
                   help="coordinates sampled per tensor (default exhaustive)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("selftest", help="FFT, convolution and metric oracle suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    if "MEDTUNE_THREADS" in os.environ:
        os.environ.setdefault("OMP_NUM_THREADS", os.environ["MEDTUNE_THREADS"])
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DataError, ShapeError, GeometryError) as exc:
        print(json.dumps({"error": {"code": 2, "kind": "config", "message": str(exc)}}),
              file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(json.dumps({"error": {"code": 3, "kind": "numerical", "message": str(exc)}}),
              file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(json.dumps({"error": {"code": 4, "kind": "io", "message": str(exc)}}),
              file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
