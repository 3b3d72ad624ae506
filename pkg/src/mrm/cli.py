"""Command-line entry points: synth, pretrain, finetune, evaluate, reconstruct.

Configuration precedence, lowest to highest: preset defaults, ``--config``
file, command-line flags. Config files are TOML with one dotted key per line::

    model.encoder_depth = 2
    train.epochs = 50
    mask.image_ratio = 0.6
    seed = 3

Every command writes ``config.json`` (the fully resolved configuration) into
``--out``. Failures exit nonzero with a single ``ErrorClass: message`` line on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import tomli
import torch

from . import nets
from .masking import MaskConfig, mask_image_patches, mask_report_tokens, record_rng
from .nets import ConfigError, ModelConfig
from .pretrain import (
    EVAL_EPOCH, TrainConfig, evaluate, export_encoder, load_checkpoint, load_encoder,
    model_from_encoder, prepare_record, train,
)
from .record_io import (
    Vocabulary, detokenize, load_manifest, synth_generate, synth_shape_classification, unpatchify,
    write_image,
)
from .transfer import (
    FinetuneConfig, evaluate_classifier, finetune, load_labeled_manifest, metrics_report,
)

SECTIONS = ("model", "train", "mask", "finetune")
TOP_LEVEL = ("seed", "preset")


# --------------------------------------------------------------------------
# configuration


def read_config_file(path: str | Path) -> dict:
    """Parse a dotted-key TOML file into ``{section: {key: value}}``; unknown keys are errors."""
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    known = {
        "model": {f.name for f in dataclasses.fields(ModelConfig)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"mask"},
        "mask": {f.name for f in dataclasses.fields(MaskConfig)},
        "finetune": {f.name for f in dataclasses.fields(FinetuneConfig)},
    }
    out: dict = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        if key in TOP_LEVEL:
            out[key] = value
        elif key in known:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: {key!r} must be a table of keys")
            unknown = set(value) - known[key]
            if unknown:
                raise ConfigError(f"{path}: unknown {key} keys {sorted(unknown)}")
            out[key].update(value)
        else:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return out


def _flag_overrides(args) -> dict:
    over: dict = {s: {} for s in SECTIONS}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("fusion") is not None:
        over["model"]["fusion_mode"] = args.fusion
    if get("no_superres"):
        over["model"]["super_resolution"] = False
    if get("hybrid_image_restoration"):
        over["model"]["hybrid_image_restoration"] = True
    if get("no_mlm"):
        over["train"]["mlm_enabled"] = False
    if get("no_mim"):
        over["train"]["mim_enabled"] = False
    if get("lam") is not None:
        over["train"]["lam"] = args.lam
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "peak_lr")):
        if get(flag) is not None:
            over["train"][key] = get(flag)
    if get("image_mask_ratio") is not None:
        over["mask"]["image_ratio"] = args.image_mask_ratio
    if get("report_mask_ratio") is not None:
        over["mask"]["report_ratio"] = args.report_mask_ratio
    if get("labeling_ratio") is not None:
        over["finetune"]["labeling_ratio"] = args.labeling_ratio
    if get("ft_epochs") is not None:
        over["finetune"]["epochs"] = args.ft_epochs
    return over


def resolve(args, base_model: ModelConfig | None = None, base_train: TrainConfig | None = None) -> dict:
    """Merge preset, config file and flags into concrete config objects."""
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {s: {} for s in SECTIONS}
    flags = _flag_overrides(args)
    preset = getattr(args, "preset", None) or file_cfg.get("preset") or "desk"
    seed = args.seed if getattr(args, "seed", None) is not None else file_cfg.get("seed")
    if seed is None:
        # keep a checkpoint's own seed unless one is given explicitly
        seed = base_train.seed if base_train is not None else 0

    if base_model is None:
        model = ModelConfig.preset(preset).to_dict()
    else:
        model = base_model.to_dict()
    model.update(file_cfg["model"])
    model.update(flags["model"])

    train_d = (base_train or TrainConfig()).to_dict()
    mask = dict(train_d.pop("mask"))
    train_d["seed"] = seed
    mask["seed"] = seed
    train_d.update(file_cfg["train"])
    train_d.update(flags["train"])
    mask.update(file_cfg["mask"])
    mask.update(flags["mask"])

    ft = {"seed": seed, **file_cfg["finetune"], **flags["finetune"]}
    if "lr_grid" in ft:
        ft["lr_grid"] = tuple(ft["lr_grid"])
    return {
        "preset": preset,
        "seed": seed,
        "model": model,
        "train": TrainConfig.from_dict({**train_d, "mask": MaskConfig(**mask)}),
        "finetune": FinetuneConfig(**ft),
    }


def _echo(out: Path, command: str, resolved: dict, paths: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "seed": resolved["seed"], "preset": resolved["preset"], "paths": paths}
    for key in ("model", "train", "finetune"):
        val = resolved.get(key)
        if val is None:
            continue
        doc[key] = val if isinstance(val, dict) else dataclasses.asdict(val)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if args.kind == "reports":
        records, vocab = synth_generate(args.n, args.seed, args.image_size)
        lines = []
        for i, rec in enumerate(records):
            name = f"images/{i:05d}.png"
            write_image(out / name, rec.image, bits=16)
            lines.append(json.dumps({"image": name, "report": rec.report, "id": rec.id}))
        (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        vocab.save(out / "vocab.txt")
    else:
        splits = {"train": args.n, "val": max(1, args.n // 5), "test": max(1, args.n // 5)}
        lines = []
        for k, (split, n) in enumerate(splits.items()):
            images, labels = synth_shape_classification(n, args.seed * 3 + k, args.image_size)
            for i, (img, lab) in enumerate(zip(images, labels)):
                name = f"images/{split}_{i:05d}.png"
                write_image(out / name, img, bits=16)
                lines.append(json.dumps({"image": name, "labels": lab.tolist(), "split": split,
                                         "id": f"{split}-{i}"}))
        (out / "labeled.jsonl").write_text("\n".join(lines) + "\n")
    doc = {"command": "synth", "kind": args.kind, "n": args.n, "seed": args.seed, "image_size": args.image_size}
    (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {args.n} {args.kind} records to {out}")
    return 0


def _load_data(args):
    records = load_manifest(args.manifest)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.manifest).parent / "vocab.txt"
    return records, Vocabulary.load(vocab_path)


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    records, vocab = _load_data(args)
    resolved = resolve(args)
    if "vocab_size" not in _explicit_model_keys(args):
        resolved["model"]["vocab_size"] = len(vocab)
    model_cfg = ModelConfig.from_dict(resolved["model"])
    train_cfg = resolved["train"]
    resolved["finetune"] = None
    _echo(out, "pretrain", resolved, {"manifest": str(args.manifest), "resume": args.resume})
    result = train(records, vocab, model_cfg, train_cfg, out_dir=out, resume_from=args.resume)
    (out / "exports").mkdir(exist_ok=True)
    export_encoder(result.model, out / "exports" / "encoder.bin")
    last = result.history[-1] if result.history else {}
    print(f"step {result.step}/{result.total_steps} " + " ".join(f"{k}={v:.6g}" for k, v in last.items()
                                                                 if k != "step"))
    return 0


def _explicit_model_keys(args) -> set:
    keys = set(_flag_overrides(args)["model"])
    if getattr(args, "config", None):
        keys |= set(read_config_file(args.config)["model"])
    return keys


def cmd_finetune(args) -> int:
    out = Path(args.out)
    sets = load_labeled_manifest(args.labeled_manifest)
    for split in ("train", "val", "test"):
        if split not in sets:
            raise ConfigError(f"labeled manifest has no {split!r} split")
    _, enc_cfg = load_encoder(args.encoder)
    resolved = resolve(args, base_model=enc_cfg)
    resolved["train"] = None
    ft_cfg = resolved["finetune"]
    _echo(out, "finetune", resolved, {"encoder": str(args.encoder), "labeled_manifest": str(args.labeled_manifest)})
    model = model_from_encoder(args.encoder)
    result = finetune(model, sets["train"], sets["val"], ft_cfg)
    test = evaluate_classifier(result.classifier, sets["test"], ft_cfg.task)
    report = metrics_report(result, test, ft_cfg)
    (out / "reports").mkdir(exist_ok=True)
    (out / "reports" / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"test mean AUC {test['mean_auc']:.4f} (lr {result.best_lr:g}, {result.subset_size} labeled examples)")
    return 0


def _checkpoint_and_masks(args):
    ckpt = load_checkpoint(args.checkpoint)
    resolved = resolve(args, base_model=ckpt.model.config, base_train=ckpt.train_config)
    if ModelConfig.from_dict(resolved["model"]) != ckpt.model.config:
        raise ConfigError("architecture flags conflict with the checkpoint's model config")
    return ckpt, resolved


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    records, vocab = _load_data(args)
    ckpt, resolved = _checkpoint_and_masks(args)
    resolved["finetune"] = None
    _echo(out, "evaluate", resolved, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    prepared = [prepare_record(r, vocab, ckpt.model.config) for r in records]
    metrics = evaluate(ckpt.model, prepared, resolved["train"].mask)
    metrics["step"] = ckpt.step
    (out / "reports").mkdir(exist_ok=True)
    (out / "reports" / "eval.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))
    return 0


def reconstruct(model: nets.MRMModel, record, vocab: Vocabulary, mask_cfg: MaskConfig, index: int = 0,
                epoch: int = EVAL_EPOCH) -> dict:
    """Mask one record, run both decoders, and compose the three display panels.

    Panels are all at record resolution: masked low-res input (masked cells
    zeroed, nearest-upscaled), reconstruction (predicted patches at masked
    cells, upscaled low-res ground truth at visible cells), and the original.
    """
    cfg = model.config
    prep = prepare_record(record, vocab, cfg)
    rng = record_rng(mask_cfg.seed, epoch, index)
    img_view = mask_image_patches(prep.low_patches, prep.target_patches, mask_cfg.image_ratio, rng)
    rep_view = mask_report_tokens(prep.token_ids, mask_cfg.report_ratio, rng)
    g = cfg.grid_size
    p, C = cfg.patch_size, cfg.channels
    model.eval()
    with torch.no_grad():
        vis_patches = torch.from_numpy(img_view.visible_patches)[None]
        vis_pos = torch.from_numpy(img_view.visible_positions.astype(np.int64))[None]
        msk_pos = torch.from_numpy(img_view.masked_positions.astype(np.int64))[None]
        emb = nets.encode(model, vis_patches, vis_pos)
        ids = torch.from_numpy(rep_view.masked_input().astype(np.int64))[None]
        visible = torch.zeros_like(ids, dtype=torch.bool)
        visible[0, torch.from_numpy(rep_view.visible_positions.astype(np.int64))] = True
        rf = nets.report_summary(model, ids, visible) if cfg.hybrid_image_restoration else None
        pred = nets.decode_image(model, emb, vis_pos, msk_pos, rf)[0].numpy()
        seq = nets.report_sequence(model, ids, visible, nets.global_pool(emb, cfg.fusion_mode))
        log_probs = nets.report_forward(model, seq, torch.zeros_like(visible))[0]
    predicted_tokens = log_probs[torch.from_numpy(rep_view.masked_positions.astype(np.int64))].argmax(-1).numpy()

    upscale = lambda a: np.repeat(np.repeat(a, 2, axis=0), 2, axis=1)  # noqa: E731
    low = prep.low_patches.copy()
    low[img_view.masked_positions] = 0.0
    panel_input = upscale(unpatchify(low, p, g, g, C))

    recon_low = upscale(unpatchify(prep.low_patches, p, g, g, C))
    tp = 2 * p if cfg.super_resolution else p
    pred_img = unpatchify(pred, tp, g, g, C)
    if not cfg.super_resolution:
        pred_img = upscale(pred_img)
    cell = 2 * p
    for pos in img_view.masked_positions:
        r, c = divmod(int(pos), g)
        recon_low[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = pred_img[r * cell:(r + 1) * cell,
                                                                               c * cell:(c + 1) * cell]
    panel_recon = np.clip(recon_low, 0.0, 1.0)
    masked_pred = pred[img_view.masked_positions]
    mse = float(((masked_pred - img_view.targets) ** 2).mean()) if len(masked_pred) else 0.0
    return {
        "panels": (panel_input, panel_recon, record.image),
        "masked_cells": img_view.masked_positions,
        "pixel_mse": mse,
        "tokens": prep.token_ids,
        "masked_tokens": rep_view.masked_positions,
        "predicted_tokens": predicted_tokens,
        "token_accuracy": float((predicted_tokens == rep_view.targets).mean()) if len(predicted_tokens) else 1.0,
    }


def format_report(rec: dict, vocab: Vocabulary, mask_cfg: MaskConfig) -> str:
    tokens = [vocab.tokens[i] for i in rec["tokens"]]
    shown = list(tokens)
    for pos, pid in zip(rec["masked_tokens"], rec["predicted_tokens"]):
        pred = vocab.tokens[pid]
        mark = "=" if pred == tokens[pos] else "!"
        shown[pos] = f"[{pred}{mark}{tokens[pos]}]"
    lines = [
        f"masking ratios: {mask_cfg.image_ratio:.0%} (image) / {mask_cfg.report_ratio:.0%} (report)",
        f"masked image cells: {len(rec['masked_cells'])}, pixel MSE at masked cells: {rec['pixel_mse']:.6g}",
        f"masked tokens: {len(rec['masked_tokens'])}, accuracy: {rec['token_accuracy']:.4f}",
        "legend: [predicted=truth] correct, [predicted!truth] wrong",
        "ground truth: " + detokenize(rec["tokens"], vocab),
        "predicted:    " + " ".join(shown),
    ]
    return "\n".join(lines) + "\n"


def cmd_reconstruct(args) -> int:
    out = Path(args.out)
    records, vocab = _load_data(args)
    if not 0 <= args.index < len(records):
        raise IndexError(f"record index {args.index} outside manifest of {len(records)} records")
    ckpt, resolved = _checkpoint_and_masks(args)
    resolved["finetune"] = None
    _echo(out, "reconstruct", resolved, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    mask_cfg = resolved["train"].mask
    rec = reconstruct(ckpt.model, records[args.index], vocab, mask_cfg, args.index)
    a, b, c = rec["panels"]
    gap = np.ones((a.shape[0], 4, a.shape[2]))
    (out / "reports").mkdir(exist_ok=True)
    stem = f"reconstruction_{args.index:05d}"
    write_image(out / "reports" / f"{stem}.png", np.concatenate([a, gap, b, gap, c], axis=1))
    text = format_report(rec, vocab, mask_cfg)
    (out / "reports" / f"{stem}.txt").write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="TOML file of dotted keys (model.*, train.*, mask.*, finetune.*, seed)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("desk", "vitb16"))
    p.add_argument("--fusion", choices=("gap", "gmp"))
    p.add_argument("--no-superres", action="store_true")
    p.add_argument("--hybrid-image-restoration", action="store_true")


def _mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image-mask-ratio", type=float)
    p.add_argument("--report-mask-ratio", type=float)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="JSON-lines manifest of image/report records")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrm", description="Masked record modeling: pre-training and transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--kind", choices=("reports", "shapes"), default="reports",
                   help="image/report records, or a labeled disc-vs-rectangle task")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train on an image/report manifest")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    _mask_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the image loss")
    p.add_argument("--no-mlm", action="store_true")
    p.add_argument("--no-mim", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune an exported encoder on a labeled manifest")
    _common(p)
    p.add_argument("--encoder", required=True, help="encoder export from pretrain")
    p.add_argument("--labeled-manifest", required=True)
    p.add_argument("--labeling-ratio", type=float)
    p.add_argument("--epochs", dest="ft_epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    for name, func, text in (("evaluate", cmd_evaluate, "masked-prediction losses of a checkpoint"),
                             ("reconstruct", cmd_reconstruct, "image triptych and token dump for one record")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _data_flags(p)
        _mask_flags(p)
        p.add_argument("--checkpoint", required=True)
        if name == "reconstruct":
            p.add_argument("--index", type=int, default=0, help="record index in the manifest")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 - single-line error contract
        message = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
