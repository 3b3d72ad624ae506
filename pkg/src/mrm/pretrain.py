"""Pre-training loop: batching, AdamW with warmup+cosine, checkpoints, encoder export."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import nets
from .masking import MaskConfig, mask_image_patches, mask_report_tokens, record_rng
from .nets import ConfigError, ModelConfig, MRMModel
from .objectives import LossBreakdown, loss_image, loss_report, loss_total
from .record_io import MASK_ID, PAD_ID, Record, Vocabulary, downsample, patchify, tokenize
from .serialization import CheckpointError, read_container, write_container

log = logging.getLogger(__name__)

EVAL_EPOCH = 1_000_000_007  # mask stream reserved for evaluation passes
LOSS_COLUMNS = ("step", "lr", "L_R", "L_I", "L")


class IncompatibleConfigError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    peak_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int | None = None  # None -> epochs // 10
    lam: float = 1.0
    seed: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)
    mlm_enabled: bool = True
    mim_enabled: bool = True
    grad_clip: float | None = None
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_epochs is not None and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must be in [0, epochs)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not (self.mlm_enabled or self.mim_enabled):
            raise ConfigError("at least one of mlm_enabled / mim_enabled must be set")

    @property
    def resolved_warmup_epochs(self) -> int:
        return self.epochs // 10 if self.warmup_epochs is None else self.warmup_epochs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("mask"), dict):
            d["mask"] = MaskConfig(**d["mask"])
        return cls(**d)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay reaching 0 at the last step."""
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return peak_lr
    progress = min((step - warmup_steps) / span, 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# data


@dataclass
class PreparedRecord:
    id: str
    low_patches: np.ndarray  # (N, p*p*C)
    target_patches: np.ndarray  # (N, T): high-res, or low-res when super-resolution is off
    token_ids: np.ndarray  # (L,)


def prepare_record(record: Record, vocab: Vocabulary, cfg: ModelConfig) -> PreparedRecord:
    record.check_grid(cfg.patch_size)
    h, w, c = record.image.shape
    if (h, w, c) != (2 * cfg.image_size, 2 * cfg.image_size, cfg.channels):
        raise ValueError(f"record {record.id!r}: image {h}x{w}x{c} does not match "
                         f"{2 * cfg.image_size}x{2 * cfg.image_size}x{cfg.channels}")
    low = downsample(record.image)
    low_patches = patchify(low, cfg.patch_size)
    if cfg.super_resolution:
        target = patchify(record.image, 2 * cfg.patch_size)
    else:
        target = low_patches
    ids = np.asarray(tokenize(record.report, vocab), dtype=np.int64)
    if ids.size == 0:
        raise ValueError(f"record {record.id!r}: report is empty after tokenization")
    if ids.size > cfg.max_report_len:
        raise ValueError(f"record {record.id!r}: {ids.size} tokens exceed max_report_len={cfg.max_report_len}")
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} tokens but vocab_size={cfg.vocab_size}")
    return PreparedRecord(record.id, low_patches.astype(np.float32), target.astype(np.float32), ids)


@dataclass
class Batch:
    ids: list[str]
    vis_patches: torch.Tensor  # (B, k, P)
    vis_pos: torch.Tensor  # (B, k)
    msk_pos: torch.Tensor  # (B, h)
    img_targets: torch.Tensor  # (B, h, T)
    report_in: torch.Tensor  # (B, L) [MASK] at masked, [PAD] past the end
    report_targets: torch.Tensor  # (B, L) original ids
    visible: torch.Tensor  # (B, L) bool
    masked: torch.Tensor  # (B, L) bool
    padding: torch.Tensor  # (B, L) bool

    def to(self, dtype: torch.dtype) -> "Batch":
        return dataclasses.replace(self, vis_patches=self.vis_patches.to(dtype),
                                   img_targets=self.img_targets.to(dtype))


def make_batch(prepared: Sequence[PreparedRecord], indices: Sequence[int], mask_cfg: MaskConfig,
               epoch: int) -> Batch:
    """Mask and collate. Record ``i`` always draws from stream (seed, epoch, i)."""
    imgs, reps = [], []
    for i in indices:
        rec = prepared[i]
        rng = record_rng(mask_cfg.seed, epoch, i)
        imgs.append(mask_image_patches(rec.low_patches, rec.target_patches, mask_cfg.image_ratio, rng))
        reps.append(mask_report_tokens(rec.token_ids, mask_cfg.report_ratio, rng))
    B = len(indices)
    L = max(r.length for r in reps)
    report_in = np.full((B, L), PAD_ID, dtype=np.int64)
    report_targets = np.full((B, L), PAD_ID, dtype=np.int64)
    visible = np.zeros((B, L), dtype=bool)
    masked = np.zeros((B, L), dtype=bool)
    for b, r in enumerate(reps):
        report_in[b, r.visible_positions] = r.visible_tokens
        report_in[b, r.masked_positions] = MASK_ID
        report_targets[b, r.visible_positions] = r.visible_tokens
        report_targets[b, r.masked_positions] = r.targets
        visible[b, r.visible_positions] = True
        masked[b, r.masked_positions] = True
    return Batch(
        ids=[prepared[i].id for i in indices],
        vis_patches=torch.from_numpy(np.stack([v.visible_patches for v in imgs])),
        vis_pos=torch.from_numpy(np.stack([v.visible_positions for v in imgs]).astype(np.int64)),
        msk_pos=torch.from_numpy(np.stack([v.masked_positions for v in imgs]).astype(np.int64)),
        img_targets=torch.from_numpy(np.stack([v.targets for v in imgs])),
        report_in=torch.from_numpy(report_in),
        report_targets=torch.from_numpy(report_targets),
        visible=torch.from_numpy(visible),
        masked=torch.from_numpy(masked),
        padding=torch.from_numpy(~(visible | masked)),
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)])).permutation(n)


# --------------------------------------------------------------------------
# forward + update


@dataclass
class ForwardOutputs:
    losses: LossBreakdown
    report_log_probs: torch.Tensor | None  # (B, L, V)
    image_pred: torch.Tensor | None  # (B, N, T)


def forward_losses(model: MRMModel, batch: Batch, lam: float = 1.0, mlm: bool = True,
                   mim: bool = True) -> ForwardOutputs:
    cfg = model.config
    emb = nets.encode(model, batch.vis_patches, batch.vis_pos)
    zero = emb.sum() * 0.0
    L_R, L_I = zero, zero
    log_probs = pred = None
    if mlm:
        g = nets.global_pool(emb, cfg.fusion_mode)
        seq = nets.report_sequence(model, batch.report_in, batch.visible, g)
        log_probs = nets.report_forward(model, seq, batch.padding)
        L_R = loss_report(log_probs[batch.masked], batch.report_targets[batch.masked])
    if mim:
        rf = None
        if cfg.hybrid_image_restoration:
            rf = nets.report_summary(model, batch.report_in, batch.visible)
        pred = nets.decode_image(model, emb, batch.vis_pos, batch.msk_pos, rf)
        L_I = loss_image(pred, batch.img_targets, batch.msk_pos)
    return ForwardOutputs(loss_total(L_R, L_I, lam), log_probs, pred)


def trainable_names(model: MRMModel, train_cfg: TrainConfig) -> list[str]:
    """Parameters the optimizer may touch; disabled objectives freeze their section."""
    names = []
    for name, _ in model.named_parameters():
        section = name.split(".", 1)[0]
        if section == "image_decoder" and not train_cfg.mim_enabled:
            continue
        if section == "report_decoder" and not train_cfg.mlm_enabled:
            # the lookup table still feeds the image decoder under hybrid restoration
            if not (name == "report_decoder.token_embed.weight"
                    and model.config.hybrid_image_restoration and train_cfg.mim_enabled):
                continue
        names.append(name)
    return names


def _no_decay(name: str, param: torch.Tensor) -> bool:
    return param.ndim <= 1 or "token_embed" in name or "pos_embed" in name


def make_optimizer(model: MRMModel, train_cfg: TrainConfig) -> torch.optim.AdamW:
    params = dict(model.named_parameters())
    names = trainable_names(model, train_cfg)
    decay = [params[n] for n in names if not _no_decay(n, params[n])]
    no_decay = [params[n] for n in names if _no_decay(n, params[n])]
    groups = [{"params": decay, "weight_decay": train_cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=0.0, betas=(train_cfg.beta1, train_cfg.beta2), foreach=False)


def pretrain_step(model: MRMModel, optimizer: torch.optim.Optimizer, batch: Batch, lr: float,
                  train_cfg: TrainConfig) -> LossBreakdown:
    """One forward/backward pass and one AdamW update at learning rate ``lr``."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        out = forward_losses(model, batch, train_cfg.lam, train_cfg.mlm_enabled, train_cfg.mim_enabled)
    except ValueError as exc:
        raise ValueError(f"batch {batch.ids}: {exc}") from exc
    out.losses.L.backward()
    if train_cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return out.losses


# --------------------------------------------------------------------------
# checkpoints


def _optimizer_tensors(model: MRMModel, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    by_id = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_id[id(p)]
            out[f"opt.exp_avg.{name}"] = state["exp_avg"]
            out[f"opt.exp_avg_sq.{name}"] = state["exp_avg_sq"]
            out[f"opt.step.{name}"] = torch.as_tensor(state["step"], dtype=torch.float32).reshape(1)
    return out


def save_checkpoint(path: str | os.PathLike, model: MRMModel, optimizer: torch.optim.Optimizer,
                    step: int, train_cfg: TrainConfig) -> None:
    params = {n: p for n, p in model.named_parameters()}
    sections = {s: sorted(model.section(s)) for s in nets.SECTIONS}
    meta = {
        "kind": "pretrain",
        "step": step,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "config_hash": model.config.config_hash(),
        # all randomness is derived from (seed, epoch, record index)
        "rng": {"order_seed": train_cfg.seed, "mask_seed": train_cfg.mask.seed},
        "sections": sections,
    }
    write_container(path, meta, {**params, **_optimizer_tensors(model, optimizer)})


@dataclass
class Checkpoint:
    model: MRMModel
    optimizer: torch.optim.AdamW
    step: int
    train_config: TrainConfig
    metadata: dict


def load_checkpoint(path: str | os.PathLike, model_cfg: ModelConfig | None = None) -> Checkpoint:
    meta, tensors = read_container(path)
    if meta.get("kind") != "pretrain":
        raise CheckpointError(f"{path}: not a pre-training checkpoint (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if model_cfg is not None and model_cfg.config_hash() != cfg.config_hash():
        raise IncompatibleConfigError(
            f"checkpoint config {cfg.to_dict()} is incompatible with requested {model_cfg.to_dict()}")
    train_cfg = TrainConfig.from_dict(meta["train_config"])
    model = MRMModel(cfg)
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(tensors[name])
    optimizer = make_optimizer(model, train_cfg)
    for name in trainable_names(model, train_cfg):
        key = f"opt.exp_avg.{name}"
        if key in tensors:
            optimizer.state[params[name]] = {
                "step": tensors[f"opt.step.{name}"].reshape(()).clone(),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"opt.exp_avg_sq.{name}"].clone(),
            }
    return Checkpoint(model, optimizer, int(meta["step"]), train_cfg, meta)


def export_encoder(model: MRMModel, path: str | os.PathLike) -> None:
    """Write only the ``encoder`` section plus the model config."""
    cfg = model.config
    meta = {"kind": "encoder", "model_config": cfg.to_dict(), "encoder_hash": encoder_hash(cfg)}
    write_container(path, meta, model.section("encoder"))


def encoder_hash(cfg: ModelConfig) -> str:
    keys = ("image_size", "patch_size", "channels", "encoder_dim", "encoder_depth", "encoder_heads", "mlp_ratio")
    sub = ModelConfig(**{k: getattr(cfg, k) for k in keys})
    return sub.config_hash()


def load_encoder(path: str | os.PathLike, expected: ModelConfig | None = None):
    """Return ``(encoder_state, model_config)``; state names keep the ``encoder.`` prefix."""
    meta, tensors = read_container(path)
    if meta.get("kind") != "encoder":
        raise CheckpointError(f"{path}: not an encoder export (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if encoder_hash(cfg) != meta["encoder_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected is not None and encoder_hash(expected) != encoder_hash(cfg):
        raise IncompatibleConfigError(
            f"encoder export config {cfg.to_dict()} is incompatible with requested {expected.to_dict()}")
    stray = [n for n in tensors if not n.startswith("encoder.")]
    if stray:
        raise CheckpointError(f"{path}: unexpected non-encoder tensors {stray}")
    return tensors, cfg


def model_from_encoder(path: str | os.PathLike, expected: ModelConfig | None = None) -> MRMModel:
    """A full model whose encoder holds exported weights (decoders left zeroed)."""
    state, cfg = load_encoder(path, expected)
    model = MRMModel(cfg)
    enc = dict(model.encoder.named_parameters(prefix="encoder"))
    if set(enc) != set(state):
        raise CheckpointError(f"{path}: encoder parameter names do not match the config")
    with torch.no_grad():
        for name, p in enc.items():
            p.copy_(state[name])
    return model


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: MRMModel
    optimizer: torch.optim.AdamW
    step: int
    total_steps: int
    history: list[dict] = field(default_factory=list)


def schedule(n_records: int, train_cfg: TrainConfig) -> tuple[int, int, int]:
    steps_per_epoch = math.ceil(n_records / train_cfg.batch_size)
    total = train_cfg.epochs * steps_per_epoch
    warmup = train_cfg.resolved_warmup_epochs * steps_per_epoch
    return steps_per_epoch, total, warmup


def _read_log(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [dict(r) for r in csv.DictReader(fh)]
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()}
            for r in rows if int(r["step"]) < before_step]


def train(records: Sequence[Record], vocab: Vocabulary, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir: str | os.PathLike | None = None, resume_from: str | os.PathLike | None = None,
          stop_after: int | None = None, init_seed: int | None = None,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Pre-train from scratch or resume from a checkpoint.

    ``stop_after`` halts once that global step count is reached (the schedule
    still spans the full run), which is how interruption is simulated.
    With ``out_dir`` set, writes ``losses.csv`` and ``checkpoints/``.
    """
    prepared = [prepare_record(r, vocab, model_cfg) for r in records]
    steps_per_epoch, total, warmup = schedule(len(prepared), train_cfg)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model_cfg)
        if ckpt.train_config != train_cfg:
            raise IncompatibleConfigError("train config differs from the checkpoint's")
        model, optimizer, step = ckpt.model, ckpt.optimizer, ckpt.step
    else:
        model = nets.init_params(model_cfg, train_cfg.seed if init_seed is None else init_seed)
        optimizer = make_optimizer(model, train_cfg)
        step = 0

    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    writer = None
    fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "losses.csv"
        history = _read_log(log_path, step) if resume_from is not None else []
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    end = total if stop_after is None else min(total, stop_after)
    try:
        while step < end:
            epoch, pos = divmod(step, steps_per_epoch)
            order = epoch_order(len(prepared), train_cfg.seed, epoch)
            idx = order[pos * train_cfg.batch_size:(pos + 1) * train_cfg.batch_size]
            batch = make_batch(prepared, idx, train_cfg.mask, epoch)
            lr = lr_at(step, total, warmup, train_cfg.peak_lr)
            losses = pretrain_step(model, optimizer, batch, lr, train_cfg)
            row = {"step": step, "lr": lr, **losses.as_floats()}
            history.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if callback is not None:
                callback(step, row)
            step += 1
            if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{step:07d}.ckpt", model, optimizer, step, train_cfg)
            if step % 100 == 0:
                log.info("step %d/%d lr %.3g L_R %.4f L_I %.5f", step, total, lr, row["L_R"], row["L_I"])
        if out is not None:
            save_checkpoint(out / "checkpoints" / "last.ckpt", model, optimizer, step, train_cfg)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, optimizer, step, total, history)


@torch.no_grad()
def evaluate(model: MRMModel, prepared: Sequence[PreparedRecord], mask_cfg: MaskConfig,
             epoch: int = EVAL_EPOCH, batch_size: int = 64) -> dict:
    """Losses and masked-token accuracy on one deterministic masking pass."""
    model.eval()
    sq_err = n_px = nll = 0.0
    correct = n_tok = 0
    for start in range(0, len(prepared), batch_size):
        idx = list(range(start, min(start + batch_size, len(prepared))))
        batch = make_batch(prepared, idx, mask_cfg, epoch)
        out = forward_losses(model, batch)
        m = batch.masked
        lp = out.report_log_probs[m]
        tgt = batch.report_targets[m]
        nll += float(-lp.gather(1, tgt[:, None]).sum())
        correct += int((lp.argmax(-1) == tgt).sum())
        n_tok += int(m.sum())
        if batch.msk_pos.shape[1]:
            T = out.image_pred.shape[-1]
            picked = out.image_pred.gather(1, batch.msk_pos.unsqueeze(-1).expand(-1, -1, T))
            sq_err += float(((picked - batch.img_targets) ** 2).sum())
            n_px += picked.numel()
    return {
        "L_R": nll / n_tok if n_tok else 0.0,
        "L_I": sq_err / n_px if n_px else 0.0,
        "token_accuracy": correct / n_tok if n_tok else 1.0,
        "masked_tokens": n_tok,
    }
