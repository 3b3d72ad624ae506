"""Ablation switches: which parameters each one freezes or rewires.

Run: python3 demos/05_ablations.py
"""
import torch

from mrm.nets import ModelConfig, global_pool, init_params
from mrm.pretrain import TrainConfig, forward_losses, make_batch, prepare_record, trainable_names
from mrm.record_io import synth_generate

records, vocab = synth_generate(8, seed=0, image_size=64)
base = ModelConfig.preset("desk", vocab_size=len(vocab))
prepared = [prepare_record(r, vocab, base) for r in records]
batch = make_batch(prepared, range(8), TrainConfig().mask, epoch=0)

# objectives: switching one off zeroes its loss and drops its decoder from the optimizer
model = init_params(base, 0)
torch.set_grad_enabled(False)
every = set(trainable_names(model, TrainConfig()))
for flags in ({"mlm_enabled": False}, {"mim_enabled": False}):
    tc = TrainConfig(**flags)
    frozen = sorted(every - set(trainable_names(model, tc)))
    losses = forward_losses(model, batch, mlm=tc.mlm_enabled, mim=tc.mim_enabled).losses
    print(flags, f"L_R={float(losses.L_R):.3f} L_I={float(losses.L_I):.4f}",
          f"frozen tensors: {len(frozen)} (e.g. {frozen[0]})")

# architecture switches change the model itself
for change in ({"super_resolution": False}, {"fusion_mode": "gmp"}, {"hybrid_image_restoration": True}):
    cfg = ModelConfig(**{**base.__dict__, **change})
    m = init_params(cfg, 0)
    # targets follow the config (input-resolution targets without super-resolution)
    b = make_batch([prepare_record(r, vocab, cfg) for r in records], range(8), TrainConfig().mask, epoch=0)
    print(change, f"{sum(p.numel() for p in m.parameters()):,} parameters,",
          f"L={float(forward_losses(m, b).losses.L):.4f}")

# both pooling modes ignore the order of the visible patches
x = torch.randn(1, 16, 8)
perm = x[:, torch.randperm(16)]
for mode in ("gap", "gmp"):
    print(mode, "order-invariant:", torch.allclose(global_pool(x, mode), global_pool(perm, mode)))
