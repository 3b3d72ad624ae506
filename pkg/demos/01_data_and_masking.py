"""Synthetic records, patch grids and the two masking schemes.

Run: python3 demos/01_data_and_masking.py
"""
import numpy as np

from mrm.masking import MaskConfig, mask_image_patches, mask_report_tokens, num_masked, record_rng
from mrm.record_io import detokenize, downsample, patchify, synth_generate, tokenize

records, vocab = synth_generate(4, seed=0, image_size=64)
rec = records[0]
print("report:", rec.report)
ids = tokenize(rec.report, vocab)
print("token ids:", ids)
print("round trip:", detokenize(ids, vocab))

# encoder sees 32x32 inputs, the image decoder targets 64x64 patches on the same grid
low = patchify(downsample(rec.image), 4)
high = patchify(rec.image, 8)
print(f"grid: {low.shape[0]} cells, input patch {low.shape[1]} values, target patch {high.shape[1]} values")

cfg = MaskConfig()
print(f"75% of 64 cells -> {num_masked(64, cfg.image_ratio)} masked; 50% of 49 -> {num_masked(49, 0.5)} (half rounds up)")

# the same (seed, epoch, index) always gives the same masks, whatever the batch
for attempt in range(2):
    rng = record_rng(cfg.seed, epoch=3, index=0)
    img_view = mask_image_patches(low, high, cfg.image_ratio, rng)
    rep_view = mask_report_tokens(ids, cfg.report_ratio, rng)
    print(f"draw {attempt}: first masked cells {img_view.masked_positions[:6]}, "
          f"{len(rep_view.masked_positions)}/{len(ids)} tokens masked")

# report masking is per-token Bernoulli, so the count varies around the ratio
counts = [len(mask_report_tokens(ids, 0.5, record_rng(0, 0, i)).masked_positions) for i in range(2000)]
print(f"mean masked fraction over 2000 draws: {np.mean(counts) / len(ids):.3f}")
