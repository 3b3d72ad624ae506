"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run under pytest (the lines are repeated in the terminal summary) or directly
with ``python tests/test_acceptance.py``.
"""

import math
import sys
import time
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, MICRO_TRAIN, brute_force_auc, central_difference, randomize  # noqa: E402
from mrm import nets  # noqa: E402
from mrm.masking import MaskConfig, mask_image_patches, mask_report_tokens  # noqa: E402
from mrm.nets import ModelConfig, init_params  # noqa: E402
from mrm.objectives import loss_image, loss_report, loss_total  # noqa: E402
from mrm.pretrain import (  # noqa: E402
    TrainConfig, evaluate, forward_losses, lr_at, make_batch, prepare_record, schedule, train,
)
from mrm.record_io import Record, Vocabulary, synth_generate, synth_shape_classification  # noqa: E402
from mrm.transfer import LR_GRID, LabeledSet, auc, run_protocol  # noqa: E402


def report(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def _expected_masked(total: int, ratio: float) -> int:
    # independent oracle: decimal round-half-up of the exact product
    return int((Decimal(str(ratio)) * total).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _synth_batch(seed: int, cfg_kw=None, n=4, image_size=32, dtype=torch.float32):
    records, vocab = synth_generate(n, seed=seed, image_size=image_size)
    cfg = ModelConfig.preset("desk", image_size=image_size // 2, vocab_size=len(vocab), **(cfg_kw or {}))
    prepared = [prepare_record(r, vocab, cfg) for r in records]
    return cfg, make_batch(prepared, range(n), MaskConfig(seed=seed), epoch=0).to(dtype)


# --------------------------------------------------------------------------


def test_01_masking_exactness():
    t0 = time.perf_counter()
    mismatches = []
    for n in (16, 49, 196):
        for ratio in (0.0, 0.5, 0.75):
            expect = _expected_masked(n, ratio)
            for seed in range(5):
                view = mask_image_patches(np.zeros((n, 1)), np.zeros((n, 1)), ratio, np.random.default_rng(seed))
                if len(view.masked_positions) != expect:
                    mismatches.append((n, ratio, seed, len(view.masked_positions), expect))
    vit_grid = len(mask_image_patches(np.zeros((196, 1)), np.zeros((196, 1)), 0.75,
                                      np.random.default_rng(0)).masked_positions)
    view = mask_report_tokens(np.full(100_000, 5), 0.5, np.random.default_rng(0))
    frac = len(view.masked_positions) / 100_000
    elapsed = time.perf_counter() - t0
    ok = not mismatches and vit_grid == 147 and abs(frac - 0.5) <= 0.01 and elapsed < 5
    report(1, "masking exactness", ok,
           f"9 grid/ratio cells exact, 196@0.75 -> {vit_grid}, report fraction {frac:.4f}, {elapsed:.2f}s")


def test_02_masked_only_loss_support():
    t0 = time.perf_counter()
    cfg, batch = _synth_batch(2)
    model = randomize(init_params(cfg, 0), seed=2, scale=0.1)
    with torch.no_grad():
        out = forward_losses(model, batch)
        lp, pred = out.report_log_probs, out.image_pred
        base_r = loss_report(lp[batch.masked], batch.report_targets[batch.masked])
        base_i = loss_image(pred, batch.img_targets, batch.msk_pos)
        gen = torch.Generator().manual_seed(0)
        changed = 0
        for trial in range(20):
            lp2 = lp.clone()
            noise = torch.randn(lp.shape, generator=gen) * 10
            lp2[batch.visible] += noise[batch.visible]
            pred2 = pred.clone()
            vis = batch.vis_pos.unsqueeze(-1).expand(-1, -1, pred.shape[-1])
            pred2.scatter_add_(1, vis, torch.randn(vis.shape, generator=gen) * 10)
            r = loss_report(lp2[batch.masked], batch.report_targets[batch.masked], check_normalized=False)
            i = loss_image(pred2, batch.img_targets, batch.msk_pos)
            changed += int(not torch.equal(r, base_r)) + int(not torch.equal(i, base_i))
    elapsed = time.perf_counter() - t0
    report(2, "masked-only loss support", changed == 0 and elapsed < 10,
           f"{changed} of 40 visible-position perturbations changed a loss, {elapsed:.2f}s")


def test_03_initialization_oracles():
    t0 = time.perf_counter()
    worst_r = worst_i = 0.0
    for seed in range(5):
        cfg, batch = _synth_batch(10 + seed)
        model = init_params(cfg, seed)
        with torch.no_grad():
            losses = forward_losses(model, batch).losses
        worst_r = max(worst_r, abs(float(losses.L_R) - math.log(cfg.vocab_size)))
        target_sq = float(np.mean(batch.img_targets.numpy().astype(np.float64) ** 2))
        worst_i = max(worst_i, abs(float(losses.L_I) - target_sq))
    elapsed = time.perf_counter() - t0
    report(3, "initialization oracles", worst_r < 1e-6 and worst_i < 1e-6 and elapsed < 5,
           f"max |L_R - ln V| {worst_r:.2e}, max |L_I - mean(t^2)| {worst_i:.2e}, {elapsed:.2f}s")


def _micro_gradcheck_setup():
    words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]
    vocab = Vocabulary.from_words(words)
    cfg = ModelConfig(image_size=4, patch_size=2, channels=1, encoder_dim=8, encoder_depth=1, encoder_heads=2,
                      image_decoder_dim=8, image_decoder_depth=1, image_decoder_heads=2,
                      report_decoder_dim=8, report_decoder_depth=1, report_decoder_heads=2,
                      vocab_size=len(vocab), max_report_len=8)
    rng = np.random.default_rng(0)
    records = [Record(rng.random((8, 8)), " ".join(rng.choice(words, size=int(k))), f"g{i}")
               for i, k in enumerate((5, 7, 6))]
    prepared = [prepare_record(r, vocab, cfg) for r in records]
    batch = make_batch(prepared, range(3), MaskConfig(0.5, 0.5, seed=3), epoch=0).to(torch.float64)
    model = randomize(init_params(cfg, 0).double(), seed=1, scale=0.3)
    return cfg, model, batch


def test_04_gradient_check():
    t0 = time.perf_counter()
    cfg, model, batch = _micro_gradcheck_setup()
    assert cfg.num_patches == 4 and cfg.vocab_size == 11
    assert int(batch.masked.sum()) > 0 and batch.msk_pos.shape[1] > 0

    def loss():
        return forward_losses(model, batch, lam=1.0).losses.L

    model.zero_grad()
    loss().backward()
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = central_difference(loss, p, eps=1e-6)
            analytic = p.grad
            denom = float(analytic.norm() + numeric.norm())
            rel = 0.0 if denom < 1e-12 else float((analytic - numeric).norm()) / denom
            if rel > worst:
                worst, worst_name = rel, name
    elapsed = time.perf_counter() - t0
    n_params = sum(p.numel() for p in model.parameters())
    report(4, "gradient check", worst < 1e-4 and elapsed < 120,
           f"{n_params} float64 parameters, worst per-tensor relative error {worst:.2e} ({worst_name}), "
           f"{elapsed:.1f}s")


def test_05_lambda_linearity():
    cfg, batch = _synth_batch(5, dtype=torch.float64)
    model = randomize(init_params(cfg, 0).double(), seed=5, scale=0.05)
    exact = True
    with torch.no_grad():
        ref = forward_losses(model, batch, lam=1.0).losses
        for lam in (0.5, 1.0, 2.0):
            got = forward_losses(model, batch, lam=lam).losses
            exact &= torch.equal(got.L_R, ref.L_R) and torch.equal(got.L_I, ref.L_I)
            exact &= float(got.L) == float(ref.L_R) + lam * float(ref.L_I)
            exact &= float(loss_total(ref.L_R, ref.L_I, lam).L) == float(ref.L_R) + lam * float(ref.L_I)
    report(5, "lambda linearity and L = L_R + lambda*L_I", bool(exact),
           f"L_R={float(ref.L_R):.6f} L_I={float(ref.L_I):.6f}, identity exact for lambda in (0.5, 1, 2)")


def test_06_super_resolution_shape_law():
    widths = {}
    for superres in (True, False):
        cfg = ModelConfig.preset("desk", image_size=32, patch_size=16, super_resolution=superres)
        model = init_params(cfg, 0)
        with torch.no_grad():
            out = nets.decode_image(model, torch.randn(1, 1, cfg.encoder_dim), torch.tensor([[0]]),
                                    torch.tensor([[1, 2, 3]]))
        widths[superres] = (out.shape[-1], cfg.target_dim)
    ok = widths[True] == (1024, 1024) and widths[False] == (256, 256)
    report(6, "super-resolution shape law", ok,
           f"p=16 head width {widths[True][0]} with super-resolution, {widths[False][0]} without")


def test_07_overfit_micro_run(micro_run):
    r = micro_run
    res = r["result"]
    prepared = [prepare_record(rec, r["vocab"], r["cfg"]) for rec in r["records"]]
    ev = evaluate(res.model, prepared, r["tc"].mask)
    final_li = res.history[-1]["L_I"]
    t0 = time.perf_counter()
    resumed_ok = []
    for k in (500, 1000, 1500):
        again = train(r["records"], r["vocab"], r["cfg"], r["tc"],
                      resume_from=r["out"] / "checkpoints" / f"step_{k:07d}.ckpt")
        resumed_ok.append(again.history == res.history[k:])
    total = r["seconds"] + time.perf_counter() - t0
    steps = len(res.history)
    ok = (steps <= 2000 and final_li < 1e-3 and ev["L_I"] < 1e-3 and ev["token_accuracy"] == 1.0
          and all(resumed_ok) and r["seconds"] < 600)
    report(7, "overfit micro-run", ok,
           f"{steps} steps in {r['seconds']:.0f}s, final logged L_I {final_li:.2e}, held-out-mask L_I "
           f"{ev['L_I']:.2e}, masked-token accuracy {ev['token_accuracy']:.3f}, "
           f"bitwise resume from 500/1000/1500: {resumed_ok} (suite {total:.0f}s)")


def test_08_ablation_isolation():
    records, vocab = synth_generate(8, seed=1, image_size=64)
    cfg = ModelConfig.preset("desk", vocab_size=len(vocab))
    start = {n: p.detach().clone() for n, p in init_params(cfg, 0).named_parameters()}
    frozen_ok = {}
    for flag, section in (("mlm_enabled", "report_decoder"), ("mim_enabled", "image_decoder")):
        tc = TrainConfig(epochs=100, batch_size=8, peak_lr=1e-3, warmup_epochs=5, **{flag: False})
        model = train(records, vocab, cfg, tc).model
        frozen_ok[section] = all(torch.equal(p, start[n]) for n, p in model.named_parameters()
                                 if n.startswith(section + "."))
        moved = not torch.equal(model.encoder.patch_embed.weight, start["encoder.patch_embed.weight"])
        frozen_ok[section] &= moved

    model = randomize(init_params(cfg, 0).double(), seed=8, scale=0.1)
    x = torch.rand(1, 12, cfg.patch_dim, dtype=torch.float64)
    pos = torch.randperm(cfg.num_patches)[:12][None]
    perm = torch.randperm(12)
    ids = torch.tensor([3, 9, 4, 12])
    with torch.no_grad():
        a = nets.fuse(model, ids, nets.global_pool(nets.encode(model, x, pos)[0], "gap"))
        b = nets.fuse(model, ids, nets.global_pool(nets.encode(model, x[:, perm], pos[:, perm])[0], "gap"))
    gap_dev = float((a - b).abs().max())
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    gap, gmp = nets.global_pool(emb, "gap"), nets.global_pool(emb, "gmp")
    differ = not torch.equal(gap, gmp)
    ok = all(frozen_ok.values()) and gap_dev < 1e-12 and differ
    report(8, "ablation isolation", ok,
           f"sections frozen over 100 steps {frozen_ok}, GAP fusion permutation deviation {gap_dev:.1e}, "
           f"counterexample GAP {gap.tolist()} vs GMP {gmp.tolist()}")


# transfer protocol: pre-train on report/image records, fine-tune on disc vs rectangle
TRANSFER_PRETRAIN = dict(epochs=250, batch_size=64, peak_lr=2e-3, warmup_epochs=25)
TRANSFER_SEEDS = (0, 1, 2)
TRANSFER_STEPS = 160


@pytest.mark.slow
def test_09_transfer_protocol():
    t0 = time.perf_counter()
    records, vocab = synth_generate(1024, seed=100, image_size=64)
    cfg = ModelConfig.preset("desk", vocab_size=len(vocab))
    pretrained = train(records, vocab, cfg, TrainConfig(**TRANSFER_PRETRAIN)).model
    t_pre = time.perf_counter() - t0

    sets = {}
    for split, (n, seed) in {"train": (1000, 1), "val": (100, 2), "test": (1000, 3)}.items():
        x, y = synth_shape_classification(n, seed=seed, image_size=64)
        sets[split] = LabeledSet(x, y)
    encoders = {"pretrained": pretrained}
    for s in TRANSFER_SEEDS:
        encoders[f"random{s}"] = init_params(cfg, 1000 + s)

    def skip(name, ratio, seed):
        # one random baseline per seed, and none at 100% labels (no criterion needs it; keeps runtime in budget)
        return name.startswith("random") and (name != f"random{seed}" or ratio == 1.0)

    rows = run_protocol(encoders, sets["train"], sets["val"], sets["test"], ratios=(0.01, 0.10, 1.00),
                        seeds=TRANSFER_SEEDS, steps=TRANSFER_STEPS, skip=skip)
    table = {}
    for row in rows:
        kind = "pretrained" if row["encoder"] == "pretrained" else "random"
        table.setdefault((kind, row["ratio"]), []).append(row["test_auc"])
    mean = {k: float(np.mean(v)) for k, v in table.items()}
    elapsed = time.perf_counter() - t0
    full = mean[("pretrained", 1.0)]
    one = (mean[("pretrained", 0.01)], mean[("random", 0.01)])
    grid_ok = all(row["chosen_lr"] in LR_GRID for row in rows)
    ok = full > 0.95 and one[0] > one[1] and elapsed < 1200 and grid_ok
    cells = ", ".join(f"{k[0]}@{k[1]:g}: {m:.3f}" for k, m in sorted(mean.items()))
    per_seed = [round(a, 3) for a in table[("pretrained", 0.01)]], [round(a, 3) for a in table[("random", 0.01)]]
    report(9, "transfer protocol", ok,
           f"mean test AUC over seeds {cells}; 1% per seed pretrained {per_seed[0]} vs random {per_seed[1]}; "
           f"pre-training {t_pre:.0f}s, total {elapsed:.0f}s")


def test_10_auc_oracle_equivalence():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        worst = max(worst, abs(auc(scores, labels) - brute_force_auc(scores, labels)))
    example = auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = worst <= 1e-12 and example == brute_force_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    report(10, "AUC oracle equivalence", ok,
           f"max |rank AUC - pairwise AUC| over 1000 tied instances {worst:.1e}, worked example {example}")


def test_11_schedule_endpoints():
    tc = TrainConfig()
    _, total, warmup = schedule(1000, tc)
    start, peak, last = (lr_at(s, total, warmup, tc.peak_lr) for s in (0, warmup, total - 1))
    ok = start == 0.0 and peak == 1.5e-4 and last < 1e-7 * tc.peak_lr
    report(11, "schedule endpoints", ok,
           f"{total} steps, warmup {warmup}: lr(0)={start}, lr(warmup)={peak}, lr(last)={last:.2e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
