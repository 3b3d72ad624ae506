import time

import numpy as np
import pytest
import torch

from mrm.masking import MaskConfig
from mrm.nets import ModelConfig, init_params
from mrm.pretrain import make_batch, prepare_record
from mrm.record_io import synth_generate

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch_size=2, encoder_dim=16, encoder_depth=2, encoder_heads=2,
                image_decoder_dim=8, image_decoder_depth=1, image_decoder_heads=2,
                report_decoder_dim=16, report_decoder_depth=1, report_decoder_heads=2,
                vocab_size=19, max_report_len=48)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def synth_records():
    return synth_generate(12, seed=4, image_size=16)


@pytest.fixture
def tiny_setup(synth_records):
    records, vocab = synth_records
    cfg = tiny_config(vocab_size=len(vocab))
    model = init_params(cfg, seed=0)
    prepared = [prepare_record(r, vocab, cfg) for r in records]
    batch = make_batch(prepared, list(range(4)), MaskConfig(seed=1), epoch=0)
    return cfg, model, prepared, batch


def randomize(model, seed=0, scale=0.3):
    """Move every parameter off its initial value (zero heads included)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def central_difference(fn, param: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        g[i] = (plus - minus) / (2 * eps)
    return grad


def brute_force_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


# Overfit micro-run: 8 records, desk preset, 2000 full-batch steps. The
# optimizer settings are a test choice; the desk defaults target real data.
MICRO_TRAIN = dict(epochs=2000, batch_size=8, seed=0, weight_decay=0.0, warmup_epochs=20,
                   peak_lr=8e-3, grad_clip=0.05, checkpoint_every=500)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    from mrm.pretrain import TrainConfig, train
    records, vocab = synth_generate(8, seed=0, image_size=64)
    cfg = ModelConfig.preset("desk", vocab_size=len(vocab))
    tc = TrainConfig(**MICRO_TRAIN)
    out = tmp_path_factory.mktemp("micro")
    t0 = time.perf_counter()
    result = train(records, vocab, cfg, tc, out_dir=out)
    seconds = time.perf_counter() - t0
    return dict(records=records, vocab=vocab, cfg=cfg, tc=tc, out=out, result=result, seconds=seconds)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
