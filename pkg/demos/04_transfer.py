"""Label-efficient transfer: a pre-trained encoder against random initialization.

Pre-trains on 1024 synthetic records, then fine-tunes on the
disc-vs-rectangle task at 1%, 10% and 100% of the labels with one seed.
About 11 minutes on one core.
Run: python3 demos/04_transfer.py
"""
import torch

from mrm.nets import ModelConfig, init_params
from mrm.pretrain import TrainConfig, train
from mrm.record_io import synth_generate, synth_shape_classification
from mrm.transfer import LabeledSet, run_protocol

torch.set_num_threads(1)
records, vocab = synth_generate(1024, seed=100, image_size=64)
cfg = ModelConfig.preset("desk", vocab_size=len(vocab))
pretrained = train(records, vocab, cfg, TrainConfig(epochs=250, batch_size=64, peak_lr=2e-3, warmup_epochs=25)).model

splits = {name: LabeledSet(*synth_shape_classification(n, seed=s, image_size=64))
          for name, (n, s) in {"train": (1000, 1), "val": (100, 2), "test": (1000, 3)}.items()}
encoders = {"pretrained": pretrained, "random": init_params(cfg, 1000)}
rows = run_protocol(encoders, splits["train"], splits["val"], splits["test"], ratios=(0.01, 0.1, 1.0))
print(f"{'encoder':<11}{'labels':>7}{'n':>6}{'epochs':>8}{'lr':>8}{'val AUC':>9}{'test AUC':>10}")
for r in rows:
    print(f"{r['encoder']:<11}{r['ratio']:>7.0%}{r['subset_size']:>6}{r['epochs']:>8}{r['chosen_lr']:>8g}"
          f"{r['val_auc']:>9.3f}{r['test_auc']:>10.3f}")
