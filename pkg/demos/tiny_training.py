"""Train a small Yin-Yang network for a few epochs and check its gradients.

Run: python demos/tiny_training.py
"""

from __future__ import annotations

from eventscan.config import preset
from eventscan.runner import load_datasets, new_run, train_config
from eventscan.training import evaluate, fit
from eventscan.verify import gradcheck

cfg = preset("yinyang")
cfg.data.n_train, cfg.data.n_val, cfg.data.n_test = 1000, 300, 300
cfg.optim.warmup, cfg.optim.decay_steps = 40, 400
data = load_datasets(cfg)
state = new_run(cfg, data)
fit(state, data.train, train_config(cfg, epochs=30), data.val,
    log=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['train_loss']:.3f}  val {r['val_acc']:.3f}"))
print("test accuracy", evaluate(state.net, data.test)["acc"])

rep = gradcheck(seed=0, n_nets=3)
print(f"tape vs finite differences: {rep['probes']} probes, max rel err {rep['max_rel_err']:.1e}")
