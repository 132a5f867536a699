"""Epoch loop, metrics CSV and checkpoint cadence."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time

import numpy as np

from ..nn import build_model
from ..optim import Schedule, lr_at, make_optimizer, sam_step, sgd_step, stage_controller
from ..rng import STREAM_SHUFFLE, make_rng
from ..perturb import scope_mask
from .checkpoint import checkpoint_load, checkpoint_save
from .config import RunConfig, parse_config
from .data import load_dataset

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc",
                  "eps_scaled_norm_mean", "degenerate_events", "wall_ms"]


class TrainingDiverged(RuntimeError):
    pass


def fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def evaluate(model, data, batch=1024):
    """Eval-mode (running statistics) plain cross-entropy and accuracy."""
    losses, correct = 0.0, 0
    for lo in range(0, len(data), batch):
        xb, yb = data.X[lo:lo + batch], data.y[lo:lo + batch]
        logits = model.predict(xb)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        losses += -logp[np.arange(len(yb)), yb].sum()
        correct += int((logits.argmax(axis=1) == yb).sum())
    return losses / len(data), correct / len(data)


def _static_mask(cfg, model):
    p = cfg.optim.perturb
    if p is None or p.scope.kind == "fisher_topk":
        return None
    return scope_mask(p.scope, model.registry, None, model.num_params)


def _read_rows(path, upto):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto]


def train(config, out_dir=None, resume_from=None, until_epoch=None):
    """Run (or resume) an experiment; returns the run directory.

    ``until_epoch`` stops early after that many epochs, leaving a checkpoint
    that a later call with ``resume_from`` continues bit-identically.
    """
    cfg = config if isinstance(config, RunConfig) else parse_config(config)
    out_dir = out_dir or cfg.output_dir
    if not out_dir:
        raise ValueError("no output directory given")
    os.makedirs(out_dir, exist_ok=True)
    cfg_dict = cfg.to_dict()
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")

    train_set, test_set = load_dataset(cfg.data)
    n_batches = len(train_set) // cfg.batch_size
    if n_batches < 1:
        raise ValueError("training split smaller than one batch")
    total_steps = cfg.epochs * n_batches
    schedule = Schedule(cfg.optim.schedule, cfg.optim.base.lr, total_steps)

    if resume_from:
        ck = checkpoint_load(resume_from, cfg.optim.base)
        model, optimizer, rng = ck.model, ck.optimizer, ck.rng
        start_epoch, step = ck.epoch, ck.step
    else:
        model = build_model(cfg.model, cfg.seed)
        optimizer = make_optimizer(cfg.optim.base, model.num_params)
        rng = make_rng(cfg.seed, STREAM_SHUFFLE)
        start_epoch, step = 0, 0

    mask = _static_mask(cfg, model)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    timing_path = os.path.join(out_dir, "timing.csv")
    rows = _read_rows(metrics_path, start_epoch) if resume_from else []
    timing = _read_rows(timing_path, start_epoch) if resume_from else []
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)

    for epoch in range(start_epoch, stop):
        kind = stage_controller(cfg.optim, epoch)
        order = rng.permutation(len(train_set))
        lr_epoch = lr_at(schedule, step)
        norms, degenerate = [], 0
        t0 = time.perf_counter()
        for b in range(n_batches):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = train_set.X[sel], train_set.y[sel]
            lr = lr_at(schedule, step)
            try:
                if kind == "sam":
                    sm = sam_step(model, xb, yb, cfg.optim.perturb, optimizer, lr,
                                  m=cfg.optim.m, mask=mask, smoothing=cfg.label_smoothing,
                                  short_circuit=cfg.short_circuit)
                    norms.append(sm.eps_scaled_norm)
                    degenerate += sm.degenerate_events
                else:
                    sgd_step(model, xb, yb, optimizer, lr, cfg.label_smoothing)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"epoch {epoch + 1}, batch {b}: {exc}; last checkpoint kept at {ckpt_path}"
                ) from exc
            step += 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        tr_loss, tr_acc = evaluate(model, train_set)
        te_loss, te_acc = evaluate(model, test_set)
        row = [epoch + 1, lr_epoch, tr_loss, tr_acc, te_loss, te_acc,
               float(np.mean(norms)) if norms else None, degenerate,
               wall_ms if cfg.record_wall_ms else None]
        rows.append([fmt(v) for v in row])
        timing.append([str(epoch + 1), fmt(wall_ms), kind])
        log.info("epoch %d lr %.4g train %.4f/%.4f test %.4f/%.4f",
                 epoch + 1, lr_epoch, tr_loss, tr_acc, te_loss, te_acc)
        _write_csv(metrics_path, METRICS_HEADER, rows)
        _write_csv(timing_path, ["epoch", "wall_ms", "kind"], timing)
        done = epoch + 1
        if done == stop or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0):
            checkpoint_save(ckpt_path, model, optimizer, rng, done, step, cfg_dict)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                checkpoint_save(os.path.join(out_dir, f"checkpoint_epoch{done:04d}.json"),
                                model, optimizer, rng, done, step, cfg_dict)
    if start_epoch >= stop:
        checkpoint_save(ckpt_path, model, optimizer, rng, start_epoch, step, cfg_dict)
    return out_dir


def _write_csv(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
