"""Adam, the scheduled-sampling training step, evaluation and the fit loop."""

import csv
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import data as D
from . import tensor as T
from .decoding import beam_search, default_max_len, greedy_decode
from .metrics import EditOps, edit_distance, error_rate
from .model import MALipNet
from .seq2seq import nll_loss, run_decoder

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "loss", "error_rate", "ss_ratio", "wall_seconds")


class Adam:
    def __init__(self, store, lr, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.parameters()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.parameters()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for n, p in self.store.parameters():
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            update = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = (p.data - update).astype(np.float32)


def clip_grad_norm(store, max_norm):
    grads = [p.grad for _, p in store.parameters() if p.grad is not None]
    total = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in store.parameters():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def train_step(model, batch, opt, ss_ratio, rng, grad_clip=0.0):
    """Forward, NLL, backward and one Adam update. Returns the loss value."""
    model.store.zero_grad()
    loss = model.loss(batch.clip, batch.targets, ss_ratio, rng, training=True)
    T.check_finite([("loss", loss.data)])
    loss.backward()
    T.check_finite((f"grad of {n}", p.grad) for n, p in model.store.parameters())
    if grad_clip:
        clip_grad_norm(model.store, grad_clip)
    opt.step()
    return float(loss.data)


@dataclass
class EvalResult:
    loss: float
    error_rate: float
    ops: EditOps
    hypotheses: dict  # sample index -> token list


def _length_buckets(samples, indices, batch_size):
    """Batches of equal frame count, so no padding enters inference."""
    by_len = {}
    for i in indices:
        by_len.setdefault(samples[i][0].shape[0], []).append(i)
    for n in sorted(by_len):
        group = by_len[n]
        for s in range(0, len(group), batch_size):
            yield group[s : s + batch_size]


def _shuffled_buckets(samples, indices, batch_size, rng):
    """Shuffled equal-length batches; training sees no padding either."""
    order = [int(i) for i in rng.permutation(indices)]
    batches = list(_length_buckets(samples, order, batch_size))
    return [batches[k] for k in rng.permutation(len(batches))]


def evaluate(model, samples, indices, beam_width=6, batch_size=32, greedy=False):
    """Teacher-forced loss plus micro-averaged error rate of decoded output."""
    total_loss, n = 0.0, 0
    ops = EditOps()
    hyps = {}
    with T.no_grad():
        for chunk in _length_buckets(samples, indices, batch_size):
            batch = D.collate([samples[i] for i in chunk], chunk)
            enc = model.encode(batch.clip, training=False)
            logp, _ = run_decoder(enc, model.store, batch.targets, 1.0)
            total_loss += float(nll_loss(logp, batch.targets).data) * len(chunk)
            n += len(chunk)
            max_len = default_max_len(enc.length)
            if greedy or beam_width == 1:
                decoded = [h.tokens for h in greedy_decode(enc, model.store, max_len)]
            else:
                decoded = [
                    beam_search(enc.select([b]), model.store, beam_width, max_len).tokens
                    for b in range(len(chunk))
                ]
            for i, tokens in zip(chunk, decoded):
                hyps[i] = tokens
                ops = ops + edit_distance(D.strip_label(samples[i][1]), tokens)
    rate = error_rate(ops) if ops.N else float("nan")
    return EvalResult(total_loss / max(n, 1), rate, ops, hyps)


class MetricsLog:
    def __init__(self, path, wall_time=False):
        self.path = path
        self.wall_time = wall_time
        self.t0 = time.perf_counter()
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)

    def row(self, epoch, split, loss, rate, ss):
        wall = f"{time.perf_counter() - self.t0:.3f}" if self.wall_time else ""
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, split, f"{loss:.6f}", "" if rate is None else f"{rate:.6f}", f"{ss:.4f}", wall]
            )


@dataclass
class FitResult:
    model: MALipNet
    test: EvalResult
    test_greedy: EvalResult
    out_dir: str


def fit(cfg, samples=None, vocab_size=None, progress=True):
    """Train on the hash-split train set and evaluate on test; write artefacts.

    Writes ``config.txt``, ``metrics.csv`` and ``model.ckpt`` into
    ``cfg.out_dir``.
    """
    if samples is None:
        samples, vocab_size = D.load_all(cfg.data)
    H, W = samples[0][0].shape[1:]
    cfg = replace(cfg, height=H, width=W)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())

    train_idx = D.split_indices(len(samples), "train")
    if cfg.max_train_samples:
        train_idx = train_idx[: cfg.max_train_samples]
    val_idx = D.split_indices(len(samples), "val")
    test_idx = D.split_indices(len(samples), "test")

    model = MALipNet(cfg.model_config(vocab_size), seed=cfg.seed)
    opt = Adam(model.store, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    mlog = MetricsLog(os.path.join(cfg.out_dir, "metrics.csv"), cfg.log_wall_time)
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        ss = cfg.ss_ratio(epoch)
        losses = []
        for chunk in _shuffled_buckets(samples, train_idx, cfg.batch_size, rng):
            batch = D.collate([samples[i] for i in chunk], chunk)
            losses.append(train_step(model, batch, opt, ss, rng, cfg.grad_clip))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        mlog.row(epoch, "train", train_loss, None, ss)
        val = evaluate(model, samples, val_idx, greedy=True) if val_idx else None
        if val is not None:
            mlog.row(epoch, "val", val.loss, val.error_rate, ss)
        if progress:
            msg = f"epoch {epoch + 1}/{cfg.epochs} ss={ss:.2f} train_loss={train_loss:.4f}"
            if val is not None:
                msg += f" val_loss={val.loss:.4f} val_greedy_er={val.error_rate:.4f}"
            log.info("%s (%.1fs)", msg, time.perf_counter() - t0)

    model.save(os.path.join(cfg.out_dir, "model.ckpt"))
    test = evaluate(model, samples, test_idx, beam_width=cfg.beam_width)
    test_greedy = evaluate(model, samples, test_idx, greedy=True)
    ss_final = cfg.ss_ratio(cfg.epochs - 1)
    mlog.row(cfg.epochs, "test", test.loss, test.error_rate, ss_final)
    mlog.row(cfg.epochs, "test_greedy", test_greedy.loss, test_greedy.error_rate, ss_final)
    if progress:
        log.info(
            "test error rate: beam(K=%d)=%.4f greedy=%.4f",
            cfg.beam_width,
            test.error_rate,
            test_greedy.error_rate,
        )
    return FitResult(model, test, test_greedy, cfg.out_dir)
