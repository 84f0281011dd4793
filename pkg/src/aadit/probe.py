"""Post-hoc measurements on a trained model.

The domain probe is a classifier trained from scratch on frozen deep
features; its held-out accuracy is the residual domain information in the
features (lower means more domain-invariant).  It never touches θ_f.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import attend
from .errors import ConfigError, InputError
from .metrics import MetricsRow
from .nn import FeedForwardStack, sgd_step, softmax_xent, stack_backward, stack_forward, zero_grads
from .synth import SequenceSample
from .trainer import AdversarialModel, forward_pass


@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple[int, ...] = (32,)
    epochs: int = 8
    mu: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.mu > 0:
            raise ConfigError("probe needs epochs >= 1, batch_size >= 1 and mu > 0")


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def extract_features(model: AdversarialModel, samples: Sequence[SequenceSample], jobs: int = 1):
    """Deep features ``M_f(X)`` for every sequence, in input order."""
    def one(s):
        if s.X.shape[0] != model.M_f.input_dim:
            raise ConfigError(f"frames have {s.X.shape[0]} rows, M_f expects {model.M_f.input_dim}")
        return stack_forward(model.M_f, s.X)[0]
    return _map(one, samples, jobs)


def train_probe(train_x: np.ndarray, train_y, test_x: np.ndarray, test_y,
                config: ProbeConfig = ProbeConfig()) -> float:
    """Fit a fresh classifier on ``(dim, N)`` features and return held-out accuracy.

    Inputs are standardised with train-split statistics before fitting.
    """
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise InputError("probe needs at least two distinct labels in the train split")
    n_out = int(max(train_y.max(), test_y.max())) + 1
    mean = train_x.mean(axis=1, keepdims=True)
    std = train_x.std(axis=1, keepdims=True)
    std[std < 1e-12] = 1.0
    xs = (train_x - mean) / std
    xt = (test_x - mean) / std
    rng = np.random.default_rng(config.seed)
    net = FeedForwardStack.build([xs.shape[0], *config.hidden, n_out], rng, "probe")
    params = net.params()
    n = xs.shape[1]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            zero_grads(params)
            logits, cache = stack_forward(net, xs[:, idx])
            _, grad = softmax_xent(logits, train_y[idx])
            stack_backward(net, cache, grad)
            sgd_step(params, config.mu)
    logits, _ = stack_forward(net, xt)
    return float(np.mean(np.argmax(logits, axis=0) == test_y))


def _frames(feats, samples, attr: str):
    return np.hstack(feats), np.concatenate([getattr(s, attr) for s in samples])


def probe_domain_accuracy(model: AdversarialModel, train: Sequence[SequenceSample],
                          test: Sequence[SequenceSample], config: ProbeConfig = ProbeConfig(),
                          jobs: int = 1) -> float:
    xs, ys = _frames(extract_features(model, train, jobs), train, "D")
    xt, yt = _frames(extract_features(model, test, jobs), test, "D")
    return train_probe(xs, ys, xt, yt, config)


def raw_probe_accuracy(train, test, config: ProbeConfig = ProbeConfig()) -> float:
    xs, ys = _frames([s.X for s in train], train, "D")
    xt, yt = _frames([s.X for s in test], test, "D")
    return train_probe(xs, ys, xt, yt, config)


def class_accuracy(model: AdversarialModel, samples: Sequence[SequenceSample], jobs: int = 1) -> float:
    def one(s):
        logits = stack_forward(model.M_y, stack_forward(model.M_f, s.X)[0])[0]
        return int(np.sum(np.argmax(logits, axis=0) == s.Y)), s.T
    counts = _map(one, samples, jobs)
    return sum(c for c, _ in counts) / sum(n for _, n in counts)


def evaluate(model: AdversarialModel, samples: Sequence[SequenceSample], step: int = 0,
             jobs: int = 1) -> MetricsRow:
    """Frame-weighted losses and accuracies over a split (no parameter change)."""
    def one(s):
        fp = forward_pass(model, [s])
        l_sen, _ = softmax_xent(fp.logits_y, fp.Y)
        c_hit = int(np.sum(np.argmax(fp.logits_y, axis=0) == fp.Y))
        if fp.logits_d is None:
            return s.T, l_sen, c_hit, None, None
        l_dom, _ = softmax_xent(fp.logits_d, fp.D)
        return s.T, l_sen, c_hit, l_dom, int(np.sum(np.argmax(fp.logits_d, axis=0) == fp.D))
    parts = _map(one, samples, jobs)
    n = sum(p[0] for p in parts)
    row = MetricsRow(step,
                     l_senone=sum(p[0] * p[1] for p in parts) / n,
                     class_acc=sum(p[2] for p in parts) / n)
    if model.M_d is not None:
        row.l_domain = sum(p[0] * p[3] for p in parts) / n
        row.domain_acc = sum(p[4] for p in parts) / n
    return row


def attention_trace(model: AdversarialModel, sample: SequenceSample):
    if model.mode != "aadit":
        raise ConfigError(f"attention export needs an aadit model, got mode {model.mode!r}")
    F = stack_forward(model.M_f, sample.X)[0]
    return attend(model.attention, model.att_params, F)[1]


def export_attention(trace, path) -> None:
    """Write a heatmap CSV: one row per frame, one column per offset -L..R.

    Positions outside the truncated window are left blank.  Multi-head
    probabilities are averaged over heads.
    """
    cfg = trace.config
    probs = trace.probabilities
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [str(o) for o in range(-cfg.left, cfg.right + 1)])
        for t in range(trace.T):
            w.writerow([t] + [repr(float(p)) if ok else "" for p, ok in zip(probs[t], trace.valid[t])])


def read_attention(path) -> tuple[list[int], np.ndarray]:
    """Inverse of :func:`export_attention`; blanks become NaN."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    offsets = [int(x) for x in rows[0][1:]]
    data = np.array([[float(v) if v != "" else np.nan for v in r[1:]] for r in rows[1:]])
    return offsets, data


def attention_mass_by_class(model: AdversarialModel, samples: Sequence[SequenceSample],
                            n_classes: int) -> np.ndarray:
    """Average attention probability received by frames of each class.

    For every (query t, attended frame tau) pair, the probability is credited
    to the class of tau; the result is the mean received probability per
    attended-frame class.
    """
    total = np.zeros(n_classes)
    count = np.zeros(n_classes)
    for s in samples:
        trace = attention_trace(model, s)
        probs = trace.probabilities
        cls = s.Y[trace.index]
        np.add.at(total, cls[trace.valid], probs[trace.valid])
        np.add.at(count, cls[trace.valid], 1.0)
    return total / np.where(count > 0, count, 1.0)
