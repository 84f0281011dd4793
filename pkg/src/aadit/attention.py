"""Local (time-restricted) self-attention over a sequence of deep features.

For frame t the window is t-L .. t+R, truncated at the sequence edges, and
the softmax renormalises over whatever positions remain.  Scores are either
scaled dot products or additive (``g . tanh(k + q + b)``).  Values are the
raw features themselves, so a single-head context vector has the feature
dimension, not the key dimension.

Window-offset convention: offset ``j`` in ``0 .. L+R`` refers to frame
``t - L + j``.  Per-frame arrays are shaped ``(T, L+R+1)``; entries outside
the truncated window hold probability 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, InternalError
from .nn import ParamBlock, glorot_uniform

SCORE_TYPES = ("dot", "additive")


@dataclass(frozen=True)
class AttentionConfig:
    left: int = 5
    right: int = 5
    r_a: int = 16
    score: str = "additive"
    heads: int = 1
    pos_enc: bool = False

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ConfigError(f"window contexts must be >= 0, got L={self.left}, R={self.right}")
        if self.r_a < 1:
            raise ConfigError(f"key/query dimension must be >= 1, got {self.r_a}")
        if self.heads < 1:
            raise ConfigError(f"head count must be >= 1, got {self.heads}")
        if self.r_a % self.heads:
            raise ConfigError(f"r_a={self.r_a} is not divisible by heads={self.heads}")
        if self.score not in SCORE_TYPES:
            raise ConfigError(f"unknown score type {self.score!r}; expected one of {SCORE_TYPES}")

    @property
    def width(self) -> int:
        return self.left + self.right + 1

    @property
    def head_dim(self) -> int:
        return self.r_a // self.heads

    def head_context_dim(self, r_f: int) -> int:
        return r_f + (self.width if self.pos_enc else 0)

    def context_dim(self, r_f: int) -> int:
        return self.heads * self.head_context_dim(r_f)


@dataclass
class AttentionHead:
    W_k: ParamBlock
    W_q: ParamBlock
    g: ParamBlock | None = None
    b: ParamBlock | None = None
    p: ParamBlock | None = None

    def params(self) -> list[ParamBlock]:
        return [blk for blk in (self.W_k, self.W_q, self.g, self.b, self.p) if blk is not None]


@dataclass
class AttentionParams:
    heads: list[AttentionHead]

    @classmethod
    def init(cls, config: AttentionConfig, r_f: int, rng: np.random.Generator, name: str = "att"):
        d = config.head_dim
        heads = []
        for h in range(config.heads):
            pre = f"{name}.{h}"
            head = AttentionHead(
                ParamBlock(f"{pre}.W_k", glorot_uniform(rng, d, r_f)),
                ParamBlock(f"{pre}.W_q", glorot_uniform(rng, d, r_f)),
            )
            if config.score == "additive":
                dg = d + (config.width if config.pos_enc else 0)
                head.g = ParamBlock(f"{pre}.g", glorot_uniform(rng, dg, 1))
                head.b = ParamBlock(f"{pre}.b", np.zeros((dg, 1)))
            if config.pos_enc:
                head.p = ParamBlock(f"{pre}.p", np.zeros((config.width, 1)))
            heads.append(head)
        return cls(heads)

    def params(self) -> list[ParamBlock]:
        out = []
        for head in self.heads:
            out.extend(head.params())
        return out

    @property
    def feature_dim(self) -> int:
        return self.heads[0].W_k.shape[1]


def param_count(config: AttentionConfig, r_f: int) -> int:
    d = config.head_dim
    per_head = 2 * d * r_f
    if config.score == "additive":
        per_head += 2 * (d + (config.width if config.pos_enc else 0))
    if config.pos_enc:
        per_head += config.width
    return config.heads * per_head


def project(params: AttentionParams, F: np.ndarray):
    """Keys and queries for every head: two lists of ``(r_a/H, T)`` matrices."""
    if F.ndim != 2 or F.shape[0] != params.feature_dim:
        raise ConfigError(f"features must have {params.feature_dim} rows, got shape {F.shape}")
    keys = [head.W_k.value @ F for head in params.heads]
    queries = [head.W_q.value @ F for head in params.heads]
    return keys, queries


def score_dot(k: np.ndarray, q: np.ndarray, key_len: int | None = None) -> float:
    k = np.ravel(k)
    q = np.ravel(q)
    n = k.size if key_len is None else key_len
    return float(k @ q) / math.sqrt(n)


def score_additive(k, q, g, b) -> float:
    return float(np.ravel(g) @ np.tanh(np.ravel(k) + np.ravel(q) + np.ravel(b)))


def window_index(T: int, left: int, right: int):
    """Clipped frame indices ``(T, W)`` and the boolean validity mask."""
    offsets = np.arange(left + right + 1) - left
    idx = np.arange(T)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < T)
    return np.clip(idx, 0, T - 1), valid


def _scatter_window(values: np.ndarray, T: int, left: int) -> np.ndarray:
    """Adjoint of the window gather: sum ``values[:, t, j]`` into column ``t - L + j``."""
    rows, _, width = values.shape
    out = np.zeros((rows, T))
    for j in range(width):
        o = j - left
        t0, t1 = max(0, -o), min(T, T - o)
        if t0 < t1:
            out[:, t0 + o:t1 + o] += values[:, t0:t1, j]
    return out


@dataclass
class HeadTrace:
    keys: np.ndarray
    queries: np.ndarray
    window_keys: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    tanh_act: np.ndarray | None = None
    pos_tanh: np.ndarray | None = None


@dataclass
class AttentionTrace:
    config: AttentionConfig
    features: np.ndarray
    index: np.ndarray
    valid: np.ndarray
    heads: list[HeadTrace] = field(default_factory=list)
    context: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.features.shape[1]

    @property
    def extent(self):
        """Inclusive first/last attended frame per t after truncation."""
        t = np.arange(self.T)
        return np.maximum(t - self.config.left, 0), np.minimum(t + self.config.right, self.T - 1)

    @property
    def probabilities(self) -> np.ndarray:
        """Head-averaged attention probabilities, shape ``(T, L+R+1)``."""
        return np.mean([h.probs for h in self.heads], axis=0)


def window_softmax(E: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the valid window positions only."""
    E = np.where(valid, E, -np.inf)
    z = E - E.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attend(config: AttentionConfig, params: AttentionParams, F: np.ndarray):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] == 0:
        raise InputError(f"attention needs a non-empty (r_f, T) sequence, got shape {F.shape}")
    if len(params.heads) != config.heads:
        raise ConfigError(f"config declares {config.heads} heads, params hold {len(params.heads)}")
    T = F.shape[1]
    W = config.width
    d = config.head_dim
    idx, valid = window_index(T, config.left, config.right)
    Fw = F[:, idx]
    keys, queries = project(params, F)
    trace = AttentionTrace(config, F, idx, valid)
    contexts = []
    for head, K, Q in zip(params.heads, keys, queries):
        Kw = K[:, idx]
        tanh_act = pos_tanh = None
        if config.score == "dot":
            E = np.einsum("dtw,dt->tw", Kw, Q)
            if config.pos_enc:
                E = E + head.p.value[:, 0][None, :]
            E = E / math.sqrt(d + (W if config.pos_enc else 0))
        else:
            g = head.g.value[:, 0]
            b = head.b.value[:, 0]
            tanh_act = np.tanh(Kw + Q[:, :, None] + b[:d, None, None])
            E = np.einsum("d,dtw->tw", g[:d], tanh_act)
            if config.pos_enc:
                # one-hot key extension + query bias p, through the extended gate
                pos_tanh = np.tanh(np.eye(W) + head.p.value + b[d:, None])
                E = E + (g[d:] @ pos_tanh)[None, :]
        A = window_softmax(E, valid)
        ctx = np.einsum("tw,rtw->rt", A, Fw)
        if config.pos_enc:
            ctx = np.vstack([ctx, A.T])
        contexts.append(ctx)
        trace.heads.append(HeadTrace(K, Q, Kw, np.where(valid, E, -np.inf), A, tanh_act, pos_tanh))
    # C order keeps downstream matmuls on the same BLAS path as the plain features
    trace.context = np.ascontiguousarray(contexts[0] if len(contexts) == 1 else np.vstack(contexts))
    return trace.context, trace


def attend_backward(config: AttentionConfig, params: AttentionParams, F: np.ndarray,
                    trace: AttentionTrace, grad_C: np.ndarray):
    """Backpropagate ``grad_C`` through :func:`attend`.

    Parameter gradients are accumulated into each block's ``.grad``; the
    return value is ``(grad_F, {block name: gradient of this call})``.
    """
    if trace is None or trace.features is not F or trace.config != config \
            or len(trace.heads) != len(params.heads):
        raise InternalError("attention trace does not belong to this forward call")
    r_f, T = F.shape
    W = config.width
    d = config.head_dim
    hc = config.head_context_dim(r_f)
    if grad_C.shape != (config.heads * hc, T):
        raise InternalError(f"grad_C shape {grad_C.shape} != {(config.heads * hc, T)}")
    Fw = F[:, trace.index]
    grad_F = np.zeros_like(F)
    grads = {}
    for h, (head, ht) in enumerate(zip(params.heads, trace.heads)):
        dC = grad_C[h * hc:(h + 1) * hc]
        dC_f = dC[:r_f]
        A = ht.probs
        dA = np.einsum("rt,rtw->tw", dC_f, Fw)
        if config.pos_enc:
            dA = dA + dC[r_f:].T
        grad_F += _scatter_window(A[None, :, :] * dC_f[:, :, None], T, config.left)
        dE = A * (dA - np.sum(A * dA, axis=1, keepdims=True))

        if config.score == "dot":
            dEs = dE / math.sqrt(d + (W if config.pos_enc else 0))
            dQ = np.einsum("tw,dtw->dt", dEs, ht.window_keys)
            dK = _scatter_window(ht.queries[:, :, None] * dEs[None, :, :], T, config.left)
            if config.pos_enc:
                grads[head.p.name] = dEs.sum(axis=0)[:, None]
        else:
            g = head.g.value[:, 0]
            dg = np.zeros(g.shape)
            db = np.zeros(g.shape)
            dZ = (g[:d, None, None] * (1.0 - ht.tanh_act ** 2)) * dE[None, :, :]
            dg[:d] = np.einsum("dtw,tw->d", ht.tanh_act, dE)
            db[:d] = dZ.sum(axis=(1, 2))
            dQ = dZ.sum(axis=2)
            dK = _scatter_window(dZ, T, config.left)
            if config.pos_enc:
                du = dE.sum(axis=0)
                M = ht.pos_tanh
                dg[d:] = M @ du
                dpre = g[d:, None] * (1.0 - M ** 2) * du[None, :]
                db[d:] = dpre.sum(axis=1)
                grads[head.p.name] = dpre.sum(axis=1)[:, None]
            grads[head.g.name] = dg[:, None]
            grads[head.b.name] = db[:, None]

        grads[head.W_k.name] = dK @ F.T
        grads[head.W_q.name] = dQ @ F.T
        grad_F += head.W_k.value.T @ dK + head.W_q.value.T @ dQ

    for blk in params.params():
        blk.grad += grads[blk.name]
    return np.ascontiguousarray(grad_F), grads
