"""Adversarial multi-task training with a gradient reversal layer.

Three modes share one code path:

* ``baseline`` -- feature extractor + class classifier only.
* ``adit``     -- a domain classifier reads the deep features through a GRL.
* ``aadit``    -- local attention re-weights the deep features first; the
  domain classifier reads the context vectors.

Every step computes all gradients from the same pre-update parameters and
then applies one plain SGD update to every block.  The extractor therefore
moves along ``dL_senone/dθ_f - λ dL_domain/dθ_f`` while the attention block
and domain classifier descend ``L_domain``.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as cfgio
from .binio import ByteReader
from .attention import AttentionConfig, AttentionParams, attend, attend_backward
from .errors import ConfigError, FormatError, InternalError, NumericalError
from .metrics import MetricsRow
from .nn import FeedForwardStack, ParamBlock, softmax_xent, sgd_step, stack_backward, stack_forward, zero_grads
from .synth import Dataset, SequenceSample

log = logging.getLogger(__name__)

MODES = ("baseline", "adit", "aadit")
CKPT_MAGIC = b"AADL"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "aadit"
    lam: float = 0.5
    mu: float = 0.1
    split_depth: int = 4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    r_x: int = 20
    r_f: int = 16
    hidden: int = 32
    y_hidden: tuple[int, ...] = (32,)
    d_hidden: tuple[int, ...] = (32,)
    n_classes: int = 10
    n_domains: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ConfigError(f"reversal weight lambda must be >= 0, got {self.lam}")
        if not self.mu > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.mu}")
        if self.split_depth < 1:
            raise ConfigError(f"split depth must be >= 1, got {self.split_depth}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if min(self.r_x, self.r_f, self.hidden, self.n_classes, self.n_domains) < 1:
            raise ConfigError("all architecture dimensions must be positive")


def _rng_streams(seed: int):
    init, att, shuffle = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(att), np.random.Generator(np.random.PCG64(shuffle))


class AdversarialModel:
    def __init__(self, mode: str, M_f: FeedForwardStack, M_y: FeedForwardStack,
                 M_d: FeedForwardStack | None = None, attention: AttentionConfig | None = None,
                 att_params: AttentionParams | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if M_f.output_dim != M_y.input_dim:
            raise ConfigError(f"M_f emits {M_f.output_dim} features but M_y expects {M_y.input_dim}")
        if mode == "baseline" and (M_d is not None or att_params is not None):
            raise ConfigError("baseline mode has no domain classifier or attention block")
        if mode != "baseline" and M_d is None:
            raise ConfigError(f"{mode} mode needs a domain classifier")
        if mode == "aadit" and (attention is None or att_params is None):
            raise ConfigError("aadit mode needs an attention config and parameters")
        if mode == "adit" and att_params is not None:
            raise ConfigError("adit mode has no attention block")
        if M_d is not None:
            d_in = attention.context_dim(M_f.output_dim) if mode == "aadit" else M_f.output_dim
            if M_d.input_dim != d_in:
                raise ConfigError(f"M_d expects {M_d.input_dim} inputs, branch provides {d_in}")
        self.mode = mode
        self.M_f, self.M_y, self.M_d = M_f, M_y, M_d
        self.attention = attention if mode == "aadit" else None
        self.att_params = att_params

    @classmethod
    def init(cls, config: TrainConfig) -> "AdversarialModel":
        init_rng, att_rng, _ = _rng_streams(config.seed)
        f_dims = [config.r_x] + [config.hidden] * (config.split_depth - 1) + [config.r_f]
        M_f = FeedForwardStack.build(f_dims, init_rng, "f", final_activation="tanh")
        M_y = FeedForwardStack.build([config.r_f, *config.y_hidden, config.n_classes], init_rng, "y")
        if config.mode == "baseline":
            return cls("baseline", M_f, M_y)
        att = config.attention if config.mode == "aadit" else None
        d_in = att.context_dim(config.r_f) if att else config.r_f
        M_d = FeedForwardStack.build([d_in, *config.d_hidden, config.n_domains], init_rng, "d")
        att_params = AttentionParams.init(att, config.r_f, att_rng) if att else None
        return cls(config.mode, M_f, M_y, M_d, att, att_params)

    def groups(self) -> dict[str, list[ParamBlock]]:
        return {
            "f": self.M_f.params(),
            "y": self.M_y.params(),
            "d": self.M_d.params() if self.M_d else [],
            "a": self.att_params.params() if self.att_params else [],
        }

    def params(self) -> list[ParamBlock]:
        g = self.groups()
        return g["f"] + g["y"] + g["d"] + g["a"]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}


def grl_backward(grad: np.ndarray, lam: float) -> np.ndarray:
    """Gradient reversal: identity forward, ``-lam * grad`` backward."""
    return -lam * grad


def _concat(batch: Sequence[SequenceSample]):
    if not batch:
        raise ConfigError("empty batch")
    X = np.hstack([s.X for s in batch])
    Y = np.concatenate([s.Y for s in batch])
    D = np.concatenate([s.D for s in batch])
    bounds = np.cumsum([0] + [s.T for s in batch])
    return X, Y, D, bounds


@dataclass
class ForwardPass:
    Y: np.ndarray
    D: np.ndarray
    bounds: np.ndarray
    F: np.ndarray
    cache_f: object
    logits_y: np.ndarray
    cache_y: object
    logits_d: np.ndarray | None = None
    cache_d: object = None
    pieces: list = field(default_factory=list)
    traces: list = field(default_factory=list)


def forward_pass(model: AdversarialModel, batch: Sequence[SequenceSample]) -> ForwardPass:
    X, Y, D, bounds = _concat(batch)
    F, cache_f = stack_forward(model.M_f, X)
    logits_y, cache_y = stack_forward(model.M_y, F)
    fp = ForwardPass(Y, D, bounds, F, cache_f, logits_y, cache_y)
    if model.M_d is None:
        return fp
    if model.mode == "aadit":
        contexts = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            piece = F[:, a:b]
            C, trace = attend(model.attention, model.att_params, piece)
            fp.pieces.append(piece)
            fp.traces.append(trace)
            contexts.append(C)
        dom_in = np.hstack(contexts)
    else:
        dom_in = F
    fp.logits_d, fp.cache_d = stack_forward(model.M_d, dom_in)
    return fp


def senone_loss(model: AdversarialModel, batch, fp: ForwardPass | None = None):
    """Mean class cross-entropy over all frames; returns ``(loss, d loss / d logits)``."""
    fp = fp or forward_pass(model, batch)
    return softmax_xent(fp.logits_y, fp.Y)


def domain_loss(model: AdversarialModel, batch, fp: ForwardPass | None = None):
    """Mean domain cross-entropy over all frames; returns ``(loss, d loss / d logits)``."""
    if model.M_d is None:
        raise ConfigError("baseline model has no domain classifier")
    fp = fp or forward_pass(model, batch)
    return softmax_xent(fp.logits_d, fp.D)


def _domain_branch_backward(model: AdversarialModel, fp: ForwardPass, d_logits: np.ndarray) -> np.ndarray:
    """Backprop through M_d (and attention); returns d L_domain / d F."""
    d_in = stack_backward(model.M_d, fp.cache_d, d_logits)
    if model.mode != "aadit":
        return d_in
    hc = model.attention.context_dim(model.M_f.output_dim)
    if d_in.shape[0] != hc:
        raise InternalError("domain-branch gradient has the wrong row count")
    parts = []
    for (a, b), piece, trace in zip(zip(fp.bounds[:-1], fp.bounds[1:]), fp.pieces, fp.traces):
        g, _ = attend_backward(model.attention, model.att_params, piece, trace, d_in[:, a:b])
        parts.append(g)
    return np.hstack(parts)


def accumulate_gradients(model: AdversarialModel, batch, lam: float,
                         grl: Callable[[np.ndarray, float], np.ndarray] = grl_backward):
    """Add the gradients of one adversarial step to every block's ``.grad``.

    ``grl`` is the reversal applied to the domain gradient entering the
    feature extractor; it is a parameter only so tests can inject faults.
    """
    fp = forward_pass(model, batch)
    l_sen, d_y = senone_loss(model, batch, fp)
    d_F = stack_backward(model.M_y, fp.cache_y, d_y)
    l_dom = None
    if model.M_d is not None:
        l_dom, d_d = domain_loss(model, batch, fp)
        d_F = d_F + grl(_domain_branch_backward(model, fp, d_d), lam)
    stack_backward(model.M_f, fp.cache_f, d_F)
    return l_sen, l_dom, fp


def branch_gradients(model: AdversarialModel, batch) -> dict[str, dict[str, np.ndarray]]:
    """Senone and domain gradients computed in two separate backward passes.

    Returns ``{"senone": {name: grad}, "domain": {name: grad}}``; the senone
    branch covers θ_f, θ_y and the domain branch θ_f, θ_a, θ_d.  Existing
    ``.grad`` contents are discarded.
    """
    params = model.params()
    out = {}
    zero_grads(params)
    fp = forward_pass(model, batch)
    _, d_y = senone_loss(model, batch, fp)
    stack_backward(model.M_f, fp.cache_f, stack_backward(model.M_y, fp.cache_y, d_y))
    out["senone"] = {p.name: p.grad.copy() for p in model.groups()["f"] + model.groups()["y"]}
    zero_grads(params)
    if model.M_d is not None:
        fp = forward_pass(model, batch)
        _, d_d = domain_loss(model, batch, fp)
        stack_backward(model.M_f, fp.cache_f, _domain_branch_backward(model, fp, d_d))
        g = model.groups()
        out["domain"] = {p.name: p.grad.copy() for p in g["f"] + g["a"] + g["d"]}
        zero_grads(params)
    return out


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=0) == labels))


def train_step(model: AdversarialModel, batch, config: TrainConfig, step: int = 0,
               hook: Callable[[AdversarialModel], None] | None = None,
               grl: Callable[[np.ndarray, float], np.ndarray] = grl_backward) -> MetricsRow:
    """One simultaneous SGD update of θ_f, θ_a, θ_d, θ_y.

    ``hook`` sees the model after gradients are accumulated and before the
    update is applied.
    """
    params = model.params()
    zero_grads(params)
    l_sen, l_dom, fp = accumulate_gradients(model, batch, config.lam, grl)
    for name, value in (("L_senone", l_sen), ("L_domain", l_dom)):
        if value is not None and not math.isfinite(value):
            zero_grads(params)
            raise NumericalError(f"non-finite {name} ({value}) at step {step}")
    if hook is not None:
        hook(model)
    sgd_step(params, config.mu)
    return MetricsRow(
        step=step,
        l_senone=l_sen,
        l_domain=l_dom,
        class_acc=_accuracy(fp.logits_y, fp.Y),
        domain_acc=None if fp.logits_d is None else _accuracy(fp.logits_d, fp.D),
    )


@dataclass
class Checkpoint:
    config: TrainConfig
    model: AdversarialModel
    step: int = 0
    rng_state: dict | None = None


def check_compatible(config: TrainConfig, dataset: Dataset) -> None:
    dc = dataset.config
    for ours, theirs, what in ((config.r_x, dc.r_x, "r_x"), (config.n_classes, dc.n_classes, "n_classes"),
                               (config.n_domains, dc.n_domains, "n_domains")):
        if ours != theirs:
            raise ConfigError(f"train config {what}={ours} does not match dataset {what}={theirs}")


def config_for_dataset(config: TrainConfig, dataset: Dataset) -> TrainConfig:
    dc = dataset.config
    return replace(config, r_x=dc.r_x, n_classes=dc.n_classes, n_domains=dc.n_domains)


def train_loop(config: TrainConfig, dataset: Dataset, checkpoint_dir=None,
               resume: Checkpoint | None = None,
               hook: Callable[[AdversarialModel], None] | None = None):
    """Train for ``config.epochs`` epochs over the train split.

    Sequence order is reshuffled each epoch from a seeded generator; the
    generator state stored in checkpoints is the state at the start of the
    epoch containing ``step``, so training can resume mid-epoch too.
    Returns ``(model, history, checkpoint paths)``.
    """
    check_compatible(config, dataset)
    samples = dataset.train
    if not samples:
        raise ConfigError("dataset has an empty train split")
    _, _, rng = _rng_streams(config.seed)
    if resume is None:
        model, step = AdversarialModel.init(config), 0
    else:
        if replace(resume.config, epochs=config.epochs) != config:
            raise ConfigError("resume checkpoint was written with a different training config")
        model, step = resume.model, resume.step
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
    n = len(samples)
    per_epoch = math.ceil(n / config.batch_size)
    history, written = [], []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(step // per_epoch, config.epochs):
        order = rng.permutation(n)
        for b in range(step - epoch * per_epoch, per_epoch):
            batch = [samples[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            history.append(train_step(model, batch, config, step=step, hook=hook))
            step += 1
        last = history[-1] if history else None
        if last is not None:
            log.info("epoch %d step %d l_senone=%.4f l_domain=%s", epoch + 1, step,
                     last.l_senone, "-" if last.l_domain is None else f"{last.l_domain:.4f}")
        if checkpoint_dir is not None:
            path = checkpoint_dir / f"epoch{epoch + 1:03d}.aadl"
            checkpoint_save(model, config, path, step=step, rng_state=rng.bit_generator.state)
            written.append(path)
    return model, history, written


# --- checkpoint file -------------------------------------------------------
#
# "AADL" | version u32 | config length u64 | config text (key=value, utf-8)
# | block count u32 | per block: name length u32, name, rows u64, cols u64,
#   rows*cols float64 row-major | step u64 | RNG state (40 bytes):
#   PCG64 state u128, increment u128, has_uint32 u32, uinteger u32.
# All integers and floats little-endian.

def _u128(x: int) -> bytes:
    return struct.pack("<QQ", x & 0xFFFFFFFFFFFFFFFF, x >> 64)


def _rng_bytes(state: dict | None) -> bytes:
    if state is None:
        return bytes(40)
    if state.get("bit_generator") != "PCG64":
        raise ConfigError(f"only PCG64 generator state can be stored, got {state.get('bit_generator')}")
    inner = state["state"]
    return (_u128(inner["state"]) + _u128(inner["inc"])
            + struct.pack("<II", state["has_uint32"], state["uinteger"]))


def checkpoint_to_bytes(model: AdversarialModel, config: TrainConfig, step: int = 0,
                        rng_state: dict | None = None) -> bytes:
    cfg = cfgio.to_text(config).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(cfg)), cfg]
    params = model.params()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        rows, cols = p.shape
        parts += [struct.pack("<I", len(name)), name, struct.pack("<QQ", rows, cols),
                  np.ascontiguousarray(p.value, dtype="<f8").tobytes()]
    parts += [struct.pack("<Q", step), _rng_bytes(rng_state)]
    return b"".join(parts)


def checkpoint_save(model: AdversarialModel, config: TrainConfig, path, step: int = 0,
                    rng_state: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, config, step, rng_state))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = ByteReader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n_cfg,) = r.unpack("<Q", "config length")
    at = r.pos
    try:
        config = cfgio.from_text(TrainConfig, r.take(n_cfg, "config block").decode())
    except (ConfigError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid embedded config: {exc}", at) from None
    model = AdversarialModel.init(config)
    params = model.params()
    at = r.pos
    (count,) = r.unpack("<I", "block count")
    if count != len(params):
        raise FormatError(f"config implies {len(params)} parameter blocks, file holds {count}", at)
    for p in params:
        at = r.pos
        (n_name,) = r.unpack("<I", "block name length")
        name = r.take(n_name, "block name").decode(errors="replace")
        rows, cols = r.unpack("<QQ", f"shape of {name}")
        if name != p.name or (rows, cols) != p.shape:
            raise FormatError(f"block {name!r} {rows}x{cols} does not match expected "
                              f"{p.name!r} {p.shape[0]}x{p.shape[1]}", at)
        data = np.frombuffer(r.take(8 * rows * cols, f"values of {name}"), dtype="<f8")
        p.value[...] = data.reshape(rows, cols)
    (step,) = r.unpack("<Q", "step counter")
    raw = r.take(40, "RNG state")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    rng_state = None
    if any(raw):
        s_lo, s_hi, i_lo, i_hi, has, uint = struct.unpack("<QQQQII", raw)
        rng_state = {"bit_generator": "PCG64",
                     "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
                     "has_uint32": has, "uinteger": uint}
    return Checkpoint(config, model, step, rng_state)


def checkpoint_load(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
