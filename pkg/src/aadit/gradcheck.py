"""Finite-difference verification of every analytic gradient path.

For each configuration a tiny random model and batch are built; analytic
gradients come from separate backward passes per loss, plus the composite
extractor gradient that a training step actually applies (the GRL path).
Each is compared to central differences, one relative error per group.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionConfig
from .nn import finite_diff_grad, relative_error, zero_grads
from .synth import SequenceSample
from .trainer import (AdversarialModel, TrainConfig, accumulate_gradients, branch_gradients, domain_loss,
                      grl_backward, senone_loss)

# documented tolerance per finite-difference step size
TOLERANCES = {1e-5: 1e-4, 1e-3: 1e-2}


def tolerance_for(h: float) -> float:
    if h in TOLERANCES:
        return TOLERANCES[h]
    # between the documented points, interpolate on a log scale
    lo, hi = np.log10(1e-5), np.log10(1e-3)
    frac = (np.log10(h) - lo) / (hi - lo)
    return float(10 ** (-4 + 2 * np.clip(frac, 0.0, 1.0)))


@dataclass
class GroupResult:
    config: str
    group: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def default_configs() -> list[tuple[str, TrainConfig]]:
    """Every score type x heads x PE combination, plus the plain GRL model."""
    base = dict(lam=0.5, split_depth=2, r_x=6, r_f=5, hidden=7, y_hidden=(6,), d_hidden=(6,),
                n_classes=4, n_domains=3)
    out = [("adit", TrainConfig(mode="adit", **base))]
    for score, heads, pe in itertools.product(("dot", "additive"), (1, 4), (False, True)):
        att = AttentionConfig(2, 2, 8, score, heads, pe)
        name = f"aadit/{score}/H={heads}/pe={'on' if pe else 'off'}"
        out.append((name, TrainConfig(mode="aadit", attention=att, **base)))
    return out


def random_instance(config: TrainConfig, seed: int, T: int = 9, n_seq: int = 2):
    rng = np.random.default_rng(seed)
    model = AdversarialModel.init(config)
    # move every block off its init so zero biases and gates do not hide terms
    for p in model.params():
        p.value[...] = rng.normal(scale=0.5, size=p.shape)
    batch = [SequenceSample(rng.normal(size=(config.r_x, T)), rng.integers(config.n_classes, size=T),
                            np.full(T, int(rng.integers(config.n_domains))))
             for _ in range(n_seq)]
    return model, batch


def _flat(arrays):
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def check_config(name: str, config: TrainConfig, seed: int = 0, h: float = 1e-5,
                 grl: Callable[[np.ndarray, float], np.ndarray] = grl_backward) -> list[GroupResult]:
    model, batch = random_instance(config, seed)
    g = model.groups()
    tol = tolerance_for(h)
    branches = branch_gradients(model, batch)

    sen_blocks = g["f"] + g["y"]
    sen_num = finite_diff_grad(lambda: senone_loss(model, batch)[0], sen_blocks, h)
    sen_num = dict(zip([p.name for p in sen_blocks], sen_num))

    dom_blocks = g["f"] + g["a"] + g["d"]
    dom_num = finite_diff_grad(lambda: domain_loss(model, batch)[0], dom_blocks, h)
    dom_num = dict(zip([p.name for p in dom_blocks], dom_num))

    zero_grads(model.params())
    accumulate_gradients(model, batch, config.lam, grl)
    composite = [p.grad.copy() for p in g["f"]]
    zero_grads(model.params())

    def err(kind, blocks, num):
        names = [p.name for p in blocks]
        return relative_error(_flat([branches[kind][n] for n in names]), _flat([num[n] for n in names]))

    rows = [("f|senone", err("senone", g["f"], sen_num)),
            ("y|senone", err("senone", g["y"], sen_num)),
            ("f|domain", err("domain", g["f"], dom_num)),
            ("d|domain", err("domain", g["d"], dom_num))]
    if g["a"]:
        rows.append(("a|domain", err("domain", g["a"], dom_num)))
    expected = [sen_num[p.name] - config.lam * dom_num[p.name] for p in g["f"]]
    rows.append(("f|grl", relative_error(_flat(composite), _flat(expected))))
    return [GroupResult(name, group, e, tol) for group, e in rows]


def run(seed: int = 0, h: float = 1e-5, grl=grl_backward, configs=None) -> list[GroupResult]:
    out = []
    for name, cfg in configs or default_configs():
        out.extend(check_config(name, cfg, seed, h, grl))
    return out


def format_table(results: list[GroupResult]) -> str:
    width = max([len("config")] + [len(r.config) for r in results])
    lines = [f"{'config':<{width}}  {'group':<9} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.config:<{width}}  {r.group:<9} {r.error:12.3e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)


def sign_flipped_grl(grad: np.ndarray, lam: float) -> np.ndarray:
    """Fault injection: a reversal layer that forgets to reverse."""
    return lam * grad
