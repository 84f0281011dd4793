import math
from dataclasses import replace

import numpy as np
import pytest

from aadit.attention import AttentionConfig
from aadit.errors import ConfigError, FormatError, InputError, NumericalError
from aadit.metrics import metrics_csv
from aadit.nn import finite_diff_grad, relative_error
from aadit.synth import DatasetConfig, SequenceSample, generate
from aadit.trainer import (AdversarialModel, TrainConfig, accumulate_gradients, branch_gradients, checkpoint_from_bytes,
                           checkpoint_load, checkpoint_save, checkpoint_to_bytes, domain_loss, grl_backward,
                           senone_loss, train_loop, train_step)
from aadit.trend import run_trend
from conftest import randomize, tiny_config
from oracles import brute_force_attention, mlp, nll


def test_grl_backward():
    g = np.array([[1.0, -2.0], [0.5, 4.0]])
    np.testing.assert_array_equal(grl_backward(g, 0.5), -0.5 * g)
    assert not grl_backward(g, 0.0).any()
    assert not grl_backward(np.zeros((2, 2)), 3.0).any()


def test_model_structure_per_mode():
    base = AdversarialModel.init(tiny_config("baseline"))
    assert base.M_d is None and base.att_params is None and base.groups()["d"] == []
    adit = AdversarialModel.init(tiny_config("adit"))
    assert adit.M_d.input_dim == 5 and adit.att_params is None
    att = AttentionConfig(1, 1, 8, "dot", heads=2, pos_enc=True)
    aadit = AdversarialModel.init(tiny_config("aadit", attention=att))
    assert aadit.M_d.input_dim == 2 * (5 + 3)
    assert aadit.M_f.output_dim == aadit.M_y.input_dim == 5


def test_same_seed_shares_classifier_init_across_modes():
    states = [AdversarialModel.init(tiny_config(m)).state() for m in ("baseline", "adit", "aadit")]
    for name in states[0]:
        assert all(s[name].tobytes() == states[0][name].tobytes() for s in states[1:])
    assert all(states[1][n].tobytes() == states[2][n].tobytes() for n in states[1] if n.startswith("d."))


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(mode="gan")
    with pytest.raises(ConfigError):
        tiny_config(lam=-1.0)
    with pytest.raises(ConfigError):
        tiny_config(mu=0.0)
    with pytest.raises(ConfigError):
        tiny_config(split_depth=0)


def _uniform_domain_head(model):
    last = model.M_d.layers[-1]
    last.weights.value[...] = 0.0
    last.bias.value[...] = 0.0


def test_domain_loss_uniform_posteriors():
    model = AdversarialModel.init(tiny_config("adit", n_domains=5))
    _uniform_domain_head(model)
    rng = np.random.default_rng(0)
    batch = [SequenceSample(rng.normal(size=(6, 7)), np.zeros(7, int), np.full(7, d)) for d in (0, 4)]
    loss, _ = domain_loss(model, batch)
    assert loss == pytest.approx(math.log(5), abs=1e-14)


def test_domain_loss_confident_correct():
    model = AdversarialModel.init(tiny_config("aadit"))
    _uniform_domain_head(model)
    model.M_d.layers[-1].bias.value[2, 0] = 1000.0
    batch = [SequenceSample(np.ones((6, 5)), np.zeros(5, int), np.full(5, 2))]
    loss, grad = domain_loss(model, batch)
    assert loss == pytest.approx(0.0, abs=1e-300) and np.abs(grad).max() < 1e-300


def test_senone_loss_uniform_and_saturated():
    model = AdversarialModel.init(tiny_config("baseline", n_classes=10))
    last = model.M_y.layers[-1]
    last.weights.value[...] = 0.0
    batch = [SequenceSample(np.ones((6, 4)), np.array([0, 3, 9, 2]), np.zeros(4, int))]
    assert senone_loss(model, batch)[0] == pytest.approx(math.log(10), abs=1e-14)
    last.bias.value[3, 0] = 1000.0
    batch = [SequenceSample(np.ones((6, 4)), np.full(4, 3), np.zeros(4, int))]
    assert senone_loss(model, batch)[0] == pytest.approx(0.0, abs=1e-300)


def test_label_out_of_range_is_rejected():
    model = AdversarialModel.init(tiny_config("adit"))
    with pytest.raises(InputError):
        domain_loss(model, [SequenceSample(np.ones((6, 3)), np.zeros(3, int), np.full(3, 3))])
    with pytest.raises(InputError):
        senone_loss(model, [SequenceSample(np.ones((6, 3)), np.full(3, 4), np.zeros(3, int))])


@pytest.mark.parametrize("mode", ["adit", "aadit"])
def test_losses_match_per_frame_recomputation(mode, tiny_ds):
    att = AttentionConfig(2, 1, 6, "dot", heads=2, pos_enc=True)
    model = randomize(AdversarialModel.init(tiny_config(mode, attention=att)), seed=3)
    batch = tiny_ds.train[:3]
    l_sen, l_dom = 0.0, 0.0
    n = 0
    for s in batch:
        F = np.column_stack([mlp(model.M_f, s.X[:, t]) for t in range(s.T)])
        C = brute_force_attention(att, model.att_params, F) if mode == "aadit" else F
        for t in range(s.T):
            l_sen += nll(list(mlp(model.M_y, F[:, t])), s.Y[t])
            l_dom += nll(list(mlp(model.M_d, C[:, t])), s.D[t])
            n += 1
    assert senone_loss(model, batch)[0] == pytest.approx(l_sen / n, rel=1e-12)
    assert domain_loss(model, batch)[0] == pytest.approx(l_dom / n, rel=1e-12)


@pytest.mark.parametrize("mode", ["adit", "aadit"])
def test_composite_gradients_match_finite_differences(mode, tiny_ds):
    lam = 0.5
    model = randomize(AdversarialModel.init(tiny_config(mode, lam=lam)), seed=8)
    batch = tiny_ds.train[:2]
    for p in model.params():
        p.zero_grad()
    accumulate_gradients(model, batch, lam)
    groups = model.groups()

    def objective():
        return senone_loss(model, batch)[0] - lam * domain_loss(model, batch)[0]

    checks = [(groups["f"], objective), (groups["y"], lambda: senone_loss(model, batch)[0]),
              (groups["d"] + groups["a"], lambda: domain_loss(model, batch)[0])]
    for blocks, fn in checks:
        for blk, num in zip(blocks, finite_diff_grad(fn, blocks, h=1e-5)):
            assert relative_error(blk.grad, num) < 1e-4, blk.name


def test_branch_gradients_compose_into_train_update(tiny_ds):
    cfg = tiny_config("aadit", lam=2.0)
    model = randomize(AdversarialModel.init(cfg), seed=2)
    batch = tiny_ds.train[:3]
    br = branch_gradients(model, batch)
    before = model.state()
    train_step(model, batch, cfg)
    for p in model.groups()["f"]:
        expected = cfg.mu * (br["senone"][p.name] - cfg.lam * br["domain"][p.name])
        assert np.abs((before[p.name] - p.value) - expected).max() <= 1e-12
    for p in model.groups()["a"] + model.groups()["d"]:
        assert np.abs((before[p.name] - p.value) - cfg.mu * br["domain"][p.name]).max() <= 1e-12


def _trajectory(cfg, ds, steps):
    model = AdversarialModel.init(cfg)
    out = []
    batches = [ds.train[i % len(ds.train):i % len(ds.train) + 3] for i in range(steps)]
    for i, b in enumerate(batches):
        train_step(model, b, cfg, step=i)
        out.append(model.state())
    return out


def test_zero_lambda_detaches_domain_branch(tiny_ds):
    base = _trajectory(tiny_config("baseline"), tiny_ds, 10)
    adit = _trajectory(tiny_config("adit", lam=0.0), tiny_ds, 10)
    for b, a in zip(base, adit):
        for name, v in b.items():
            assert v.tobytes() == a[name].tobytes(), name


@pytest.mark.parametrize("width", [dict(), dict(r_f=16, hidden=32, y_hidden=(32,), d_hidden=(32,))])
def test_singleton_window_reduces_to_adit(tiny_ds, width):
    # the wider case makes BLAS pick blocked kernels, which are sensitive to memory layout
    att = AttentionConfig(0, 0, 4, "additive")
    adit = _trajectory(tiny_config("adit", **width), tiny_ds, 10)
    aadit = _trajectory(tiny_config("aadit", attention=att, **width), tiny_ds, 10)
    for a, b in zip(adit, aadit):
        for name, v in a.items():
            assert v.tobytes() == b[name].tobytes(), name


def test_small_steps_decrease_senone_loss():
    cfg = tiny_config("baseline", mu=1e-4)
    model = AdversarialModel.init(cfg)
    rng = np.random.default_rng(1)
    batch = [SequenceSample(rng.normal(size=(6, 4)), np.array([0, 1, 1, 3]), np.zeros(4, int))]
    prev = senone_loss(model, batch)[0]
    for i in range(5):
        train_step(model, batch, cfg, step=i)
        cur = senone_loss(model, batch)[0]
        assert cur < prev
        prev = cur


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_ds):
    cfg = tiny_config("adit")
    model = AdversarialModel.init(cfg)
    model.M_d.layers[0].weights.value[0, 0] = np.inf
    before = model.state()
    with pytest.raises(NumericalError):
        train_step(model, tiny_ds.train[:2], cfg)
    assert all(np.array_equal(before[p.name], p.value) for p in model.params())


def test_train_loop_zero_epochs(tiny_ds):
    cfg = tiny_config("aadit", epochs=0)
    model, history, written = train_loop(cfg, tiny_ds)
    assert history == [] and written == []
    fresh = AdversarialModel.init(cfg).state()
    assert all(fresh[p.name].tobytes() == p.value.tobytes() for p in model.params())


def test_train_loop_is_deterministic(tiny_ds, tmp_path):
    cfg = tiny_config("aadit", epochs=3)
    _, h1, written = train_loop(cfg, tiny_ds, checkpoint_dir=tmp_path)
    _, h2, _ = train_loop(cfg, tiny_ds)
    assert metrics_csv(h1) == metrics_csv(h2)
    assert [p.name for p in written] == ["epoch001.aadl", "epoch002.aadl", "epoch003.aadl"]
    assert len(h1) == 3 * math.ceil(len(tiny_ds.train) / cfg.batch_size)
    assert [r.step for r in h1] == list(range(len(h1)))


def test_train_loop_rejects_mismatched_dataset(tiny_ds):
    with pytest.raises(ConfigError, match="n_domains"):
        train_loop(tiny_config("adit", n_domains=5), tiny_ds)


def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_ds):
    cfg = tiny_config("aadit", attention=AttentionConfig(1, 2, 4, "additive", 2, True))
    model, _, _ = train_loop(replace(cfg, epochs=1), tiny_ds)
    a, b = tmp_path / "a.aadl", tmp_path / "b.aadl"
    rng_state = np.random.Generator(np.random.PCG64(123)).bit_generator.state
    checkpoint_save(model, replace(cfg, epochs=1), a, step=17, rng_state=rng_state)
    ck = checkpoint_load(a)
    assert ck.step == 17 and ck.rng_state == rng_state and ck.config == replace(cfg, epochs=1)
    checkpoint_save(ck.model, ck.config, b, step=ck.step, rng_state=ck.rng_state)
    assert a.read_bytes() == b.read_bytes()
    for p, q in zip(model.params(), ck.model.params()):
        assert p.value.tobytes() == q.value.tobytes()


def test_checkpoint_corruption_is_rejected(tiny_ds):
    cfg = tiny_config("adit")
    buf = checkpoint_to_bytes(AdversarialModel.init(cfg), cfg)
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"AADX" + buf[4:])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint_from_bytes(buf[:-50])
    # same-length config edit that changes the implied shape of M_d's output layer
    wrong = buf.replace(b"n_domains=3", b"n_domains=4")
    with pytest.raises(FormatError, match="offset"):
        checkpoint_from_bytes(wrong)


def test_resume_matches_uninterrupted_training(tiny_ds, tmp_path):
    cfg = tiny_config("aadit", epochs=3)
    full, h_full, _ = train_loop(cfg, tiny_ds)
    _, _, written = train_loop(replace(cfg, epochs=1), tiny_ds, checkpoint_dir=tmp_path)
    ck = checkpoint_load(written[-1])
    resumed, h_rest, _ = train_loop(cfg, tiny_ds, resume=ck)
    assert metrics_csv(h_rest) == metrics_csv(h_full[len(h_full) - len(h_rest):])
    for p, q in zip(full.params(), resumed.params()):
        assert p.value.tobytes() == q.value.tobytes()


def test_two_domain_adversarial_training_lowers_probe_accuracy():
    ds = generate(DatasetConfig(n_domains=2, train_per_domain=100, test_per_domain=50, T=30, seed=1))
    trend = run_trend(ds, TrainConfig(epochs=5), modes=("baseline", "adit"))
    assert trend.median_probe("adit") < trend.median_probe("baseline")
    assert sum(a < b for a, b in zip(trend.probe["adit"], trend.probe["baseline"])) == 5
