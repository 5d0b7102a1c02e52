import json
import math

import numpy as np
import pytest

from convexmenu import autodiff as ad
from convexmenu import training
from convexmenu.autodiff import ParamStore
from convexmenu.config import parse_config
from convexmenu.networks import PartialGroupMaxNet, PgmnSpec, linear_pricing_net
from convexmenu.problems import MechanismProblem, designer_value, sample_types
from convexmenu.training import (
    Adam,
    TrainingAborted,
    affine_social_welfare,
    covariance_trick_loss,
    langevin_step,
    load_network,
    load_state,
    player_terms,
    read_checkpoint,
    schedules,
    train,
)

TINY = """
[problem]
n = {n}
m = {m}
[training]
M = 256
B = 64
T = {T}
val_every = 25
val_samples = 128
val_infer_iters = 200
boundary = "{boundary}"
[eval]
test_samples = 256
infer_iters = 300
regret_samples = 20
regret_restarts = 2
regret_infer_iters = 100
[run]
seed = {seed}
out_dir = "{out}"
"""


def tiny_config(tmp_path, n=1, m=1, T=50, seed=0, boundary="reflect"):
    return parse_config(TINY.format(n=n, m=m, T=T, seed=seed, boundary=boundary, out=tmp_path))


def default_config(**training_keys):
    body = "\n".join(f"{k} = {v}" for k, v in training_keys.items())
    return parse_config(f"[training]\n{body}\n")


# -- schedules -----------------------------------------------------------------------


def test_beta_is_flat_during_warmup():
    cfg = default_config(T=1000)
    for it in (0, 100, 199):
        assert schedules(it, cfg)[0] == 16.0


def test_beta_grows_every_two_percent_after_warmup():
    cfg = default_config(T=1000)
    assert schedules(200, cfg)[0] == 16.0
    assert schedules(219, cfg)[0] == 16.0
    assert schedules(220, cfg)[0] == pytest.approx(16.0 * 1.15)
    assert schedules(260, cfg)[0] == pytest.approx(16.0 * 1.15**3)


def test_schedule_endpoints():
    cfg = default_config(T=1000)
    beta, eta, lr = schedules(1000, cfg)
    assert beta == cfg.training.beta_max == 512.0
    assert lr == pytest.approx(1e-5, rel=1e-12)
    assert eta == pytest.approx(0.01, rel=1e-12)
    assert schedules(0, cfg)[1:] == (0.03, 5e-4)


def test_multi_player_beta_starts_at_64():
    cfg = parse_config("[problem]\nn = 3\n")
    assert schedules(0, cfg)[0] == 64.0


def test_schedules_are_monotone():
    cfg = default_config(T=777)
    rows = np.array([schedules(it, cfg) for it in range(778)])
    assert np.all(np.diff(rows[:, 0]) >= 0)
    assert np.all(np.diff(rows[:, 1]) <= 0)
    assert np.all(np.diff(rows[:, 2]) <= 0)
    assert rows[:, 0].max() <= cfg.training.beta_max


def test_schedules_reject_out_of_range_iteration():
    cfg = default_config(T=10)
    with pytest.raises(ValueError):
        schedules(11, cfg)


# -- Adam ----------------------------------------------------------------------------


def _store(value):
    s = ParamStore()
    s.add("w", np.asarray(value, dtype=np.float64))
    return s


def test_adam_zero_gradient_leaves_parameters():
    s = _store([0.5, -1.0])
    opt = Adam(s)
    for _ in range(5):
        opt.update({"w": np.zeros(2)}, 1e-3)
    np.testing.assert_array_equal(s.values()["w"], [0.5, -1.0])


def test_adam_first_step_has_size_lr():
    s = _store([0.0, 0.0])
    g = np.array([0.3, -2e-3])
    Adam(s).update({"w": g}, 1e-3)
    np.testing.assert_allclose(s.values()["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9)


def test_adam_constant_gradient_step_tends_to_lr():
    s = _store([0.0])
    opt = Adam(s)
    prev = 0.0
    for _ in range(1000):
        opt.update({"w": np.array([0.7])}, 1e-3)
        now = s.values()["w"][0]
        step, prev = abs(now - prev), now
    assert step == pytest.approx(1e-3, rel=0.01)


# -- loss and welfare -----------------------------------------------------------------


def test_affine_social_welfare_examples():
    net = linear_pricing_net([0.5, 0.5])
    problem = MechanismProblem(1, 2)
    t = np.array([[[0.3, 0.8]]])
    x = np.array([[[0.0, 1.0]]])
    assert affine_social_welfare(net, problem, x, t, 2.0).value[0] == pytest.approx(0.6)
    assert affine_social_welfare(net, problem, x, t, 0.0).value[0] == 0.0


def _loss_setup(seed=0):
    problem = MechanismProblem(2, 2)
    net = PartialGroupMaxNet(PgmnSpec.default(2, 2), seed=seed)
    rng = np.random.default_rng(seed)
    t = sample_types(problem, 8, rng)
    y, z = rng.uniform(0, 1, t.shape), rng.uniform(0, 1, t.shape)
    return problem, net, t, y, z


def test_equal_samples_give_designer_utility():
    problem, net, t, y, _ = _loss_setup()
    L = covariance_trick_loss(net, problem, t, y, y, 32.0, reduce=False)
    (p, _), = player_terms(net, problem, t, [y])
    np.testing.assert_allclose(L.value, designer_value(problem, y).value + p.value, rtol=1e-12)


def test_constant_designer_utility_gives_zero_gradient():
    problem, net, t, _, _ = _loss_setup()
    zero = np.zeros_like(t)  # nothing allocated: u0 = 0 whatever the parameters
    net.params.zero_grad()
    ad.backward(covariance_trick_loss(net, problem, t, zero, zero, 32.0))
    # the price and baseline paths cancel up to subnormal round-off
    assert max(np.abs(g).max() for g in net.params.grads().values()) < 1e-300


def _grads_of(net, build):
    net.params.zero_grad()
    ad.backward(build())
    return net.params.flat_grad().copy()


def test_stop_gradient_is_wired():
    problem, net, t, y, z = _loss_setup(3)
    beta = 16.0

    def manual(stop):
        (py, uy), (pz, uz) = player_terms(net, problem, t, [y, z])
        u0y = designer_value(problem, y) + py
        u0z = designer_value(problem, z) + pz
        gap = ad.stop_gradient(u0y - u0z) if stop else u0y - u0z
        return ad.mean(ad.scale(u0y + u0z + gap * ad.scale(uy - uz, beta), 0.5))

    g_loss = _grads_of(net, lambda: covariance_trick_loss(net, problem, t, y, z, beta))
    np.testing.assert_allclose(g_loss, _grads_of(net, lambda: manual(True)), rtol=1e-12, atol=1e-14)
    live = _grads_of(net, lambda: manual(False))
    assert np.max(np.abs(live - g_loss)) > 1e-3 * np.max(np.abs(g_loss))


def test_langevin_step_keeps_pools_in_box(rng):
    net = PartialGroupMaxNet(PgmnSpec.default(2, 2), seed=1)
    t = rng.uniform(0, 1, (16, 2, 2))
    y = rng.uniform(0, 1, t.shape)
    for reflect in (True, False):
        out = langevin_step(net, t, y, 0.05, 2.0, rng.standard_normal((4,) + t.shape), reflect=reflect)
        assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(langevin_step(net, t, y, 0.0, 2.0, rng.standard_normal((4,) + t.shape)), y)


# -- the loop ------------------------------------------------------------------------


def test_smoke_training_run(tmp_path):
    cfg = tiny_config(tmp_path)
    res = train(cfg, tmp_path / "run")
    st = res.state
    assert st.iter == 50
    assert all(math.isfinite(r["loss"]) for r in st.metrics)
    assert math.isfinite(st.best_eu) and st.best_iter in (25, 50)
    assert st.y.min() >= 0 and st.y.max() <= 1 and st.z.min() >= 0 and st.z.max() <= 1
    header = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(training.METRIC_FIELDS)


def test_multi_player_clamped_run_keeps_pools_in_box(tmp_path):
    cfg = tiny_config(tmp_path, n=2, m=1, T=6, boundary="clamp")
    st = train(cfg).state
    assert st.y.min() >= 0 and st.y.max() <= 1 and st.z.min() >= 0 and st.z.max() <= 1


def _metrics(doc):
    return doc["metrics"]


def test_identical_seeds_give_identical_checkpoints(tmp_path):
    cfg = tiny_config(tmp_path, T=30)
    a = train(cfg, tmp_path / "a").checkpoint.read_bytes()
    b = train(cfg, tmp_path / "b").checkpoint.read_bytes()
    assert a == b
    other = tiny_config(tmp_path, T=30, seed=1)
    assert train(other, tmp_path / "c").checkpoint.read_bytes() != a


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = tiny_config(tmp_path, T=10)
    res = train(cfg, tmp_path / "run")
    state = load_state(cfg, res.checkpoint)
    for name, p in res.state.net.params:
        np.testing.assert_array_equal(state.net.params.values()[name], p.value)
    np.testing.assert_array_equal(state.y, res.state.y)
    assert state.opt.t == res.state.opt.t
    best = load_network(res.checkpoint)
    np.testing.assert_array_equal(best.params.flat(), res.net.params.flat())


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config(tmp_path, T=30)
    full = train(cfg, tmp_path / "full")
    part = train(cfg, tmp_path / "part", stop_at=13)
    assert part.state.iter == 13
    resumed = train(cfg, tmp_path / "resumed", resume=part.checkpoint)
    assert full.checkpoint.read_bytes() == resumed.checkpoint.read_bytes()


def test_resume_with_other_seed_is_rejected(tmp_path):
    cfg = tiny_config(tmp_path, T=4)
    ck = train(cfg, tmp_path / "run").checkpoint
    with pytest.raises(ValueError, match="different type samples"):
        train(tiny_config(tmp_path, T=4, seed=9), resume=ck)


def test_spec_mismatch_is_explicit(tmp_path):
    ck = train(tiny_config(tmp_path, T=2), tmp_path / "run").checkpoint
    with pytest.raises(ValueError, match="spec mismatch"):
        load_network(ck, expect=PgmnSpec.default(1, 2))
    with pytest.raises(ValueError, match="spec mismatch"):
        load_state(tiny_config(tmp_path, m=2, T=2), ck)


def test_corrupt_and_foreign_checkpoints(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="corrupted"):
        read_checkpoint(bad)
    bad.write_text(json.dumps({"hello": 1}))
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(bad)
    ck = train(tiny_config(tmp_path, T=2), tmp_path / "run").checkpoint
    doc = json.loads(ck.read_text())
    doc["version"] = 99
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(bad)


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, monkeypatch):
    real = training.covariance_trick_loss
    calls = {"n": 0}

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        L = real(*args, **kwargs)
        return ad.scale(L, math.nan) if calls["n"] > 3 else L

    monkeypatch.setattr(training, "covariance_trick_loss", poisoned)
    cfg = tiny_config(tmp_path, T=10)
    with pytest.raises(TrainingAborted) as info:
        train(cfg, tmp_path / "run")
    assert info.value.checkpoint is not None and info.value.checkpoint.is_file()
    assert read_checkpoint(info.value.checkpoint)["state"]["iter"] == 3
