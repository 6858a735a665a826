import csv

import numpy as np
import pytest

from fluidctl import autodiff as ad
from fluidctl import environment as env
from fluidctl import policy as pol
from fluidctl import training as T
from fluidctl.losses import LossWeights, WindowTrace, apply_ablation, total_loss


def test_lr_schedule():
    cfg = T.TrainConfig.defaults("BaseNR")
    assert T.lr_schedule(cfg, 0) == 0.01
    assert T.lr_schedule(cfg, 200) == 0.005
    assert T.lr_schedule(cfg, 399) == 0.005
    cfg3 = T.TrainConfig.defaults("Base")
    assert (cfg3.n_i, cfg3.lr_half_every) == (5000, 1000)
    assert (cfg.n_i, cfg.l, cfg.lr0) == (1000, 16, 0.01)


def test_clip_global_norm():
    g, n = T.clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert n == 5.0
    np.testing.assert_allclose(np.concatenate(g), [0.6, 0.8])
    g, _ = T.clip_global_norm([np.array([0.3])], 1.0)
    assert g[0][0] == 0.3


def test_adam_first_step_is_lr_sign():
    opt = T.Adam([(3,)])
    out = opt.step([np.zeros(3)], [np.array([2.0, -0.5, 0.0])], 0.01)
    np.testing.assert_allclose(out[0], [-0.01, 0.01, 0.0], atol=1e-9)


def test_architecture_override():
    assert T.architecture(2) == (16, 38, 38, 2)
    assert T.architecture(3) == (32, 32, 32, 3)
    assert T.architecture(2, (2, 0)) == (18, 38, 38, 2)


def test_zero_iterations_returns_init():
    cfg = T.TrainConfig.defaults("BaseNR", n_i=0, env_overrides={"resolution": 32})
    res = T.train_diffphys(cfg)
    ref = pol.init_params(pol.LAYERS_2DOF, seed=0)
    ref.weights[-1] = ref.weights[-1] * cfg.output_init_scale
    for a, b in zip(res.params.trainable(), ref.trainable()):
        np.testing.assert_array_equal(a, b)
    assert res.log == []


def _tiny(**kw):
    base = dict(n_i=3, l=2, env_overrides={"resolution": 32}, warmup_episodes=1, warmup_steps=10,
                val_every=0)
    base.update(kw)
    return T.TrainConfig.defaults("BaseNR", **base)


def test_training_log_and_determinism(tmp_path):
    cfg = _tiny()
    a = T.train_diffphys(cfg, log_path=tmp_path / "a.csv", checkpoint_dir=tmp_path)
    b = T.train_diffphys(cfg, log_path=tmp_path / "b.csv")
    pol.save_checkpoint(tmp_path / "a.pol", a.params)
    pol.save_checkpoint(tmp_path / "b.pol", b.params)
    assert (tmp_path / "a.pol").read_bytes() == (tmp_path / "b.pol").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == T.LOG_COLUMNS and len(rows) == 3
    assert float(rows[0]["lr"]) == 0.01
    # the parameters moved
    init = pol.init_params(pol.LAYERS_2DOF, seed=0)
    assert not np.array_equal(a.params.weights[0], init.weights[0])


def test_ablation_reflected_in_log():
    w = apply_ablation(LossWeights.defaults(2), "O")
    res = T.train_diffphys(_tiny(weights=w))
    assert all(r["V"] == 0.0 and r["E"] == 0.0 for r in res.log)
    w = apply_ablation(LossWeights.defaults(2), "OV")
    res = T.train_diffphys(_tiny(weights=w))
    assert all(r["E"] == 0.0 for r in res.log) and any(r["V"] > 0 for r in res.log)


def test_validation_picks_best(monkeypatch):
    errs = iter([3.0, 1.0, 2.0])
    monkeypatch.setattr(T, "validate", lambda *a, **k: next(errs))
    res = T.train_diffphys(_tiny(n_i=2, val_every=1))
    assert res.validation == [(0, 3.0), (1, 1.0), (2, 2.0)]
    assert res.best_iteration == 1


def test_non_finite_loss_aborts(monkeypatch):
    from fluidctl import losses

    real = losses.breakdown

    def bad(trace, w):
        out = real(trace, w)
        return losses.LossBreakdown(ad.mul(out.total, float("nan")), out.O, out.V, out.E)

    monkeypatch.setattr(T, "breakdown", bad)
    with pytest.raises(T.NonFiniteLoss) as exc:
        T.train_diffphys(_tiny())
    assert "efforts" in exc.value.dump


def _window_loss_fn(cfg, l, seed):
    """Loss of an l-step window as a function of the first (world-frame) effort."""
    rng = np.random.default_rng(seed)
    x_obj, _ = env.sample_objective(rng, 2)
    efforts = rng.uniform(-20, 20, size=(l, 2))
    w = LossWeights(l=l)

    def fn(f0):
        s = env.reset(cfg)
        tr = WindowTrace()
        for n in range(l):
            f = f0 if n == 0 else efforts[n]
            s = env.step(s, (f, ad.Tensor(0.0)), cfg, clamp=False)
            tr.append(ad.sub(np.asarray(x_obj), s.pos), ad.sub(0.0, s.alpha), s.vel, s.omega, f,
                      ad.Tensor(0.0))
        return total_loss(tr, w)

    return fn, efforts[0]


@pytest.mark.parametrize("seed", range(2))
def test_window_gradient_fd(seed):
    cfg = env.make_environment("BaseNR", {"resolution": 32, "poisson_tol": 1e-12})
    fn, f0 = _window_loss_fn(cfg, 4, seed)
    assert ad.grad_check(fn, f0, eps=1e-4) < 1e-3


def test_quintic_rest_to_rest():
    p = T.quintic([0.0, 0.0], [10.0, -5.0], 100, 0.1)
    np.testing.assert_array_equal(p[0], [0, 0])
    np.testing.assert_allclose(p[-1], [10, -5])
    v = np.diff(p, axis=0)
    assert np.abs(v[0]).max() < 1e-3 and np.abs(v[-1]).max() < 1e-3


def test_split_counts():
    assert T.split_counts(100) == (80, 20)
    assert T.split_counts(200) == (180, 20)
    assert T.split_counts(2) == (1, 1)
    with pytest.raises(ValueError):
        T.split_counts(1)


def test_hover_targets_cancel_fluid():
    cfg = env.make_environment("BuoyNR", {"resolution": 32})
    p = pol.init_params(pol.LAYERS_2DOF, bounded=False)
    sim = T.prescribed_run(cfg, p, (cfg.initial_position, 0.0), 20)
    np.testing.assert_allclose(sim.path, np.tile(cfg.initial_position, (21, 1)))
    # zero prescribed acceleration: each target is exactly minus the fluid force
    s = env.reset(cfg)
    for n in range(20):
        s = env.step(s, (np.zeros(2), 0.0), cfg, clamp=False)
        np.testing.assert_array_equal(sim.targets[n, :2], -s.fluid_force)
        s.pos = ad.Tensor(np.array(cfg.initial_position))
        s.vel = ad.Tensor(np.zeros(2))
        s.last_force = ad.Tensor(-s.fluid_force)
        s.last_torque = ad.Tensor(0.0)


def test_replay_reproduces_path():
    cfg = env.make_environment("BaseNR", {"resolution": 32})
    ds = T.generate_supervised_dataset(cfg, n_sims=2, n_steps=60, seed=1)
    for sim in ds.train + ds.val:
        drift = np.abs(T.replay(cfg, sim) - sim.path).max()
        assert drift < 1e-6


def test_dataset_shape_and_file(tmp_path):
    cfg = env.make_environment("BaseNR", {"resolution": 32})
    ds = T.generate_supervised_dataset(cfg, n_sims=3, n_steps=10, seed=0)
    assert len(ds.train) == 2 and len(ds.val) == 1 and len(ds) == 30
    T.write_dataset(tmp_path / "d.dset", ds.train)
    raw = (tmp_path / "d.dset").read_bytes()
    assert raw[:4] == b"DSET" and len(raw) == 12 + 20 * 19 * 8
    z, y = T.read_dataset(tmp_path / "d.dset")
    zt, yt = ds.stack(ds.train)
    np.testing.assert_array_equal(z, zt)
    np.testing.assert_array_equal(y, yt)


def test_supervised_memorises_single_sample(rng):
    z = rng.normal(size=(1, 16))
    y = np.array([[3.0, -2.0, 0.0]])
    res = T.train_supervised((z, y), None, dof=2, n_i=4000, lr0=0.01, lr_half_every=500,
                             val_every=100)
    assert res.train_loss[-1] < 1e-6
    assert not res.params.bounded


def test_supervised_best_not_worse_than_start(rng):
    z = rng.normal(size=(200, 16))
    y = np.c_[z[:, :2] * 5, np.zeros(200)]
    res = T.train_supervised((z[:160], y[:160]), (z[160:], y[160:]), n_i=300, val_every=50)
    best = min(v for _, v in res.val_loss)
    assert best <= res.val_loss[0][1]
    assert T._mse(res.params, z[160:], y[160:]) == best


def test_supervised_backward_matches_tape(rng):
    p = pol.init_params(pol.LAYERS_2DOF, seed=1, bounded=False)
    p.biases = [rng.normal(size=b.shape) * 0.1 for b in p.biases]
    z = rng.normal(size=(5, 16))
    y = rng.normal(size=(5, 2))
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in p.trainable()]
    loss = ad.Tensor(0.0)
    for k in range(5):
        out = pol.forward(p, z[k], taped=leaves)
        loss = ad.add(loss, ad.mul(ad.sum(ad.square(ad.sub(out, y[k]))), 1 / 5))
    ref = tape.gradient(loss, leaves)
    value, grads = T.batch_gradients(p, z, y)
    assert value == pytest.approx(float(loss.value), rel=1e-12)
    for g, r in zip(grads, ref):
        np.testing.assert_allclose(g, r, rtol=1e-10, atol=1e-12)
