import numpy as np
import pytest

from fluidctl import autodiff as ad
from fluidctl import environment as env
from fluidctl import policy as pol


def test_parameter_counts():
    assert pol.count_parameters(pol.LAYERS_2DOF) == 2206
    assert pol.count_parameters(pol.init_params(pol.LAYERS_2DOF)) == 2206
    assert pol.count_parameters(pol.LAYERS_3DOF) == 2211
    assert pol.init_params(pol.LAYERS_2DOF).dims == (16, 38, 38, 2)


def test_history_layout():
    p2 = pol.init_params(pol.LAYERS_2DOF)
    p3 = pol.init_params(pol.LAYERS_3DOF)
    assert p2.history == (1, 4) and p3.history == (2, 5)


def test_glorot_bounds():
    p = pol.init_params(pol.LAYERS_2DOF, seed=5)
    for w in p.weights:
        fan_out, fan_in = w.shape
        assert np.abs(w).max() <= np.sqrt(6 / (fan_in + fan_out))
    assert all(np.all(b == 0) for b in p.biases)


def test_output_bounded():
    p = pol.init_params(pol.LAYERS_3DOF, seed=1)
    p.weights[-1] *= 1e3
    out = pol.forward(p, np.full(32, 10.0)).value
    assert np.all(np.abs(out[:2]) <= 50.0) and abs(out[2]) <= 2000.0
    lin = pol.init_params(pol.LAYERS_2DOF, bounded=False)
    assert not lin.bounded


def test_forward_matches_numpy(rng):
    p = pol.init_params(pol.LAYERS_2DOF, seed=2)
    z = rng.normal(size=16)
    h = z
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = w @ h + b
        if k < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(pol.forward(p, z).value, 50.0 * np.tanh(h), rtol=1e-14)
    with pytest.raises(ValueError):
        pol.forward(p, np.zeros(15))


def test_weight_gradients(rng):
    p = pol.init_params((6, 5, 4, 2), seed=3)
    p.biases = [rng.normal(size=b.shape) * 0.1 for b in p.biases]
    z = rng.normal(size=6)
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in p.trainable()]
    out = pol.forward(p, z, taped=leaves)
    loss = ad.sum(ad.square(out))
    grads = tape.gradient(loss, leaves)
    eps = 1e-6
    rng2 = np.random.default_rng(0)
    for k, g in enumerate(grads):
        for _ in range(3):
            idx = tuple(rng2.integers(0, s) for s in g.shape)
            arrs = [a.copy() for a in p.trainable()]
            arrs[k][idx] += eps
            up = float(ad.sum(ad.square(pol.forward(p.with_trainable(arrs), z))).value)
            arrs[k][idx] -= 2 * eps
            dn = float(ad.sum(ad.square(pol.forward(p.with_trainable(arrs), z))).value)
            assert g[idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-7)
    assert p.flat().size == sum(g.size for g in grads)


def test_observation_frame_body_frame():
    cfg = env.make_environment("Base", {"resolution": 32})
    s = env.reset(cfg)
    s.alpha = ad.Tensor(np.pi / 2)
    s.vel = ad.Tensor(np.array([0.0, 2.0]))
    s.last_force = ad.Tensor(np.array([3.0, 0.0]))
    s.last_torque = ad.Tensor(7.0)
    fr = pol.observation_frame(s, ((40.0, 41.0), np.pi / 2 + 0.1), 3).value
    np.testing.assert_allclose(fr, [1.0, 0.0, 2.0, 0.0, 0.0, -3.0, 0.1, 0.0, 7.0], atol=1e-12)


def test_history_zero_padding_newest_first():
    h = pol.History(2, 3)
    h.push(ad.Tensor(np.ones(3)))
    w = [f.value for f in h.window()]
    np.testing.assert_array_equal(np.concatenate(w), [1, 1, 1, 0, 0, 0, 0, 0, 0])
    h.push(ad.Tensor(2 * np.ones(3)))
    h.push(ad.Tensor(3 * np.ones(3)))
    h.push(ad.Tensor(4 * np.ones(3)))
    assert [float(f.value[0]) for f in h.window()] == [4.0, 3.0, 2.0]


def test_assemble_state_pads_and_normalises():
    p = pol.init_params(pol.LAYERS_2DOF)
    p.mean = np.full(16, 1.0)
    p.std = np.full(16, 2.0)
    h = pol.new_history(p)
    h.push(ad.Tensor(np.arange(6.0)))
    z = pol.assemble_state(p, h).value
    assert z.shape == (16,)
    np.testing.assert_allclose(z[:6], (np.arange(6.0) - 1) / 2)
    np.testing.assert_allclose(z[6:], -0.5)


def test_checkpoint_roundtrip(tmp_path):
    p = pol.init_params(pol.LAYERS_3DOF, seed=4)
    p.mean = np.linspace(-1, 1, 32)
    p.std = np.linspace(1, 2, 32)
    pol.save_checkpoint(tmp_path / "a.pol", p)
    q = pol.load_checkpoint(tmp_path / "a.pol")
    for a, b in zip(p.trainable() + [p.mean, p.std], q.trainable() + [q.mean, q.std]):
        np.testing.assert_array_equal(a, b)
    assert (q.F_max, q.T_max) == (50.0, 2000.0)
    pol.save_checkpoint(tmp_path / "b.pol", q)
    assert (tmp_path / "a.pol").read_bytes() == (tmp_path / "b.pol").read_bytes()
    lin = pol.init_params(pol.LAYERS_2DOF, bounded=False)
    pol.save_checkpoint(tmp_path / "c.pol", lin)
    assert not pol.load_checkpoint(tmp_path / "c.pol").bounded
    (tmp_path / "bad.pol").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        pol.load_checkpoint(tmp_path / "bad.pol")


def test_controller_runs(small_env):
    p = pol.init_params(pol.LAYERS_2DOF, seed=0)
    c = pol.PolicyController(p)
    s = env.reset(small_env)
    f, t = c(s, ((50.0, 50.0), 0.0))
    assert f.shape == (2,) and np.all(np.abs(f) <= 50.0) and t == 0.0
