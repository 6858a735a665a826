import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidctl import autodiff as ad
from fluidctl import losses as L


def _trace(l=1, e_xy=None, e_a=None, xdot=None, adot=None, F=None, T=None, F_prev=(0, 0), T_prev=0.0):
    tr = L.WindowTrace(F_prev=np.asarray(F_prev, float), T_prev=float(T_prev))
    for n in range(l):
        tr.append(np.asarray(e_xy[n] if e_xy else (0.0, 0.0), float),
                  float(e_a[n]) if e_a else 0.0,
                  np.asarray(xdot[n] if xdot else (0.0, 0.0), float),
                  float(adot[n]) if adot else 0.0,
                  np.asarray(F[n] if F else (0.0, 0.0), float),
                  float(T[n]) if T else 0.0)
    return tr


def _zero_weights(**kw):
    base = dict(beta_xy=0, beta_alpha=0, beta_xdot=0, beta_alphadot=0, beta_prox=0,
                beta_F=0, beta_T=0, beta_dF=0, beta_dT=0, l=1)
    base.update(kw)
    return L.LossWeights(**base)


def test_defaults():
    w2 = L.LossWeights.defaults(2)
    assert (w2.beta_xy, w2.beta_xdot, w2.beta_F, w2.beta_dF, w2.beta_prox, w2.l) == (15, 5, 0.1, 2, 0.1, 16)
    w3 = L.LossWeights.defaults(3)
    assert (w3.beta_xy, w3.beta_alpha, w3.beta_xdot, w3.beta_alphadot) == (5, 30, 5, 0.05)
    assert (w3.beta_F, w3.beta_dF, w3.beta_dT, w3.beta_prox, w3.l) == (0.1, 1, 1, 0.1, 16)


def test_validation():
    with pytest.raises(ValueError):
        L.LossWeights(l=0)
    with pytest.raises(ValueError):
        L.LossWeights(beta_F=-1.0)
    w = _zero_weights(l=2)
    with pytest.raises(ValueError, match="l=2"):
        L.total_loss(_trace(1), w)


def test_objective_examples():
    assert float(L.objective_term(_trace(2), L.LossWeights(l=2)).value) == 0.0
    w = _zero_weights(beta_xy=5, l=2)
    assert abs(float(L.objective_term(_trace(2, e_xy=[(1, 0), (0, 1)]), w).value) - 5.0) <= 1e-12
    w = _zero_weights(beta_alpha=30)
    assert abs(float(L.objective_term(_trace(1, e_a=[0.1]), w).value) - 0.3) <= 1e-12


def test_velocity_examples():
    w = _zero_weights(beta_xdot=5, beta_prox=0.1)
    assert float(L.velocity_term(_trace(1, e_xy=[(3, 4)]), w).value) == 0.0
    v = float(L.velocity_term(_trace(1, xdot=[(2, 0)], e_xy=[(3, 4)]), w).value)
    assert abs(v - 5 * 4 / 3.5) <= 1e-12
    assert abs(float(L.velocity_term(_trace(1, xdot=[(2, 0)]), w).value) - 20.0) <= 1e-12


def test_effort_examples():
    w = _zero_weights(beta_F=0.1, beta_dF=1)
    assert float(L.effort_term(_trace(1), w).value) == 0.0
    assert abs(float(L.effort_term(_trace(1, F=[(3, 4)]), w).value) - 27.5) <= 1e-12
    # constant effort window: only the magnitude term remains
    w3 = _zero_weights(beta_dF=1, beta_dT=1, l=3)
    tr = _trace(3, F=[(1, 2)] * 3, T=[4.0] * 3, F_prev=(1, 2), T_prev=4.0)
    assert float(L.effort_term(tr, w3).value) == 0.0


def test_total_is_sum_of_examples():
    w = _zero_weights(beta_xy=5, beta_xdot=5, beta_prox=0.1, beta_F=0.1, beta_dF=1, l=1)
    # O: 5*1 ; V: 5*4/(0.1*1+1) ; E: 27.5
    tr = _trace(1, e_xy=[(1, 0)], xdot=[(2, 0)], F=[(3, 4)])
    parts = L.breakdown(tr, w)
    assert abs(parts.O - 5.0) <= 1e-12
    assert abs(parts.V - 20 / 1.1) <= 1e-12
    assert abs(parts.E - 27.5) <= 1e-12
    assert float(parts.total.value) == pytest.approx(parts.O + parts.V + parts.E, abs=1e-12)
    assert L.reward(tr, w) == -float(parts.total.value)
    assert L.reward(_trace(1), w) == 0.0


def test_wrapped_angle_error():
    w = _zero_weights(beta_alpha=1)
    a = float(L.objective_term(_trace(1, e_a=[2 * np.pi - 0.1]), w).value)
    assert a == pytest.approx(0.01, abs=1e-12)


@pytest.mark.parametrize("token,zeroed", [
    ("OVE", ()),
    ("OV", ("beta_F", "beta_T", "beta_dF", "beta_dT")),
    ("OE", ("beta_xdot", "beta_alphadot")),
    ("O", ("beta_F", "beta_T", "beta_dF", "beta_dT", "beta_xdot", "beta_alphadot")),
])
def test_ablation(token, zeroed):
    w = L.apply_ablation(L.LossWeights.defaults(3), token)
    ref = L.LossWeights.defaults(3)
    for name in ("beta_xy", "beta_alpha", "beta_xdot", "beta_alphadot", "beta_F", "beta_T",
                 "beta_dF", "beta_dT", "beta_prox"):
        assert getattr(w, name) == (0.0 if name in zeroed else getattr(ref, name))


def test_ablation_invalid():
    with pytest.raises(ValueError, match="OVE"):
        L.apply_ablation(L.LossWeights(), "VE")


def test_gradient_matches_fd(rng):
    w = L.LossWeights.defaults(3)
    w = L.LossWeights(**{**w.__dict__, "l": 3, "beta_T": 0.2})
    base = rng.normal(size=(3, 9))

    def loss(x):
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        tr = L.WindowTrace(F_prev=np.array([0.3, -0.2]), T_prev=0.1)
        for n in range(3):
            row = ad.slice(x, 9 * n, 9 * n + 9)
            tr.append(ad.slice(row, 0, 2), row[2], ad.slice(row, 3, 5), row[5],
                      ad.slice(row, 6, 8), row[8])
        return L.total_loss(tr, w)

    assert ad.grad_check(loss, base.ravel()) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5))
def test_velocity_gating_monotone(r1, r2, speed):
    w = L.LossWeights(l=1)
    lo, hi = sorted((r1, r2))
    v_lo = float(L.velocity_term(_trace(1, xdot=[(speed, 0)], e_xy=[(lo, 0)]), w).value)
    v_hi = float(L.velocity_term(_trace(1, xdot=[(speed, 0)], e_xy=[(hi, 0)]), w).value)
    assert v_hi <= v_lo


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=12, max_size=12))
def test_terms_nonnegative_and_linear(vals):
    v = np.array(vals)
    tr = _trace(1, e_xy=[v[0:2]], e_a=[v[2]], xdot=[v[3:5]], adot=[v[5]], F=[v[6:8]], T=[v[8]],
                F_prev=v[9:11], T_prev=v[11])
    w = L.LossWeights.defaults(3)
    w = L.LossWeights(**{**w.__dict__, "l": 1})
    p = L.breakdown(tr, w)
    assert p.O >= 0 and p.V >= 0 and p.E >= 0
    w2 = L.LossWeights(**{**w.__dict__, "beta_F": 2 * w.beta_F, "beta_dF": 2 * w.beta_dF,
                          "beta_dT": 2 * w.beta_dT})
    assert L.breakdown(tr, w2).E == pytest.approx(2 * p.E, rel=1e-12, abs=1e-12)
