import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ein.encoder import (
    RATE_EPS,
    EpiEncoder,
    encode,
    learned_support_share,
    raw_from_rate,
    rate_from_raw,
    set_rates,
    unroll_length,
)

from conftest import tree_from_parents


def _enc(h=4, out=6, a=0.25, b=0.25, dynamics="eusd", seed=0):
    torch.manual_seed(seed)
    enc = EpiEncoder(h, out, a, b, dynamics).double()
    set_rates(enc, a, b)
    return enc


def test_init_states_example():
    enc = _enc()
    with torch.no_grad():
        enc.W_u0.fill_(1.0)
    set_rates(enc, 0.25, 0.25)
    U0, S0, D0 = enc.init_states(torch.tensor([4.0]))
    # the rate map keeps 0.25 within a few ulps
    torch.testing.assert_close(U0[0], torch.full((4,), 2.0, dtype=torch.float64), rtol=0, atol=1e-12)
    torch.testing.assert_close(S0[0], enc.b_s)
    torch.testing.assert_close(D0[0], enc.b_d)
    U1, S1, _ = enc.init_states(torch.tensor([8.0]))
    torch.testing.assert_close(U1, 2 * U0)
    torch.testing.assert_close(S1, S0)
    assert torch.all(enc.init_states(torch.tensor([0.0]))[0] == 0)


def test_unroll_one_step_and_frozen_dynamics():
    enc = _enc()
    U0, S0, D0 = enc.init_states(torch.tensor([5.0]))
    st_ = enc.unroll(1, U0, S0, D0)
    torch.testing.assert_close(st_.U[1], 0.5 * U0, rtol=1e-12, atol=1e-15)
    with torch.no_grad():
        for w in (enc.W_u, enc.W_s, enc.W_d):
            w.copy_(torch.eye(4))
        enc.alpha_raw.fill_(-1e3)
        enc.beta_raw.fill_(-1e3)
    # the rate floor keeps a tiny flow into S and D; identity dynamics otherwise leaves them put
    st_ = enc.unroll(5, *enc.init_states(torch.tensor([5.0])))
    for t in range(6):
        torch.testing.assert_close(st_.S[t], S0, atol=5 * 2 * RATE_EPS * U0.abs().max().item(), rtol=0)
    with pytest.raises(ValueError):
        enc.unroll(0, U0, S0, D0)


@given(st.integers(1, 32), st.floats(0.01, 0.98), st.floats(0.0, 1.0), st.integers(1, 500), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_unknown_closed_form(T, a, frac, n, seed):
    b = (1 - a) * frac
    enc = _enc(a=a, b=b, seed=seed % 1000)
    U0, S0, D0 = enc.init_states(torch.tensor([float(n)]))
    U_T = enc.unroll(T, U0, S0, D0).U[T]
    factor = enc.keep_rate().item() ** T
    expected = factor * U0
    err = (U_T - expected).abs().max() / expected.abs().max().clamp_min(1e-300)
    assert err <= 1e-10


def test_x_g_depends_only_on_size_and_depth():
    enc = _enc()
    # two different shapes with n=5 and depth 2
    a = tree_from_parents([-1, 0, 0, 1, 1], ["a", "b", "c", "d", "e"])
    b = tree_from_parents([-1, 0, 0, 0, 3], ["x", "y", "z", "w", "v"])
    xa, pa = encode(a, enc)
    xb, pb = encode(b, enc)
    assert torch.equal(xa, xb) and torch.equal(pa, pb)
    c = tree_from_parents([-1, 0, 1, 2, 3])
    assert not torch.equal(encode(c, enc)[0], xa)
    with torch.no_grad():
        enc.W_x.zero_()
    assert torch.all(encode(a, enc)[0] == 0)


def test_depth_zero_uses_one_step():
    t = tree_from_parents([-1])
    assert unroll_length(t) == 1
    x, p = encode(t, _enc())
    assert x.shape == (6,) and p.shape == (1, 3)


def test_state_scores_softmax_examples():
    enc = _enc(h=2)
    with torch.no_grad():
        enc.score_proj.copy_(torch.eye(3, 2) * 0 + torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
    from ein.encoder import EncoderState

    z = torch.zeros(2, 1, 2, dtype=torch.float64)
    U = z.clone()
    U[1, 0, 0] = math.log(2)
    p = enc.state_scores(EncoderState(U, z.clone(), z.clone()))
    torch.testing.assert_close(p[0, 0], torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64))
    p_eq = enc.state_scores(EncoderState(z.clone(), z.clone(), z.clone()))
    torch.testing.assert_close(p_eq[0, 0], torch.full((3,), 1 / 3, dtype=torch.float64))


def test_batched_forward_pads_and_matches_single():
    enc = _enc()
    trees = [tree_from_parents([-1, 0]), tree_from_parents([-1, 0, 1, 2]), tree_from_parents([-1])]
    x_g, p = enc(torch.tensor([float(t.n) for t in trees], dtype=torch.float64), torch.tensor([unroll_length(t) for t in trees]))
    assert p.shape == (3, 3, 3)
    for i, t in enumerate(trees):
        xs, ps = encode(t, enc)
        torch.testing.assert_close(x_g[i], xs)
        torch.testing.assert_close(p[i, : len(ps)], ps)
    torch.testing.assert_close(p.sum(-1), torch.ones(3, 3, dtype=torch.float64))
    assert torch.all(p > 0)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_rates_stay_inside_bounds(raw):
    r = float(rate_from_raw(torch.tensor(raw, dtype=torch.float64)))
    assert RATE_EPS <= r <= 1 - RATE_EPS


def test_rates_after_aggressive_updates():
    enc = _enc()
    opt = torch.optim.SGD([enc.alpha_raw, enc.beta_raw], lr=1e4)
    for sign in (1, -1, 1):
        opt.zero_grad()
        (sign * (enc.alpha + enc.beta)).backward()
        opt.step()
        for r in (enc.alpha, enc.beta):
            r = float(r.detach())
            assert RATE_EPS <= r <= 1 - RATE_EPS
            assert math.isfinite(r)


def test_raw_roundtrip_and_boundary_inits():
    for r in (0.1, 0.25, 0.5, 0.9):
        assert float(rate_from_raw(torch.tensor(raw_from_rate(r), dtype=torch.float64))) == pytest.approx(r, abs=1e-12)
    lo = float(rate_from_raw(torch.tensor(raw_from_rate(0.0), dtype=torch.float64)))
    hi = float(rate_from_raw(torch.tensor(raw_from_rate(1.0), dtype=torch.float64)))
    assert RATE_EPS <= lo < 1e-3 and 1 - 1e-3 < hi <= 1 - RATE_EPS
    enc = _enc(a=0.2, b=0.6)
    assert learned_support_share(enc) == pytest.approx(0.25, abs=1e-9)


def test_usd_mode_runs_and_differs():
    trees = tree_from_parents([-1, 0, 1])
    e1, e2 = _enc(dynamics="eusd"), _enc(dynamics="usd")
    x1, _ = encode(trees, e1)
    x2, p2 = encode(trees, e2)
    assert not torch.equal(x1, x2)
    assert torch.all(torch.isfinite(p2))
    with pytest.raises(ValueError):
        EpiEncoder(4, 4, dynamics="sir")


def test_encoder_gradients_match_finite_differences():
    enc = _enc(h=3, out=4, a=0.3, b=0.2, seed=3)
    n = torch.tensor([5.0, 3.0], dtype=torch.float64)
    T = torch.tensor([3, 2])
    w = torch.randn(2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def f():
        x_g, p = enc(n, T)
        return (x_g * w).sum() + p.log().sum()

    params = dict(enc.named_parameters())
    enc.zero_grad()
    f().backward()
    h = 1e-5
    for name, p in params.items():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                fp = f().item()
                flat[i] = old - h
                fm = f().item()
                flat[i] = old
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grad[i].item()) <= 1e-3 * max(abs(fd), abs(grad[i].item()), 1e-6), (name, i)
