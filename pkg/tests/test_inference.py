import math

import numpy as np
import pytest

from dssm import diffcore as dc
from dssm.data import EventRecord, Trajectory, make_batch
from dssm.inference import (
    elbo,
    encode,
    event_loglik,
    init_encoder,
    kl_gaussian_diag,
)
from dssm.nets import MlpParams
from dssm.ssm import CohortSchema, GaussianDiag, init_generative

from conftest import random_trajectory


def _g(mean, var):
    return GaussianDiag(dc.tensor(np.atleast_2d(mean)), dc.tensor(np.atleast_2d(var)))


# ---------------------------------------------------------------------------
# KL and event likelihood


def test_kl_of_identical_gaussians_is_zero():
    q = _g([[0.3, -1.0]], [[0.5, 2.0]])
    assert kl_gaussian_diag(q, q).item() == 0.0


def test_kl_shifted_mean():
    assert kl_gaussian_diag(_g([[1.0]], [[1.0]]), _g([[0.0]], [[1.0]])).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_wider_variance():
    expected = 0.5 * (4 - 1 - math.log(4))
    got = kl_gaussian_diag(_g([[0.0]], [[4.0]]), _g([[0.0]], [[1.0]])).item()
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(0.806853, abs=1e-6)


def test_kl_averages_over_batch_and_sums_over_dims():
    q = _g([[1.0, 0.0], [0.0, 0.0]], [[1.0, 4.0], [1.0, 1.0]])
    p = _g(np.zeros((2, 2)), np.ones((2, 2)))
    assert kl_gaussian_diag(q, p).item() == pytest.approx((0.5 + 0.5 * (3 - math.log(4))) / 2, abs=1e-15)


def test_kl_is_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = _g(rng.standard_normal((3, 4)), rng.uniform(0.1, 3, (3, 4)))
        p = _g(rng.standard_normal((3, 4)), rng.uniform(0.1, 3, (3, 4)))
        assert kl_gaussian_diag(q, p).item() >= 0.0


def test_event_loglik_examples():
    assert event_loglik([0.3], EventRecord(1, 0)).item() == pytest.approx(math.log(0.3), abs=1e-15)
    assert event_loglik([0.3, 0.5], EventRecord(2, 1)).item() == pytest.approx(
        math.log(0.7) + math.log(0.5), abs=1e-15)
    assert event_loglik([0.3, 0.5], EventRecord(2, 0)).item() == pytest.approx(math.log(0.35), abs=1e-15)


def test_event_loglik_rejects_out_of_range_time():
    with pytest.raises(ValueError):
        event_loglik([0.3, 0.5], EventRecord(3, 0))


# ---------------------------------------------------------------------------
# encoder


def _encoder_with_fixed_output(input_dim, latent, mean, var, hidden=2):
    """Combiner with zero weights and bias chosen so q = N(mean, var) everywhere."""
    phi = init_encoder(np.random.default_rng(0), input_dim, latent, hidden=hidden, mlp_layers=1)
    raw = math.log(math.expm1(var - 1e-6))
    W = np.zeros((latent + 2 * hidden, 2 * latent))
    b = np.r_[np.full(latent, mean), np.full(latent, raw)]
    phi.combiner = MlpParams([dc.param(W)], [dc.param(b)])
    return phi


def _batch(n, T, obs=2, ints=1, seed=0, events=("a",)):
    rng = np.random.default_rng(seed)
    return make_batch([random_trajectory(rng, f"p{i}", T, obs, ints, events) for i in range(n)], events)


def test_encode_is_deterministic_per_seed():
    phi = init_encoder(np.random.default_rng(1), 3, 2, hidden=4)
    b = _batch(3, 5)
    s1 = encode(phi, b, seed=11).samples
    s2 = encode(phi, b, seed=11).samples
    s3 = encode(phi, b, seed=12).samples
    assert all(np.array_equal(a.data, c.data) for a, c in zip(s1, s2))
    assert not np.array_equal(s1[-1].data, s3[-1].data)


def test_tiny_variance_sample_equals_mean():
    phi = _encoder_with_fixed_output(3, 2, 0.25, 2e-6)
    post = encode(phi, _batch(4, 3), seed=0)
    for q, z in zip(post.steps, post.samples):
        np.testing.assert_allclose(z.data, q.mean.data, atol=1e-2)


def test_sampling_moments():
    phi = _encoder_with_fixed_output(3, 1, 0.0, 1.0, hidden=1)
    n = 100_000
    b = make_batch([Trajectory(f"p{i}", np.zeros((1, 2)), np.zeros((1, 1)), np.ones((1, 2)), {})
                    for i in range(n)])
    z = encode(phi, b, seed=5).samples[0].data[:, 0]
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_mean_mode_feeds_means_forward():
    phi = init_encoder(np.random.default_rng(2), 3, 2, hidden=3)
    post = encode(phi, _batch(2, 4), sample=False)
    assert all(np.array_equal(q.mean.data, z.data) for q, z in zip(post.steps, post.samples))


# ---------------------------------------------------------------------------
# ELBO


def _np_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _np_mlp(p, x):
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.data + b.data
        act = p.output_activation if k == last else p.hidden_activation
        h = {"identity": lambda v: v, "tanh": np.tanh, "sigmoid": _np_sigmoid}[act](h)
    return h


def _np_lstm(cell, xs):
    W, U, b = cell.w_input.data, cell.w_hidden.data, cell.bias.data
    H = U.shape[0]
    h, c = np.zeros(H), np.zeros(H)
    out = []
    for x in xs:
        g = x @ W + h @ U + b
        i, f, o, cand = _np_sigmoid(g[:H]), _np_sigmoid(g[H:2 * H]), _np_sigmoid(g[2 * H:3 * H]), np.tanh(g[3 * H:])
        c = f * c + i * cand
        h = o * np.tanh(c)
        out.append(h)
    return out


def _np_logpdf(x, mean, log_var):
    return -0.5 * ((x - mean) ** 2 / np.exp(log_var) + log_var + math.log(2 * math.pi))


def _oracle_elbo(theta, phi, trajs, events, seed):
    """One-patient-at-a-time numpy recomputation, sharing only the noise stream."""
    T = max(tr.T for tr in trajs)
    L = phi.latent_dim
    rng = np.random.default_rng(seed)
    eps = np.stack([rng.standard_normal((len(trajs), L)) for _ in range(T)])
    totals = []
    for b, tr in enumerate(trajs):
        inp = np.concatenate([tr.x, tr.u], axis=1)
        fwd = _np_lstm(phi.forward_cell, inp)
        bwd = _np_lstm(phi.backward_cell, inp[::-1])[::-1]
        z_prev = np.zeros(L)
        ll = kl = rec = 0.0
        lam = {e: [] for e in events}
        for t in range(tr.T):
            out = _np_mlp(phi.combiner, np.r_[z_prev, fwd[t], bwd[t]][None])[0]
            qm, qv = out[:L], np.logaddexp(0.0, out[L:]) + 1e-6
            z = qm + np.sqrt(qv) * eps[t, b]
            pm = _np_mlp(theta.transition, z_prev[None])[0] + _np_mlp(theta.intervention_effect, tr.u[t][None])[0]
            pv = np.exp(theta.log_q.data)
            kl += np.sum(0.5 * (qv / pv + (qm - pm) ** 2 / pv - 1 - np.log(qv / pv)))
            xm = _np_mlp(theta.emission, z[None])[0]
            rec += np.sum(tr.mask[t] * _np_logpdf(tr.x[t], xm, theta.log_r.data))
            um = _np_mlp(theta.intervention_forecast, z_prev[None])[0]
            rec += np.sum(_np_logpdf(tr.u[t], um, theta.log_u.data))
            for e in events:
                lam[e].append(np.clip(_np_mlp(theta.hazard_heads[e], z[None])[0, 0], 1e-7, 1 - 1e-7))
            z_prev = z
        for e in events:
            rec_e = tr.events[e]
            lam_e = np.array(lam[e])
            n_surv = rec_e.t if rec_e.c else rec_e.t - 1
            ll += np.sum(np.log(1 - lam_e[:n_surv]))
            if rec_e.c == 0:
                ll += np.log(lam_e[rec_e.t - 1])
        totals.append(ll - kl + rec)
    return float(np.mean(totals))


@pytest.mark.parametrize("linear", [False, True])
def test_elbo_matches_straight_line_oracle(linear):
    rng = np.random.default_rng(7)
    events = ("a", "b")
    schema = CohortSchema(obs_dim=3, intervention_dim=2, latent_dim=3, events=events)
    theta = init_generative(schema, rng, mlp_units=5, mlp_layers=2, linear=linear)
    phi = init_encoder(rng, 5, 3, hidden=4, mlp_units=5, mlp_layers=2)
    for p in theta.parameters() + phi.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    trajs = [random_trajectory(rng, "p0", 4, 3, 2, events), random_trajectory(rng, "p1", 2, 3, 2, events)]
    got = elbo(theta, phi, make_batch(trajs, events), seed=99).total.item()
    assert got == pytest.approx(_oracle_elbo(theta, phi, trajs, events, 99), rel=1e-12, abs=1e-12)


def test_posterior_equal_to_prior_gives_zero_kl():
    schema = CohortSchema(obs_dim=2, intervention_dim=1, latent_dim=2, events=("a",))
    theta = init_generative(schema, np.random.default_rng(0), linear=True)
    for net in (theta.transition, theta.intervention_effect):
        for p in net.parameters():
            p.data = np.zeros(p.shape)
    phi = _encoder_with_fixed_output(3, 2, 0.0, 1.0)
    terms = elbo(theta, phi, _batch(3, 4, obs=2, ints=1), seed=1)
    assert abs(terms.kl.item()) < 1e-12
    f = terms.as_floats()
    assert f["total"] == pytest.approx(f["event_loglik"] + f["recon_obs"] + f["recon_u"], abs=1e-12)


def test_all_censored_tiny_hazard_gives_zero_event_loglik():
    schema = CohortSchema(obs_dim=2, intervention_dim=1, latent_dim=2, events=("a",))
    theta = init_generative(schema, np.random.default_rng(0), linear=True)
    theta.hazard_heads["a"] = MlpParams([dc.param(np.zeros((2, 1)))], [dc.param([-50.0])],
                                        output_activation="sigmoid")
    phi = init_encoder(np.random.default_rng(1), 3, 2, hidden=3)
    trajs = [Trajectory(f"p{i}", np.ones((5, 2)), np.ones((5, 1)), np.ones((5, 2)), {"a": EventRecord(5, 1)})
             for i in range(2)]
    ll = elbo(theta, phi, make_batch(trajs, ("a",))).event_loglik["a"].item()
    assert ll == pytest.approx(5 * math.log1p(-1e-7), abs=1e-15)
    assert abs(ll) < 1e-6


def test_kl_weight_zero_drops_kl_from_total():
    schema = CohortSchema(obs_dim=2, intervention_dim=1, latent_dim=2, events=("a",))
    rng = np.random.default_rng(3)
    theta = init_generative(schema, rng, mlp_units=4, mlp_layers=2)
    phi = init_encoder(rng, 3, 2, hidden=3)
    b = _batch(2, 3, obs=2, ints=1)
    full = elbo(theta, phi, b, seed=4).as_floats()
    abl = elbo(theta, phi, b, seed=4, kl_weight=0.0).as_floats()
    assert full["kl"] == abl["kl"] > 0
    assert abl["total"] == pytest.approx(full["total"] + full["kl"], abs=1e-12)


def test_elbo_requires_every_catalog_event():
    schema = CohortSchema(obs_dim=2, intervention_dim=1, latent_dim=2, events=("a", "b"))
    theta = init_generative(schema, np.random.default_rng(0))
    phi = init_encoder(np.random.default_rng(1), 3, 2, hidden=3)
    with pytest.raises(KeyError):
        elbo(theta, phi, _batch(2, 3, obs=2, ints=1, events=("a",)))
