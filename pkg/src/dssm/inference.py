"""Variational encoder and the censored time-to-event ELBO.

The encoder runs a bidirectional LSTM over ``concat(x_t, u_t)`` and a combiner
MLP maps ``concat(z_{t-1} sample, birnn_t)`` to a diagonal Gaussian over
``z_t``. The objective per patient is::

    sum_e loglik_e - kl_weight * sum_t KL(q_t || p_t) + w_rec * (log p(x) + log p(u))

averaged over the patients of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import Batch, EventRecord
from .diffcore import Tensor
from .nets import MlpParams, RecurrentCellParams, birnn_encode, init_lstm, init_mlp, mlp_forward
from .ssm import (
    VARIANCE_FLOOR,
    GaussianDiag,
    GenerativeParams,
    hazard,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EncoderParams:
    forward_cell: RecurrentCellParams
    backward_cell: RecurrentCellParams
    combiner: MlpParams
    latent_dim: int

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, cell in (("enc.fwd", self.forward_cell), ("enc.bwd", self.backward_cell)):
            out += [(f"{prefix}.W_in", cell.w_input), (f"{prefix}.W_hh", cell.w_hidden),
                    (f"{prefix}.b", cell.bias)]
        for k, (w, b) in enumerate(zip(self.combiner.weights, self.combiner.biases)):
            out += [(f"enc.comb.W{k}", w), (f"enc.comb.b{k}", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def init_encoder(
    rng: np.random.Generator,
    input_dim: int,
    latent_dim: int,
    hidden: int = 50,
    mlp_units: int = 32,
    mlp_layers: int = 3,
) -> EncoderParams:
    fwd = init_lstm(rng, input_dim, hidden, name="enc.fwd")
    bwd = init_lstm(rng, input_dim, hidden, name="enc.bwd")
    n_in = latent_dim + 2 * hidden
    dims = [n_in, 2 * latent_dim] if mlp_layers <= 1 else (
        [n_in] + [mlp_units] * (mlp_layers - 1) + [2 * latent_dim])
    return EncoderParams(fwd, bwd, init_mlp(rng, dims, name="enc.comb"), latent_dim)


@dataclass
class PosteriorSequence:
    steps: list[GaussianDiag]
    samples: list[Tensor]

    def __len__(self) -> int:
        return len(self.steps)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def posterior_step(phi: EncoderParams, z_prev: Tensor, h_t: Tensor) -> GaussianDiag:
    out = mlp_forward(phi.combiner, dc.concat([z_prev, h_t]))
    d = phi.latent_dim
    mean = dc.slice_cols(out, 0, d)
    var = dc.softplus(dc.slice_cols(out, d, 2 * d)) + VARIANCE_FLOOR
    return GaussianDiag(mean, var)


def encode(phi: EncoderParams, batch: Batch, seed=0, sample: bool = True) -> PosteriorSequence:
    """Filter the batch through q_phi, drawing one reparameterized sample per step.

    Noise is drawn as ``standard_normal((batch, latent))`` once per step in time
    order from the seeded generator. With ``sample=False`` the mean is fed
    forward instead (used for prediction).
    """
    T = batch.x.shape[0]
    if T < 1:
        raise dc.UsageError("cannot encode an empty trajectory")
    rng = _rng(seed)
    inputs = [dc.tensor(np.concatenate([batch.x[t], batch.u[t]], axis=1)) for t in range(T)]
    hs = birnn_encode(phi.forward_cell, phi.backward_cell, inputs, batch.valid)
    z = dc.tensor(np.zeros((batch.size, phi.latent_dim)))
    steps, samples = [], []
    for t in range(T):
        q = posterior_step(phi, z, hs[t])
        if sample:
            eps = dc.tensor(rng.standard_normal((batch.size, phi.latent_dim)))
            z = q.mean + dc.sqrt(q.variance) * eps
        else:
            z = q.mean
        steps.append(q)
        samples.append(z)
    return PosteriorSequence(steps, samples)


def _kl_elementwise(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    if q.mean.shape != p.mean.shape:
        raise dc.ShapeError(f"KL: dims differ {q.mean.shape} vs {p.mean.shape}")
    ratio = q.variance / p.variance
    diff = dc.square(q.mean - p.mean) / p.variance
    return dc.scale(ratio + diff - 1.0 - dc.log(ratio), 0.5)


def kl_gaussian_diag(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over dimensions and averaged over the batch."""
    return dc.scale(dc.sum(_kl_elementwise(q, p)), 1.0 / q.mean.shape[0])


def event_loglik(hazards, ev: EventRecord) -> Tensor:
    """Log-likelihood of one event record given its hazard sequence ``λ_1..λ_T``.

    Observed (``c=0``): ``sum_{s<t} log(1-λ_s) + log λ_t``.
    Censored (``c=1``): ``sum_{s<=t} log(1-λ_s)``.
    """
    lam = hazards if isinstance(hazards, Tensor) else dc.tensor(np.asarray(hazards, dtype=float))
    lam = dc.reshape(lam, (lam.size,))
    T = lam.size
    if not 1 <= ev.t <= T:
        raise ValueError(f"event time {ev.t} outside 1..{T}")
    if ev.c not in (0, 1):
        raise ValueError(f"censor flag must be 0 or 1, got {ev.c}")
    n_surv = ev.t if ev.c == 1 else ev.t - 1
    total = None
    if n_surv:
        total = dc.sum(dc.log(1.0 - dc.slice_cols(lam, 0, n_surv)))
    if ev.c == 0:
        hit = dc.sum(dc.log(dc.slice_cols(lam, ev.t - 1, ev.t)))
        total = hit if total is None else total + hit
    return total


def event_masks(batch: Batch, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Survival and hit masks ``[T, batch]`` for catalog event index ``k``."""
    T = batch.x.shape[0]
    steps = np.arange(1, T + 1)[:, None]
    te = batch.event_t[:, k][None, :]
    cens = batch.event_c[:, k][None, :] == 1
    surv = np.where(cens, steps <= te, steps < te).astype(float)
    hit = ((~cens) & (steps == te)).astype(float)
    return surv, hit


@dataclass
class ElboTerms:
    event_loglik: dict[str, Tensor]
    kl: Tensor
    recon_obs: Tensor
    recon_intervention: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "event_loglik": float(sum(v.item() for v in self.event_loglik.values())),
            "kl": self.kl.item(),
            "recon_obs": self.recon_obs.item(),
            "recon_u": self.recon_intervention.item(),
        }


def _rows(t: np.ndarray) -> np.ndarray:
    """Flatten leading ``[T, batch]`` axes into rows (time-major)."""
    return t.reshape(t.shape[0] * t.shape[1], *t.shape[2:])


def _gauss_logpdf(x: np.ndarray, mean: Tensor, log_var: Tensor, weight: np.ndarray) -> Tensor:
    n = mean.shape[0]
    lv = dc.tile_rows(log_var, n)
    sq = dc.square(dc.tensor(x) - mean) / dc.exp(lv)
    dens = dc.scale(sq + lv + LOG_2PI, -0.5)
    return dc.sum(dens * dc.tensor(weight))


def elbo(
    theta: GenerativeParams,
    phi: EncoderParams,
    batch: Batch,
    seed=0,
    kl_weight: float = 1.0,
    w_rec: float = 1.0,
) -> ElboTerms:
    """Single-sample ELBO of a padded batch, averaged over patients."""
    schema = theta.schema
    if batch.event_t.shape[1] != len(schema.events):
        raise KeyError("batch does not carry a record for every catalog event")
    T, B = batch.x.shape[0], batch.size
    post = encode(phi, batch, seed)
    zeros = dc.tensor(np.zeros((B, schema.latent_dim)))
    z_all = dc.stack_rows(post.samples)
    z_prev = dc.stack_rows([zeros] + post.samples[:-1])
    valid = _rows(batch.valid)
    inv_b = 1.0 / B

    lls = {}
    for k, e in enumerate(schema.events):
        lam = hazard(theta, z_all, e)
        surv, hit = event_masks(batch, k)
        ll = dc.sum(dc.log(1.0 - lam) * dc.tensor(_rows(surv)[:, None]))
        ll = ll + dc.sum(dc.log(lam) * dc.tensor(_rows(hit)[:, None]))
        lls[e] = dc.scale(ll, inv_b)

    q = GaussianDiag(
        dc.stack_rows([s.mean for s in post.steps]),
        dc.stack_rows([s.variance for s in post.steps]),
    )
    u_rows = dc.tensor(_rows(batch.u))
    p_mean = mlp_forward(theta.transition, z_prev)
    if theta.intervention_effect is not None:
        p_mean = p_mean + mlp_forward(theta.intervention_effect, u_rows)
    p = GaussianDiag(p_mean, dc.tile_rows(dc.exp(theta.log_q), T * B))
    kl_w = np.repeat(valid[:, None], schema.latent_dim, axis=1)
    kl = dc.scale(dc.sum(_kl_elementwise(q, p) * dc.tensor(kl_w)), inv_b)

    obs_w = _rows(batch.mask) * valid[:, None]
    recon_obs = dc.scale(
        _gauss_logpdf(_rows(batch.x), mlp_forward(theta.emission, z_all), theta.log_r, obs_w), inv_b
    )
    if theta.intervention_forecast is not None:
        u_w = np.repeat(valid[:, None], schema.intervention_dim, axis=1)
        recon_u = dc.scale(
            _gauss_logpdf(_rows(batch.u), mlp_forward(theta.intervention_forecast, z_prev),
                          theta.log_u, u_w), inv_b
        )
    else:
        recon_u = dc.tensor(0.0)

    total = None
    for v in lls.values():
        total = v if total is None else total + v
    if kl_weight:
        total = total - dc.scale(kl, kl_weight)
    if w_rec:
        total = total + dc.scale(recon_obs + recon_u, w_rec)
    return ElboTerms(lls, kl, recon_obs, recon_u, total)
