"""Generative state-space model: transition, emissions and per-event hazards.

Latent dynamics (all maps shared across time)::

    z_t | z_{t-1}, u_t  ~ N(A(z_{t-1}) + B(u_t), diag(exp(logQ)))
    x_t | z_t           ~ N(C(z_t),                diag(exp(logR)))
    u_t | z_{t-1}       ~ N(D(z_{t-1}),            diag(exp(logU)))
    hazard_e(t)         = L_e(z_t)  in (0, 1)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nets import MlpParams, init_mlp, mlp_forward

HAZARD_FLOOR = 1e-7
VARIANCE_FLOOR = 1e-6


class CatalogError(KeyError):
    """Event name not in the configured catalog."""


@dataclass(frozen=True)
class CohortSchema:
    obs_dim: int
    intervention_dim: int
    latent_dim: int
    events: tuple[str, ...]
    step_hours: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.obs_dim < 1 or self.intervention_dim < 0 or self.latent_dim < 1:
            raise ValueError(f"invalid dims in {self}")
        if not self.events:
            raise ValueError("event catalog is empty")
        if len(set(self.events)) != len(self.events):
            raise ValueError("duplicate event names in catalog")
        if self.step_hours <= 0:
            raise ValueError("step_hours must be positive")

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "intervention_dim": self.intervention_dim,
            "latent_dim": self.latent_dim,
            "events": list(self.events),
            "step_hours": self.step_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchema":
        return cls(
            int(d["obs_dim"]),
            int(d["intervention_dim"]),
            int(d["latent_dim"]),
            tuple(d["events"]),
            float(d.get("step_hours", 12.0)),
        )


@dataclass
class GaussianDiag:
    mean: Tensor
    variance: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


@dataclass
class GenerativeParams:
    schema: CohortSchema
    transition: MlpParams
    intervention_effect: MlpParams | None
    emission: MlpParams
    intervention_forecast: MlpParams | None
    hazard_heads: dict[str, MlpParams]
    log_q: Tensor
    log_r: Tensor
    log_u: Tensor
    linear: bool = False

    def __post_init__(self):
        missing = set(self.schema.events) ^ set(self.hazard_heads)
        if missing:
            raise CatalogError(f"hazard heads do not match catalog: {sorted(missing)}")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        nets = [("A", self.transition), ("B", self.intervention_effect), ("C", self.emission),
                ("D", self.intervention_forecast)]
        nets += [(f"L[{e}]", self.hazard_heads[e]) for e in self.schema.events]
        for prefix, net in nets:
            if net is None:
                continue
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out += [(f"{prefix}.W{k}", w), (f"{prefix}.b{k}", b)]
        out += [("logQ", self.log_q), ("logR", self.log_r), ("logU", self.log_u)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _mlp_dims(n_in: int, n_out: int, units: int, layers: int, linear: bool) -> list[int]:
    if linear or layers <= 1:
        return [n_in, n_out]
    return [n_in] + [units] * (layers - 1) + [n_out]


def init_generative(
    schema: CohortSchema,
    rng: np.random.Generator,
    mlp_units: int = 32,
    mlp_layers: int = 3,
    linear: bool = False,
    hidden_activation: str = "tanh",
) -> GenerativeParams:
    """Fresh parameters for ``schema``.

    ``mlp_layers`` counts affine layers, so the default is two hidden layers of
    ``mlp_units`` plus the output layer. ``linear=True`` makes A, B, C, D single
    affine maps and the hazard heads logistic regressions on ``z``.
    """
    zd, od, idim = schema.latent_dim, schema.obs_dim, schema.intervention_dim

    def net(n_in, n_out, name, out_act="identity"):
        dims = _mlp_dims(n_in, n_out, mlp_units, mlp_layers, linear)
        return init_mlp(rng, dims, hidden_activation, out_act, name=name)

    heads = {e: net(zd, 1, f"L[{e}]", "sigmoid") for e in schema.events}
    return GenerativeParams(
        schema=schema,
        transition=net(zd, zd, "A"),
        intervention_effect=net(idim, zd, "B") if idim else None,
        emission=net(zd, od, "C"),
        intervention_forecast=net(zd, idim, "D") if idim else None,
        hazard_heads=heads,
        log_q=dc.param(np.zeros(zd), name="logQ"),
        log_r=dc.param(np.zeros(od), name="logR"),
        log_u=dc.param(np.zeros(idim), name="logU"),
        linear=linear,
    )


def _check(x: Tensor, dim: int, what: str) -> None:
    if x.data.ndim != 2 or x.shape[1] != dim:
        raise dc.ShapeError(f"{what}: expected [batch, {dim}], got {x.shape}")


def _diag_variance(log_var: Tensor, batch: int) -> Tensor:
    return dc.tile_rows(dc.exp(log_var), batch)


def transition_prior(theta: GenerativeParams, z_prev: Tensor, u_t: Tensor) -> GaussianDiag:
    s = theta.schema
    _check(z_prev, s.latent_dim, "transition_prior z_prev")
    _check(u_t, s.intervention_dim, "transition_prior u_t")
    mean = mlp_forward(theta.transition, z_prev)
    if theta.intervention_effect is not None:
        mean = mean + mlp_forward(theta.intervention_effect, u_t)
    return GaussianDiag(mean, _diag_variance(theta.log_q, z_prev.shape[0]))


def emit_observation(theta: GenerativeParams, z_t: Tensor) -> GaussianDiag:
    _check(z_t, theta.schema.latent_dim, "emit_observation")
    return GaussianDiag(mlp_forward(theta.emission, z_t), _diag_variance(theta.log_r, z_t.shape[0]))


def forecast_intervention(theta: GenerativeParams, z_prev: Tensor) -> GaussianDiag:
    _check(z_prev, theta.schema.latent_dim, "forecast_intervention")
    batch = z_prev.shape[0]
    if theta.intervention_forecast is None:
        empty = dc.tensor(np.zeros((batch, 0)))
        return GaussianDiag(empty, dc.tensor(np.ones((batch, 0))))
    return GaussianDiag(
        mlp_forward(theta.intervention_forecast, z_prev), _diag_variance(theta.log_u, batch)
    )


def hazard(theta: GenerativeParams, z_t: Tensor, event: str) -> Tensor:
    """Per-step event probability ``[batch, 1]``, clamped to ``[1e-7, 1 - 1e-7]``."""
    head = theta.hazard_heads.get(event)
    if head is None:
        raise CatalogError(f"unknown event {event!r}; catalog is {list(theta.schema.events)}")
    _check(z_t, theta.schema.latent_dim, "hazard")
    return dc.clip(mlp_forward(head, z_t), HAZARD_FLOOR, 1.0 - HAZARD_FLOOR)
