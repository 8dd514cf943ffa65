"""Discrete hazard -> survival / incidence algebra and latent roll-outs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ssm import HAZARD_FLOOR, GenerativeParams, forecast_intervention, hazard, transition_prior


@dataclass
class HazardTrajectory:
    event: str
    t_star: int
    hazards: np.ndarray

    def __post_init__(self):
        self.hazards = np.asarray(self.hazards, dtype=float)
        if self.hazards.ndim != 1 or self.hazards.size < 1:
            raise ValueError("hazard trajectory needs at least one step")

    @property
    def horizon(self) -> int:
        return self.hazards.size


@dataclass
class SurvivalCurve:
    """``survival[t]`` for t = 0..H (``survival[0] == 1``); ``density[t-1]`` = f(t)."""

    survival: np.ndarray
    density: np.ndarray

    @property
    def horizon(self) -> int:
        return self.density.size


def survival_from_hazard(hazards) -> SurvivalCurve:
    """S(t) = prod_{s<=t} (1 - λ_s), accumulated in log space; f(t) = S(t-1) λ_t.

    Exact zeros are accepted (they arise before clamping); anything outside
    ``[0, 1)`` is a domain error.
    """
    lam = np.asarray(hazards, dtype=float).reshape(-1)
    if lam.size == 0:
        raise ValueError("empty hazard sequence")
    if np.any(lam < 0.0) or np.any(lam >= 1.0) or not np.all(np.isfinite(lam)):
        raise dc.DomainError("hazards must lie in [0, 1)")
    log_s = np.concatenate([[0.0], np.cumsum(np.log1p(-lam))])
    surv = np.exp(log_s)
    dens = surv[:-1] - surv[1:]
    return SurvivalCurve(surv, dens)


def extend_constant_tail(traj: HazardTrajectory, t: int) -> float:
    """Hazard at step ``t``; beyond the horizon the last value is held."""
    if t < 1:
        raise ValueError("steps are 1-based")
    return float(traj.hazards[min(t, traj.horizon) - 1])


def survival_at(traj: HazardTrajectory, t: int) -> float:
    """S(t) using the constant tail past the horizon."""
    curve = survival_from_hazard(traj.hazards[: min(t, traj.horizon)])
    s = curve.survival[-1]
    extra = t - traj.horizon
    if extra > 0:
        s *= (1.0 - traj.hazards[-1]) ** extra
    return float(s)


def risk_score(curve: SurvivalCurve, window: int) -> float:
    """Probability of the event within ``window`` steps: ``1 - S(window)``."""
    if not 1 <= window <= curve.horizon:
        raise ValueError(f"window {window} outside 1..{curve.horizon}")
    return float(1.0 - curve.survival[window])


def rollout(
    theta: GenerativeParams,
    z_star,
    horizon: int,
    mode: str = "mean",
    seed=0,
    t_star: int = 0,
) -> dict[str, list[HazardTrajectory]]:
    """Run the generative model forward ``horizon`` steps from ``z_star``.

    Each step forecasts the intervention from the current state, applies the
    transition, and reads every hazard head off the new state. ``z_star`` may
    be a ``[batch, latent]`` array; the result maps event -> one trajectory per
    batch row.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if mode not in ("mean", "sampled"):
        raise ValueError(f"unknown roll-out mode {mode!r}")
    rng = np.random.default_rng(seed) if mode == "sampled" else None
    z = dc.tensor(np.atleast_2d(np.asarray(getattr(z_star, "data", z_star), dtype=float)))
    events = theta.schema.events
    lam = {e: np.empty((z.shape[0], horizon)) for e in events}
    for tau in range(horizon):
        fu = forecast_intervention(theta, z)
        u = fu.mean
        if rng is not None and fu.dim:
            u = dc.tensor(u.data + np.sqrt(fu.variance.data) * rng.standard_normal(u.shape))
        prior = transition_prior(theta, z, u)
        z = prior.mean
        if rng is not None:
            z = dc.tensor(z.data + np.sqrt(prior.variance.data) * rng.standard_normal(z.shape))
        for e in events:
            lam[e][:, tau] = hazard(theta, z, e).data[:, 0]
    return {
        e: [HazardTrajectory(e, t_star, np.clip(row, HAZARD_FLOOR, 1 - HAZARD_FLOOR)) for row in lam[e]]
        for e in events
    }


def write_trajectory_csv(path, rows, step_hours: float) -> None:
    """``rows`` yields ``(patient_id, HazardTrajectory)``; one CSV line per step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "event", "tau_step", "tau_hours", "hazard", "survival"])
        for pid, traj in rows:
            surv = survival_from_hazard(traj.hazards).survival
            for tau, (lam, s) in enumerate(zip(traj.hazards, surv[1:]), 1):
                w.writerow([pid, traj.event, tau, repr(tau * step_hours), repr(float(lam)), repr(float(s))])
