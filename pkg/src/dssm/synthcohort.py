"""Ground-truth linear-Gaussian cohorts with logistic per-event hazards.

Each patient is simulated from its own generator seeded by
``SeedSequence(seed, spawn_key=(index,))`` so output does not depend on
generation order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EventRecord, Trajectory, write_cohort


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


@dataclass
class GroundTruth:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    hazard_w: dict[str, np.ndarray]
    hazard_b: dict[str, float]
    sigma_q: float = 0.1
    sigma_r: float = 0.1
    sigma_u: float = 0.1
    t_max: int = 40
    early_censor_prob: float = 0.3
    step_hours: float = 12.0
    events: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.A, self.B, self.C, self.D = (np.atleast_2d(np.asarray(m, dtype=float))
                                          for m in (self.A, self.B, self.C, self.D))
        self.events = tuple(self.hazard_w)
        if set(self.hazard_w) != set(self.hazard_b):
            raise ValueError("hazard weights and biases name different events")
        rho = max(abs(np.linalg.eigvals(self.A))) if self.A.size else 0.0
        if rho > 1.0 + 1e-12:
            raise ValueError(f"transition spectral radius {rho:.3f} exceeds 1")
        if min(self.sigma_q, self.sigma_r, self.sigma_u) <= 0:
            raise ValueError("noise scales must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @property
    def intervention_dim(self) -> int:
        return self.D.shape[0]

    @classmethod
    def random(
        cls,
        seed: int = 0,
        latent_dim: int = 2,
        obs_dim: int = 6,
        intervention_dim: int = 2,
        events: tuple[str, ...] = ("event_a", "event_b", "event_c"),
        shared: tuple[str, ...] = (),
        t_max: int = 40,
        radius: float = 0.98,
        hazard_scale: float = 2.0,
        base_hazard: float = 0.01,
        **kwargs,
    ) -> "GroundTruth":
        """Stable, non-oscillating dynamics with well-conditioned readouts.

        ``A`` is symmetric with eigenvalues spread in ``[0.9 * radius, radius]``
        so a patient's risk ordering persists along the trajectory. Events
        listed in ``shared`` reuse the first shared event's weights and bias,
        so their true hazards coincide.
        """
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((latent_dim, latent_dim)))
        eig = radius * np.linspace(1.0, 0.9, latent_dim)
        A = basis @ np.diag(eig) @ basis.T
        B = 0.3 * rng.standard_normal((latent_dim, intervention_dim))
        D = 0.3 * rng.standard_normal((intervention_dim, latent_dim))
        M = A + B @ D
        r = max(abs(np.linalg.eigvals(M)))
        if r > radius:
            B *= radius / r
        C = rng.standard_normal((obs_dim, latent_dim))
        hw, hb = {}, {}
        for e in events:
            if e in shared and shared and e != shared[0] and shared[0] in hw:
                hw[e], hb[e] = hw[shared[0]].copy(), hb[shared[0]]
                continue
            w = rng.standard_normal(latent_dim)
            hw[e] = hazard_scale * w / np.linalg.norm(w)
            hb[e] = _logit(base_hazard)
        return cls(A, B, C, D, hw, hb, t_max=t_max, **kwargs)

    def to_json(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(), "D": self.D.tolist(),
            "hazard_w": {k: v.tolist() for k, v in self.hazard_w.items()},
            "hazard_b": dict(self.hazard_b),
            "sigma_q": self.sigma_q, "sigma_r": self.sigma_r, "sigma_u": self.sigma_u,
            "t_max": self.t_max, "early_censor_prob": self.early_censor_prob,
            "step_hours": self.step_hours,
        }


@dataclass
class SimulatedPatient:
    trajectory: Trajectory
    hazards: dict[str, np.ndarray]
    latent: np.ndarray


def simulate_patient(gt: GroundTruth, rng: np.random.Generator, patient_id: str) -> SimulatedPatient:
    """Simulate ``t_max`` steps; events and censoring are read off afterwards.

    The latent path always runs to ``t_max`` so the oracle hazards have a
    fixed length; early censoring truncates only the observed record.
    """
    L, O, I, T = gt.latent_dim, gt.obs_dim, gt.intervention_dim, gt.t_max
    z = np.zeros((T, L))
    u = np.zeros((T, I))
    x = np.zeros((T, O))
    z_prev = np.zeros(L)
    for t in range(T):
        u[t] = gt.D @ z_prev + gt.sigma_u * rng.standard_normal(I)
        if t == 0:
            z[t] = rng.standard_normal(L)
        else:
            z[t] = gt.A @ z_prev + gt.B @ u[t] + gt.sigma_q * rng.standard_normal(L)
        x[t] = gt.C @ z[t] + gt.sigma_r * rng.standard_normal(O)
        z_prev = z[t]
    lam = {e: _sigmoid(z @ gt.hazard_w[e] + gt.hazard_b[e]) for e in gt.events}
    fire = {e: rng.uniform(size=T) < lam[e] for e in gt.events}
    end = T
    if T > 1 and rng.uniform() < gt.early_censor_prob:
        end = int(rng.integers(1, T))
    events = {}
    for e in gt.events:
        hits = np.flatnonzero(fire[e][:end])
        events[e] = EventRecord(int(hits[0]) + 1, 0) if hits.size else EventRecord(end, 1)
    traj = Trajectory(patient_id, x[:end], u[:end], np.ones((end, O)), events)
    return SimulatedPatient(traj, lam, z)


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def simulate_cohort(
    gt: GroundTruth, n_patients: int, seed: int, prefix: str = "p", offset: int = 0
) -> list[SimulatedPatient]:
    if n_patients < 1:
        raise ValueError("need at least one patient")
    return [
        simulate_patient(gt, patient_rng(seed, offset + i), f"{prefix}{offset + i:06d}")
        for i in range(n_patients)
    ]


def write_simulation(out_dir, gt: GroundTruth, patients: list[SimulatedPatient]) -> dict[str, str]:
    """Write cohort.jsonl, events.csv, oracle.jsonl and ground_truth.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: str(out / f) for k, f in [("cohort", "cohort.jsonl"), ("events", "events.csv"),
                                          ("oracle", "oracle.jsonl"), ("truth", "ground_truth.json")]}
    write_cohort(paths["cohort"], (p.trajectory for p in patients))
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "event", "time_hours", "censored"])
        for p in patients:
            for e, rec in p.trajectory.events.items():
                w.writerow([p.trajectory.patient_id, e, repr((rec.t - 1) * gt.step_hours), rec.c])
    with open(paths["oracle"], "w", encoding="utf-8") as fh:
        for p in patients:
            for e, lam in p.hazards.items():
                row = {"patient_id": p.trajectory.patient_id, "event": e, "lambda": lam.tolist()}
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(gt.to_json(), fh, indent=2, sort_keys=True)
    return paths


def read_oracle(path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.setdefault(row["patient_id"], {})[row["event"]] = np.asarray(row["lambda"])
    return out
