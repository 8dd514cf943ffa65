"""Minibatch training, checkpoints, prediction and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import EventRecord, Trajectory, event_catalog, make_batch
from .inference import EncoderParams, encode, elbo, init_encoder
from .metrics import (
    ScoredSubject,
    UndefinedMetricError,
    WindowLabel,
    auc_roc,
    average_precision,
    c_index,
    window_label,
)
from .ssm import CohortSchema, GenerativeParams, init_generative
from .survival import HazardTrajectory, rollout, survival_at

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DSSMCKPT"
CHECKPOINT_VERSION = 1
LOSS_LOG_COLUMNS = ["epoch", "split", "total", "event_loglik", "kl", "recon_obs", "recon_u"]


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss term."""


class CheckpointError(ValueError):
    """Unreadable checkpoint or checkpoint/cohort mismatch."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    latent_dim: int = 8
    recurrent_hidden: int = 50
    mlp_units: int = 32
    mlp_layers: int = 3
    linear: bool = False
    w_rec: float = 1.0
    kl_weight: int = 1
    seed: int = 0
    step_hours: float = 12.0
    rollout_horizon: int = 240
    clip_grad: bool = False
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kl_weight not in (0, 1):
            raise ValueError("kl_weight must be 0 or 1")
        positive = ["learning_rate", "batch_size", "latent_dim", "recurrent_hidden", "mlp_units",
                    "mlp_layers", "step_hours", "rollout_horizon"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.w_rec < 0:
            raise ValueError("epochs and w_rec must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            kwargs[k] = _coerce(cls.__dataclass_fields__[k].default, v)
        return cls(**kwargs)


def _coerce(default, value):
    if isinstance(default, bool):
        if isinstance(value, str):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class Model:
    schema: CohortSchema
    config: TrainConfig
    theta: GenerativeParams
    phi: EncoderParams

    def named_parameters(self) -> list[tuple[str, dc.Tensor]]:
        return self.theta.named_parameters() + self.phi.named_parameters()

    def parameters(self) -> list[dc.Tensor]:
        return [t for _, t in self.named_parameters()]


def schema_for(cohort: list[Trajectory], config: TrainConfig) -> CohortSchema:
    if not cohort:
        raise ValueError("empty cohort")
    first = cohort[0]
    return CohortSchema(first.x.shape[1], first.u.shape[1], config.latent_dim,
                        event_catalog(cohort), config.step_hours)


def init_model(schema: CohortSchema, config: TrainConfig) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    theta = init_generative(schema, rng, config.mlp_units, config.mlp_layers, config.linear)
    phi = init_encoder(rng, schema.obs_dim + schema.intervention_dim, schema.latent_dim,
                       config.recurrent_hidden, config.mlp_units, config.mlp_layers)
    return Model(schema, config, theta, phi)


class Adam:
    def __init__(self, params: list[dc.Tensor], config: TrainConfig):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = (config.learning_rate, config.beta1,
                                               config.beta2, config.eps)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, (p, g) in enumerate(zip(self.params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            new = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new.setflags(write=False)
            p.data = new


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    epoch: int
    rng: np.random.Generator
    loss_log: list[dict]


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _check_finite(terms, epoch: int) -> None:
    named = {f"event_loglik[{e}]": v for e, v in terms.event_loglik.items()}
    named.update(kl=terms.kl, recon_obs=terms.recon_obs, recon_u=terms.recon_intervention)
    for name, t in named.items():
        if not np.isfinite(t.item()):
            raise NumericalError(f"non-finite {name} at epoch {epoch}")


def evaluate_loss(model: Model, cohort: list[Trajectory], seed: int = 0, batch_size: int = 256) -> dict:
    """Patient-weighted mean ELBO terms over ``cohort`` (no gradients)."""
    cfg = model.config
    sums: dict[str, float] = {}
    for start in range(0, len(cohort), batch_size):
        chunk = cohort[start : start + batch_size]
        terms = elbo(model.theta, model.phi, make_batch(chunk, model.schema.events),
                     seed=np.random.SeedSequence(seed, spawn_key=(start,)).generate_state(1)[0],
                     kl_weight=cfg.kl_weight, w_rec=cfg.w_rec)
        for k, v in terms.as_floats().items():
            sums[k] = sums.get(k, 0.0) + v * len(chunk)
    return {k: v / len(cohort) for k, v in sums.items()}


def train(
    config: TrainConfig,
    cohort: list[Trajectory],
    eval_cohort: list[Trajectory] | None = None,
    model: Model | None = None,
    progress=None,
    resume: TrainResult | None = None,
) -> TrainResult:
    """Adam ascent on the ELBO over seeded shuffled minibatches.

    ``resume`` continues a loaded checkpoint (parameters, Adam moments and
    shuffle RNG) from its recorded epoch up to ``config.epochs``; the result
    is bit-identical to an uninterrupted run.
    """
    if not cohort:
        raise ValueError("training cohort is empty")
    if resume is not None:
        model = resume.model
    schema = model.schema if model is not None else schema_for(cohort, config)
    for tr in cohort:
        missing = [e for e in schema.events if e not in tr.events]
        if missing:
            raise ValueError(f"patient {tr.patient_id} lacks event records {missing}")
    model = model or init_model(schema, config)
    params = model.parameters()
    if resume is not None:
        opt, rng, start = resume.optimizer, resume.rng, resume.epoch + 1
        opt.lr = config.learning_rate
    else:
        opt = Adam(params, config)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
        start = 1
    loss_log: list[dict] = []
    for epoch in range(start, config.epochs + 1):
        sums: dict[str, float] = {}
        for b, idx in enumerate(_batches(len(cohort), config.batch_size, rng)):
            batch = make_batch([cohort[i] for i in idx], schema.events)
            noise_seed = int(rng.integers(2**63))
            try:
                with dc.Tape() as tape:
                    terms = elbo(model.theta, model.phi, batch, noise_seed, config.kl_weight, config.w_rec)
                    loss = -terms.total
            except (dc.DomainError, dc.NonFiniteError) as exc:
                raise NumericalError(f"epoch {epoch}, batch {b + 1}: {exc}") from exc
            _check_finite(terms, epoch)
            grads = tape.backward(loss, params)
            g = [grads[id(p)].data for p in params]
            if config.clip_grad:
                norm = np.sqrt(sum(float(np.sum(x * x)) for x in g))
                if norm > config.clip_norm:
                    g = [x * (config.clip_norm / norm) for x in g]
            opt.step(g)
            for k, v in terms.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * batch.size
        row = {"epoch": epoch, "split": "train", **{k: v / len(cohort) for k, v in sums.items()}}
        loss_log.append(row)
        if eval_cohort:
            loss_log.append({"epoch": epoch, "split": "eval",
                             **evaluate_loss(model, eval_cohort, seed=config.seed)})
        if progress is not None:
            progress(row)
        log.info("epoch %d total %.4f", epoch, row["total"])
    return TrainResult(model, opt, max(config.epochs, start - 1), rng, loss_log)


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOSS_LOG_COLUMNS})


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, result: TrainResult) -> None:
    """Magic, uint32 version, uint64 header length, JSON header, raw ``<f8`` arrays."""
    model, opt = result.model, result.optimizer
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.named_parameters()]
    names = [n for n, _ in arrays]
    arrays += [(f"adam.m/{n}", m) for n, m in zip(names, opt.m)]
    arrays += [(f"adam.v/{n}", v) for n, v in zip(names, opt.v)]
    directory, offset = [], 0
    for name, arr in arrays:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    header = {
        "schema": model.schema.to_dict(),
        "config": model.config.to_dict(),
        "epoch": result.epoch,
        "adam_step": opt.step_count,
        "rng_state": result.rng.bit_generator.state,
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainResult:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    body = raw[20 + hlen :]
    schema = CohortSchema.from_dict(header["schema"])
    config = TrainConfig.from_dict(header["config"])
    model = init_model(schema, config)
    table = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=entry["count"], offset=start)
        table[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    named = model.named_parameters()
    for name, t in named:
        if name not in table or table[name].shape != t.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
        arr = table[name]
        arr.setflags(write=False)
        t.data = arr
    opt = Adam([t for _, t in named], config)
    opt.m = [table[f"adam.m/{n}"].copy() for n, _ in named]
    opt.v = [table[f"adam.v/{n}"].copy() for n, _ in named]
    opt.step_count = int(header["adam_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainResult(model, opt, int(header["epoch"]), rng, [])


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PatientPrediction:
    patient_id: str
    t_star: int
    hazards: dict[str, np.ndarray]

    def trajectory(self, event: str) -> HazardTrajectory:
        return HazardTrajectory(event, self.t_star, self.hazards[event])

    def risk(self, event: str, window: int | None = None) -> float:
        """``1 - S(window)``; the full horizon by default, constant tail beyond it."""
        traj = self.trajectory(event)
        w = traj.horizon if window is None else window
        return 1.0 - survival_at(traj, w)

    def to_json(self, step_hours: float) -> dict:
        return {
            "patient_id": self.patient_id,
            "tstar_step": self.t_star,
            "tstar_hours": self.t_star * step_hours,
            "step_hours": step_hours,
            "hazards": {e: v.tolist() for e, v in self.hazards.items()},
            "risk": {e: self.risk(e) for e in self.hazards},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PatientPrediction":
        return cls(str(d["patient_id"]), int(d["tstar_step"]),
                   {e: np.asarray(v, dtype=float) for e, v in d["hazards"].items()})


def tstar_steps(tstar_hours: float, step_hours: float) -> int:
    steps = int(np.floor(tstar_hours / step_hours + 1e-9))
    if steps < 1:
        raise ValueError(f"prediction time {tstar_hours}h is shorter than one {step_hours}h step")
    return steps


def predict(
    model: Model,
    cohort: list[Trajectory],
    tstar_hours: float,
    horizon: int | None = None,
    batch_size: int = 256,
) -> tuple[list[PatientPrediction], list[str]]:
    """Encode each record up to t*, roll the posterior mean forward.

    Returns predictions and the ids skipped because their record ends before t*.
    """
    schema = model.schema
    horizon = horizon or model.config.rollout_horizon
    t_star = tstar_steps(tstar_hours, schema.step_hours)
    keep, skipped = [], []
    for tr in cohort:
        if tr.x.shape[1] != schema.obs_dim or tr.u.shape[1] != schema.intervention_dim:
            raise CheckpointError(f"patient {tr.patient_id}: channel dims do not match checkpoint schema")
        (keep if tr.T >= t_star else skipped).append(tr)
    out = []
    for start in range(0, len(keep), batch_size):
        chunk = [tr.truncated(t_star) for tr in keep[start : start + batch_size]]
        post = encode(model.phi, make_batch(chunk), sample=False)
        z_star = post.steps[-1].mean.data
        trajs = rollout(model.theta, z_star, horizon, mode="mean", t_star=t_star)
        for b, tr in enumerate(chunk):
            out.append(PatientPrediction(tr.patient_id, t_star,
                                         {e: trajs[e][b].hazards for e in schema.events}))
    return out, [tr.patient_id for tr in skipped]


def write_predictions(path, preds: list[PatientPrediction], step_hours: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(step_hours), separators=(",", ":")) + "\n")


def read_predictions(path) -> tuple[list[PatientPrediction], float]:
    preds, step = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                step = float(d.get("step_hours", 12.0))
                preds.append(PatientPrediction.from_json(d))
    return preds, (step or 12.0)


# ---------------------------------------------------------------------------
# evaluation


def relative_event(rec: EventRecord, t_star: int) -> EventRecord | None:
    """Event re-indexed from the prediction time; None when it is already past."""
    rel = rec.t - t_star
    if rel < 1:
        return None
    return EventRecord(rel, rec.c)


@dataclass
class MetricRow:
    metric: str
    event: str
    window: str
    value: float | None
    n_pos: int
    n_neg: int
    n_excluded: int
    note: str = ""


def evaluate(
    preds: list[PatientPrediction],
    events: dict[str, dict[str, EventRecord]],
    windows: list[int],
    cindex_window: int | None = None,
) -> list[MetricRow]:
    """C-index per event, AUC-ROC and AP per event and window (windows in steps).

    ``events`` holds absolute step-indexed records per patient. Metrics that are
    undefined are reported with ``value=None`` and the reason in ``note``.
    """
    rows: list[MetricRow] = []
    catalog = list(dict.fromkeys(e for p in preds for e in p.hazards))
    for e in catalog:
        rel: list[tuple[PatientPrediction, EventRecord]] = []
        n_before = 0
        for p in preds:
            rec = events.get(p.patient_id, {}).get(e)
            if rec is None:
                continue
            r = relative_event(rec, p.t_star)
            if r is None:
                n_before += 1
            else:
                rel.append((p, r))
        subjects = [ScoredSubject(p.patient_id, p.risk(e, cindex_window), r.t, r.c) for p, r in rel]
        n_obs = sum(1 for s in subjects if s.c == 0)
        try:
            value, note = c_index(subjects), ""
        except UndefinedMetricError as exc:
            value, note = None, str(exc)
        rows.append(MetricRow("c_index", e, "all", value, n_obs, len(subjects) - n_obs, n_before, note))
        for w in windows:
            scores, labels, excluded = [], [], n_before
            for p, r in rel:
                lab = window_label(r, w)
                if lab is WindowLabel.EXCLUDED:
                    excluded += 1
                    continue
                scores.append(p.risk(e, w))
                labels.append(1 if lab is WindowLabel.POSITIVE else 0)
            n_pos = sum(labels)
            for name, fn in (("auc_roc", auc_roc), ("average_precision", average_precision)):
                try:
                    value, note = fn(scores, labels), ""
                except UndefinedMetricError as exc:
                    value, note = None, str(exc)
                rows.append(MetricRow(name, e, str(w), value, n_pos, len(labels) - n_pos, excluded, note))
    return rows


def write_metrics(path, rows: list[MetricRow], step_hours: float | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "event", "window", "value", "n_pos", "n_neg", "n_excluded", "note"])
        for r in rows:
            window = r.window
            if step_hours is not None and window != "all":
                window = f"{float(window) * step_hours:g}h"
            w.writerow([r.metric, r.event, window, "" if r.value is None else repr(r.value),
                        r.n_pos, r.n_neg, r.n_excluded, r.note])


def predictive_loglik(preds: list[PatientPrediction], events: dict[str, dict[str, EventRecord]]) -> float:
    """Mean over patients of summed per-event log-likelihoods of the roll-out hazards.

    Event times beyond the horizon use the constant tail.
    """
    total, n = 0.0, 0
    for p in preds:
        recs = events.get(p.patient_id, {})
        acc = 0.0
        used = False
        for e, lam in p.hazards.items():
            rec = recs.get(e)
            r = relative_event(rec, p.t_star) if rec is not None else None
            if r is None:
                continue
            used = True
            need = r.t
            seq = lam if need <= lam.size else np.r_[lam, np.full(need - lam.size, lam[-1])]
            n_surv = r.t if r.c == 1 else r.t - 1
            acc += float(np.sum(np.log1p(-seq[:n_surv])))
            if r.c == 0:
                acc += float(np.log(seq[r.t - 1]))
        if used:
            total += acc
            n += 1
    if n == 0:
        raise UndefinedMetricError("no patients with events after the prediction time")
    return total / n


__all__ = [
    "TrainConfig", "Model", "TrainResult", "NumericalError", "CheckpointError", "init_model",
    "schema_for", "train", "evaluate_loss", "write_loss_log", "save_checkpoint", "load_checkpoint",
    "PatientPrediction", "predict", "write_predictions", "read_predictions", "evaluate",
    "MetricRow", "write_metrics", "predictive_loglik", "relative_event", "tstar_steps",
]
