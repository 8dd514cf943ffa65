"""Cohort types, file formats and the irregular-to-grid preprocessing pipeline.

Pipeline order for raw records: harmonize codes -> drop outliers -> z-score ->
bin onto the step grid -> LOCF for observations -> gap-aware continuation for
interventions.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

RAW_COLUMNS = ["patient_id", "time_hours", "channel_kind", "channel_name", "value"]
EVENT_COLUMNS = ["patient_id", "event", "time_hours", "censored"]
MAP_COLUMNS = ["source_code", "canonical_name", "unit_scale"]


class IngestError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class EventRecord:
    """``t`` is the 1-based step of the event (or of censoring when ``c == 1``)."""

    t: int
    c: int

    def __post_init__(self):
        if self.t < 1:
            raise IngestError(f"event step must be >= 1, got {self.t}")
        if self.c not in (0, 1):
            raise IngestError(f"censor flag must be 0 or 1, got {self.c}")


@dataclass
class Trajectory:
    patient_id: str
    x: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    events: dict[str, EventRecord]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.x), -1)
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.x), -1)
        self.mask = np.asarray(self.mask, dtype=float).reshape(self.x.shape)
        if len(self.x) < 1:
            raise IngestError(f"patient {self.patient_id}: empty trajectory")
        if len(self.u) != len(self.x):
            raise IngestError(f"patient {self.patient_id}: x and u lengths differ")
        for name, ev in self.events.items():
            if ev.t > self.T:
                raise IngestError(f"patient {self.patient_id}: {name} at {ev.t} beyond T={self.T}")

    @property
    def T(self) -> int:
        return len(self.x)

    def truncated(self, steps: int) -> "Trajectory":
        """First ``steps`` steps, with events dropped (used for prediction inputs)."""
        return Trajectory(self.patient_id, self.x[:steps], self.u[:steps], self.mask[:steps], {})

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "T": self.T,
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "mask": self.mask.tolist(),
            "events": {k: {"t": v.t, "c": v.c} for k, v in self.events.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        T = int(d["T"])
        x = np.asarray(d["x"], dtype=float).reshape(T, -1)
        u = np.asarray(d["u"], dtype=float).reshape(T, -1)
        mask = np.asarray(d.get("mask", np.ones_like(x)), dtype=float).reshape(x.shape)
        events = {k: EventRecord(int(v["t"]), int(v["c"])) for k, v in d.get("events", {}).items()}
        return cls(str(d["patient_id"]), x, u, mask, events)


def write_cohort(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajectories:
            fh.write(json.dumps(tr.to_json(), separators=(",", ":")) + "\n")


def read_cohort(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
    return out


def event_catalog(trajectories: Iterable[Trajectory]) -> tuple[str, ...]:
    names: list[str] = []
    for tr in trajectories:
        for e in tr.events:
            if e not in names:
                names.append(e)
    return tuple(names)


@dataclass
class Batch:
    """Time-major padded arrays for a group of patients.

    ``x``/``mask`` are ``[T, B, O]``, ``u`` is ``[T, B, I]``, ``valid`` is
    ``[T, B]``; ``event_t``/``event_c`` are ``[B, E]`` in catalog order.
    """

    patient_ids: list[str]
    x: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    lengths: np.ndarray
    event_t: np.ndarray
    event_c: np.ndarray

    @property
    def size(self) -> int:
        return len(self.patient_ids)


def make_batch(trajectories: list[Trajectory], events: tuple[str, ...] = ()) -> Batch:
    if not trajectories:
        raise IngestError("cannot batch zero trajectories")
    B = len(trajectories)
    T = max(tr.T for tr in trajectories)
    O = trajectories[0].x.shape[1]
    I = trajectories[0].u.shape[1]
    x = np.zeros((T, B, O))
    u = np.zeros((T, B, I))
    mask = np.zeros((T, B, O))
    valid = np.zeros((T, B))
    event_t = np.ones((B, len(events)), dtype=int)
    event_c = np.ones((B, len(events)), dtype=int)
    for b, tr in enumerate(trajectories):
        if tr.x.shape[1] != O or tr.u.shape[1] != I:
            raise IngestError(f"patient {tr.patient_id}: channel dims differ within batch")
        n = tr.T
        x[:n, b] = tr.x
        u[:n, b] = tr.u
        mask[:n, b] = tr.mask
        valid[:n, b] = 1.0
        for k, e in enumerate(events):
            rec = tr.events.get(e)
            if rec is None:
                raise IngestError(f"patient {tr.patient_id} has no record for event {e!r}")
            event_t[b, k], event_c[b, k] = rec.t, rec.c
    return Batch([tr.patient_id for tr in trajectories], x, u, mask, valid,
                 np.array([tr.T for tr in trajectories]), event_t, event_c)


# ---------------------------------------------------------------------------
# splitting


def patient_hash(patient_id: str) -> int:
    """Stable unsigned 64-bit hash of the id string."""
    return int.from_bytes(hashlib.blake2b(patient_id.encode("utf-8"), digest_size=8).digest(), "little")


def split_of(patient_id: str) -> str:
    """80/10/10 train/eval/test assignment from the id hash modulo 10."""
    bucket = patient_hash(patient_id) % 10
    if bucket < 8:
        return "train"
    return "eval" if bucket == 8 else "test"


# ---------------------------------------------------------------------------
# raw record streams


def _read_csv(path, columns: list[str]) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"patient_id": str}, encoding="utf-8")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}")
    return df[columns]


def read_raw(path) -> pd.DataFrame:
    df = _read_csv(path, RAW_COLUMNS)
    df["channel_name"] = df["channel_name"].astype(str)
    bad = ~df["channel_kind"].isin(["obs", "intervention"])
    if bad.any():
        raise IngestError(f"{path}: channel_kind must be obs|intervention")
    return df


def read_events(path) -> pd.DataFrame:
    df = _read_csv(path, EVENT_COLUMNS)
    if not df["censored"].isin([0, 1]).all():
        raise IngestError(f"{path}: censored must be 0 or 1")
    return df


def read_harmonization_map(path) -> pd.DataFrame:
    df = _read_csv(path, MAP_COLUMNS)
    df["source_code"] = df["source_code"].astype(str)
    return df


def harmonize(raw: pd.DataFrame, mapping: pd.DataFrame, strict: bool = True) -> pd.DataFrame:
    """Rewrite channel codes to canonical names and apply unit scales.

    Unknown codes raise :class:`IngestError` when ``strict``; otherwise they
    are dropped.
    """
    table = mapping.set_index("source_code")
    known = raw["channel_name"].isin(table.index)
    if not known.all():
        unknown = sorted(raw.loc[~known, "channel_name"].unique())
        if strict:
            raise IngestError(f"unmapped channel codes: {unknown}")
        log.warning("dropping %d rows with unmapped codes %s", int((~known).sum()), unknown)
    out = raw.loc[known].copy()
    codes = out["channel_name"]
    out["channel_name"] = codes.map(table["canonical_name"]).to_numpy()
    out["value"] = out["value"].to_numpy() * codes.map(table["unit_scale"]).to_numpy(dtype=float)
    return out.reset_index(drop=True)


@dataclass
class PreprocessStats:
    """Per-channel statistics from the training split.

    ``channels`` maps name -> dict(kind, mean, std, p1, p99); ``gap90`` maps
    intervention channel -> 90th percentile inter-administration gap (hours).
    """

    channels: dict[str, dict]
    gap90: dict[str, float] = field(default_factory=dict)
    split: str = "train"

    def names(self, kind: str) -> list[str]:
        return sorted(k for k, v in self.channels.items() if v["kind"] == kind and v.get("included", True))

    def to_json(self) -> dict:
        return {"split": self.split, "channels": self.channels, "gap90": self.gap90}

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessStats":
        if d.get("split") != "train":
            raise IngestError("stats file was not computed on the training split")
        return cls(d["channels"], {k: float(v) for k, v in d.get("gap90", {}).items()}, "train")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PreprocessStats":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def remove_outliers(stream: pd.DataFrame, stats: PreprocessStats) -> pd.DataFrame:
    """Drop rows below ``0.1 * p1`` or above ``10 * p99`` of their channel."""
    p1 = stream["channel_name"].map(lambda c: stats.channels[c]["p1"]).to_numpy(dtype=float)
    p99 = stream["channel_name"].map(lambda c: stats.channels[c]["p99"]).to_numpy(dtype=float)
    v = stream["value"].to_numpy(dtype=float)
    keep = ~((v < 0.1 * p1) | (v > 10.0 * p99))
    return stream.loc[keep].reset_index(drop=True)


def zscore(stream: pd.DataFrame, stats: PreprocessStats) -> pd.DataFrame:
    """Standardize values per channel; zero-variance channels are excluded.

    The returned frame is tagged so that a second call is a no-op.
    """
    if stream.attrs.get("zscored"):
        return stream
    out = stream.copy()
    std = out["channel_name"].map(lambda c: stats.channels[c]["std"]).to_numpy(dtype=float)
    mu = out["channel_name"].map(lambda c: stats.channels[c]["mean"]).to_numpy(dtype=float)
    flat = std <= 0
    if flat.any():
        dropped = sorted(out.loc[flat, "channel_name"].unique())
        log.warning("excluding zero-variance channels %s", dropped)
        for c in dropped:
            stats.channels[c]["included"] = False
    out = out.loc[~flat].copy()
    out["value"] = (out["value"].to_numpy(dtype=float) - mu[~flat]) / std[~flat]
    out = out.reset_index(drop=True)
    out.attrs["zscored"] = True
    return out


def inverse_zscore(stream: pd.DataFrame, stats: PreprocessStats) -> pd.DataFrame:
    out = stream.copy()
    std = out["channel_name"].map(lambda c: stats.channels[c]["std"]).to_numpy(dtype=float)
    mu = out["channel_name"].map(lambda c: stats.channels[c]["mean"]).to_numpy(dtype=float)
    out["value"] = out["value"].to_numpy(dtype=float) * std + mu
    out.attrs.pop("zscored", None)
    return out


def administration_gaps(stream: pd.DataFrame) -> dict[str, np.ndarray]:
    """Hours between consecutive records of each intervention channel, per patient."""
    iv = stream[stream["channel_kind"] == "intervention"].sort_values(["patient_id", "time_hours"])
    gaps: dict[str, list[np.ndarray]] = {}
    for (pid, chan), grp in iv.groupby(["patient_id", "channel_name"], sort=True):
        d = np.diff(grp["time_hours"].to_numpy(dtype=float))
        gaps.setdefault(chan, []).append(d)
    return {k: np.concatenate(v) for k, v in gaps.items()}


def compute_stats(train_stream: pd.DataFrame) -> PreprocessStats:
    """Percentiles from the raw training rows; mean/std/gaps after outlier removal."""
    channels = {}
    for (kind, chan), grp in train_stream.groupby(["channel_kind", "channel_name"], sort=True):
        v = grp["value"].to_numpy(dtype=float)
        channels[chan] = {"kind": kind, "p1": float(np.percentile(v, 1)),
                          "p99": float(np.percentile(v, 99))}
    stats = PreprocessStats(channels)
    cleaned = remove_outliers(train_stream, stats)
    for chan, grp in cleaned.groupby("channel_name", sort=True):
        v = grp["value"].to_numpy(dtype=float)
        channels[chan]["mean"] = float(v.mean())
        channels[chan]["std"] = float(v.std())
    for chan in channels:
        channels[chan].setdefault("mean", 0.0)
        channels[chan].setdefault("std", 0.0)
    for chan, g in administration_gaps(cleaned).items():
        if g.size:
            stats.gap90[chan] = float(np.percentile(g, 90))
    return stats


# ---------------------------------------------------------------------------
# gridding and imputation


@dataclass
class Grid:
    """One patient's binned series before/after imputation.

    ``u_times`` holds, per intervention channel, the sorted raw administration
    times (hours) used by the continuation rule.
    """

    x: np.ndarray
    x_mask: np.ndarray
    u: np.ndarray
    u_mask: np.ndarray
    u_times: list[np.ndarray]
    step_hours: float


def step_index(time_hours, step_hours: float):
    """1-based bin of a time: ``floor(time / step) + 1``."""
    return np.floor(np.asarray(time_hours, dtype=float) / step_hours).astype(int) + 1


def discretize(
    stream: pd.DataFrame,
    step_hours: float,
    end_time: float,
    obs_channels: list[str],
    intervention_channels: list[str],
) -> Grid:
    """Bin one patient's rows; within a bin the latest timestamp wins."""
    if step_hours <= 0:
        raise ValueError("step_hours must be positive")
    t = stream["time_hours"].to_numpy(dtype=float)
    if (t < 0).any():
        raise IngestError("records before time 0")
    T = int(step_index(max(end_time, t.max(initial=0.0)), step_hours))
    x = np.zeros((T, len(obs_channels)))
    xm = np.zeros_like(x)
    u = np.zeros((T, len(intervention_channels)))
    um = np.zeros_like(u)
    u_times: list[list[float]] = [[] for _ in intervention_channels]
    ocol = {c: k for k, c in enumerate(obs_channels)}
    icol = {c: k for k, c in enumerate(intervention_channels)}
    ordered = stream.sort_values("time_hours", kind="stable")
    for time, kind, chan, value in ordered[["time_hours", "channel_kind", "channel_name", "value"]].itertuples(
        index=False
    ):
        s = int(step_index(time, step_hours)) - 1
        if kind == "obs" and chan in ocol:
            x[s, ocol[chan]] = value
            xm[s, ocol[chan]] = 1.0
        elif kind == "intervention" and chan in icol:
            u[s, icol[chan]] = value
            um[s, icol[chan]] = 1.0
            u_times[icol[chan]].append(float(time))
    return Grid(x, xm, u, um, [np.asarray(v) for v in u_times], step_hours)


def impute_observations(grid: Grid) -> Grid:
    """Last observation carried forward; bins before the first value hold 0."""
    x = grid.x.copy()
    for k in range(x.shape[1]):
        last = 0.0
        for s in range(x.shape[0]):
            if grid.x_mask[s, k]:
                last = x[s, k]
            else:
                x[s, k] = last
    return Grid(x, grid.x_mask, grid.u, grid.u_mask, grid.u_times, grid.step_hours)


def impute_interventions(grid: Grid, gap90: dict[str, float], channels: list[str]) -> Grid:
    """Carry a setting forward only between administrations closer than the gap threshold.

    Unrecorded bins otherwise mean "no action" and hold 0. Channels without a
    threshold (fewer than two administrations anywhere) never continue.
    """
    u = np.where(grid.u_mask > 0, grid.u, 0.0)
    for k, chan in enumerate(channels):
        limit = gap90.get(chan)
        times = np.sort(grid.u_times[k])
        if limit is None or times.size < 2:
            continue
        bins = step_index(times, grid.step_hours) - 1
        for a, b, ta, tb in zip(bins[:-1], bins[1:], times[:-1], times[1:]):
            if b - a >= 2 and tb - ta <= limit:
                u[a + 1 : b, k] = u[a, k]
    return Grid(grid.x, grid.x_mask, u, grid.u_mask, grid.u_times, grid.step_hours)


def build_trajectories(
    stream: pd.DataFrame,
    events: pd.DataFrame,
    stats: PreprocessStats,
    step_hours: float,
) -> list[Trajectory]:
    """Tensorize every patient in ``stream`` (already harmonized/cleaned/z-scored)."""
    obs = stats.names("obs")
    ivs = stats.names("intervention")
    catalog = list(dict.fromkeys(events["event"]))
    ev_by_pid = {pid: grp for pid, grp in events.groupby("patient_id", sort=False)}
    out = []
    pids = list(dict.fromkeys(list(stream["patient_id"]) + list(events["patient_id"])))
    by_pid = {pid: grp for pid, grp in stream.groupby("patient_id", sort=False)}
    for pid in pids:
        rows = by_pid.get(pid, stream.iloc[0:0])
        ev = ev_by_pid.get(pid)
        if ev is None:
            raise IngestError(f"patient {pid} has no event records")
        end = float(ev["time_hours"].max())
        grid = discretize(rows, step_hours, end, obs, ivs)
        grid = impute_interventions(impute_observations(grid), stats.gap90, ivs)
        recs = {}
        for name, time, cens in ev[["event", "time_hours", "censored"]].itertuples(index=False):
            recs[name] = EventRecord(int(step_index(time, step_hours)), int(cens))
        missing = [e for e in catalog if e not in recs]
        if missing:
            raise IngestError(f"patient {pid} lacks records for events {missing}")
        out.append(Trajectory(pid, grid.x, grid.u, grid.x_mask, {e: recs[e] for e in catalog}))
    return out


def preprocess(
    raw: pd.DataFrame,
    events: pd.DataFrame,
    mapping: pd.DataFrame | None,
    step_hours: float,
    stats: PreprocessStats | None = None,
    strict: bool = True,
) -> tuple[list[Trajectory], PreprocessStats]:
    """Full pipeline; stats are computed from the train split unless supplied."""
    stream = harmonize(raw, mapping, strict) if mapping is not None else raw.copy()
    if stats is None:
        train = stream[stream["patient_id"].map(split_of) == "train"]
        if train.empty:
            raise IngestError("no training-split patients to compute statistics from")
        stats = compute_stats(train)
    unknown = set(stream["channel_name"]) - set(stats.channels)
    if unknown:
        log.warning("channels absent from stats are ignored: %s", sorted(unknown))
        stream = stream[stream["channel_name"].isin(stats.channels)]
    stream = zscore(remove_outliers(stream, stats), stats)
    return build_trajectories(stream, events, stats, step_hours), stats
