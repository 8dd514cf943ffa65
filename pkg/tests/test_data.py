import math

import numpy as np
import pandas as pd
import pytest

from dssm.data import (
    EventRecord,
    Grid,
    IngestError,
    PreprocessStats,
    Trajectory,
    build_trajectories,
    compute_stats,
    discretize,
    harmonize,
    impute_interventions,
    impute_observations,
    inverse_zscore,
    make_batch,
    preprocess,
    read_cohort,
    read_events,
    read_harmonization_map,
    read_raw,
    remove_outliers,
    split_of,
    step_index,
    write_cohort,
    zscore,
)

from conftest import random_trajectory


def _raw(rows):
    return pd.DataFrame(rows, columns=["patient_id", "time_hours", "channel_kind", "channel_name", "value"])


def _stats(**chans):
    return PreprocessStats({k: dict(v) for k, v in chans.items()})


HR = {"kind": "obs", "mean": 80.0, "std": 10.0, "p1": 40.0, "p99": 150.0}


# ---------------------------------------------------------------------------
# harmonization and cleaning


def test_harmonize_merges_codes_and_scales_units():
    raw = _raw([("p", 1.0, "obs", "HR1", 70.0), ("p", 2.0, "obs", "HR2", 72.0),
                ("p", 3.0, "intervention", "drug_mg", 500.0)])
    m = pd.DataFrame({"source_code": ["HR1", "HR2", "drug_mg"], "canonical_name": ["hr", "hr", "drug"],
                      "unit_scale": [1.0, 1.0, 0.001]})
    out = harmonize(raw, m)
    assert list(out["channel_name"]) == ["hr", "hr", "drug"]
    assert out["value"].tolist() == [70.0, 72.0, 0.5]


def test_harmonize_identity_map_is_noop():
    raw = _raw([("p", 1.0, "obs", "hr", 70.0), ("p", 2.0, "obs", "sbp", 120.0)])
    m = pd.DataFrame({"source_code": ["hr", "sbp"], "canonical_name": ["hr", "sbp"], "unit_scale": [1.0, 1.0]})
    pd.testing.assert_frame_equal(harmonize(raw, m), raw)


def test_harmonize_unknown_code():
    raw = _raw([("p", 1.0, "obs", "hr", 70.0), ("p", 2.0, "obs", "zz", 1.0)])
    m = pd.DataFrame({"source_code": ["hr"], "canonical_name": ["hr"], "unit_scale": [1.0]})
    with pytest.raises(IngestError):
        harmonize(raw, m)
    assert len(harmonize(raw, m, strict=False)) == 1


def test_outlier_rule():
    stats = _stats(hr=HR)
    raw = _raw([("p", 0.0, "obs", "hr", 80.0), ("p", 1.0, "obs", "hr", 3000.0),
                ("p", 2.0, "obs", "hr", 1500.0), ("p", 3.0, "obs", "hr", 3.9), ("p", 4.0, "obs", "hr", 4.0)])
    assert remove_outliers(raw, stats)["value"].tolist() == [80.0, 1500.0, 4.0]


def test_zscore_values_and_round_trip():
    stats = _stats(hr=HR)
    rng = np.random.default_rng(0)
    vals = [80.0, 90.0] + rng.uniform(40, 150, 20).tolist()
    raw = _raw([("p", float(i), "obs", "hr", v) for i, v in enumerate(vals)])
    z = zscore(raw, stats)
    assert z["value"].tolist()[:2] == [0.0, 1.0]
    back = inverse_zscore(z, stats)
    np.testing.assert_allclose(back["value"], vals, rtol=0, atol=1e-12)
    assert zscore(z, stats) is z


def test_zscore_excludes_flat_channel(caplog):
    stats = _stats(hr=HR, flat={"kind": "obs", "mean": 1.0, "std": 0.0, "p1": 1.0, "p99": 1.0})
    raw = _raw([("p", 0.0, "obs", "hr", 90.0), ("p", 0.0, "obs", "flat", 1.0)])
    out = zscore(raw, stats)
    assert out["channel_name"].tolist() == ["hr"]
    assert "flat" not in stats.names("obs")
    assert "zero-variance" in caplog.text


def test_stats_require_train_split(tmp_path):
    p = tmp_path / "s.json"
    _stats(hr=HR).save(p)
    assert PreprocessStats.load(p).channels["hr"]["mean"] == 80.0
    bad = PreprocessStats({"hr": HR}, split="test")
    bad.save(p)
    with pytest.raises(IngestError):
        PreprocessStats.load(p)


# ---------------------------------------------------------------------------
# gridding


def test_step_index_examples():
    assert step_index(13.0, 12.0) == 2
    assert step_index(0.0, 12.0) == 1
    assert step_index(12.0, 12.0) == 2
    rng = np.random.default_rng(1)
    times = rng.uniform(0, 200, 5)
    for t in times:
        assert step_index(t, 12.0) == math.floor(t / 12.0) + 1


def test_discretize_last_timestamp_wins_and_masks():
    raw = _raw([("p", 14.0, "obs", "hr", 2.0), ("p", 13.0, "obs", "hr", 1.0), ("p", 30.0, "obs", "sbp", 5.0)])
    g = discretize(raw, 12.0, 30.0, ["hr", "sbp"], [])
    assert g.x.shape == (3, 2)
    assert g.x[1, 0] == 2.0 and g.x[2, 1] == 5.0
    assert g.x_mask.tolist() == [[0, 0], [1, 0], [0, 1]]


def test_discretize_rejects_negative_time():
    with pytest.raises(IngestError):
        discretize(_raw([("p", -1.0, "obs", "hr", 2.0)]), 12.0, 10.0, ["hr"], [])


def _ffill_reference(x, m):
    out = np.zeros_like(x)
    for k in range(x.shape[1]):
        cur = 0.0
        for t in range(x.shape[0]):
            if m[t, k] == 1:
                cur = x[t, k]
            out[t, k] = cur
    return out


def _grid(x, m, u=None, um=None, times=None):
    u = np.zeros((len(x), 0)) if u is None else u
    um = np.zeros_like(u) if um is None else um
    return Grid(x, m, u, um, times or [], 12.0)


def test_locf_examples_and_reference():
    x = np.zeros((4, 1))
    x[0, 0] = 3.0
    m = np.zeros((4, 1))
    m[0, 0] = 1
    assert impute_observations(_grid(x, m)).x[:, 0].tolist() == [3.0] * 4
    full = np.arange(8.0).reshape(4, 2)
    assert np.array_equal(impute_observations(_grid(full, np.ones((4, 2)))).x, full)
    rng = np.random.default_rng(2)
    for _ in range(20):
        mask = (rng.uniform(size=(10, 3)) < 0.3).astype(float)
        vals = rng.standard_normal((10, 3)) * mask
        np.testing.assert_array_equal(impute_observations(_grid(vals, mask)).x, _ffill_reference(vals, mask))


def _iv_grid(times, values, T, step=12.0):
    u = np.zeros((T, 1))
    um = np.zeros((T, 1))
    for t, v in sorted(zip(times, values)):
        s = int(t // step)
        u[s, 0] = v
        um[s, 0] = 1
    return Grid(np.zeros((T, 0)), np.zeros((T, 0)), u, um, [np.asarray(sorted(times))], step)


def test_intervention_continuation_within_threshold():
    # Doses at 5h (bin 1) and 25h (bin 3), 20h apart: bin 2 carries the first dose.
    g = impute_interventions(_iv_grid([5.0, 25.0], [2.0, 3.0], 4), {"d": 24.0}, ["d"])
    assert g.u[:, 0].tolist() == [2.0, 2.0, 3.0, 0.0]


def test_intervention_six_hours_apart_has_no_gap_to_fill():
    g = impute_interventions(_iv_grid([5.0, 11.0], [2.0, 3.0], 3), {"d": 24.0}, ["d"])
    assert g.u[:, 0].tolist() == [3.0, 0.0, 0.0]
    g = impute_interventions(_iv_grid([10.0, 16.0], [2.0, 3.0], 3), {"d": 24.0}, ["d"])
    assert g.u[:, 0].tolist() == [2.0, 3.0, 0.0]


def test_intervention_beyond_threshold_is_no_action():
    g = impute_interventions(_iv_grid([1.0, 73.0], [2.0, 3.0], 8), {"d": 24.0}, ["d"])
    assert g.u[:, 0].tolist() == [2.0, 0, 0, 0, 0, 0, 3.0, 0]


def _interval_scan(times, values, T, limit, step=12.0):
    """Reference: each bin looks back to the latest administration before it."""
    out = np.zeros(T)
    order = np.argsort(times, kind="stable")
    times, values = np.asarray(times)[order], np.asarray(values)[order]
    recorded = {}
    for t, v in zip(times, values):
        recorded[int(t // step)] = v
    for s in range(T):
        if s in recorded:
            out[s] = recorded[s]
            continue
        before = [k for k in range(len(times)) if int(times[k] // step) < s]
        after = [k for k in range(len(times)) if int(times[k] // step) > s]
        if before and after:
            a, b = before[-1], after[0]
            if times[b] - times[a] <= limit:
                out[s] = recorded[int(times[a] // step)]
    return out


def test_intervention_random_against_interval_scan():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        times = np.sort(rng.choice(np.arange(0, 120, 3.0), n, replace=False))
        values = rng.uniform(1, 5, n)
        T = 11
        g = impute_interventions(_iv_grid(times, values, T), {"d": 30.0}, ["d"])
        np.testing.assert_array_equal(g.u[:, 0], _interval_scan(times, values, T, 30.0))


def test_imputation_is_idempotent():
    rng = np.random.default_rng(4)
    mask = (rng.uniform(size=(6, 2)) < 0.4).astype(float)
    g = impute_observations(_grid(rng.standard_normal((6, 2)) * mask, mask))
    assert np.array_equal(impute_observations(g).x, g.x)
    iv = impute_interventions(_iv_grid([5.0, 25.0], [2.0, 3.0], 4), {"d": 24.0}, ["d"])
    assert np.array_equal(impute_interventions(iv, {"d": 24.0}, ["d"]).u, iv.u)


# ---------------------------------------------------------------------------
# end to end


def _write_inputs(tmp_path, n=40):
    rng = np.random.default_rng(5)
    raw_rows, ev_rows = [], []
    for i in range(n):
        pid = f"pt{i:03d}"
        for h in np.sort(rng.uniform(0, 60, 6)):
            raw_rows.append((pid, round(h, 2), "obs", "HR", round(rng.normal(80, 10), 1)))
        for h in (2.0, 20.0, 44.0):
            raw_rows.append((pid, h, "intervention", "drug_mg", float(rng.integers(400, 600))))
        ev_rows.append((pid, "a", 60.0, 1))
        ev_rows.append((pid, "b", float(rng.integers(1, 60)), 0))
    _raw(raw_rows).to_csv(tmp_path / "raw.csv", index=False)
    pd.DataFrame(ev_rows, columns=["patient_id", "event", "time_hours", "censored"]).to_csv(
        tmp_path / "events.csv", index=False)
    pd.DataFrame({"source_code": ["HR", "drug_mg"], "canonical_name": ["hr", "drug"],
                  "unit_scale": [1.0, 0.001]}).to_csv(tmp_path / "map.csv", index=False)


def test_preprocess_end_to_end(tmp_path):
    _write_inputs(tmp_path)
    raw, ev = read_raw(tmp_path / "raw.csv"), read_events(tmp_path / "events.csv")
    mapping = read_harmonization_map(tmp_path / "map.csv")
    trajs, stats = preprocess(raw, ev, mapping, 12.0)
    assert len(trajs) == 40
    tr = trajs[0]
    assert tr.T == 6 and tr.x.shape == (6, 1) and tr.u.shape == (6, 1)
    assert tr.events["a"] == EventRecord(6, 1)
    assert stats.gap90["drug"] == pytest.approx(24.0)
    # Doses at 2h, 20h, 44h land in bins 1, 2, 4; bin 3 continues the 20h dose.
    np.testing.assert_array_equal(tr.mask.sum(), raw[(raw.patient_id == "pt000") & (raw.channel_kind == "obs")]
                                  .assign(b=lambda d: (d.time_hours // 12)).b.nunique())
    u, drug = tr.u[:, 0], stats.channels["drug"]
    doses = raw[(raw.patient_id == "pt000") & (raw.channel_kind == "intervention")]["value"].to_numpy()
    expected = (doses * 0.001 - drug["mean"]) / drug["std"]
    np.testing.assert_allclose(u[[0, 1, 3]], expected, rtol=0, atol=1e-12)
    assert u[2] == u[1] and u[4] == u[5] == 0.0
    again, _ = preprocess(raw, ev, mapping, 12.0, stats)
    assert all(np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u) for a, b in zip(trajs, again))


def test_build_requires_every_event(tmp_path):
    _write_inputs(tmp_path, n=12)
    raw, ev = read_raw(tmp_path / "raw.csv"), read_events(tmp_path / "events.csv")
    ev = ev[~((ev.patient_id == "pt003") & (ev.event == "b"))]
    stats = compute_stats(raw)
    with pytest.raises(IngestError):
        build_trajectories(zscore(raw, stats), ev, stats, 12.0)


def test_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("patient_id,time_hours\np,1\n")
    with pytest.raises(IngestError):
        read_raw(tmp_path / "bad.csv")


# ---------------------------------------------------------------------------
# records, batches and splits


def test_cohort_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    trajs = [random_trajectory(rng, f"p{i}", int(rng.integers(1, 6)), 3, 2, ("a", "b")) for i in range(5)]
    write_cohort(tmp_path / "c.jsonl", trajs)
    back = read_cohort(tmp_path / "c.jsonl")
    for a, b in zip(trajs, back):
        assert a.patient_id == b.patient_id and a.events == b.events
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u) and np.array_equal(a.mask, b.mask)


def test_make_batch_pads_time_major():
    t1 = Trajectory("a", np.ones((3, 2)), np.ones((3, 1)), np.ones((3, 2)), {"e": EventRecord(2, 0)})
    t2 = Trajectory("b", 2 * np.ones((1, 2)), np.ones((1, 1)), np.ones((1, 2)), {"e": EventRecord(1, 1)})
    b = make_batch([t1, t2], ("e",))
    assert b.x.shape == (3, 2, 2)
    assert b.valid[:, 1].tolist() == [1, 0, 0]
    assert b.event_t.tolist() == [[2], [1]] and b.event_c.tolist() == [[0], [1]]
    with pytest.raises(IngestError):
        make_batch([t1], ("missing",))


def test_event_beyond_record_is_rejected():
    with pytest.raises(IngestError):
        Trajectory("a", np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)), {"e": EventRecord(3, 0)})
    with pytest.raises(IngestError):
        EventRecord(0, 0)


def test_hash_split_is_stable_and_balanced():
    ids = [f"patient-{i}" for i in range(5000)]
    splits = [split_of(p) for p in ids]
    assert splits == [split_of(p) for p in ids]
    frac = {s: splits.count(s) / len(ids) for s in ("train", "eval", "test")}
    assert abs(frac["train"] - 0.8) < 0.03 and abs(frac["eval"] - 0.1) < 0.02 and abs(frac["test"] - 0.1) < 0.02
