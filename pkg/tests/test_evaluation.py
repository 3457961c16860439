import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phasesep import INSTRUMENTS
from phasesep.audio_io import AudioClip
from phasesep.dataset import SynthSpec, generate_synthetic_song
from phasesep.evaluation import (SDR_CAP, SilentReferenceError, aggregate, compare, evaluate_song,
                                 sdr, write_comparison_csv, write_scores_csv, write_summary_json)


def test_sdr_examples(rng):
    s = rng.standard_normal((2, 1000))
    assert sdr(s, s) == SDR_CAP
    assert sdr(s, np.zeros_like(s)) == pytest.approx(0.0, abs=1e-12)
    assert sdr(s, 0.9 * s) == pytest.approx(20.0, abs=1e-9)     # error energy is 1% of signal
    assert sdr(s, 1.1 * s) == pytest.approx(20.0, abs=1e-9)


def test_sdr_channel_average_and_permutation(rng):
    s = rng.standard_normal((2, 500))
    e = s.copy()
    e[0] *= 0.9
    e[1] *= 0.99
    expected = (20.0 + 40.0) / 2
    assert sdr(s, e) == pytest.approx(expected, abs=1e-9)
    assert sdr(s[::-1], e[::-1]) == pytest.approx(expected, abs=1e-9)


def test_sdr_silent_and_shape_errors(rng):
    with pytest.raises(SilentReferenceError):
        sdr(np.zeros((1, 10)), rng.standard_normal((1, 10)))
    s = rng.standard_normal((2, 10))
    s[1] = 0
    assert sdr(s, 0.9 * s) == pytest.approx(20.0)               # silent channel skipped
    with pytest.raises(ValueError):
        sdr(s, s[:, :5])


def test_sdr_segments(rng):
    s = rng.standard_normal((1, 800))
    e = s.copy()
    e[:, :400] *= 0.9
    e[:, 400:] *= 0.99
    clip = AudioClip(s, 8000)
    assert sdr(clip, e, segment=0.05) == pytest.approx(30.0, abs=1e-9)
    with pytest.raises(ValueError):
        sdr(s, e, segment=0.05)


def test_mixture_over_j_oracle():
    song = generate_synthetic_song(SynthSpec(duration=0.5), seed=2)
    J = len(INSTRUMENTS)
    est = {j: AudioClip(song.mixture.samples / J, 8000) for j in INSTRUMENTS}
    scores, info = evaluate_song(song, est)
    for j in INSTRUMENTS:
        s = song.sources[j].samples
        d = s - song.mixture.samples / J
        expected = np.mean([10 * np.log10(np.sum(s[c] ** 2) / np.sum(d[c] ** 2)) for c in range(2)])
        assert scores[j] == pytest.approx(expected, abs=1e-10)
    assert info["skipped"] == [] and set(info["trim"].values()) == {0}


def test_evaluate_song_skips_silent_and_trims(rng):
    refs = {"bass": AudioClip(rng.standard_normal((1, 100)), 8000),
            "drums": AudioClip(np.zeros((1, 100)), 8000)}
    est = {"bass": AudioClip(refs["bass"].samples[:, :90], 8000),
           "drums": AudioClip(rng.standard_normal((1, 100)), 8000)}
    scores, info = evaluate_song(refs, est)
    assert list(scores) == ["bass"] and scores["bass"] == SDR_CAP
    assert info["skipped"] == ["drums"] and info["trim"]["bass"] == 10
    with pytest.raises(KeyError):
        evaluate_song(refs, {"bass": est["bass"]})


def test_aggregate_medians():
    r = aggregate({"a": {"x": 1.0}, "b": {"x": 2.0}, "c": {"x": 100.0}})
    assert r.medians == {"x": 2.0}
    r = aggregate({k: {"x": v} for k, v in zip("abcd", [1.0, 2.0, 3.0, 4.0])})
    assert r.medians == {"x": 2.5}
    assert r.overall == 2.5
    with pytest.raises(ValueError):
        aggregate({})


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=9), st.randoms())
def test_aggregate_order_invariant(values, rnd):
    per = {f"s{i}": {"x": v, "y": -v} for i, v in enumerate(values)}
    keys = list(per)
    rnd.shuffle(keys)
    a, b = aggregate(per), aggregate({k: per[k] for k in keys})
    assert a.medians == b.medians and a.overall == b.overall


def _report(medians, songs=("s1",)):
    return aggregate({s: dict(medians) for s in songs})


def test_compare_examples():
    c = compare(_report({"vocals": 3.24, "bass": 4.68}), _report({"vocals": 3.44, "bass": 4.71}))
    assert c.delta_db["vocals"] == pytest.approx(0.20)
    assert c.relative_pct["vocals"] == pytest.approx(6.17, abs=0.005)
    assert c.relative_pct["bass"] == pytest.approx(0.64, abs=0.005)
    same = compare(_report({"x": 5.0}), _report({"x": 5.0}))
    assert same.delta_db == {"x": 0.0} and same.relative_pct == {"x": 0.0}
    neg = compare(_report({"x": -2.0}), _report({"x": -1.0}))
    assert neg.relative_pct["x"] == pytest.approx(50.0)


def test_compare_mismatch():
    with pytest.raises(ValueError):
        compare(_report({"x": 1.0}), _report({"x": 1.0}, songs=("s2",)))
    with pytest.raises(ValueError):
        compare(_report({"x": 1.0}), _report({"y": 1.0}))


def test_output_schemas(tmp_path):
    base = aggregate({"s1": {"bass": 3.24}, "s2": {"bass": 3.5}}, {"architecture": "amp_only"})
    cand = aggregate({"s1": {"bass": 3.44}, "s2": {"bass": 3.6}})
    write_scores_csv(tmp_path / "s.csv", base, {"config_hash": "abc"})
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    rows = list(csv.DictReader(lines[1:]))
    assert [r["song"] for r in rows] == ["s1", "s2"] and float(rows[0]["sdr_db"]) == 3.24
    write_summary_json(tmp_path / "s.json", base)
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["medians"] == {"bass": pytest.approx(3.37)} and doc["n_songs"] == 2
    assert doc["metadata"]["architecture"] == "amp_only" and "BSS Eval" in doc["metadata"]["sdr_definition"]
    write_comparison_csv(tmp_path / "c.csv", compare(base, cand), ("amp_only", "joint"))
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert list(rows[0]) == ["instrument", "amp_only", "joint", "delta_db", "relative_improvement_pct"]
    assert float(rows[0]["delta_db"]) == pytest.approx(0.15)
