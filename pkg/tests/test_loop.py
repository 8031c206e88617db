from __future__ import annotations

import json
from collections import Counter

import pytest

from shotsynth.backends import Backend, BackendConfig, DecodingParams, TransportError, make_backend
from shotsynth.datagen import GenParams, generate_dataset
from shotsynth.expr import NON_STANDARD, STANDARD, evaluate_reference
from shotsynth.loop import (
    ResponseCache,
    RunReport,
    SampleError,
    ShotSelectionState,
    evaluate_dataset,
    format_cell,
    mean_std,
    random_shots,
    read_shots,
    regime_label,
    select_shots,
    write_shots,
)
from shotsynth.prompt import Shot

from .conftest import divergent_records

ORACLE = BackendConfig(kind="oracle")
BIAS = BackendConfig(kind="standard_bias")


def dataset(n=40, depth=2, prob=20, seed=0):
    return generate_dataset(GenParams(depth=depth, prob=prob, seed=seed, count=n))


class FailingAfter(Backend):
    """Standard-bias answers for ``limit`` calls, then a transport error."""

    def __init__(self, limit: int) -> None:
        super().__init__(BackendConfig(kind="standard_bias"))
        self.inner = make_backend(BackendConfig(kind="standard_bias"))
        self.limit = limit

    def _complete(self, bundle, params, run):
        if self.calls > self.limit:
            raise TransportError("down")
        return self.inner.complete(bundle, params, run)


# ---------------------------------------------------------------- phase 1


def test_oracle_selects_nothing():
    state = select_shots(dataset(), ORACLE, cap=10)
    assert state.shots == [] and state.cursor == 40
    assert all(ok for _, ok in state.log)
    assert state.shortfall


def test_bias_on_divergent_data_takes_first_records():
    records = divergent_records(20)
    state = select_shots(records, BIAS, cap=3)
    assert [s.expression for s in state.shots] == [r.expression for r in records[:3]]
    assert [s.trace for s in state.shots] == [r.trace for r in records[:3]]
    assert state.cursor == 3 and not state.shortfall


def test_cap_zero_makes_no_calls():
    backend = make_backend(BIAS)
    state = select_shots(dataset(), backend, cap=0)
    assert state.shots == [] and backend.calls == 0


def test_shots_are_failures_in_order():
    records = dataset(80, depth=1, prob=6, seed=3)
    state = select_shots(records, BIAS, cap=5)
    failed = [rid for rid, ok in state.log if not ok]
    assert [s.source_id for s in state.shots] == failed
    for s in state.shots:
        r = records[s.source_id]
        assert evaluate_reference(r.expr, STANDARD) != evaluate_reference(r.expr, NON_STANDARD)
    assert len(state.shots) <= 5


def test_selection_resumes_after_failure(tmp_path):
    records = divergent_records(20)
    path = tmp_path / "state.json"
    with pytest.raises(TransportError):
        select_shots(records, FailingAfter(5), cap=10, state_path=path)
    saved = ShotSelectionState.load(path)
    assert saved.cursor == 5 and len(saved.shots) == 5

    backend = make_backend(BIAS)
    state = select_shots(records, backend, cap=10, state_path=path)
    assert backend.calls == 5
    assert [s.expression for s in state.shots] == [r.expression for r in records[:10]]
    assert state == select_shots(records, BIAS, cap=10)


def test_resume_rejects_other_selection(tmp_path):
    path = tmp_path / "state.json"
    select_shots(dataset(), BIAS, cap=2, state_path=path)
    with pytest.raises(ValueError):
        select_shots(dataset(), BIAS, cap=3, state_path=path)


def test_state_json_round_trip():
    state = select_shots(divergent_records(5), BIAS, cap=2, dataset_id="d")
    assert ShotSelectionState.from_json(json.loads(json.dumps(state.to_json()))) == state


def test_random_shots_deterministic_and_distinct():
    records = dataset(50)
    a = random_shots(records, 10, seed=1)
    assert a == random_shots(records, 10, seed=1)
    assert a != random_shots(records, 10, seed=2)
    assert len({s.source_id for s in a}) == 10
    assert random_shots(records, 0, seed=1) == []
    with pytest.raises(SampleError):
        random_shots(records, 51, seed=1)


def test_random_shots_uniform():
    records = dataset(10)
    counts = Counter(random_shots(records, 1, seed=s)[0].source_id for s in range(100_000))
    assert set(counts) == set(range(10))
    assert all(abs(c / 100_000 - 0.1) < 0.02 for c in counts.values())


def test_shot_file_round_trip(tmp_path):
    shots = random_shots(dataset(10), 4, seed=0, dataset_id="x")
    assert read_shots(write_shots(tmp_path / "s.jsonl", shots)) == shots


# ---------------------------------------------------------------- phase 2


def test_oracle_evaluation_is_perfect():
    report = evaluate_dataset(dataset(), [], ORACLE, runs=3)
    assert report.per_run_accuracy == [1.0, 1.0, 1.0]
    assert report.cell == "1.000 ± 0.000"
    assert report.failure_histogram["none"] == 120
    assert report.step_match_rate == 1.0
    assert report.regime == "0-shot"


def test_bias_accuracy_equals_agreement_fraction():
    records = dataset(200, seed=5)
    agree = sum(evaluate_reference(r.expr, STANDARD) == evaluate_reference(r.expr, NON_STANDARD) for r in records)
    report = evaluate_dataset(records, [], BIAS, runs=3)
    assert report.mean == agree / 200
    assert report.std == 0.0
    assert report.failure_histogram["wrong_value"] == 3 * (200 - agree)


def test_cached_evaluation_makes_no_calls(tmp_path):
    records = dataset(30)
    cfg = BackendConfig(kind="flaky_oracle", flake_prob=0.3, seed=2)
    first = evaluate_dataset(records, [], make_backend(cfg), cache=ResponseCache(tmp_path / "c.jsonl"))
    backend = make_backend(cfg)
    again = evaluate_dataset(records, [], backend, cache=ResponseCache(tmp_path / "c.jsonl"))
    assert backend.calls == 0
    assert again == first and again.rows == first.rows


def test_cache_skips_torn_line(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = ResponseCache(path)
    cache.put("k", "v")
    with path.open("a") as fh:
        fh.write('{"key": "half')
    assert ResponseCache(path).get("k") == "v"


def test_parallel_equals_sequential():
    records = dataset(60)
    cfg = BackendConfig(kind="flaky_oracle", flake_prob=0.4, seed=8)
    a = evaluate_dataset(records, [], cfg, runs=3, parallelism=1)
    b = evaluate_dataset(records, [], cfg, runs=3, parallelism=8)
    assert a == b and a.rows == b.rows
    assert len(set(a.per_run_accuracy)) > 1


def test_shots_are_not_mutated():
    shots = random_shots(dataset(20, seed=1), 5, seed=0)
    before = list(shots)
    report = evaluate_dataset(dataset(10), shots, ORACLE, runs=1)
    assert shots == before
    assert report.n_shots == 5
    assert len(report.shot_provenance) == 5


def test_report_round_trip_and_schema(tmp_path):
    report = evaluate_dataset(dataset(10), [], BIAS, runs=2, dataset_id="d", shortfall=True)
    loaded = RunReport.load(report.save(tmp_path / "r.json"))
    assert loaded == report and loaded.shortfall
    bad = report.to_json() | {"schema": 99}
    with pytest.raises(ValueError):
        RunReport.from_json(bad)


def test_fingerprint_tracks_recipe():
    records = dataset(10)
    base = evaluate_dataset(records, [], ORACLE, runs=1)
    assert base.fingerprint == evaluate_dataset(records, [], ORACLE, runs=1).fingerprint
    assert base.fingerprint != evaluate_dataset(records, [], ORACLE, "PV2", runs=1).fingerprint
    assert base.fingerprint != evaluate_dataset(records, [], ORACLE, params=DecodingParams(max_tokens=9), runs=1).fingerprint
    shot = [Shot.from_record(records[0])]
    assert base.fingerprint != evaluate_dataset(records, shot, ORACLE, runs=1).fingerprint


def test_statistics_and_cells():
    # hand: mean 1.44/3 = 0.48; deviations .00,.01,-.01; var .0002/3; sd .008165
    mean, std = mean_std([0.48, 0.49, 0.47])
    assert format_cell(mean, std) == "0.480 ± 0.008"
    assert mean_std([0.5]) == (0.5, 0.0)
    assert regime_label("is", 10) == "10-shot IS"
    assert regime_label("ise", 10) == "10-shot ISe"
    assert regime_label("random", 10) == "10-shot"
    assert regime_label("random", 0) == "0-shot"


def test_argument_validation():
    with pytest.raises(ValueError):
        evaluate_dataset(dataset(5), [], ORACLE, runs=0)
    with pytest.raises(ValueError):
        select_shots(dataset(5), ORACLE, cap=-1)
