"""Shot synthesis (phase 1) and fixed-shot evaluation (phase 2)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .analyzer import EXTRACTOR_VERSION, FailureMode, GradedAnswer, grade, steps_match
from .backends import Backend, BackendConfig, DecodingParams, as_backend
from .datagen import DatasetRecord
from .prompt import (
    SYSTEM_PROMPT_VERSION,
    PromptBundle,
    PromptVariant,
    Shot,
    build_prompt,
    system_prompt_sha256,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1


class SampleError(ValueError):
    pass


def _canonical(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_json(obj: object) -> str:
    return hashlib.sha256(_canonical(obj).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Response cache


class ResponseCache:
    """Append-only JSON-Lines store of raw responses.

    Safe to share between worker threads; appends are serialized and flushed
    line by line so an interrupted run keeps everything it already paid for.
    """

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError:
                        # torn final line from an interrupted append
                        log.warning("skipping corrupt cache line in %s", self.path)
                        continue
                    self._data[row["key"]] = row["response"]

    @staticmethod
    def key(backend_id: str, params: DecodingParams, bundle: PromptBundle, run: int) -> str:
        return sha256_json([backend_id, params.to_json(), bundle.system, bundle.user, run])

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "response": response}, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._data)


def query(
    backend: Backend,
    bundle: PromptBundle,
    params: DecodingParams,
    cache: Optional[ResponseCache] = None,
    run: int = 0,
) -> str:
    if cache is None:
        return backend.complete(bundle, params, run)
    key = ResponseCache.key(backend.backend_id, params, bundle, run)
    hit = cache.get(key)
    if hit is not None:
        return hit
    text = backend.complete(bundle, params, run)
    cache.put(key, text)
    return text


# --------------------------------------------------------------------------
# Phase 1


@dataclass
class ShotSelectionState:
    cap: int
    dataset_id: str = ""
    variant: str = PromptVariant.PV1.value
    cot: bool = False
    cursor: int = 0
    shots: list[Shot] = field(default_factory=list)
    log: list[tuple[int, bool]] = field(default_factory=list)
    dataset_size: Optional[int] = None

    @property
    def shortfall(self) -> bool:
        """Selection data ran out before ``cap`` failures were collected."""
        return len(self.shots) < self.cap

    def to_json(self) -> dict:
        return {
            "cap": self.cap,
            "dataset_id": self.dataset_id,
            "variant": self.variant,
            "cot": self.cot,
            "cursor": self.cursor,
            "dataset_size": self.dataset_size,
            "shots": [s.to_json() for s in self.shots],
            "log": [[rid, ok] for rid, ok in self.log],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ShotSelectionState":
        return cls(
            cap=data["cap"],
            dataset_id=data["dataset_id"],
            variant=data["variant"],
            cot=data["cot"],
            cursor=data["cursor"],
            shots=[Shot.from_json(s) for s in data["shots"]],
            log=[(int(rid), bool(ok)) for rid, ok in data["log"]],
            dataset_size=data.get("dataset_size"),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ShotSelectionState":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def select_shots(
    selection_dataset: Sequence[DatasetRecord],
    backend: "Backend | BackendConfig",
    variant: PromptVariant | str = PromptVariant.PV1,
    cot: bool = False,
    cap: int = 10,
    *,
    params: Optional[DecodingParams] = None,
    cache: Optional[ResponseCache] = None,
    dataset_id: str = "",
    state_path: Optional[str | Path] = None,
) -> ShotSelectionState:
    """Walk the selection data in order, keeping each failure as a new shot.

    Every query sees the shots gathered so far, so this is strictly
    sequential.  With ``state_path`` the state is written after each record
    and an existing state file is resumed from its cursor.
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    variant = PromptVariant.parse(variant)
    params = params or DecodingParams()
    backend = as_backend(backend)

    state: Optional[ShotSelectionState] = None
    if state_path is not None and Path(state_path).exists():
        state = ShotSelectionState.load(state_path)
        expected = (cap, dataset_id, variant.value, cot)
        found = (state.cap, state.dataset_id, state.variant, state.cot)
        if found != expected:
            raise ValueError(f"state file {state_path} belongs to a different selection: {found}")
        log.info("resuming selection at cursor %d with %d shots", state.cursor, len(state.shots))
    if state is None:
        state = ShotSelectionState(cap, dataset_id, variant.value, cot, dataset_size=len(selection_dataset))

    while len(state.shots) < cap and state.cursor < len(selection_dataset):
        record = selection_dataset[state.cursor]
        bundle = build_prompt(record.expression, state.shots, variant, cot)
        try:
            text = query(backend, bundle, params, cache)
        except Exception:
            if state_path is not None:
                state.save(state_path)
            raise
        graded = grade(text, record)
        state.log.append((record.id, graded.correct))
        if not graded.correct:
            state.shots.append(Shot.from_record(record, dataset_id or None))
        state.cursor += 1
        if state_path is not None:
            state.save(state_path)
    if state_path is not None:
        state.save(state_path)
    if state.shortfall:
        log.warning("selection exhausted with %d of %d shots", len(state.shots), cap)
    return state


def random_shots(
    selection_dataset: Sequence[DatasetRecord],
    n: int,
    seed: int,
    dataset_id: Optional[str] = None,
) -> list[Shot]:
    """``n`` records drawn uniformly without replacement, in draw order."""
    if n < 0:
        raise SampleError("n must be >= 0")
    if n > len(selection_dataset):
        raise SampleError(f"cannot draw {n} shots from {len(selection_dataset)} records")
    rng = SplitMix64(seed)
    order = list(range(len(selection_dataset)))
    for i in range(n):
        j = i + rng.below(len(order) - i)
        order[i], order[j] = order[j], order[i]
    return [Shot.from_record(selection_dataset[i], dataset_id) for i in order[:n]]


def write_shots(path: str | Path, shots: Sequence[Shot]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(s.to_json()) + "\n" for s in shots), encoding="utf-8")
    return path


def read_shots(path: str | Path) -> list[Shot]:
    text = Path(path).read_text(encoding="utf-8")
    return [Shot.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


# --------------------------------------------------------------------------
# Phase 2


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation, both correctly rounded."""
    if not values:
        return math.nan, math.nan
    return statistics.mean(values), statistics.pstdev(values)


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


@dataclass
class RunReport:
    dataset_id: str
    regime: str
    variant: str
    cot: bool
    backend_id: str
    n_shots: int
    per_run_accuracy: list[float]
    mean: float
    std: float
    n_items: int
    failure_histogram: dict[str, int]
    step_match_rate: float
    fingerprint: str
    config: dict = field(default_factory=dict)
    shot_provenance: list[dict] = field(default_factory=list)
    shortfall: bool = False
    rows: list[dict] = field(default_factory=list, repr=False, compare=False)

    @property
    def cell(self) -> str:
        return format_cell(self.mean, self.std)

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "dataset_id": self.dataset_id,
            "regime": self.regime,
            "variant": self.variant,
            "cot": self.cot,
            "backend_id": self.backend_id,
            "n_shots": self.n_shots,
            "per_run_accuracy": self.per_run_accuracy,
            "mean": self.mean,
            "std": self.std,
            "n_items": self.n_items,
            "failure_histogram": self.failure_histogram,
            "step_match_rate": self.step_match_rate,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "shot_provenance": self.shot_provenance,
            "shortfall": self.shortfall,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunReport":
        schema = data.get("schema")
        if schema != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {schema!r}")
        body = {k: v for k, v in data.items() if k != "schema"}
        return cls(**body)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def regime_label(kind: str, n_shots: int) -> str:
    if kind == "zero" or n_shots == 0:
        return "0-shot"
    suffix = {"random": "", "is": " IS", "ise": " ISe"}.get(kind, f" {kind}")
    return f"{n_shots}-shot{suffix}"


def dataset_digest(records: Sequence[DatasetRecord]) -> str:
    return sha256_json([[r.id, r.expression, r.final] for r in records])


def evaluate_dataset(
    test_dataset: Sequence[DatasetRecord],
    shots: Sequence[Shot],
    backend: "Backend | BackendConfig",
    variant: PromptVariant | str = PromptVariant.PV1,
    cot: bool = False,
    runs: int = 3,
    parallelism: int = 1,
    *,
    params: Optional[DecodingParams] = None,
    cache: Optional[ResponseCache] = None,
    dataset_id: str = "",
    regime: str = "",
    seed: int = 0,
    shortfall: bool = False,
    extra_config: Optional[dict] = None,
) -> RunReport:
    """Grade every record ``runs`` times with one frozen prompt recipe."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    variant = PromptVariant.parse(variant)
    params = params or DecodingParams()
    backend = as_backend(backend)
    frozen = tuple(shots)
    bundles = [build_prompt(r.expression, frozen, variant, cot) for r in test_dataset]

    def task(item: tuple[int, int]) -> tuple[GradedAnswer, bool]:
        run, idx = item
        text = query(backend, bundles[idx], params, cache, run)
        record = test_dataset[idx]
        return grade(text, record), steps_match(text, record.trace)

    items = [(run, idx) for run in range(runs) for idx in range(len(test_dataset))]
    if parallelism == 1:
        results = [task(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(task, items))

    per_run: list[float] = []
    histogram = {m.value: 0 for m in FailureMode}
    matched = 0
    rows: list[dict] = []
    n = len(test_dataset)
    for run in range(runs):
        correct = 0
        for idx in range(n):
            graded, ok_steps = results[run * n + idx]
            correct += graded.correct
            matched += ok_steps
            histogram[graded.failure_mode.value] += 1
            rows.append(
                {
                    "run": run,
                    "record_id": test_dataset[idx].id,
                    "prompt_hash": bundles[idx].digest(),
                    "backend_id": backend.backend_id,
                    **graded.to_json(),
                    "steps_match": ok_steps,
                }
            )
        per_run.append(correct / n if n else math.nan)
    mean, std = mean_std(per_run)

    config = {
        "backend": _backend_echo(backend),
        "decoding": params.to_json(),
        "variant": variant.value,
        "cot": cot,
        "system_prompt_version": SYSTEM_PROMPT_VERSION,
        "system_prompt_sha256": system_prompt_sha256(),
        "extractor_version": EXTRACTOR_VERSION,
        "dataset_id": dataset_id,
        "dataset_sha256": dataset_digest(test_dataset),
        "runs": runs,
        "seed": seed,
        "shots": [s.to_json() for s in frozen],
    }
    if extra_config:
        config["experiment"] = extra_config
    fingerprint = sha256_json({k: v for k, v in config.items() if k != "experiment"})
    return RunReport(
        dataset_id=dataset_id,
        regime=regime or regime_label("zero" if not frozen else "random", len(frozen)),
        variant=variant.value,
        cot=cot,
        backend_id=backend.backend_id,
        n_shots=len(frozen),
        per_run_accuracy=per_run,
        mean=mean,
        std=std,
        n_items=n,
        failure_histogram=histogram,
        step_match_rate=matched / (n * runs) if n else math.nan,
        fingerprint=fingerprint,
        config=config,
        shot_provenance=[
            {"source_dataset": s.source_dataset, "source_id": s.source_id} for s in frozen
        ],
        shortfall=shortfall,
        rows=rows,
    )


def _backend_echo(backend: Backend) -> dict:
    echo = backend.config.to_json()
    # where the audit log goes does not affect results
    echo.pop("audit_log", None)
    return echo
