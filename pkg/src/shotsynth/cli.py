"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error (including
a locked experiment directory), 4 transport failure (network, rate limit,
malformed response), 5 authentication failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

from . import __version__
from .backends import AuthError, BackendConfig, BackendError, DecodingParams, make_backend
from .datagen import (
    PRESETS,
    DatasetRecord,
    GenParams,
    generate_dataset,
    parse_preset_name,
    read_dataset,
    summarize,
    write_dataset,
)
from .expr import POLICIES, ExprSyntaxError, evaluate, parse, render
from .loop import (
    ResponseCache,
    RunReport,
    SampleError,
    ShotSelectionState,
    evaluate_dataset,
    random_shots,
    read_shots,
    regime_label,
    select_shots,
    write_shots,
)
from .prompt import PromptVariant, Shot, render_steps
from .report import SchemaMismatchError, render_csv, render_report

log = logging.getLogger("shotsynth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRANSPORT = 4
EXIT_AUTH = 5

REGIME_KINDS = ("zero", "random", "is", "ise")


class ConfigError(ValueError):
    pass


@dataclass
class RegimeConfig:
    kind: str = "zero"
    # shots for ``random``, selection cap for ``is``/``ise``
    n: int = 10
    seed: int = 0
    # dataset path or preset; "test" selects on the test set itself
    selection: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in REGIME_KINDS:
            raise ConfigError(f"regime kind must be one of {REGIME_KINDS}")
        if self.n < 0:
            raise ConfigError("regime n must be >= 0")


@dataclass
class ExperimentConfig:
    datasets: list[str] = field(default_factory=lambda: ["db(2,20)"])
    dataset_seed: int = 0
    backend: BackendConfig = field(default_factory=BackendConfig)
    decoding: DecodingParams = field(default_factory=DecodingParams)
    variant: str = "PV1"
    cot: bool = False
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    runs: int = 3
    parallelism: int = 1
    output_dir: str = "runs"
    shots_sweep: Optional[list[int]] = None

    def to_json(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "dataset_seed": self.dataset_seed,
            "backend": self.backend.to_json(),
            "decoding": self.decoding.to_json(),
            "variant": self.variant,
            "cot": self.cot,
            "regime": {f.name: getattr(self.regime, f.name) for f in fields(self.regime)},
            "runs": self.runs,
            "parallelism": self.parallelism,
            "output_dir": self.output_dir,
            "shots_sweep": self.shots_sweep,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "backend" in data:
            data["backend"] = BackendConfig.from_json(data["backend"])
        if "decoding" in data:
            data["decoding"] = DecodingParams.from_json(data["decoding"])
        if "regime" in data:
            data["regime"] = RegimeConfig(**data["regime"])
        return cls(**data)


# --------------------------------------------------------------------------
# Config assembly


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        try:
            cfg = ExperimentConfig.from_json(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    backend_over = {
        "kind": args.backend,
        "endpoint": args.endpoint,
        "model_name": args.model,
        "api_key_env": args.api_key_env,
        "seed": args.backend_seed,
        "flake_prob": args.flake_prob,
        "max_retries": args.max_retries,
        "audit_log": args.audit_log,
    }
    backend_over = {k: v for k, v in backend_over.items() if v is not None}
    if backend_over:
        cfg.backend = replace(cfg.backend, **backend_over)
    decoding_over = {"temperature": args.temperature, "max_tokens": args.max_tokens}
    decoding_over = {k: v for k, v in decoding_over.items() if v is not None}
    if decoding_over:
        cfg.decoding = replace(cfg.decoding, **decoding_over)
    regime_over = {"kind": args.regime, "n": args.n, "seed": args.shot_seed, "selection": args.selection}
    regime_over = {k: v for k, v in regime_over.items() if v is not None}
    if regime_over:
        cfg.regime = RegimeConfig(**{**cfg.regime.__dict__, **regime_over})
    if args.dataset:
        cfg.datasets = list(args.dataset)
    for name in ("dataset_seed", "runs", "parallelism", "output_dir"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.variant is not None:
        cfg.variant = args.variant
    if args.cot is not None:
        cfg.cot = args.cot
    if args.shots is not None:
        cfg.shots_sweep = _parse_sweep(args.shots)
    PromptVariant.parse(cfg.variant)
    if cfg.runs < 1 or cfg.parallelism < 1:
        raise ConfigError("runs and parallelism must be >= 1")
    return cfg


def _parse_sweep(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--shots expects comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 0:
        raise ConfigError("--shots needs non-negative integers")
    return values


def resolve_dataset(spec: str, seed: int, out_dir: Path) -> tuple[str, list[DatasetRecord]]:
    path = Path(spec)
    if path.exists():
        return path.stem, read_dataset(path)
    preset = parse_preset_name(spec)
    if preset is None:
        raise ConfigError(f"dataset {spec!r} is neither a file nor a preset like db(2,20)")
    params = GenParams(depth=preset[0], prob=preset[1], seed=seed)
    records = generate_dataset(params)
    target = out_dir / "datasets" / params.filename
    if not target.exists():
        write_dataset(target, records)
    return params.dataset_id, records


def resolve_selection(
    cfg: ExperimentConfig, test_id: str, test: list[DatasetRecord], out_dir: Path
) -> tuple[str, list[DatasetRecord]]:
    """Selection data for a regime; defaults to a fresh seed of the matching distribution."""
    sel = cfg.regime.selection
    if sel == "test":
        return test_id, test
    if sel:
        return resolve_dataset(sel, cfg.dataset_seed + 1, out_dir)
    if cfg.regime.kind == "ise":
        return resolve_dataset("db(1,6)", cfg.dataset_seed + 1, out_dir)
    base = test[0].params
    params = replace(base, seed=(base.seed + 1) % 2**64)
    records = generate_dataset(params)
    target = out_dir / "datasets" / params.filename
    if not target.exists():
        write_dataset(target, records)
    return params.dataset_id, records


@contextmanager
def experiment_lock(out_dir: Path) -> Iterator[None]:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise OSError(f"{out_dir} is locked by another invocation (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _slug(cfg: ExperimentConfig, test_id: str, cap: int) -> str:
    cot = "_cot" if cfg.cot else ""
    return f"{test_id}__{cfg.regime.kind}{cap}_{PromptVariant.parse(cfg.variant).value}{cot}"


# --------------------------------------------------------------------------
# Commands


def cmd_gen(args: argparse.Namespace) -> int:
    if args.all_presets:
        targets = [GenParams(d, p, args.seed, args.count or 200) for d, p in PRESETS]
    else:
        depth, prob = args.depth, args.prob
        if args.preset:
            parsed = parse_preset_name(args.preset)
            if parsed is None:
                raise ConfigError(f"unknown preset {args.preset!r}")
            depth, prob = parsed
        targets = [
            GenParams(
                depth=depth,
                prob=prob,
                seed=args.seed,
                count=args.count or 200,
                root_rule=args.root_rule,
                dedup=args.dedup,
            )
        ]
    for params in targets:
        records = generate_dataset(params)
        if args.out and not args.all_presets:
            path = Path(args.out)
        else:
            path = Path(args.out_dir) / params.filename
        write_dataset(path, records)
        stats = summarize(records)
        print(
            f"{path}: {stats['records']} records, depth {stats['depths']}, "
            f"mean operands {stats['mean_operands']:.3f}, "
            f"values {stats['min_value']}..{stats['max_value']}"
        )
    return EXIT_OK


def run_selection(
    cfg: ExperimentConfig, test_id: str, test: list[DatasetRecord], out_dir: Path, cap: int, cache: ResponseCache
) -> tuple[ShotSelectionState, Path]:
    sel_id, selection = resolve_selection(cfg, test_id, test, out_dir)
    slug = _slug(cfg, test_id, cap)
    state_path = out_dir / "shots" / f"{slug}.state.json"
    state = select_shots(
        selection,
        make_backend(cfg.backend),
        cfg.variant,
        cfg.cot,
        cap,
        params=cfg.decoding,
        cache=cache,
        dataset_id=sel_id,
        state_path=state_path,
    )
    shots_path = write_shots(out_dir / "shots" / f"{slug}.jsonl", state.shots)
    log_path = out_dir / "shots" / f"{slug}.log.jsonl"
    log_path.write_text(
        "".join(json.dumps({"record_id": rid, "correct": ok}) + "\n" for rid, ok in state.log),
        encoding="utf-8",
    )
    return state, shots_path


def cmd_select(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if cfg.regime.kind not in ("is", "ise"):
        raise ConfigError("select needs an iterative regime (--regime is or ise)")
    out_dir = Path(cfg.output_dir)
    with experiment_lock(out_dir):
        cache = ResponseCache(out_dir / "cache.jsonl")
        cap = max(cfg.shots_sweep) if cfg.shots_sweep else cfg.regime.n
        for spec in cfg.datasets:
            test_id, test = resolve_dataset(spec, cfg.dataset_seed, out_dir)
            state, path = run_selection(cfg, test_id, test, out_dir, cap, cache)
            if not state.shots:
                log.warning("no shots selected for %s: the backend answered every record correctly", test_id)
            elif state.shortfall:
                log.warning("selection for %s ended with %d of %d shots", test_id, len(state.shots), cap)
            print(f"{path}: {len(state.shots)} shots after {state.cursor} records")
    return EXIT_OK


def _shots_for(
    cfg: ExperimentConfig,
    test_id: str,
    test: list[DatasetRecord],
    out_dir: Path,
    n: int,
    cache: ResponseCache,
) -> tuple[list[Shot], bool]:
    kind = cfg.regime.kind
    if kind == "zero" or n == 0:
        return [], False
    if kind == "random":
        sel_id, selection = resolve_selection(cfg, test_id, test, out_dir)
        return random_shots(selection, n, cfg.regime.seed, sel_id), False
    cap = max(cfg.shots_sweep) if cfg.shots_sweep else cfg.regime.n
    shots_path = out_dir / "shots" / f"{_slug(cfg, test_id, cap)}.jsonl"
    if shots_path.exists():
        shots = read_shots(shots_path)
    else:
        state, _ = run_selection(cfg, test_id, test, out_dir, cap, cache)
        shots = state.shots
    # first n failures of a cap-N selection are exactly the cap-n selection
    return shots[:n], len(shots) < n


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out_dir = Path(cfg.output_dir)
    counts = cfg.shots_sweep or [0 if cfg.regime.kind == "zero" else cfg.regime.n]
    with experiment_lock(out_dir):
        cache = ResponseCache(out_dir / "cache.jsonl")
        backend = make_backend(cfg.backend)
        for spec in cfg.datasets:
            test_id, test = resolve_dataset(spec, cfg.dataset_seed, out_dir)
            for n in counts:
                shots, shortfall = _shots_for(cfg, test_id, test, out_dir, n, cache)
                # label by the requested count; a short selection is flagged, not relabelled
                regime = regime_label(cfg.regime.kind, n)
                report = evaluate_dataset(
                    test,
                    shots,
                    backend,
                    cfg.variant,
                    cfg.cot,
                    cfg.runs,
                    cfg.parallelism,
                    params=cfg.decoding,
                    cache=cache,
                    dataset_id=test_id,
                    regime=regime,
                    seed=cfg.regime.seed if cfg.regime.kind == "random" else cfg.dataset_seed,
                    shortfall=shortfall,
                    extra_config=cfg.to_json(),
                )
                slug = f"{_slug(cfg, test_id, n)}"
                report.save(out_dir / "reports" / f"{slug}.json")
                rows_path = out_dir / "logs" / f"{slug}.jsonl"
                rows_path.parent.mkdir(parents=True, exist_ok=True)
                rows_path.write_text("".join(json.dumps(r) + "\n" for r in report.rows), encoding="utf-8")
                print(f"{test_id} | {regime} | {report.cell}")
        log.info("backend calls this invocation: %d", backend.calls)
        if args.calls_file:
            Path(args.calls_file).write_text(f"{backend.calls}\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reports = [RunReport.load(p) for p in args.reports]
    if not reports:
        raise ConfigError("report needs at least one run report")
    text = render_report(reports)
    csv_text = render_csv(reports)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    e = parse(args.expression)
    trace = evaluate(e, POLICIES[args.policy])
    print(f"Expression: {render(e)}")
    print(render_steps(trace, args.variant))
    return EXIT_OK


def cmd_presets(args: argparse.Namespace) -> int:
    for d, p in PRESETS:
        params = GenParams(d, p, args.seed)
        print(f"db({d},{p})  count={params.count}  file={params.filename}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--dataset", action="append", help="test dataset path or preset such as db(2,20); repeatable")
    p.add_argument("--dataset-seed", type=int, help="seed used when a dataset is a preset")
    p.add_argument("--backend", choices=["http_chat", "oracle", "standard_bias", "flaky_oracle", "shot_aware"])
    p.add_argument("--endpoint", help="chat-completions URL (http_chat)")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument("--backend-seed", type=int)
    p.add_argument("--flake-prob", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--audit-log", help="mirror HTTP requests/responses to this JSON-Lines file")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--variant", choices=["PV1", "PV2", "pv1", "pv2"])
    p.add_argument("--cot", dest="cot", action="store_true", default=None)
    p.add_argument("--no-cot", dest="cot", action="store_false")
    p.add_argument("--regime", choices=REGIME_KINDS)
    p.add_argument("--n", type=int, help="number of shots (random) or selection cap (is/ise)")
    p.add_argument("--cap", dest="n", type=int, help="alias of --n")
    p.add_argument("--shot-seed", type=int, help="seed for random shot sampling")
    p.add_argument("--selection", help="selection dataset path/preset, or 'test' to select on the test set")
    p.add_argument("--runs", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out-dir", dest="output_dir")
    p.add_argument("--shots", help="shot-count sweep, e.g. 0,1,2,5,10,20,50")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shotsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--depth", type=int, default=2)
    g.add_argument("--prob", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int)
    g.add_argument("--preset", help="e.g. db(2,20); overrides --depth/--prob")
    g.add_argument("--all-presets", action="store_true", help="write every preset into --out-dir")
    g.add_argument("--root-rule", choices=["strict", "draft"], default="strict")
    g.add_argument("--dedup", action="store_true")
    g.add_argument("--out", help="output file (single dataset)")
    g.add_argument("--out-dir", default="datasets")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("select", help="phase 1: iterative shot selection")
    _add_experiment_flags(s)
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("eval", help="phase 2: evaluate with a frozen shot set")
    _add_experiment_flags(e)
    e.add_argument("--calls-file", help="write the number of backend calls made to this file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare saved run reports")
    r.add_argument("reports", nargs="+")
    r.add_argument("--csv", help="also write one CSV row per (dataset, regime, run)")
    r.set_defaults(func=cmd_report)

    t = sub.add_parser("trace", help="print the canonical trace of an expression")
    t.add_argument("expression")
    t.add_argument("--policy", choices=sorted(POLICIES), default="nonstandard")
    t.add_argument("--variant", choices=["PV1", "PV2"], default="PV1")
    t.set_defaults(func=cmd_trace)

    p = sub.add_parser("presets", help="list the dataset presets")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except AuthError as exc:
        log.error("authentication failed: %s", exc)
        return EXIT_AUTH
    except BackendError as exc:
        log.error("backend failure: %s", exc)
        return EXIT_TRANSPORT
    except (ConfigError, SchemaMismatchError, SampleError, ExprSyntaxError, KeyError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
