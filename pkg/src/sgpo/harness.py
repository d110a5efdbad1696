"""Experiment configs, orchestration and CSV output.

Every run writes into one directory: the resolved config, one or more CSV
files, and ``manifest.json`` last. CSV content depends only on the config and
seed; wall-clock timings go to separate ``timing_*.csv`` files.

File schemas
------------
dynamics.csv
    k, p_sgpo, q_sgpo, prod_sgpo, p_grpo, q_grpo, prod_grpo, entropy1_sgpo, entropy1_grpo
trace_<label>.csv
    iter, success_prob, mean_reward, frac_all_negative, grad_norm,
    correct_prob_state_<h>..., entropy_state_<h>...
timing_<label>.csv
    iter, wall_ms
plot_<label>_panels.csv, plot_<label>_entropy.csv
    series, k, value
summary.csv (train, sweep)
    label, [grid keys...], method, seed, iterations_to_threshold, final_success_prob
lemmas.csv
    lemma_id, points, min_slack, margin, n_violations, status
estimator_check.csv
    method, coord, oracle, closed_form, monte_carlo, abs_err, tol, status
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from sgpo import __version__
from sgpo._validation import check_probability
from sgpo.chain_env import ChainTask, brute_force_expected_gradient
from sgpo.dynamics import DynamicsTrace, check_sgpo_dominance, population_gradient, paired_traces
from sgpo.group_opt import Gating, TrainerConfig, TrainingTrace, estimate_gradient, run_training
from sgpo.lemmas import (
    GridSpec,
    LemmaReport,
    verify_basecase_inequality,
    verify_dynamics_lemma,
    verify_f11_increasing,
    verify_f21_increasing,
    verify_hp_increasing,
    verify_keyABC,
    verify_phi_concave,
)
from sgpo.policy import PolicyParams
from sgpo.reward import ShapingConfig, ShapingMode

KINDS = ("dynamics", "train", "verify", "sweep", "estimator-check")
OUTPUT_ROOT_ENV = "SGPO_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    """Invalid or unparseable experiment config."""


class CheckFailure(AssertionError):
    """A dominance, lemma or estimator check did not hold; outputs are still written."""

    def __init__(self, message: str, manifest: "RunManifest | None" = None):
        super().__init__(message)
        self.manifest = manifest


class OutputError(OSError):
    """Failure reading or writing an experiment file, with the path in the message."""


# -- config --------------------------------------------------------------------------


_TOP_LEVEL = {
    "kind", "name", "tasks", "trainer", "shaping", "judge", "methods", "seeds", "output_dir",
    "K", "eta", "lemmas", "resolution", "samples", "point", "tolerance", "threshold", "grid", "workers",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment; prompts are drawn uniformly over ``tasks``."""

    kind: str
    name: Optional[str] = None
    tasks: tuple[ChainTask, ...] = (ChainTask.stylized(),)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    methods: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    K: int = 200
    eta: float = 1.0
    lemmas: tuple[str, ...] = ()
    resolution: Optional[int] = None
    samples: int = 1_000_000
    point: tuple[float, float] = (0.5, 0.5)
    tolerance: float = 3e-3
    threshold: float = 0.9
    grid: tuple[tuple[str, tuple], ...] = ()
    workers: int = 1

    @property
    def run_methods(self) -> tuple[str, ...]:
        return self.methods or (self.trainer.reward_mode.value,)

    @property
    def label(self) -> str:
        return self.name or self.kind

    def to_dict(self) -> dict:
        """Canonical form; ``output_dir`` is excluded since it does not change results."""
        return {
            "kind": self.kind,
            "name": self.name,
            "tasks": [t.to_dict() for t in self.tasks],
            "trainer": self.trainer.to_dict(),
            "methods": list(self.run_methods),
            "seeds": list(self.seeds),
            "K": self.K,
            "eta": self.eta,
            "lemmas": list(self.lemmas),
            "resolution": self.resolution,
            "samples": self.samples,
            "point": list(self.point),
            "tolerance": self.tolerance,
            "threshold": self.threshold,
            "grid": {k: list(v) for k, v in self.grid},
            "workers": self.workers,
        }

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: Mapping) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _parse_task(spec, where: str) -> ChainTask:
    if spec == "stylized":
        return ChainTask.stylized()
    if not isinstance(spec, Mapping):
        raise ConfigError(f"{where}: expected 'stylized' or a task object")
    try:
        return ChainTask.from_dict(spec)
    except KeyError as exc:
        raise ConfigError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _trainer_dict(doc: Mapping) -> dict:
    trainer = dict(doc.get("trainer") or {})
    for key in ("shaping", "judge"):
        if key in doc:
            if key in trainer:
                raise ConfigError(f"{key}: given both at top level and inside trainer")
            trainer[key] = doc[key]
    return trainer


def _build_trainer(trainer: Mapping) -> TrainerConfig:
    known = {f.name for f in dataclasses.fields(TrainerConfig)}
    unknown = sorted(set(trainer) - known)
    if unknown:
        raise ConfigError(f"trainer.{unknown[0]}: unknown field")
    trainer = dict(trainer)
    for key, cls in (("shaping", ShapingConfig),):
        if key in trainer:
            try:
                trainer[key] = cls(**trainer[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"trainer.{key}: {exc}") from None
    try:
        return TrainerConfig(**trainer)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer: {exc}") from None


def _set_dotted(doc: dict, dotted: str, value) -> dict:
    out = json.loads(json.dumps(doc))
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def parse_config(doc: Mapping) -> ExperimentConfig:
    """Validate a decoded config document and fill defaults."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}, got {kind!r}")

    tasks_doc = doc.get("tasks", ["stylized"])
    if isinstance(tasks_doc, (str, Mapping)):
        tasks_doc = [tasks_doc]
    if not tasks_doc:
        raise ConfigError("tasks: at least one task is required")
    tasks = tuple(_parse_task(t, f"tasks[{i}]") for i, t in enumerate(tasks_doc))
    if len({t.name for t in tasks}) != len(tasks):
        raise ConfigError("tasks: task names must be unique")

    trainer_doc = _trainer_dict(doc)
    trainer = _build_trainer(trainer_doc)

    methods = tuple(doc.get("methods", ()))
    for m in methods:
        if m not in ("sgpo", "grpo"):
            raise ConfigError(f"methods: unknown method {m!r}")

    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds: must be a nonempty list of nonnegative integers")

    grid_doc = doc.get("grid", {})
    if kind == "sweep" and not grid_doc:
        raise ConfigError("grid: sweep experiments need at least one grid axis")
    if not isinstance(grid_doc, Mapping):
        raise ConfigError("grid: must map dotted trainer fields to value lists")
    grid = []
    for key, values in grid_doc.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}: must be a nonempty list")
        for v in values:
            _build_trainer(_set_dotted(trainer_doc, key, v))
        grid.append((key, tuple(values)))

    lemmas = tuple(doc.get("lemmas", ()))
    for lemma in lemmas:
        if lemma not in LEMMAS:
            raise ConfigError(f"lemmas: unknown lemma {lemma!r}")

    def number(key, default, kind_=float, lo=None, strict=True):
        val = doc.get(key, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{key}: must be a number")
        if kind_ is int and int(val) != val:
            raise ConfigError(f"{key}: must be an integer")
        val = kind_(val)
        if lo is not None and (val <= lo if strict else val < lo):
            raise ConfigError(f"{key}: must be {'greater than' if strict else 'at least'} {lo}")
        return val

    point = doc.get("point", [0.5, 0.5])
    if not (isinstance(point, list) and len(point) == 2):
        raise ConfigError("point: must be a [p, q] pair")
    try:
        point = [check_probability(name, v) for name, v in zip("pq", point)]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"point: {exc}") from None
    threshold = number("threshold", 0.9, float, 0.0)
    if threshold > 1:
        raise ConfigError("threshold: must be at most 1")
    resolution = number("resolution", None, int, 99)

    return ExperimentConfig(
        kind=kind,
        name=doc.get("name"),
        tasks=tasks,
        trainer=trainer,
        methods=methods,
        seeds=tuple(seeds),
        output_dir=str(doc.get("output_dir", "runs")),
        K=number("K", 200, int, 0),
        eta=number("eta", 1.0, float, 0.0),
        lemmas=lemmas,
        resolution=resolution,
        samples=number("samples", 1_000_000, int, 0),
        point=(float(point[0]), float(point[1])),
        tolerance=number("tolerance", 3e-3, float, 0.0),
        threshold=threshold,
        grid=tuple(grid),
        workers=number("workers", 1, int, 0),
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read and validate a JSON config; parse errors carry line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- output plumbing -------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc
    return path


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc
    return path


def _series(trace, label: Optional[str]) -> tuple[dict, dict]:
    """Split one trace into panel series and entropy series."""
    if isinstance(trace, DynamicsTrace):
        tag = label or trace.method.value
        panels = {f"p_{tag}": trace.p, f"pq_{tag}": trace.product}
        return panels, {f"entropy1_{tag}": trace.entropy1}
    if isinstance(trace, TrainingTrace):
        tag = f"_{label}" if label else ""
        panels = {
            f"success_prob{tag}": trace.success_prob,
            f"frac_all_negative{tag}": trace.frac_all_negative,
        }
        entropy = {f"entropy_state_{h}{tag}": [e[h] for e in trace.entropy] for h in range(trace.horizon)}
        return panels, entropy
    raise TypeError(f"unsupported trace type {type(trace).__name__}")


def emit_plot_data(traces, out_dir: str | os.PathLike, prefix: str = "plot") -> list[Path]:
    """Long-format ``(series, k, value)`` CSVs: one for the p and p*q (or
    success) panels, one for the entropy curves.

    ``traces`` is a sequence of traces or a mapping ``label -> trace``.
    """
    out_dir = Path(out_dir)
    items = list(traces.items()) if isinstance(traces, Mapping) else [(None, t) for t in traces]
    panels, entropy = {}, {}
    for label, trace in items:
        p, e = _series(trace, label)
        panels.update(p)
        entropy.update(e)

    def rows(series):
        for name, values in series.items():
            for k, v in enumerate(values):
                yield name, k, v

    return [
        write_csv(out_dir / f"{prefix}_panels.csv", ["series", "k", "value"], rows(panels)),
        write_csv(out_dir / f"{prefix}_entropy.csv", ["series", "k", "value"], rows(entropy)),
    ]


DYNAMICS_COLUMNS = [
    "k", "p_sgpo", "q_sgpo", "prod_sgpo", "p_grpo", "q_grpo", "prod_grpo", "entropy1_sgpo", "entropy1_grpo",
]


def dynamics_rows(sgpo: DynamicsTrace, grpo: DynamicsTrace) -> list[list]:
    rows = []
    for (k, ps, qs, pqs, hs), (_, pg, qg, pqg, hg) in zip(sgpo.records(), grpo.records()):
        rows.append([k, ps, qs, pqs, pg, qg, pqg, hs, hg])
    return rows


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    kind: str
    seed: int
    files: dict[str, str] = field(default_factory=dict)
    checks: list[str] = field(default_factory=list)
    status: str = "ok"
    started: str = ""
    finished: str = ""
    output_dir: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir)


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return output_root(config) / f"{config.label}-{config.config_hash()[:12]}" / f"seed{seed}"


# -- experiments -----------------------------------------------------------------------


def _grid_spec(lower, upper, resolution):
    return GridSpec(lower, upper, resolution) if resolution else None


LEMMAS: dict[str, Callable[[Optional[int], int], list[LemmaReport]]] = {
    "monotone-i": lambda r, K: [verify_f11_increasing(_grid_spec((0.0,), (1.0,), r))],
    "monotone-ii": lambda r, K: [verify_hp_increasing(_grid_spec((0.0, -5.0), (1.0, 5.0), r))],
    "monotone-iii": lambda r, K: [verify_f21_increasing(_grid_spec((0.0, 0.0), (1.0, 1.0), r))],
    "monotone-iv": lambda r, K: [verify_phi_concave(_grid_spec((-10.0,), (-0.01,), r))],
    "keyABC": lambda r, K: [verify_keyABC(_grid_spec((0.5,), (1.0,), r))],
    "dynamics": lambda r, K: [verify_dynamics_lemma(t) for t in paired_traces(K)],
    "basecase": lambda r, K: [verify_basecase_inequality()],
}


def run_lemmas(ids: Sequence[str] = (), resolution: Optional[int] = None, K: int = 200) -> list[LemmaReport]:
    reports = []
    for lemma_id in ids or tuple(LEMMAS):
        reports.extend(LEMMAS[lemma_id](resolution, K))
    return reports


def _train_one(args) -> TrainingTrace:
    tasks, trainer, seed = args
    return run_training(PolicyParams.init(list(tasks)), list(tasks), trainer, seed)


def _map(fn, jobs: list, workers: int) -> list:
    # Results come back in submission order, so file contents do not depend on scheduling.
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _write_trace(out: Path, label: str, trace: TrainingTrace, files: dict) -> None:
    files[f"trace_{label}"] = write_csv(out / f"trace_{label}.csv", trace.columns(), trace.rows()).name
    timing = [(k, ms) for k, ms in zip(trace.iters, trace.wall_ms)]
    files[f"timing_{label}"] = write_csv(out / f"timing_{label}.csv", ["iter", "wall_ms"], timing).name
    for path in emit_plot_data({label: trace}, out, prefix=f"plot_{label}"):
        files[path.stem] = path.name


def _summary_row(trace: TrainingTrace, threshold: float) -> list:
    return [trace.iterations_to(threshold), trace.success_prob[-1]]


def _run_dynamics(config, seed, out, manifest):
    sgpo, grpo = paired_traces(config.K, config.eta)
    manifest.files["dynamics"] = write_csv(out / "dynamics.csv", DYNAMICS_COLUMNS, dynamics_rows(sgpo, grpo)).name
    for path in emit_plot_data([sgpo, grpo], out, prefix="plot_dynamics"):
        manifest.files[path.stem] = path.name
    report = check_sgpo_dominance(sgpo, grpo)
    manifest.checks = report.lines()
    return report.passed


def _run_train(config, seed, out, manifest):
    methods = config.run_methods
    jobs = [(config.tasks, dataclasses.replace(config.trainer, reward_mode=m), seed) for m in methods]
    traces = _map(_train_one, jobs, config.workers)
    rows = []
    for m, trace in zip(methods, traces):
        _write_trace(out, m, trace, manifest.files)
        rows.append([m, m, seed, *_summary_row(trace, config.threshold)])
    header = ["label", "method", "seed", "iterations_to_threshold", "final_success_prob"]
    manifest.files["summary"] = write_csv(out / "summary.csv", header, rows).name
    return True


def sweep_points(config: ExperimentConfig) -> list[dict]:
    keys = [k for k, _ in config.grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in config.grid))]


def _run_sweep(config, seed, out, manifest):
    base = config.trainer.to_dict()
    points = sweep_points(config)
    jobs, labels = [], []
    for i, point in enumerate(points):
        doc = base
        for key, value in point.items():
            doc = _set_dotted(doc, key, value)
        trainer = _build_trainer(doc)
        for m in config.run_methods:
            jobs.append((config.tasks, dataclasses.replace(trainer, reward_mode=m), seed))
            labels.append((f"point{i:03d}_{m}", point, m))
    traces = _map(_train_one, jobs, config.workers)
    keys = [k for k, _ in config.grid]
    rows = []
    for (label, point, m), trace in zip(labels, traces):
        manifest.files[f"trace_{label}"] = write_csv(out / f"trace_{label}.csv", trace.columns(), trace.rows()).name
        timing = [(k, ms) for k, ms in zip(trace.iters, trace.wall_ms)]
        write_csv(out / f"timing_{label}.csv", ["iter", "wall_ms"], timing)
        rows.append([label, *(point[k] for k in keys), m, seed, *_summary_row(trace, config.threshold)])
    header = ["label", *keys, "method", "seed", "iterations_to_threshold", "final_success_prob"]
    manifest.files["summary"] = write_csv(out / "summary.csv", header, rows).name
    return True


def _run_verify(config, seed, out, manifest):
    reports = run_lemmas(config.lemmas, config.resolution, config.K)
    rows = [[r.lemma_id, r.points, r.min_slack, r.margin, r.n_violations, "PASS" if r.passed else "FAIL"] for r in reports]
    header = ["lemma_id", "points", "min_slack", "margin", "n_violations", "status"]
    manifest.files["lemmas"] = write_csv(out / "lemmas.csv", header, rows).name
    manifest.checks = [r.line() for r in reports]
    return all(r.passed for r in reports)


def estimator_check(
    samples: int, seed: int = 0, point: tuple[float, float] = (0.5, 0.5), tol: float = 3e-3
) -> list[list]:
    """Compare enumeration, closed form and a ``samples``-group Monte-Carlo
    estimate of the G=2 stylized gradient for both methods."""
    task = ChainTask.stylized()
    p, q = point
    params = PolicyParams.stylized(p, q, task)
    rows = []
    for m in ("sgpo", "grpo"):
        cfg = TrainerConfig(
            group_size=2,
            prompts_per_batch=samples,
            reward_mode=m,
            shaping=ShapingConfig(mode=ShapingMode.LINEAR_RTS),
            gating=Gating.ALWAYS,
        )
        oracle = brute_force_expected_gradient(task, params, m, 2, config=cfg)
        closed = population_gradient(p, q, m)
        mc = estimate_gradient(params, task, cfg, seed)
        for i in range(params.size):
            err = abs(mc[i] - oracle[i])
            exact = abs(oracle[i] - closed[i]) <= 1e-12
            rows.append([m, i, oracle[i], closed[i], mc[i], err, tol, "PASS" if err <= tol and exact else "FAIL"])
    return rows


ESTIMATOR_COLUMNS = ["method", "coord", "oracle", "closed_form", "monte_carlo", "abs_err", "tol", "status"]


def _run_estimator_check(config, seed, out, manifest):
    rows = estimator_check(config.samples, seed, config.point, config.tolerance)
    manifest.files["estimator_check"] = write_csv(out / "estimator_check.csv", ESTIMATOR_COLUMNS, rows).name
    manifest.checks = [f"{r[0]} coord={r[1]} abs_err={r[5]:.3e} {r[7]}" for r in rows]
    return all(r[7] == "PASS" for r in rows)


_RUNNERS = {
    "dynamics": _run_dynamics,
    "train": _run_train,
    "sweep": _run_sweep,
    "verify": _run_verify,
    "estimator-check": _run_estimator_check,
}


def run_experiment(
    config: ExperimentConfig, seed: Optional[int] = None, out_dir: str | os.PathLike | None = None
) -> RunManifest:
    """Run one (config, seed) pair and write its outputs.

    The manifest is written last; a failed check still leaves complete
    outputs and a manifest with ``status: "failed"`` before raising
    :class:`CheckFailure`.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    out = Path(out_dir) if out_dir is not None else run_dir(config, seed)
    manifest = RunManifest(
        config_hash=config.config_hash(),
        code_version=f"sgpo {__version__} (python {platform.python_version()}, numpy {np.__version__})",
        kind=config.kind,
        seed=seed,
        started=_now(),
        output_dir=str(out),
    )
    doc = dict(config.to_dict(), config_hash=manifest.config_hash)
    manifest.files["config"] = _write_text(out / "config.json", json.dumps(doc, sort_keys=True, indent=2) + "\n").name
    passed = _RUNNERS[config.kind](config, seed, out, manifest)
    manifest.status = "ok" if passed else "failed"
    manifest.finished = _now()
    _write_text(out / MANIFEST_NAME, json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    if not passed:
        raise CheckFailure(f"{config.kind} checks failed; see {out / MANIFEST_NAME}", manifest)
    return manifest


def run_all_seeds(config: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> list[RunManifest]:
    """Run every configured seed; ``out_dir`` (if given) gets one ``seed<S>`` subdirectory per seed."""
    manifests = []
    for seed in config.seeds:
        target = None if out_dir is None else Path(out_dir) / f"seed{seed}"
        manifests.append(run_experiment(config, seed, target))
    return manifests
