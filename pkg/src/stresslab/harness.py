"""Experiment orchestration: run a solver on a scenario, robustify, write artifacts, compare runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Trajectory, save_trajectory, write_trajectory_text
from .crosswalk import CrosswalkSim, load_scenario
from .goexplore import GEParams, SearchResult, explore
from .mcts import MCTSParams, search
from .policy import BAConfig, OptimConfig, backwards_algorithm, drl_solve

SOLVERS = ("ge", "mcts", "drl")


@dataclass(frozen=True)
class Budget:
    iterations: int
    batch_size: int
    ba_iterations: int
    ba_batch_size: int


BUDGETS = {
    "desk": Budget(30, 100, 20, 500),
    "full": Budget(100, 500, 100, 5000),
}

CSV_HEADER = ("iteration", "best_reward", "found_failure", "wall_ms")
STATUS_FOUND = "failure_found"
STATUS_NONE = "no_failure_found"


@dataclass
class ExperimentSpec:
    scenario: str = "easy"
    solver: str = "ge"
    robustify: bool = False
    seed: int = 0
    budget: str = "desk"
    iterations: int | None = None
    batch_size: int | None = None
    output_dir: str | None = None
    # scenario config overrides, same keys as the YAML config file
    overrides: dict = field(default_factory=dict)
    # solver-specific parameters (GEParams / MCTSParams / OptimConfig fields)
    solver_options: dict = field(default_factory=dict)
    optim_options: dict = field(default_factory=dict)
    ba_iterations: int | None = None
    ba_batch_size: int | None = None
    ba_epochs_per_step: int | None = None
    # wall-clock columns make CSVs differ between identical runs; off gives byte-identical output
    timing: bool = True

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.budget not in BUDGETS:
            raise ValueError(f"budget must be one of {tuple(BUDGETS)}, got {self.budget!r}")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved(self) -> tuple[int, int, int, int]:
        b = BUDGETS[self.budget]
        return (self.iterations or b.iterations, self.batch_size or b.batch_size,
                self.ba_iterations or b.ba_iterations, self.ba_batch_size or b.ba_batch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)


@dataclass
class RunRecord:
    spec: dict
    scenario_config: dict
    series: list
    wall_ms: list
    status: str
    best_reward: float | None = None
    best_trajectory: Trajectory | None = None
    robustified_reward: float | None = None
    robustified_trajectory: Trajectory | None = None
    ba_improved: bool | None = None
    ba_series: list = field(default_factory=list)
    ba_wall_ms: list = field(default_factory=list)
    notices: list = field(default_factory=list)
    solver_params: dict = field(default_factory=dict)
    run_dir: str | None = None

    @property
    def found_failure(self) -> bool:
        return self.status == STATUS_FOUND

    @property
    def label(self) -> str:
        return f"{self.spec['solver']}:{self.scenario_config.get('name', 'custom')}:s{self.spec['seed']}"

    def summary(self) -> dict:
        return {
            "status": self.status, "best_reward": self.best_reward,
            "robustified_reward": self.robustified_reward, "ba_improved": self.ba_improved,
            "notices": self.notices,
        }

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        """Rebuild a record from a run directory's manifest and trajectory files."""
        run_dir = Path(run_dir)
        man = json.loads((run_dir / "manifest.json").read_text())
        s = man["summary"]
        rec = cls(man["spec"], man["scenario_config"], _read_series(run_dir / "series.csv"),
                  [], s["status"], s["best_reward"], None, s["robustified_reward"], None,
                  s["ba_improved"], notices=s["notices"], solver_params=man["solver_params"],
                  run_dir=str(run_dir))
        if (run_dir / "best.json").exists():
            rec.best_trajectory = Trajectory.from_dict(json.loads((run_dir / "best.json").read_text())["trajectory"])
        if (run_dir / "robustified.json").exists():
            rec.robustified_trajectory = Trajectory.from_dict(
                json.loads((run_dir / "robustified.json").read_text())["trajectory"])
        return rec


def _series_from_log(log) -> list:
    return [None if v == -math.inf else float(v) for v in log]


def _read_series(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["best_reward"]) if row["best_reward"] else None for row in csv.DictReader(fh)]


def series_csv(series, wall_ms=None) -> str:
    """CSV text; ``best_reward`` is empty until the first failure."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, v in enumerate(series):
        wall = "" if wall_ms is None else f"{wall_ms[i]:.3f}"
        w.writerow([i + 1, "" if v is None else repr(v), int(v is not None), wall])
    return buf.getvalue()


def _solver_params(spec: ExperimentSpec):
    iters, batch, _, _ = spec.resolved()
    opts = dict(spec.solver_options)
    if spec.solver == "ge":
        if "granularity" in opts and opts["granularity"] is not None:
            opts["granularity"] = tuple(opts["granularity"])
        return GEParams(iterations=iters, batch_size=batch, **opts)
    if spec.solver == "mcts":
        return MCTSParams(iterations=iters, batch_size=batch, **opts)
    return OptimConfig(iterations=iters, batch_size=batch, **{**spec.optim_options, **opts})


def run_solver(sim: CrosswalkSim, spec: ExperimentSpec) -> tuple[SearchResult, object]:
    params = _solver_params(spec)
    if spec.solver == "ge":
        return explore(sim, params, spec.seed), params
    if spec.solver == "mcts":
        return search(sim, params, spec.seed), params
    return drl_solve(sim, params, spec.seed), params


def run(spec: ExperimentSpec) -> RunRecord:
    """Execute one experiment; writes artifacts when ``spec.output_dir`` is set."""
    cfg = load_scenario(spec.scenario, spec.overrides or None)
    sim = CrosswalkSim(cfg)
    result, params = run_solver(sim, spec)
    series = _series_from_log(result.log)
    found = result.best_failure is not None
    rec = RunRecord(spec.to_dict(), cfg.to_dict(), series, list(result.wall_ms),
                    STATUS_FOUND if found else STATUS_NONE,
                    result.best_failure.total_reward if found else None, result.best_failure,
                    solver_params=_jsonable(dataclasses.asdict(params)))
    if spec.robustify:
        if not found:
            rec.notices.append("robustification skipped: phase 1 found no failure")
        else:
            _, _, ba_iters, ba_batch = spec.resolved()
            optim = OptimConfig(**spec.optim_options)
            ba = backwards_algorithm(sim, result.best_failure,
                                     BAConfig(ba_iters, ba_batch, spec.ba_epochs_per_step), optim, spec.seed)
            rec.robustified_trajectory = ba.robustified
            rec.robustified_reward = ba.robustified.total_reward
            rec.ba_improved = ba.improved
            rec.ba_series = [float(v) for v in ba.log]
            rec.ba_wall_ms = ba.wall_ms
            if not ba.improved:
                rec.notices.append("robustification did not improve on the phase-1 failure")
    if spec.output_dir:
        write_run(rec, cfg, spec.output_dir, timing=spec.timing)
    return rec


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_run(rec: RunRecord, cfg, out_dir, timing: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "scenario.yaml")
    (out / "series.csv").write_text(series_csv(rec.series, rec.wall_ms if timing else None))
    files = {"series": "series.csv", "scenario": "scenario.yaml"}
    if rec.best_trajectory is not None:
        write_trajectory_text(rec.best_trajectory, out / "best.txt")
        save_trajectory(rec.best_trajectory, out / "best.json", rec.scenario_config)
        files["best_trajectory"] = "best.json"
    if rec.robustified_trajectory is not None:
        write_trajectory_text(rec.robustified_trajectory, out / "robustified.txt")
        save_trajectory(rec.robustified_trajectory, out / "robustified.json", rec.scenario_config)
        ba_wall = rec.ba_wall_ms if timing else None
        (out / "ba_series.csv").write_text(series_csv(rec.ba_series, ba_wall))
        files["robustified_trajectory"] = "robustified.json"
        files["ba_series"] = "ba_series.csv"
    manifest = {
        "spec": rec.spec,
        "scenario_config": rec.scenario_config,
        "solver_params": rec.solver_params,
        "summary": rec.summary(),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    rec.run_dir = str(out)
    return out


def rerun_from_manifest(run_dir, output_dir=None) -> RunRecord:
    """Repeat a run from its manifest and the scenario file stored beside it."""
    run_dir = Path(run_dir)
    man = json.loads((run_dir / "manifest.json").read_text())
    d = dict(man["spec"])
    d["scenario"] = str(run_dir / "scenario.yaml")
    d["overrides"] = {}
    d["output_dir"] = str(output_dir) if output_dir is not None else None
    return run(ExperimentSpec.from_dict(d))


def run_many(specs, workers: int = 1) -> list[RunRecord]:
    """Independent runs, optionally in worker processes; results keep input order."""
    if workers <= 1:
        return [run(s) for s in specs]
    import multiprocessing

    with ProcessPoolExecutor(workers, mp_context=multiprocessing.get_context("spawn")) as ex:
        return list(ex.map(run, specs))


# -- reporting ---------------------------------------------------------------

def _unique_labels(records) -> list[str]:
    labels = [r.spec["solver"] for r in records]
    if len(set(labels)) == len(labels):
        return labels
    labels = [f"{r.spec['solver']}:{r.scenario_config.get('name', 'custom')}" for r in records]
    if len(set(labels)) == len(labels):
        return labels
    return [f"{r.label}#{i}" for i, r in enumerate(records)]


def report(records, out_dir, title: str | None = None) -> dict:
    """Combined iteration x run CSV, a summary CSV and a PNG of best-reward curves.

    Robustified rewards are drawn as horizontal reference lines; iterations
    before a run's first failure are left empty.
    """
    records = [r if isinstance(r, RunRecord) else RunRecord.load(r) for r in records]
    if not records:
        raise ValueError("report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = _unique_labels(records)
    n = max(len(r.series) for r in records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *labels])
    for i in range(n):
        row = [i + 1]
        for r in records:
            v = r.series[i] if i < len(r.series) else None
            row.append("" if v is None else repr(v))
        w.writerow(row)
    (out / "combined.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "solver", "scenario", "seed", "status", "best_reward", "robustified_reward"])
    for lab, r in zip(labels, records):
        w.writerow([lab, r.spec["solver"], r.scenario_config.get("name", "custom"), r.spec["seed"], r.status,
                    "" if r.best_reward is None else repr(r.best_reward),
                    "" if r.robustified_reward is None else repr(r.robustified_reward)])
    (out / "summary.csv").write_text(buf.getvalue())

    plot_path = out / "best_reward.png"
    n_curves, n_refs = _plot(records, labels, plot_path, title)
    return {"combined_csv": out / "combined.csv", "summary_csv": out / "summary.csv", "plot": plot_path,
            "curves": n_curves, "reference_lines": n_refs}


def _plot(records, labels, path, title) -> tuple[int, int]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    n_curves = n_refs = 0
    for lab, r in zip(labels, records):
        xs = [i + 1 for i, v in enumerate(r.series) if v is not None]
        ys = [v for v in r.series if v is not None]
        if ys:
            (line,) = ax.plot(xs, ys, label=f"{lab} ({ys[-1]:.2f})")
            n_curves += 1
            color = line.get_color()
        else:
            ax.plot([], [], label=f"{lab} (no failure found)")
            color = None
        if r.robustified_reward is not None:
            ax.axhline(r.robustified_reward, linestyle="--", color=color,
                       label=f"{lab}+BA ({r.robustified_reward:.2f})")
            n_refs += 1
    ax.set_xlabel("iteration")
    ax.set_ylabel("best failure reward")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return n_curves, n_refs
