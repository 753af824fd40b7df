import csv
import json

import pytest

from stresslab.cli import EXIT_ERROR, EXIT_NO_FAILURE, EXIT_OK, main
from stresslab.core import load_trajectory, replay
from stresslab.crosswalk import CrosswalkSim, ScenarioConfig
from stresslab.harness import (STATUS_FOUND, STATUS_NONE, ExperimentSpec, RunRecord, report,
                               rerun_from_manifest, run, run_many, series_csv)

SMALL = dict(iterations=4, batch_size=40, ba_iterations=4, ba_batch_size=150, timing=False)


@pytest.fixture(scope="module")
def easy_ge(tmp_path_factory):
    out = tmp_path_factory.mktemp("easy_ge")
    spec = ExperimentSpec("easy", "ge", robustify=True, seed=3, output_dir=str(out), **SMALL)
    return spec, run(spec)


class TestRun:
    def test_record(self, easy_ge):
        spec, rec = easy_ge
        assert rec.status == STATUS_FOUND and rec.found_failure
        assert len(rec.series) == spec.iterations
        assert rec.robustified_reward > rec.best_reward
        assert rec.ba_improved

    def test_series_nondecreasing_after_first_failure(self, easy_ge):
        _, rec = easy_ge
        vals = [v for v in rec.series if v is not None]
        first = next(i for i, v in enumerate(rec.series) if v is not None)
        assert all(v is not None for v in rec.series[first:])
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_artifacts(self, easy_ge):
        spec, rec = easy_ge
        out = rec.run_dir
        rows = list(csv.DictReader(open(f"{out}/series.csv")))
        assert list(rows[0]) == ["iteration", "best_reward", "found_failure", "wall_ms"]
        assert [int(r["iteration"]) for r in rows] == list(range(1, spec.iterations + 1))
        sim = CrosswalkSim(ScenarioConfig.load(f"{out}/scenario.yaml"))
        for name in ("best", "robustified"):
            traj, cfg = load_trajectory(f"{out}/{name}.json")
            assert cfg == rec.scenario_config
            again = replay(sim, None, traj.actions)
            assert again.total_reward == traj.total_reward and again.ends_in_failure
        man = json.loads(open(f"{out}/manifest.json").read())
        assert man["spec"]["seed"] == 3 and man["summary"]["status"] == STATUS_FOUND

    def test_byte_identical_rerun(self, easy_ge, tmp_path):
        spec, rec = easy_ge
        spec2 = ExperimentSpec(**{**spec.to_dict(), "output_dir": str(tmp_path)})
        run(spec2)
        for name in ("series.csv", "ba_series.csv", "best.txt", "best.json", "robustified.json"):
            assert (tmp_path / name).read_bytes() == open(f"{rec.run_dir}/{name}", "rb").read()

    def test_manifest_round_trip(self, easy_ge, tmp_path):
        _, rec = easy_ge
        again = rerun_from_manifest(rec.run_dir, tmp_path)
        for name in ("series.csv", "ba_series.csv", "robustified.json"):
            assert (tmp_path / name).read_bytes() == open(f"{rec.run_dir}/{name}", "rb").read()
        assert again.robustified_reward == rec.robustified_reward

    def test_load_record(self, easy_ge):
        _, rec = easy_ge
        loaded = RunRecord.load(rec.run_dir)
        assert loaded.series == rec.series
        assert loaded.best_trajectory.total_reward == rec.best_reward

    def test_no_failure_skips_robustification(self):
        spec = ExperimentSpec("medium", "drl", robustify=True, seed=0, iterations=2, batch_size=50)
        rec = run(spec)
        assert rec.status == STATUS_NONE
        assert rec.series == [None, None]
        assert rec.robustified_trajectory is None
        assert any("skipped" in n for n in rec.notices)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            ExperimentSpec(solver="ppo")
        with pytest.raises(ValueError):
            ExperimentSpec(iterations=0)
        with pytest.raises(ValueError):
            ExperimentSpec(budget="huge")

    def test_parallel_matches_sequential(self):
        specs = [ExperimentSpec("easy", "mcts", seed=s, iterations=2, batch_size=30, timing=False) for s in (1, 2)]
        seq = run_many(specs, workers=1)
        par = run_many(specs, workers=2)
        assert [r.series for r in seq] == [r.series for r in par]


def test_series_csv_empty_before_first_failure():
    text = series_csv([None, -5.0, -4.5])
    assert text.splitlines() == ["iteration,best_reward,found_failure,wall_ms", "1,,0,", "2,-5.0,1,", "3,-4.5,1,"]


class TestReport:
    def test_three_records(self, tmp_path):
        recs = [run(ExperimentSpec("easy", s, robustify=True, seed=1, **SMALL)) for s in ("ge", "mcts", "drl")]
        paths = report(recs, tmp_path)
        assert paths["curves"] == 3 and paths["reference_lines"] == 3
        rows = list(csv.reader(open(paths["combined_csv"])))
        assert rows[0] == ["iteration", "ge", "mcts", "drl"]
        assert len(rows) == 1 + SMALL["iterations"]
        assert paths["plot"].stat().st_size > 0

    def test_single_and_empty_record(self, easy_ge, tmp_path):
        _, rec = easy_ge
        assert report([rec.run_dir], tmp_path / "one")["curves"] == 1
        none = run(ExperimentSpec("medium", "drl", seed=0, iterations=2, batch_size=50))
        paths = report([none], tmp_path / "none")
        assert paths["curves"] == 0
        rows = list(csv.reader(open(paths["combined_csv"])))
        assert all(r[1] == "" for r in rows[1:])
        summary = list(csv.DictReader(open(paths["summary_csv"])))
        assert summary[0]["status"] == STATUS_NONE

    def test_needs_records(self, tmp_path):
        with pytest.raises(ValueError):
            report([], tmp_path)


class TestCLI:
    def test_run_found(self, tmp_path, capsys):
        code = main(["run", "--scenario", "easy", "--solver", "mcts", "--iterations", "2", "--batch-size", "30",
                     "--mcts-c", "50", "--out", str(tmp_path / "r"), "--no-timing"])
        assert code == EXIT_OK
        assert "failure_found" in capsys.readouterr().out
        man = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert man["solver_params"]["c_explore"] == 50

    def test_run_no_failure(self, tmp_path):
        code = main(["run", "--scenario", "medium", "--solver", "drl", "--iterations", "1", "--batch-size", "50",
                     "--lr", "1e-4", "--clip", "0.5", "--kl-coef", "2"])
        assert code == EXIT_NO_FAILURE

    def test_config_overrides_and_granularity(self, tmp_path):
        (tmp_path / "o.yaml").write_text("horizon: 40\n")
        code = main(["run", "--scenario", "easy", "--solver", "ge", "--ge-iterations", "2", "--ge-batch", "20",
                     "--ge-granularity", "2.0", "--config", str(tmp_path / "o.yaml"), "--out", str(tmp_path / "r")])
        assert code == EXIT_OK
        man = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert man["scenario_config"]["horizon"] == 40
        assert man["solver_params"]["granularity"][0] == pytest.approx(2.0 * 0.1 ** 0.5)

    def test_errors_exit_one(self, capsys):
        assert main(["run", "--solver", "nope"]) == EXIT_ERROR
        assert main(["run", "--solver", "ge", "--scenario", "missing"]) == EXIT_ERROR
        assert "neither a preset" in capsys.readouterr().err

    def test_report(self, easy_ge, tmp_path):
        _, rec = easy_ge
        assert main(["report", rec.run_dir, "--out", str(tmp_path / "rep")]) == EXIT_OK
        assert (tmp_path / "rep" / "best_reward.png").exists()
