import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from aejoint import cli, runner
from aejoint.errors import ConfigError, DataError, TrainingDivergence
from aejoint.runner import ResultsGrid, load_config, snr_column

REPO = Path(__file__).resolve().parents[1]
SMOKE = REPO / "configs" / "smoke.yaml"


def smoke_dict(**changes):
    d = yaml.safe_load(SMOKE.read_text())
    d.update(changes)
    return d


def write_config(tmp_path, d, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(d))
    return path


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = load_config(SMOKE, output_dir=out)
    outcome = runner.run_experiment(cfg)
    return cfg, outcome


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = load_config()
        assert cfg.task == "scr"
        assert cfg.seeds == [0, 1, 2]
        assert len(cfg.strategies) == 6

    @pytest.mark.parametrize("name", ["default", "acceptance_scr", "smoke"])
    def test_presets_load(self, name):
        load_config(REPO / "configs" / f"{name}.yaml")

    def test_overrides(self, tmp_path):
        cfg = load_config(SMOKE, task="ser", seed=4, strategy="mtl", output_dir=tmp_path)
        assert (cfg.task, cfg.seeds, cfg.strategies, cfg.output_dir) == ("ser", [4], ["mtl"], str(tmp_path))

    @pytest.mark.parametrize("patch", [
        {"bogus": 1},
        {"schema_version": 99},
        {"strategies": []},
        {"strategies": ["cascade"]},
        {"task": "kws"},
        {"seeds": []},
        {"training": {"epochs": -1}},
        {"training": {"learning_rate": 1}},
        {"training": {"snr_train_range": [0, 5]}},
        {"enhancer": {"time_pool": 2}},
        {"mixture": {"snrs": [0]}},
        {"corpus": {"source": "ingest"}},
    ])
    def test_invalid_configs(self, tmp_path, patch):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, smoke_dict(**patch)))

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("task: [unclosed")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_hash_ignores_location_and_selection(self, tmp_path):
        a = load_config(SMOKE)
        assert a.config_hash() == load_config(SMOKE, output_dir=tmp_path, seed=3, strategy="da").config_hash()
        changed = smoke_dict(training={**smoke_dict()["training"], "epochs": 2})
        assert load_config(write_config(tmp_path, changed)).config_hash() != a.config_hash()

    def test_training_plan_follows_seed_eval_plan_follows_corpus(self):
        cfg = load_config(SMOKE)
        assert cfg.plan(5).seed == 5
        assert cfg.eval_plan().seed == cfg.corpus.seed
        assert cfg.strategy_config("da", 5).snr_train_range == cfg.plan(5).train_snr_range

    def test_scene_task_convention(self):
        cfg = load_config(SMOKE, task="asc")
        assert cfg.plan(0).speech_is_interference
        assert cfg.plan(0).eval_snrs == (10.0, 0.0)

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(runner.OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = load_config(SMOKE, output_dir="nested/run")
        assert runner.resolve_output_dir(cfg) == tmp_path / "nested" / "run"
        absolute = tmp_path / "elsewhere"
        assert runner.resolve_output_dir(load_config(SMOKE, output_dir=absolute)) == absolute


def make_grid(metric="accuracy", seeds=(0, 1)):
    grid = ResultsGrid("scr", metric, list(seeds), [10.0, 0.0], config_hash="abc")
    return grid


class TestResultsGrid:
    def test_average_and_inf_rules(self):
        grid = make_grid()
        cols = {"Inf": [90.0, 92.0], "10 dB": [80.0, 70.0], "0 dB": [40.0, 50.0]}
        grid.set_row("baseline", cols)
        grid.set_row("iterative", cols)
        assert grid.rows["baseline"]["Inf"] == 91.0
        assert grid.rows["iterative"]["Inf"] is None
        assert grid.rows["baseline"]["10 dB"] == 75.0  # mean over seeds
        assert grid.rows["baseline"]["average"] == pytest.approx((75.0 + 45.0) / 2, abs=1e-9)
        assert grid.average_consistent()

    def test_random_rows_average_recomputes(self):
        rng = np.random.default_rng(0)
        grid = ResultsGrid("scr", "accuracy", [0, 1, 2], [25.0, 20.0, 15.0, 10.0, 5.0, 0.0])
        for i in range(30):
            grid.set_row(f"s{i}", {c: list(rng.uniform(0, 100, 3)) for c in grid.columns[:-1]})
        for row in grid.rows.values():
            finite = [row[snr_column(s)] for s in grid.snrs]
            assert abs(row["average"] - float(np.mean(finite))) <= 1e-9

    def test_percent_rendering(self):
        grid = make_grid(seeds=(0,))
        grid.set_row("baseline", {"Inf": [runner._pct(0.6918)], "10 dB": [runner._pct(0.5)],
                                  "0 dB": [runner._pct(0.25)]})
        text = grid.render()
        assert "69.18" in text and "50.00" in text and "37.50" in text

    def test_missing_cells_render_as_minus(self):
        grid = make_grid()
        grid.set_row("baseline", {"Inf": None, "10 dB": [1.0, 2.0], "0 dB": None})
        row = grid.render().splitlines()[-1]
        assert row.split()[0] == "baseline"
        assert row.split()[1] == "−" and row.split()[3] == "−" and row.split()[4] == "−"
        assert grid.rows["baseline"]["average"] is None

    def test_wer_notes_lower_is_better(self):
        assert "lower is better" in make_grid("wer").render()
        assert "lower is better" not in make_grid("accuracy").render()

    def test_header_carries_hash_and_seed_note(self):
        lines = make_grid().render().splitlines()
        assert lines[0] == "# config abc"
        assert "2 seed(s)" in lines[2]

    def test_json_round_trip(self):
        grid = make_grid()
        grid.set_row("baseline", {"Inf": [1.0, 3.0], "10 dB": [1.0, 2.0], "0 dB": [0.0, 0.5]})
        again = ResultsGrid.from_json(json.loads(json.dumps(grid.to_json())))
        assert again.render() == grid.render()


class TestPipeline:
    def test_grid_shape(self, smoke_run):
        cfg, outcome = smoke_run
        grid = outcome.grid
        assert outcome.exit_code == 0
        assert list(grid.rows) == cfg.strategies
        assert grid.columns == ["Inf", "10 dB", "0 dB", "average"]
        for s, row in grid.rows.items():
            assert (row["Inf"] is not None) == (s == "baseline")
            assert all(0 <= row[c] <= 100 for c in grid.columns if row[c] is not None)
        assert grid.average_consistent()

    def test_every_artifact_carries_config_hash(self, smoke_run):
        cfg, outcome = smoke_run
        out, h = outcome.output_dir, cfg.config_hash()
        jsonl = [out / "corpus" / "clean" / "manifest.jsonl", out / "corpus" / "noise" / "manifest.jsonl",
                 out / "mixtures" / "test.jsonl"] + sorted((out / "logs").rglob("*.jsonl"))
        assert len(jsonl) == 3 + len(cfg.strategies)
        for path in jsonl:
            assert json.loads(path.read_text().splitlines()[0])["header"]["config_hash"] == h, path
        grid = json.loads((out / "results" / "grid.json").read_text())
        assert next(iter(grid)) == "header" and grid["header"]["config_hash"] == h
        assert (out / "results" / "results.txt").read_text().startswith(f"# config {h}\n")
        for ckpt in (out / "checkpoints").rglob("*.pt"):
            assert torch.load(ckpt, weights_only=True)["config_hash"] == h

    def test_cells_traceable(self, smoke_run):
        cfg, outcome = smoke_run
        grid = outcome.grid
        for s in cfg.strategies:
            payload, _, _ = runner.load_checkpoint(runner.checkpoint_path(outcome.output_dir, s, 0))
            for col in grid.columns[:-1]:
                prov = grid.provenance[s][col]
                assert prov["checkpoints"] == [payload["checkpoint_id"]]
                assert prov["eval_set"].startswith(grid.eval_set_id)

    def test_checkpoints_are_frozen_and_complete(self, smoke_run):
        cfg, outcome = smoke_run
        for s in cfg.strategies:
            payload, cat, ae = runner.load_checkpoint(runner.checkpoint_path(outcome.output_dir, s, 0))
            assert (ae is not None) == (s in runner.USES_ENHANCER)
            assert not cat.training and not any(p.requires_grad for p in cat.parameters())
            assert payload["strategy"] == s and payload["seed"] == 0

    def test_tampered_checkpoint_rejected(self, smoke_run, tmp_path):
        _, outcome = smoke_run
        payload = torch.load(runner.checkpoint_path(outcome.output_dir, "baseline", 0), weights_only=True)
        name = next(iter(payload["state"]["cat"]))
        payload["state"]["cat"][name] = payload["state"]["cat"][name] + 1
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(DataError):
            runner.load_checkpoint(tmp_path / "bad.pt")

    def test_logs_have_epoch_records(self, smoke_run):
        _, outcome = smoke_run
        recs = [json.loads(l) for l in runner.log_path(outcome.output_dir, "iterative", 0).read_text().splitlines()[1:]]
        assert any(r["record"] == "epoch" for r in recs)
        assert all(r["mean_weight_entropy"] is not None for r in recs)

    def test_report_twice_is_byte_identical(self, smoke_run):
        _, outcome = smoke_run
        path = runner.report(outcome.output_dir)
        first = path.read_bytes()
        assert runner.report(outcome.output_dir).read_bytes() == first

    def test_stale_mixture_listing_detected(self, smoke_run, tmp_path):
        cfg, outcome = smoke_run
        import shutil
        out = tmp_path / "copy"
        shutil.copytree(outcome.output_dir, out)
        listing = out / "mixtures" / "test.jsonl"
        lines = listing.read_text().splitlines()
        head = json.loads(lines[0])
        head["header"]["eval_set_id"] = "0" * 16
        listing.write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
        with pytest.raises(DataError):
            runner.evaluate_checkpoints(load_config(SMOKE, output_dir=out), out)

    def test_manifest_source(self, smoke_run, tmp_path):
        _, outcome = smoke_run
        corpus = outcome.output_dir / "corpus"
        d = smoke_dict(corpus={"source": "manifest", "clean": str(corpus / "clean" / "manifest.jsonl"),
                               "noise": str(corpus / "noise" / "manifest.jsonl")},
                       strategies=["baseline"], output_dir=str(tmp_path / "m"))
        cfg = load_config(write_config(tmp_path, d))
        out = runner.resolve_output_dir(cfg)
        clean, noise = runner.synth(cfg, out)
        assert len(clean) == 3 * 5 and len(noise) == 4 + 2
        assert runner.label_space(cfg, clean) == ["cmd00", "cmd01", "cmd02"]
        runner.train(cfg, out, "baseline", 0)
        assert runner.checkpoint_path(out, "baseline", 0).exists()

    def test_corpus_rebuilt_when_spec_changes(self, smoke_run, tmp_path):
        import shutil
        _, outcome = smoke_run
        out = tmp_path / "copy"
        shutil.copytree(outcome.output_dir / "corpus", out / "corpus")
        d = smoke_dict()
        d["corpus"]["sizes"] = {"train": 1, "dev": 0, "test": 1}
        cfg = load_config(write_config(tmp_path, d), output_dir=out)
        clean, _ = runner.load_corpora(cfg, out)
        assert len(clean) == 2 * 3


class TestFailures:
    def test_divergence_recorded_and_run_continues(self, tmp_path, monkeypatch):
        real = runner.run_strategy

        def flaky(cfg, *args, **kwargs):
            if cfg.strategy == "da":
                raise TrainingDivergence("ca_loss is nan")
            return real(cfg, *args, **kwargs)

        monkeypatch.setattr(runner, "run_strategy", flaky)
        d = smoke_dict(strategies=["baseline", "da"])
        cfg = load_config(write_config(tmp_path, d), output_dir=tmp_path / "run")
        outcome = runner.run_experiment(cfg)
        assert outcome.exit_code == runner.EXIT_DIVERGENCE
        assert all(v is None for v in outcome.grid.rows["da"].values())
        assert outcome.grid.rows["baseline"]["average"] is not None
        assert outcome.grid.failures[0]["error"] == "TrainingDivergence"
        text = (outcome.output_dir / "results" / "results.txt").read_text()
        assert "# failed: da seed 0" in text

    def test_exit_code_mapping(self):
        assert runner.exit_code_for(TrainingDivergence("x")) == 4
        assert runner.exit_code_for(ConfigError("x")) == 2
        assert runner.exit_code_for(DataError("x")) == 3


class TestCli:
    def test_unknown_flag_prints_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["all", "--bogus"])
        assert exc.value.code != 0
        assert "usage:" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fit"])
        assert exc.value.code != 0

    def test_bad_task_choice(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--task", "kws"])
        assert exc.value.code != 0

    def test_eval_missing_checkpoint_names_path(self, tmp_path, capsys):
        code = cli.main(["eval", "--config", str(SMOKE), "--out", str(tmp_path), "--strategy", "mtl"])
        assert code == runner.EXIT_DATA
        expected = runner.checkpoint_path(tmp_path, "mtl", 0)
        assert str(expected) in capsys.readouterr().err

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["synth", "--config", str(tmp_path / "none.yaml")]) == runner.EXIT_CONFIG

    def test_report_without_grid(self, tmp_path, capsys):
        assert cli.main(["report", "--out", str(tmp_path)]) == runner.EXIT_DATA
        assert "grid.json" in capsys.readouterr().err

    @pytest.mark.skipif(torch.cuda.is_available(), reason="an accelerator is present")
    def test_accelerator_unavailable(self, tmp_path, capsys, monkeypatch):
        mps = getattr(torch.backends, "mps", None)
        if mps is not None:
            monkeypatch.setattr(mps, "is_available", lambda: False)
        assert cli.main(["synth", "--config", str(SMOKE), "--out", str(tmp_path), "--device", "accelerator"]) == 2
        assert "accelerator" in capsys.readouterr().err

    def test_stagewise_matches_all(self, smoke_run, tmp_path, capsys):
        cfg, outcome = smoke_run
        base = ["--config", str(SMOKE), "--out", str(tmp_path)]
        for command in ("synth", "mix", "train", "eval", "report"):
            assert cli.main([command] + base) == 0, command
        assert ((tmp_path / "results" / "grid.json").read_bytes()
                == (outcome.output_dir / "results" / "grid.json").read_bytes())
        assert "iterative" in capsys.readouterr().out
