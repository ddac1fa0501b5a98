"""End-to-end tests for the command-line interface.

Each experiment subcommand runs at a deliberately tiny scale into a temp
directory; assertions cover exit codes, output files, manifest contents,
config override plumbing, and byte-identical reruns at equal seeds.
"""

import csv
import json
import os

import pytest

from stagepref.cli import (
    CliError,
    _apply_overrides,
    _load_config,
    _merge_defaults,
    build_parser,
    main,
    optimal_stochastic_policy,
)
from stagepref.loop import make_default_world


def run_cli(*argv) -> int:
    return main(list(argv))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


TINY_LOOP = [
    "--set", "loop.iterations=4",
    "--set", "loop.warmup_episodes=4",
    "--set", "loop.total_queries=8",
    "--set", "loop.segment_length=3",
    "--set", "loop.reward_steps=4",
    "--set", "loop.distance_steps=4",
    "--set", "loop.q_sweeps=1",
]


class TestConfigPlumbing:
    def test_load_config_missing_file(self):
        with pytest.raises(CliError):
            _load_config("/nonexistent/config.json")

    def test_load_config_rejects_non_object(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(CliError):
            _load_config(str(path))
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CliError):
            _load_config(str(path))

    def test_overrides_parse_json_values(self):
        out = _apply_overrides({}, ["a.b=3", "a.c=true", "d=hello", "e=[1,2]"])
        assert out == {"a": {"b": 3, "c": True}, "d": "hello", "e": [1, 2]}

    def test_overrides_reject_missing_equals(self):
        with pytest.raises(CliError):
            _apply_overrides({}, ["noequals"])

    def test_overrides_do_not_mutate_input(self):
        base = {"a": {"b": 1}}
        _apply_overrides(base, ["a.b=2"])
        assert base == {"a": {"b": 1}}

    def test_merge_defaults_is_recursive(self):
        defaults = {"world": {"width": 5, "height": 5}, "seed": 0}
        merged = _merge_defaults(defaults, {"world": {"width": 7}})
        assert merged == {"world": {"width": 7, "height": 5}, "seed": 0}

    def test_unknown_loop_key_is_a_config_error(self, tmp_path, capsys):
        code = run_cli("run-loop", "--out", str(tmp_path),
                       "--set", "loop.bogus_knob=1")
        assert code == 2
        assert "bad loop config" in capsys.readouterr().err

    def test_bad_world_value_is_a_config_error(self, tmp_path, capsys):
        code = run_cli("run-loop", "--out", str(tmp_path),
                       "--set", "world.width=0")
        assert code == 2
        assert "bad world config" in capsys.readouterr().err


class TestParser:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_all_subcommands_registered(self):
        parser = build_parser()
        for cmd in ["run-abstract", "run-sortcount", "run-loop",
                    "run-ablation", "check-bounds", "serve"]:
            args = parser.parse_args([cmd] if cmd == "serve" else [cmd, "--out", "x"])
            assert callable(args.func)


class TestRunAbstract:
    def test_writes_curves_and_manifest(self, tmp_path):
        out = str(tmp_path / "o")
        code = run_cli(
            "run-abstract", "--out", out, "--seeds", "2",
            "--set", "n_stages=8", "--set", "epochs=3",
            "--set", "queries_per_epoch=20",
            "--set", 'modes=["stage_aligned","conventional"]',
            "--set", "r_biases=[0.0]",
        )
        assert code == 0
        with open(os.path.join(out, "curves.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header[0] == "mode"
        # 2 modes x 1 bias x 2 seeds x 3 epochs
        assert len(body) == 12
        manifest = read_json(os.path.join(out, "manifest.json"))
        assert manifest["command"] == "run-abstract"
        assert manifest["seeds"] == [0, 1]
        assert manifest["config"]["n_stages"] == 8
        assert len(manifest["config_hash"]) == 64
        assert manifest["outputs"] == [os.path.join(out, "curves.csv")]

    def test_unknown_mode_rejected(self, tmp_path, capsys):
        code = run_cli("run-abstract", "--out", str(tmp_path),
                       "--set", 'modes=["sideways"]')
        assert code == 2
        assert "unknown mode" in capsys.readouterr().err

    def test_equal_seeds_byte_identical(self, tmp_path):
        args = ["run-abstract", "--seeds", "1", "--set", "n_stages=6",
                "--set", "epochs=2", "--set", "queries_per_epoch=10",
                "--set", "r_biases=[0.0]"]
        out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run_cli(*args, "--out", out_a) == 0
        assert run_cli(*args, "--out", out_b) == 0
        with open(os.path.join(out_a, "curves.csv"), "rb") as fh:
            blob_a = fh.read()
        with open(os.path.join(out_b, "curves.csv"), "rb") as fh:
            blob_b = fh.read()
        assert blob_a == blob_b


class TestRunSortcount:
    def test_report_file_shape(self, tmp_path):
        out = str(tmp_path / "o")
        code = run_cli("run-sortcount", "--out", out,
                       "--set", "sizes=[[6,3],[8,4]]")
        assert code == 0
        doc = read_json(os.path.join(out, "sortcount.json"))
        assert len(doc["reports"]) == 2
        first = doc["reports"][0]
        assert first["n_stages"] == 6 and first["n_actions"] == 3
        assert first["per_stage_count"] < first["global_count"]
        assert os.path.exists(os.path.join(out, "manifest.json"))

    def test_malformed_size_entry(self, tmp_path, capsys):
        code = run_cli("run-sortcount", "--out", str(tmp_path),
                       "--set", "sizes=[[6]]")
        assert code == 2
        assert "sizes entries" in capsys.readouterr().err


class TestRunLoop:
    def test_outputs_and_manifest(self, tmp_path, capsys):
        out = str(tmp_path / "o")
        code = run_cli("run-loop", "--out", out, *TINY_LOOP)
        assert code == 0
        assert "final success" in capsys.readouterr().out
        with open(os.path.join(out, "metrics.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "iteration"
        assert len(rows) == 1 + 4  # header + iterations
        prefs = os.path.join(out, "preferences.jsonl")
        with open(prefs, encoding="utf-8") as fh:
            n_prefs = sum(1 for line in fh if line.strip())
        assert 0 < n_prefs <= 8
        assert os.path.exists(os.path.join(out, "distance.csv"))
        ckpt = read_json(os.path.join(out, "distance_model.json"))
        assert ckpt["meta"]["seed"] == 0
        manifest = read_json(os.path.join(out, "manifest.json"))
        assert manifest["command"] == "run-loop"
        assert len(manifest["outputs"]) == 4

    def test_rerun_replaces_preference_log(self, tmp_path):
        out = str(tmp_path / "o")
        assert run_cli("run-loop", "--out", out, *TINY_LOOP) == 0
        with open(os.path.join(out, "preferences.jsonl"), encoding="utf-8") as fh:
            first = fh.read()
        # a rerun must start a fresh log, not append to the stale one
        assert run_cli("run-loop", "--out", out, *TINY_LOOP) == 0
        with open(os.path.join(out, "preferences.jsonl"), encoding="utf-8") as fh:
            second = fh.read()
        assert len(second.splitlines()) == len(first.splitlines())

    def test_human_teacher_refused(self, tmp_path, capsys):
        code = run_cli("run-loop", "--out", str(tmp_path),
                       "--set", 'loop.teacher.kind="human"')
        assert code == 2
        assert "serve" in capsys.readouterr().err


class TestRunAblation:
    def test_sweep_summary_and_rows(self, tmp_path):
        out = str(tmp_path / "o")
        code = run_cli(
            "run-ablation", "--out", out, *TINY_LOOP,
            "--set", 'modes=["uniform","disagreement"]',
            "--set", "seeds=[0,1]",
        )
        assert code == 0
        summary = read_json(os.path.join(out, "summary.json"))
        assert set(summary) == {"uniform", "disagreement"}
        for stats in summary.values():
            assert stats["runs"] == 2
            assert 0.0 <= stats["tail_success_mean"] <= 1.0
        with open(os.path.join(out, "ablation.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        # header + 2 modes x 2 seeds x 4 iterations
        assert len(rows) == 1 + 16
        assert rows[0] == ["mode", "seed", "iteration", "queries_used",
                           "success", "true_return"]

    def test_unknown_selection_mode(self, tmp_path, capsys):
        code = run_cli("run-ablation", "--out", str(tmp_path),
                       "--set", 'modes=["psychic"]')
        assert code == 2
        assert "unknown selection mode" in capsys.readouterr().err


class TestCheckBounds:
    def test_report_written_and_exit_code(self, tmp_path, capsys):
        out = str(tmp_path / "o")
        code = run_cli(
            "check-bounds", "--out", out,
            "--set", "bound.episodes=40",
            "--set", "alignment.samples_per_case=50",
        )
        doc = read_json(os.path.join(out, "bounds.json"))
        assert {"stage_bound", "alignment"} <= set(doc)
        holds = (doc["stage_bound"]["holds"]
                 and doc["alignment"]["all_inside"]
                 and doc["alignment"]["strictly_increasing"])
        assert code == (0 if holds else 1)
        assert "all bounds hold" in capsys.readouterr().out

    def test_optimal_stochastic_policy_rows(self):
        world = make_default_world()
        policy = optimal_stochastic_policy(world)
        assert policy.shape == (world.n_states, world.mdp.n_actions)
        sums = policy.sum(axis=1)
        assert max(abs(s - 1.0) for s in sums) < 1e-9
        assert policy.min() >= 0.0


class TestServe:
    def test_requires_queries_file(self, capsys):
        assert run_cli("serve") == 2
        assert "--queries" in capsys.readouterr().err

    def test_missing_queries_file(self, capsys, tmp_path):
        assert run_cli("serve", "--queries", str(tmp_path / "no.json")) == 2
        assert "not found" in capsys.readouterr().err
