import json
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptcraft.cli import main
from promptcraft.config import ConfigError, PipelineConfig, dump_config, load_config, parse_lines
from promptcraft.evaluation import (EvalReport, MethodScores, TrajectoryLog, ablate, build_report, emit_plot, evaluate,
                                    normalize_scores, winrate)
from promptcraft.lm import ModelConfig, TransformerParams

PROMPTS = ["a cat", "a dog on a hill", "red car"]


def _rows(*values):
    return [MethodScores(f"m{i}", v, v, v) for i, v in enumerate(values)]


class TestNormalize:
    def test_two_methods(self):
        assert normalize_scores(_rows(2.0, 4.0), ["pick"]) == [0.0, 1.0]

    def test_identical_scores(self):
        assert normalize_scores(_rows(3.0, 3.0, 3.0)) == [0.5, 0.5, 0.5]

    def test_three_methods(self):
        assert normalize_scores(_rows(1.0, 2.0, 3.0), ["pick"]) == [0.0, 0.5, 1.0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50), st.integers(0, 10)), min_size=1, max_size=6),
           st.floats(0.1, 10), st.floats(-10, 10))
    def test_bounded_and_affine_invariant(self, raw, scale, shift):
        # integer grids keep every nonzero range far above rounding error
        rows = [MethodScores(str(i), p, a, c) for i, (p, a, c) in enumerate(raw)]
        base = normalize_scores(rows)
        assert all(0.0 <= v <= 1.0 for v in base)
        moved = [MethodScores(str(i), p * scale + shift, a, c) for i, (p, a, c) in enumerate(raw)]
        assert normalize_scores(moved) == pytest.approx(base, abs=1e-9)

    def test_report_fills_normalized(self):
        report = build_report(_rows(1.0, 2.0))
        assert [r.normalized for r in report.rows] == [0.0, 1.0]
        assert "n/a" in report.format_table()
        assert report.to_json()["methods"][0]["hps"] == "n/a"

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_scores([])
        with pytest.raises(ValueError):
            EvalReport([])


class TestWinrate:
    def test_identical_outputs_tie(self):
        ys = ["a cat, 8k", "a dog", "a car"]
        r = winrate(PROMPTS, ys, ys)
        assert (r.win, r.lose, r.tie) == (0, 0, 3)

    def test_rule_example(self):
        scores = {"A": 16.0, "B": 15.0}
        r = winrate(["x"], ["A"], ["B"], judge=lambda x, y: scores[y], tie_eps=0.05)
        assert (r.win, r.lose, r.tie) == (1, 0, 0)

    def test_within_eps_is_tie(self):
        scores = {"A": 15.04, "B": 15.0}
        r = winrate(["x"], ["A"], ["B"], judge=lambda x, y: scores[y], tie_eps=0.05)
        assert r.tie == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=1, max_size=30), st.floats(0, 1))
    def test_conservation_and_antisymmetry(self, pairs, eps):
        table = {}
        a, b = [], []
        for i, (sa, sb) in enumerate(pairs):
            table[f"a{i}"], table[f"b{i}"] = sa, sb
            a.append(f"a{i}")
            b.append(f"b{i}")
        judge = lambda x, y: table[y]  # noqa: E731
        xs = ["p"] * len(pairs)
        ab = winrate(xs, a, b, judge, eps)
        ba = winrate(xs, b, a, judge, eps)
        assert ab.total == len(pairs)
        assert sum(ab.rates) == pytest.approx(1.0)
        assert (ab.win, ab.lose, ab.tie) == (ba.lose, ba.win, ba.tie)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            winrate(["x"], ["a"], [])


class TestEvaluate:
    def test_identity_rewriter(self):
        s = evaluate(None, ["a cat", "a red car on a road"], method="Original")
        assert s.consistency == pytest.approx(1.0)
        assert s.aes == pytest.approx(1.0)  # modifier-free prompts
        assert s.outputs == ["a cat", "a red car on a road"]

    def test_model_deterministic(self):
        params = TransformerParams.init(ModelConfig(n_layers=1, d_model=16, n_heads=2, context=256), seed=0)
        a = evaluate(params, PROMPTS, max_new_tokens=8)
        b = evaluate(params, PROMPTS, max_new_tokens=8)
        assert (a.pick, a.aes, a.consistency, a.outputs) == (b.pick, b.aes, b.consistency, b.outputs)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(None, [])


def _log(variants=("combined", "ps-only"), steps=(0, 1000, 2000)):
    log = TrajectoryLog()
    for i, v in enumerate(variants):
        for s in steps:
            log.add(v, s, 1.0 + s / 1000 + i, 15.0 + s / 2000)
    return log


class TestTrajectoryAndPlot:
    def test_plot_counts(self):
        root = ET.fromstring(emit_plot(_log()))
        ns = "{http://www.w3.org/2000/svg}"
        assert len(root.findall(f"{ns}polyline")) == 2
        assert len(root.findall(f"{ns}circle")) == 6

    def test_plot_from_csv(self, tmp_path):
        path = _log().write_csv(tmp_path / "t.csv")
        out = tmp_path / "t.svg"
        emit_plot(path, out)
        ET.parse(out)

    def test_empty_log(self, tmp_path):
        with pytest.raises(ValueError):
            emit_plot(TrajectoryLog())
        empty = tmp_path / "e.csv"
        empty.write_text("variant,step,aes,pick\n")
        with pytest.raises(ValueError):
            emit_plot(empty)

    def test_csv_roundtrip_and_ordering(self, tmp_path):
        log = TrajectoryLog()
        log.add("a", 2000, 1.0, 2.0)
        log.add("a", 0, 1.5, 2.5)
        back = TrajectoryLog.read_csv(log.write_csv(tmp_path / "t.csv"))
        assert [p.step for p in back.series("a")] == [0, 2000]

    def test_ablate_runs_every_variant(self, tmp_path):
        params = TransformerParams.init(ModelConfig(n_layers=1, d_model=16, n_heads=2, context=256), seed=0)

        def run_variant(name, record):
            record(0, params)
            record(10, params)

        log = ablate(run_variant, PROMPTS[:2], ("combined", "aes-only"), max_new_tokens=4, csv_path=tmp_path / "a.csv")
        assert log.variants() == ["combined", "aes-only"]
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 2
        s0 = [log.series(v)[0] for v in log.variants()]
        assert (s0[0].aes, s0[0].pick) == (s0[1].aes, s0[1].pick)


class TestConfig:
    def test_defaults_roundtrip(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(dump_config(PipelineConfig()))
        assert dump_config(load_config(path)) == dump_config(PipelineConfig())

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("ppo.lr = 1e-4  # comment\nsft.epochs = 2\n")
        cfg = load_config(path, ["ppo.lr=2e-4"])
        assert cfg.ppo.lr == 2e-4 and cfg.sft.epochs == 2

    def test_errors(self):
        with pytest.raises(ConfigError):
            parse_lines(["nosection = 1"])
        with pytest.raises(ConfigError):
            parse_lines(["bogus.key = 1"])
        with pytest.raises(ConfigError):
            load_config(None, ["ppo.nope = 1"])
        with pytest.raises(ConfigError):
            load_config(None, ["ppo.lr = fast"])
        with pytest.raises(ConfigError):
            load_config("/nonexistent/config")


class TestCLI:
    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_missing_action(self):
        assert main(["data"]) == 1
        assert main(["train"]) == 1

    def test_bad_config_value(self, tmp_path):
        assert main(["data", "synth", "--out", str(tmp_path), "--set", "corpus.n_records=many"]) == 1

    def test_runtime_failure(self, tmp_path):
        assert main(["train", "sft", "--out", str(tmp_path)]) == 2

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--layers", "1", "--d-model", "8"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_pipeline_smoke(self, tmp_path, capsys):
        out = str(tmp_path)
        small = ["--set", "model.n_layers=3", "--set", "model.d_model=16", "--set", "model.n_heads=2",
                 "--set", "sft.total_steps=3", "--set", "sft.warmup_steps=1", "--set", "rm.steps=3",
                 "--set", "rm.warmup_steps=1", "--set", "ppo.steps=2", "--set", "ppo.batch_size=4",
                 "--set", "ppo.max_new_tokens=8", "--set", "eval.max_new_tokens=8", "--out", out]
        assert main(["data", "synth", "--n", "200", *small]) == 0
        assert main(["data", "build", *small]) == 0
        assert main(["data", "stats", *small]) == 0
        assert main(["train", "sft", *small]) == 0
        assert main(["train", "rm", "--kind", "ps", *small]) == 0
        assert main(["train", "rm", "--kind", "aes", *small]) == 0
        assert main(["train", "ppo", "--reward", "combined", *small]) == 0
        assert main(["eval", *small]) == 0
        assert main(["winrate", *small]) == 0
        assert main(["sample", "--prompt", "a cat", *small]) == 0
        report = json.loads((tmp_path / "eval.json").read_text())
        assert [m["method"] for m in report["methods"]] == ["Original", "sft", "ppo"]
        wr = json.loads((tmp_path / "winrate.json").read_text())
        assert wr["win"] + wr["lose"] + wr["tie"] == len((tmp_path / "test.jsonl").read_text().splitlines())
