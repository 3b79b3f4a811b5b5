import csv
import json

import numpy as np
import pytest

from layoutguide import bench, experiment
from layoutguide.bench import Scenario
from layoutguide.cli import main, parse_seeds
from layoutguide.experiment import (
    ConfigError,
    ExperimentPlan,
    box_outline,
    dumps,
    emit_report,
    read_pgm,
    render_heatmap,
    run_experiment,
)
from layoutguide.grid import LayoutSpec


def _plan(tmp_path=None, **kw):
    kw.setdefault("baselines", ["none"])
    kw.setdefault("seeds", [0])
    return ExperimentPlan(scenario=Scenario(), out_dir=tmp_path, **kw)


class TestRunExperiment:
    def test_single_row(self):
        rep = run_experiment(_plan(), write=False)
        assert len(rep.rows) == 1
        assert rep.rows[0]["status"] == "ok"
        assert set(rep.aggregates) == {"none"}

    def test_every_seed_once_per_baseline(self):
        rep = run_experiment(_plan(baselines=["none", "backprop"], seeds=[3, 1, 2]), write=False)
        cells = [(r["baseline"], r["seed"]) for r in rep.rows]
        assert sorted(cells) == sorted((b, s) for b in ("none", "backprop") for s in (3, 1, 2))
        assert "none>backprop" in rep.win_rates and "backprop>none" in rep.win_rates

    def test_identical_initial_noise_across_baselines(self, monkeypatch):
        calls = []
        real = bench.initial_noise

        def spy(shape, seed):
            z = real(shape, seed)
            calls.append(z.tobytes())
            return z

        monkeypatch.setattr(bench, "initial_noise", spy)
        run_experiment(_plan(baselines=["none", "langevin-adaptive", "backprop"], seeds=[5]), write=False)
        assert len(calls) == 3 and len(set(calls)) == 1

    def test_failed_cell_recorded(self, monkeypatch):
        real = experiment.guided_sample

        def flaky(*args, **kw):
            if args[6] == 1:
                raise FloatingPointError("boom")
            return real(*args, **kw)

        monkeypatch.setattr(experiment, "guided_sample", flaky)
        rep = run_experiment(_plan(seeds=[0, 1, 2]), write=False)
        assert [r["status"] for r in rep.rows] == ["ok", "failed", "ok"]
        assert rep.failed == 1
        assert rep.aggregates["none"]["mean_coverage"]["n"] == 2

    @pytest.mark.parametrize("kw", [{"baselines": []}, {"seeds": []}, {"baselines": ["magic"]},
                                    {"seeds": [1, 1]}, {"trace": "verbose"}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            run_experiment(_plan(**kw), write=False)

    def test_byte_identical_reports(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_experiment(_plan(a, baselines=["none", "langevin-fixed"], seeds=[0, 1]))
        run_experiment(_plan(b, baselines=["none", "langevin-fixed"], seeds=[0, 1], jobs=2))
        for name in ("report.json", "metrics.csv", "traces/langevin-fixed_seed1.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_csv_schema(self, tmp_path):
        rep = run_experiment(_plan(baselines=["none", "backprop"], seeds=[0, 1]), write=False)
        _, csv_path = emit_report(rep, tmp_path / "report.json")
        rows = list(csv.DictReader(csv_path.open()))
        assert list(rows[0])[:7] == ["baseline", "seed", "status", "coverage", "spread", "loglik", "argmax_in_box"]
        assert len(rows) == 4
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["version"] == "0.1.0"
        assert doc["config"]["guidance"]["rho_max"] == 5.0


class TestDumps:
    def test_sorted_and_ten_digits(self):
        text = dumps({"b": 1 / 3, "a": [np.float64(2 / 3), np.int64(4), True]})
        assert text.index('"a"') < text.index('"b"')
        assert "0.3333333333" in text and "0.33333333333" not in text
        assert "0.6666666667" in text

    def test_nonfinite(self):
        assert json.loads(dumps({"x": float("inf")}))["x"] == "inf"


class TestHeatmap:
    def test_uniform_is_constant(self, tmp_path):
        layout = LayoutSpec.from_boxes([[0, 0, 0.5, 0.5]])
        img = read_pgm(render_heatmap(np.full((4, 4), 1 / 16), layout, tmp_path / "u.pgm"))
        assert img.shape == (4, 4) and np.all(img == 255)

    def test_point_mass(self, tmp_path):
        layout = LayoutSpec.from_boxes([[0, 0, 0.75, 0.75]])
        a = np.zeros((8, 8))
        a[7, 7] = 1.0
        img = read_pgm(render_heatmap(a, layout, tmp_path / "p.pgm"))
        outline = box_outline(np.pad(np.ones((6, 6), bool), ((0, 2), (0, 2))))
        expected = np.where(outline, 255, 0)
        expected[7, 7] = 255
        np.testing.assert_array_equal(img, expected)
        assert outline.sum() == 20

    def test_header_and_scaling(self, tmp_path):
        a = np.array([[0.0, 0.25], [0.5, 1.0]])
        path = render_heatmap(a, None, tmp_path / "s.pgm", scale=2)
        assert path.read_bytes().startswith(b"P5\n4 4\n255\n")
        img = read_pgm(path)
        np.testing.assert_array_equal(img[::2, ::2], [[0, 64], [128, 255]])

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError):
            render_heatmap(np.ones((2, 2)), None, tmp_path / "file" / "x.pgm")


class TestCli:
    def test_parse_seeds(self):
        assert parse_seeds("3") == [0, 1, 2]
        assert parse_seeds("4,9") == [4, 9]
        assert parse_seeds("10-12") == [10, 11, 12]
        with pytest.raises(ConfigError):
            parse_seeds("x")

    def test_bench_run_ok(self, tmp_path, capsys):
        assert main(["bench", "run", "--baseline", "none", "backprop", "--seeds", "2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "report.json").exists() and (tmp_path / "metrics.csv").exists()
        assert len(list((tmp_path / "traces").iterdir())) == 4

    def test_failed_cell_exit_code(self, tmp_path, monkeypatch):
        def broken(*args, **kw):
            raise RuntimeError("nope")

        monkeypatch.setattr(experiment, "guided_sample", broken)
        assert main(["bench", "run", "--baseline", "none", "--seeds", "1", "--out", str(tmp_path)]) == 1

    def test_config_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n  "height": 16,\n  oops\n}')
        assert main(["bench", "run", "--scenario", str(bad), "--seeds", "1"]) == 2
        assert f"{bad}:3:3" in capsys.readouterr().err
        assert main(["bench", "run", "--baseline", "magic"]) == 2
        assert main(["bench", "run", "--seeds", "1", "--rho-max", "-1"]) == 2
        assert main(["bench", "run", "--scenario", str(tmp_path / "missing.json")]) == 2
        unknown = tmp_path / "unknown.json"
        unknown.write_text('{"langevin": {"temperature": 3}}')
        assert main(["bench", "run", "--scenario", str(unknown), "--seeds", "1"]) == 2

    def test_precedence(self, tmp_path):
        sc = tmp_path / "sc.json"
        sc.write_text(json.dumps({"temperature": 0.7, "guidance": {"rho_max": 3.0}, "langevin": {"snr": 0.1}}))

        def resolved(*extra):
            out = tmp_path / f"o{len(extra)}"
            assert main(["bench", "run", "--baseline", "none", "--seeds", "1", "--out", str(out), *extra]) == 0
            return json.loads((out / "report.json").read_text())["config"]

        base = resolved()
        assert base["guidance"]["rho_max"] == 5.0 and base["langevin"]["snr"] == 0.06
        from_file = resolved("--scenario", str(sc))
        assert from_file["guidance"]["rho_max"] == 3.0 and from_file["langevin"]["snr"] == 0.1
        assert from_file["scenario"]["temperature"] == 0.7
        cli = resolved("--scenario", str(sc), "--rho-max", "4", "--steps", "30", "--guidance-steps", "6")
        assert cli["guidance"]["rho_max"] == 4.0 and cli["langevin"]["snr"] == 0.1
        assert cli["guidance"]["total_steps"] == 30 and cli["scenario"]["num_steps"] == 30

    @pytest.mark.parametrize(
        "argv",
        [
            ["verify", "theorem1", "--trials", "200"],
            ["verify", "nash", "--pairs", "50"],
            ["verify", "gradcheck", "--instances", "2"],
            ["verify", "langevin-oracle", "--samples", "2000", "--mh", "off"],
        ],
    )
    def test_verify_verbs(self, argv, capsys):
        assert main(argv) in (0, 1)
        doc = json.loads(capsys.readouterr().out)
        assert isinstance(doc, dict)

    def test_verify_theorem1_passes(self, capsys):
        assert main(["verify", "theorem1", "--trials", "300"]) == 0

    def test_render(self, tmp_path, capsys):
        assert main(["render", "--baseline", "none", "--seed", "1", "--scale", "2", "--out", str(tmp_path)]) == 0
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["none_seed1_token0.pgm", "none_seed1_token1.pgm"]
        assert read_pgm(tmp_path / files[0]).shape == (32, 32)
