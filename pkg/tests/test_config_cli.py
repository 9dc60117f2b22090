import json
import math

import numpy as np
import pytest

from dpaudit import cli, pipeline, report
from dpaudit.config import (ExperimentConfig, default_config, load_config,
                            parse_config_text)
from dpaudit.errors import ConfigError

TINY = {
    "dataset.n_samples": 300,
    "seeds": 2,
    "train.epochs": 2,
    "privacy.epsilons": (8.0,),
    "attack.n_samples": 12,
}


def tiny_config(out, **extra):
    values = dict(TINY)
    values["out"] = str(out)
    values.update(extra)
    return ExperimentConfig(values)


class TestConfig:
    def test_defaults_resolve(self):
        cfg = default_config()
        assert cfg["privacy.delta"] == 8e-7
        assert cfg["privacy.epsilons"] == (1.0, 8.0, 32.0, 1e9)
        assert cfg["seeds"] == 5

    def test_parse_text_with_comments(self):
        cfg = parse_config_text(
            "# comment\n"
            "dataset.n_samples = 500  # trailing\n"
            "privacy.epsilons = 1,8\n"
            "\n"
            "train.clip_norm = auto\n")
        assert cfg["dataset.n_samples"] == 500
        assert cfg["privacy.epsilons"] == (1.0, 8.0)
        assert cfg["train.clip_norm"] is None

    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError, match="valid keys.*dataset.kind"):
            parse_config_text("bogus.key = 1\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("dataset.n_samples = many\n")

    def test_epsilons_must_ascend(self):
        with pytest.raises(ConfigError, match="ascending"):
            ExperimentConfig({"privacy.epsilons": (8.0, 1.0)})

    def test_overrides(self):
        cfg = default_config().with_overrides(**{"seeds": 3, "out": "x"})
        assert cfg["seeds"] == 3
        assert cfg["out"] == "x"

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "e.cfg"
        path.write_text("seeds = 2\nprivacy.epsilons = 1,8\n")
        cfg = load_config(path)
        assert cfg["seeds"] == 2


class TestReportRendering:
    def make_profile(self):
        rows = [
            report.ProfileRow(label="8", epsilon=8.0, sigma_train=1.0,
                              sigma_attack=0.5, achieved_epsilon=7.9,
                              clip_norm=2.0, worst_case=0.02, relaxed=0.01,
                              realistic=0.0, utility={"mcc": (0.5, 0.1)},
                              p_values={"mcc": 0.03}),
            report.ProfileRow(label="nonprivate", epsilon=math.inf,
                              sigma_train=0.0, sigma_attack=0.0,
                              achieved_epsilon=math.inf, clip_norm=None,
                              worst_case=1.0, relaxed=1.0, realistic=1.0,
                              utility={"mcc": (0.9, 0.05)},
                              p_values={"mcc": 1.0}),
        ]
        return report.RiskProfile(task="classification", kappa=5e-4,
                                  delta=8e-7, rows=rows)

    def test_json_round_trip(self):
        profile = self.make_profile()
        text = report.profile_to_json(profile)
        parsed = report.profile_from_json(text)
        assert report.profile_to_json(parsed) == text

    def test_nonprivate_epsilon_renders_as_inf_string(self):
        doc = json.loads(report.profile_to_json(self.make_profile()))
        assert doc["rows"][1]["epsilon"] == "inf"
        assert doc["rows"][1]["achieved_epsilon"] == "OVERFLOW"
        assert doc["assumptions"]["relaxed_bound"].startswith("APPROXIMATE")

    def test_csv_column_count(self):
        text = report.profile_to_csv(self.make_profile())
        lines = text.strip().splitlines()
        header = lines[0].split(",")
        assert len(header) == 8 + 2 * 1  # 8 fixed + (mean, sd) per metric
        assert lines[1].split(",")[0] == "8"
        assert lines[2].split(",")[0] == "inf"

    def test_segmentation_csv_has_dice_columns(self):
        row = report.ProfileRow(label="1", epsilon=1.0,
                                utility={"dice_organ": (0.8, 0.1),
                                         "dice_tumour": (0.1, 0.05),
                                         "dice_background": (0.99, 0.0)})
        profile = report.RiskProfile(task="segmentation", kappa=1e-2,
                                     delta=8e-7, rows=[row])
        header = report.profile_to_csv(profile).splitlines()[0].split(",")
        assert len(header) == 8 + 2 * 3


class TestPipeline:
    def test_profile_invariants_and_reproducibility(self, tmp_path):
        out = tmp_path / "run"
        cfg = tiny_config(out)
        profile, curves, partial = pipeline.run_pipeline(cfg)
        assert not partial
        labels = [r.label for r in profile.rows]
        assert labels == ["8", "nonprivate"]
        for row in profile.rows:
            assert row.status == "ok"
            assert row.worst_case >= row.relaxed >= row.realistic - 1e-12
            assert set(row.utility) == {"mcc"}
            mean, sd = row.utility["mcc"]
            assert -1 <= mean <= 1 and sd >= 0
        nonpriv = profile.rows[-1]
        assert nonpriv.worst_case == nonpriv.relaxed == 1.0
        assert nonpriv.realistic > 0.9
        assert "mcc" in profile.rows[0].p_values

        first = (out / "profile.json").read_bytes()
        first_svg = (out / "curves.svg").read_bytes()
        pipeline.run_pipeline(cfg)  # identical config into the same directory
        assert (out / "profile.json").read_bytes() == first
        assert (out / "curves.svg").read_bytes() == first_svg

    def test_bounds_monotone_across_rows(self, tmp_path):
        cfg = tiny_config(tmp_path / "m", **{"privacy.epsilons": (1.0, 8.0),
                                             "seeds": 1, "attack.n_samples": 4})
        profile, _, _ = pipeline.run_pipeline(cfg)
        finite = [r for r in profile.rows if not math.isinf(r.epsilon)]
        wc = [r.worst_case for r in finite]
        rel = [r.relaxed for r in finite]
        assert wc == sorted(wc)
        assert rel == sorted(rel)

    def test_report_from_partial_artifacts(self, tmp_path):
        out = tmp_path / "partial"
        cfg = tiny_config(out)
        pipeline.attack_stage(cfg, out, labels=["nonprivate"])
        profile, curves, partial = pipeline.report_stage(cfg, out)
        assert partial  # the eps=8 row has no artifacts
        nonpriv = [r for r in profile.rows if r.label == "nonprivate"][0]
        assert nonpriv.realistic > 0.9
        assert "nonprivate" in curves


class TestCli:
    def test_bounds_table_smoke(self, capsys):
        code = cli.main(["bounds", "--eps", "1,8,32", "--kappa", "1e-4"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5  # params echo + header + three rows
        assert "worst_case" in lines[1]

    def test_calibrate_smoke(self, capsys):
        code = cli.main(["calibrate", "--target", "8", "--q", "0.1",
                         "--steps", "50"])
        assert code == 0
        assert "sigma=" in capsys.readouterr().out

    def test_detect_clean_model(self, tmp_path, capsys):
        from dpaudit import models
        from dpaudit.numerics import Rng

        spec = models.conv_classifier((16, 16, 1), 2)
        models.save_model(tmp_path / "clean.bin", spec,
                          models.init_weights(spec, Rng(0)))
        code = cli.main(["detect", "--model", str(tmp_path / "clean.bin")])
        assert code == 0
        assert capsys.readouterr().out.strip() == "clean"

    def test_detect_modified_model(self, tmp_path, capsys):
        import numpy as np

        from dpaudit import imprint, models
        from dpaudit.numerics import Rng

        base = models.conv_classifier((16, 16, 1), 2)
        modified = imprint.surgery_prepend(base, (16, 16, 1), 10)
        weights = imprint.surgery_weights(
            modified, imprint.init_imprint(10, 256), rng=Rng(0))
        models.save_model(tmp_path / "mod.bin", modified, weights)
        code = cli.main(["detect", "--model", str(tmp_path / "mod.bin")])
        assert code == 0
        assert "imprint" in capsys.readouterr().out

    def test_attack_then_report_nonprivate_row(self, tmp_path, capsys):
        out = tmp_path / "cli_out"
        cfg_path = tmp_path / "t.cfg"
        cfg_path.write_text(
            "dataset.n_samples = 300\nseeds = 2\ntrain.epochs = 2\n"
            f"privacy.epsilons = 8\nattack.n_samples = 12\nout = {out}\n")
        assert cli.main(["attack", "--config", str(cfg_path),
                         "--budget", "nonprivate"]) == 0
        code = cli.main(["report", "--config", str(cfg_path)])
        assert code == cli.EXIT_PARTIAL  # the eps=8 row has no artifacts yet
        profile = report.profile_from_json((out / "profile.json").read_text())
        nonpriv = [r for r in profile.rows if r.label == "nonprivate"][0]
        assert nonpriv.realistic > 0.9

    def test_unknown_budget_is_usage_error(self, tmp_path):
        code = cli.main(["attack", "--out", str(tmp_path), "--budget", "zzz"])
        assert code == cli.EXIT_USAGE

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nope = 1\n")
        assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_USAGE

    def test_svg_has_one_curve_group_per_budget(self, tmp_path):
        out = tmp_path / "svg"
        cfg = tiny_config(out, **{"privacy.epsilons": (1.0, 8.0), "seeds": 1,
                                  "attack.n_samples": 4})
        pipeline.run_pipeline(cfg)
        svg = (out / "curves.svg").read_text()
        for label in ("budget-1", "budget-8", "budget-nonprivate"):
            assert svg.count(f'id="{label}"') == 1
        bounds_svg = (out / "bounds.svg").read_text()
        assert 'id="bound-worst-case"' in bounds_svg
        assert 'id="bound-relaxed"' in bounds_svg

    def test_curves_subcommand(self, tmp_path):
        out = tmp_path / "c"
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(
            "dataset.n_samples = 300\nseeds = 1\ntrain.epochs = 1\n"
            f"privacy.epsilons = 8\nattack.n_samples = 8\nout = {out}\n")
        assert cli.main(["attack", "--config", str(cfg_path)]) == 0
        assert cli.main(["curves", "--config", str(cfg_path)]) == 0
        assert (out / "curves.svg").exists()
        assert (out / "curve_8.csv").exists()
        assert (out / "curve_nonprivate.csv").exists()
