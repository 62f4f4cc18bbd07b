import json
import os

import numpy as np
import pytest

from robustcomp.attack import AttackConfig
from robustcomp.cli import main
from robustcomp.data import make_synthetic
from robustcomp.experiment import (ExperimentConfig, RunReport, StageError,
                                   export_features, load_datasets,
                                   report_table, run_pipeline, run_single,
                                   sweep)
from robustcomp.nn import load as load_model
from robustcomp.seeds import derive_seed
from conftest import tiny_model


def micro_config(tmp_path, **kw):
    base = dict(synthetic=16, train_epochs=0, batch_size=8,
                finetune_mode="none", eps=0.05, attack_steps_train=1,
                attack_steps_eval=2, seed=3,
                out_dir=str(tmp_path / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_from_json_text_and_overrides(self):
        cfg = ExperimentConfig.from_json('{"synthetic": 8, "seed": 5}',
                                         train_epochs=1)
        assert cfg.synthetic == 8 and cfg.seed == 5 and cfg.train_epochs == 1

    def test_digest_ignores_out_dir(self):
        a = ExperimentConfig(synthetic=8, out_dir="x")
        b = ExperimentConfig(synthetic=8, out_dir="y")
        c = ExperimentConfig(synthetic=9, out_dir="x")
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_notation_grid(self):
        assert ExperimentConfig(train_mode="standard").notation() == "f_st"
        assert ExperimentConfig(train_mode="adversarial").notation() == "f_rb"
        cfg = ExperimentConfig(train_mode="standard", compression="prune",
                               finetune_mode="adversarial")
        assert cfg.notation() == "T_ad(f_st^p)"
        cfg = ExperimentConfig(train_mode="adversarial", compression="qat",
                               finetune_mode="standard")
        assert cfg.notation() == "T_st(f_rb^q)"

    def test_apply_preset_desk(self):
        cfg = ExperimentConfig().apply_preset("desk")
        assert cfg.train_subset == 10000 and cfg.test_subset == 2000
        assert cfg.train_epochs == 5
        assert cfg.attack_steps_train == 10 and cfg.attack_steps_eval == 20


class TestSeeds:
    def test_rep_seeds_distinct(self):
        seeds = [derive_seed(0, "rep", r) for r in range(8)]
        assert len(set(seeds)) == 8

    def test_tag_order_matters(self):
        assert derive_seed(0, "a", "b") != derive_seed(0, "b", "a")


class TestDatasets:
    def test_synthetic_sizes(self, tmp_path):
        train, test = load_datasets(micro_config(tmp_path, synthetic=20))
        assert len(train) == 20 and len(test) == 5
        assert train.split == "synthetic" and test.split == "test"

    def test_paths_required_without_synthetic(self, tmp_path):
        with pytest.raises(ValueError):
            load_datasets(micro_config(tmp_path, synthetic=None))

    def test_train_test_streams_differ(self, tmp_path):
        train, test = load_datasets(micro_config(tmp_path, synthetic=16))
        assert not np.array_equal(train.images[:4], test.images[:4])


class TestPipeline:
    def test_prune_pipeline_artifacts(self, tmp_path):
        cfg = micro_config(tmp_path, compression="prune", prune_ratio=0.8)
        report = run_pipeline(cfg)
        rep0 = os.path.join(cfg.out_dir, "rep0")
        for name in ("base.model", "compressed.model", "final.model",
                     "prune_plan.json", "robustness.json"):
            assert os.path.exists(os.path.join(rep0, name))
        assert os.path.exists(os.path.join(cfg.out_dir, "report.json"))
        assert os.path.exists(os.path.join(cfg.out_dir, "report.csv"))
        assert 0.0 <= report.clean_mean <= 1.0
        assert 0.0 <= report.robust_mean <= 1.0
        base = load_model(os.path.join(rep0, "base.model"))
        final = load_model(os.path.join(rep0, "final.model"))
        count = lambda m: sum(p.data.size for p in m.params.values())
        assert count(final) < count(base)

    def test_ptq_pipeline_artifacts(self, tmp_path):
        cfg = micro_config(tmp_path, compression="ptq", quant_bits=8)
        run_pipeline(cfg)
        assert os.path.exists(os.path.join(cfg.out_dir, "rep0", "schemes.json"))

    def test_unknown_compression_is_stage_error(self, tmp_path):
        cfg = micro_config(tmp_path, compression="bogus")
        train, test = load_datasets(cfg)
        with pytest.raises(StageError) as e:
            run_single(cfg, train, test, 0, str(tmp_path / "rep"))
        assert e.value.stage == "compress"

    def test_repetitions_deterministic(self, tmp_path):
        cfg1 = micro_config(tmp_path, repetitions=2,
                            out_dir=str(tmp_path / "a"))
        cfg2 = micro_config(tmp_path, repetitions=2,
                            out_dir=str(tmp_path / "b"))
        r1 = run_pipeline(cfg1)
        r2 = run_pipeline(cfg2)
        assert r1.clean_accuracies == r2.clean_accuracies
        assert r1.robust_accuracies == r2.robust_accuracies
        for rep in ("rep0", "rep1"):
            with open(os.path.join(cfg1.out_dir, rep, "final.model"), "rb") as f:
                m1 = f.read()
            with open(os.path.join(cfg2.out_dir, rep, "final.model"), "rb") as f:
                m2 = f.read()
            assert m1 == m2

    def test_report_json_roundtrip(self, tmp_path):
        cfg = micro_config(tmp_path, repetitions=2)
        report = run_pipeline(cfg)
        back = RunReport.from_json(report.to_json())
        assert back.clean_accuracies == report.clean_accuracies
        assert back.notation == report.notation
        assert back.config_digest == cfg.digest()


class TestSweep:
    def test_axis_validation(self, tmp_path):
        cfg = micro_config(tmp_path)
        with pytest.raises(ValueError):
            sweep(cfg, "gamma", [1], str(tmp_path / "s.csv"), figures=False)
        with pytest.raises(ValueError):
            sweep(cfg, "bits", [], str(tmp_path / "s.csv"), figures=False)

    def test_bits_sweep_csv(self, tmp_path):
        cfg = micro_config(tmp_path)
        out = str(tmp_path / "sweep.csv")
        rows = sweep(cfg, "bits", [8], out, figures=False)
        assert len(rows) == 1 and rows[0]["error"] == ""
        lines = open(out).read().strip().split("\n")
        assert lines[0].startswith("level,test_mean")
        assert len(lines) == 2
        assert not os.path.exists(str(tmp_path / "sweep.png"))


class TestExportFeatures:
    def test_row_counts_and_width(self, tmp_path):
        model = tiny_model(seed=0, channels=(3, 4))
        data = make_synthetic(6, seed=1)
        atk = AttackConfig(eps=0.05, steps=2, seed=0)
        paths = export_features(model, data, [2, 3], atk, str(tmp_path))
        assert [os.path.basename(p) for p in paths] == \
            ["features_layer2.csv", "features_layer3.csv"]
        lines = open(paths[1]).read().strip().split("\n")
        assert len(lines) == 12            # clean + adversarial variants
        cells = lines[0].split(",")
        assert len(cells) == 4 + 2         # logits + label + flag
        assert cells[-1] in ("true", "false")

    def test_no_attack_single_variant(self, tmp_path):
        model = tiny_model(seed=0, channels=(3, 4))
        data = make_synthetic(5, seed=1)
        paths = export_features(model, data, [3], None, str(tmp_path))
        assert len(open(paths[0]).read().strip().split("\n")) == 5


def _fake_report(notation, digest="atk0", clean=0.8, robust=0.4):
    return RunReport(config={}, config_digest="c", notation=notation,
                     attack_digest=digest, clean_accuracies=[clean],
                     robust_accuracies=[robust], stage_wall_s=[{}],
                     model_paths=["m"])


class TestReportTable:
    def test_grid_layout(self):
        reports = [_fake_report("f_st"), _fake_report("T_st(f_st^p)"),
                   _fake_report("T_ad(f_st^p)", robust=0.6)]
        text, csv = report_table(reports)
        assert "f_st" in text and "f_st^p" in text
        lines = csv.strip().split("\n")
        assert lines[0] == "model,metric,None,T_st,T_ad"
        assert len(lines) == 1 + 2 * 2     # two models x two metrics
        assert "60.00" in csv

    def test_mixed_attacks_rejected(self):
        with pytest.raises(ValueError):
            report_table([_fake_report("f_st", "a"), _fake_report("f_rb", "b")])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            report_table([])


class TestCli:
    def _write_config(self, tmp_path, **kw):
        cfg = micro_config(tmp_path, **kw)
        path = tmp_path / "config.json"
        from dataclasses import asdict
        path.write_text(json.dumps(asdict(cfg)))
        return str(path), cfg

    def test_pipeline_command(self, tmp_path, capsys):
        path, cfg = self._write_config(tmp_path)
        assert main(["pipeline", "--config", path]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["notation"] == "f_st"
        assert os.path.exists(os.path.join(cfg.out_dir, "report.json"))

    def test_train_then_eval(self, tmp_path, capsys):
        path, cfg = self._write_config(tmp_path)
        assert main(["train", "--config", path]) == 0
        model_path = capsys.readouterr().out.strip()
        assert os.path.exists(model_path)
        assert main(["eval", "--config", path, "--model", model_path]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == {"clean_acc", "robust_acc", "eps", "steps",
                               "step_size", "n", "seed", "model_digest"}

    def test_prune_command(self, tmp_path, capsys):
        path, cfg = self._write_config(tmp_path)
        assert main(["train", "--config", path]) == 0
        model_path = capsys.readouterr().out.strip()
        assert main(["prune", "--config", path, "--model", model_path]) == 0
        pruned = capsys.readouterr().out.strip()
        assert os.path.exists(pruned)
        assert os.path.exists(os.path.join(cfg.out_dir, "prune_plan.json"))

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        assert main(["pipeline", "--config", "{not json"]) == 1
        assert "error" in capsys.readouterr().err
