"""Config, orchestration, CLI, and artifact-layout tests."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mmtumor.cli import main
from mmtumor.errors import ConfigError, DataError, DivergenceError, EvaluationError
from mmtumor.features import FeatureConfig, extract_feature_vector
from mmtumor.model import ModelSpec
from mmtumor.pipeline import (
    RunConfig,
    evaluate_cmd,
    extract_features_cmd,
    format_effective_config,
    load_run_config,
    rebuild_report,
    run_cv,
    run_single_fold,
)
from mmtumor.synthetic import write_blob_corpus
from mmtumor.training import TrainConfig

SMOKE_MODEL = {
    "image_input_shape": [32, 32, 3],
    "image_head": {"initial_features": 8, "growth_rate": 4, "block_layers": [2, 2]},
    "tabular_head": {"widths": [8, 4]},
    "classifier": {"widths": [16]},
}


def write_config(path, image_dir, features_table, out_dir, **run_keys):
    payload = {
        "dataset": {"image_dir": str(image_dir), "features_table": str(features_table)},
        "run": {"out_dir": str(out_dir), "k": 3, "seed": 7, **run_keys},
        "model": SMOKE_MODEL,
        "training": {"batch_size": 8, "max_epochs": 30, "early_stop_patience": 12},
    }
    path.write_text(yaml.safe_dump(payload))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    image_dir, table = write_blob_corpus(root, n_samples=36, image_size=(32, 32), seed=3)
    return image_dir, table


@pytest.fixture(scope="module")
def finished_run(corpus, tmp_path_factory):
    image_dir, table = corpus
    out_dir = tmp_path_factory.mktemp("run")
    config = write_config(out_dir / "config.yaml", image_dir, table, out_dir / "cv")
    cfg = load_run_config(config)
    report = run_cv(cfg)
    return cfg, report, out_dir / "cv"


class TestRunConfig:
    def test_defaults_reproduce_protocol(self):
        cfg = load_run_config(None, {})
        assert cfg.balance is True
        assert cfg.standardize == "global"
        assert cfg.k == 10
        assert cfg.feature_mode == "shipped"
        assert cfg.model == ModelSpec()
        assert cfg.train == TrainConfig(seed=cfg.seed)
        assert cfg.train.learning_rate == 1e-3
        assert cfg.train.batch_size == 32
        assert cfg.train.max_epochs == 100
        assert cfg.train.early_stop_min_delta == 1e-4
        assert cfg.train.early_stop_patience == 5

    def test_empty_config_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_run_config(path) == load_run_config(None)

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"run": {"k": 4, "seed": 5}}))
        cfg = load_run_config(path, {"k": 6, "seed": None})
        assert cfg.k == 6
        assert cfg.seed == 5

    def test_master_seed_propagates_to_training(self, tmp_path):
        cfg = load_run_config(None, {"seed": 99})
        assert cfg.seed == 99
        assert cfg.train.seed == 99

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"run": {"folds": 10}}))
        with pytest.raises(ConfigError, match="folds"):
            load_run_config(path)

    def test_training_seed_key_rejected(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"training": {"seed": 1}}))
        with pytest.raises(ConfigError, match="run.seed"):
            load_run_config(path)

    def test_bad_choice_rejected(self):
        with pytest.raises(ConfigError, match="feature_mode"):
            RunConfig(feature_mode="cached")
        with pytest.raises(ConfigError, match="standardize"):
            RunConfig(standardize="none")

    def test_effective_config_prints_defaults(self):
        lines = format_effective_config(load_run_config(None))
        assert "run.k = 10" in lines
        assert "run.standardize = global" in lines
        assert "training.learning_rate = 0.001" in lines
        assert any(line.startswith("model.image_head") for line in lines)


class TestRunCv:
    def test_report_shape_and_artifacts(self, finished_run):
        cfg, report, out = finished_run
        assert len(report.folds) == 3
        assert [m.fold for m in report.folds] == [1, 2, 3]
        table = np.array([m.values() for m in report.folds])
        np.testing.assert_allclose(report.averages, table.mean(axis=0), atol=1e-9)
        for name in ("report.csv", "report.json", "plotdata.csv", "manifest.csv",
                     "run_config.json"):
            assert (out / name).is_file(), name
        for fold in (1, 2, 3):
            for name in ("history.jsonl", "checkpoint.pt", "metrics.json"):
                assert (out / f"fold_{fold}" / name).is_file(), (fold, name)

    def test_smoke_learns_separable_classes(self, finished_run):
        _, report, _ = finished_run
        assert report.averages[0] == 1.0  # accuracy
        assert report.averages[1] == 1.0  # auc

    def test_csv_avg_row_matches_fold_rows(self, finished_run):
        _, _, out = finished_run
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        folds = [r for r in rows if r["CV Fold"] != "Avg."]
        avg = rows[-1]
        assert avg["CV Fold"] == "Avg."
        for column in ("Accuracy", "AUC", "Loss", "Precision", "Recall", "F1-Score"):
            mean = np.mean([float(r[column]) for r in folds])
            assert float(avg[column]) == pytest.approx(mean, abs=5e-7)

    def test_manifest_covers_balanced_dataset(self, finished_run):
        _, _, out = finished_run
        with open(out / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 36
        folds = {int(r["fold"]) for r in rows}
        assert folds == {1, 2, 3}

    def test_refuses_reuse_without_overwrite(self, finished_run):
        cfg, _, _ = finished_run
        with pytest.raises(ConfigError, match="overwrite"):
            run_cv(cfg)

    def test_rerun_is_byte_identical(self, corpus, tmp_path_factory):
        image_dir, table = corpus
        base = tmp_path_factory.mktemp("rerun")
        config = write_config(base / "config.yaml", image_dir, table, base / "cv")
        first_cfg = load_run_config(config)
        run_cv(first_cfg)
        watched = ["report.csv", "report.json", "plotdata.csv", "manifest.csv"]
        watched += [f"fold_{i}/{name}" for i in (1, 2, 3)
                    for name in ("history.jsonl", "metrics.json", "checkpoint.pt")]
        before = {name: (base / "cv" / name).read_bytes() for name in watched}
        run_cv(load_run_config(config, {"overwrite": True}))
        after = {name: (base / "cv" / name).read_bytes() for name in watched}
        assert before == after

    def test_parallel_folds_match_sequential(self, corpus, finished_run, tmp_path_factory):
        image_dir, table = corpus
        _, sequential_report, _ = finished_run
        base = tmp_path_factory.mktemp("parallel")
        config = write_config(
            base / "config.yaml", image_dir, table, base / "cv", parallel_folds=3
        )
        parallel_report = run_cv(load_run_config(config))
        assert parallel_report == sequential_report

    def test_missing_paths_rejected(self, tmp_path):
        target = tmp_path / "cv"
        with pytest.raises(ConfigError, match="image_dir"):
            run_cv(load_run_config(None, {"out_dir": target}))
        assert not target.exists()  # nothing written before validation

    def test_missing_image_is_data_error_with_fold_context_free(self, corpus, tmp_path):
        image_dir, table = corpus
        broken = tmp_path / "broken.csv"
        rows = Path(table).read_text().splitlines()
        rows.append(rows[1].replace("syn_0000", "syn_9999", 1))
        broken.write_text("\n".join(rows) + "\n")
        config = write_config(tmp_path / "c.yaml", image_dir, broken, tmp_path / "cv")
        with pytest.raises(DataError, match="syn_9999"):
            run_cv(load_run_config(config))


class TestTrainFoldCommand:
    def test_single_fold_matches_full_run(self, corpus, finished_run, tmp_path):
        image_dir, table = corpus
        cfg, _, full_out = finished_run
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "one")
        metrics = run_single_fold(load_run_config(config), fold_index=2)
        stored = json.loads((tmp_path / "one" / "fold_2" / "metrics.json").read_text())
        full = json.loads((full_out / "fold_2" / "metrics.json").read_text())
        assert stored == full
        assert metrics.fold == 2

    def test_out_of_range_fold_rejected(self, corpus, tmp_path):
        image_dir, table = corpus
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "cv")
        with pytest.raises(ConfigError, match="fold_index"):
            run_single_fold(load_run_config(config), fold_index=9)


class TestRebuildReport:
    def test_rebuild_matches_original(self, finished_run, tmp_path):
        _, report, out = finished_run
        original = (out / "report.csv").read_bytes()
        rebuilt = rebuild_report(out)
        assert rebuilt == report
        assert (out / "report.csv").read_bytes() == original

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(DataError, match="metrics.json"):
            rebuild_report(tmp_path)


class TestExtractFeatures:
    def test_happy_path(self, corpus, tmp_path):
        image_dir, _ = corpus
        out = tmp_path / "features.csv"
        processed, failed = extract_features_cmd(image_dir, out, FeatureConfig())
        assert (processed, failed) == (36, 0)
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 36
        from PIL import Image

        from mmtumor.data import to_grayscale

        sample = rows[0]
        with Image.open(image_dir / f"{sample['id']}.png") as img:
            gray = to_grayscale(np.asarray(img))
        expected = extract_feature_vector(gray, FeatureConfig()).as_array()
        got = np.array([float(sample[c]) for c in list(sample)[1:]])
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_empty_directory(self, tmp_path):
        image_dir = tmp_path / "empty"
        image_dir.mkdir()
        out = tmp_path / "features.csv"
        assert extract_features_cmd(image_dir, out) == (0, 0)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("id,mean,")

    def test_corrupt_file_counted_not_fatal(self, tmp_path):
        image_dir = tmp_path / "imgs"
        image_dir.mkdir()
        rng = np.random.default_rng(5)
        from PIL import Image

        for i in range(4):
            arr = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
            Image.fromarray(arr).save(image_dir / f"ok_{i}.png")
        (image_dir / "bad.png").write_bytes(b"not an image at all")
        out = tmp_path / "features.csv"
        assert extract_features_cmd(image_dir, out) == (4, 1)
        with open(out, newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 4

    def test_labels_join_feeds_training_loader(self, corpus, tmp_path):
        image_dir, table = corpus
        labels = tmp_path / "labels.csv"
        with open(table, newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(labels, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label"])
            for row in rows:
                writer.writerow([row["id"], row["label"]])
        out = tmp_path / "withlabels.csv"
        processed, failed = extract_features_cmd(image_dir, out, labels_table=labels)
        assert (processed, failed) == (36, 0)
        from mmtumor.data import DatasetSchema, load_dataset

        ds = load_dataset(image_dir, out, DatasetSchema(image_size=(32, 32)))
        assert len(ds) == 36
        assert set(ds.class_counts.values()) == {18}


class TestEvaluate:
    @staticmethod
    def filter_table(table, ids, out_path):
        with open(table, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r[0] in ids]
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    def test_checkpoint_consistent_on_own_validation_split(
        self, corpus, finished_run, tmp_path
    ):
        image_dir, table = corpus
        _, _, out = finished_run
        with open(out / "manifest.csv", newline="") as fh:
            val_ids = {r["id"] for r in csv.DictReader(fh) if r["fold"] == "1"}
        val_table = tmp_path / "val.csv"
        self.filter_table(table, val_ids, val_table)
        metrics = evaluate_cmd(out / "fold_1" / "checkpoint.pt", image_dir, val_table)
        stored = json.loads((out / "fold_1" / "metrics.json").read_text())
        assert metrics.fold == 1
        for key in ("accuracy", "auc", "loss", "precision", "recall", "f1"):
            assert getattr(metrics, key) == pytest.approx(stored[key], abs=1e-6), key

    def test_empty_dataset_rejected(self, corpus, finished_run, tmp_path):
        image_dir, table = corpus
        _, _, out = finished_run
        empty = tmp_path / "empty.csv"
        self.filter_table(table, set(), empty)
        with pytest.raises(EvaluationError, match="empty"):
            evaluate_cmd(out / "fold_1" / "checkpoint.pt", image_dir, empty)

    def test_single_class_rejected(self, corpus, finished_run, tmp_path):
        image_dir, table = corpus
        _, _, out = finished_run
        with open(table, newline="") as fh:
            ill_ids = {r["id"] for r in csv.DictReader(fh) if r["label"] == "1"}
        one_class = tmp_path / "oneclass.csv"
        self.filter_table(table, ill_ids, one_class)
        with pytest.raises(EvaluationError, match="both classes"):
            evaluate_cmd(out / "fold_1" / "checkpoint.pt", image_dir, one_class)


class TestCli:
    def test_run_cv_exit_zero(self, corpus, tmp_path, capsys):
        image_dir, table = corpus
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "cv")
        code = main(["run-cv", "--config", str(config)])
        out = capsys.readouterr().out
        assert code == 0
        assert "config: run.k = 3" in out
        assert "average accuracy" in out

    def test_flag_overrides_config(self, corpus, tmp_path, capsys):
        image_dir, table = corpus
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "cv")
        code = main(
            ["run-cv", "--config", str(config), "--out", str(tmp_path / "cv2"), "--seed", "8"]
        )
        assert code == 0
        assert (tmp_path / "cv2" / "report.csv").is_file()
        assert "config: run.seed = 8" in capsys.readouterr().out

    def test_usage_error_exit_one(self, capsys):
        assert main(["run-cv", "--no-such-flag"]) == 1

    def test_unknown_command_exit_one(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_config_error_exit_one(self, tmp_path, capsys):
        assert main(["run-cv", "--out", str(tmp_path / "cv")]) == 1

    def test_data_error_exit_two(self, corpus, tmp_path, capsys):
        image_dir, table = corpus
        broken = tmp_path / "broken.csv"
        rows = Path(table).read_text().splitlines()
        rows.append(rows[1].replace("syn_0000", "syn_9999", 1))
        broken.write_text("\n".join(rows) + "\n")
        config = write_config(tmp_path / "c.yaml", image_dir, broken, tmp_path / "cv")
        assert main(["run-cv", "--config", str(config)]) == 2

    def test_divergence_exit_three(self, corpus, tmp_path, monkeypatch, capsys):
        image_dir, table = corpus
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "cv")

        def explode(*args, **kwargs):
            raise DivergenceError(2, float("nan"))

        monkeypatch.setattr("mmtumor.pipeline.train_fold", explode)
        assert main(["run-cv", "--config", str(config)]) == 3
        assert "fold 1" in capsys.readouterr().err

    def test_extract_features_command(self, corpus, tmp_path, capsys):
        image_dir, _ = corpus
        out = tmp_path / "feat.csv"
        code = main(["extract-features", "--image-dir", str(image_dir), "--out", str(out)])
        assert code == 0
        assert "processed=36 failed=0" in capsys.readouterr().out

    def test_evaluate_command(self, corpus, finished_run, tmp_path, capsys):
        image_dir, table = corpus
        _, _, out = finished_run
        code = main(
            [
                "evaluate",
                "--checkpoint", str(out / "fold_1" / "checkpoint.pt"),
                "--image-dir", str(image_dir),
                "--features-table", str(table),
            ]
        )
        assert code == 0
        assert "accuracy:" in capsys.readouterr().out

    def test_report_command(self, finished_run, capsys):
        _, _, out = finished_run
        (out / "report.csv").unlink()
        assert main(["report", "--out", str(out)]) == 0
        assert (out / "report.csv").is_file()

    def test_train_fold_command(self, corpus, tmp_path, capsys):
        image_dir, table = corpus
        config = write_config(tmp_path / "c.yaml", image_dir, table, tmp_path / "cv")
        code = main(["train-fold", "--fold-index", "1", "--config", str(config)])
        assert code == 0
        assert (tmp_path / "cv" / "fold_1" / "metrics.json").is_file()
        assert "accuracy:" in capsys.readouterr().out
