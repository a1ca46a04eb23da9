import json

import numpy as np
import pytest

from crq.cluster import SolverConfig
from crq.container import Checkpoint, load_checkpoint, load_model, save_checkpoint
from crq.errors import ConfigError
from crq.experiment import (
    ARTIFACTS,
    ExperimentConfig,
    build_network,
    emit_report,
    ingest_dataset,
    run,
    run_comparison,
    run_stage,
)
from crq.nn import Conv2d, Dense
from crq.train import EpochLog, TrainConfig, retrain, read_training_log_csv


def tiny_config(tmp_path, **overrides) -> ExperimentConfig:
    base = dict(
        dataset={"type": "blobs", "classes": 3, "samples": 120},
        architecture={"type": "mlp", "dims": [2, 8, 8, 3]},
        seed=11,
        out_dir=str(tmp_path / "out"),
        batch_size=16,
        pretrain_epochs=4,
        retrain_epochs=4,
        finetune_epochs=2,
    )
    base.update(overrides)
    return ExperimentConfig.from_dict(base)


class TestConfig:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config keys: learning_rate"):
            ExperimentConfig.from_dict({"learning_rate": 0.1})

    def test_unknown_dataset_key(self):
        with pytest.raises(ConfigError, match="dataset"):
            ExperimentConfig.from_dict({"dataset": {"type": "blobs", "sigma": 1.0}})

    def test_unknown_architecture_key(self):
        with pytest.raises(ConfigError, match="architecture"):
            ExperimentConfig.from_dict({"architecture": {"type": "mlp", "dims": [2, 2], "act": "tanh"}})

    def test_unknown_solver_key(self):
        with pytest.raises(ConfigError, match="solver"):
            ExperimentConfig.from_dict({"solver": {"tol": 1e-9}})

    def test_unknown_stage(self):
        with pytest.raises(ConfigError, match="stages"):
            ExperimentConfig.from_dict({"stages": ["pretrain", "deploy"]})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"lam": -1.0})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"eta": 0.0})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"val_fraction": 1.5})

    def test_from_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 99, "lam": 0.01}))
        config = ExperimentConfig.from_file(path)
        assert config.seed == 99
        assert config.lam == 0.01

    def test_from_file_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            ExperimentConfig.from_file(path)

    def test_hash_ignores_out_dir_and_stages(self):
        a = ExperimentConfig(out_dir="x", stages=("pretrain",))
        b = ExperimentConfig(out_dir="y", stages=("retrain",))
        assert a.config_hash() == b.config_hash()
        c = ExperimentConfig(seed=1)
        assert a.config_hash() != c.config_hash()

    def test_solver_from_dict(self):
        config = ExperimentConfig.from_dict({"solver": {"alpha_tolerance": 1e-6}})
        assert config.solver == SolverConfig(alpha_tolerance=1e-6)


class TestBuilders:
    def test_ingest_blobs(self, tmp_path):
        config = tiny_config(tmp_path)
        data = ingest_dataset(config)
        assert data.n_classes == 3
        assert sum(len(b) for b in data.train) == 96
        assert sum(len(b) for b in data.val) == 24

    def test_ingest_is_deterministic(self, tmp_path):
        config = tiny_config(tmp_path)
        a = ingest_dataset(config)
        b = ingest_dataset(config)
        np.testing.assert_array_equal(a.train[0].inputs, b.train[0].inputs)

    def test_mlp_dim_validation(self, tmp_path):
        config = tiny_config(tmp_path, architecture={"type": "mlp", "dims": [5, 8, 3]})
        data = ingest_dataset(config)
        with pytest.raises(ConfigError, match="input dim"):
            build_network(config, data)
        config = tiny_config(tmp_path, architecture={"type": "mlp", "dims": [2, 8, 7]})
        with pytest.raises(ConfigError, match="output dim"):
            build_network(config, ingest_dataset(config))

    def test_mlp_structure(self, tmp_path):
        config = tiny_config(tmp_path)
        net = build_network(config, ingest_dataset(config))
        dense = [l for l in net.layers if isinstance(l, Dense)]
        assert [(l.in_features, l.out_features) for l in dense] == [(2, 8), (8, 8), (8, 3)]

    def test_cnn_structure(self, tmp_path):
        config = tiny_config(
            tmp_path,
            architecture={"type": "cnn", "conv_channels": [4, 6], "kernel": 3, "padding": "valid", "hidden": [10]},
        )
        # fake an image datasplit
        from crq.datasets import build_split
        from crq.numeric import make_rng

        rng = make_rng(0)
        images = rng.random((40, 1, 8, 8))
        labels = rng.integers(0, 3, size=40)
        data = build_split(images, labels, 16, 0.2)
        net = build_network(config, data)
        convs = [l for l in net.layers if isinstance(l, Conv2d)]
        assert [(c.in_channels, c.out_channels) for c in convs] == [(1, 4), (4, 6)]
        dense = [l for l in net.layers if isinstance(l, Dense)]
        assert dense[0].in_features == 6 * 4 * 4
        assert dense[-1].out_features == 3


class TestStages:
    def test_full_pipeline_produces_artifacts(self, tmp_path):
        config = tiny_config(tmp_path)
        artifacts = run(config)
        for key in (
            "pretrain",
            "pretrain_log",
            "retrain",
            "retrain_log",
            "quantize",
            "dequantized",
            "finetune",
            "finetune_log",
            "eval_json",
            "eval_csv",
            "comparison_csv",
            "comparison_json",
            "curves",
        ):
            assert artifacts[key].exists(), key

    def test_config_hash_embedded(self, tmp_path):
        config = tiny_config(tmp_path, stages=("pretrain", "retrain", "quantize"))
        artifacts = run(config)
        assert load_checkpoint(artifacts["pretrain"]).config_hash == config.config_hash()
        assert load_checkpoint(artifacts["retrain"]).config_hash == config.config_hash()
        model = load_model(artifacts["quantize"])
        assert model.provenance["config_hash"] == config.config_hash()
        assert model.provenance["seed"] == config.seed

    def test_missing_prerequisite_names_stage(self, tmp_path):
        config = tiny_config(tmp_path)
        with pytest.raises(ConfigError, match="run the 'pretrain' stage first"):
            run_stage(config, "retrain")
        with pytest.raises(ConfigError, match="run the 'retrain' stage first"):
            run_stage(config, "quantize")
        with pytest.raises(ConfigError, match="quantize"):
            run_stage(config, "evaluate")

    def test_evaluate_only_with_provided_model(self, tmp_path):
        config = tiny_config(tmp_path, stages=("pretrain", "retrain", "quantize"))
        run(config)
        artifacts = run_stage(config, "evaluate")
        report = json.loads(artifacts["eval_json"].read_text())
        assert "error_rate" in report
        assert report["weight_mse"]  # reference checkpoint was available

    def test_quantized_model_round_trips_through_evaluate(self, tmp_path):
        config = tiny_config(tmp_path)
        artifacts = run(config)
        model = load_model(artifacts["finetune"])
        assert len(model.layers) == 3
        assert model.layers[1].excluded is False

    def test_pipeline_determinism(self, tmp_path):
        config_a = tiny_config(tmp_path, out_dir=str(tmp_path / "a"), seed=42)
        config_b = tiny_config(tmp_path, out_dir=str(tmp_path / "b"), seed=42)
        arts_a = run(config_a)
        arts_b = run(config_b)
        assert set(arts_a) == set(arts_b)
        for key in arts_a:
            assert arts_a[key].read_bytes() == arts_b[key].read_bytes(), key

    def test_checkpoint_resume_is_bitwise(self, tmp_path):
        config = tiny_config(tmp_path)
        data = ingest_dataset(config)
        from crq.numeric import stage_rng

        def fresh_net():
            net = build_network(config, data)
            net.init_params(stage_rng(config.seed, "init"))
            return net

        full, _ = retrain(fresh_net(), data.train, config.train_config(0.0, 8))

        half_a, _ = retrain(fresh_net(), data.train, config.train_config(0.0, 4))
        path = tmp_path / "half.crq"
        save_checkpoint(path, Checkpoint(network=half_a, epoch=4))
        resumed = load_checkpoint(path).network
        resumed, _ = retrain(resumed, data.train, config.train_config(0.0, 4))

        for a, b in zip(full.parameterized(), resumed.parameterized()):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.bias, b.bias)


class TestComparison:
    def test_arms_and_rows(self, tmp_path):
        config = tiny_config(tmp_path)
        data = ingest_dataset(config)
        net = build_network(config, data)
        from crq.numeric import stage_rng

        net.init_params(stage_rng(config.seed, "init"))
        net, logs = retrain(net, data.train, config.train_config(0.0, config.pretrain_epochs), data.val)
        result = run_comparison(config, net, data, logs)
        assert set(result.arms) == {"direct", "lambda0", "crq"}
        rows = result.rows()
        assert [r["method"] for r in rows] == ["direct", "lambda0", "crq"]
        for row in rows:
            assert row["error_drop_percent"] == pytest.approx(
                row["ref_error_percent"] - row["error_percent"]
            )
        assert len(result.arms["crq"].retrain_logs) == config.retrain_epochs
        assert len(result.arms["direct"].retrain_logs) == 0
        assert result.arms["crq"].weight_mse  # included layer measured


class TestEmitReport:
    def logs(self, n, base=0.5):
        return [EpochLog(e + 1, 1.0, base + 0.1 * e, 0.0, ()) for e in range(n)]

    def test_three_series_schema(self, tmp_path):
        warnings = emit_report(
            {"full_precision": self.logs(3), "lambda0": self.logs(2), "crq": self.logs(4)},
            [{"method": "crq", "ref_error_percent": 5.0, "error_percent": 6.0, "error_drop_percent": -1.0}],
            tmp_path,
        )
        assert warnings == []
        lines = (tmp_path / ARTIFACTS["curves"]).read_text().strip().splitlines()
        assert lines[0] == "epoch,train_acc_percent_full_precision,train_acc_percent_lambda0,train_acc_percent_crq"
        assert len(lines) == 1 + 4  # longest series
        assert lines[3].split(",")[2] == ""  # lambda0 exhausted after 2 epochs

    def test_empty_log_warns_and_writes_header(self, tmp_path):
        warnings = emit_report({}, [], tmp_path)
        assert len(warnings) == 4  # three empty series + no comparison rows
        lines = (tmp_path / ARTIFACTS["curves"]).read_text().strip().splitlines()
        assert len(lines) == 1

    def test_curve_values_round_trip(self, tmp_path):
        logs = {"full_precision": self.logs(5), "lambda0": self.logs(5), "crq": self.logs(5)}
        emit_report(logs, [], tmp_path)
        import csv as csvmod

        with open(tmp_path / ARTIFACTS["curves"]) as fh:
            rows = list(csvmod.reader(fh))
        for i, row in enumerate(rows[1:]):
            assert float(row[1]) == 100.0 * logs["full_precision"][i].train_acc
