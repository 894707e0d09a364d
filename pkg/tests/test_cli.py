import json
from pathlib import Path

import numpy as np
import pytest

from cascade_ranker.cli import default_config, main, rerun_from_manifest


@pytest.fixture()
def small_config(tmp_path):
    """Config scaled down for fast CLI runs."""
    cfg = default_config()
    cfg["datagen"].update({"n_queries": 40, "seed": 5})
    cfg["train"].update({"epochs": 3, "seed": 5})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def _gen(tmp_path, small_config, name="data"):
    out = tmp_path / name
    assert main(["datagen", "--config", str(small_config), "--out", str(out)]) == 0
    return out / "dataset.txt"


class TestDatagenCommand:
    def test_output_feeds_train(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        out = tmp_path / "run"
        rc = main(["train", "--config", str(small_config),
                   "--dataset", str(data), "--out", str(out)])
        assert rc == 0
        assert (out / "model.txt").exists()
        assert (out / "trainlog.ndjson").exists()
        assert (out / "manifest.json").exists()
        records = [json.loads(l) for l in (out / "trainlog.ndjson").read_text().splitlines()]
        assert len(records) == 3 and records[0]["epoch"] == 1

    def test_same_seed_byte_identical(self, tmp_path, small_config):
        a = _gen(tmp_path, small_config, "a")
        b = _gen(tmp_path, small_config, "b")
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_fraction_names_field(self, tmp_path, capsys):
        cfg = default_config()
        cfg["datagen"]["positives_ratio"] = 1.5
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        rc = main(["datagen", "--config", str(path), "--out", str(tmp_path / "x")])
        assert rc != 0
        assert "positives_ratio" in capsys.readouterr().err


class TestTrainCommand:
    def test_missing_dataset_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2

    def test_beta_flag_changes_cost(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        outs = {}
        for beta in ("0.0", "10.0"):
            out = tmp_path / f"beta{beta}"
            rc = main(["train", "--config", str(small_config), "--dataset", str(data),
                       "--out", str(out), "--beta", beta, "--epochs", "6",
                       "--objective", "l2"])
            assert rc == 0
            log = [json.loads(l) for l in (out / "trainlog.ndjson").read_text().splitlines()]
            outs[beta] = log[-1]["expected_cost"]
        assert outs["10.0"] < outs["0.0"]

    def test_objective_flag_recorded_in_manifest(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        out = tmp_path / "l1run"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(out), "--objective", "l1"])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["train"]["objective"] == "l1"
        assert manifest["command"] == "train"


class TestEvalCommand:
    def test_compare_table(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        run = tmp_path / "run"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(run)])
        out = tmp_path / "eval"
        rc = main(["eval", "--config", str(small_config), "--dataset", str(data),
                   "--model", str(run / "model.txt"), "--out", str(out), "--compare"])
        assert rc == 0
        text = (out / "eval.txt").read_text()
        rows = {}
        for line in text.splitlines():
            if line.startswith("compare ") and "method" not in line:
                _, name, auc_s, ratio_s = line.split()
                rows[name] = (float(auc_s), float(ratio_s))
        assert set(rows) == {"single-all", "single-cheap", "two-stage",
                             "soft-cascade", "cloes"}
        for name, (auc_v, ratio) in rows.items():
            assert 0.0 <= auc_v <= 1.0
        assert rows["single-all"][1] == pytest.approx(1.0)
        assert (out / "eval_records.ndjson").exists()

    def test_records_are_json_lines(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        run = tmp_path / "run"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(run)])
        out = tmp_path / "eval"
        main(["eval", "--config", str(small_config), "--dataset", str(data),
              "--model", str(run / "model.txt"), "--out", str(out)])
        lines = (out / "eval_records.ndjson").read_text().splitlines()
        assert len(lines) == 40
        rec = json.loads(lines[0])
        assert {"query_id", "expected_final_count", "expected_latency_ms"} <= set(rec)


class TestSimulateCommand:
    def _sim(self, tmp_path, small_config, data, model, traffic, name):
        out = tmp_path / name
        rc = main(["simulate", "--config", str(small_config), "--dataset", str(data),
                   "--model", str(model), "--out", str(out), "--traffic", traffic])
        assert rc == 0
        return dict(line.split() for line in (out / "sim.txt").read_text().splitlines())

    def test_traffic_multiplier_triples_utilization(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        run = tmp_path / "run"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(run)])
        s1 = self._sim(tmp_path, small_config, data, run / "model.txt", "1.0", "s1")
        s3 = self._sim(tmp_path, small_config, data, run / "model.txt", "3.0", "s3")
        # summary text carries 6 significant digits
        assert float(s3["utilization_proxy"]) == pytest.approx(
            3.0 * float(s1["utilization_proxy"]), rel=1e-4)
        assert s1["mean_latency_units"] == s3["mean_latency_units"]
        assert "fraction_above_latency_ceiling" in s1

    def test_nonpositive_traffic_rejected(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        run = tmp_path / "run"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(run)])
        rc = main(["simulate", "--config", str(small_config), "--dataset", str(data),
                   "--model", str(run / "model.txt"), "--out", str(tmp_path / "s"),
                   "--traffic", "0"])
        assert rc == 2


class TestGradcheckCommand:
    def test_passes_by_default(self, tmp_path, small_config):
        out = tmp_path / "gc"
        rc = main(["gradcheck", "--config", str(small_config), "--out", str(out)])
        assert rc == 0
        assert "passed True" in (out / "gradcheck.txt").read_text()

    def test_l3_objective_path(self, tmp_path, small_config):
        out = tmp_path / "gc3"
        rc = main(["gradcheck", "--config", str(small_config), "--out", str(out),
                   "--objective", "l3"])
        assert rc == 0

    def test_corrupted_gradient_fails(self, tmp_path, small_config, capsys):
        out = tmp_path / "gcbad"
        rc = main(["gradcheck", "--config", str(small_config), "--out", str(out),
                   "--corrupt-gradient"])
        assert rc == 1
        assert "FAILED" in capsys.readouterr().err


class TestManifestReproducibility:
    def test_datagen_rerun_byte_identical(self, tmp_path, small_config):
        first = tmp_path / "d1"
        main(["datagen", "--config", str(small_config), "--out", str(first)])
        second = tmp_path / "d2"
        rc = rerun_from_manifest(first / "manifest.json", second)
        assert rc == 0
        assert (first / "dataset.txt").read_bytes() == (second / "dataset.txt").read_bytes()

    def test_train_rerun_byte_identical(self, tmp_path, small_config):
        data = _gen(tmp_path, small_config)
        first = tmp_path / "t1"
        main(["train", "--config", str(small_config), "--dataset", str(data),
              "--out", str(first)])
        second = tmp_path / "t2"
        rc = rerun_from_manifest(first / "manifest.json", second)
        assert rc == 0
        assert (first / "model.txt").read_bytes() == (second / "model.txt").read_bytes()
