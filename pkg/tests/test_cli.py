"""
End-to-end tests for the confidence-iqn command line on an MNIST-format fixture.
"""

import pandas as pd
import pytest

from confidence_iqn.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from tests.conftest import write_mnist_fixture

TRAIN_ARGS = ["--seed", "7", "--epochs", "1", "--estimator-epochs", "1", "--batch-size", "32", "--n-taus", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_dir = write_mnist_fixture(root / "data")
    runs_dir = root / "runs"
    code = main(["train", *TRAIN_ARGS, "--data-dir", str(data_dir), "--runs-dir", str(runs_dir)])
    assert code == EXIT_OK
    return data_dir, runs_dir


def _locations(workspace) -> list[str]:
    data_dir, runs_dir = workspace
    return ["--data-dir", str(data_dir), "--runs-dir", str(runs_dir)]


class TestUsage:
    def test_unknown_dataset(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "imagenet", "--seed", "1"])
        assert exc.value.code == EXIT_USAGE

    def test_hist_needs_a_target(self):
        with pytest.raises(SystemExit) as exc:
            main(["hist", "--seed", "1"])
        assert exc.value.code == EXIT_USAGE

    def test_train_without_seed(self, mnist_dir, capsys):
        code = main(["train", "--data-dir", str(mnist_dir), "--epochs", "1"])
        assert code == EXIT_USAGE
        assert "seed is required" in capsys.readouterr().err

    def test_evaluate_unnamed_run(self, capsys):
        assert main(["evaluate"]) == EXIT_USAGE
        assert "--run-name or --seed" in capsys.readouterr().err

    def test_missing_dataset_files(self, tmp_path, capsys):
        code = main(["train", "--seed", "1", "--data-dir", str(tmp_path / "empty")])
        assert code == EXIT_FAILURE
        assert "not found" in capsys.readouterr().err


@pytest.mark.slow
class TestTrain:
    def test_run_directory(self, workspace):
        _, runs_dir = workspace
        run_dir = runs_dir / "mnist-seed7"
        for name in ("classifier.ckpt", "iqn.ckpt", "scalar.ckpt", "metrics.csv", "run.json", "config"):
            assert (run_dir / name).is_file(), name
        metrics = pd.read_csv(run_dir / "metrics.csv")
        assert list(metrics.columns) == ["phase", "epoch", "loss", "accuracy", "lr"]

    def test_saved_config_reproduces_run(self, workspace, tmp_path):
        _, runs_dir = workspace
        original = runs_dir / "mnist-seed7"
        code = main(["train", "--config", str(original / "config"), "--runs-dir", str(tmp_path / "again")])
        assert code == EXIT_OK
        rerun = tmp_path / "again" / "mnist-seed7"
        assert (rerun / "metrics.csv").read_bytes() == (original / "metrics.csv").read_bytes()


@pytest.mark.slow
class TestEvaluate:
    def test_writes_tables(self, workspace, capsys):
        code = main(["evaluate", "--seed", "7", "--num-taus", "8", *_locations(workspace)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "Loss statistics" in out
        assert "Accuracy (%)" in out

        run_dir = workspace[1] / "mnist-seed7"
        for name in ("stats.csv", "filter_report.csv", "accuracy.csv", "coverage.csv"):
            assert (run_dir / name).is_file(), name
        accuracy = pd.read_csv(run_dir / "accuracy.csv")
        assert list(accuracy["model"]) == ["Dropout", "IQN", "Scalar"]

    def test_missing_run(self, workspace, capsys):
        code = main(["evaluate", "--seed", "99", *_locations(workspace)])
        assert code == EXIT_FAILURE
        assert "not found" in capsys.readouterr().err


@pytest.mark.slow
class TestHist:
    def test_zeros_probe(self, workspace):
        code = main(["hist", "--seed", "7", "--zeros", "--bins", "5", "--num-taus", "50", *_locations(workspace)])
        assert code == EXIT_OK
        frame = pd.read_csv(workspace[1] / "mnist-seed7" / "hist_zeros.csv")
        assert list(frame.columns) == ["kind", "bin_left", "bin_right", "count"]
        assert list(frame["kind"]) == ["bin"] * 5 + ["mean_marker"]
        assert frame["count"].sum() == 50

    def test_repeated_ids(self, workspace):
        code = main(["hist", "--seed", "7", "--id", "0", "--id", "1", "--num-taus", "20", *_locations(workspace)])
        assert code == EXIT_OK
        run_dir = workspace[1] / "mnist-seed7"
        assert (run_dir / "hist_0.csv").is_file()
        assert (run_dir / "hist_1.csv").is_file()

    def test_id_out_of_range(self, workspace, capsys):
        code = main(["hist", "--seed", "7", "--id", "4800", "--num-taus", "20", *_locations(workspace)])
        assert code == EXIT_FAILURE
        assert "out of range" in capsys.readouterr().err


class TestOracleCommand:
    def test_small_suite(self, capsys):
        assert main(["oracle-test", "--samples", "20000"]) == EXIT_OK
        assert "13/13 oracle cases passed" in capsys.readouterr().out
