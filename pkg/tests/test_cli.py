import json

import pytest

from conftest import REFERENCE_CONFIG
from dualcan import cli, datagen
from dualcan.errors import ConfigError

FAST_CONFIG = """
[domain]
num_classes = 3
feature_dim = 2
samples_per_class = 40
class_spread = 0.5
shift_rotation = 0.5235987755982988
seed = 7

[noise]
p_noise = 0.4
kind = mixed
feature_noise_sigma = 0.75
seed = 11

[train]
max_epochs = 8
warmup_epochs = 2
batch_size = 32
seed = 3

[sweep]
levels = 0.0 0.4
methods = full no_correction
seeds = 0 1

[ablation]
seeds = 0 1
"""


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "task.ini"
    path.write_text(FAST_CONFIG)
    return path


class TestConfigLoading:
    def test_reference_config_parses(self):
        config = cli.load_config(REFERENCE_CONFIG)
        assert config.domain.num_classes == 3
        assert config.noise.kind == datagen.MIXED
        assert config.train.lr == 2e-3
        assert config.train.separation_ratio == 0.08

    def test_missing_required_field_names_it(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[domain]\nnum_classes = 3\n[noise]\np_noise = 0.2\nkind = mixed\n")
        with pytest.raises(ConfigError) as err:
            cli.load_config(path)
        assert "feature_dim" in str(err.value)

    def test_bad_value_names_field(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(FAST_CONFIG.replace("p_noise = 0.4", "p_noise = lots"))
        with pytest.raises(ConfigError) as err:
            cli.load_config(path)
        assert "p_noise" in str(err.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cli.load_config(tmp_path / "absent.ini")

    def test_seed_override_reseeds_all_sections(self, fast_config):
        config = cli.load_config(fast_config, seed_override=99)
        assert config.domain.seed == 99
        assert config.noise.seed == 99
        assert config.train.seed == 99


class TestGen:
    def test_outputs_and_digests(self, fast_config, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli.cmd_gen(fast_config, out) == 0
        for name in ("source.dset", "target.dset", "source.csv", "target.csv", "manifest.json"):
            assert (out / name).exists()
        printed = capsys.readouterr().out
        assert "source:" in printed and "target:" in printed
        source = datagen.load_dataset(out / "source.dset")
        assert len(source) == 120
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert set(manifest["dataset_digests"]) == {"source", "target"}

    def test_rerun_identical_digests(self, fast_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.cmd_gen(fast_config, out_a)
        cli.cmd_gen(fast_config, out_b)
        assert (out_a / "source.dset").read_bytes() == (out_b / "source.dset").read_bytes()
        assert (out_a / "target.dset").read_bytes() == (out_b / "target.dset").read_bytes()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[domain]\nnum_classes = 3\n")
        code = cli.main(["gen", "--config", str(path), "--out-dir", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_creates_out_dir(self, fast_config, tmp_path):
        nested = tmp_path / "deep" / "nested" / "dir"
        assert cli.cmd_gen(fast_config, nested) == 0
        assert nested.is_dir()


class TestTrain:
    def test_end_to_end_outputs(self, fast_config, tmp_path):
        data, out = tmp_path / "data", tmp_path / "run"
        cli.cmd_gen(fast_config, data)
        assert cli.cmd_train(fast_config, data, out) == 0
        metrics = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(metrics) == 1 + 8  # header + max_epochs rows
        assert (out / "model.ckpt").exists()
        assert (out / "nic_report.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["aborted"] is False
        assert manifest["epochs_completed"] == 8

    def test_rerun_byte_identical_metrics(self, fast_config, tmp_path):
        data = tmp_path / "data"
        cli.cmd_gen(fast_config, data)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.cmd_train(fast_config, data, out_a)
        cli.cmd_train(fast_config, data, out_b)
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "nic_report.csv").read_bytes() == (out_b / "nic_report.csv").read_bytes()

    def test_missing_data_dir_is_io_error(self, fast_config, tmp_path):
        code = cli.main([
            "train", "--config", str(fast_config),
            "--data-dir", str(tmp_path / "nowhere"), "--out-dir", str(tmp_path / "o"),
        ])
        assert code == cli.EXIT_IO

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_exit_code_with_partial_outputs(self, tmp_path):
        config = tmp_path / "diverge.ini"
        config.write_text(FAST_CONFIG.replace("max_epochs = 8", "max_epochs = 30")
                          .replace("[train]", "[train]\nlr = 1e9"))
        data = tmp_path / "data"
        cli.cmd_gen(config, data)
        out = tmp_path / "run"
        code = cli.cmd_train(config, data, out)
        assert code == cli.EXIT_NUMERIC
        assert (out / "metrics.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["aborted"] is True


class TestSweepAndAblate:
    def test_sweep_outputs(self, fast_config, tmp_path):
        out = tmp_path / "sweep"
        code = cli.cmd_sweep(fast_config, out)
        assert code == 0
        cells = (out / "sweep_cells.csv").read_text().strip().splitlines()
        assert len(cells) == 1 + 2 * 2 * 2  # levels x methods x seeds
        assert (out / "sweep_summary.csv").exists()
        assert (out / "sweep_assertions.txt").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failing_cells_exit_partial(self, tmp_path):
        config = tmp_path / "diverge.ini"
        config.write_text(
            FAST_CONFIG.replace("max_epochs = 8", "max_epochs = 30")
            .replace("[train]", "[train]\nlr = 1e9")
            .replace("levels = 0.0 0.4", "levels = 0.4")
            .replace("methods = full no_correction", "methods = full")
            .replace("seeds = 0 1", "seeds = 0")
        )
        out = tmp_path / "sweep"
        assert cli.cmd_sweep(config, out) == cli.EXIT_PARTIAL
        cells = (out / "sweep_cells.csv").read_text().strip().splitlines()
        assert cells[1].split(",")[4] == "1"  # failed flag recorded

    def test_ablation_outputs_five_rows(self, fast_config, tmp_path):
        out = tmp_path / "abl"
        code = cli.cmd_ablate(fast_config, out)
        assert code in (0, cli.EXIT_PARTIAL)
        table = (out / "ablation_table.csv").read_text().strip().splitlines()
        assert len(table) == 6
        report = (out / "ablation_assertions.txt").read_text()
        assert "[PASS]" in report or "[FAIL]" in report


class TestReport:
    def test_assembles_curves_and_summary(self, fast_config, tmp_path):
        data, run = tmp_path / "data", tmp_path / "run"
        cli.cmd_gen(fast_config, data)
        cli.cmd_train(fast_config, data, run)
        out = tmp_path / "report"
        assert cli.cmd_report(run, out) == 0
        assert (out / "correction_curves.csv").exists()
        text = (out / "report.txt").read_text()
        assert "metrics.csv" in text

    def test_empty_dir_is_io_error(self, tmp_path):
        assert cli.cmd_report(tmp_path / "none", tmp_path / "out") == cli.EXIT_IO
