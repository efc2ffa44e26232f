import json

import pytest
from click.testing import CliRunner

from kspace_loupe import __version__
from kspace_loupe.__main__ import cli
from kspace_loupe.kspace_io import read_tensor


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_path(tiny_config, tmp_path):
    path = tmp_path / "tiny.json"
    tiny_config.save(path)
    return path


def test_no_command_prints_help(runner):
    result = runner.invoke(cli, [])
    assert result.exit_code == 2
    assert "Usage" in result.output


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_invalid_config_is_a_usage_error(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"data": {"depth": 1}}')
    result = runner.invoke(cli, ["--config", str(path), "gen-data"])
    assert result.exit_code == 2
    assert "Error:" in result.output


def test_bad_setting_value(runner, config_path):
    result = runner.invoke(cli, ["-c", str(config_path), "--set", "pattern.gamma=2", "gen-data"])
    assert result.exit_code == 2
    assert "gamma" in result.output


def test_malformed_setting(runner):
    result = runner.invoke(cli, ["--set", "gamma", "gen-data"])
    assert result.exit_code == 2


def test_gradcheck_ops_suite(runner):
    result = runner.invoke(cli, ["gradcheck", "--suite", "ops"])
    assert result.exit_code == 0, result.output
    assert "ops" in result.output and "ok" in result.output


def test_gen_data_respects_seed_override(runner, config_path, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(cli, ["-c", str(config_path), "--seed", "5", "6", "7",
                                     "gen-data", "-o", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 5
    rel = manifest["entries"][0]["path"]
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_vd_pattern(runner, config_path, tmp_path):
    out = tmp_path / "vd"
    result = runner.invoke(cli, ["-c", str(config_path), "vd-pattern", "--gamma", "0.3", "-o", str(out)])
    assert result.exit_code == 0, result.output
    mask = read_tensor(out / "vd_mask.kst")
    assert mask.shape == (16, 16)
    assert abs(read_tensor(out / "vd_prob.kst").mean() - 0.3) < 1e-6


def test_train_eval_export_recon(runner, config_path, tiny_config, tmp_path):
    assert runner.invoke(cli, ["-c", str(config_path), "gen-data"]).exit_code == 0
    ckpt_dir = tmp_path / "ckpt"
    result = runner.invoke(cli, ["-c", str(config_path), "train", "-o", str(ckpt_dir),
                                 "--mode", "AS", "--epochs", "1"])
    assert result.exit_code == 0, result.output
    best = ckpt_dir / "best.ckpt"
    assert best.is_file()

    reports = tmp_path / "reports"
    result = runner.invoke(cli, ["eval", "-k", str(best), "--method", "modl", "-o", str(reports)])
    assert result.exit_code == 0, result.output
    assert (reports / "modl_learned-topk.csv").is_file()
    summary = json.loads((reports / "modl_learned-topk.json").read_text())
    assert summary["checkpoint"] == str(best)

    patterns = tmp_path / "patterns"
    result = runner.invoke(cli, ["export-pattern", str(best), "-o", str(patterns)])
    assert result.exit_code == 0, result.output
    assert read_tensor(patterns / "learned_mask.kst").sum() == 64

    sample = tmp_path / "data" / "test" / "sample_0000.ksd"
    out = tmp_path / "recon.kst"
    result = runner.invoke(cli, ["recon", str(sample), "-k", str(best), "-o", str(out),
                                 "--png", str(tmp_path / "recon.png"),
                                 "--error-png", str(tmp_path / "error.png")])
    assert result.exit_code == 0, result.output
    assert "PSNR" in result.output
    assert read_tensor(out).shape == (16, 16)
    assert (tmp_path / "recon.png").is_file() and (tmp_path / "error.png").is_file()


def test_modl_without_checkpoint_fails(runner, config_path, tiny_dataset):
    result = runner.invoke(cli, ["-c", str(config_path), "eval", "--pattern", "vd", "--method", "modl"])
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_missing_sample_file(runner, tmp_path):
    result = runner.invoke(cli, ["recon", str(tmp_path / "absent.ksd"), "-o", str(tmp_path / "x.kst")])
    assert result.exit_code == 2


def test_repeated_runs_are_byte_identical(runner, config_path, tmp_path):
    names = ("checkpoints/best.ckpt", "checkpoints/last.ckpt", "reports/modl_learned-topk.csv")
    outputs = []
    for _ in range(2):
        for args in (["gen-data"], ["train", "--mode", "BS", "--epochs", "2"],
                     ["eval", "-k", str(tmp_path / "checkpoints" / "best.ckpt"), "--method", "modl"]):
            result = runner.invoke(cli, ["-c", str(config_path)] + args)
            assert result.exit_code == 0, result.output
        outputs.append({name: (tmp_path / name).read_bytes() for name in names})
    assert outputs[0] == outputs[1]
