import json

import pytest

from kspace_loupe.config import RunConfig, load_preset
from kspace_loupe.dataset import MANIFEST_NAME, build_dataset
from kspace_loupe.experiments import compare_patterns, compare_sampling, markdown_table
from kspace_loupe.trainer import Checkpoint, init_params
from kspace_loupe.types import ReconMethod


def test_compare_patterns_rows_and_files(tiny_config, tiny_dataset, tmp_path):
    ckpt = Checkpoint(init_params(tiny_config), tiny_config, 0)
    rows = compare_patterns(tiny_config, ckpt, tiny_dataset, tmp_path / "cmp",
                            methods=(ReconMethod.ZF, ReconMethod.TV))
    assert [(r.method, r.pattern) for r in rows] == [
        ("zf", "learned-topk"), ("zf", "vd"), ("tv", "learned-topk"), ("tv", "vd")]
    payload = json.loads((tmp_path / "cmp" / "compare_patterns.json").read_text())
    assert payload["config_hash"] == tiny_config.config_hash()
    assert len(payload["rows"]) == 4
    table = (tmp_path / "cmp" / "compare_patterns.md").read_text()
    assert table == markdown_table(rows)
    assert (tmp_path / "cmp" / "reports" / "tv_vd.csv").is_file()


def test_compare_sampling_trains_both_variants(tiny_config, tiny_dataset, tmp_path):
    rows = compare_sampling(tiny_config, tiny_dataset, tmp_path / "cmp")
    assert [r.label for r in rows] == ["MoDL+BS", "MoDL+AS", "zero-filled"]
    assert all(r.pattern == "learned-topk" for r in rows)
    assert (tmp_path / "cmp" / "bs" / "best.ckpt").is_file()
    assert (tmp_path / "cmp" / "as" / "best.ckpt").is_file()
    assert (tmp_path / "cmp" / "compare_sampling.md").is_file()


def test_markdown_table_layout(tiny_config, tiny_dataset, tmp_path):
    ckpt = Checkpoint(init_params(tiny_config), tiny_config, 0)
    rows = compare_patterns(tiny_config, ckpt, tiny_dataset, tmp_path / "cmp",
                            methods=(ReconMethod.ZF,))
    lines = markdown_table(rows).splitlines()
    assert lines[0].startswith("| Setting | Method | Pattern")
    assert len(lines) == 4
    assert lines[2].startswith("| learned | zf | learned-topk |")


@pytest.mark.slow
def test_trained_reconstruction_beats_zero_filling(tmp_path):
    config = RunConfig.from_dict({
        "data": {"height": 32, "width": 32, "n_coils": 4, "n_train": 8, "n_val": 2, "n_test": 4,
                 "output_dir": str(tmp_path / "data")},
        "pattern": {"gamma": 0.3, "calib_size": 4},
        "model": {"n_blocks": 3, "n_cg": 8, "n_cg_eval": 15, "channels": 8},
        "train": {"epochs": 10, "lr": 3e-3, "manifest": str(tmp_path / "data" / MANIFEST_NAME)},
    })
    build_dataset(config.data, config.seeds.data)
    rows = compare_sampling(config, out_dir=tmp_path / "cmp")
    by_label = {r.label: r.report for r in rows}
    assert by_label["MoDL+BS"].psnr_mean > by_label["zero-filled"].psnr_mean


@pytest.fixture(scope="module")
def desk_comparison(tmp_path_factory):
    """BS and AS trained at desk scale (64x64, 4 coils, gamma 0.1, K=5, 50 epochs)."""
    root = tmp_path_factory.mktemp("desk")
    config = load_preset("desk").with_overrides({
        "data.output_dir": str(root / "data"),
        "train.manifest": str(root / "data" / MANIFEST_NAME),
    })
    build_dataset(config.data, config.seeds.data)
    rows = compare_sampling(config, out_dir=root / "sampling")
    return config, root, {r.label: r.report for r in rows}


@pytest.mark.slow
def test_binary_sampling_matches_or_beats_relaxed_sampling(desk_comparison):
    _, _, reports = desk_comparison
    assert reports["MoDL+BS"].psnr_mean >= reports["MoDL+AS"].psnr_mean - 0.1
    assert reports["MoDL+BS"].psnr_mean >= reports["zero-filled"].psnr_mean + 6.0
    assert reports["MoDL+AS"].psnr_mean >= reports["zero-filled"].psnr_mean + 6.0


@pytest.mark.slow
def test_learned_pattern_matches_or_beats_variable_density(desk_comparison):
    config, root, _ = desk_comparison
    rows = compare_patterns(config, root / "sampling" / "bs" / "best.ckpt",
                            out_dir=root / "patterns", methods=(ReconMethod.MODL, ReconMethod.TV))
    psnr = {(r.method, r.pattern): r.report.psnr_mean for r in rows}
    for method in ("modl", "tv"):
        assert psnr[(method, "learned-topk")] >= psnr[(method, "vd")] - 0.1
