import json

import pytest
import numpy as np

from kspace_loupe.dataset import build_dataset
from kspace_loupe.kspace_io import BadMagic, KspaceFormatError, Truncated
from kspace_loupe.numerics import spawn_rng, uniform
from kspace_loupe.trainer import (
    BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT, PATTERN_NAME, Checkpoint, TrainingError,
    init_params, learned_topk_mask, load_checkpoint, probability_pattern, sample_gradient,
    save_checkpoint, train,
)


def test_init_params_is_seeded(tiny_config):
    first = init_params(tiny_config)
    assert first.identical_to(init_params(tiny_config))
    assert first.names()[-1] == PATTERN_NAME
    assert first[PATTERN_NAME].shape == (16, 16)
    assert np.all(np.abs(first[PATTERN_NAME]) <= 1.0)


def test_learned_mask_meets_budget(tiny_config):
    params = init_params(tiny_config)
    assert probability_pattern(params, tiny_config).mean() == pytest.approx(0.25, abs=1e-10)
    assert learned_topk_mask(params, tiny_config).sum() == 64


@pytest.mark.parametrize("mode", ["BS", "AS"])
def test_sample_gradient_reaches_every_group(tiny_config, small_sample, mode):
    config = tiny_config.with_overrides({"train.mode": mode})
    z = uniform(spawn_rng(60, 0), (16, 16))
    loss, grads = sample_gradient(init_params(config), small_sample, config, z)
    assert np.isfinite(loss) and loss > 0
    assert set(grads) == set(init_params(config).names())
    for name in ("dc.rho", PATTERN_NAME, "denoiser.conv0.weight"):
        assert np.any(grads[name] != 0), name


def test_zero_epochs_saves_the_initialization(tiny_config, tiny_dataset, tmp_path):
    config = tiny_config.with_overrides({"train.epochs": 0})
    result = train(config, checkpoint_dir=tmp_path / "ckpt")
    assert result.best.epoch == 0 and result.history == []
    assert load_checkpoint(result.best_path).params.identical_to(init_params(config))
    assert load_checkpoint(result.last_path).params.identical_to(init_params(config))


@pytest.mark.parametrize("mode", ["BS", "AS"])
def test_one_epoch_moves_the_pattern(tiny_config, tiny_dataset, tmp_path, mode):
    config = tiny_config.with_overrides({"train.mode": mode})
    result = train(config, checkpoint_dir=tmp_path / "ckpt")
    before = init_params(config)[PATTERN_NAME]
    assert np.linalg.norm(result.last.params[PATTERN_NAME] - before) > 0
    assert result.last.epoch == 1
    history = json.loads((tmp_path / "ckpt" / HISTORY_FILE).read_text())
    assert [h["epoch"] for h in history] == [1]
    assert np.isfinite(history[0]["train_loss"])
    assert (tmp_path / "ckpt" / BEST_CHECKPOINT).is_file()
    assert (tmp_path / "ckpt" / LAST_CHECKPOINT).is_file()


def test_training_is_bit_reproducible(tiny_config, tiny_dataset, tmp_path):
    train(tiny_config, checkpoint_dir=tmp_path / "a")
    train(tiny_config, checkpoint_dir=tmp_path / "b")
    for name in (BEST_CHECKPOINT, LAST_CHECKPOINT):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_image_size_must_match_dataset(tiny_config, tiny_dataset, tmp_path):
    config = tiny_config.with_overrides({"data.height": 32})
    with pytest.raises(TrainingError, match="16x16"):
        train(config, checkpoint_dir=tmp_path / "ckpt")


def test_training_needs_samples(tiny_config, tmp_path):
    config = tiny_config.with_overrides({"data.n_train": 0})
    build_dataset(config.data, 11, tmp_path / "empty")
    with pytest.raises(TrainingError, match="no training samples"):
        train(config, manifest_path=tmp_path / "empty" / "manifest.json",
              checkpoint_dir=tmp_path / "ckpt")


class TestCheckpoint:
    def test_round_trip(self, tiny_config, tmp_path):
        ckpt = Checkpoint(init_params(tiny_config), tiny_config, epoch=3, val_psnr=27.5)
        save_checkpoint(tmp_path / "c.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.params.identical_to(ckpt.params)
        assert loaded.params.names() == ckpt.params.names()
        assert loaded.config == tiny_config
        assert loaded.config_hash == ckpt.config_hash
        assert (loaded.epoch, loaded.val_psnr) == (3, 27.5)

    def test_missing_validation_score(self, tiny_config, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", Checkpoint(init_params(tiny_config), tiny_config, 0))
        assert load_checkpoint(tmp_path / "c.ckpt").val_psnr is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"KSD1" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tiny_config, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, Checkpoint(init_params(tiny_config), tiny_config, 0))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(Truncated):
            load_checkpoint(path)
        path.write_bytes(data[:20])
        with pytest.raises(Truncated):
            load_checkpoint(path)

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(b"KCK1" + (5).to_bytes(4, "little") + b"{oops")
        with pytest.raises(KspaceFormatError, match="malformed"):
            load_checkpoint(path)
