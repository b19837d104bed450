import numpy as np
import pytest
import torch

from sparsenvs.checkpoint import CheckpointError, load_weights, read_checkpoint, save_checkpoint
from sparsenvs.codec import VQCodec
from sparsenvs.config import PipelineConfig, apply_overrides, load_config, parse_set_flags, save_config


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    torch.manual_seed(0)
    model = VQCodec(16, 4, 4, 8)
    path = save_checkpoint(tmp_path / "c.npz", "codec", model, {"k": 1}, step=7, extra={"note": "x"})
    ckpt = read_checkpoint(path)
    assert (ckpt.module, ckpt.step, ckpt.config, ckpt.extra) == ("codec", 7, {"k": 1}, {"note": "x"})
    torch.manual_seed(1)
    other = load_weights(VQCodec(16, 4, 4, 8), ckpt, "codec")
    for (k, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), k


def test_wrong_module_rejected(tmp_path):
    save_checkpoint(tmp_path / "c.npz", "codec", VQCodec(16, 4, 4, 8), {})
    with pytest.raises(CheckpointError):
        load_weights(VQCodec(16, 4, 4, 8), read_checkpoint(tmp_path / "c.npz"), "generator")


def test_missing_and_foreign_files(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "none.npz")
    np.savez(tmp_path / "plain.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "plain.npz")


def test_shape_mismatch_rejected(tmp_path):
    save_checkpoint(tmp_path / "c.npz", "codec", VQCodec(16, 4, 4, 8), {})
    with pytest.raises(RuntimeError):
        load_weights(VQCodec(32, 4, 4, 8), read_checkpoint(tmp_path / "c.npz"))


def test_overrides_are_typed():
    cfg = apply_overrides(PipelineConfig(), parse_set_flags(["geometry.radius=0.25", "codec.codebook_size=64", "seed=3"]))
    assert cfg.geometry.radius == 0.25 and cfg.codec.codebook_size == 64 and cfg.seed == 3


def test_unknown_override_rejected():
    with pytest.raises(KeyError):
        apply_overrides(PipelineConfig(), {"geometry.nope": 1})


def test_bad_set_flag():
    with pytest.raises(ValueError):
        parse_set_flags(["radius"])


def test_config_file_round_trip(tmp_path):
    cfg = apply_overrides(PipelineConfig(), {"generator.n_probed": 5})
    save_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()


def test_yaml_config_with_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 4\ncodec:\n  hidden: 16\n")
    cfg = load_config(tmp_path / "c.yaml", {"codec.hidden": "32"})
    assert cfg.seed == 4 and cfg.codec.hidden == 32
