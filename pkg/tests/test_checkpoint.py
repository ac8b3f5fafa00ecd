import json
import struct

import pytest
import torch

from dsr.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_model,
    restore_rng,
    save_checkpoint,
)
from dsr.config import profile_config
from dsr.networks import build_model


@pytest.fixture()
def saved(tmp_path, tiny_config):
    model = build_model(tiny_config.model, seed=3)
    model.stage_completed = 1
    model.set_stage_trainable(2)
    import numpy as np

    rng = np.random.default_rng(123)
    rng.random(10)  # advance the stream so the state is nontrivial
    path = save_checkpoint(model, tmp_path / "model.ckpt", config=tiny_config, rng=rng)
    return model, path


class TestRoundTrip:
    def test_parameters_bitwise_identical(self, saved):
        model, path = saved
        loaded, checkpoint = load_model(path)
        for key, value in model.state_dict().items():
            assert torch.equal(value, loaded.state_dict()[key]), key
        assert checkpoint.stage_completed == 1

    def test_stage_flags_preserved(self, saved):
        model, path = saved
        loaded, checkpoint = load_model(path)
        assert loaded.stage_flags == model.stage_flags
        assert checkpoint.stage_flags["encoder"] == "frozen"
        assert checkpoint.stage_flags["detector"] == "trainable"

    def test_config_snapshot_round_trips(self, saved, tiny_config):
        _, path = saved
        checkpoint = load_checkpoint(path)
        assert checkpoint.config.to_dict() == tiny_config.to_dict()

    def test_save_load_save_identical_bytes(self, saved, tiny_config, tmp_path):
        _, path = saved
        first = path.read_bytes()
        loaded, checkpoint = load_model(path)
        rng = restore_rng(checkpoint)  # restores torch + numpy streams
        second_path = save_checkpoint(loaded, tmp_path / "resaved.ckpt", config=checkpoint.config, rng=rng)
        assert second_path.read_bytes() == first

    def test_loads_into_stage2_trainer(self, saved, small_corpus):
        from dsr.training import train_stage2

        _, path = saved
        model, checkpoint = load_model(path)
        cfg = checkpoint.config
        cfg.stage2.iterations = 1
        cfg.stage2.log_interval = 1
        result = train_stage2(small_corpus, model, cfg, seed=0)
        assert result.model.stage_completed == 2


class TestCorruption:
    def test_bad_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(bad)

    def test_truncated_payload_rejected(self, saved, tmp_path):
        _, path = saved
        blob = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(blob[: len(blob) - 1000])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(clipped)

    def test_truncated_header_rejected(self, saved, tmp_path):
        _, path = saved
        blob = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(blob[:20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(clipped)

    def test_version_mismatch_rejected(self, saved, tmp_path):
        _, path = saved
        blob = path.read_bytes()
        header_len = struct.unpack_from("<Q", blob, len(MAGIC))[0]
        start = len(MAGIC) + 8
        header = json.loads(blob[start : start + header_len])
        header["format_version"] = FORMAT_VERSION + 1
        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        patched = tmp_path / "patched.ckpt"
        patched.write_bytes(MAGIC + struct.pack("<Q", len(new_header)) + new_header + blob[start + header_len :])
        with pytest.raises(CheckpointError, match="format version"):
            load_checkpoint(patched)

    def test_garbage_header_rejected(self, saved, tmp_path):
        _, path = saved
        blob = path.read_bytes()
        patched = tmp_path / "garbage.ckpt"
        patched.write_bytes(MAGIC + struct.pack("<Q", 16) + b"not json at all!" + blob[32:])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(patched)


def test_atomic_write_leaves_no_temp_files(saved, tmp_path):
    _, path = saved
    leftovers = [p for p in path.parent.iterdir() if p.suffix == ".tmp"]
    assert not leftovers
