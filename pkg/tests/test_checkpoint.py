import json
import struct

import numpy as np
import pytest

from dropcompact.checkpoint import (
    Checkpoint,
    CheckpointError,
    export_text,
    load_checkpoint,
    save_checkpoint,
)
from dropcompact.network import init_mlp
from dropcompact.retention import RetentionParams
from dropcompact.trainer import TrainConfig


@pytest.fixture
def ckpt():
    params = init_mlp((6, 5, 3), "sigmoid", seed=4)
    pi = RetentionParams([np.ones(6), np.full(5, 0.25)])
    return Checkpoint(
        params=params,
        pi=pi,
        config=TrainConfig(layer_dims=(6, 5, 3)).to_dict(),
        seed=17,
        epoch=9,
        best_metrics={"epoch": 7, "dev_err": 4.5, "dev_loss": 0.21},
        compaction_history=[{"mode": "prune", "threshold": 0.5}],
    )


class TestRoundTrip:
    def test_exact_values_restored(self, ckpt, tmp_path):
        path = tmp_path / "c.dckp"
        save_checkpoint(str(path), ckpt)
        loaded = load_checkpoint(str(path))
        for a, b in zip(loaded.params.weights, ckpt.params.weights):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.pi.layers, ckpt.pi.layers):
            assert np.array_equal(a, b)
        assert loaded.config == ckpt.config
        assert loaded.seed == 17 and loaded.epoch == 9
        assert loaded.best_metrics == ckpt.best_metrics
        assert loaded.compaction_history == ckpt.compaction_history
        assert loaded.params.hidden_activations == ("sigmoid",)

    def test_resave_byte_identical(self, ckpt, tmp_path):
        p1, p2 = tmp_path / "a.dckp", tmp_path / "b.dckp"
        save_checkpoint(str(p1), ckpt)
        save_checkpoint(str(p2), load_checkpoint(str(p1)))
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_rejected(self, ckpt, tmp_path):
        path = tmp_path / "c.dckp"
        save_checkpoint(str(path), ckpt)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(str(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.dckp"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_payload_rejected(self, ckpt, tmp_path):
        path = tmp_path / "c.dckp"
        save_checkpoint(str(path), ckpt)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(path))


class TestTextExport:
    def test_hex_floats_roundtrip(self, ckpt):
        doc = json.loads(export_text(ckpt))
        arr = doc["arrays"]["weight_0"]
        values = np.array([float.fromhex(v) for v in arr["values"]]).reshape(arr["shape"])
        assert np.array_equal(values, ckpt.params.weights[0])
        assert doc["config"] == ckpt.config
