import numpy as np
import pytest
import torch

from sdg.checkpoint import (CheckpointMismatchError, config_hash,
                            load_checkpoint, read_header, save_checkpoint)
from sdg.model import SDGConfig, SDGModel


def make_model(**kw):
    cfg = dict(L=4, d=8, K=4, n_layers=1, heads=2, dropout=0.0)
    cfg.update(kw)
    return SDGModel(SDGConfig(**cfg), num_nodes=9, seed=5)


class TestCheckpoint:
    def test_roundtrip_parameters_bit_identical(self, tmp_path):
        m = make_model()
        p = tmp_path / "m.sdg"
        save_checkpoint(m, p, extra={"seed": 5})
        m2, header = load_checkpoint(p)
        assert header["extra"]["seed"] == 5
        assert m2.num_nodes == 9
        assert m2.config == m.config
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1

    def test_schedule_metadata_and_rebuild(self, tmp_path):
        m = make_model(schedule_kind="linear", K=6)
        p = tmp_path / "m.sdg"
        save_checkpoint(m, p)
        header = read_header(p)
        assert header["schedule"] == {"kind": "linear", "K": 6}
        m2, _ = load_checkpoint(p)
        np.testing.assert_array_equal(m2.schedule.betas, m.schedule.betas)

    def test_loaded_model_same_outputs(self, tmp_path):
        from sdg.events import HistoryBatch
        m = make_model()
        p = tmp_path / "m.sdg"
        save_checkpoint(m, p)
        m2, _ = load_checkpoint(p)
        rng = np.random.default_rng(0)
        hist = HistoryBatch(rng.integers(0, 9, (3, 4)),
                            np.sort(rng.uniform(0, 10, (3, 4)), axis=1),
                            np.ones((3, 4), dtype=bool))
        a = m.generate(hist, np.full(3, 20.0), np.random.default_rng(1))
        b = m2.generate(hist, np.full(3, 20.0), np.random.default_rng(1))
        assert torch.equal(a, b)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.sdg"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(p)

    def test_tampered_config_detected(self, tmp_path):
        m = make_model()
        p = tmp_path / "m.sdg"
        save_checkpoint(m, p)
        blob = bytearray(p.read_bytes())
        # flip the stored d inside the JSON header
        i = blob.index(b'"d": 8')
        blob[i:i + 6] = b'"d": 4'
        p.write_bytes(bytes(blob))
        with pytest.raises((CheckpointMismatchError, ValueError)):
            load_checkpoint(p)

    def test_config_hash_sensitivity(self):
        a = config_hash(SDGConfig(L=4, d=8), num_nodes=9)
        b = config_hash(SDGConfig(L=4, d=8), num_nodes=10)
        c = config_hash(SDGConfig(L=6, d=8), num_nodes=9)
        assert a != b and a != c

    def test_float32_payload(self, tmp_path):
        m = make_model().double()
        p = tmp_path / "m.sdg"
        save_checkpoint(m, p)
        m2, _ = load_checkpoint(p)
        assert m2.dtype == torch.float32
        for (n1, p1), (_, p2) in zip(m.named_parameters(), m2.named_parameters()):
            torch.testing.assert_close(p2, p1.float(), rtol=0, atol=0)
