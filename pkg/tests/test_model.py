import numpy as np
import pytest

from videoadapt.encoder import EncoderConfig
from videoadapt.errors import FormatError
from videoadapt.model import (
    build_model,
    expected_trainable_count,
    load_checkpoint,
    save_checkpoint,
)
from videoadapt.transfer import AdaptConfig


def cfg(**kw):
    base = dict(
        feat_dim=12,
        k_tokens=5,
        d_model=16,
        n_heads=4,
        n_layers=2,
        mlp_ratio=2,
        adapt=AdaptConfig(queue_capacity=8, grl_weight=1.0),
    )
    base.update(kw)
    return EncoderConfig(**base)


class TestBuild:
    def test_same_seed_same_model(self):
        a = build_model(cfg(), 4, seed=3)
        b = build_model(cfg(), 4, seed=3)
        assert a.parameter_hash() == b.parameter_hash()

    def test_different_seed_different_model(self):
        assert build_model(cfg(), 4, 0).parameter_hash() != build_model(cfg(), 4, 1).parameter_hash()

    def test_trainable_excludes_frozen_classifier(self):
        model = build_model(cfg(), 4, 0)
        names = set(model.trainable_parameters())
        assert not any(n.startswith("classifier.") for n in names)
        assert any(n.startswith("adversary.") for n in names)

    def test_counts_match_closed_form(self):
        model = build_model(cfg(), 4, 0)
        assert model.trainable_count() == expected_trainable_count(cfg(), 4)


class TestCheckpoint:
    def test_round_trip_preserves_parameters(self, tmp_path):
        model = build_model(cfg(), 4, seed=9)
        path = tmp_path / "model.tack"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        for name, t in model.parameters().items():
            # storage is float32, so compare at that precision
            assert np.array_equal(
                t.data.astype(np.float32), restored.parameters()[name].data.astype(np.float32)
            ), name

    def test_config_echoed_through(self, tmp_path):
        c = cfg(adapt_positions=(0, 1), positional="none")
        model = build_model(c, 7, seed=1)
        path = tmp_path / "m.tack"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        assert restored.cfg.positions == (0, 1)
        assert restored.cfg.positional == "none"
        assert restored.classifier.n_classes == 7

    def test_corrupt_payload_detected(self, tmp_path):
        model = build_model(cfg(), 4, seed=0)
        path = tmp_path / "m.tack"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0x55
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "nope.tack"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_frozen_flag_survives(self, tmp_path):
        model = build_model(cfg(), 4, seed=0, classifier_frozen=True)
        path = tmp_path / "m.tack"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        assert restored.classifier.frozen
        assert not any(t.requires_grad for t in restored.classifier.params.values())
