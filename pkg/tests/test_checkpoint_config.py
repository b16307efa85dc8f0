"""Checkpoint binary format and run-config parsing."""

import numpy as np
import pytest

from pmkd.checkpoint import (
    ChecksumError,
    FormatError,
    MismatchError,
    checkpoint_checksum,
    load_checkpoint,
    read_checkpoint_items,
    save_checkpoint,
)
from pmkd.config import ConfigError, RunConfig, load_config, parse_config_text
from pmkd.distill import forward_with_taps
from pmkd.models import ArchSpec, build, init_weights
from pmkd.tensor import Tensor


def trained_like_model(seed=0):
    """A model with non-trivial weights and running stats."""
    model = init_weights(build(ArchSpec.parse("tiny4"), "row_student"), seed)
    rng = np.random.default_rng(seed + 1)
    for name, arr in model.state_items():
        arr += rng.standard_normal(arr.shape).astype(np.float32) * 0.01
    return model


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = trained_like_model(0)
        path = tmp_path / "m.pmkd"
        save_checkpoint(model, path)
        fresh = build(ArchSpec.parse("tiny4"), "row_student")
        load_checkpoint(path, fresh)
        for (n, a), (m, b) in zip(model.state_items(), fresh.state_items()):
            assert n == m
            np.testing.assert_array_equal(a, b, err_msg=n)

    def test_forward_bit_identical_after_round_trip(self, tmp_path):
        model = trained_like_model(1)
        path = tmp_path / "m.pmkd"
        save_checkpoint(model, path)
        fresh = build(ArchSpec.parse("tiny4"), "row_student")
        load_checkpoint(path, fresh)
        x = Tensor(np.random.default_rng(2).standard_normal(
            (2, 3, 16, 16), dtype=np.float32))
        a = forward_with_taps(model, x, training=False)
        b = forward_with_taps(fresh, x, training=False)
        np.testing.assert_array_equal(a.logits.data, b.logits.data)

    def test_truncated_file_is_checksum_error(self, tmp_path):
        path = tmp_path / "m.pmkd"
        save_checkpoint(trained_like_model(2), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-20])
        with pytest.raises(ChecksumError):
            read_checkpoint_items(path)

    def test_flipped_byte_is_checksum_error(self, tmp_path):
        path = tmp_path / "m.pmkd"
        save_checkpoint(trained_like_model(3), path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            read_checkpoint_items(path)

    def test_bad_magic_distinct_error(self, tmp_path):
        path = tmp_path / "m.pmkd"
        path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        with pytest.raises((FormatError, ChecksumError)):
            read_checkpoint_items(path)

    def test_teacher_into_student_names_offending_conv(self, tmp_path):
        teacher = init_weights(build(ArchSpec.parse("tiny4"), "teacher"), 4)
        path = tmp_path / "t.pmkd"
        save_checkpoint(teacher, path)
        student = build(ArchSpec.parse("tiny4"), "row_student")
        with pytest.raises(MismatchError, match="conv1.w"):
            load_checkpoint(path, student)

    def test_wrong_arch_tensor_count(self, tmp_path):
        small = init_weights(build(ArchSpec.parse("tiny4"), "row_student"), 5)
        path = tmp_path / "s.pmkd"
        save_checkpoint(small, path)
        big = build(ArchSpec.parse("tiny6"), "row_student")
        with pytest.raises(MismatchError):
            load_checkpoint(path, big)

    def test_checksum_helper_matches_trailer(self, tmp_path):
        path = tmp_path / "m.pmkd"
        save_checkpoint(trained_like_model(6), path)
        import struct

        stored = struct.unpack("<Q", path.read_bytes()[-8:])[0]
        assert checkpoint_checksum(path) == stored

    def test_duplicate_names_rejected(self, tmp_path):
        items = [("a", np.zeros(2, np.float32)), ("a", np.ones(2, np.float32))]
        with pytest.raises(FormatError, match="duplicate"):
            save_checkpoint(items, tmp_path / "dup.pmkd")

    def test_ensemble_checkpoint_round_trip(self, tmp_path):
        from pmkd.distill import Ensemble

        spec = ArchSpec.parse("tiny4")
        pm = Ensemble(init_weights(build(spec, "row_student"), 7),
                      init_weights(build(spec, "column"), 8))
        path = tmp_path / "pm.pmkd"
        save_checkpoint(pm, path)
        names = [n for n, _ in read_checkpoint_items(path)]
        assert names == [n for n, _ in pm.state_items()]


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_parse_text_round_trip(self):
        cfg = RunConfig(arch="tiny8", rho=0.5, milestones=(10, 20))
        again = parse_config_text(cfg.to_text())
        assert again.arch == "tiny8"
        assert again.rho == 0.5
        assert again.milestones == (10, 20)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("learning_rate=0.1")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs=ten")

    def test_invariants_checked_at_parse(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("rho=99\n")
        with pytest.raises(ConfigError, match="rho"):
            load_config(p)

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# a comment\n\narch=tiny5\n  \ntau=2.0\n")
        assert cfg.arch == "tiny5"
        assert cfg.tau == 2.0

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("arch=tiny4\nepochs=5\n")
        cfg = load_config(p, {"epochs": "9"})
        assert cfg.arch == "tiny4"
        assert cfg.epochs == 9

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_config_text("just some text")
