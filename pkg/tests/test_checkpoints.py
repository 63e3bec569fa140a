import numpy as np
import pytest
import torch

from advtextgen.checkpoints import CheckpointError, load_arrays, save_arrays
from advtextgen.corpus import SPECIAL_TOKENS, Vocabulary
from advtextgen.generator import CondVAE, load_generator, save_generator
from advtextgen.target_model import TextCNN, freeze, load_target, save_target


def vocab_of(words):
    return Vocabulary.from_tokens(list(SPECIAL_TOKENS) + words)


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        arrays = {
            "w": np.arange(12, dtype=np.float32).reshape(3, 4),
            "b": np.array([1.5, -2.25]),
            "n": np.array(7, dtype=np.int64),
        }
        meta = {"kind": "test", "alpha": 0.25, "name": "x"}
        p = tmp_path / "m.ckpt"
        save_arrays(p, arrays, meta)
        got, got_meta = load_arrays(p)
        assert got_meta == meta
        for k in arrays:
            assert got[k].dtype == arrays[k].dtype
            assert np.array_equal(got[k], arrays[k])

    def test_serialization_deterministic(self, tmp_path):
        arrays = {"a": np.ones((2, 2), dtype=np.float32), "z": np.zeros(3)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_arrays(p1, arrays, {"v": 1})
        save_arrays(p2, dict(reversed(arrays.items())), {"v": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_arrays(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="does not exist"):
            load_arrays(tmp_path / "nope.ckpt")


class TestModelCheckpoints:
    def test_target_roundtrip(self, tmp_path):
        vocab = vocab_of(["a", "b", "c"])
        torch.manual_seed(0)
        model = TextCNN(len(vocab), 2, fixed_len=8, d_w=6, filter_widths=(2, 3), n_filters=4)
        p = tmp_path / "t.ckpt"
        save_target(model, p, vocab)
        got = load_target(p, vocab)
        for (ka, va), (kb, vb) in zip(model.state_dict().items(), got.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        assert got.frozen is False

    def test_frozen_flag_persists(self, tmp_path):
        vocab = vocab_of(["a"])
        model = freeze(TextCNN(len(vocab), 2, fixed_len=8, d_w=4, filter_widths=(2,), n_filters=2))
        p = tmp_path / "t.ckpt"
        save_target(model, p, vocab)
        assert load_target(p, vocab).frozen is True

    def test_generator_roundtrip_and_metadata(self, tmp_path):
        vocab = vocab_of(["a", "b"])
        torch.manual_seed(1)
        gen = CondVAE(len(vocab), 2, d_emb=8, d_z=4, d_c=2, hidden=10)
        p = tmp_path / "g.ckpt"
        save_generator(gen, p, vocab)
        got = load_generator(p, vocab)
        assert got.d_z == 4 and got.num_classes == 2
        for (ka, va), (kb, vb) in zip(gen.state_dict().items(), got.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_generator_refuses_mismatched_vocab(self, tmp_path):
        vocab = vocab_of(["a", "b"])
        other = vocab_of(["a", "z"])
        gen = CondVAE(len(vocab), 2, d_emb=8, d_z=4, d_c=2, hidden=10)
        p = tmp_path / "g.ckpt"
        save_generator(gen, p, vocab)
        with pytest.raises(CheckpointError, match="different vocabulary"):
            load_generator(p, other)

    def test_wrong_kind_rejected(self, tmp_path):
        vocab = vocab_of(["a"])
        gen = CondVAE(len(vocab), 2, d_emb=8, d_z=4, d_c=2, hidden=10)
        p = tmp_path / "g.ckpt"
        save_generator(gen, p, vocab)
        with pytest.raises(ValueError, match="not a target-model checkpoint"):
            load_target(p, vocab)

    def test_two_saves_byte_identical(self, tmp_path):
        vocab = vocab_of(["a", "b"])
        torch.manual_seed(2)
        gen = CondVAE(len(vocab), 2, d_emb=8, d_z=4, d_c=2, hidden=10)
        p1, p2 = tmp_path / "g1.ckpt", tmp_path / "g2.ckpt"
        save_generator(gen, p1, vocab)
        save_generator(gen, p2, vocab)
        assert p1.read_bytes() == p2.read_bytes()
