import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eco import data_io as io
from eco import encoder as enc
from eco.classifier import zero_shot_baseline
from eco.numerics import SeededRng
from eco.prompts import ClassTokenTable, PromptEnsemble, precompute_prototypes


def _bank(labels, vectors, names=("a", "b"), tokens=((1,), (2, 3))):
    table = ClassTokenTable(names=list(names), token_ids=[list(t) for t in tokens])
    return io.EmbeddingBank(class_table=table, labels=labels, vectors=vectors)


def _small_bank(seed=1, n=6, dim=4):
    rng = SeededRng(seed)
    labels = np.asarray(rng.integers(0, 2, size=n))
    return _bank(labels, rng.gaussian((n, dim)).astype(np.float32))


class TestBankFormat:
    def test_header_layout(self):
        bank = _small_bank()
        data = io.write_bank(bank)
        assert data[:8] == io.BANK_MAGIC
        version, k, dim, count = struct.unpack("<IIII", data[8:24])
        assert (version, k, dim, count) == (1, 2, 4, 6)

    def test_total_size_arithmetic(self):
        bank = _small_bank()
        data = io.write_bank(bank)
        class_bytes = sum(
            2 + len(name.encode()) + 2 + 4 * len(ids)
            for name, ids in zip(bank.class_table.names, bank.class_table.token_ids)
        )
        assert len(data) == 8 + 16 + class_bytes + len(bank) * (4 + 4 * bank.dim)

    def test_round_trip_bit_exact(self):
        bank = _small_bank()
        data = io.write_bank(bank)
        loaded = io.read_bank(data)
        assert io.write_bank(loaded) == data
        assert np.array_equal(loaded.labels, bank.labels)
        assert np.array_equal(loaded.vectors, bank.vectors)
        assert loaded.class_table.names == bank.class_table.names
        assert loaded.class_table.token_ids == bank.class_table.token_ids

    def test_bad_magic(self):
        data = bytearray(io.write_bank(_small_bank()))
        data[0] ^= 0xFF
        with pytest.raises(io.FormatError, match="byte 0"):
            io.read_bank(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(io.write_bank(_small_bank()))
        data[8:12] = struct.pack("<I", 7)
        with pytest.raises(io.FormatError, match="version 7"):
            io.read_bank(bytes(data))

    def test_truncation_names_failing_record(self):
        data = io.write_bank(_small_bank())
        with pytest.raises(io.FormatError, match="record 5"):
            io.read_bank(data[:-3])

    def test_trailing_bytes_rejected(self):
        data = io.write_bank(_small_bank())
        with pytest.raises(io.FormatError, match="trailing"):
            io.read_bank(data + b"\x00")

    def test_label_outside_table_rejected(self):
        with pytest.raises(io.FormatError):
            _bank(np.array([0, 2]), np.ones((2, 3), np.float32))

    def test_unicode_class_names_survive(self):
        table = ClassTokenTable(names=["café", "naïve"], token_ids=[[1], [2]])
        bank = io.EmbeddingBank(
            class_table=table, labels=np.array([0, 1]), vectors=np.eye(2, dtype=np.float32)
        )
        assert io.read_bank(io.write_bank(bank)).class_table.names == table.names

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        n=st.integers(1, 20),
        dim=st.integers(1, 8),
        k=st.integers(2, 5),
    )
    def test_random_round_trips(self, seed, n, dim, k):
        rng = SeededRng(seed)
        table = ClassTokenTable(
            names=[f"c{i}" for i in range(k)], token_ids=[[i + 1] for i in range(k)]
        )
        bank = io.EmbeddingBank(
            class_table=table,
            labels=np.asarray(rng.integers(0, k, size=n)),
            vectors=rng.gaussian((n, dim)).astype(np.float32),
        )
        data = io.write_bank(bank)
        assert io.write_bank(io.read_bank(data)) == data


class TestManifest:
    def test_round_trip(self):
        rng = SeededRng(2)
        tensors = {"a": rng.gaussian((3, 4)).astype(np.float32), "b": rng.gaussian(5)}
        data = io.write_manifest(tensors, {"kind": "test", "note": 7})
        loaded, metadata = io.read_manifest(data)
        assert metadata == {"kind": "test", "note": 7}
        assert np.array_equal(loaded["a"], tensors["a"])
        assert np.array_equal(loaded["b"], tensors["b"])
        assert loaded["b"].dtype == np.float64

    def test_write_is_deterministic(self):
        tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
        assert io.write_manifest(tensors, {"m": 1}) == io.write_manifest(tensors, {"m": 1})

    def test_duplicate_tensor_name_rejected(self):
        data = io.write_manifest({"x": np.zeros(2, np.float32)}, {})
        hlen = struct.unpack("<I", data[12:16])[0]
        header = json.loads(data[16 : 16 + hlen])
        header["tensors"].append(dict(header["tensors"][0]))
        new_header = json.dumps(header, sort_keys=True).encode()
        patched = (
            data[:12] + struct.pack("<I", len(new_header)) + new_header + data[16 + hlen :]
        )
        with pytest.raises(io.FormatError, match="duplicate"):
            io.read_manifest(patched)

    def test_tensor_outside_blob_rejected(self):
        data = io.write_manifest({"x": np.zeros(4, np.float32)}, {})
        with pytest.raises(io.FormatError, match="'x'"):
            io.read_manifest(data[:-4])

    def test_garbage_header_rejected(self):
        data = io.write_manifest({"x": np.zeros(2, np.float32)}, {})
        patched = data[:16] + b"\xff" * 8 + data[24:]
        with pytest.raises(io.FormatError, match="header"):
            io.read_manifest(patched)


class TestWeightsFormat:
    def test_round_trip_preserves_hash(self, small_config):
        weights = enc.init_random(small_config, SeededRng(3))
        data = io.write_weights(weights, {"sot_id": 30, "eot_id": 31})
        loaded, metadata = io.read_weights(data)
        assert loaded.content_hash() == weights.content_hash()
        assert loaded.config == small_config
        specials = io.special_tokens_from_metadata(metadata)
        assert (specials.sot_id, specials.eot_id) == (30, 31)

    def test_write_read_write_identical(self, small_weights):
        data = io.write_weights(small_weights)
        loaded, _ = io.read_weights(data)
        assert io.write_weights(loaded) == data

    def _drop_tensor(self, data, victim):
        hlen = struct.unpack("<I", data[12:16])[0]
        header = json.loads(data[16 : 16 + hlen])
        header["tensors"] = [t for t in header["tensors"] if t["name"] != victim]
        new_header = json.dumps(header, sort_keys=True).encode()
        return data[:12] + struct.pack("<I", len(new_header)) + new_header + data[16 + hlen :]

    def test_missing_projection_rejected(self, small_weights):
        data = self._drop_tensor(io.write_weights(small_weights), "projection")
        with pytest.raises(io.SchemaError, match="projection"):
            io.read_weights(data)

    def test_missing_block_tensor_rejected(self, small_weights):
        data = self._drop_tensor(io.write_weights(small_weights), "blocks.1.mlp.fc_w")
        with pytest.raises(io.SchemaError, match="blocks.1.mlp.fc_w"):
            io.read_weights(data)

    def test_wrong_shape_rejected(self, small_weights):
        data = io.write_weights(small_weights)
        hlen = struct.unpack("<I", data[12:16])[0]
        header = json.loads(data[16 : 16 + hlen])
        for t in header["tensors"]:
            if t["name"] == "positional":
                t["shape"] = [t["shape"][1], t["shape"][0]]
        new_header = json.dumps(header, sort_keys=True).encode()
        patched = (
            data[:12] + struct.pack("<I", len(new_header)) + new_header + data[16 + hlen :]
        )
        with pytest.raises(io.SchemaError, match="positional"):
            io.read_weights(patched)


class TestCheckpoints:
    def test_round_trip(self):
        rng = SeededRng(4)
        ensemble = PromptEnsemble(context=rng.gaussian((2, 3, 8)).astype(np.float32))
        data = io.save_checkpoint(ensemble, "deadbeef")
        loaded, metadata, warning = io.load_checkpoint(data, "deadbeef")
        assert warning is None
        assert np.array_equal(loaded.context, ensemble.context)
        assert metadata["d_prompts"] == 2 and metadata["n_ctx"] == 3

    def test_hash_mismatch_warns_but_loads(self):
        rng = SeededRng(4)
        ensemble = PromptEnsemble(context=rng.gaussian((1, 2, 8)).astype(np.float32))
        data = io.save_checkpoint(ensemble, "deadbeef")
        loaded, _, warning = io.load_checkpoint(data, "cafebabe")
        assert "different encoder" in warning
        assert np.array_equal(loaded.context, ensemble.context)

    def test_wrong_kind_rejected(self):
        data = io.write_manifest({"context": np.zeros((1, 2, 3), np.float32)}, {"kind": "x"})
        with pytest.raises(io.FormatError, match="checkpoint"):
            io.load_checkpoint(data)


class TestPrototypes:
    def test_round_trip(self, small_weights, small_table, small_specials):
        rng = SeededRng(5)
        ensemble = PromptEnsemble(context=rng.gaussian((2, 2, 16)).astype(np.float32))
        bank = precompute_prototypes(small_weights, ensemble, small_table, small_specials)
        loaded = io.load_prototypes(io.save_prototypes(bank))
        assert np.array_equal(loaded.prototypes, bank.prototypes)
        assert loaded.encoder_hash == bank.encoder_hash
        assert loaded.ensemble_hash == bank.ensemble_hash

    def test_wrong_kind_rejected(self):
        data = io.write_manifest({"prototypes": np.zeros((2, 3), np.float32)}, {"kind": "x"})
        with pytest.raises(io.FormatError, match="prototype"):
            io.load_prototypes(data)


def _synth(noise_std, seed=1, classes=4):
    return io.generate_synthetic(
        io.SynthSpec(
            classes=classes,
            encoder=enc.EncoderConfig(
                layers=2, heads=2, model_width=32, output_dim=16,
                max_positions=24, vocab_size=64,
            ),
            teacher_prompts=2,
            teacher_len=3,
            train_per_class=25,
            test_per_class=50,
            noise_std=noise_std,
            seed=seed,
        )
    )


class TestSyntheticData:
    def test_noiseless_task_is_solved_by_teachers(self):
        res = _synth(0.0)
        acc = zero_shot_baseline(res.weights, res.teacher_sequences, res.test_bank)
        assert acc >= 0.99

    def test_seed_determinism(self):
        a, b = _synth(0.3, seed=9), _synth(0.3, seed=9)
        assert np.array_equal(a.train_bank.vectors, b.train_bank.vectors)
        assert a.weights.content_hash() == b.weights.content_hash()
        c = _synth(0.3, seed=10)
        assert not np.array_equal(a.train_bank.vectors, c.train_bank.vectors)

    def test_difficulty_monotone_in_noise(self):
        accs = []
        for sigma in [0.0, 0.1, 0.5, 2.0]:
            res = _synth(sigma)
            accs.append(zero_shot_baseline(res.weights, res.teacher_sequences, res.test_bank))
        assert all(a >= b for a, b in zip(accs, accs[1:]))
        assert accs[-1] < accs[0]

    def test_huge_noise_is_near_chance(self):
        res = _synth(50.0)
        acc = zero_shot_baseline(res.weights, res.teacher_sequences, res.test_bank)
        assert abs(acc - 0.25) <= 0.12

    def test_bank_shapes_and_labels(self):
        res = _synth(0.3)
        assert len(res.train_bank) == 4 * 25
        assert len(res.test_bank) == 4 * 50
        assert res.train_bank.dim == 16
        for k in range(4):
            assert len(res.train_bank.class_indices(k)) == 25

    def test_specials_live_at_vocab_end(self):
        res = _synth(0.3)
        assert res.specials.sot_id == 62 and res.specials.eot_id == 63
        for ids in res.class_table.token_ids:
            assert 1 <= len(ids) <= 2
            assert all(0 <= t < 62 for t in ids)

    def test_teacher_sequences_share_context(self):
        res = _synth(0.3)
        for prompt in range(2):
            ctxs = {tuple(res.teacher_sequences[k][prompt][1:4]) for k in range(4)}
            assert len(ctxs) == 1

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            io.SynthSpec(classes=1)


def test_file_sha256_matches_hashlib():
    import hashlib

    payload = b"abc123"
    assert io.file_sha256(payload) == hashlib.sha256(payload).hexdigest()
