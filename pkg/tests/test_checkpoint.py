import json
import struct

import numpy as np
import pytest
import torch

from procdiff import checkpoint as ckpt
from procdiff.core import IntegrityError
from procdiff.corpus import b1_config, by_split, generate_corpus
from procdiff.training import (
    ModelConfig,
    TrainConfig,
    clip_dataset,
    finetune_forecaster,
    fit_linear_probe,
    pretrain,
)

TINY = ModelConfig(layers=1, hidden=32)


@pytest.fixture(scope="module")
def corpus():
    seqs, table = generate_corpus(b1_config(2, sequences_per_grammar=30))
    return by_split(seqs, "train"), table


@pytest.fixture(scope="module")
def trained(corpus):
    train, table = corpus
    bundle, _ = pretrain(train, table, TrainConfig(epochs=1, seed=2), TINY)
    return bundle


def test_round_trip_is_byte_identical(trained):
    data = ckpt.to_bytes(trained)
    back, header = ckpt.from_bytes(data)
    assert ckpt.to_bytes(back) == data
    assert back.checksums() == trained.checksums()
    assert header["format_version"] == ckpt.FORMAT_VERSION
    assert header["step_count"] == trained.step_count


def test_heads_survive(corpus, trained):
    train, _ = corpus
    obs, y = clip_dataset(train)
    probed, _ = fit_linear_probe(trained, obs, y, TrainConfig(epochs=1, seed=0))
    fc, _ = finetune_forecaster(probed, train, TrainConfig(epochs=1, seed=0, max_steps=2))
    back, _ = ckpt.from_bytes(ckpt.to_bytes(fc))
    assert back.checksums() == fc.checksums()
    assert back.forecast_variant == "diffusion"
    assert ckpt.to_bytes(back) == ckpt.to_bytes(fc)


def test_payload_layout(trained):
    data = ckpt.to_bytes(trained)
    (n,) = struct.unpack_from("<Q", data)
    header = json.loads(data[8:8 + n])
    assert sum(t["nbytes"] for t in header["tensors"]) == len(data) - 8 - n
    first = header["tensors"][0]
    arr = np.frombuffer(data[8 + n:8 + n + first["nbytes"]], "<f8").reshape(first["shape"])
    np.testing.assert_array_equal(arr, trained.table.embeddings)


def test_corruption_is_detected(trained):
    data = bytearray(ckpt.to_bytes(trained))
    data[-3] ^= 0xFF
    with pytest.raises(IntegrityError, match="checksum"):
        ckpt.from_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        ckpt.from_bytes(bytes(data[:-8]))
    with pytest.raises(IntegrityError):
        ckpt.from_bytes(b"\x01\x00")
    good = ckpt.to_bytes(trained)
    (n,) = struct.unpack_from("<Q", good)
    header = json.loads(good[8:8 + n])
    header["format_version"] = 99
    head = json.dumps(header).encode()
    with pytest.raises(IntegrityError, match="version"):
        ckpt.from_bytes(struct.pack("<Q", len(head)) + head + good[8 + n:])


def test_resume_from_saved_bytes_is_exact(corpus, tmp_path):
    train, table = corpus
    cfg = TrainConfig(epochs=2, seed=4)
    full, _ = pretrain(train, table, cfg, TINY)
    half, _ = pretrain(train, table, TrainConfig(epochs=2, seed=4, max_steps=3), TINY)
    ckpt.save(half, tmp_path / "half.bin")
    loaded, _ = ckpt.load(tmp_path / "half.bin")
    resumed, _ = pretrain(train, table, cfg, resume=loaded)
    assert ckpt.to_bytes(resumed) == ckpt.to_bytes(full)


def test_atomic_write_leaves_no_temp(tmp_path):
    ckpt.atomic_write(tmp_path / "a.bin", b"abc")
    assert [p.name for p in tmp_path.iterdir()] == ["a.bin"]
