import struct

import numpy as np
import pytest

from conftest import unit_rows
from ese.align import AlignmentMap
from ese.contrastive import MlpEncoder
from ese.embeddings import EmbeddingSet
from ese.io import (
    FormatError,
    config_hash,
    decode_alignment,
    decode_embeddings,
    encode_alignment,
    encode_embeddings,
    parse_config_text,
    read_alignment,
    read_config,
    read_embeddings,
    read_encoder,
    read_sidecar,
    write_alignment,
    write_embeddings,
    write_encoder,
)


def test_ese1_exact_bytes():
    es = EmbeddingSet(np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([3, -2]), domain="ood_crop")
    expected = (
        b"ESE1"
        + struct.pack("<III", 1, 2, 2)
        + bytes([1, 2, 0, 0])
        + struct.pack("<4f", 1.0, 0.0, 0.0, -1.0)
        + struct.pack("<2i", 3, -2)
    )
    assert encode_embeddings(es) == expected
    assert len(expected) == 20 + 16 + 8


def test_ese1_without_labels_has_no_label_block():
    es = EmbeddingSet(np.array([[0.6, 0.8]]), domain="synthetic")
    blob = encode_embeddings(es)
    assert blob[16:20] == bytes([0, 3, 0, 0])
    assert len(blob) == 28
    assert decode_embeddings(blob).labels is None


def test_ese1_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(0)
    es = EmbeddingSet(unit_rows(rng, 300, 8), rng.integers(0, 10, 300), "enc", "id")
    path = tmp_path / "x.ese"
    write_embeddings(path, es, {"seed": 4, "config_hash": "abc"})
    back = read_embeddings(path)
    assert back.encoder_id == "enc" and back.domain == "id"
    np.testing.assert_array_equal(back.labels, es.labels)
    assert np.max(np.abs(back.vectors - es.vectors)) <= 1e-7
    assert np.max(np.abs(np.linalg.norm(back.vectors, axis=1) - 1)) < 1e-12
    assert read_sidecar(path)["seed"] == 4


def test_ese1_errors(tmp_path):
    blob = encode_embeddings(EmbeddingSet(np.eye(3), np.arange(3)))
    with pytest.raises(FormatError, match="header needs 20 bytes"):
        decode_embeddings(blob[:10])
    with pytest.raises(FormatError, match="bad magic"):
        decode_embeddings(b"ESE2" + blob[4:])
    with pytest.raises(FormatError, match="unsupported ESE1 version 2"):
        decode_embeddings(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(FormatError, match="unknown domain tag 9"):
        decode_embeddings(blob[:17] + b"\x09" + blob[18:])
    with pytest.raises(FormatError, match="expected 68 bytes, got 67"):
        decode_embeddings(blob[:-1])
    with pytest.raises(FileNotFoundError):
        read_embeddings(tmp_path / "nope.ese")


def test_alignment_round_trip(tmp_path):
    R = np.random.default_rng(1).standard_normal((5, 5))
    m = AlignmentMap("a", "b", R, 0.3, 0.12, 0.004, 0.1, heldout_geodesic={0.3: 0.1})
    path = tmp_path / "b.esea"
    write_alignment(path, m, {"seed": 1})
    back = read_alignment(path)
    np.testing.assert_array_equal(back.R, R)
    assert (back.anchor_id, back.source_id, back.lam) == ("a", "b", 0.3)
    assert (back.final_align_loss, back.orthogonality_residual, back.geodesic_term) == (0.12, 0.004, 0.1)
    assert read_sidecar(path)["heldout_geodesic"] == {"0.3": 0.1}
    with pytest.raises(FormatError, match="not a version-1"):
        decode_alignment(b"XXXX" + encode_alignment(m)[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_alignment(encode_alignment(m)[:60])


def test_encoder_round_trip(tmp_path):
    enc = MlpEncoder.init([10, 6, 3], seed=2, activation="tanh", encoder_id="member-2")
    enc.loss_history = [1.5, 1.2]
    path = tmp_path / "e.esem"
    write_encoder(path, enc)
    back = read_encoder(path)
    assert back.layer_dims == [10, 6, 3] and back.activation == "tanh"
    assert back.encoder_id == "member-2" and back.loss_history == [1.5, 1.2]
    for a, b in zip(back.params(), enc.params()):
        np.testing.assert_array_equal(a, b)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="size mismatch"):
        read_encoder(path)


def test_config_parsing(tmp_path):
    text = "# comment\nseed = 3\nlr=0.1  # trailing\nname = run\nflag = true\nlambdas = 0.1,0.3,0.5\nk = None\n\n"
    cfg = parse_config_text(text)
    assert cfg == {"seed": 3, "lr": 0.1, "name": "run", "flag": True, "lambdas": (0.1, 0.3, 0.5), "k": None}
    with pytest.raises(ValueError, match="line 2"):
        parse_config_text("a=1\nbroken\n")
    path = tmp_path / "c.txt"
    path.write_text(text)
    assert read_config(path) == cfg
    with pytest.raises(FileNotFoundError):
        read_config(tmp_path / "none.txt")


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
