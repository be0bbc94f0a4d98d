"""On-disk artifacts.

* ``.ese``  embedding sets in the ESE1 layout (float32 rows, optional int32 labels)
* ``.esea`` alignment maps (float64 matrix plus metadata)
* ``.esem`` MLP encoders (float64 parameters plus JSON metadata)

ESE1 has no room for provenance, so every artifact written through
``write_*`` also gets a ``<file>.meta.json`` sidecar with the config hash
and seed.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .align import AlignmentMap
from .contrastive import MlpEncoder
from .embeddings import DOMAINS, EmbeddingSet

ESE_MAGIC = b"ESE1"
ESE_VERSION = 1
ESE_HEADER = struct.Struct("<4sIIIBB2x")
ALIGN_MAGIC = b"ESEA"
ALIGN_HEADER = struct.Struct("<4sIIdddd")
ENCODER_MAGIC = b"ESEM"


class FormatError(ValueError):
    pass


def config_hash(config: dict) -> str:
    text = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_sidecar(path, meta: dict) -> None:
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else {}


# ---------------------------------------------------------------------------
# ESE1


def encode_embeddings(es: EmbeddingSet) -> bytes:
    has_labels = es.labels is not None
    header = ESE_HEADER.pack(ESE_MAGIC, ESE_VERSION, es.N, es.D, int(has_labels), DOMAINS.index(es.domain))
    body = np.ascontiguousarray(es.vectors, dtype="<f4").tobytes()
    if has_labels:
        body += np.ascontiguousarray(es.labels, dtype="<i4").tobytes()
    return header + body


def decode_embeddings(blob: bytes, encoder_id: str = "") -> EmbeddingSet:
    if len(blob) < ESE_HEADER.size:
        raise FormatError(f"ESE1 header needs {ESE_HEADER.size} bytes, got {len(blob)}")
    magic, version, n, d, has_labels, tag = ESE_HEADER.unpack_from(blob)
    if magic != ESE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ESE_MAGIC!r}")
    if version != ESE_VERSION:
        raise FormatError(f"unsupported ESE1 version {version}")
    if tag >= len(DOMAINS):
        raise FormatError(f"unknown domain tag {tag}")
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}")
    expected = ESE_HEADER.size + 4 * n * d + (4 * n if has_labels else 0)
    if len(blob) != expected:
        raise FormatError(f"ESE1 payload size mismatch: expected {expected} bytes, got {len(blob)}")
    off = ESE_HEADER.size
    vec = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    # float32 storage is a quantization; rows go back on the sphere in float64
    vec /= np.linalg.norm(vec, axis=1, keepdims=True)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * n * d).astype(np.int64)
    return EmbeddingSet(vec, labels, encoder_id, DOMAINS[tag])


def write_embeddings(path, es: EmbeddingSet, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_embeddings(es))
    write_sidecar(path, {"kind": "embeddings", "encoder_id": es.encoder_id, **(meta or {})})


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing embedding file {path}")
    meta = read_sidecar(path)
    return decode_embeddings(path.read_bytes(), meta.get("encoder_id", path.stem))


# ---------------------------------------------------------------------------
# alignment maps


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _unpack_str(blob: bytes, off: int):
    (n,) = struct.unpack_from("<H", blob, off)
    return blob[off + 2 : off + 2 + n].decode(), off + 2 + n


def encode_alignment(m: AlignmentMap) -> bytes:
    head = ALIGN_HEADER.pack(
        ALIGN_MAGIC, 1, m.D, m.lam, m.final_align_loss, m.orthogonality_residual, m.geodesic_term
    )
    return head + np.ascontiguousarray(m.R, dtype="<f8").tobytes() + _pack_str(m.anchor_id) + _pack_str(m.source_id)


def decode_alignment(blob: bytes) -> AlignmentMap:
    if len(blob) < ALIGN_HEADER.size:
        raise FormatError("alignment header truncated")
    magic, version, d, lam, loss, resid, geo = ALIGN_HEADER.unpack_from(blob)
    if magic != ALIGN_MAGIC or version != 1:
        raise FormatError(f"not a version-1 alignment map (magic {magic!r}, version {version})")
    off = ALIGN_HEADER.size
    if len(blob) < off + 8 * d * d:
        raise FormatError("alignment matrix truncated")
    R = np.frombuffer(blob, dtype="<f8", count=d * d, offset=off).reshape(d, d).copy()
    anchor_id, off = _unpack_str(blob, off + 8 * d * d)
    source_id, off = _unpack_str(blob, off)
    return AlignmentMap(anchor_id, source_id, R, lam, loss, resid, geo)


def write_alignment(path, m: AlignmentMap, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_alignment(m))
    write_sidecar(path, {"kind": "alignment", "heldout_geodesic": {str(k): v for k, v in m.heldout_geodesic.items()}, **(meta or {})})


def read_alignment(path) -> AlignmentMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing alignment file {path}")
    return decode_alignment(path.read_bytes())


# ---------------------------------------------------------------------------
# encoders


def encode_encoder(enc: MlpEncoder) -> bytes:
    meta = json.dumps(
        {
            "layer_dims": enc.layer_dims,
            "activation": enc.activation,
            "encoder_id": enc.encoder_id,
            "loss_history": enc.loss_history,
        },
        sort_keys=True,
    ).encode()
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in enc.params())
    return ENCODER_MAGIC + struct.pack("<II", 1, len(meta)) + meta + body


def decode_encoder(blob: bytes) -> MlpEncoder:
    if blob[:4] != ENCODER_MAGIC:
        raise FormatError(f"bad encoder magic {blob[:4]!r}")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise FormatError(f"unsupported encoder version {version}")
    meta = json.loads(blob[12 : 12 + n])
    dims = meta["layer_dims"]
    off = 12 + n
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.copy())
        biases.append(b.copy())
    if off != len(blob):
        raise FormatError(f"encoder payload size mismatch: parsed {off} of {len(blob)} bytes")
    return MlpEncoder(weights, biases, meta["activation"], meta["encoder_id"], meta.get("loss_history", []))


def write_encoder(path, enc: MlpEncoder, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_encoder(enc))
    write_sidecar(path, {"kind": "encoder", "encoder_id": enc.encoder_id, **(meta or {})})


def read_encoder(path) -> MlpEncoder:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing encoder file {path}")
    return decode_encoder(path.read_bytes())


# ---------------------------------------------------------------------------
# key=value configuration


def _coerce(text: str):
    t = text.strip()
    if "," in t:
        return tuple(_coerce(p) for p in t.split(",") if p.strip())
    if t == "None":
        return None
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    for kind in (int, float):
        try:
            return kind(t)
        except ValueError:
            pass
    return t


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; comma lists become tuples."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file {path}")
    return parse_config_text(path.read_text())
