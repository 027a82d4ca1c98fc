"""Binary checkpoints (MGC1) and the prepared graph + encoding cache."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, encoding_key
from .features import FeatureMap
from .graph import read_graph, write_graph
from .spectral import read_encodings, write_encodings
from .training import PARAM_NAMES, ModelParams

CHECKPOINT_MAGIC = b"MGC1"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_NO_SEED = 2**64 - 1


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def round_params(params: ModelParams) -> ModelParams:
    """Round trainables through float32, the precision they are stored in."""
    return ModelParams(**{k: v.astype(np.float32).astype(np.float64) for k, v in params.tensors().items()})


def encode_checkpoint(params: ModelParams, fmap: FeatureMap, cfg: RunConfig, num_users: int) -> bytes:
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION)]
    n, d = params.E.shape
    m = params.W_Q.shape[0]
    buckets, dz = params.degree_table.shape
    for v in (num_users, n - num_users, d, m, buckets, dz):
        parts.append(_U64.pack(v))
    for name in PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())
    kind = fmap.kind.encode("utf-8")
    parts += [
        _U64.pack(_NO_SEED if fmap.seed is None else fmap.seed),
        _U64.pack(len(kind)),
        kind,
        _F64.pack(fmap.power),
        bytes([fmap.W is not None]),
    ]
    if fmap.W is not None:
        parts.append(np.ascontiguousarray(fmap.W, dtype="<f8").tobytes())
    # where the run was written is not part of the model
    blob = cfg.replace(out_dir=RunConfig().out_dir).to_json().encode("utf-8")
    parts += [_U64.pack(len(blob)), blob]
    return b"".join(parts)


def save_checkpoint(path, params, fmap, cfg, num_users):
    atomic_write(path, encode_checkpoint(params, fmap, cfg, num_users))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self):
        return _U64.unpack(self.take(8))[0]

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).reshape(shape).astype(np.float64)


def load_checkpoint(path):
    """Returns ``(params, feature_map, config, num_users)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MGC1 checkpoint")
    version = _U32.unpack(r.take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    M, N, d, m, buckets, dz = (r.u64() for _ in range(6))
    shapes = {
        "E": (M + N, d),
        "W_Q": (m, m),
        "W_K": (m, m),
        "degree_table": (buckets, dz),
        "degree_w": (dz,),
        "degree_b": (1,),
    }
    params = ModelParams(**{name: r.array("<f4", shapes[name]) for name in PARAM_NAMES})
    seed = r.u64()
    kind = r.take(r.u64()).decode("utf-8")
    power = _F64.unpack(r.take(8))[0]
    W = r.array("<f8", (m, m)) if r.take(1)[0] else None
    fmap = FeatureMap(kind, m, W, None if seed == _NO_SEED else seed, power)
    cfg = RunConfig.from_dict(json.loads(r.take(r.u64()).decode("utf-8")))
    return params, fmap, cfg, M


# -- prepared cache ------------------------------------------------------------


def cache_paths(cfg: RunConfig):
    root = Path(cfg.cache_dir)
    return root / "graph.mgf", root / "prepare.json"


def write_cache(cfg: RunConfig, graph, encodings, extra=None) -> dict:
    data_path, meta_path = cache_paths(cfg)
    buf = io.BytesIO()
    write_graph(buf, graph)
    write_encodings(buf, encodings)
    payload = buf.getvalue()
    meta = {
        "key": encoding_key(cfg),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "num_edges": graph.num_edges,
        "split_sizes": [int(np.sum(graph.split == s)) for s in range(3)],
        **(extra or {}),
    }
    atomic_write(data_path, payload)
    atomic_write(meta_path, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return meta


def read_cache_meta(cfg: RunConfig):
    _, meta_path = cache_paths(cfg)
    if not meta_path.exists():
        return None
    return json.loads(meta_path.read_text(encoding="utf-8"))


def cache_is_current(cfg: RunConfig) -> bool:
    data_path, _ = cache_paths(cfg)
    meta = read_cache_meta(cfg)
    return bool(meta) and data_path.exists() and meta.get("key") == encoding_key(cfg)


def load_cache(cfg: RunConfig):
    """Load the prepared graph and encodings, refusing caches built from another config."""
    data_path, meta_path = cache_paths(cfg)
    meta = read_cache_meta(cfg)
    if meta is None or not data_path.exists():
        raise FileNotFoundError(f"no prepared cache in {cfg.cache_dir}; run 'prepare' first")
    if meta.get("key") != encoding_key(cfg):
        raise ConfigError(
            f"stale cache in {cfg.cache_dir}: built for {meta.get('key')}, config needs {encoding_key(cfg)}"
        )
    payload = data_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise ConfigError(f"stale cache in {cfg.cache_dir}: checksum mismatch")
    buf = io.BytesIO(payload)
    graph = read_graph(buf)
    encodings = read_encodings(buf, graph.num_users, graph.num_items)
    return graph, encodings, meta
