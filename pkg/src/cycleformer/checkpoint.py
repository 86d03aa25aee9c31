"""Single-file checkpoint container.

Layout, all integers little-endian:

    magic   4 bytes  b"ZTTC"
    version u32      currently 1
    clen    u32      length of the UTF-8 run-config text
    config  clen bytes
    count   u32      number of tensors
    then per tensor, in sorted name order:
        nlen  u32    name length
        name  nlen bytes, UTF-8
        dtype u8     0 = float32, 1 = float64
        ndim  u8
        dims  ndim * u64
        data  raw C-order little-endian values

Sorted names and a fixed encoding make the bytes a pure function of the
content: save(load(save(x))) is byte-identical to save(x). Writes go through
a temp file and os.replace so a crash cannot leave a half-written checkpoint
at the destination path.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, model_config, parse_run_config, serialize_run_config
from .errors import CheckpointError, CheckpointMagicError, CheckpointVersionError
from .model import ModelConfig, ModelParameters, init_parameters
from .optim import AdamW

MAGIC = b"ZTTC"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path: str, config_text: str, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    ctext = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(ctext)))
    chunks.append(ctext)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        # asarray, not ascontiguousarray: the latter promotes 0-dim to (1,)
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nbytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nbytes)))
        chunks.append(nbytes)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_checkpoint(path: str) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, this build reads {VERSION}")
    config_text = r.take(r.u32()).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim = r.u8(), r.u8()
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.copy()  # writable, C-order, shape preserved
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return config_text, tensors


OPTIM_PREFIX = "optim."


def save_model(
    path: str,
    rc: RunConfig,
    params: ModelParameters,
    optimizer: AdamW | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {k: t.data for k, t in params.named().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    save_checkpoint(path, serialize_run_config(rc), tensors)


@dataclass
class LoadedModel:
    rc: RunConfig
    config: ModelConfig
    params: ModelParameters
    optim_state: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        t = self.optim_state.get("optim.t")
        return int(t) if t is not None else 0

    def make_optimizer(self) -> AdamW:
        opt = AdamW(self.params.named(), weight_decay=self.rc.weight_decay)
        if self.optim_state:
            opt.load_state_tensors(self.optim_state)
        return opt


def load_model(path: str) -> LoadedModel:
    config_text, tensors = load_checkpoint(path)
    rc = parse_run_config(config_text)
    cfg = model_config(rc)
    optim_state = {k: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    weights = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    if "tok_emb" not in weights:
        raise CheckpointError(f"{path}: no tok_emb tensor; not a model checkpoint")
    params = init_parameters(cfg, seed=0, dtype=weights["tok_emb"].dtype)
    named = params.named()
    missing = sorted(named.keys() - weights.keys())
    extra = sorted(weights.keys() - named.keys())
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor names do not match the config"
            + (f"; missing {missing}" if missing else "")
            + (f"; unexpected {extra}" if extra else "")
        )
    for name, t in named.items():
        arr = weights[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, config implies {t.data.shape}"
            )
        t.data[...] = arr
    return LoadedModel(rc, cfg, params, optim_state)
