"""Self-describing binary checkpoints.

Layout, all integers little-endian:

    magic   7 bytes  "MAGNET\\x01"
    u32     config text length, then UTF-8 key=value config snapshot
    u32     vocab blob length, then UTF-8 newline-joined tokens (index order)
    u64     training step counter
    u64     optimizer update counter
    u32     parameter record count, then records
    u32     optimizer record count, then records

Each record: u32 name length, name bytes, u32 rank, u32 per dim, then the
float32 payload in C order. Values are stored at 32-bit precision, so a
reload reproduces forward outputs bitwise.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig, config_from_text, config_to_text
from .errors import CodecError
from .model import GroundingModel
from .optim import Adam
from .tensor import Tensor
from .text import Vocabulary

MAGIC = b"MAGNET\x01"


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CodecError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = self.take(4 * count)
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        return name, arr


def save_checkpoint(path: str, model: GroundingModel, optimizer: Adam | None,
                    step: int) -> None:
    parts = [MAGIC]
    config_b = config_to_text(model.cfg).encode("utf-8")
    vocab_b = "\n".join(model.vocab.tokens()).encode("utf-8")
    parts.append(struct.pack("<I", len(config_b)) + config_b)
    parts.append(struct.pack("<I", len(vocab_b)) + vocab_b)
    parts.append(struct.pack("<Q", step))
    parts.append(struct.pack("<Q", optimizer.t if optimizer else 0))

    param_names = sorted(model.params)
    parts.append(struct.pack("<I", len(param_names)))
    parts.extend(_pack_record(n, model.params[n].data) for n in param_names)

    opt_arrays = optimizer.state_arrays() if optimizer else {}
    opt_names = sorted(opt_arrays)
    parts.append(struct.pack("<I", len(opt_names)))
    parts.extend(_pack_record(n, opt_arrays[n]) for n in opt_names)

    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str) -> tuple[GroundingModel, dict[str, np.ndarray], int, int]:
    """Rebuild the model; returns (model, optimizer arrays, step, opt counter)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CodecError(f"{path}: bad magic {blob[:7]!r} (format/version mismatch)")
    rd = _Reader(blob, path)
    rd.take(len(MAGIC))
    cfg = config_from_text(rd.take(rd.u32()).decode("utf-8"))
    tokens = rd.take(rd.u32()).decode("utf-8").split("\n")
    vocab = Vocabulary({tok: i for i, tok in enumerate(tokens)})
    step = rd.u64()
    opt_t = rd.u64()

    params: dict[str, Tensor] = {}
    for _ in range(rd.u32()):
        name, arr = rd.record()
        params[name] = Tensor(arr, requires_grad=True)
    opt_arrays: dict[str, np.ndarray] = {}
    for _ in range(rd.u32()):
        name, arr = rd.record()
        opt_arrays[name] = arr
    if rd.pos != len(blob):
        raise CodecError(f"{path}: {len(blob) - rd.pos} trailing bytes")

    _restore_embedding_flag(cfg, params)
    model = GroundingModel(cfg=cfg, vocab=vocab, params=params)
    return model, opt_arrays, step, opt_t


def _restore_embedding_flag(cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    """File-sourced embeddings are frozen; the same rule applied at build time."""
    from_file = bool(cfg.embedding_file) and not cfg.no_embedding_file
    if "embed.table" in params and from_file:
        params["embed.table"].requires_grad = False


def quantize_params(model: GroundingModel) -> None:
    """Round every parameter to float32 resolution in place.

    After this, a save/load round trip is value-exact, so forward outputs
    match bitwise.
    """
    for p in model.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
