"""Run manifests and the binary weight container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["RunManifest", "config_hash", "write_weights", "read_weights", "WeightFormatError", "MAGIC"]

MAGIC = b"NLAFW\x00\x01\x00"  # name, format version 1


class WeightFormatError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: list[str] = field(default_factory=list)
    gates: dict[str, bool] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_hash"] = self.config_hash
        return d

    def write(self, path) -> Path:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return Path(path)

    def write_sidecars(self) -> list[Path]:
        """Write ``<output>.manifest.json`` next to every output file."""
        paths = []
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
        for out in self.outputs:
            p = Path(str(out) + ".manifest.json")
            p.write_text(text)
            paths.append(p)
        return paths


# layout: MAGIC | u32 count | per tensor (u16 name_len, name, u8 ndim, u32 dims...) |
#         f64 data of every tensor in order | config JSON | u64 config_len
def write_weights(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(cfg + struct.pack("<Q", len(cfg)))
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise WeightFormatError(f"{path}: not a weight container (bad magic)")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    (clen,) = struct.unpack_from("<Q", buf, len(buf) - 8)
    if pos + clen + 8 != len(buf):
        raise WeightFormatError(f"{path}: truncated or corrupt container")
    return tensors, json.loads(buf[pos:pos + clen].decode("utf-8"))
