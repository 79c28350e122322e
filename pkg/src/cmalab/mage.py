"""MAGE1 binary field dumps and solver checkpoints (see docs/format.md)."""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, UnsupportedFormat
from .lattice import HermitianField, Mode, PeriodicGrid, ScalarField

MAGIC = b"MAGE1"
_MODE_CODES = {Mode.FULL: 0, Mode.REDUCED: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


def _header(grid):
    head = MAGIC + struct.pack("<BB", grid.n_complex, _MODE_CODES[grid.mode])
    return head + struct.pack(f"<{grid.ndim}I", *grid.resolution)


def encode(field):
    """Bytes of a ScalarField or HermitianField in MAGE1 layout."""
    grid = field.grid
    if isinstance(field, ScalarField):
        body = np.ascontiguousarray(field.values, dtype="<f8")
    elif isinstance(field, HermitianField):
        n = grid.n_complex
        per_node = [field.diag[j] for j in range(n)]
        for o in field.off:
            per_node.extend([o.real, o.imag])
        body = np.ascontiguousarray(np.stack(per_node, axis=-1), dtype="<f8")
    else:
        raise TypeError(f"cannot encode {type(field).__name__}")
    return _header(grid) + body.tobytes()


def decode(data, kind=None):
    """Parse MAGE1 bytes into a field.

    ``kind`` is "scalar" or "hermitian"; it is only needed when the payload
    length fits both (n_complex = 1, where a Hermitian node holds one value).
    """
    if len(data) < 7:
        raise CorruptCheckpoint("file shorter than the MAGE1 header")
    if data[:5] != MAGIC:
        if data[:4] == MAGIC[:4]:
            raise UnsupportedFormat(f"unsupported format version {data[:5]!r}")
        raise UnsupportedFormat(f"bad magic {data[:5]!r}")
    n, code = struct.unpack("<BB", data[5:7])
    if n not in (1, 2) or code not in _CODE_MODES:
        raise CorruptCheckpoint(f"invalid header fields n_complex={n} mode={code}")
    mode = _CODE_MODES[code]
    ndim = 2 * n if mode is Mode.FULL else n
    hdr = 7 + 4 * ndim
    if len(data) < hdr:
        raise CorruptCheckpoint("truncated resolution header")
    res = struct.unpack(f"<{ndim}I", data[7:hdr])
    grid = PeriodicGrid(n, mode, tuple(int(r) for r in res))
    payload = len(data) - hdr
    if payload % 8:
        raise CorruptCheckpoint("payload is not a whole number of float64 values")
    count = payload // 8
    nodes = grid.node_count
    fits = {"scalar": count == nodes, "hermitian": count == nodes * n * n}
    if kind is None:
        matches = [k for k, ok in fits.items() if ok]
        if not matches:
            raise CorruptCheckpoint(f"payload holds {count} values, expected {nodes} or {nodes * n * n}")
        kind = matches[0]
    elif not fits.get(kind, False):
        raise CorruptCheckpoint(f"payload length does not match a {kind} field on {res}")
    values = np.frombuffer(data, dtype="<f8", offset=hdr).astype(float)
    if kind == "scalar":
        return ScalarField(grid, values.reshape(grid.shape))
    per = values.reshape(grid.shape + (n * n,))
    diag = np.stack([per[..., j] for j in range(n)])
    off = np.stack([per[..., n + 2 * i] + 1j * per[..., n + 2 * i + 1] for i in range(n * (n - 1) // 2)]) if n > 1 else np.zeros((0,) + grid.shape, complex)
    return HermitianField(grid, diag, off)


def write_field(path, field):
    Path(path).write_bytes(encode(field))


def read_field(path, kind=None):
    return decode(Path(path).read_bytes(), kind=kind)


def save_checkpoint(path, solution):
    """Write ``<path>`` (potential as MAGE1) and ``<path>.json`` (metadata)."""
    path = Path(path)
    write_field(path, solution.phi)
    meta = {
        "t": solution.t,
        "c_t": solution.c_t,
        "residual_sup": solution.residual_sup,
        "iterations": solution.newton_iters,
        "converged": solution.converged,
        "lam": solution.lam,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Return ``(phi, metadata)`` from a checkpoint pair."""
    path = Path(path)
    phi = read_field(path, kind="scalar")
    side = path.with_name(path.name + ".json")
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError:
        raise CorruptCheckpoint(f"missing sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable sidecar {side}: {exc}") from None
    for key in ("t", "c_t", "residual_sup", "iterations"):
        if key not in meta:
            raise CorruptCheckpoint(f"sidecar lacks {key!r}")
    return phi, meta
