"""Binary file formats: grids (CGRD), k-space stacks (KSPC), coil maps (CSMS), masks (MASK), checkpoints (DPEN).

All multi-byte fields are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .forward import CoilSensitivities, SamplingMask
from .nn import ConvNet, Denoiser, EnergyNet, MuseEnergy
from .train import AdamState

VERSION = 1
_KIND_CODES = {"1d": 1, "2d": 2}


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _expect(buf: bytes, magic: bytes) -> None:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")


# --------------------------------------------------------------------------
# grids

def encode_grid(g: np.ndarray) -> bytes:
    g = np.asarray(g, dtype=np.complex128)
    if g.ndim != 2:
        raise FormatError("CGRD holds a single 2D grid")
    h, w = g.shape
    body = np.ascontiguousarray(g).astype("<c16").tobytes()
    return b"CGRD" + struct.pack("<HII", VERSION, h, w) + body


def decode_grid(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    _expect(buf[offset:offset + 4], b"CGRD")
    version, h, w = struct.unpack_from("<HII", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported CGRD version {version}")
    start = offset + 14
    n = h * w * 16
    if len(buf) < start + n:
        raise FormatError("truncated CGRD payload")
    g = np.frombuffer(buf, dtype="<c16", count=h * w, offset=start).reshape(h, w).astype(np.complex128)
    return g, start + n


def save_grid(path, g: np.ndarray) -> None:
    Path(path).write_bytes(encode_grid(g))


def load_grid(path) -> np.ndarray:
    return decode_grid(_read(path))[0]


def _save_stack(path, magic: bytes, stack: np.ndarray) -> None:
    stack = np.asarray(stack, dtype=np.complex128)
    parts = [magic, struct.pack("<HI", VERSION, stack.shape[0])]
    parts += [encode_grid(g) for g in stack]
    Path(path).write_bytes(b"".join(parts))


def _load_stack(path, magic: bytes) -> np.ndarray:
    buf = _read(path)
    _expect(buf, magic)
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    off = 10
    grids = []
    for _ in range(n):
        g, off = decode_grid(buf, off)
        grids.append(g)
    return np.stack(grids)


def save_kspace(path, y: np.ndarray) -> None:
    _save_stack(path, b"KSPC", y)


def load_kspace(path) -> np.ndarray:
    return _load_stack(path, b"KSPC")


def save_csm(path, csm: CoilSensitivities) -> None:
    _save_stack(path, b"CSMS", csm.maps)


def load_csm(path) -> CoilSensitivities:
    return CoilSensitivities(_load_stack(path, b"CSMS"))


# --------------------------------------------------------------------------
# masks

def save_mask(path, mask: SamplingMask) -> None:
    h, w = mask.shape
    bits = np.packbits(mask.pattern.ravel()).tobytes()
    header = b"MASK" + struct.pack("<BII", _KIND_CODES[mask.kind], h, w)
    # ACS size is appended after the pattern so older readers can ignore it
    Path(path).write_bytes(header + bits + struct.pack("<I", mask.acs_lines))


def load_mask(path) -> SamplingMask:
    buf = _read(path)
    _expect(buf, b"MASK")
    code, h, w = struct.unpack_from("<BII", buf, 4)
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise FormatError(f"unknown mask kind code {code}")
    nbytes = (h * w + 7) // 8
    bits = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=13)
    pattern = np.unpackbits(bits)[:h * w].reshape(h, w).astype(bool)
    acs = struct.unpack_from("<I", buf, 13 + nbytes)[0] if len(buf) >= 17 + nbytes else 0
    return SamplingMask(kinds[code], pattern, acs)


# --------------------------------------------------------------------------
# checkpoints

def _checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def _conv_layers(net):
    trunk = net.trunk if isinstance(net, EnergyNet) else net.f
    return trunk


def encode_checkpoint(net, meta: dict | None = None, opt: AdamState | None = None) -> bytes:
    """Serialize a model.

    Layout: ``DPEN``, u16 version, u16 layer count, per-layer u32 x4 shape
    ``(kh, kw, c_in, c_out)``, then each layer's weights and biases as f64
    in declaration order.  An :class:`EnergyNet` head is stored as a final
    ``(1, 1, width, 1)`` layer without bias.  Then an optional optimizer
    block (u8 flag, u64 step, first and second moments), a u32-length JSON
    metadata block, and finally a u64 checksum of everything before it.
    """
    trunk = _conv_layers(net)
    shapes = [w.shape for w in trunk.weights]
    has_head = isinstance(net, EnergyNet)
    if has_head:
        shapes.append((1, 1, net.width, 1))
    parts = [b"DPEN", struct.pack("<HH", VERSION, len(shapes))]
    parts += [struct.pack("<IIII", *s) for s in shapes]
    for w, b in zip(trunk.weights, trunk.biases):
        parts += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
    if has_head:
        parts.append(net.head.astype("<f8").tobytes())
    if opt is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, opt.step))
        parts += [a.astype("<f8").tobytes() for a in opt.m + opt.v]
    meta = dict(meta or {})
    meta["kind"] = net.kind
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob]
    payload = b"".join(parts)
    return payload + struct.pack("<Q", _checksum(payload))


def decode_checkpoint(buf: bytes):
    """Inverse of :func:`encode_checkpoint`; returns ``(net, meta, opt_or_None)``."""
    if len(buf) < 16:
        raise FormatError("checkpoint too short")
    payload, (chk,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _checksum(payload) != chk:
        raise FormatError("checkpoint checksum mismatch")
    _expect(payload, b"DPEN")
    version, n_layers = struct.unpack_from("<HH", payload, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<IIII", payload, off))
        off += 16

    def take(n):
        nonlocal off
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return a

    # a 1x1 single-output last layer is an energy head and carries no bias
    arrays = []
    for i, s in enumerate(shapes):
        arrays.append(take(int(np.prod(s))).reshape(s))
        is_head = i == n_layers - 1 and s[0] == 1 and s[1] == 1 and s[3] == 1
        arrays.append(None if is_head else take(s[3]))
    has_opt = struct.unpack_from("<B", payload, off)[0]
    off += 1
    opt_step = None
    if has_opt:
        (opt_step,) = struct.unpack_from("<Q", payload, off)
        off += 8
        opt_off = off
        n_total = sum(int(np.prod(s)) + (0 if arrays[2 * i + 1] is None else s[3]) for i, s in enumerate(shapes))
        off += 16 * n_total
    (mlen,) = struct.unpack_from("<I", payload, off)
    meta = json.loads(payload[off + 4:off + 4 + mlen].decode())

    kind = meta.get("kind")
    weights = [arrays[2 * i] for i in range(n_layers)]
    biases = [arrays[2 * i + 1] for i in range(n_layers)]
    if kind == "deepen":
        net = EnergyNet(ConvNet(weights[:-1], biases[:-1]), weights[-1].reshape(-1))
    elif kind in ("muse", "denoiser"):
        cls = MuseEnergy if kind == "muse" else Denoiser
        net = cls(ConvNet(weights, biases))
    else:
        raise FormatError(f"unknown model kind {kind!r}")

    opt = None
    if opt_step is not None:
        off = opt_off
        params = net.params()
        ms, vs = [], []
        for dest in (ms, vs):
            for p in params:
                dest.append(np.frombuffer(payload, dtype="<f8", count=p.size, offset=off).astype(np.float64).reshape(p.shape))
                off += 8 * p.size
        opt = AdamState(int(opt_step), ms, vs)
    return net, meta, opt


def save_checkpoint(path, net, meta: dict | None = None, opt: AdamState | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(net, meta, opt))


def load_checkpoint(path):
    return decode_checkpoint(_read(path))


def checkpoint_checksum(path) -> str:
    return hashlib.sha256(_read(path)).hexdigest()


# --------------------------------------------------------------------------
# previews and tables

def write_pgm(path, img: np.ndarray, vmax: float | None = None) -> None:
    """8-bit binary PGM of ``|img|`` scaled to ``[0, vmax]``."""
    mag = np.abs(np.asarray(img))
    vmax = float(mag.max()) if vmax is None else float(vmax)
    scaled = np.zeros_like(mag) if vmax <= 0 else np.clip(mag / vmax, 0, 1)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = _read(path)
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
