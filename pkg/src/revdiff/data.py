"""Synthetic 3D phantoms and the IDMV volume file format.

Phantoms are sums of axis-aligned soft ellipsoids (Gaussian falloff)
renormalized to [0,1]; they stand in for resampled, normalized medical
volumes while keeping the task structure (smooth blobs on a dark
background). The IDMV format is deliberately trivial and bit-exact:

    magic   4 bytes  b"IDMV"
    version u32 LE   1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim * u32 LE
    data    raw little-endian floats, C order

so the header for a 3-D volume is 4+4+1+1+12 = 22 bytes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError
from .rng import Prng

MAGIC = b"IDMV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

VOLUME_PATTERN = "vol_%05d.idmv"


@dataclass
class PhantomSpec:
    edge: int = 16
    n_ellipsoids: int = 3
    intensity_lo: float = 0.4
    intensity_hi: float = 1.0
    sigma: float = 1.0  # falloff scale multiplier, in voxels of extra radius
    seed: int = 0

    def validate(self):
        if not 1 <= self.n_ellipsoids <= 4:
            raise DomainError(f"n_ellipsoids must be in 1..4, got {self.n_ellipsoids}")
        if self.edge < 4:
            raise ShapeError(f"edge too small: {self.edge}")
        if not 0 < self.intensity_lo <= self.intensity_hi:
            raise DomainError("intensity range must satisfy 0 < lo <= hi")


@dataclass
class Volume:
    data: np.ndarray  # [E,E,E], values in [0,1]
    source_id: str = ""
    seed: int = 0


def soft_ellipsoid(edge: int, center, radii, amplitude: float) -> np.ndarray:
    """amplitude * exp(-0.5 * sum(((x - c)/r)^2)) sampled on an edge^3 grid."""
    g = np.indices((edge, edge, edge), dtype=np.float64)
    d2 = sum(((g[k] - center[k]) / radii[k]) ** 2 for k in range(3))
    return amplitude * np.exp(-0.5 * d2)


def normalize(t: np.ndarray) -> np.ndarray:
    """(t - min) / (max - min); rejects constant input."""
    lo = float(t.min())
    hi = float(t.max())
    if hi - lo <= 0.0:
        raise DomainError("normalize: constant input has no range")
    return (t - lo) / (hi - lo)


def gen_phantom(spec: PhantomSpec) -> Volume:
    spec.validate()
    prng = Prng(spec.seed)
    E = spec.edge
    vol = np.zeros((E, E, E), dtype=np.float64)
    for _ in range(spec.n_ellipsoids):
        u = prng.uniform(7)
        center = [E * (0.25 + 0.5 * u[k]) for k in range(3)]
        radii = [spec.sigma + E * (0.12 + 0.18 * u[3 + k]) for k in range(3)]
        amp = spec.intensity_lo + (spec.intensity_hi - spec.intensity_lo) * u[6]
        vol += soft_ellipsoid(E, center, radii, amp)
    vol = normalize(vol)
    if vol.max() - vol.min() < 0.1:
        raise DomainError("generated phantom is near-constant")  # unreachable post-normalize
    return Volume(vol.astype(np.float32), source_id=f"phantom-{spec.seed}", seed=spec.seed)


def gen_dataset(seed: int, n: int, edge: int) -> list[Volume]:
    """n phantoms with per-volume derived seeds; deterministic in (seed, n, edge)."""
    master = Prng(seed)
    vols = []
    for i in range(n):
        child = int(master.u64(1)[0])
        k = 1 + (i % 4)
        vols.append(gen_phantom(PhantomSpec(edge=edge, n_ellipsoids=k, seed=child)))
    return vols


# ---------------------------------------------------------------------------
# IDMV files


def volume_write(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 5:
        raise ShapeError(f"volume rank must be 1..5, got {arr.ndim}")
    header = MAGIC + struct.pack("<I", VERSION)
    header += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(
        "<f4" if arr.dtype == np.float32 else "<f8"
    ).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def volume_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    code, ndim = struct.unpack_from("<BB", raw, 8)
    if code not in _DTYPES or not 1 <= ndim <= 5:
        raise FormatError(f"{path}: bad dtype/ndim bytes")
    off = 10
    if len(raw) < off + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    dt = _DTYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) != off + need:
        raise FormatError(f"{path}: truncated payload ({len(raw) - off} of {need} bytes)")
    return np.frombuffer(raw[off:], dtype=dt).reshape(dims).copy()


def write_dataset(out_dir, vols) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, v in enumerate(vols):
        p = os.path.join(out_dir, VOLUME_PATTERN % i)
        volume_write(p, v.data)
        paths.append(p)
    return paths


def read_dataset(dir_path) -> list[np.ndarray]:
    names = sorted(f for f in os.listdir(dir_path) if f.endswith(".idmv"))
    if not names:
        raise FormatError(f"no .idmv volumes in {dir_path}")
    return [volume_read(os.path.join(dir_path, n)) for n in names]
