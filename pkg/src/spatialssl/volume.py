"""Synthetic phantom volumes, intensity windowing, foreground tests, patch extraction.

Raw volume file layout (``<stem>.raw`` + ``<stem>.meta``):

* ``.raw``  -- little-endian IEEE-754 float32 voxels, z-major (x varies fastest),
  exactly ``z*y*x*4`` bytes, no header.
* ``.meta`` -- UTF-8 text, one ``key = value`` per line, ``#`` comments allowed.
  Required keys: ``format`` (``spatialssl-raw``), ``version`` (``1``),
  ``dtype`` (``float32``), ``byte_order`` (``little``), ``shape`` (3 ints,
  z y x), ``spacing`` (3 floats, mm), ``origin`` (3 floats, mm), ``hu``
  (``true``/``false``).  Optional: ``volume_id``, ``seed``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RAW_FORMAT = "spatialssl-raw"
RAW_VERSION = 1

AIR_HU = -1000.0
BODY_HU = 0.0


class BoundsError(IndexError):
    def __init__(self, axis: int, msg: str):
        super().__init__(f"axis {axis}: {msg}")
        self.axis = axis


def _triple(x, name, kind=float) -> tuple:
    t = tuple(kind(v) for v in np.broadcast_to(np.asarray(x), (3,)).tolist())
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components")
    return t


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hu: bool = True
    volume_id: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3-D grid, got shape {vox.shape}")
        if not np.issubdtype(vox.dtype, np.floating):
            vox = vox.astype(np.float64)
        if not np.all(np.isfinite(vox)):
            raise ValueError("voxel intensities must be finite")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.shape) * np.asarray(self.spacing)


@dataclass(frozen=True)
class SubRegion:
    """A box of voxels cut from a volume, with its physical center in mm."""

    volume_id: str
    start: tuple[int, int, int]
    size: tuple[int, int, int]
    center: np.ndarray
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if min(self.size) < 1:
            raise ValueError(f"region size must be >= 1 per axis, got {self.size}")

    def recomputed_center(self) -> np.ndarray:
        return physical_center(self.start, self.size, self.spacing, self.origin)


def physical_center(start, size, spacing, origin) -> np.ndarray:
    start = np.asarray(start, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    return np.asarray(origin, dtype=np.float64) + (start + size / 2.0) * np.asarray(spacing, dtype=np.float64)


@dataclass(frozen=True)
class WindowSpec:
    level: float = 200.0
    width: float = 800.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


@dataclass(frozen=True)
class Organ:
    center: tuple[float, float, float]  # normalized [0, 1]^3, z y x
    radius_mm: float
    intensity_hu: float
    jitter_mm: float = 4.0


DEFAULT_ORGANS = (
    Organ((0.32, 0.36, 0.34), 22.0, 320.0),
    Organ((0.30, 0.62, 0.64), 18.0, 160.0),
    Organ((0.55, 0.48, 0.28), 20.0, 480.0),
    Organ((0.68, 0.34, 0.66), 16.0, 240.0),
    Organ((0.74, 0.66, 0.42), 18.0, 560.0),
    Organ((0.50, 0.58, 0.72), 15.0, 400.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (40, 48, 48)
    spacing: tuple[float, float, float] = (5.0, 4.0, 4.0)
    organs: tuple[Organ, ...] = DEFAULT_ORGANS
    body_semi_axes: tuple[float, float, float] = (0.46, 0.42, 0.44)  # fraction of extent
    body_edge_mm: float = 6.0
    noise_hu: float = 10.0
    origin_range_mm: float = 250.0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape: must be 3 positive voxel counts, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing: must be 3 positive values, got {self.spacing}")
        if len(self.organs) < 3:
            raise ValueError(f"organs: need at least 3, got {len(self.organs)}")
        for i, o in enumerate(self.organs):
            if not o.radius_mm > 0:
                raise ValueError(f"organs[{i}].radius_mm: must be positive")
            if o.jitter_mm < 0:
                raise ValueError(f"organs[{i}].jitter_mm: must be non-negative")
            if len(o.center) != 3:
                raise ValueError(f"organs[{i}].center: must have 3 components")
        if self.body_edge_mm <= 0:
            raise ValueError("body_edge_mm: must be positive")
        if self.noise_hu < 0:
            raise ValueError("noise_hu: must be non-negative")


def _axis_coords(n: int, spacing: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * spacing


def synth_volume(spec: PhantomSpec, instance_seed: int) -> Volume:
    """Deterministic phantom for ``(spec, instance_seed)``.

    A smooth ellipsoidal body at ``BODY_HU`` sits in air; each organ is an
    isotropic Gaussian blob (sigma = radius / 2, truncated at 3 sigma) whose
    center is jittered per instance.  Voxels are rounded to float32 so files
    written by :func:`save_raw` reload bit-exactly.
    """
    spec.validate()
    rng = np.random.default_rng([int(spec.seed), int(instance_seed)])
    shape = tuple(int(n) for n in spec.shape)
    spacing = np.asarray(spec.spacing, dtype=np.float64)
    extent = np.asarray(shape) * spacing
    zc, yc, xc = (_axis_coords(n, s) for n, s in zip(shape, spacing))

    semi = np.asarray(spec.body_semi_axes) * extent
    body_center = extent / 2.0 + rng.normal(0.0, 2.0, 3)
    rz = ((zc - body_center[0]) / semi[0])[:, None, None]
    ry = ((yc - body_center[1]) / semi[1])[None, :, None]
    rx = ((xc - body_center[2]) / semi[2])[None, None, :]
    radial = np.sqrt(rz ** 2 + ry ** 2 + rx ** 2)
    # signed distance to the ellipsoid shell, approximated in mm along the mean semi-axis
    body = 1.0 / (1.0 + np.exp((radial - 1.0) * semi.mean() / spec.body_edge_mm))
    vol = AIR_HU + (BODY_HU - AIR_HU) * body

    for organ in spec.organs:
        center = np.asarray(organ.center) * extent + rng.normal(0.0, 1.0, 3) * organ.jitter_mm
        sigma = organ.radius_mm / 2.0
        reach = 3.0 * sigma
        lo = np.maximum(np.floor((center - reach) / spacing - 0.5).astype(int), 0)
        hi = np.minimum(np.ceil((center + reach) / spacing + 0.5).astype(int), shape)
        if np.any(hi <= lo):
            continue
        dz = (zc[lo[0]:hi[0]] - center[0])[:, None, None]
        dy = (yc[lo[1]:hi[1]] - center[1])[None, :, None]
        dx = (xc[lo[2]:hi[2]] - center[2])[None, None, :]
        r2 = dz ** 2 + dy ** 2 + dx ** 2
        blob = np.where(r2 <= reach * reach, np.exp(-r2 / (2.0 * sigma * sigma)), 0.0)
        vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += (organ.intensity_hu - BODY_HU) * blob * \
            body[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]

    if spec.noise_hu > 0:
        vol = vol + rng.normal(0.0, spec.noise_hu, shape) * body
    origin = rng.uniform(-spec.origin_range_mm, spec.origin_range_mm, 3)
    voxels = vol.astype(np.float32)
    return Volume(voxels, tuple(spacing), tuple(origin), hu=True,
                  volume_id=f"phantom-{spec.seed}-{instance_seed}")


def apply_window(v: Volume, w: WindowSpec = WindowSpec()) -> Volume:
    lo = w.level - w.width / 2.0
    out = np.clip((np.asarray(v.voxels, dtype=np.float64) - lo) / w.width, 0.0, 1.0)
    return Volume(out, v.spacing, v.origin, hu=False, volume_id=v.volume_id)


def _check_box(shape, start, size) -> tuple[tuple[int, ...], tuple[int, ...]]:
    start = tuple(int(s) for s in start)
    size = tuple(int(s) for s in size)
    for axis in range(3):
        if size[axis] < 1:
            raise BoundsError(axis, f"size {size[axis]} < 1")
        if start[axis] < 0 or start[axis] + size[axis] > shape[axis]:
            raise BoundsError(axis, f"[{start[axis]}, {start[axis] + size[axis]}) outside [0, {shape[axis]})")
    return start, size


def _box(v: Volume, start, size) -> np.ndarray:
    start, size = _check_box(v.shape, start, size)
    return v.voxels[start[0]:start[0] + size[0], start[1]:start[1] + size[1], start[2]:start[2] + size[2]]


def foreground_fraction(v: Volume, start, size, threshold: float = 0.05) -> float:
    block = _box(v, start, size)
    return float(np.count_nonzero(block > threshold)) / block.size


def extract(v: Volume, start, size) -> SubRegion:
    start, size = _check_box(v.shape, start, size)
    block = np.array(_box(v, start, size))
    block.setflags(write=False)
    return SubRegion(v.volume_id, start, size, physical_center(start, size, v.spacing, v.origin),
                     block, v.spacing, v.origin)


def mm_to_voxels(extent_mm, spacing) -> tuple[int, int, int]:
    """Spacing-aware voxel extent, rounded to nearest, at least 1."""
    ext = np.broadcast_to(np.asarray(extent_mm, dtype=np.float64), (3,))
    n = np.maximum(np.rint(ext / np.asarray(spacing, dtype=np.float64)), 1).astype(int)
    return tuple(int(i) for i in n)


# --------------------------------------------------------------------------
# raw files


def _fmt_floats(xs) -> str:
    return " ".join(repr(float(x)) for x in xs)


def save_raw(v: Volume, stem: str | Path, seed: int | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    raw, meta = stem.with_suffix(".raw"), stem.with_suffix(".meta")
    data = np.ascontiguousarray(v.voxels, dtype="<f4")
    raw.write_bytes(data.tobytes(order="C"))
    lines = [
        f"format = {RAW_FORMAT}",
        f"version = {RAW_VERSION}",
        "dtype = float32",
        "byte_order = little",
        "shape = " + " ".join(str(n) for n in v.shape),
        "spacing = " + _fmt_floats(v.spacing),
        "origin = " + _fmt_floats(v.origin),
        f"hu = {'true' if v.hu else 'false'}",
        f"volume_id = {v.volume_id}",
    ]
    if seed is not None:
        lines.append(f"seed = {seed}")
    meta.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return raw, meta


def read_meta(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_raw(stem: str | Path) -> Volume:
    stem = Path(stem)
    meta = read_meta(stem.with_suffix(".meta"))
    for key in ("format", "version", "dtype", "byte_order", "shape", "spacing", "origin", "hu"):
        if key not in meta:
            raise ValueError(f"{stem}.meta: missing key {key!r}")
    if meta["format"] != RAW_FORMAT or int(meta["version"]) != RAW_VERSION:
        raise ValueError(f"{stem}.meta: unsupported format {meta['format']} v{meta['version']}")
    if meta["dtype"] != "float32" or meta["byte_order"] != "little":
        raise ValueError(f"{stem}.meta: only little-endian float32 is supported")
    shape = tuple(int(n) for n in meta["shape"].split())
    data = stem.with_suffix(".raw").read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise ValueError(f"{stem}.raw: {len(data)} bytes, expected {expected}")
    voxels = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(voxels,
                  tuple(float(s) for s in meta["spacing"].split()),
                  tuple(float(s) for s in meta["origin"].split()),
                  hu=meta["hu"].lower() == "true",
                  volume_id=meta.get("volume_id", stem.name))
