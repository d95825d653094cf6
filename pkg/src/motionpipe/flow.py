"""Dense optical flow estimation and grid-pooled flow descriptors.

Flow between consecutive grayscale frames is estimated with the classic
Horn-Schunck scheme (brightness constancy plus quadratic smoothness,
solved by Jacobi-style neighbour averaging).  A flow field is then pooled
over a G x G grid into a fixed-length nonnegative descriptor: per-cell
axis magnitudes, overall mean magnitude, and a magnitude-weighted
orientation histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

# Weighted 8-neighbour average used by the Horn-Schunck update.
_AVG_KERNEL = np.array(
    [
        [1.0 / 12, 1.0 / 6, 1.0 / 12],
        [1.0 / 6, 0.0, 1.0 / 6],
        [1.0 / 12, 1.0 / 6, 1.0 / 12],
    ]
)

MIN_FRAME_SIDE = 8


@dataclass(frozen=True)
class Frame:
    """A grayscale frame with intensities in [0, 1]."""

    intensity: np.ndarray  # H x W, float64

    def __post_init__(self):
        arr = np.asarray(self.intensity, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"frame intensity must be 2-D, got shape {arr.shape}")
        h, w = arr.shape
        if h < MIN_FRAME_SIDE or w < MIN_FRAME_SIDE:
            raise ValueError(f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {h}x{w}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("frame intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "intensity", arr)

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (u, v) between two frames, in pixels/frame."""

    u: np.ndarray  # H x W horizontal displacement
    v: np.ndarray  # H x W vertical displacement

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be 2-D and equal-shaped, got {u.shape} vs {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow components must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class FlowDescriptor:
    """Fixed-length nonnegative descriptor of one flow field.

    Layout: cells row-major; within each cell
    [u magnitude, v magnitude, mean magnitude, hist(0) .. hist(B-1)],
    so the total length is G*G*(3+B).
    """

    values: np.ndarray
    grid: int
    bins: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        expected = self.grid * self.grid * (3 + self.bins)
        if vals.shape != (expected,):
            raise ValueError(f"descriptor must have length {expected}, got {vals.shape}")
        if not np.all(np.isfinite(vals)) or vals.min() < 0.0:
            raise ValueError("descriptor entries must be finite and nonnegative")
        object.__setattr__(self, "values", vals)


def descriptor_length(grid: int, bins: int) -> int:
    return grid * grid * (3 + bins)


def _neighbour_average(x: np.ndarray) -> np.ndarray:
    """Weighted 8-neighbour average with replicated borders."""
    p = np.pad(x, 1, mode="edge")
    out = np.zeros_like(x)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            w = _AVG_KERNEL[dy + 1, dx + 1]
            if w == 0.0:
                continue
            out += w * p[1 + dy : 1 + dy + x.shape[0], 1 + dx : 1 + dx + x.shape[1]]
    return out


def _central_diff(img: np.ndarray, axis: int) -> np.ndarray:
    """Central difference with replicated borders (half slope at edges)."""
    p = np.pad(img, 1, mode="edge")
    if axis == 0:
        return (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0


def estimate_flow(prev: Frame, curr: Frame, alpha: float = 1.0, iterations: int = 100) -> FlowField:
    """Estimate dense Horn-Schunck flow from ``prev`` to ``curr``.

    Runs exactly ``iterations`` Jacobi averaging updates of the coupled
    (u, v) field minimising brightness constancy plus alpha^2-weighted
    smoothness.  Deterministic: identical inputs give identical output.
    """
    if prev.intensity.shape != curr.intensity.shape:
        raise ValueError(
            f"frame dimensions differ: {prev.intensity.shape} vs {curr.intensity.shape}"
        )
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")

    avg = 0.5 * (prev.intensity + curr.intensity)
    ix = _central_diff(avg, axis=1)
    iy = _central_diff(avg, axis=0)
    it = curr.intensity - prev.intensity

    denom = alpha * alpha + ix * ix + iy * iy
    u = np.zeros_like(avg)
    v = np.zeros_like(avg)
    for _ in range(iterations):
        u_bar = _neighbour_average(u)
        v_bar = _neighbour_average(v)
        update = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * update
        v = v_bar - iy * update
    return FlowField(u=u, v=v)


def _cell_slices(size: int, grid: int) -> list[slice]:
    """Split ``size`` pixels into ``grid`` equal cells, remainder to the last."""
    step = size // grid
    slices = []
    for g in range(grid):
        start = g * step
        stop = (g + 1) * step if g < grid - 1 else size
        slices.append(slice(start, stop))
    return slices


def orientation_bin(theta, bins: int):
    """Map angles in (-pi, pi] to indices of ``bins`` equal bins over [-pi, pi).

    The value pi wraps to -pi; each bin is half-open [low, high), so an
    angle exactly on an edge joins the bin that edge opens.  Accepts
    scalars or arrays.
    """
    t = np.where(np.asarray(theta) >= np.pi, -np.pi, theta)
    idx = np.floor((t + np.pi) * bins / (2.0 * np.pi)).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def describe_flow(flow: FlowField, grid: int = 4, bins: int = 8) -> FlowDescriptor:
    """Pool a flow field into a G x G grid descriptor.

    Per cell: the mean positive and mean negative rectified parts of each
    axis are combined into one magnitude per axis, plus the mean overall
    magnitude sqrt(u^2+v^2), plus a B-bin magnitude-weighted orientation
    histogram, L1-normalised (an all-zero cell yields a uniform histogram).
    """
    if grid < 1:
        raise ValueError("grid must be at least 1")
    if bins < 2:
        raise ValueError("bins must be at least 2")
    if flow.height < grid or flow.width < grid:
        raise ValueError(f"flow field {flow.height}x{flow.width} too small for grid {grid}")

    u, v = flow.u, flow.v
    mag = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)

    rows = _cell_slices(flow.height, grid)
    cols = _cell_slices(flow.width, grid)
    out = np.empty(descriptor_length(grid, bins))
    pos = 0
    for rs in rows:
        for cs in cols:
            cu = u[rs, cs]
            cv = v[rs, cs]
            cm = mag[rs, cs]
            ct = theta[rs, cs]
            u_mag = np.maximum(cu, 0.0).mean() + np.maximum(-cu, 0.0).mean()
            v_mag = np.maximum(cv, 0.0).mean() + np.maximum(-cv, 0.0).mean()
            idx = orientation_bin(ct.ravel(), bins)
            hist = np.bincount(idx, weights=cm.ravel(), minlength=bins)
            total = hist.sum()
            if total > 0.0:
                hist /= total
            else:
                hist[:] = 1.0 / bins
            out[pos : pos + 3] = (u_mag, v_mag, cm.mean())
            out[pos + 3 : pos + 3 + bins] = hist
            pos += 3 + bins
    return FlowDescriptor(values=out, grid=grid, bins=bins)


def read_pgm(path) -> Frame:
    """Read a binary (P5) 8-bit PGM file; intensity = byte / 255."""
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header")
        return data[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed PGM header") from exc
    if maxval < 1 or maxval > 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise DataFormatError(f"{path}: truncated PGM raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return Frame(intensity=arr.astype(np.float64) / 255.0)


def write_pgm(frame: Frame, path) -> None:
    """Write a frame as a binary (P5) 8-bit PGM file."""
    arr = np.clip(np.rint(frame.intensity * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())
