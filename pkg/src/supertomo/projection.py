"""Parallel-beam geometry and the sparse line-length system matrix.

The image is an ``n_side x n_side`` grid of square pixels centred on the
origin and covering ``[-fov_radius, fov_radius]^2``.  Pixel values are
stored row-major: row ``r`` sits at height ``y = fov - (r + 1/2) h`` and
column ``c`` at abscissa ``x = -fov + (c + 1/2) h``, with ``h`` the pixel
side.  A ray with angle ``theta`` and offset ``t`` is the line
``x cos(theta) + y sin(theta) = t``; its matrix row holds the exact
intersection length of the line with every pixel it crosses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Geometry",
    "SystemMatrix",
    "build_system_matrix",
    "forward",
    "back",
    "column_sums",
    "row_sums",
]


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition geometry.

    ``angles`` and ``ray_offsets`` default to ``n_angles`` angles evenly
    spaced over ``[0, pi)`` and ``n_rays`` detector-bin centres evenly
    spanning ``[-sqrt(2) fov, sqrt(2) fov]``, i.e. the whole image
    diagonal.  ``fov_radius`` defaults to ``n_side / 2`` so that pixels
    have unit side.
    """

    n_side: int
    n_angles: int
    n_rays: int
    fov_radius: float | None = None
    angles: tuple[float, ...] | None = None
    ray_offsets: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_side < 1 or self.n_angles < 1 or self.n_rays < 1:
            raise ValueError(
                f"geometry sizes must be >= 1, got n_side={self.n_side}, "
                f"n_angles={self.n_angles}, n_rays={self.n_rays}"
            )
        fov = self.n_side / 2.0 if self.fov_radius is None else float(self.fov_radius)
        if not fov > 0:
            raise ValueError("fov_radius must be positive")
        object.__setattr__(self, "fov_radius", fov)

        if self.angles is None:
            angles = np.arange(self.n_angles) * (np.pi / self.n_angles)
        else:
            angles = np.asarray(self.angles, dtype=float)
        if angles.shape != (self.n_angles,):
            raise ValueError("len(angles) must equal n_angles")
        if np.any(angles < 0) or np.any(angles >= np.pi) or np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing within [0, pi)")
        object.__setattr__(self, "angles", tuple(float(a) for a in angles))

        if self.ray_offsets is None:
            half = np.sqrt(2.0) * fov
            width = 2.0 * half / self.n_rays
            offsets = -half + (np.arange(self.n_rays) + 0.5) * width
        else:
            offsets = np.asarray(self.ray_offsets, dtype=float)
        if offsets.shape != (self.n_rays,):
            raise ValueError("len(ray_offsets) must equal n_rays")
        object.__setattr__(self, "ray_offsets", tuple(float(t) for t in offsets))

    @property
    def n_pixels(self) -> int:
        return self.n_side * self.n_side

    @property
    def n_measurements(self) -> int:
        return self.n_angles * self.n_rays

    @property
    def pixel_size(self) -> float:
        return 2.0 * self.fov_radius / self.n_side

    def ray(self, i: int) -> tuple[float, float]:
        """(theta, t) of sinogram row ``i`` (angle-major ordering)."""
        return self.angles[i // self.n_rays], self.ray_offsets[i % self.n_rays]


@dataclass(frozen=True)
class SystemMatrix:
    """Discrete Radon operator with its geometry.

    ``matrix`` is an ``m x n`` CSR matrix with sorted indices and no
    duplicate entries.  Treat it as read-only.
    """

    matrix: sp.csr_matrix
    geometry: Geometry
    _transpose: sp.csr_matrix = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self._transpose is None:
            object.__setattr__(self, "_transpose", self.matrix.T.tocsr())

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def T(self) -> sp.csr_matrix:
        return self._transpose

    def restrict_rows(self, rows) -> sp.csr_matrix:
        return self.matrix[np.asarray(rows, dtype=np.intp)]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def _ray_segments(theta: float, t: float, n_side: int, fov: float):
    """Pixel indices and chord lengths of one ray through the image square."""
    c, s = np.cos(theta), np.sin(theta)
    # line: p(u) = t (c, s) + u (-s, c)
    px, py = t * c, t * s
    dx, dy = -s, c
    h = 2.0 * fov / n_side
    tiny = 1e-12 * h

    lo, hi = -np.inf, np.inf
    for p0, d in ((px, dx), (py, dy)):
        if abs(d) < 1e-15:
            if p0 < -fov or p0 > fov:
                return None
        else:
            u1, u2 = (-fov - p0) / d, (fov - p0) / d
            lo, hi = max(lo, min(u1, u2)), min(hi, max(u1, u2))
    if not hi - lo > tiny:
        return None

    grid = -fov + h * np.arange(n_side + 1)
    crossings = [np.array([lo, hi])]
    for p0, d in ((px, dx), (py, dy)):
        if abs(d) >= 1e-15:
            u = (grid - p0) / d
            crossings.append(u[(u > lo) & (u < hi)])
    u = np.unique(np.concatenate(crossings))
    lengths = np.diff(u)
    keep = lengths > tiny
    umid = 0.5 * (u[:-1] + u[1:])[keep]
    lengths = lengths[keep]

    xm, ym = px + umid * dx, py + umid * dy
    col = np.clip(np.floor((xm + fov) / h).astype(np.intp), 0, n_side - 1)
    row = np.clip(np.floor((fov - ym) / h).astype(np.intp), 0, n_side - 1)
    return row * n_side + col, lengths


def build_system_matrix(geom: Geometry) -> SystemMatrix:
    """Build R for ``geom`` with exact ray/pixel intersection lengths."""
    n_side, fov = geom.n_side, geom.fov_radius
    cols, vals, counts = [], [], np.zeros(geom.n_measurements, dtype=np.intp)
    i = 0
    for theta in geom.angles:
        for t in geom.ray_offsets:
            seg = _ray_segments(theta, t, n_side, fov)
            if seg is not None:
                j, w = seg
                cols.append(j)
                vals.append(w)
                counts[i] = j.size
            i += 1
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(cols) if cols else np.zeros(0, dtype=np.intp)
    data = np.concatenate(vals) if vals else np.zeros(0)
    mat = sp.csr_matrix(
        (data, indices, indptr), shape=(geom.n_measurements, geom.n_pixels)
    )
    # a ray along a grid line can hit the same pixel twice through clipping
    mat.sum_duplicates()
    mat.sort_indices()
    return SystemMatrix(mat, geom)


def _as_matrix(R):
    return R.matrix if isinstance(R, SystemMatrix) else R


def forward(R: SystemMatrix, x) -> np.ndarray:
    """Forward projection ``R x``; ``x`` may be flat or ``(n_side, n_side)``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != R.cols:
        raise ValueError(f"image has {x.size} pixels, matrix expects {R.cols}")
    return R.matrix @ x


def back(R: SystemMatrix, y) -> np.ndarray:
    """Back projection ``R^T y`` as a flat image vector."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != R.rows:
        raise ValueError(f"sinogram has {y.size} entries, matrix expects {R.rows}")
    return R.T @ y


def column_sums(R) -> np.ndarray:
    mat = _as_matrix(R)
    return np.asarray(mat.sum(axis=0)).ravel()


def row_sums(R) -> np.ndarray:
    mat = _as_matrix(R)
    return np.asarray(mat.sum(axis=1)).ravel()
