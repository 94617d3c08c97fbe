"""Fourier representation of real scalar fields on the unit torus.

The torus is [0, 1)^2 with unit Lebesgue measure and basis
``e_n(x) = exp(2*pi*i n.x)``, n in Z^2.  A field with cutoff N stores the
coefficient table on the square lattice ``|n|_inf <= N``; reality
(``coeff(-n) == conj(coeff(n))``) is canonicalized bitwise at construction
so that downstream identities can be tested at machine precision.

Tolerance ladder used throughout the package:

* ``EXACT_TOL = 1e-12``  for identities that hold in exact arithmetic,
* ``HARD_TOL  = 1e-9``   for validator hard failures (invariant broken).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np
import scipy.fft

EXACT_TOL = 1e-12
HARD_TOL = 1e-9

_TWO_PI_I = 2j * np.pi


class InvariantViolation(Exception):
    """A structural invariant (reality, cutoff, realness of a pairing) failed."""


def mode_range(cutoff: int) -> np.ndarray:
    """Integer mode indices -N..N along one axis."""
    return np.arange(-cutoff, cutoff + 1)


def mode_grids(cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    """Meshgrid (n1, n2) over the full lattice, 'ij' indexing."""
    n = mode_range(cutoff)
    return np.meshgrid(n, n, indexing="ij")


def half_lattice_mask(cutoff: int) -> np.ndarray:
    """Canonical half lattice: n1 > 0, or n1 == 0 and n2 > 0.

    Together with the real zero mode it parametrizes every real field,
    hence it is the writer/sampler side of the reality constraint.
    """
    n1, n2 = mode_grids(cutoff)
    return (n1 > 0) | ((n1 == 0) & (n2 > 0))


def _canonical_reality(coeffs: np.ndarray) -> np.ndarray:
    # Averaging with the reflected conjugate is bitwise idempotent and makes
    # coeff(-n) == conj(coeff(n)) exact, not just within rounding.
    sym = 0.5 * (coeffs + np.conj(coeffs[..., ::-1, ::-1]))
    centre = coeffs.shape[-1] // 2
    sym[..., centre, centre] = sym[..., centre, centre].real
    return sym


class SpectralField:
    """Immutable coefficient table of a real field, cutoff N.

    ``coeffs[i, j]`` holds the amplitude of mode ``(i - N, j - N)``.
    """

    __slots__ = ("cutoff", "coeffs")

    def __init__(self, cutoff: int, coeffs: np.ndarray):
        if cutoff < 0:
            raise ValueError("cutoff must be nonnegative")
        d = 2 * cutoff + 1
        arr = np.asarray(coeffs, dtype=complex)
        if arr.shape != (d, d):
            raise ValueError(f"coefficient table must be {d}x{d}, got {arr.shape}")
        resid = np.abs(arr - np.conj(arr[::-1, ::-1])).max()
        if resid > HARD_TOL:
            raise InvariantViolation(f"reality constraint violated by {resid:.3e}")
        arr = _canonical_reality(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "cutoff", cutoff)
        object.__setattr__(self, "coeffs", arr)

    def __setattr__(self, name, value):
        raise AttributeError("SpectralField is immutable")

    @classmethod
    def zeros(cls, cutoff: int) -> "SpectralField":
        d = 2 * cutoff + 1
        return cls(cutoff, np.zeros((d, d), dtype=complex))

    @classmethod
    def from_modes(
        cls,
        cutoff: int,
        modes: Mapping[tuple[int, int], complex],
        zero_mode: float = 0.0,
    ) -> "SpectralField":
        """Build a field from mode amplitudes, mirroring conjugates.

        Each supplied mode n also sets -n to the conjugate value.  Supplying
        both members of a pair is allowed when consistent; the zero mode must
        be real and may be given either via ``zero_mode`` or key (0, 0).
        """
        d = 2 * cutoff + 1
        arr = np.zeros((d, d), dtype=complex)
        seen: dict[tuple[int, int], complex] = {}
        for (n1, n2), v in modes.items():
            if max(abs(n1), abs(n2)) > cutoff:
                raise ValueError(f"mode ({n1},{n2}) outside cutoff {cutoff}")
            v = complex(v)
            if (n1, n2) == (0, 0):
                if abs(v.imag) > 0:
                    raise InvariantViolation("zero mode must be real")
                zero_mode = v.real
                continue
            for key, val in (((n1, n2), v), ((-n1, -n2), v.conjugate())):
                if key in seen and abs(seen[key] - val) > HARD_TOL:
                    raise InvariantViolation(f"inconsistent value for mode {key}")
                seen[key] = val
        for (n1, n2), v in seen.items():
            arr[n1 + cutoff, n2 + cutoff] = v
        arr[cutoff, cutoff] = float(zero_mode)
        return cls(cutoff, arr)

    def coeff(self, n1: int, n2: int) -> complex:
        """Amplitude of mode (n1, n2); zero outside the cutoff lattice."""
        if max(abs(n1), abs(n2)) > self.cutoff:
            return 0.0 + 0.0j
        return complex(self.coeffs[n1 + self.cutoff, n2 + self.cutoff])

    def modes(self) -> Iterator[tuple[int, int, complex]]:
        """Yield (n1, n2, amplitude) in lexicographic (n1, n2) order."""
        for i, n1 in enumerate(mode_range(self.cutoff)):
            for j, n2 in enumerate(mode_range(self.cutoff)):
                yield int(n1), int(n2), complex(self.coeffs[i, j])

    def __repr__(self) -> str:
        return f"SpectralField(cutoff={self.cutoff})"


@dataclass(frozen=True)
class GridField:
    """Real samples on the uniform lattice {(a/G, b/G)}, unit-measure torus."""

    size: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.size, self.size):
            raise ValueError("grid values must be size x size")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def validate_field(field: SpectralField) -> None:
    """Re-check the reality and cutoff invariants; raise on hard failure."""
    arr = field.coeffs
    d = 2 * field.cutoff + 1
    if arr.shape != (d, d):
        raise InvariantViolation("coefficient table shape does not match cutoff")
    resid = np.abs(arr - np.conj(arr[::-1, ::-1])).max()
    if resid > HARD_TOL:
        raise InvariantViolation(f"reality constraint violated by {resid:.3e}")
    if abs(arr[field.cutoff, field.cutoff].imag) > 0:
        raise InvariantViolation("zero mode has an imaginary part")


def project(field: SpectralField, cutoff: int) -> SpectralField:
    """Orthogonal projection onto the lattice |n|_inf <= cutoff.

    Coefficients inside the target lattice are copied verbatim, the rest
    dropped; enlarging the cutoff pads with zeros.  Idempotent.
    """
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    src, dst = field.cutoff, cutoff
    d = 2 * dst + 1
    out = np.zeros((d, d), dtype=complex)
    m = min(src, dst)
    out[dst - m : dst + m + 1, dst - m : dst + m + 1] = field.coeffs[
        src - m : src + m + 1, src - m : src + m + 1
    ]
    return SpectralField(dst, out)


def sobolev_norm(field: SpectralField, s: float = 0.0) -> float:
    """H^s norm: sqrt of sum over modes of (1+|n|^2)^s |coeff(n)|^2."""
    n1, n2 = mode_grids(field.cutoff)
    weight = (1.0 + n1.astype(float) ** 2 + n2.astype(float) ** 2) ** s
    return float(np.sqrt(np.sum(weight * np.abs(field.coeffs) ** 2)))


def dirichlet_kernel(cutoff: int) -> SpectralField:
    """Sharp spectral truncation as a field: every amplitude on the lattice is 1."""
    d = 2 * cutoff + 1
    return SpectralField(cutoff, np.ones((d, d), dtype=complex))


def dual_pairing(a: SpectralField, b: SpectralField) -> float:
    """L2 pairing of two real fields: sum of a_hat(n) conj(b_hat(n)).

    Cutoffs may differ; the sum runs over the common lattice.  The result of
    a real pairing is real; an imaginary residual above HARD_TOL means a
    broken reality invariant and raises.
    """
    m = min(a.cutoff, b.cutoff)
    ca = a.coeffs[a.cutoff - m : a.cutoff + m + 1, a.cutoff - m : a.cutoff + m + 1]
    cb = b.coeffs[b.cutoff - m : b.cutoff + m + 1, b.cutoff - m : b.cutoff + m + 1]
    val = complex(np.sum(ca * np.conj(cb)))
    if abs(val.imag) > HARD_TOL:
        raise InvariantViolation(f"pairing has imaginary residual {val.imag:.3e}")
    return val.real


def coeffs_to_grid(coeffs: np.ndarray, size: int, workers: int | None = None) -> np.ndarray:
    """Array-level synthesis of (..., 2N+1, 2N+1) coefficients on a size^2 grid.

    Modes fold mod `size`, so undersampled grids alias exactly as the
    continuous evaluation does.  Returns real values (imag part discarded
    after a hard check).
    """
    d = coeffs.shape[-1]
    cutoff = d // 2
    idx = mode_range(cutoff) % size
    layout = np.zeros(coeffs.shape[:-2] + (size, size), dtype=complex)
    if size >= d:
        layout[..., idx[:, None], idx[None, :]] = coeffs
    else:
        # undersampled grid: distinct modes fold onto shared cells
        np.add.at(layout, (..., idx[:, None], idx[None, :]), coeffs)
    vals = scipy.fft.ifft2(layout, axes=(-2, -1), workers=workers) * (size * size)
    resid = np.abs(vals.imag).max() if vals.size else 0.0
    scale = max(1.0, np.abs(vals.real).max()) if vals.size else 1.0
    if resid > HARD_TOL * scale:
        raise InvariantViolation(f"grid synthesis produced imaginary residual {resid:.3e}")
    return vals.real


def grid_to_coeffs(values: np.ndarray, cutoff: int, workers: int | None = None) -> np.ndarray:
    """Array-level analysis of grid samples into (..., 2N+1, 2N+1) coefficients."""
    size = values.shape[-1]
    if size < 2 * cutoff + 1:
        raise ValueError(
            f"grid of size {size} aliases modes at cutoff {cutoff}; need size >= {2 * cutoff + 1}"
        )
    spec = scipy.fft.fft2(np.asarray(values, dtype=float), axes=(-2, -1), workers=workers)
    spec /= size * size
    idx = mode_range(cutoff) % size
    return spec[..., idx[:, None], idx[None, :]]


def to_grid(field: SpectralField, size: int) -> GridField:
    """Evaluate the field on the uniform lattice of the given size (any size >= 1)."""
    if size < 1:
        raise ValueError("grid size must be >= 1")
    return GridField(size, coeffs_to_grid(field.coeffs, size))


def from_grid(grid: GridField, cutoff: int) -> SpectralField:
    """Recover coefficients from grid samples; exact when size >= 2*cutoff+1."""
    return SpectralField(cutoff, grid_to_coeffs(grid.values, cutoff))


def _nonuniform_sum(coeffs: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    # (e1 @ C) rows dotted with e2 rows: BLAS-backed form of the double mode sum
    return np.sum((e1 @ coeffs) * e2, axis=1)


def evaluate_at(field: SpectralField, points: np.ndarray) -> np.ndarray:
    """Evaluate the field at arbitrary torus points, shape (..., 2) -> (...)."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    n = mode_range(field.cutoff)
    e1 = np.exp(_TWO_PI_I * np.outer(flat[:, 0], n))
    e2 = np.exp(_TWO_PI_I * np.outer(flat[:, 1], n))
    vals = _nonuniform_sum(field.coeffs, e1, e2)
    return vals.real.reshape(pts.shape[:-1])


def gradient_at(field: SpectralField, points: np.ndarray) -> np.ndarray:
    """Gradient of the field at arbitrary points, shape (..., 2) -> (..., 2)."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    n = mode_range(field.cutoff)
    e1 = np.exp(_TWO_PI_I * np.outer(flat[:, 0], n))
    e2 = np.exp(_TWO_PI_I * np.outer(flat[:, 1], n))
    n1, n2 = mode_grids(field.cutoff)
    g1 = _nonuniform_sum(_TWO_PI_I * n1 * field.coeffs, e1, e2)
    g2 = _nonuniform_sum(_TWO_PI_I * n2 * field.coeffs, e1, e2)
    return np.stack([g1.real, g2.real], axis=-1).reshape(pts.shape)


def save_field_csv(field: SpectralField, path) -> None:
    """Write `n1,n2,re,im` rows for every lattice mode in lexicographic order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n1", "n2", "re", "im"])
        for n1, n2, c in field.modes():
            writer.writerow([n1, n2, "%.17g" % c.real, "%.17g" % c.imag])


def load_field_csv(path) -> SpectralField:
    """Read a field snapshot; validates lattice completeness and reality."""
    rows: dict[tuple[int, int], complex] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["n1", "n2", "re", "im"]:
            raise ValueError(f"unexpected field snapshot header: {header}")
        for rec in reader:
            n1, n2 = int(rec[0]), int(rec[1])
            rows[(n1, n2)] = complex(float(rec[2]), float(rec[3]))
    if not rows:
        raise ValueError("empty field snapshot")
    cutoff = max(max(abs(n1), abs(n2)) for n1, n2 in rows)
    d = 2 * cutoff + 1
    if len(rows) != d * d:
        raise ValueError(f"snapshot has {len(rows)} modes, expected {d * d}")
    arr = np.zeros((d, d), dtype=complex)
    for (n1, n2), v in rows.items():
        arr[n1 + cutoff, n2 + cutoff] = v
    return SpectralField(cutoff, arr)
