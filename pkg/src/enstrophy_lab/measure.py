"""Sampling the projected white-noise measure and transporting densities.

Coefficient samples are unit complex Gaussians on the canonical half
lattice (plus a real standard normal zero mode), which realizes the
covariance  E <w,phi><w,psi> = <phi,psi>_{H^0}  on the cutoff lattice.
Streams are counter based: sample `index` under seed `s` is generated by a
Philox generator keyed by (s, index), so ensembles are reproducible and
order independent.

Densities ride along trajectories as importance weights.  Pushing an
ensemble forward moves the member fields with the flow and leaves weights
untouched: the weight of a member is exactly the transported density at
the member's current position, entropy sums of the weights are therefore
invariant by construction, and the falsifiable content of transport lives
in the distribution tests of the verification batteries.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import SpectralDrift, _drift_dealiased
from .fields import (
    HARD_TOL,
    InvariantViolation,
    SpectralField,
    half_lattice_mask,
    load_field_csv,
    project,
    save_field_csv,
    sobolev_norm,
)
from .flow import FlowParams, StepFailure, _run_padded, _step_batch


@dataclass(frozen=True)
class MeasureSpec:
    """Projected white-noise measure at a cutoff; seed keys all streams."""

    cutoff: int
    include_zero_mode: bool = True
    seed: int = 0


def _half_indices(cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    hi, hj = np.nonzero(half_lattice_mask(cutoff))
    return hi, hj


def _stream(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def sample_coeffs(spec: MeasureSpec, index: int) -> np.ndarray:
    """Coefficient table of sample `index`; pure function of (spec, index)."""
    d = 2 * spec.cutoff + 1
    hi, hj = _half_indices(spec.cutoff)
    h = len(hi)
    g = _stream(spec.seed, index)
    draws = g.standard_normal(1 + 2 * h)
    out = np.zeros((d, d), dtype=complex)
    vals = (draws[1 : 1 + h] + 1j * draws[1 + h :]) / np.sqrt(2.0)
    out[hi, hj] = vals
    out[(d - 1) - hi, (d - 1) - hj] = np.conj(vals)
    if spec.include_zero_mode:
        out[spec.cutoff, spec.cutoff] = draws[0]
    return out


def sample_white_noise(spec: MeasureSpec, index: int) -> SpectralField:
    """One sample of the cutoff white-noise field."""
    return SpectralField(spec.cutoff, sample_coeffs(spec, index))


def sample_batch(spec: MeasureSpec, indices: Sequence[int]) -> np.ndarray:
    """Stacked coefficient tables for the given stream indices."""
    d = 2 * spec.cutoff + 1
    out = np.empty((len(indices), d, d), dtype=complex)
    for row, idx in enumerate(indices):
        out[row] = sample_coeffs(spec, int(idx))
    return out


def pairings_batch(coeffs: np.ndarray, cutoff: int, phis: Sequence[SpectralField]) -> np.ndarray:
    """<w_i, phi_j> for stacked tables: (B, ...) -> (B, k)."""
    if not phis:
        return np.zeros(coeffs.shape[:-2] + (0,))
    out = np.empty(coeffs.shape[:-2] + (len(phis),))
    for j, phi in enumerate(phis):
        m = min(cutoff, phi.cutoff)
        w = coeffs[..., cutoff - m : cutoff + m + 1, cutoff - m : cutoff + m + 1]
        p = phi.coeffs[phi.cutoff - m : phi.cutoff + m + 1, phi.cutoff - m : phi.cutoff + m + 1]
        vals = np.sum(w * np.conj(p), axis=(-2, -1))
        resid = float(np.abs(vals.imag).max()) if vals.size else 0.0
        if resid > HARD_TOL * max(1.0, float(np.abs(vals.real).max())):
            raise InvariantViolation(f"pairing against phi[{j}] has imaginary residual {resid:.3e}")
        out[..., j] = vals.real
    return out


class DensitySpec:
    """Nonnegative density with respect to the cutoff white-noise measure."""

    def values(self, coeffs: np.ndarray, cutoff: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformDensity(DensitySpec):
    def values(self, coeffs: np.ndarray, cutoff: int) -> np.ndarray:
        return np.ones(coeffs.shape[:-2])


@dataclass(frozen=True)
class GaussianTilt(DensitySpec):
    """exp(<w,phi> - ||phi||^2/2): unit mean by the Gaussian mgf identity."""

    phi: SpectralField

    def values(self, coeffs: np.ndarray, cutoff: int) -> np.ndarray:
        v = pairings_batch(coeffs, cutoff, [self.phi])[..., 0]
        return np.exp(v - 0.5 * sobolev_norm(self.phi, 0.0) ** 2)


@dataclass(frozen=True)
class TruncatedDensity(DensitySpec):
    """min(base, bound)/Z with Z estimated once by Monte Carlo and cached."""

    base: DensitySpec
    bound: float
    norm_const: Optional[float] = None
    norm_std_error: Optional[float] = None

    def raw_values(self, coeffs: np.ndarray, cutoff: int) -> np.ndarray:
        return np.minimum(self.base.values(coeffs, cutoff), self.bound)

    def values(self, coeffs: np.ndarray, cutoff: int) -> np.ndarray:
        if self.norm_const is None:
            raise ValueError("truncated density used before estimating its normalization")
        return self.raw_values(coeffs, cutoff) / self.norm_const

    def with_normalization(self, spec: MeasureSpec, n_samples: int,
                           seed_offset: int = 1) -> "TruncatedDensity":
        """Estimate Z = E min(base, bound) on a dedicated stream family."""
        est_spec = replace(spec, seed=spec.seed + seed_offset)
        raw = self.raw_values(sample_batch(est_spec, range(n_samples)), spec.cutoff)
        z = float(np.mean(raw))
        se = float(np.std(raw, ddof=1) / np.sqrt(n_samples))
        return TruncatedDensity(self.base, self.bound, norm_const=z, norm_std_error=se)


def density_value(density: DensitySpec, field: SpectralField) -> float:
    """Density at a single field."""
    return float(density.values(field.coeffs[None, ...], field.cutoff)[0])


@dataclass(frozen=True)
class Ensemble:
    """Weighted samples representing density * measure at a common time."""

    spec: MeasureSpec
    coeffs: np.ndarray        # (M, 2N+1, 2N+1)
    weights: np.ndarray       # (M,)
    stream_ids: np.ndarray    # (M,)
    t: float = 0.0

    def __post_init__(self):
        if len(self.weights) != self.coeffs.shape[0] or len(self.stream_ids) != self.coeffs.shape[0]:
            raise ValueError("ensemble member arrays disagree in length")
        if self.coeffs.shape[0] < 1:
            raise ValueError("ensemble needs at least one member")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        for arr in (self.coeffs, self.weights, self.stream_ids):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def member(self, i: int) -> tuple[SpectralField, float, int]:
        return (
            SpectralField(self.spec.cutoff, self.coeffs[i]),
            float(self.weights[i]),
            int(self.stream_ids[i]),
        )

    def pairings(self, phis: Sequence[SpectralField]) -> np.ndarray:
        return pairings_batch(self.coeffs, self.spec.cutoff, phis)

    def weighted_mean(self, values: np.ndarray) -> tuple[float, float]:
        """Estimate integral of F against density*measure, with standard error."""
        x = self.weights * np.asarray(values)
        m = len(self)
        return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(m)) if m > 1 else 0.0

    def entropy(self) -> tuple[float, float]:
        """Estimate of integral of rho log rho (mean of w log w with SE)."""
        w = self.weights
        x = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
        m = len(self)
        return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(m)) if m > 1 else 0.0


def init_ensemble(spec: MeasureSpec, density: DensitySpec, count: int,
                  start_index: int = 0) -> Ensemble:
    """Draw `count` members and weight them by the initial density.

    The weighted mean of F over the ensemble estimates the integral of F
    against density * measure.
    """
    if count < 1:
        raise ValueError("ensemble needs at least one member")
    ids = np.arange(start_index, start_index + count)
    coeffs = sample_batch(spec, ids)
    weights = density.values(coeffs, spec.cutoff)
    return Ensemble(spec=spec, coeffs=coeffs, weights=np.asarray(weights, dtype=float),
                    stream_ids=ids, t=0.0)


class PushforwardError(Exception):
    """Integration failed for some members; their stream ids are attached."""

    def __init__(self, message: str, failed_members: list[int]):
        super().__init__(message)
        self.failed_members = failed_members


def pushforward(ensemble: Ensemble, params: FlowParams,
                drift_fn=None, workers: int | None = None,
                chunk_size: int = 256) -> Ensemble:
    """Move member fields with the flow over [t, t + t_end]; weights unchanged.

    Weights transported along trajectories are exactly the time-t density at
    the member's current position, so they are reused bitwise.  Members are
    integrated in chunks: trajectories never interact, so the partition
    affects throughput only.
    """
    if params.cutoff != ensemble.spec.cutoff:
        raise ValueError("flow cutoff does not match ensemble cutoff")
    if drift_fn is None:
        drift_fn = SpectralDrift(params.cutoff, workers=workers)
    coeffs = np.array(ensemble.coeffs)
    m = coeffs.shape[0]
    for start in range(0, m, chunk_size):
        sl = slice(start, min(start + chunk_size, m))
        block = coeffs[sl]
        try:
            if isinstance(drift_fn, SpectralDrift):
                block = _run_padded(block, params, drift_fn, params.n_steps)
            else:
                for _ in range(params.n_steps):
                    block = _step_batch(block, params, drift_fn, workers)
        except StepFailure as exc:
            mask = exc.member_mask
            failed = np.nonzero(mask)[0] if mask is not None else []
            ids = [int(ensemble.stream_ids[start + int(i)]) for i in failed]
            raise PushforwardError(f"{exc} (members {ids})", ids) from exc
        coeffs[sl] = block
    return Ensemble(
        spec=ensemble.spec,
        coeffs=coeffs,
        weights=ensemble.weights,
        stream_ids=ensemble.stream_ids,
        t=ensemble.t + params.t_end,
    )


@dataclass(frozen=True)
class WeakFormResult:
    residual: float
    std_error: float
    n_samples: int
    dt: float
    bounds: dict


def weak_form_residual(ensemble: Ensemble, functional, params: FlowParams,
                       drift_fn=None, workers: int | None = None,
                       chunk_size: int = 256) -> WeakFormResult:
    """Monte Carlo plus trapezoidal estimate of the transport-equation defect.

    Computes the time integral of (d_t F + <b_N(w), DF>) against the
    transported density plus the initial term, which telescopes to zero
    along exact trajectories because the time factors vanish at the
    horizon.  Test fields of the functional must live inside the cutoff
    lattice; the time quadrature contributes an O(dt^2) bias on top of the
    Monte Carlo error.
    """
    n = params.cutoff
    if abs(functional.horizon - params.t_end) > 1e-12 * max(1.0, params.t_end):
        raise ValueError("functional horizon differs from integration horizon")
    for j, phi in enumerate(functional.phis):
        if sobolev_norm_diff(phi, n) > 1e-12 * max(1.0, sobolev_norm(phi, 0.0)):
            raise ValueError(f"test field {j} is not supported inside the cutoff lattice")
    if drift_fn is None:
        drift_fn = SpectralDrift(n, workers=workers)
    base_fn = drift_fn
    m = len(ensemble)
    totals = np.zeros(m)
    steps = params.n_steps
    pair_all0 = pairings_batch(ensemble.coeffs, n, functional.phis)
    bounds = functional.empirical_bounds(pair_all0)
    for start in range(0, m, chunk_size):
        sl = slice(start, min(start + chunk_size, m))
        coeffs = np.array(ensemble.coeffs[sl])
        block = np.zeros(coeffs.shape[0])
        pair0 = pair_all0[sl]
        for k in range(steps + 1):
            t = k * params.dt
            pair = pair0 if k == 0 else pairings_batch(coeffs, n, functional.phis)
            integrand = functional.dt_value(t, pair)
            if functional.n_pairings:
                b = base_fn(coeffs)
                drift_pairs = pairings_batch(b, n, functional.phis)
                integrand = integrand + np.sum(functional.pairing_gradient(t, pair) * drift_pairs, axis=-1)
            tw = params.dt * (0.5 if k in (0, steps) else 1.0)
            block += tw * integrand
            if k < steps:
                coeffs = _step_batch(coeffs, params, drift_fn, workers)
        totals[sl] = block + functional.value(0.0, pair0)
    x = ensemble.weights * totals
    residual = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return WeakFormResult(residual=residual, std_error=se, n_samples=m, dt=params.dt, bounds=bounds)


def sobolev_norm_diff(phi: SpectralField, cutoff: int) -> float:
    """H^0 distance between phi and its projection to the cutoff lattice."""
    proj = project(phi, cutoff)
    back = project(proj, phi.cutoff)
    return float(np.sqrt(np.sum(np.abs(phi.coeffs - back.coeffs) ** 2)))


def save_ensemble(ensemble: Ensemble, directory) -> None:
    """Snapshot: per-member field CSVs plus a manifest of weights and ids."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "stream_id", "weight", "t"])
        for i in range(len(ensemble)):
            writer.writerow(
                [i, int(ensemble.stream_ids[i]), "%.17g" % ensemble.weights[i], "%.17g" % ensemble.t]
            )
    for i in range(len(ensemble)):
        field = SpectralField(ensemble.spec.cutoff, ensemble.coeffs[i])
        save_field_csv(field, os.path.join(directory, f"member_{i:05d}.csv"))


def load_ensemble(directory, spec: MeasureSpec) -> Ensemble:
    """Rebuild an ensemble from a snapshot directory (spec supplied by caller)."""
    rows = []
    with open(os.path.join(directory, "manifest.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["member", "stream_id", "weight", "t"]:
            raise ValueError(f"unexpected ensemble manifest header: {header}")
        rows = [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in reader]
    if not rows:
        raise ValueError("empty ensemble manifest")
    t = rows[0][3]
    d = 2 * spec.cutoff + 1
    coeffs = np.empty((len(rows), d, d), dtype=complex)
    weights = np.empty(len(rows))
    ids = np.empty(len(rows), dtype=int)
    for i, (member, sid, w, tt) in enumerate(rows):
        field = load_field_csv(os.path.join(directory, f"member_{member:05d}.csv"))
        coeffs[i] = project(field, spec.cutoff).coeffs
        weights[i] = w
        ids[i] = sid
    return Ensemble(spec=spec, coeffs=coeffs, weights=weights, stream_ids=ids, t=t)


def write_estimates_csv(path, rows: Sequence[tuple[str, float, float, int]]) -> None:
    """Estimator table: quantity, estimate, std_error, n_samples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "estimate", "std_error", "n_samples"])
        for name, est, se, n in rows:
            writer.writerow([name, "%.17g" % est, "%.17g" % se, int(n)])
