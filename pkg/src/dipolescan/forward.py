"""Synthetic forward models: single-dipole scenarios, candidate grids,
noise covariances, sample generation and covariance estimation.

The generative model is a single dipolar source with additive zero-mean
noise, ``d(t) = gain * amplitude(t) + noise(t)``, where the gain vector is
the true leadfield applied to a fixed unit orientation.  The second-moment
matrix of the data is then ``R = N + x x'`` with the effective source vector
``x = sqrt(source_power) * leadfield @ orientation``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .linalg import (
    DEFAULT_RANK_TOL,
    Metric,
    _readonly,
    psd_power,
    symmetrize,
)

SAMPLE_BLOCK = 1024

# Stream tags keep the RNG streams of sample blocks, scenario drawing and
# grid drawing disjoint for a shared user seed.
_SCENARIO_STREAM = 2**62
_GRID_STREAM = 2**62 + 1

_FULL_RANK_RTOL = 1e-10


def _mask_seed(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _column_rank_ok(matrix: np.ndarray) -> bool:
    if matrix.ndim != 2 or matrix.shape[0] < matrix.shape[1]:
        return False
    svals = np.linalg.svd(matrix, compute_uv=False)
    return bool(svals[0] > 0.0 and svals[-1] > _FULL_RANK_RTOL * svals[0])


@dataclass(frozen=True)
class SourceScenario:
    """Single active dipole plus additive noise, fully determined by a seed."""

    leadfield: np.ndarray
    orientation: np.ndarray
    source_power: float
    noise_cov: np.ndarray
    seed: int

    def __post_init__(self):
        lead = np.asarray(self.leadfield, dtype=float)
        orient = np.asarray(self.orientation, dtype=float)
        noise = np.asarray(self.noise_cov, dtype=float)
        if lead.ndim != 2 or lead.shape[1] != 3:
            raise ValueError("leadfield must have three columns")
        if not _column_rank_ok(lead):
            raise ValueError("leadfield must have full column rank")
        if orient.shape != (3,):
            raise ValueError("orientation must be a 3-vector")
        if abs(float(np.linalg.norm(orient)) - 1.0) > 1e-12:
            raise ValueError("orientation must have unit norm")
        if not (self.source_power > 0.0):
            raise ValueError("source power must be positive")
        if noise.shape != (lead.shape[0],) * 2:
            raise ValueError("noise covariance shape must match the sensor count")
        metric = Metric.from_matrix(noise)
        if not metric.is_full_rank:
            raise ValueError("noise covariance must be symmetric positive definite")
        object.__setattr__(self, "leadfield", _readonly(lead))
        object.__setattr__(self, "orientation", _readonly(orient))
        object.__setattr__(self, "noise_cov", _readonly(noise))

    @property
    def sensor_count(self) -> int:
        return self.leadfield.shape[0]

    @cached_property
    def noise_metric(self) -> Metric:
        return Metric.from_matrix(self.noise_cov)

    @cached_property
    def noise_sqrt(self) -> np.ndarray:
        return psd_power(self.noise_metric, 0.5).matrix

    @cached_property
    def noise_inverse(self) -> np.ndarray:
        return psd_power(self.noise_metric, -1.0).matrix

    @property
    def effective_source(self) -> np.ndarray:
        """``sqrt(source_power) * leadfield @ orientation``."""
        return np.sqrt(self.source_power) * (self.leadfield @ self.orientation)


class Candidate(NamedTuple):
    candidate_id: str
    leadfield: np.ndarray


@dataclass(frozen=True)
class CandidateGrid:
    """Ordered scan domain: one full-column-rank leadfield per candidate."""

    candidates: tuple[Candidate, ...]
    sensor_count: int

    def __post_init__(self):
        seen = set()
        checked = []
        for cand in self.candidates:
            cid, lead = cand
            lead = np.asarray(lead, dtype=float)
            if cid in seen:
                raise ValueError(f"duplicate candidate id {cid!r}")
            seen.add(cid)
            if lead.ndim != 2 or lead.shape[0] != self.sensor_count:
                raise ValueError(f"candidate {cid!r} row count must equal the sensor count")
            if not _column_rank_ok(lead):
                raise ValueError(f"candidate {cid!r} must have full column rank")
            checked.append(Candidate(cid, _readonly(lead)))
        object.__setattr__(self, "candidates", tuple(checked))

    def __len__(self) -> int:
        return len(self.candidates)

    def index_of(self, candidate_id: str) -> int:
        for idx, cand in enumerate(self.candidates):
            if cand.candidate_id == candidate_id:
                return idx
        raise KeyError(candidate_id)

    def find_leadfield(self, leadfield: np.ndarray) -> int | None:
        """Index of the first candidate whose leadfield equals the argument."""
        target = np.asarray(leadfield, dtype=float)
        for idx, cand in enumerate(self.candidates):
            if cand.leadfield.shape == target.shape and np.array_equal(cand.leadfield, target):
                return idx
        return None

    def complete_leadfield(self) -> np.ndarray:
        """All candidate leadfields stacked column-wise (metric recipes)."""
        return np.hstack([cand.leadfield for cand in self.candidates])


@dataclass(frozen=True)
class SampleCovariance:
    """Empirical second-moment matrix with a rank flag."""

    matrix: np.ndarray
    sample_count: int
    full_rank: bool


@dataclass(frozen=True)
class CovariancePair:
    """Signal second-moment matrix R and noise covariance N.

    Analytic pairs record the effective source vector and satisfy
    ``R == N + x x'`` exactly; sample pairs record the sample count.
    """

    signal_moment: np.ndarray
    noise_cov: np.ndarray
    provenance: str
    sample_count: int | None = None
    effective_source: np.ndarray | None = field(default=None)

    def __post_init__(self):
        r = np.asarray(self.signal_moment, dtype=float)
        n = np.asarray(self.noise_cov, dtype=float)
        if self.provenance not in ("analytic", "sample"):
            raise ValueError("provenance must be 'analytic' or 'sample'")
        for name, mat in (("signal moment", r), ("noise covariance", n)):
            scale = float(np.max(np.abs(mat))) if mat.size else 0.0
            if scale > 0.0 and float(np.max(np.abs(mat - mat.T))) > 1e-12 * scale:
                raise ValueError(f"{name} is not symmetric")
        if r.shape != n.shape:
            raise ValueError("dimension mismatch")
        if self.provenance == "analytic":
            if self.effective_source is None:
                raise ValueError("analytic pairs must record the effective source")
            x = np.asarray(self.effective_source, dtype=float)
            if not np.array_equal(r, n + np.outer(x, x)):
                raise ValueError("analytic pair must satisfy R = N + x x' exactly")
            object.__setattr__(self, "effective_source", _readonly(x))
        if self.provenance == "sample" and self.sample_count is None:
            raise ValueError("sample pairs must record the sample count")
        object.__setattr__(self, "signal_moment", _readonly(r))
        object.__setattr__(self, "noise_cov", _readonly(n))

    @property
    def dim(self) -> int:
        return self.signal_moment.shape[0]

    @cached_property
    def signal_metric(self) -> Metric:
        metric = Metric.from_matrix(self.signal_moment)
        if not metric.is_full_rank:
            raise ValueError("signal moment matrix is singular")
        return metric

    @cached_property
    def noise_metric(self) -> Metric:
        metric = Metric.from_matrix(self.noise_cov)
        if not metric.is_full_rank:
            raise ValueError("noise covariance is singular")
        return metric

    @cached_property
    def signal_inverse(self) -> np.ndarray:
        return psd_power(self.signal_metric, -1.0).matrix

    @cached_property
    def noise_inverse(self) -> np.ndarray:
        return psd_power(self.noise_metric, -1.0).matrix

    @classmethod
    def from_samples(cls, samples: np.ndarray, noise_cov: np.ndarray) -> "CovariancePair":
        est = sample_covariance(samples)
        if not est.full_rank:
            raise ValueError("sample covariance is rank deficient; increase the sample count")
        return cls(
            signal_moment=est.matrix,
            noise_cov=noise_cov,
            provenance="sample",
            sample_count=est.sample_count,
        )


def simulate_samples(scenario: SourceScenario, n_samples: int) -> np.ndarray:
    """Draw data columns ``gain * amplitude + colored noise``.

    Amplitudes are i.i.d. Gaussian with variance ``source_power``; noise is
    colored by the symmetric square root of the noise covariance.  Columns
    are generated in fixed-size blocks whose RNG streams derive from
    ``(seed, block_index)``, so block-parallel and serial evaluation agree
    bit-exactly.
    """
    if n_samples < 1:
        raise ValueError("sample count must be positive")
    n = scenario.sensor_count
    gain = scenario.leadfield @ scenario.orientation
    amp_scale = np.sqrt(scenario.source_power)
    coloring = scenario.noise_sqrt
    seed = _mask_seed(scenario.seed)
    out = np.empty((n, n_samples))
    for block in range(0, -(-n_samples // SAMPLE_BLOCK)):
        start = block * SAMPLE_BLOCK
        cols = min(SAMPLE_BLOCK, n_samples - start)
        rng = np.random.default_rng([seed, block])
        amplitudes = amp_scale * rng.standard_normal(cols)
        noise = coloring @ rng.standard_normal((n, cols))
        out[:, start : start + cols] = np.outer(gain, amplitudes) + noise
    return out


def analytic_covariance(scenario: SourceScenario) -> CovariancePair:
    """Exact second-moment pair ``R = N + x x'`` of the scenario."""
    x = scenario.effective_source
    return CovariancePair(
        signal_moment=scenario.noise_cov + np.outer(x, x),
        noise_cov=scenario.noise_cov,
        provenance="analytic",
        effective_source=x,
    )


def sample_covariance(samples: np.ndarray) -> SampleCovariance:
    """Symmetrized empirical second moment ``(1/T) sum d_t d_t'``."""
    d = np.asarray(samples, dtype=float)
    if d.ndim != 2:
        raise ValueError("samples must be a sensors-by-time matrix")
    n, t = d.shape
    if t < n:
        raise ValueError("insufficient samples for full-rank covariance")
    matrix = symmetrize(d @ d.T / t)
    vals = np.linalg.eigvalsh(matrix)
    full_rank = bool(vals[0] > DEFAULT_RANK_TOL * max(vals[-1], 0.0) and vals[-1] > 0.0)
    return SampleCovariance(matrix=_readonly(matrix), sample_count=t, full_rank=full_rank)


def recover_source_direction(pair: CovariancePair) -> np.ndarray:
    """Unit vector spanning the effective-source direction.

    Whitens R by the noise covariance; the top eigenvector of the whitened
    matrix, colored back, spans the source direction.  The sign is fixed by
    making the first nonzero component positive.
    """
    n_metric = pair.noise_metric
    n_inv_sqrt = psd_power(n_metric, -0.5).matrix
    whitened = symmetrize(n_inv_sqrt @ pair.signal_moment @ n_inv_sqrt)
    vals, vecs = np.linalg.eigh(whitened)
    top = float(vals[-1])
    if top <= 1.0 + 1e-8:
        raise ValueError("source direction not identifiable")
    if vals.size > 1 and (top - float(vals[-2])) <= 1e-10 * top:
        raise ValueError("source direction not identifiable")
    direction = psd_power(n_metric, 0.5).matrix @ vecs[:, -1]
    direction = direction / np.linalg.norm(direction)
    for component in direction:
        if component != 0.0:
            if component < 0.0:
                direction = -direction
            break
    return direction


def random_leadfield(rng: np.random.Generator, n_sensors: int, n_columns: int = 3) -> np.ndarray:
    """I.i.d. standard-normal gain matrix, redrawn until full column rank."""
    if n_sensors < n_columns:
        raise ValueError("need at least as many sensors as leadfield columns")
    for _ in range(64):
        lead = rng.standard_normal((n_sensors, n_columns))
        if _column_rank_ok(lead):
            return lead
    raise RuntimeError("failed to draw a full-rank leadfield")


def random_spd(
    rng: np.random.Generator,
    dim: int,
    eig_range: tuple[float, float] = (0.5, 2.0),
) -> np.ndarray:
    """Random SPD matrix with eigenvalues drawn uniformly from ``eig_range``."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = rng.uniform(eig_range[0], eig_range[1], dim)
    return symmetrize((basis * eigs) @ basis.T)


def random_unit_vector(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    for _ in range(64):
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    raise RuntimeError("failed to draw a unit vector")


def random_scenario(
    seed: int,
    n_sensors: int,
    *,
    noise: str = "random_spd",
    noise_sigma: float = 1.0,
    noise_cov: np.ndarray | None = None,
    source_power: float = 1.0,
) -> SourceScenario:
    """Seed-deterministic scenario with white, random-SPD or explicit noise."""
    rng = np.random.default_rng([_mask_seed(seed), _SCENARIO_STREAM])
    lead = random_leadfield(rng, n_sensors, 3)
    orient = random_unit_vector(rng, 3)
    if noise_cov is not None:
        cov = np.asarray(noise_cov, dtype=float)
    elif noise == "white":
        cov = noise_sigma**2 * np.eye(n_sensors)
    elif noise == "random_spd":
        cov = random_spd(rng, n_sensors)
    else:
        raise ValueError(f"unknown noise kind {noise!r}")
    return SourceScenario(
        leadfield=lead,
        orientation=orient,
        source_power=source_power,
        noise_cov=cov,
        seed=seed,
    )


def random_grid(
    seed: int,
    n_sensors: int,
    size: int,
    *,
    k: int = 3,
    include: np.ndarray | None = None,
    include_id: str = "truth",
) -> CandidateGrid:
    """Grid of random candidates, optionally appending a known leadfield."""
    if size < 0:
        raise ValueError("grid size must be nonnegative")
    rng = np.random.default_rng([_mask_seed(seed), _GRID_STREAM])
    candidates = [
        Candidate(f"cand-{i:03d}", random_leadfield(rng, n_sensors, k)) for i in range(size)
    ]
    if include is not None:
        candidates.append(Candidate(include_id, np.asarray(include, dtype=float)))
    if not candidates:
        raise ValueError("grid must contain at least one candidate")
    return CandidateGrid(candidates=tuple(candidates), sensor_count=n_sensors)
