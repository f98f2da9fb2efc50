"""Minimum-variance beamformer powers and their scan-equivalence machinery.

A scalar beamformer minimizes the filtered output power ``w' R w`` subject
to the unit-style gain constraint ``w' l = tau``; the choice of tau yields
the unit-gain, noise-normalized (NAI, white-noise special case AG) and
noise-ratio (SAM, white-noise special case UNG) power maps.  Vector
candidates generalize the noise-normalized and noise-ratio powers through
trace forms; a separate trace-ratio variant is kept because it is the one
with a provable localization bias.

In a single-source model the noise-normalized and noise-ratio powers are
strictly increasing functions of the whitened goodness of fit, with
coefficients that depend only on the whitened source power; those transfer
functions and the pair of rank-one inverse identities behind them live here.

Inverse matrices are passed in pre-factorized (scan loops dominate cost);
see :func:`dipolescan.linalg.invert_spd`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import CandidateGrid
from .linalg import _readonly

_DOMAIN_SLACK = 1e-9


def _as_vector(l: np.ndarray) -> np.ndarray:
    vec = np.asarray(l, dtype=float)
    if vec.ndim != 1:
        raise ValueError("leadfield vector must be one-dimensional")
    if not np.any(vec):
        raise ValueError("null constraint leadfield")
    return vec


def _as_full_rank(leadfield: np.ndarray) -> np.ndarray:
    lead = np.asarray(leadfield, dtype=float)
    if lead.ndim != 2:
        raise ValueError("candidate leadfield must be a matrix")
    svals = np.linalg.svd(lead, compute_uv=False)
    if svals[0] <= 0.0 or svals[-1] <= 1e-12 * svals[0]:
        raise ValueError("degenerate candidate")
    return lead


@dataclass(frozen=True)
class BeamformerWeights:
    """Constrained minimum-variance filter ``w`` with ``w' l = tau``."""

    weights: np.ndarray
    tau: float
    constraint_leadfield: np.ndarray


def filter_weights(r_inv: np.ndarray, leadfield: np.ndarray, tau: float) -> BeamformerWeights:
    """Explicit minimizer ``tau * R^{-1} l / (l' R^{-1} l)``."""
    vec = _as_vector(leadfield)
    if not (tau > 0.0):
        raise ValueError("tau must be positive")
    r_inv_l = r_inv @ vec
    quad = float(vec @ r_inv_l)
    if quad <= 0.0:
        raise ValueError("constraint quadratic form must be positive")
    return BeamformerWeights(
        weights=_readonly(tau * r_inv_l / quad),
        tau=float(tau),
        constraint_leadfield=_readonly(vec),
    )


def pseudo_z(weights: BeamformerWeights, signal_moment: np.ndarray, noise_cov: np.ndarray) -> float:
    """Filtered signal power over filtered noise power; tau-invariant."""
    w = weights.weights
    return float(w @ signal_moment @ w) / float(w @ noise_cov @ w)


def power_ug(r_inv: np.ndarray, leadfield: np.ndarray) -> float:
    """Unit-gain output power ``1 / (l' R^{-1} l)``."""
    vec = _as_vector(leadfield)
    return 1.0 / float(vec @ r_inv @ vec)


def power_nai_scalar(r_inv: np.ndarray, n_inv: np.ndarray, leadfield: np.ndarray) -> float:
    """Noise-normalized power ``(l' N^{-1} l) / (l' R^{-1} l)``.

    With white noise ``N = sigma^2 I`` this is the array-gain power.
    """
    vec = _as_vector(leadfield)
    return float(vec @ n_inv @ vec) / float(vec @ r_inv @ vec)


def power_sam_scalar(r_inv: np.ndarray, noise_cov: np.ndarray, leadfield: np.ndarray) -> float:
    """Noise-ratio power ``(l' R^{-1} l) / (l' R^{-1} N R^{-1} l)``.

    Equals the pseudo-Z score of the filter for every tau; with white noise
    this is the unit-noise-gain power.
    """
    vec = _as_vector(leadfield)
    r_inv_l = r_inv @ vec
    return float(vec @ r_inv_l) / float(r_inv_l @ noise_cov @ r_inv_l)


def power_nai_vector(r_inv: np.ndarray, n_inv: np.ndarray, leadfield: np.ndarray) -> float:
    """Trace form ``Trace((L' N^{-1} L)(L' R^{-1} L)^{-1})`` for N-by-k candidates."""
    lead = _as_full_rank(leadfield)
    num = lead.T @ n_inv @ lead
    den = lead.T @ r_inv @ lead
    return float(np.trace(np.linalg.solve(den, num)))


def power_sam_vector(r_inv: np.ndarray, noise_cov: np.ndarray, leadfield: np.ndarray) -> float:
    """Trace form ``Trace((L' R^{-1} L)(L' R^{-1} N R^{-1} L)^{-1})``."""
    lead = _as_full_rank(leadfield)
    r_inv_lead = r_inv @ lead
    num = lead.T @ r_inv_lead
    den = r_inv_lead.T @ noise_cov @ r_inv_lead
    return float(np.trace(np.linalg.solve(den, num)))


def nai_tilde(r_inv: np.ndarray, n_inv: np.ndarray, leadfield: np.ndarray) -> float:
    """Trace-ratio power ``Trace((L' R^{-1} L)^{-1}) / Trace((L' N^{-1} L)^{-1})``.

    Kept for the bias certification: unlike the trace form, scanning this
    ratio is not equivalent to a goodness-of-fit scan.
    """
    lead = _as_full_rank(leadfield)
    num = float(np.trace(np.linalg.inv(lead.T @ r_inv @ lead)))
    den = float(np.trace(np.linalg.inv(lead.T @ n_inv @ lead)))
    return num / den


@dataclass(frozen=True)
class DerivedConstants:
    """Constants of the power-to-fit transfer functions for one source.

    ``snr`` is the whitened source power ``x' N^{-1} x``;
    ``nai_factor = snr / (1 + snr)`` and
    ``sam_factor = (snr^2 + 2 snr) / (1 + snr)^2`` satisfy
    ``0 < nai_factor < sam_factor < 1``.
    """

    snr: float
    nai_factor: float
    sam_factor: float

    def __post_init__(self):
        if not (0.0 < self.nai_factor < self.sam_factor < 1.0):
            raise ValueError("derived constants violate 0 < nai_factor < sam_factor < 1")


def derived_constants(n_inv: np.ndarray, source: np.ndarray) -> DerivedConstants:
    x = np.asarray(source, dtype=float)
    if not np.any(x):
        raise ValueError("no source")
    snr = float(x @ n_inv @ x)
    if snr <= 0.0:
        raise ValueError("no source")
    # sam_factor = (snr^2 + 2 snr)/(1 + snr)^2 = 1 - 1/(1 + snr)^2; the first
    # form is accurate for small snr, the second avoids saturating at 1.0 for
    # large snr (beyond ~1e8 double precision saturates anyway and the
    # invariant check rejects the constants)
    if snr <= 1.0:
        sam_factor = (snr**2 + 2.0 * snr) / (1.0 + snr) ** 2
    else:
        sam_factor = 1.0 - 1.0 / (1.0 + snr) ** 2
    return DerivedConstants(
        snr=snr,
        nai_factor=snr / (1.0 + snr),
        sam_factor=sam_factor,
    )


def _check_unit_interval(t: float) -> float:
    if not (-_DOMAIN_SLACK <= t <= 1.0 + _DOMAIN_SLACK):
        raise ValueError("argument outside [0, 1]")
    return min(max(t, 0.0), 1.0)


def theorem4_f(constants: DerivedConstants, t: float) -> float:
    """Excess of the noise-normalized power as a function of whitened GOF."""
    t = _check_unit_interval(t)
    mu = constants.nai_factor
    return mu * t / (1.0 - mu * t)


def theorem4_g(constants: DerivedConstants, t: float) -> float:
    """Excess of the noise-ratio power as a function of whitened GOF."""
    t = _check_unit_interval(t)
    rho = constants.sam_factor
    return (1.0 / (constants.snr + 2.0)) * (1.0 / (1.0 - rho * t) - 1.0)


def nai_sam_transform(constants: DerivedConstants, nai_excess: float) -> float:
    """Monotone map taking the NAI excess ``P_NAI - k`` to the SAM excess.

    Inverts the NAI transfer function and applies the SAM one, so the two
    power maps carry the same ordering information.
    """
    if nai_excess < -1e-12:
        raise ValueError("excess power must be nonnegative")
    excess = max(nai_excess, 0.0)
    t = excess / (constants.nai_factor * (1.0 + excess))
    return theorem4_g(constants, t)


def attach_beamformer_powers(
    report,
    grid: CandidateGrid,
    r_inv: np.ndarray,
    n_inv: np.ndarray,
    noise_cov: np.ndarray,
) -> None:
    """Fill the beamformer columns of a scan report in place.

    Scalar candidates (one column) get the unit-gain power as well; the
    trace-ratio value is only defined for three-column candidates.
    """
    for row, cand in zip(report.rows, grid.candidates):
        if row.flag:
            continue
        lead = cand.leadfield
        k = lead.shape[1]
        row.k = k
        try:
            if k == 1:
                vec = lead[:, 0]
                row.p_ug = power_ug(r_inv, vec)
                row.p_nai = power_nai_scalar(r_inv, n_inv, vec)
                row.p_sam = power_sam_scalar(r_inv, noise_cov, vec)
            else:
                row.p_nai = power_nai_vector(r_inv, n_inv, lead)
                row.p_sam = power_sam_vector(r_inv, noise_cov, lead)
                if k == 3:
                    row.nai_tilde = nai_tilde(r_inv, n_inv, lead)
        except ValueError as err:
            row.flag = str(err)
            row.p_ug = row.p_nai = row.p_sam = row.nai_tilde = None
