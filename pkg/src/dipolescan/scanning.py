"""Dipole scanning in weighted inner products and the standardized
(sLORETA-style) reconstruction family.

A candidate leadfield A is fitted to data d by minimizing ``|d - A j|``
in the metric norm; the goodness of fit is one minus the ratio of residual
to data energy.  The standardized reconstruction
``(A' C A)^{-1/2} A' C d`` has squared Euclidean norm equal to
``|d|_C^2 * GOF``, so scanning either quantity is equivalent.

Metric recipes cover the classic choices: identity, inverse noise
covariance, ``(L L' + alpha H)^+`` on the complete leadfield with H the
centering projection, ``(L L' + alpha I)^{-1}``, and the reweighted variant
whose block weights solve the fixed-point equation
``W_i = (L_i' (L W^{-1} L' + alpha H)^+ L_i)^{1/2}``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .forward import CandidateGrid
from .linalg import (
    DEFAULT_RANK_TOL,
    Metric,
    MetricRangeError,
    _readonly,
    identity_metric,
    psd_power,
    symmetrize,
)

GRAM_COND_TOL = 1e-12

METRIC_KINDS = (
    "identity",
    "inverse_noise",
    "classic_sloreta",
    "sekihara_sloreta",
    "eloreta",
    "explicit",
)


class DegenerateCandidateError(ValueError):
    """Candidate gram matrix ``A' C A`` is numerically singular."""


class ZeroDataError(ValueError):
    """Data vector has zero norm in the scan metric."""


@dataclass(frozen=True)
class DipoleFit:
    """Weighted least-squares fit of one candidate to one data vector."""

    moment: np.ndarray
    residual_norm_sq: float
    gof: float


def centering_projection(dim: int) -> np.ndarray:
    """Orthogonal projection onto the complement of the constant vector."""
    h = np.full((dim, dim), -1.0 / dim)
    np.fill_diagonal(h, 1.0 - 1.0 / dim)
    return h


def _whitened(metric: Metric, leadfield: np.ndarray, data: np.ndarray):
    """Whitened leadfield/data plus the gram matrix ``A' C A``, checked."""
    lead = np.asarray(leadfield, dtype=float)
    d = np.asarray(data, dtype=float)
    if lead.ndim != 2 or lead.shape[0] != metric.dim or d.shape != (metric.dim,):
        raise ValueError("dimension mismatch")
    white_lead = metric.sqrt_apply(lead)
    white_data = metric.sqrt_apply(d)
    gram = symmetrize(white_lead.T @ white_lead)
    vals = np.linalg.eigvalsh(gram)
    if vals[-1] <= 0.0 or vals[0] <= GRAM_COND_TOL * vals[-1]:
        raise DegenerateCandidateError("degenerate candidate")
    return lead, d, white_lead, white_data, gram


def _data_norm_sq(metric: Metric, data: np.ndarray) -> float:
    px = metric.project_onto_eigenbasis(np.asarray(data, dtype=float))
    return float(np.sum(metric.eigenvalues * px * px))


def weighted_ls_fit(metric: Metric, leadfield: np.ndarray, data: np.ndarray) -> DipoleFit:
    """Solve ``argmin_j |d - A j|_C^2`` via the whitened ordinary LS problem.

    The normal-equation form ``(A' C A)^{-1} A' C d`` is the contract; the
    solve itself factorizes the whitened leadfield for conditioning.
    """
    lead, d, white_lead, white_data, _ = _whitened(metric, leadfield, data)
    metric.check_in_range(d)
    for column in lead.T:
        metric.check_in_range(column)
    norm_sq = _data_norm_sq(metric, d)
    if norm_sq <= 0.0:
        raise ZeroDataError("zero data")
    moment, *_ = np.linalg.lstsq(white_lead, white_data, rcond=None)
    residual = d - lead @ moment
    residual_norm_sq = _data_norm_sq(metric, residual)
    return DipoleFit(
        moment=_readonly(moment),
        residual_norm_sq=residual_norm_sq,
        gof=1.0 - residual_norm_sq / norm_sq,
    )


def gof(metric: Metric, leadfield: np.ndarray, data: np.ndarray) -> float:
    """Goodness of fit ``1 - |d - A j|_C^2 / |d|_C^2`` of a candidate."""
    return weighted_ls_fit(metric, leadfield, data).gof


def residual_variance(metric: Metric, leadfield: np.ndarray, data: np.ndarray) -> float:
    """Minimal squared metric misfit ``min_j |d - A j|_C^2``."""
    return weighted_ls_fit(metric, leadfield, data).residual_norm_sq


def sloreta_reconstruction(metric: Metric, leadfield: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Standardized moment estimate ``(A' C A)^{-1/2} A' C d``."""
    _, _, white_lead, white_data, gram = _whitened(metric, leadfield, data)
    vals, vecs = np.linalg.eigh(gram)
    inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
    return inv_sqrt @ (white_lead.T @ white_data)


def sloreta_power(metric: Metric, leadfield: np.ndarray, data: np.ndarray) -> float:
    """Squared Euclidean norm of the standardized reconstruction."""
    rec = sloreta_reconstruction(metric, leadfield, data)
    return float(rec @ rec)


@dataclass(frozen=True)
class MetricRecipe:
    """Named construction of a scan metric.

    ``matrix`` carries the noise covariance for ``inverse_noise`` and the
    metric itself for ``explicit``; the leadfield-derived recipes take the
    complete leadfield at build time.
    """

    kind: str
    alpha: float = 0.0
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.matrix is not None:
            object.__setattr__(self, "matrix", _readonly(np.asarray(self.matrix, dtype=float)))


@dataclass(frozen=True)
class ELoretaWeights:
    """Fixed-point block weights of the reweighted metric recipe.

    ``residual`` is the defining-equation defect
    ``max_i |W_i - (L_i' (L W^{-1} L' + alpha H)^+ L_i)^{1/2}|_F`` evaluated
    at the returned blocks.
    """

    blocks: tuple[np.ndarray, ...]
    alpha: float
    residual: float
    converged: bool
    iterations: int

    def block_diagonal_inverse(self) -> np.ndarray:
        size = 3 * len(self.blocks)
        out = np.zeros((size, size))
        for i, block in enumerate(self.blocks):
            out[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = np.linalg.inv(block)
        return out


def _spd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root; raises on numerically indefinite iterates."""
    sym = symmetrize(matrix)
    if np.count_nonzero(sym - np.diag(np.diagonal(sym))) == 0:
        diag = np.diagonal(sym)
        if np.any(diag < 0.0):
            raise ValueError("eLORETA iterate indefinite")
        return np.diag(np.sqrt(diag))
    vals, vecs = np.linalg.eigh(sym)
    if vals[-1] <= 0.0 or vals[0] < -1e-12 * vals[-1]:
        raise ValueError("eLORETA iterate indefinite")
    vals = np.clip(vals, 0.0, None)
    return symmetrize((vecs * np.sqrt(vals)) @ vecs.T)


def solve_eloreta_weights(
    complete_leadfield: np.ndarray,
    alpha: float,
    tol: float = 1e-9,
    max_iter: int = 500,
) -> ELoretaWeights:
    """Plain fixed-point iteration for the block weights, started at identity.

    Returns the current blocks as soon as their defining-equation defect
    drops to ``tol``; non-convergence is reported through the flag and the
    last defect, never silently accepted.
    """
    lead = np.asarray(complete_leadfield, dtype=float)
    if lead.ndim != 2 or lead.shape[1] % 3 != 0 or lead.shape[1] == 0:
        raise ValueError("complete leadfield must have 3M columns")
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    n, total = lead.shape
    m = total // 3
    pieces = [lead[:, 3 * i : 3 * i + 3] for i in range(m)]
    for i, piece in enumerate(pieces):
        if np.linalg.matrix_rank(piece) < 3:
            raise ValueError(f"leadfield block {i} is rank deficient")
    centering = centering_projection(n)
    blocks = [np.eye(3) for _ in range(m)]

    def targets_of(current):
        inv_blocks = []
        for block in current:
            vals = np.linalg.eigvalsh(block)
            if vals[0] <= 1e-14 * max(vals[-1], 0.0) or vals[-1] <= 0.0:
                raise ValueError("eLORETA iterate indefinite")
            inv_blocks.append(np.linalg.inv(block))
        winv = np.zeros((total, total))
        for i, inv_block in enumerate(inv_blocks):
            winv[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = inv_block
        core = lead @ winv @ lead.T + alpha * centering
        core_pinv = psd_power(Metric.from_matrix(core), -1.0, pseudo=True).matrix
        return [_spd_sqrt(piece.T @ core_pinv @ piece) for piece in pieces]

    residual = np.inf
    for iteration in range(max_iter):
        targets = targets_of(blocks)
        residual = max(
            float(np.linalg.norm(target - block)) for target, block in zip(targets, blocks)
        )
        if residual <= tol:
            return ELoretaWeights(
                blocks=tuple(_readonly(b) for b in blocks),
                alpha=float(alpha),
                residual=residual,
                converged=True,
                iterations=iteration,
            )
        blocks = targets
    targets = targets_of(blocks)
    residual = max(float(np.linalg.norm(t - b)) for t, b in zip(targets, blocks))
    return ELoretaWeights(
        blocks=tuple(_readonly(b) for b in blocks),
        alpha=float(alpha),
        residual=residual,
        converged=False,
        iterations=max_iter,
    )


def build_metric(
    recipe: MetricRecipe,
    n_sensors: int | None = None,
    complete_leadfield: np.ndarray | None = None,
    *,
    rank_tol: float = DEFAULT_RANK_TOL,
    eloreta_tol: float = 1e-9,
    eloreta_max_iter: int = 500,
) -> Metric:
    """Build the scan metric named by a recipe.

    Pseudoinverse recipes record their kernel in the returned metric; the
    plain-inverse recipe raises ``singular metric`` when not invertible.
    """
    if recipe.kind == "identity":
        dim = n_sensors
        if dim is None and complete_leadfield is not None:
            dim = np.asarray(complete_leadfield).shape[0]
        if dim is None:
            raise ValueError("identity recipe requires the sensor count")
        return identity_metric(int(dim), rank_tol)
    if recipe.kind == "explicit":
        if recipe.matrix is None:
            raise ValueError("explicit recipe requires a matrix")
        return Metric.from_matrix(recipe.matrix, rank_tol)
    if recipe.kind == "inverse_noise":
        if recipe.matrix is None:
            raise ValueError("inverse-noise recipe requires the noise covariance")
        return psd_power(Metric.from_matrix(recipe.matrix, rank_tol), -1.0)
    if complete_leadfield is None:
        raise ValueError(f"{recipe.kind} recipe requires the complete leadfield")
    lead = np.asarray(complete_leadfield, dtype=float)
    n = lead.shape[0]
    if recipe.kind == "classic_sloreta":
        base = lead @ lead.T + recipe.alpha * centering_projection(n)
        return psd_power(Metric.from_matrix(base, rank_tol), -1.0, pseudo=True)
    if recipe.kind == "sekihara_sloreta":
        base = lead @ lead.T + recipe.alpha * np.eye(n)
        return psd_power(Metric.from_matrix(base, rank_tol), -1.0)
    # eloreta
    weights = solve_eloreta_weights(lead, recipe.alpha, eloreta_tol, eloreta_max_iter)
    if not weights.converged:
        raise ValueError(
            f"eLORETA weights did not converge (residual {weights.residual:.3e} "
            f"after {weights.iterations} iterations)"
        )
    base = lead @ weights.block_diagonal_inverse() @ lead.T
    base = base + recipe.alpha * centering_projection(n)
    return psd_power(Metric.from_matrix(base, rank_tol), -1.0, pseudo=True)


@dataclass
class ScanRow:
    """Per-candidate scan values; beamformer columns are attached on demand."""

    candidate_id: str
    gof: float | None
    sloreta_power: float | None
    flag: str = ""
    p_ug: float | None = None
    p_nai: float | None = None
    p_sam: float | None = None
    nai_tilde: float | None = None
    k: int | None = None


@dataclass
class ScanReport:
    """Scan results with deterministic argmax metadata."""

    rows: list[ScanRow]
    argmax_index: int | None
    argmax_id: str | None
    is_tie: bool

    def has_beamformer_columns(self) -> bool:
        return any(
            row.p_ug is not None
            or row.p_nai is not None
            or row.p_sam is not None
            or row.nai_tilde is not None
            for row in self.rows
        )

    def to_csv_text(self) -> str:
        header = ["candidate_id", "gof", "sloreta_power", "flags"]
        extra = self.has_beamformer_columns()
        if extra:
            header += ["p_ug", "p_nai", "p_sam", "nai_tilde", "k"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in self.rows:
            record = [
                row.candidate_id,
                _csv_number(row.gof),
                _csv_number(row.sloreta_power),
                row.flag,
            ]
            if extra:
                record += [
                    _csv_number(row.p_ug),
                    _csv_number(row.p_nai),
                    _csv_number(row.p_sam),
                    _csv_number(row.nai_tilde),
                    "" if row.k is None else str(row.k),
                ]
            writer.writerow(record)
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        rows = []
        for row in self.rows:
            record = {
                "candidate_id": row.candidate_id,
                "gof": row.gof,
                "sloreta_power": row.sloreta_power,
                "flags": row.flag,
            }
            if self.has_beamformer_columns():
                record.update(
                    p_ug=row.p_ug,
                    p_nai=row.p_nai,
                    p_sam=row.p_sam,
                    nai_tilde=row.nai_tilde,
                    k=row.k,
                )
            rows.append(record)
        return {
            "rows": rows,
            "argmax": self.argmax_id,
            "argmax_index": self.argmax_index,
            "is_tie": self.is_tie,
        }

    def to_json_text(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2) + "\n"


def _csv_number(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def scan(metric: Metric, grid: CandidateGrid, data: np.ndarray) -> ScanReport:
    """Evaluate every candidate; degeneracies become per-candidate flags.

    The argmax is taken over the goodness of fit; exact ties are broken by
    the lowest candidate index and recorded in the report.
    """
    if len(grid) == 0:
        raise ValueError("grid must contain at least one candidate")
    d = np.asarray(data, dtype=float)
    metric.check_in_range(d)
    if _data_norm_sq(metric, d) <= 0.0:
        raise ZeroDataError("zero data")
    rows: list[ScanRow] = []
    for cand in grid.candidates:
        try:
            fit = weighted_ls_fit(metric, cand.leadfield, d)
            power = sloreta_power(metric, cand.leadfield, d)
            rows.append(ScanRow(cand.candidate_id, fit.gof, power))
        except (DegenerateCandidateError, MetricRangeError) as err:
            rows.append(ScanRow(cand.candidate_id, None, None, flag=str(err)))
    best_index = None
    best_gof = None
    tie = False
    for idx, row in enumerate(rows):
        if row.gof is None:
            continue
        if best_gof is None or row.gof > best_gof:
            best_index, best_gof, tie = idx, row.gof, False
        elif row.gof == best_gof:
            tie = True
    return ScanReport(
        rows=rows,
        argmax_index=best_index,
        argmax_id=None if best_index is None else rows[best_index].candidate_id,
        is_tie=tie,
    )
