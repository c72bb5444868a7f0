"""Two-stage proper orthogonal decomposition and reduced coordinates.

Stage 1 compresses each parameter's deviation trajectory in time; stage
2 concatenates the per-parameter bases and compresses across parameters.
Both stages are weighted by the finite element mass matrix through its
Cholesky factor M = L L^T: the SVD runs on L^T A and the retained left
vectors are mapped back through L^{-T}, which makes every basis
L2-orthonormal (W^T M W = I) rather than merely Euclidean-orthonormal.

Rank selection keeps the smallest m whose discarded relative energy
sum(sigma_i^2, i > m) / sum(sigma_i^2) is at most the tolerance, with
the sums restricted to the numerical rank (singular values above
1e-14 * sigma_1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchiveError
from .fom import SnapshotSet
from .linalg import CholeskyFactor, CsrMatrix, as_matrix
from .linalg import thin_svd
from .sampling import ParamNormalization, normalization_from_box

__all__ = [
    "CoefficientDataset",
    "PodBasis",
    "build_targets",
    "pod",
    "project",
    "read_basis",
    "read_dataset",
    "select_rank",
    "two_stage_pod",
    "write_basis",
    "write_dataset",
]

_BASIS_MAGIC = b"RBBAS101"
_DATASET_FORMAT = "RBCOF-1"


def select_rank(sigma, eps):
    """Smallest rank retaining all but a relative energy eps.

    Parameters
    ----------
    sigma : nonincreasing 1-D array of singular values.
    eps : float in (0, 1), discarded-energy tolerance.

    Returns
    -------
    int, at least 1 and at most the numerical rank.

    Raises
    ------
    ValueError if every singular value is zero (rank 0) or the inputs
    are malformed.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ValueError("select_rank: sigma must be a nonempty 1-D array")
    if not (0.0 < eps < 1.0):
        raise ValueError(f"select_rank: eps must lie in (0, 1), got {eps}")
    if np.any(np.diff(sigma) > 1e-12 * max(sigma[0], 1.0)):
        raise ValueError("select_rank: sigma must be nonincreasing")
    if sigma[0] <= 0.0:
        raise ValueError("select_rank: all singular values vanish (rank 0)")
    rank = int(np.count_nonzero(sigma > 1e-14 * sigma[0]))
    energy = sigma[:rank] ** 2
    total = energy.sum()
    tail = total - np.cumsum(energy)
    return int(np.argmax(tail <= eps * total)) + 1


def pod(a, eps, mass_factor: CholeskyFactor):
    """Mass-weighted POD of the columns of `a`.

    Returns (w, sigma) with w the (n_h, m) L2-orthonormal basis and
    sigma the m retained singular values. Each basis column is
    sign-normalized so its largest-magnitude entry is positive.
    """
    a = as_matrix(a, "pod input")
    weighted = mass_factor.apply_lt(a)
    u, sigma, _ = thin_svd(weighted)
    m = select_rank(sigma, eps)
    w = mass_factor.solve_lt(u[:, :m])
    w = np.ascontiguousarray(w)
    for j in range(m):
        peak = np.argmax(np.abs(w[:, j]))
        if w[peak, j] < 0.0:
            w[:, j] = -w[:, j]
    return w, sigma[:m].copy()


@dataclass(frozen=True)
class PodBasis:
    """Reduced basis with the tolerances and spectrum that produced it.

    w : (n_h, n_rb) basis, W^T M W = I.
    sigma : (n_rb,) stage-2 singular values of the retained modes.
    """

    w: np.ndarray
    eps_time: float
    eps_param: float
    sigma: np.ndarray

    def __post_init__(self):
        w = as_matrix(self.w, "basis")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (w.shape[1],):
            raise ValueError("PodBasis: sigma length must equal n_rb")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_h(self):
        return self.w.shape[0]

    @property
    def n_rb(self):
        return self.w.shape[1]


def two_stage_pod(snapshots: SnapshotSet, eps_time, eps_param,
                  mass_factor: CholeskyFactor) -> PodBasis:
    """Compress trajectories in time, then across parameters."""
    stage1 = []
    for j in range(snapshots.n_param):
        w_j, _ = pod(snapshots.deviations[j].T, eps_time, mass_factor)
        stage1.append(w_j)
    w, sigma = pod(np.hstack(stage1), eps_param, mass_factor)
    return PodBasis(w=w, eps_time=float(eps_time), eps_param=float(eps_param),
                    sigma=sigma)


def project(basis: PodBasis, mass: CsrMatrix, v):
    """Reduced coordinates W^T M v of a full-order deviation vector."""
    return basis.w.T @ mass.matvec(np.asarray(v, dtype=np.float64))


def build_targets(basis: PodBasis, mass: CsrMatrix, snapshots: SnapshotSet,
                  normalization: ParamNormalization | None = None):
    """Project a snapshot set onto the basis.

    Returns a CoefficientDataset whose coeffs[i, k] are the reduced
    coordinates of parameter i at saved step k. Without an explicit
    normalization, a plain affine map over the parameter bounding box
    is used.
    """
    if basis.n_h != snapshots.n_h:
        raise ValueError("build_targets: basis and snapshots disagree on n_h")
    if normalization is None:
        lo = snapshots.params.min(axis=0)
        hi = snapshots.params.max(axis=0)
        pad = np.where(hi > lo, 0.0, 0.5)
        normalization = normalization_from_box(
            list(zip(lo - pad, hi + pad)))
    mw = mass.matmat(basis.w)
    coeffs = snapshots.deviations @ mw
    return CoefficientDataset(params=snapshots.params.copy(), coeffs=coeffs,
                              normalization=normalization)


@dataclass(frozen=True)
class CoefficientDataset:
    """Training targets: reduced coordinates per parameter and saved step.

    params : (n_param, p) physical parameter values.
    coeffs : (n_param, n_saved, n_rb) reduced coordinates; the first
        saved step is zero for every parameter.
    normalization : map from physical parameters to network inputs.
    """

    params: np.ndarray
    coeffs: np.ndarray
    normalization: ParamNormalization

    def __post_init__(self):
        params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 3 or coeffs.shape[0] != params.shape[0]:
            raise ValueError("CoefficientDataset: inconsistent shapes")
        if params.shape[1] != self.normalization.dim:
            raise ValueError(
                "CoefficientDataset: normalization dimension mismatch")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_param(self):
        return self.coeffs.shape[0]

    @property
    def n_saved(self):
        return self.coeffs.shape[1]

    @property
    def n_rb(self):
        return self.coeffs.shape[2]

    def params_normalized(self):
        return self.normalization.normalize(self.params)


def write_basis(basis: PodBasis, path):
    """Binary basis archive: magic, dims, tolerances, column-major W,
    stage-2 singular values."""
    with open(path, "wb") as fh:
        fh.write(_BASIS_MAGIC)
        fh.write(np.array([basis.n_h, basis.n_rb], dtype="<u8").tobytes())
        fh.write(np.array([basis.eps_time, basis.eps_param],
                          dtype="<f8").tobytes())
        fh.write(np.asfortranarray(basis.w).astype("<f8").tobytes(order="F"))
        fh.write(basis.sigma.astype("<f8").tobytes())


def read_basis(path) -> PodBasis:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"{path}: unreadable basis archive: {exc}") from exc
    if len(raw) < 8 + 16 + 16:
        raise ArchiveError(f"{path}: truncated basis archive")
    if raw[:8] != _BASIS_MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:8]!r}")
    n_h, n_rb = (int(v) for v in np.frombuffer(raw[8:24], dtype="<u8"))
    eps_time, eps_param = np.frombuffer(raw[24:40], dtype="<f8")
    expected = 40 + 8 * (n_h * n_rb + n_rb)
    if len(raw) != expected:
        raise ArchiveError(
            f"{path}: size {len(raw)} does not match header (expected {expected})")
    w = np.frombuffer(raw, dtype="<f8", count=n_h * n_rb,
                      offset=40).reshape((n_h, n_rb), order="F")
    sigma = np.frombuffer(raw, dtype="<f8", count=n_rb,
                          offset=40 + 8 * n_h * n_rb)
    return PodBasis(w=np.ascontiguousarray(w), eps_time=float(eps_time),
                    eps_param=float(eps_param), sigma=sigma.copy())


def write_dataset(dataset: CoefficientDataset, path):
    """JSON coefficient archive, format tag RBCOF-1."""
    record = {
        "format": _DATASET_FORMAT,
        "n_param": dataset.n_param,
        "n_saved": dataset.n_saved,
        "n_rb": dataset.n_rb,
        "p": dataset.params.shape[1],
        "normalization": dataset.normalization.to_dict(),
        "params": dataset.params.tolist(),
        "coeffs": dataset.coeffs.tolist(),
    }
    Path(path).write_text(json.dumps(record, sort_keys=True))


def read_dataset(path) -> CoefficientDataset:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable dataset: {exc}") from exc
    if record.get("format") != _DATASET_FORMAT:
        raise ArchiveError(
            f"{path}: bad dataset format tag {record.get('format')!r}")
    try:
        params = np.asarray(record["params"], dtype=np.float64)
        coeffs = np.asarray(record["coeffs"], dtype=np.float64)
        norm = ParamNormalization.from_dict(record["normalization"])
    except (KeyError, ValueError) as exc:
        raise ArchiveError(f"{path}: malformed dataset: {exc}") from exc
    dataset = CoefficientDataset(params=params, coeffs=coeffs,
                                 normalization=norm)
    declared = (record.get("n_param"), record.get("n_saved"),
                record.get("n_rb"))
    if declared != (dataset.n_param, dataset.n_saved, dataset.n_rb):
        raise ArchiveError(f"{path}: dataset dimensions disagree with header")
    return dataset
