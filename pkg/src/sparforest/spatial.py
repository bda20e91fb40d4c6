"""Intrinsic CAR precision, its variance scaling, and the BYM2 mixture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .areal import ArealMap, InputError

EIGEN_CAP = 2000


def icar_precision(amap: ArealMap) -> sp.csr_matrix:
    """Return ``D - W`` for the map's adjacency."""
    if amap.n_edges == 0:
        raise InputError("icar_precision needs at least one edge")
    w = amap.sparse()
    return (sp.diags(amap.degrees.astype(float)) - w).tocsr()


def _component_marginal_variances(qc: np.ndarray) -> np.ndarray:
    """Diagonal of the sum-to-zero generalized inverse of a connected block."""
    n = qc.shape[0]
    if n <= EIGEN_CAP:
        lam, vec = np.linalg.eigh(qc)
        keep = np.arange(n) > 0  # the constant vector has the smallest eigenvalue
        return (vec[:, keep] ** 2 / lam[keep]).sum(axis=1)
    j = np.full((n, n), 1.0 / n)
    return np.diag(np.linalg.inv(qc + j)) - 1.0 / n


def _block(q, idx):
    sub = q[idx][:, idx]
    return sub.toarray() if sp.issparse(sub) else np.asarray(sub, dtype=float)


@dataclass(frozen=True)
class ScaledIcarPrecision:
    """Scaled ICAR precision with its spectral basis on the constrained subspace.

    ``scale_factor`` holds one factor per connected component; the scaled
    matrix is ``q_matrix``. ``basis`` has orthonormal columns spanning the
    per-component sum-to-zero subspace and ``eigenvalues`` are the matching
    eigenvalues of ``q_matrix``, so ``u = basis @ c`` with
    ``c ~ N(0, diag(1 / eigenvalues))`` is a draw from the constrained prior.
    Singleton components carry a unit-variance independent effect.
    """

    q_matrix: sp.csr_matrix
    scale_factor: np.ndarray
    components: np.ndarray
    basis: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def n_units(self) -> int:
        return self.q_matrix.shape[0]

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def marginal_variances(self) -> np.ndarray:
        return (self.basis ** 2 / self.eigenvalues).sum(axis=1)

    def log_det_plus(self) -> float:
        """Log pseudo-determinant over the constrained subspace."""
        return float(np.log(self.eigenvalues).sum())


def scale_icar(q, components=None) -> ScaledIcarPrecision:
    """Scale an ICAR precision so generalized-inverse variances have geometric mean one.

    Each connected component is scaled on its own. ``components`` is a label
    per unit; if omitted it is derived from the sparsity pattern of ``q``.
    """
    q = sp.csr_matrix(q, dtype=float)
    k = q.shape[0]
    if components is None:
        pattern = q.copy()
        pattern.setdiag(0)
        pattern.eliminate_zeros()
        _, components = sp.csgraph.connected_components(pattern, directed=False)
    components = np.asarray(components, dtype=int)
    if components.shape != (k,):
        raise InputError("components must label every unit")
    scale = np.ones(components.max() + 1)
    diag_scale = np.ones(k)
    cols, lams = [], []
    for c in range(components.max() + 1):
        idx = np.flatnonzero(components == c)
        if idx.size == 1:
            vec = np.zeros((k, 1))
            vec[idx, 0] = 1.0
            cols.append(vec)
            lams.append(np.ones(1))
            continue
        qc = _block(q, idx)
        s = float(np.exp(np.mean(np.log(_component_marginal_variances(qc)))))
        scale[c] = s
        diag_scale[idx] = s
        lam, v = np.linalg.eigh(s * qc)
        vec = np.zeros((k, idx.size - 1))
        vec[idx] = v[:, 1:]
        cols.append(vec)
        lams.append(lam[1:])
    # singleton rows of q are zero; give them a unit-variance effect
    singles = np.flatnonzero(np.bincount(components)[components] == 1)
    scaled = sp.diags(np.sqrt(diag_scale)) @ q @ sp.diags(np.sqrt(diag_scale))
    scaled = scaled.tolil()
    for i in singles:
        scaled[i, i] = 1.0
    basis = np.hstack(cols)
    lam_all = np.concatenate(lams)
    basis.setflags(write=False)
    lam_all.setflags(write=False)
    return ScaledIcarPrecision(scaled.tocsr(), scale, components, basis, lam_all)


def scaled_icar(amap: ArealMap) -> ScaledIcarPrecision:
    return scale_icar(icar_precision(amap), amap.components())


@dataclass(frozen=True)
class Bym2Hyperparams:
    """BYM2 hyperparameter values and their prior settings.

    ``tau0`` is the precision of the half-normal prior on the standard
    deviation ``tau_phi ** -0.5``. ``pc_rho_params`` is ``(mean, sd)`` of a
    normal prior on ``logit(rho)``. ``fixed`` pins ``tau_phi`` and ``rho``
    at the stored values during sampling.
    """

    tau_phi: float = 1.0
    rho: float = 0.5
    tau0: float = 0.001
    pc_rho_params: tuple[float, float] = (0.0, 1.0)
    fixed: bool = False

    def __post_init__(self):
        if not self.tau_phi > 0:
            raise ValueError("tau_phi must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not self.tau0 > 0 or not self.pc_rho_params[1] > 0:
            raise ValueError("prior scales must be positive")


def bym2_compose(v, u, rho: float, tau_phi: float) -> np.ndarray:
    if not tau_phi > 0:
        raise ValueError("tau_phi must be positive")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    return (np.sqrt(1.0 - rho) * v + np.sqrt(rho) * u) / np.sqrt(tau_phi)


def leroux_precision(amap: ArealMap, rho: float) -> sp.csc_matrix:
    """Leroux CAR precision ``rho (D - W) + (1 - rho) I`` (unit scale)."""
    w = amap.sparse()
    d = sp.diags(amap.degrees.astype(float))
    return (rho * (d - w) + (1.0 - rho) * sp.identity(amap.n_units)).tocsc()
