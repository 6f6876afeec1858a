"""
Dense complex linear algebra and special functions
"""
import logging
from typing import Tuple, Union

import numpy as np
from scipy import linalg as sla
from scipy import special

from errors import DomainError, NotPsdError, SingularMatrixError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

HERMITIAN_RTOL = 1e-12


def hermitize(m: np.ndarray) -> np.ndarray:
    """Project onto the Hermitian matrices"""
    m = np.asarray(m, dtype=complex)
    return 0.5 * (m + m.conj().T)


def check_hermitian(m: np.ndarray, rtol: float = HERMITIAN_RTOL) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    scale = max(1.0, float(np.linalg.norm(m)))
    skew = float(np.linalg.norm(m - m.conj().T))
    if skew > rtol * scale:
        raise ValidationError(f"matrix is not Hermitian (skew norm {skew:.3e})")
    return m


def hermitian_evd(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigen-decomposition of a Hermitian matrix

    Returns:
        (eigenvalues descending, unitary eigenvector matrix) with M = QΛQ^H
    """
    m = check_hermitian(m)
    values, vectors = sla.eigh(hermitize(m))
    return values[::-1].copy(), vectors[:, ::-1].copy()


def psd_factor(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """
    Factor a PSD matrix as L L^H, clipping eigenvalues in [-tol, 0] to zero

    Raises:
        NotPsdError: an eigenvalue is below -tol
    """
    m = hermitize(check_hermitian(m, rtol=1e-9))
    values, vectors = sla.eigh(m)
    if values.size and values[0] < -tol:
        raise NotPsdError(f"smallest eigenvalue {values[0]:.3e} below -{tol:.1e}")
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def min_eigenvalue(m: np.ndarray) -> float:
    return float(sla.eigvalsh(hermitize(m))[0])


def pseudo_inverse(x: np.ndarray) -> np.ndarray:
    """Right inverse X^H (X X^H)^{-1} of a full-row-rank matrix"""
    x = np.atleast_2d(np.asarray(x, dtype=complex))
    rows, cols = x.shape
    if rows > cols:
        raise SingularMatrixError(f"{rows}x{cols} matrix cannot have full row rank")
    singular = np.linalg.svd(x, compute_uv=False)
    if singular[-1] <= 1e-12 * max(singular[0], 1e-300):
        raise SingularMatrixError("matrix rows are linearly dependent")
    gram = x @ x.conj().T
    return sla.solve(gram, x, assume_a="pos").conj().T


def erfc(x: ArrayLike) -> ArrayLike:
    return special.erfc(x)


def erfc_inv(y: ArrayLike) -> ArrayLike:
    """Inverse of erfc on (0, 2), refined with one Newton step"""
    y_arr = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y_arr)) or np.any(y_arr <= 0.0) or np.any(y_arr >= 2.0):
        raise DomainError(f"erfc_inv argument must lie in (0, 2), got {y}")
    x = special.erfcinv(y_arr)
    # d/dx erfc(x) = -2/sqrt(pi) exp(-x^2)
    slope = -2.0 / np.sqrt(np.pi) * np.exp(-x * x)
    x = x - (special.erfc(x) - y_arr) / slope
    return float(x) if np.ndim(x) == 0 else x
