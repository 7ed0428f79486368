"""Small dense complex linear algebra for the qubit / qudit models.

Matrices are plain ``numpy`` complex arrays.  Everything here is a pure
function; dimensions are tiny (at most 8) so clarity wins over speed,
except in the few helpers that accept stacked arrays ``(..., d, d)`` and
are used inside Monte Carlo loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ComplexMatrix = np.ndarray

HERM_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10
PSD_REJECT = 1e-6

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)


def as_matrix(m, name: str = "matrix") -> ComplexMatrix:
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be two-dimensional, got shape {a.shape}")
    return a


def dagger(m: ComplexMatrix) -> ComplexMatrix:
    return np.conj(np.swapaxes(m, -1, -2))


def hermitian_part(m: ComplexMatrix) -> ComplexMatrix:
    return 0.5 * (m + dagger(m))


def frobenius(m: ComplexMatrix) -> float | np.ndarray:
    return np.sqrt(np.sum(np.abs(m) ** 2, axis=(-2, -1)))


def allclose(a: ComplexMatrix, b: ComplexMatrix, atol: float) -> bool:
    """Entrywise comparison with an explicit absolute tolerance."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and bool(np.max(np.abs(a - b), initial=0.0) <= atol)


def basis_projector(dim: int, index: int = 0) -> ComplexMatrix:
    p = np.zeros((dim, dim), dtype=complex)
    p[index, index] = 1.0
    return p


def matrix_unit(dim: int, i: int, j: int) -> ComplexMatrix:
    """e_i e_j^dagger."""
    e = np.zeros((dim, dim), dtype=complex)
    e[i, j] = 1.0
    return e


# ---------------------------------------------------------------- products


def tensor_product(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    """Kronecker product; system factor first, environment second."""
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def partial_trace_env(rho: ComplexMatrix, d_s: int, d_e: int) -> ComplexMatrix:
    """Trace out the environment factor of a ``kron(system, env)`` operator.

    Accepts stacks ``(..., d_s*d_e, d_s*d_e)``.
    """
    rho = np.asarray(rho, dtype=complex)
    d = d_s * d_e
    if rho.shape[-2:] != (d, d):
        raise ValidationError(
            f"partial trace expects a {d}x{d} operator for d_s={d_s}, d_e={d_e}, got {rho.shape[-2:]}"
        )
    r = rho.reshape(rho.shape[:-2] + (d_s, d_e, d_s, d_e))
    return np.einsum("...iaja->...ij", r)


@dataclass(frozen=True)
class EnvironmentState:
    """Pure environment state e_k e_k^dagger (k = 0 by default)."""

    dim: int
    basis_vector_index: int = 0

    def __post_init__(self):
        if not 0 <= self.basis_vector_index < self.dim:
            raise ValidationError("environment basis index out of range")

    @property
    def matrix(self) -> ComplexMatrix:
        return basis_projector(self.dim, self.basis_vector_index)


# ------------------------------------------------------------ spectral


def jacobi_eigh(m: ComplexMatrix, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi eigensolver for a complex Hermitian matrix.

    Returns ascending eigenvalues and the unitary whose columns are the
    matching eigenvectors.
    """
    a = hermitian_part(as_matrix(m))
    d = a.shape[0]
    v = np.eye(d, dtype=complex)
    scale = max(frobenius(a), 1e-300)
    for _ in range(max_sweeps):
        off = frobenius(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                mag = abs(apq)
                if mag <= 1e-300:
                    continue
                phase = apq / mag
                app = a[p, p].real
                aqq = a[q, q].real
                tau = (aqq - app) / (2.0 * mag)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # J = diag-phase on q followed by a real plane rotation
                j = np.eye(d, dtype=complex)
                j[p, p] = c
                j[q, q] = c
                j[p, q] = s
                j[q, p] = -s
                ph = np.eye(d, dtype=complex)
                ph[q, q] = np.conj(phase)
                rot = ph @ j
                a = dagger(rot) @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    w = np.real(np.diag(a))
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True)
class Observable:
    """Hermitian matrix with its merged spectral decomposition.

    ``eigenvalues`` are ascending, as returned by :func:`hermitian_spectral`.
    Measurement outcomes are labelled the other way round: outcome 0 is the
    largest eigenvalue (so a sigma_z readout gives outcome 0 on |0>), see
    :attr:`outcome_projectors`.
    """

    matrix: ComplexMatrix
    eigenvalues: tuple
    projectors: tuple
    eigenvectors: tuple = field(repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def outcome_projectors(self) -> tuple:
        return tuple(reversed(self.projectors))

    @property
    def outcome_values(self) -> tuple:
        return tuple(reversed(self.eigenvalues))

    @property
    def outcome_vectors(self) -> tuple:
        return tuple(reversed(self.eigenvectors))

    @property
    def n_outcomes(self) -> int:
        return len(self.eigenvalues)


def hermitian_spectral(m: ComplexMatrix, degeneracy_tol: float = 1e-9) -> Observable:
    """Spectral decomposition with eigenvalues merged within ``degeneracy_tol``."""
    m = as_matrix(m, "observable")
    if m.shape[0] != m.shape[1]:
        raise ValidationError("observable must be square")
    if m.shape[0] > 8:
        raise ValidationError("dimension above 8 is not supported")
    if frobenius(m - dagger(m)) > 1e-10:
        raise ValidationError("observable is not Hermitian")
    w, v = jacobi_eigh(m)
    groups: list[list[int]] = []
    for idx in range(len(w)):
        if groups and abs(w[idx] - w[groups[-1][0]]) <= degeneracy_tol:
            groups[-1].append(idx)
        else:
            groups.append([idx])
    values, projs, vecs = [], [], []
    for g in groups:
        vg = v[:, g]
        values.append(float(np.mean(w[g])))
        projs.append(hermitian_part(vg @ dagger(vg)))
        vecs.append(vg)
    return Observable(
        matrix=hermitian_part(m),
        eigenvalues=tuple(values),
        projectors=tuple(projs),
        eigenvectors=tuple(vecs),
    )


# ------------------------------------------------------------ functions


def _taylor_exp(a: np.ndarray, terms: int = 18) -> np.ndarray:
    d = a.shape[-1]
    eye = np.broadcast_to(np.eye(d, dtype=complex), a.shape)
    result = eye.copy()
    term = eye.copy()
    for k in range(1, terms + 1):
        term = term @ a / k
        result = result + term
    return result


def matrix_exp(m: ComplexMatrix) -> ComplexMatrix:
    """Matrix exponential by scaling and squaring around a Taylor core.

    Works on stacks ``(..., d, d)``; the whole stack shares one scaling
    exponent, chosen so that every scaled member has 1-norm at most 1/2.
    """
    a = np.asarray(m, dtype=complex)
    if a.shape[-1] != a.shape[-2]:
        raise ValidationError("matrix_exp needs square input")
    norm = float(np.max(np.sum(np.abs(a), axis=-2), initial=0.0))
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    r = _taylor_exp(a / (2.0**s))
    for _ in range(s):
        r = r @ r
    return r


def nearest_unitary(m: ComplexMatrix) -> ComplexMatrix:
    """Unitary polar factor of a full-rank square matrix."""
    m = as_matrix(m)
    w, sv, vh = np.linalg.svd(m)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValidationError(f"rank-deficient input (smallest singular value {sv[-1]:.3e})")
    return w @ vh


def psd_sqrt(b: ComplexMatrix) -> ComplexMatrix:
    """Hermitian PSD square root; real input gives real output."""
    b = as_matrix(b)
    if frobenius(b - dagger(b)) > 1e-10:
        raise ValidationError("psd_sqrt needs a Hermitian matrix")
    w, v = jacobi_eigh(b)
    if w[0] < -PSD_REJECT:
        raise ValidationError(f"matrix is not PSD (min eigenvalue {w[0]:.3e})")
    root = hermitian_part(v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ dagger(v))
    if np.all(np.abs(np.imag(b)) == 0):
        return np.real(root)
    return root


# ------------------------------------------------------------ densities


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    violations: tuple  # (invariant name, magnitude) pairs
    hermiticity: float
    trace_error: float
    min_eigenvalue: float

    def __bool__(self):
        return self.passed


def validate_density(
    m: ComplexMatrix,
    herm_tol: float = HERM_TOL,
    trace_tol: float = TRACE_TOL,
    psd_tol: float = PSD_TOL,
) -> ValidationReport:
    """Check the three density-operator invariants and report magnitudes."""
    m = as_matrix(m)
    herm = float(np.max(np.abs(m - dagger(m)), initial=0.0))
    tr = abs(complex(np.trace(m)) - 1.0)
    min_eig = float(np.linalg.eigvalsh(hermitian_part(m))[0])
    violations = []
    if herm > herm_tol:
        violations.append(("hermitian", herm))
    if tr > trace_tol:
        violations.append(("unit_trace", tr))
    if min_eig < -psd_tol:
        violations.append(("psd", min_eig))
    return ValidationReport(not violations, tuple(violations), herm, tr, min_eig)


def density_violations(states: np.ndarray, herm_tol=HERM_TOL, trace_tol=TRACE_TOL, psd_tol=PSD_TOL):
    """Vectorised count of invariant violations over a stack of states."""
    states = np.asarray(states, dtype=complex)
    herm = np.max(np.abs(states - dagger(states)), axis=(-2, -1))
    tr = np.abs(np.trace(states, axis1=-2, axis2=-1) - 1.0)
    mins = np.linalg.eigvalsh(hermitian_part(states))[..., 0]
    return {
        "hermitian": int(np.count_nonzero(herm > herm_tol)),
        "unit_trace": int(np.count_nonzero(tr > trace_tol)),
        "psd": int(np.count_nonzero(mins < -psd_tol)),
        "max_hermiticity": float(np.max(herm, initial=0.0)),
        "max_trace_error": float(np.max(tr, initial=0.0)),
        "min_eigenvalue": float(np.min(mins, initial=np.inf)),
    }


@dataclass(frozen=True)
class DensityOperator:
    """A validated density matrix."""

    matrix: ComplexMatrix
    validation_tol: float = PSD_TOL

    def __post_init__(self):
        report = validate_density(self.matrix, psd_tol=self.validation_tol)
        if not report.passed:
            raise ValidationError(f"not a density operator: {report.violations}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def psd_repair(m: ComplexMatrix) -> ComplexMatrix:
    """Clip negative eigenvalues and renormalise the trace to one."""
    m = as_matrix(m)
    if np.max(np.abs(m - dagger(m)), initial=0.0) > 1e-8:
        raise ValidationError("psd_repair needs a Hermitian input (within 1e-8)")
    w, v = np.linalg.eigh(hermitian_part(m))
    if w[0] >= 0 and abs(np.sum(w) - 1.0) <= TRACE_TOL:
        return hermitian_part(m)
    w = np.clip(w, 0.0, None)
    total = float(np.sum(w))
    if total <= 1e-12:
        raise ValidationError("trace vanishes after clipping negative eigenvalues")
    return hermitian_part((v * (w / total)) @ dagger(v))


def pure_state(vec) -> ComplexMatrix:
    v = np.asarray(vec, dtype=complex).reshape(-1)
    v = v / np.linalg.norm(v)
    return np.outer(v, np.conj(v))
