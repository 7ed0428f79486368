"""Small-step expansions of unitaries and the constants they produce.

Covers the first- and second-order maps of the matrix exponential
(phi_X, psi_X), inversion of phi_{iD}, recovery of a scaled Hamiltonian
from the coefficients of U(n) in powers of 1/sqrt(n), the dilation and
noise unitaries used by the discrete models, and the observable-derived
constants (gamma, b_ij, B) that set the limiting noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import AssumptionError, ConstructionError, CovarianceError, ResonanceError, ValidationError
from .linalg_core import (
    ComplexMatrix,
    Observable,
    as_matrix,
    dagger,
    frobenius,
    hermitian_part,
    jacobi_eigh,
    matrix_exp,
    matrix_unit,
    nearest_unitary,
    psd_sqrt,
)

RESONANCE_TOL = 1e-8

_GL16 = np.polynomial.legendre.leggauss(16)
_GL32 = np.polynomial.legendre.leggauss(32)


def _composite_nodes(panels: int, rule=_GL16, a: float = 0.0, b: float = 1.0):
    x, w = rule
    edges = np.linspace(a, b, panels + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(lo + half * (x + 1.0))
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _phi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z with the removable singularity filled in."""
    z = np.asarray(z, dtype=complex)
    out = np.ones_like(z)
    small = np.abs(z) < 1e-6
    zs = z[small]
    out[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def _is_anti_hermitian(x: ComplexMatrix, tol: float = 1e-12) -> bool:
    return frobenius(x + dagger(x)) <= tol * max(1.0, frobenius(x))


def _conjugation_path(x: ComplexMatrix, y: ComplexMatrix, s: np.ndarray) -> np.ndarray:
    """Stack of e^{-s X} Y e^{s X} for each s."""
    e_plus = matrix_exp(s[:, None, None] * x[None])
    e_minus = matrix_exp(-s[:, None, None] * x[None])
    return e_minus @ y[None] @ e_plus


# ------------------------------------------------------------ phi, psi


def phi_op(x: ComplexMatrix, y: ComplexMatrix, method: str = "closed_form") -> ComplexMatrix:
    """phi_X(Y) = int_0^1 e^{-sX} Y e^{sX} ds.

    ``closed_form`` diagonalises X (Jacobi for anti-Hermitian X = iD,
    a general eigensolver otherwise); ``quadrature`` uses 4 panels of
    16-point Gauss-Legendre.
    """
    x = as_matrix(x)
    y = as_matrix(y)
    if method == "quadrature":
        s, w = _composite_nodes(4)
        return np.tensordot(w, _conjugation_path(x, y, s), axes=1)
    if method != "closed_form":
        raise ValidationError(f"unknown phi method {method!r}")
    if _is_anti_hermitian(x):
        lam, v = jacobi_eigh(-1j * x)
        mu = 1j * lam
        vinv = dagger(v)
    else:
        mu, v = np.linalg.eig(x)
        vinv = np.linalg.inv(v)
    gamma = _phi1(mu[None, :] - mu[:, None])
    return v @ (gamma * (vinv @ y @ v)) @ vinv


def psi_op(x: ComplexMatrix, y: ComplexMatrix) -> ComplexMatrix:
    """psi_X(Y) = int_0^1 int_0^s e^{-sX} Y e^{(s-r)X} Y e^{rX} dr ds.

    The integrand factors as A(s) A(r) with A(t) = e^{-tX} Y e^{tX};
    outer rule 64 nodes, inner rule 32 nodes on [0, s].
    """
    x = as_matrix(x)
    y = as_matrix(y)
    s, ws = _composite_nodes(4)
    xi, wi = _GL32
    a_outer = _conjugation_path(x, y, s)
    total = np.zeros_like(y)
    for sk, wk, ak in zip(s, ws, a_outer):
        r = 0.5 * sk * (xi + 1.0)
        wr = 0.5 * sk * wi
        inner = np.tensordot(wr, _conjugation_path(x, y, r), axes=1)
        total = total + wk * (ak @ inner)
    return total


def _phi_gamma_hermitian(d: ComplexMatrix):
    lam, v = jacobi_eigh(d)
    gamma = _phi1(1j * (lam[None, :] - lam[:, None]))
    return lam, v, gamma


def check_resonance(lam: np.ndarray, gamma: np.ndarray, tol: float = RESONANCE_TOL) -> None:
    k_dim = len(lam)
    for k in range(k_dim):
        for l in range(k_dim):
            if k == l:
                continue
            diff = lam[l] - lam[k]
            m = np.rint(diff / (2 * np.pi))
            if (m != 0 and abs(diff - 2 * np.pi * m) <= tol) or abs(gamma[k, l]) <= tol:
                raise ResonanceError(k, l, float(lam[k]), float(lam[l]))


def phi_inv(d: ComplexMatrix, y: ComplexMatrix) -> ComplexMatrix:
    """Solve phi_{iD}(Z) = Y for Hermitian D (Hadamard division in the eigenbasis)."""
    d = as_matrix(d)
    y = as_matrix(y)
    if frobenius(d - dagger(d)) > 1e-10:
        raise ValidationError("phi_inv needs a Hermitian D")
    lam, v, gamma = _phi_gamma_hermitian(d)
    check_resonance(lam, gamma)
    return v @ ((dagger(v) @ y @ v) / gamma) @ dagger(v)


# ------------------------------------------------------------ expansions


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    xs: tuple
    ys: tuple
    residual: float

    @property
    def order(self) -> float:
        return self.slope


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> SlopeFit:
    """Ordinary least squares slope of log(y) against log(x)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    mask = (ys > 0) & np.isfinite(ys)
    if np.count_nonzero(mask) < 2:
        return SlopeFit(float("nan"), float("nan"), tuple(xs), tuple(ys), float("nan"))
    lx = np.log(xs[mask])
    ly = np.log(ys[mask])
    coef = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean((np.polyval(coef, lx) - ly) ** 2)))
    return SlopeFit(float(coef[0]), float(coef[1]), tuple(xs), tuple(ys), resid)


def expansion_residual(x, y, z, eps: float, phi_x_y=None, phi_x_z=None, psi_x_y=None) -> float:
    x, y, z = (as_matrix(m) for m in (x, y, z))
    method = "closed_form" if _is_anti_hermitian(x) else "quadrature"
    if phi_x_y is None:
        phi_x_y = phi_op(x, y, method)
    if phi_x_z is None:
        phi_x_z = phi_op(x, z, method)
    if psi_x_y is None:
        psi_x_y = psi_op(x, y)
    exact = matrix_exp(x + eps * y + eps * eps * z)
    eye = np.eye(x.shape[0], dtype=complex)
    approx = matrix_exp(x) @ (eye + eps * phi_x_y + eps * eps * (phi_x_z + psi_x_y))
    return float(frobenius(exact - approx))


def expansion_check(x, y, z, eps_list: Sequence[float]) -> SlopeFit:
    """Log-log slope of the second-order exponential expansion residual."""
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 4 or any(not 0 < e <= 0.5 for e in eps_list):
        raise ValidationError("eps_list needs at least 4 values in (0, 0.5]")
    x, y, z = (as_matrix(m) for m in (x, y, z))
    method = "closed_form" if _is_anti_hermitian(x) else "quadrature"
    pxy, pxz, sxy = phi_op(x, y, method), phi_op(x, z, method), psi_op(x, y)
    res = [expansion_residual(x, y, z, e, pxy, pxz, sxy) for e in eps_list]
    return loglog_slope(eps_list, res)


# ------------------------------------------------------------ Hamiltonian recovery


@dataclass(frozen=True)
class GeneratorTriple:
    D: ComplexMatrix
    E: ComplexMatrix
    F: ComplexMatrix
    hermiticity_defect: float = 0.0


def unitary_log_hermitian(u0: ComplexMatrix, tol: float = 1e-8) -> ComplexMatrix:
    """Hermitian D with e^{iD} = u0, angles in (-pi, pi].

    Eigenvalues of u0 that coincide (within ``tol``) share one angle, so
    the branch cut never splits a degenerate eigenspace.
    """
    u0 = as_matrix(u0)
    if frobenius(dagger(u0) @ u0 - np.eye(u0.shape[0])) > 1e-8:
        raise ValidationError("u0 is not unitary within 1e-8")
    t, z = scipy.linalg.schur(u0, output="complex")
    ev = np.diag(t)
    theta = np.angle(ev)
    for k in range(len(theta)):
        for l in range(k + 1, len(theta)):
            if abs(ev[k] - ev[l]) <= tol and abs(theta[k] - theta[l]) > np.pi:
                theta[l] = theta[k]
    return hermitian_part(z @ np.diag(theta) @ dagger(z))


def reconstruct_generator(u0, u1, u2, d: ComplexMatrix | None = None) -> GeneratorTriple:
    """Recover (D, E, F) from U(n) = u0 + u1/sqrt(n) + u2/n + ...

    Here U(n) = exp(i(nD + sqrt(n)E + F)/n).  With X = iD the second-order
    exponential expansion gives u1 = i u0 phi(E) and
    u2 = u0 (i phi(F) - psi(E)), which is inverted below.  ``d`` may be
    given explicitly instead of taking the principal logarithm of u0.
    """
    u0, u1, u2 = (as_matrix(m) for m in (u0, u1, u2))
    if d is None:
        d = unitary_log_hermitian(u0)
    else:
        d = as_matrix(d)
    x = 1j * d
    e_raw = -1j * phi_inv(d, dagger(u0) @ u1)
    e = hermitian_part(e_raw)
    f_raw = -1j * phi_inv(d, dagger(u0) @ u2 + psi_op(x, e))
    f = hermitian_part(f_raw)
    defect = float(max(frobenius(e_raw - e), frobenius(f_raw - f)))
    return GeneratorTriple(d, e, f, defect)


def extract_expansion(unitary_of_n: Callable[[int], ComplexMatrix], ns: Sequence[int] | None = None):
    """Richardson-style fit of U(n) = sum_k u_k n^{-k/2}.

    Fits a polynomial of degree len(ns) - 1 in h = n^{-1/2} through the
    samples (least squares) and returns (u0, u1, u2).  The default grid is
    seven geometric levels from 1e2 to 1e4.
    """
    if ns is None:
        ns = np.rint(np.geomspace(1e2, 1e4, 7)).astype(int)
    ns = np.unique(np.asarray(ns, dtype=int))
    if len(ns) < 3:
        raise ValidationError("need at least three levels")
    h = 1.0 / np.sqrt(ns.astype(float))
    samples = np.stack([as_matrix(unitary_of_n(int(n))) for n in ns])
    deg = len(ns) - 1
    vander = np.vander(h, deg + 1, increasing=True)
    flat = samples.reshape(len(ns), -1)
    coef, *_ = np.linalg.lstsq(vander, flat, rcond=None)
    dim = samples.shape[-1]
    u = coef.reshape(deg + 1, dim, dim)
    return u[0], u[1], u[2]


def generator_unitary(d, e, f, n: float) -> ComplexMatrix:
    return matrix_exp(1j * (n * d + np.sqrt(n) * e + f) / n)


# ------------------------------------------------------------ unitaries


@dataclass(frozen=True)
class BlockUnitary:
    """Unitary on system (x) environment with system blocks U_ij."""

    matrix: ComplexMatrix
    sys_dim: int
    env_dim: int
    n: int
    info: dict = field(default_factory=dict, compare=False)

    def block(self, i: int, j: int) -> ComplexMatrix:
        r = self.matrix.reshape(self.sys_dim, self.env_dim, self.sys_dim, self.env_dim)
        return r[:, i, :, j].copy()

    @property
    def blocks(self) -> dict:
        return {(i, j): self.block(i, j) for i in range(self.env_dim) for j in range(self.env_dim)}

    def unitarity_defect(self) -> float:
        m = self.matrix
        return float(frobenius(dagger(m) @ m - np.eye(m.shape[0])))

    def reassemble(self) -> ComplexMatrix:
        out = np.zeros_like(self.matrix)
        for (i, j), b in self.blocks.items():
            out = out + np.kron(b, matrix_unit(self.env_dim, i, j))
        return out


def effective_jump(c: ComplexMatrix, convention: str = "standard") -> ComplexMatrix:
    """The jump operator as it enters the standard-form generator.

    ``adjoint`` places the dagger on the other side everywhere, which is the
    same as using C^dagger in standard form.
    """
    c = as_matrix(c)
    if convention == "standard":
        return c
    if convention == "adjoint":
        return dagger(c)
    raise ValidationError(f"unknown convention {convention!r}")


def build_dilation_unitary(h0, c, n: int, convention: str = "standard") -> BlockUnitary:
    """exp(-(i/n) H0 (x) I + n^{-1/2}(C (x) e1 e0^dag - C^dag (x) e0 e1^dag)) on C^2 (x) C^2."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    h0 = as_matrix(h0)
    jump = effective_jump(c, convention)
    env = 2
    gen = -(1j / n) * np.kron(h0, np.eye(env)) + (1.0 / np.sqrt(n)) * (
        np.kron(jump, matrix_unit(env, 1, 0)) - np.kron(dagger(jump), matrix_unit(env, 0, 1))
    )
    u = matrix_exp(gen)
    return BlockUnitary(u, h0.shape[0], env, int(n), {"convention": convention})


def noise_channel(rho, kraus: Sequence[ComplexMatrix], eps: float) -> np.ndarray:
    """(1 - eps) rho + eps sum_i K_i rho K_i^dag; works on stacks."""
    rho = np.asarray(rho, dtype=complex)
    out = (1.0 - eps) * rho
    for k in kraus:
        k = np.asarray(k, dtype=complex)
        out = out + eps * (k @ rho @ dagger(k))
    return out


def noise_generator_tp(rho, kraus: Sequence[ComplexMatrix], eps: float) -> np.ndarray:
    """eps (sum_i K_i rho K_i^dag - {sum_i K_i^dag K_i, rho}/2).

    The trace-preserving generator of the reduced dynamics of the
    unitarised noise dilation.  Equals (1 - eps) id + ... minus id when the
    Kraus set is complete.
    """
    rho = np.asarray(rho, dtype=complex)
    gain = np.zeros_like(rho)
    s = np.zeros((rho.shape[-1],) * 2, dtype=complex)
    for k in kraus:
        k = np.asarray(k, dtype=complex)
        gain = gain + k @ rho @ dagger(k)
        s = s + dagger(k) @ k
    return eps * (gain - 0.5 * (s @ rho + rho @ s))


def build_noise_unitary(kraus: Sequence[ComplexMatrix], eps: float, n: int) -> BlockUnitary:
    """Unitary on C^2 (x) C^4 whose first block column follows the noisy expansion.

    The prescribed column is ((1 + (1-eps)/(2n)) I, sqrt(eps/n) K_1..K_3).
    It is an isometry only up to O(1/n), so the completed matrix is the
    polar factor of [column | orthonormal complement]; that polar factor
    keeps the complement and replaces the column by column G^{-1/2} with
    G = column^dag column.  The check below verifies exactly that, and the
    raw O(1/n) distance to the prescribed column is kept in ``info``.
    """
    if len(kraus) != 3:
        raise ValidationError("noise unitary needs exactly three Kraus entries (zeros allowed)")
    if not 0.0 <= eps <= 1.0:
        raise ValidationError("eps must lie in [0, 1]")
    if n < 4:
        raise ValidationError("n must be >= 4 for the noise construction")
    ds, de = 2, 4
    blocks = [(1.0 + (1.0 - eps) / (2.0 * n)) * np.eye(ds, dtype=complex)]
    blocks += [np.sqrt(eps / n) * as_matrix(k) for k in kraus]
    col = np.zeros((ds * de, ds), dtype=complex)
    for a, b in enumerate(blocks):
        col[a::de, :] = b  # row index s*de + a
    gram = dagger(col) @ col
    if np.sqrt(np.max(np.linalg.eigvalsh(gram))) > 1.0 + 1.0 / n + 1e-12:
        raise ValidationError("prescribed column norm exceeds 1 + 1/n; increase n")
    q, _ = np.linalg.qr(np.hstack([col, np.eye(ds * de, dtype=complex)]))
    complement = q[:, ds : ds * de]
    cand = np.zeros((ds * de, ds * de), dtype=complex)
    env0 = [s * de for s in range(ds)]
    rest = [c for c in range(ds * de) if c not in env0]
    cand[:, env0] = col
    cand[:, rest] = complement
    u = nearest_unitary(cand)
    w, v = np.linalg.eigh(gram)
    target = col @ (v @ np.diag(w**-0.5) @ dagger(v))
    residual = float(frobenius(u[:, env0] - target))
    if residual > 5.0 / n**1.5:
        raise ConstructionError(f"first block column residual {residual:.3e} exceeds 5/n^1.5")
    raw = float(frobenius(u[:, env0] - col))
    return BlockUnitary(
        u, ds, de, int(n), {"eps": eps, "column_residual": residual, "raw_column_deviation": raw}
    )


# ------------------------------------------------------------ constants


@dataclass(frozen=True)
class DerivedConstants:
    gamma: complex | None = None
    alpha: float | None = None
    gamma_ai: np.ndarray | None = None
    beta_i: np.ndarray | None = None
    b_ij: np.ndarray | None = None
    B: np.ndarray | None = None
    B_sqrt: np.ndarray | None = None
    p00: tuple = ()

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            a = np.asarray(v)
            if np.iscomplexobj(a):
                return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}
            return a.tolist()

        return {
            "gamma": enc(self.gamma),
            "alpha": self.alpha,
            "gamma_ai": enc(self.gamma_ai),
            "beta_i": enc(self.beta_i),
            "b_ij": enc(self.b_ij),
            "B": enc(self.B),
            "B_sqrt": enc(self.B_sqrt),
            "p00": list(self.p00),
        }


def derive_constants(a: Observable, model: str = "single", check: bool = True) -> DerivedConstants:
    """Constants of the increment expansion for a measured observable.

    Outcome 0 is the largest eigenvalue of ``a``; entries are read in the
    environment basis with the environment prepared in e_0.
    """
    projs = a.outcome_projectors
    if model == "single":
        if a.dim != 2 or len(projs) != 2:
            raise AssumptionError("single model needs a 2x2 observable with two distinct eigenvalues")
        p, q = projs
        p00 = float(np.real(p[0, 0]))
        if abs(p00 * (1.0 - p00)) <= 1e-10:
            if check:
                raise AssumptionError(
                    f"observable is diagonal in the environment basis (p00 = {p00:.3g})"
                )
            return DerivedConstants(gamma=0.0, alpha=0.0, p00=(p00,))
        alpha = float(np.sqrt(np.real(q[0, 0]) / p00))
        gamma = complex(q[0, 1] / alpha - alpha * p[0, 1])
        return DerivedConstants(gamma=gamma, alpha=alpha, p00=(p00,))
    if model == "noise":
        if a.dim != 4 or len(projs) != 4:
            raise AssumptionError("noise model needs a 4x4 observable with four distinct eigenvalues")
        p00 = np.array([float(np.real(pr[0, 0])) for pr in projs])
        bad = [i for i in range(4) if abs(p00[i] * (1 - p00[i])) <= 1e-10]
        if bad and check:
            raise AssumptionError(f"p00^(i)(1 - p00^(i)) vanishes for outcomes {bad}")
        ref = projs[0][0, 1:4] / p00[0]
        gamma_ai = np.array([projs[i][0, 1:4] / p00[i] - ref for i in range(1, 4)])
        beta = np.sqrt(p00[1:] * (1.0 - p00[1:]))
        r = np.sqrt(p00[1:] / (1.0 - p00[1:]))
        b = np.outer(r, r)
        big_b = np.eye(3) - (b - np.diag(np.diag(b)))
        if np.linalg.eigvalsh(big_b)[0] < -1e-10:
            raise CovarianceError("covariance B is not positive semi-definite")
        return DerivedConstants(
            gamma_ai=gamma_ai,
            beta_i=beta,
            b_ij=b,
            B=big_b,
            B_sqrt=psd_sqrt(big_b),
            p00=tuple(p00.tolist()),
        )
    raise ValidationError(f"unknown model {model!r}")
