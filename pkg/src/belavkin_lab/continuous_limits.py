"""Limiting equations: Lindblad-type ODEs, diffusive SDEs, Volterra equations.

All maps accept stacked states ``(..., 2, 2)`` so that the Euler-Maruyama
integrator can advance an ensemble in one pass.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .asymptotic_calculus import DerivedConstants, effective_jump, noise_channel, noise_generator_tp
from .discrete_models import (
    DOMAIN_BROWNIAN,
    RngStream,
    _fmt,
    format_header,
    state_columns,
    swap_channel_superops,
)
from .errors import CovarianceError, DivergenceError, ValidationError
from .linalg_core import (
    ComplexMatrix,
    EnvironmentState,
    as_matrix,
    dagger,
    frobenius,
    hermitian_part,
    matrix_exp,
    partial_trace_env,
    psd_repair,
    psd_sqrt,
)

DIVERGENCE_LIMIT = 1e6

# ------------------------------------------------------------ generators


def lindblad_apply(rho, h0, c, convention: str = "standard"):
    """-i[H0, rho] - {J^dag J, rho}/2 + J rho J^dag with J the effective jump."""
    rho = np.asarray(rho, dtype=complex)
    h0 = as_matrix(h0)
    j = effective_jump(c, convention)
    jd = dagger(j)
    jj = jd @ j
    return -1j * (h0 @ rho - rho @ h0) - 0.5 * (jj @ rho + rho @ jj) + j @ rho @ jd


def theta_apply(rho, c):
    """C rho + rho C^dag - Tr[rho (C + C^dag)] rho."""
    rho = np.asarray(rho, dtype=complex)
    c = as_matrix(c)
    s = c + dagger(c)
    tr = np.einsum("...ij,ji->...", rho, s)
    return c @ rho + rho @ dagger(c) - tr[..., None, None] * rho


def eps_map(t: float, rho, h, env: EnvironmentState | None = None):
    """E_0[e^{-itH} (rho (x) beta) e^{itH}] for H on C^2 (x) C^d."""
    env = env or EnvironmentState(2)
    h = as_matrix(h)
    u = matrix_exp(-1j * t * h)
    big = np.kron(as_matrix(rho), env.matrix)
    return partial_trace_env(u @ big @ dagger(u), 2, env.dim)


# ------------------------------------------------------------ ODEs


@dataclass(frozen=True)
class OdePath:
    times: np.ndarray
    states: np.ndarray
    kind: str

    def at(self, t: float) -> ComplexMatrix:
        idx = int(round(t / (self.times[1] - self.times[0])))
        return self.states[idx]


def _rk4(f, y0, dt, steps):
    ys = np.zeros((steps + 1,) + y0.shape, dtype=complex)
    ys[0] = y0
    y = y0
    for k in range(steps):
        t = k * dt
        k1 = f(t, y)
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys[k + 1] = y
    return ys


def ode_rhs(kind: str, params: dict) -> Callable:
    conv = params.get("convention", "standard")
    if kind == "master":
        h0, c = params["h0"], params["c"]
        return lambda t, r: lindblad_apply(r, h0, c, conv)
    if kind == "averaged":
        h0, cp, cm = params["h0"], params["c_plus"], params["c_minus"]
        return lambda t, r: 0.5 * (lindblad_apply(r, h0, cp, conv) + lindblad_apply(r, h0, cm, conv))
    if kind == "channel":
        kr, eps = params["kraus"], params["eps"]
        return lambda t, r: noise_channel(r, kr, eps)
    if kind == "channel_tp":
        kr, eps = params["kraus"], params["eps"]
        return lambda t, r: noise_generator_tp(r, kr, eps)
    if kind == "reset_mean":
        h0, c, g = params["h0"], params["c"], params["gamma_mem"]
        rho0 = as_matrix(params["rho0"])
        return lambda t, r: lindblad_apply(r, h0, c, conv) + g * (rho0 - r)
    raise ValidationError(f"unknown ODE kind {kind!r}")


def solve_ode(kind: str, params: dict, rho0, dt: float, T: float = 1.0) -> OdePath:
    """Integrate a limiting ODE on the uniform grid k*dt.

    Local kinds (``master``, ``averaged``, ``channel``, ``channel_tp``,
    ``reset_mean``) use classical RK4.  ``volterra_det`` solves
    phi_t = Gamma int_0^t e^{-Gamma(t-s)} E_{t-s}[phi_s] ds + e^{-Gamma t} E_t[rho_0]
    with the trapezoidal rule on the convolution.
    """
    if dt > 1e-2:
        raise ValidationError("dt must be <= 1e-2")
    steps = int(round(T / dt))
    rho0 = as_matrix(rho0)
    times = np.arange(steps + 1) * dt
    if kind == "volterra_det":
        states = _volterra_det(params["hamiltonian"], float(params["gamma_mem"]), rho0, dt, steps)
        return OdePath(times, states, kind)
    return OdePath(times, _rk4(ode_rhs(kind, params), rho0, dt, steps), kind)


def _volterra_det(h, gamma, rho0, dt, steps):
    # E_{m dt} as superoperators; swap_channel_superops uses U = e^{-iH/n}
    # with n = 1/dt, so entry m is E_{m dt}.
    sup = swap_channel_superops(h, 1.0 / dt, steps)
    v0 = rho0.reshape(4)
    v = np.zeros((steps + 1, 4), dtype=complex)
    v[0] = v0
    decay = np.exp(-gamma * dt * np.arange(steps + 1))
    for k in range(1, steps + 1):
        rhs = decay[k] * (sup[k] @ v0)
        conv = 0.5 * decay[k] * (sup[k] @ v[0])
        if k > 1:
            j = np.arange(1, k)
            conv = conv + np.einsum("j,jab,jb->a", decay[k - j], sup[k - j], v[j])
        rhs = rhs + gamma * dt * conv
        # the endpoint term is (Gamma dt / 2) phi_k since E_0 is the identity
        v[k] = rhs / (1.0 - 0.5 * gamma * dt)
    return v.reshape(steps + 1, 2, 2)


# ------------------------------------------------------------ SDE specs


Map = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SdeSpec:
    """dX = drift(X, t) dt + diffusion_scale * sum_i diffusions[i](X, t) (B~ dW)_i.

    ``x0_path`` (optional) makes the scheme integrate X_t - x0(t) instead of
    X_t - X_0, i.e. the solution reads X_t = x0(t) + int drift + int diffusion.
    ``norm_guard`` raises a divergence error when any state exceeds it.
    """

    dim: int
    drift: Map
    diffusions: tuple
    covariance: np.ndarray
    cov_sqrt: np.ndarray
    drift_scale: float = 1.0
    diffusion_scale: float = 1.0
    label: str = ""
    time_dependent: bool = False
    x0_path: Callable[[float, np.ndarray], np.ndarray] | None = None
    norm_guard: float = DIVERGENCE_LIMIT
    output_map: Callable[[np.ndarray, float], np.ndarray] | None = None
    # optional vectorised form: drift(v) = S v, diffusion_i(v) = K_i v - s(t) (c_i . v) v
    vec_drift: np.ndarray | None = field(default=None, repr=False)
    vec_diffusions: tuple | None = field(default=None, repr=False)
    trace_scale: Callable[[float], float] | None = None

    @property
    def m(self) -> int:
        return len(self.diffusions)


_BASIS = np.eye(4, dtype=complex).reshape(4, 2, 2)


def superop_of(linear_map: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """4x4 matrix of a linear map on 2x2 matrices in row-major vec form."""
    return np.asarray(linear_map(_BASIS), dtype=complex).reshape(4, 4).T


def theta_vec_form(c) -> tuple:
    """(K, w) with vec(Theta_C(rho)) = K v - (w . v) v."""
    c = as_matrix(c)
    k = superop_of(lambda r: c @ r + r @ dagger(c))
    w = (c + dagger(c)).T.reshape(4)
    return k, w


def _covariance(b) -> tuple:
    b = np.asarray(b, dtype=float)
    if np.linalg.eigvalsh(b)[0] < -1e-10:
        raise CovarianceError("covariance is not PSD")
    root = np.real(psd_sqrt(b))
    if np.max(np.abs(root @ root - b)) > 1e-10:
        raise CovarianceError("covariance square root inaccurate")
    return b, root


def build_sde_spec(kind: str, params: dict) -> SdeSpec:
    """Assemble the limiting SDE of a discrete model kind.

    belavkin:      h0, c, [gamma], [convention]
    alternating:   h0, c_plus, c_minus, [gamma], [convention]
    noise:         kraus, eps, constants, [drift_form: "raw" | "unitarized"]
    volterra_lift: h0, c, gamma_mem, [gamma], [convention]
    """
    conv = params.get("convention", "standard")
    gamma = complex(params.get("gamma", 1.0))
    if kind == "belavkin":
        h0 = as_matrix(params["h0"])
        c = params["c"]
        jump = gamma * effective_jump(c, conv)
        b, root = _covariance(np.eye(1))
        return SdeSpec(
            2,
            lambda r, t: lindblad_apply(r, h0, c, conv),
            (lambda r, t: theta_apply(r, jump),),
            b,
            root,
            label="belavkin",
            vec_drift=superop_of(lambda r: lindblad_apply(r, h0, c, conv)),
            vec_diffusions=(theta_vec_form(jump),),
        )
    if kind == "alternating":
        h0 = as_matrix(params["h0"])
        cp, cm = params["c_plus"], params["c_minus"]
        jp = gamma * effective_jump(cp, conv)
        jm = gamma * effective_jump(cm, conv)
        b, root = _covariance(np.eye(2))
        return SdeSpec(
            2,
            lambda r, t: 0.5 * (lindblad_apply(r, h0, cp, conv) + lindblad_apply(r, h0, cm, conv)),
            (lambda r, t: theta_apply(r, jp), lambda r, t: theta_apply(r, jm)),
            b,
            root,
            diffusion_scale=1.0 / np.sqrt(2.0),
            label="alternating",
            vec_drift=superop_of(
                lambda r: 0.5 * (lindblad_apply(r, h0, cp, conv) + lindblad_apply(r, h0, cm, conv))
            ),
            vec_diffusions=(theta_vec_form(jp), theta_vec_form(jm)),
        )
    if kind == "noise":
        kraus = [as_matrix(k) for k in params["kraus"]]
        eps = float(params["eps"])
        const: DerivedConstants = params["constants"]
        form = params.get("drift_form", "raw")
        if const.B is None:
            raise ValidationError("noise SDE needs noise-model constants")
        b, root = _covariance(const.B)
        # sum_a Theta_{g_a K_a} = Theta_{sum_a g_a K_a} since Theta is real-linear in C
        gens = [
            const.beta_i[i] * sum(const.gamma_ai[i, a] * kraus[a] for a in range(3)) for i in range(3)
        ]
        if form == "raw":
            drift = lambda r, t: noise_channel(r, kraus, eps)
        elif form == "unitarized":
            drift = lambda r, t: noise_generator_tp(r, kraus, eps)
        else:
            raise ValidationError(f"unknown drift_form {form!r}")
        return SdeSpec(
            2,
            drift,
            tuple((lambda r, t, g=g: theta_apply(r, g)) for g in gens),
            b,
            root,
            diffusion_scale=float(np.sqrt(eps)),
            label=f"noise[{form}]",
            norm_guard=10.0,
            vec_drift=superop_of(lambda r: drift(r, 0.0)),
            vec_diffusions=tuple(theta_vec_form(g) for g in gens),
        )
    if kind == "volterra_lift":
        h0 = as_matrix(params["h0"])
        c = params["c"]
        g = float(params["gamma_mem"])
        jump = gamma * effective_jump(c, conv)
        b, root = _covariance(np.eye(1))

        def diffusion(x, t):
            return np.exp(g * t) * theta_apply(np.exp(-g * t) * x, jump)

        return SdeSpec(
            2,
            lambda x, t: lindblad_apply(x, h0, c, conv),
            (diffusion,),
            b,
            root,
            label="volterra_lift",
            time_dependent=True,
            x0_path=lambda t, rho0: np.exp(g * t) * rho0,
            output_map=lambda x, t: np.exp(-g * t) * x,
            vec_drift=superop_of(lambda x: lindblad_apply(x, h0, c, conv)),
            vec_diffusions=(theta_vec_form(jump),),
            trace_scale=lambda t: np.exp(-g * t),
        )
    raise ValidationError(f"unknown SDE kind {kind!r}")


# ------------------------------------------------------------ Euler-Maruyama


@dataclass
class SdePath:
    grid: np.ndarray
    states: np.ndarray
    noise_increments: np.ndarray
    seed: int
    scheme: str
    metadata: dict = field(default_factory=dict)

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(format_header(header or {}))
        buf.write(",".join(["k", "t", "scheme"] + state_columns()) + "\n")
        for k, (t, rho) in enumerate(zip(self.grid, self.states)):
            cols = [_fmt(c) for z in rho.reshape(-1) for c in (z.real, z.imag)]
            buf.write(",".join([str(k), _fmt(t), self.scheme] + cols) + "\n")
        return buf.getvalue()

    def to_json(self, header: dict | None = None) -> dict:
        return {
            **(header or {}),
            "scheme": self.scheme,
            "seed": self.seed,
            "times": self.grid.tolist(),
            "states_re": np.real(self.states).tolist(),
            "states_im": np.imag(self.states).tolist(),
            "metadata": self.metadata,
        }


def brownian_increments(seed: int, streams: Sequence[int], steps: int, m: int, dt: float, start: int = 0,
                        gens: list | None = None) -> np.ndarray:
    """Increments (steps, B, m) of variance dt, one Philox stream per path."""
    gens = gens or [RngStream(seed, s, DOMAIN_BROWNIAN) for s in streams]
    return np.sqrt(dt) * np.stack([g.normals((steps, m)) for g in gens], axis=1)


def _correlate(root: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """(B~ dW)_i elementwise so each path's arithmetic is batch-independent."""
    m = root.shape[0]
    out = np.zeros_like(dw)
    for i in range(m):
        acc = root[i, 0] * dw[..., 0]
        for j in range(1, m):
            acc = acc + root[i, j] * dw[..., j]
        out[..., i] = acc
    return out


def em_integrate_batch(
    spec: SdeSpec,
    rho0,
    dt: float,
    T: float,
    seed: int,
    streams: Sequence[int],
    record_steps: Sequence[int] | None = None,
    noise_path: np.ndarray | None = None,
    renormalize: bool = False,
    repair: bool = False,
    block: int = 500,
    vectorised: bool = True,
):
    """Euler-Maruyama for an ensemble; returns (record_steps, states (R, B, d, d)).

    ``noise_path`` (shape (steps, B, m), raw dW before the B~ mixing)
    overrides the generated increments.  States are returned through
    ``spec.output_map`` when the spec defines one.  Specs carrying a
    vectorised form take a fast path on (B, 4) vec-states unless
    ``vectorised`` is False or repair/renormalisation is requested.
    """
    if dt > 1e-2:
        raise ValidationError("dt must be <= 1e-2")
    steps = int(round(T / dt))
    streams = list(streams)
    b = len(streams)
    rho0 = as_matrix(rho0)
    m = spec.m
    if noise_path is not None:
        noise_path = np.asarray(noise_path, dtype=float)
        if noise_path.shape != (steps, b, m):
            raise ValidationError(f"noise_path shape {noise_path.shape} != {(steps, b, m)}")
    rec_steps = np.arange(steps + 1) if record_steps is None else np.asarray(sorted(set(record_steps)), dtype=int)
    where = {int(s): i for i, s in enumerate(rec_steps)}
    rec = np.zeros((len(rec_steps), b, spec.dim, spec.dim), dtype=complex)

    def out(x, t):
        return spec.output_map(x, t) if spec.output_map is not None else x

    fast = vectorised and spec.vec_drift is not None and not (renormalize or repair)
    if fast:
        return rec_steps, _em_vec(spec, rho0, dt, steps, seed, streams, rec_steps, where, rec, noise_path, block, out)
    x = np.repeat(rho0[None], b, axis=0)
    y = np.zeros_like(x)  # accumulated increments: X = x0(t) + Y
    if 0 in where:
        rec[where[0]] = out(x, 0.0)
    gens = None if noise_path is not None else [RngStream(seed, s, DOMAIN_BROWNIAN) for s in streams]
    min_eig = np.inf
    for start in range(0, steps, block):
        stop = min(steps, start + block)
        if noise_path is not None:
            dw = noise_path[start:stop]
        else:
            dw = brownian_increments(seed, streams, stop - start, m, dt, gens=gens)
        mixed = _correlate(spec.cov_sqrt, dw)
        for k in range(start, stop):
            t = k * dt
            inc = spec.drift_scale * spec.drift(x, t) * dt
            for i, sigma in enumerate(spec.diffusions):
                inc = inc + spec.diffusion_scale * sigma(x, t) * mixed[k - start, :, i][:, None, None]
            y = y + inc
            t1 = (k + 1) * dt
            base = spec.x0_path(t1, rho0) if spec.x0_path is not None else rho0
            x = hermitian_part(base[None] + y)
            if renormalize:
                tr = np.real(np.trace(x, axis1=-2, axis2=-1))
                x = x / tr[:, None, None]
                y = x - base[None]
            if repair:
                x = np.array([psd_repair(s) for s in x])
                y = x - base[None]
            norms = frobenius(x)
            worst = float(np.max(norms))
            if not np.isfinite(worst) or worst > spec.norm_guard:
                raise DivergenceError(k + 1, worst, spec.norm_guard)
            if k + 1 in where:
                rec[where[k + 1]] = out(x, t1)
    return rec_steps, rec


def _lin(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(B, 4) rows of s @ v_b, summed elementwise so rows never interact."""
    out = v[:, 0, None] * s[None, :, 0]
    for j in range(1, 4):
        out = out + v[:, j, None] * s[None, :, j]
    return out


def _dot(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    acc = w[0] * v[:, 0]
    for j in range(1, 4):
        acc = acc + w[j] * v[:, j]
    return acc


def _em_vec(spec, rho0, dt, steps, seed, streams, rec_steps, where, rec, noise_path, block, out):
    b = len(streams)
    m = spec.m
    perm = [0, 2, 1, 3]
    v0 = rho0.reshape(4)
    x = np.repeat(v0[None], b, axis=0)
    y = np.zeros_like(x)
    gens = None if noise_path is not None else [RngStream(seed, s, DOMAIN_BROWNIAN) for s in streams]
    drift_s = spec.drift_scale * spec.vec_drift * dt
    for start in range(0, steps, block):
        stop = min(steps, start + block)
        if noise_path is not None:
            dw = noise_path[start:stop]
        else:
            dw = brownian_increments(seed, streams, stop - start, m, dt, gens=gens)
        mixed = spec.diffusion_scale * _correlate(spec.cov_sqrt, dw)
        for k in range(start, stop):
            t = k * dt
            ts = 1.0 if spec.trace_scale is None else spec.trace_scale(t)
            inc = _lin(drift_s, x)
            for i, (kmat, w) in enumerate(spec.vec_diffusions):
                sig = _lin(kmat, x) - (ts * _dot(w, x))[:, None] * x
                inc = inc + sig * mixed[k - start, :, i][:, None]
            y = y + inc
            t1 = (k + 1) * dt
            base = spec.x0_path(t1, rho0).reshape(4) if spec.x0_path is not None else v0
            x = base[None] + y
            x = 0.5 * (x + np.conj(x[:, perm]))
            worst = float(np.sqrt(np.max(np.sum(np.abs(x) ** 2, axis=1))))
            if not np.isfinite(worst) or worst > spec.norm_guard:
                raise DivergenceError(k + 1, worst, spec.norm_guard)
            if k + 1 in where:
                rec[where[k + 1]] = out(x.reshape(b, 2, 2), t1)
    if 0 in where:
        rec[where[0]] = out(np.repeat(rho0[None], b, axis=0), 0.0)
    return rec


def em_integrate(
    spec: SdeSpec,
    rho0,
    dt: float,
    T: float,
    seed: int,
    noise_path: np.ndarray | None = None,
    stream_index: int = 0,
    renormalize: bool = False,
    repair: bool = False,
) -> SdePath:
    """Single Euler-Maruyama path; ``noise_path`` has shape (m, steps)."""
    steps = int(round(T / dt))
    if noise_path is None:
        dw = brownian_increments(seed, [stream_index], steps, spec.m, dt)
    else:
        noise_path = np.asarray(noise_path, dtype=float)
        if noise_path.shape != (spec.m, steps):
            raise ValidationError(f"noise_path shape {noise_path.shape} != {(spec.m, steps)}")
        dw = noise_path.T[:, None, :]
    _, rec = em_integrate_batch(
        spec, rho0, dt, T, seed, [stream_index], noise_path=dw, renormalize=renormalize, repair=repair
    )
    states = rec[:, 0]
    mins = np.linalg.eigvalsh(hermitian_part(states))[:, 0]
    meta = {
        "renormalize": renormalize,
        "psd_repair": repair,
        "min_eigenvalue": float(np.min(mins)),
        "max_trace_error": float(np.max(np.abs(np.trace(states, axis1=1, axis2=2) - 1.0))),
    }
    return SdePath(np.arange(steps + 1) * dt, states, dw[:, 0, :].T.copy(), seed, spec.label, meta)


# ------------------------------------------------------------ Volterra


@dataclass(frozen=True)
class VolterraKernelPair:
    """Drift and diffusion kernels K_b, K_sigma on [0, 1]."""

    k_b: Callable[[np.ndarray], np.ndarray]
    k_sigma: Callable[[np.ndarray], np.ndarray]
    gamma: float = 0.0
    label: str = ""

    @staticmethod
    def exponential(gamma: float) -> "VolterraKernelPair":
        f = lambda u: np.exp(-gamma * np.asarray(u, dtype=float))
        return VolterraKernelPair(f, f, gamma, "exponential")

    @staticmethod
    def constant() -> "VolterraKernelPair":
        f = lambda u: np.ones_like(np.asarray(u, dtype=float))
        return VolterraKernelPair(f, f, 0.0, "constant")

    @staticmethod
    def tabulated(grid, kb_values, ks_values) -> "VolterraKernelPair":
        grid = np.asarray(grid, dtype=float)
        kb = np.asarray(kb_values, dtype=float)
        ks = np.asarray(ks_values, dtype=float)
        for name, vals in (("K_b", kb), ("K_sigma", ks)):
            if not np.all(np.isfinite(vals)) or not np.isfinite(np.trapezoid(vals**2, grid)):
                raise ValidationError(f"{name} is not square-integrable on the grid")
        return VolterraKernelPair(
            lambda u: np.interp(u, grid, kb), lambda u: np.interp(u, grid, ks), 0.0, "tabulated"
        )


def volterra_direct(
    rho0,
    kernels: VolterraKernelPair,
    drift_map: Callable[[np.ndarray], np.ndarray],
    diffusion_map: Callable[[np.ndarray], np.ndarray],
    dt: float,
    T: float,
    seed: int,
    noise_path: np.ndarray | None = None,
    x0: Callable[[float], np.ndarray] | None = None,
    stream_index: int = 0,
) -> SdePath:
    """Left-point convolution scheme for a one-channel Volterra SDE.

    X_k = x0(t_k) + sum_{j<k} K_b(t_k - t_j) b(X_j) dt + sum_{j<k} K_sigma(t_k - t_j) sigma(X_j) dW_j.
    """
    if dt > 1e-2:
        raise ValidationError("dt must be <= 1e-2")
    steps = int(round(T / dt))
    rho0 = as_matrix(rho0)
    if noise_path is None:
        dw = brownian_increments(seed, [stream_index], steps, 1, dt)[:, 0, 0]
    else:
        dw = np.asarray(noise_path, dtype=float).reshape(-1)
        if dw.shape != (steps,):
            raise ValidationError("noise_path must hold one increment per step")
    x0 = x0 or (lambda t: rho0)
    grid = np.arange(steps + 1) * dt
    kb = kernels.k_b(grid)
    ks = kernels.k_sigma(grid)
    drift_hist = np.zeros((steps, 2, 2), dtype=complex)
    noise_hist = np.zeros((steps, 2, 2), dtype=complex)
    states = np.zeros((steps + 1, 2, 2), dtype=complex)
    states[0] = x0(0.0)
    for k in range(1, steps + 1):
        xj = states[k - 1]
        drift_hist[k - 1] = drift_map(xj) * dt
        noise_hist[k - 1] = diffusion_map(xj) * dw[k - 1]
        lag = k - np.arange(k)
        xk = (
            x0(grid[k])
            + np.tensordot(kb[lag], drift_hist[:k], axes=1)
            + np.tensordot(ks[lag], noise_hist[:k], axes=1)
        )
        xk = hermitian_part(xk)
        norm = float(frobenius(xk))
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise DivergenceError(k, norm, DIVERGENCE_LIMIT)
        states[k] = xk
    return SdePath(grid, states, dw[None, :].copy(), seed, "volterra_direct", {"kernel": kernels.label})
