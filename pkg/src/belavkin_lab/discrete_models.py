"""Repeated-measurement trajectory generators.

Each step couples the system to a fresh environment unit in e_0, applies
a unitary, measures an environment observable and keeps the normalised
conditional system state.  Kinds:

* ``single``        one dilation unitary U(n)
* ``alternating``   U^-(n) on odd steps, U^+(n) on even steps
* ``noise``         4-level environment, Kraus-perturbed unitary, 4 outcomes
* ``memory_reset``  single step followed by a convex reset towards rho_0
* ``memory_swap``   deterministic chain with geometric memory of past units

The conditional update is linear before normalisation, so each outcome is
precomputed as a 4x4 superoperator acting on row-major vec(rho) and whole
ensembles advance with elementwise array arithmetic.  Per-trajectory
results therefore do not depend on how trajectories are batched.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .asymptotic_calculus import (
    BlockUnitary,
    DerivedConstants,
    build_dilation_unitary,
    build_noise_unitary,
    derive_constants,
)
from .errors import DegeneracyError, ValidationError
from .linalg_core import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    ComplexMatrix,
    EnvironmentState,
    Observable,
    as_matrix,
    dagger,
    hermitian_spectral,
    matrix_exp,
    partial_trace_env,
    pure_state,
    validate_density,
)

DEGENERATE_TOL = 1e-14
KINDS = ("single", "alternating", "noise", "memory_reset", "memory_swap")
SCHEMA_VERSION = 1

_DFT4 = np.exp(2j * np.pi * np.outer(range(4), range(4)) / 4) / 2.0

OBSERVABLE_PRESETS = {
    "pauli_x": SIGMA_X,
    "pauli_z": SIGMA_Z,
    # outcome m <-> m-th Fourier vector (outcome 0 carries the top eigenvalue)
    "dft4": _DFT4 @ np.diag([3.0, 2.0, 1.0, 0.0]) @ dagger(_DFT4),
}

STATE_PRESETS = {
    "ket0": pure_state([1, 0]),
    "ket1": pure_state([0, 1]),
    "plus": pure_state([1, 1]),
    "mixed": np.eye(2, dtype=complex) / 2,
}

KRAUS_PRESETS = {
    "depolarizing": [SIGMA_X / np.sqrt(3), SIGMA_Y / np.sqrt(3), SIGMA_Z / np.sqrt(3)],
    "bit_flip": [SIGMA_X, np.zeros((2, 2)), np.zeros((2, 2))],
}

LOWERING = np.array([[0, 1], [0, 0]], dtype=complex)  # e0 e1^dag


# ------------------------------------------------------------ randomness


@dataclass
class RngStream:
    """Counter-based stream keyed by (seed, stream_index).

    Backed by Philox with the 128-bit key (seed, stream_index); ``domain``
    offsets the block counter so that different consumers (discrete
    sampling, Brownian increments) of one key never share draws.
    ``counter`` counts values handed out so far.
    """

    seed: int
    stream_index: int
    domain: int = 0
    counter: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array([self.seed % 2**64, self.stream_index % 2**64], dtype=np.uint64)
            counter = np.array([0, 0, 0, self.domain % 2**64], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return self._gen

    def uniforms(self, count: int) -> np.ndarray:
        self.counter += count
        return self.generator().random(count)

    def next_uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, shape) -> np.ndarray:
        out = self.generator().standard_normal(shape)
        self.counter += out.size
        return out


DOMAIN_DISCRETE = 0
DOMAIN_BROWNIAN = 1


# ------------------------------------------------------------ model


def _vec_superop(ops: Sequence[ComplexMatrix]) -> np.ndarray:
    """Matrix of rho -> sum_r A_r rho A_r^dag acting on row-major vec(rho)."""
    return sum(np.kron(a, np.conj(a)) for a in ops)


def _outcome_superops(u: BlockUnitary, obs: Observable) -> np.ndarray:
    """(n_outcomes, d^2, d^2) superoperators for the unnormalised candidates."""
    col = [u.block(a, 0) for a in range(u.env_dim)]
    out = []
    for vecs in obs.outcome_vectors:
        ops = []
        for r in range(vecs.shape[1]):
            f = vecs[:, r]
            ops.append(sum(np.conj(f[a]) * col[a] for a in range(u.env_dim)))
        out.append(_vec_superop(ops))
    return np.array(out)


def _encode(value):
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    a = np.asarray(value)
    if a.dtype.kind in "fc":
        return {"re": np.round(np.real(a), 15).tolist(), "im": np.round(np.imag(a), 15).tolist()}
    return a.tolist()


@dataclass(frozen=True)
class ModelConfig:
    """Inputs for :func:`build_model`; unused fields are ignored per kind."""

    kind: str
    n: int
    h0: ComplexMatrix | None = None
    c: ComplexMatrix | None = None
    c_plus: ComplexMatrix | None = None
    c_minus: ComplexMatrix | None = None
    kraus: tuple | None = None
    eps: float = 0.0
    gamma_mem: float = 0.0
    hamiltonian: ComplexMatrix | None = None
    observable: ComplexMatrix | None = None
    rho0: ComplexMatrix | None = None
    convention: str = "standard"
    allow_diagonal: bool = False

    def canonical(self) -> dict:
        return {
            "kind": self.kind,
            "n": int(self.n),
            "h0": _encode(self.h0),
            "c": _encode(self.c),
            "c_plus": _encode(self.c_plus),
            "c_minus": _encode(self.c_minus),
            "kraus": _encode(None if self.kraus is None else list(self.kraus)),
            "eps": float(self.eps),
            "gamma_mem": float(self.gamma_mem),
            "hamiltonian": _encode(self.hamiltonian),
            "observable": _encode(self.observable),
            "rho0": _encode(self.rho0),
            "convention": self.convention,
            "allow_diagonal": self.allow_diagonal,
        }

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_n(self, n: int) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, n=int(n))


@dataclass(frozen=True)
class DiscreteModel:
    kind: str
    n: int
    blocks: tuple
    observable: Observable | None
    env: EnvironmentState
    constants: DerivedConstants | None
    gamma_mem: float
    hamiltonian: ComplexMatrix | None
    initial: ComplexMatrix
    config: ModelConfig = field(repr=False)
    superops: np.ndarray = field(repr=False)

    @property
    def p_mem(self) -> float:
        return float(np.exp(-self.gamma_mem / self.n))

    @property
    def model_digest(self) -> str:
        return self.config.digest()

    @property
    def n_outcomes(self) -> int:
        return self.superops.shape[1]

    @property
    def x_dim(self) -> int:
        return 3 if self.kind == "noise" else 1

    def unitary_index(self, k: int) -> int:
        """Index into ``blocks`` of the unitary producing rho_{k+1}.

        Alternating models store (U^+, U^-); step k+1 odd uses U^-.
        """
        if self.kind == "alternating":
            return 1 if k % 2 == 0 else 0
        return 0


def build_model(config: ModelConfig) -> DiscreteModel:
    kind = config.kind
    if kind not in KINDS:
        raise ValidationError(f"unknown model kind {kind!r}")
    n = int(config.n)
    if n < 1:
        raise ValidationError("n must be positive")
    if config.rho0 is None:
        raise ValidationError("rho0 is required")
    rho0 = as_matrix(config.rho0, "rho0")
    if rho0.shape != (2, 2):
        raise ValidationError("rho0 must be 2x2")
    report = validate_density(rho0)
    if not report.passed:
        raise ValidationError(f"rho0 is not a density operator: {report.violations}")
    if config.gamma_mem < 0:
        raise ValidationError("memory rate must be >= 0")

    if kind == "memory_swap":
        h = as_matrix(config.hamiltonian if config.hamiltonian is not None else np.zeros((4, 4)))
        if h.shape != (4, 4) or np.max(np.abs(h - dagger(h))) > 1e-10:
            raise ValidationError("memory_swap needs a Hermitian 4x4 Hamiltonian")
        return DiscreteModel(
            kind, n, (), None, EnvironmentState(2), None, float(config.gamma_mem), h, rho0, config,
            np.zeros((0, 0, 4, 4), dtype=complex),
        )

    if config.observable is None:
        raise ValidationError("observable is required")
    obs = hermitian_spectral(config.observable)
    h0 = as_matrix(config.h0 if config.h0 is not None else np.zeros((2, 2)), "h0")
    if np.max(np.abs(h0 - dagger(h0))) > 1e-10:
        raise ValidationError("h0 must be Hermitian")

    if kind == "noise":
        if config.kraus is None or len(config.kraus) != 3:
            raise ValidationError("noise kind requires exactly three Kraus entries")
        constants = derive_constants(obs, "noise", check=not config.allow_diagonal)
        u = build_noise_unitary([as_matrix(k) for k in config.kraus], float(config.eps), n)
        env = EnvironmentState(4)
        unitaries = (u,)
    else:
        constants = derive_constants(obs, "single", check=not config.allow_diagonal)
        env = EnvironmentState(2)
        if kind == "alternating":
            if config.c_plus is None or config.c_minus is None:
                raise ValidationError("alternating kind requires c_plus and c_minus")
            unitaries = (
                build_dilation_unitary(h0, config.c_plus, n, config.convention),
                build_dilation_unitary(h0, config.c_minus, n, config.convention),
            )
        else:
            c = config.c if config.c is not None else np.zeros((2, 2))
            unitaries = (build_dilation_unitary(h0, c, n, config.convention),)
    if obs.dim != env.dim:
        raise ValidationError(f"observable dimension {obs.dim} does not match environment {env.dim}")
    superops = np.array([_outcome_superops(u, obs) for u in unitaries])
    return DiscreteModel(
        kind, n, unitaries, obs, env, constants, float(config.gamma_mem), None, rho0, config, superops
    )


# ------------------------------------------------------------ stepping

_HERM_PERM = [0, 2, 1, 3]


def _apply(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Candidates (B, O, 4) = s (O, 4, 4) applied to v (B, 4), elementwise."""
    out = s[None, :, :, 0] * v[:, None, None, 0]
    for j in range(1, 4):
        out = out + s[None, :, :, j] * v[:, None, None, j]
    return out


def _normalised_x(outcome: np.ndarray, probs: np.ndarray, kind: str) -> np.ndarray:
    b = len(outcome)
    if kind == "noise":
        x = np.zeros((b, 3))
        for i in range(1, 4):
            q = probs[:, i]
            var = q * (1.0 - q)
            ok = np.minimum(q, 1.0 - q) > DEGENERATE_TOL
            nu = (outcome == i).astype(float)
            x[:, i - 1] = np.where(ok, (nu - q) / np.sqrt(np.where(ok, var, 1.0)), 0.0)
        return x
    p, q = probs[:, 0], probs[:, 1]
    ok = np.minimum(p, q) > DEGENERATE_TOL
    nu = (outcome == 1).astype(float)
    return np.where(ok, (nu - q) / np.sqrt(np.where(ok, p * q, 1.0)), 0.0)[:, None]


def advance(model: DiscreteModel, v: np.ndarray, k: int, u: np.ndarray):
    """Advance vec-states v (B, 4) from step k to k+1 with uniforms u (B,).

    Returns (next v, outcomes, probs, x).
    """
    s = model.superops[model.unitary_index(k)]
    cand = _apply(s, v)
    probs = np.clip(np.real(cand[..., 0] + cand[..., 3]), 0.0, None)
    total = probs.sum(axis=1)
    if np.any(total <= DEGENERATE_TOL):
        raise DegeneracyError("all outcome probabilities vanish")
    cdf = np.cumsum(probs, axis=1)
    outcome = np.count_nonzero((u * total)[:, None] >= cdf[:, :-1], axis=1)
    # Remark branch: an outcome of probability one is taken deterministically
    certain = probs >= 1.0 - DEGENERATE_TOL
    forced = certain.any(axis=1)
    outcome = np.where(forced, np.argmax(certain, axis=1), outcome)
    rows = np.arange(len(outcome))
    chosen = cand[rows, outcome]
    nxt = chosen / probs[rows, outcome][:, None]
    nxt = 0.5 * (nxt + np.conj(nxt[:, _HERM_PERM]))
    if model.kind == "memory_reset":
        pm = model.p_mem
        nxt = pm * nxt + (1.0 - pm) * model.initial.reshape(1, 4)
    return nxt, outcome, probs, _normalised_x(outcome, probs, model.kind)


@dataclass(frozen=True)
class StepResult:
    next_state: ComplexMatrix
    outcome: int
    probs: tuple
    x: tuple


def step(model: DiscreteModel, state: ComplexMatrix, k: int, rng: RngStream) -> StepResult:
    """One conditional update rho_k -> rho_{k+1}, consuming one uniform."""
    if model.kind == "memory_swap":
        raise ValidationError("memory_swap is deterministic; use evolve_memory_swap")
    state = as_matrix(state, "state")
    v = state.reshape(1, 4)
    nxt, outcome, probs, x = advance(model, v, k, np.array([rng.next_uniform()]))
    return StepResult(nxt.reshape(2, 2), int(outcome[0]), tuple(probs[0].tolist()), tuple(x[0].tolist()))


# ------------------------------------------------------------ ensembles


@dataclass
class BatchResult:
    """Output of :func:`simulate_batch` for one group of streams.

    ``states`` has shape (len(record_steps), B, 2, 2).  ``path_sum`` holds
    the sum over the batch of every state rho_0..rho_n when requested.
    """

    record_steps: np.ndarray
    states: np.ndarray
    path_sum: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    x: np.ndarray | None = None
    probs: np.ndarray | None = None


def simulate_batch(
    model: DiscreteModel,
    seed: int,
    streams: Sequence[int],
    record_steps: Sequence[int] | None = None,
    path_sum: bool = False,
    keep_x: bool = False,
    keep_outcomes: bool = False,
    keep_probs: bool = False,
    block: int = 256,
) -> BatchResult:
    if model.kind == "memory_swap":
        raise ValidationError("memory_swap is deterministic; use evolve_memory_swap")
    n = model.n
    streams = list(streams)
    b = len(streams)
    steps = np.arange(n + 1) if record_steps is None else np.asarray(sorted(set(record_steps)), dtype=int)
    if steps.size and (steps[0] < 0 or steps[-1] > n):
        raise ValidationError("record step outside 0..n")
    where = {int(s): i for i, s in enumerate(steps)}
    rec = np.zeros((len(steps), b, 4), dtype=complex)
    acc = np.zeros((n + 1, 4), dtype=complex) if path_sum else None
    xs = np.zeros((n, b, model.x_dim)) if keep_x else None
    outs = np.zeros((n, b), dtype=np.int8) if keep_outcomes else None
    prs = np.zeros((n, b, model.n_outcomes)) if keep_probs else None
    gens = [RngStream(seed, s, DOMAIN_DISCRETE) for s in streams]
    v = np.repeat(model.initial.reshape(1, 4), b, axis=0)
    if 0 in where:
        rec[where[0]] = v
    if acc is not None:
        acc[0] = v.sum(axis=0)
    for start in range(0, n, block):
        stop = min(n, start + block)
        us = np.stack([g.uniforms(stop - start) for g in gens], axis=1)
        for k in range(start, stop):
            v, outcome, probs, x = advance(model, v, k, us[k - start])
            if k + 1 in where:
                rec[where[k + 1]] = v
            if acc is not None:
                acc[k + 1] = v.sum(axis=0)
            if xs is not None:
                xs[k] = x
            if outs is not None:
                outs[k] = outcome
            if prs is not None:
                prs[k] = probs
    return BatchResult(
        steps,
        rec.reshape(len(steps), b, 2, 2),
        None if acc is None else acc.reshape(n + 1, 2, 2),
        outs,
        xs,
        prs,
    )


# ------------------------------------------------------------ records


def state_columns() -> list:
    return [f"{part}_{i}{j}" for i in range(2) for j in range(2) for part in ("re", "im")]


def _fmt(value: float) -> str:
    return repr(float(value))


def format_header(meta: dict) -> str:
    return "".join(f"# {k}={meta[k]}\n" for k in meta)


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    outcomes: np.ndarray
    x_path: np.ndarray
    probs: np.ndarray
    seed: int
    stream_index: int
    model_digest: str
    kind: str

    def validate(self, tol: float = 1e-10) -> bool:
        n = len(self.times) - 1
        if len(self.states) != n + 1 or len(self.outcomes) != n or len(self.x_path) != n:
            return False
        return all(validate_density(s, psd_tol=tol).passed for s in self.states)

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(format_header(header or {}))
        m = self.x_path.shape[1] if self.x_path.ndim == 2 else 1
        xcols = ["x"] if m == 1 else [f"x_{i + 1}" for i in range(m)]
        buf.write(",".join(["k", "t", "outcome"] + xcols + state_columns()) + "\n")
        for k, (t, rho) in enumerate(zip(self.times, self.states)):
            if k == 0:
                head = ["0", _fmt(t), ""] + [""] * m
            else:
                head = [str(k), _fmt(t), str(int(self.outcomes[k - 1]))]
                head += [_fmt(v) for v in np.atleast_1d(self.x_path[k - 1])]
            flat = rho.reshape(-1)
            cols = [_fmt(c) for z in flat for c in (z.real, z.imag)]
            buf.write(",".join(head + cols) + "\n")
        return buf.getvalue()

    def to_json(self, header: dict | None = None) -> dict:
        return {
            **(header or {}),
            "kind": self.kind,
            "seed": self.seed,
            "stream_index": self.stream_index,
            "model_digest": self.model_digest,
            "times": self.times.tolist(),
            "outcomes": self.outcomes.tolist(),
            "x": self.x_path.tolist(),
            "states_re": np.real(self.states).tolist(),
            "states_im": np.imag(self.states).tolist(),
        }


def simulate(model: DiscreteModel, seed: int, stream_index: int = 0) -> TrajectoryRecord:
    """One trajectory rho_0..rho_n on the grid k/n, reproducible from (seed, stream_index)."""
    n = model.n
    times = np.arange(n + 1) / n
    if model.kind == "memory_swap":
        states = evolve_memory_swap(model)
        return TrajectoryRecord(
            times, states, np.zeros(n, dtype=int), np.zeros((n, 1)), np.ones((n, 1)),
            seed, stream_index, model.model_digest, model.kind,
        )
    res = simulate_batch(model, seed, [stream_index], keep_x=True, keep_outcomes=True, keep_probs=True)
    return TrajectoryRecord(
        times,
        res.states[:, 0],
        res.outcomes[:, 0].astype(int),
        res.x[:, 0],
        res.probs[:, 0],
        seed,
        stream_index,
        model.model_digest,
        model.kind,
    )


# ------------------------------------------------------------ swap memory


def swap_channel_superops(h: ComplexMatrix, n: int, count: int) -> np.ndarray:
    """Superoperators of rho -> E_0[U^j (rho (x) beta) U^{j dag}] for j = 0..count, U = e^{-iH/n}."""
    u = matrix_exp(-1j * as_matrix(h) / n)
    out = np.zeros((count + 1, 4, 4), dtype=complex)
    power = np.eye(4, dtype=complex)
    for j in range(count + 1):
        r = power.reshape(2, 2, 2, 2)
        ops = [r[:, a, :, 0] for a in range(2)]
        out[j] = _vec_superop(ops)
        power = u @ power
    return out


def evolve_memory_swap(model: DiscreteModel) -> np.ndarray:
    """rho_k = (1-p) sum_{j=1}^{k-1} p^{j-1} E_j[rho_{k-j}] + p^{k-1} E_k[rho_0]."""
    if model.kind != "memory_swap":
        raise ValidationError("evolve_memory_swap needs a memory_swap model")
    n = model.n
    p = model.p_mem
    sup = swap_channel_superops(model.hamiltonian, n, n)
    v = np.zeros((n + 1, 4), dtype=complex)
    v[0] = model.initial.reshape(4)
    for k in range(1, n + 1):
        acc = (p ** (k - 1)) * (sup[k] @ v[0])
        if k > 1 and p < 1.0:
            j = np.arange(1, k)
            w = (1.0 - p) * p ** (j - 1)
            acc = acc + np.einsum("j,jab,jb->a", w, sup[j], v[k - j])
        v[k] = acc
    return v.reshape(n + 1, 2, 2)



def conditional_updates(model: DiscreteModel, state: ComplexMatrix, k: int = 0) -> list:
    """Every possible (probability, next state, x) for the step k -> k+1."""
    state = as_matrix(state, "state")
    s = model.superops[model.unitary_index(k)]
    cand = _apply(s, state.reshape(1, 4))[0]
    probs = np.clip(np.real(cand[:, 0] + cand[:, 3]), 0.0, None)
    out = []
    for j in range(len(probs)):
        if probs[j] <= DEGENERATE_TOL:
            continue
        nxt = cand[j] / probs[j]
        nxt = 0.5 * (nxt + np.conj(nxt[_HERM_PERM]))
        if model.kind == "memory_reset":
            nxt = model.p_mem * nxt + (1.0 - model.p_mem) * model.initial.reshape(4)
        x = _normalised_x(np.array([j]), probs[None, :], model.kind)[0]
        out.append((float(probs[j]), nxt.reshape(2, 2), x))
    return out
