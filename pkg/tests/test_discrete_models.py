import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from belavkin_lab.asymptotic_calculus import loglog_slope
from belavkin_lab.continuous_limits import eps_map, lindblad_apply, solve_ode
from belavkin_lab.discrete_models import (
    KINDS,
    KRAUS_PRESETS,
    LOWERING,
    OBSERVABLE_PRESETS,
    STATE_PRESETS,
    ModelConfig,
    RngStream,
    build_model,
    conditional_updates,
    evolve_memory_swap,
    simulate,
    simulate_batch,
    step,
)
from belavkin_lab.errors import AssumptionError, ValidationError
from belavkin_lab.linalg_core import SIGMA_X, SIGMA_Z, density_violations, validate_density

from helpers import random_complex, random_density, random_hermitian, seeds

SWAP = np.eye(4)[[0, 2, 1, 3]].astype(complex)
SWAP_H = 2.0 * SWAP + 0.5 * np.kron(SIGMA_Z, np.eye(2))


def single_cfg(n=200, **kw):
    base = dict(kind="single", n=n, h0=SIGMA_Z, c=LOWERING, observable=SIGMA_X, rho0=STATE_PRESETS["plus"])
    base.update(kw)
    return ModelConfig(**base)


def noise_cfg(n=200, eps=0.2, **kw):
    base = dict(kind="noise", n=n, kraus=tuple(KRAUS_PRESETS["depolarizing"]), eps=eps,
                observable=OBSERVABLE_PRESETS["dft4"], rho0=STATE_PRESETS["mixed"])
    base.update(kw)
    return ModelConfig(**base)


def any_cfg(kind, n=100, rho0=None):
    rho0 = STATE_PRESETS["plus"] if rho0 is None else rho0
    if kind == "single":
        return single_cfg(n, rho0=rho0)
    if kind == "alternating":
        return ModelConfig("alternating", n, h0=SIGMA_Z, c_plus=LOWERING, c_minus=0.8 * SIGMA_Z,
                           observable=SIGMA_X, rho0=rho0)
    if kind == "noise":
        return noise_cfg(n, rho0=rho0)
    if kind == "memory_reset":
        return single_cfg(n, kind="memory_reset", gamma_mem=1.0, rho0=rho0)
    return ModelConfig("memory_swap", n, hamiltonian=SWAP_H, gamma_mem=1.0, rho0=rho0)


# ------------------------------------------------------------ build


def test_build_single_benchmark():
    m = build_model(single_cfg())
    assert np.isclose(m.constants.gamma, -1.0)
    assert m.n_outcomes == 2 and m.x_dim == 1


def test_build_rejects_diagonal_observable():
    with pytest.raises(AssumptionError):
        build_model(single_cfg(observable=SIGMA_Z))


def test_build_noise_padded_bit_flip():
    m = build_model(noise_cfg(kraus=tuple(KRAUS_PRESETS["bit_flip"])))
    assert np.allclose(m.constants.b_ij, 1 / 3)
    with pytest.raises(ValidationError):
        build_model(noise_cfg(kraus=(SIGMA_X,)))


def test_build_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        build_model(single_cfg(rho0=SIGMA_Z))
    with pytest.raises(ValidationError):
        build_model(single_cfg(kind="nonsense"))
    with pytest.raises(ValidationError):
        build_model(single_cfg(kind="memory_reset", gamma_mem=-1.0))


def test_memory_probability():
    m = build_model(single_cfg(100, kind="memory_reset", gamma_mem=2.0))
    assert np.isclose(m.p_mem, math.exp(-0.02))


def test_digest_stable_and_sensitive():
    a, b = single_cfg(), single_cfg()
    assert a.digest() == b.digest()
    assert a.digest() != single_cfg(n=201).digest()


# ------------------------------------------------------------ rng


def test_rng_block_draws_equal_sequential():
    a = RngStream(5, 3)
    b = RngStream(5, 3)
    big = a.uniforms(10)
    small = np.concatenate([b.uniforms(3), b.uniforms(7)])
    assert np.array_equal(big, small)
    assert a.counter == 10


def test_rng_streams_and_domains_differ():
    u0 = RngStream(5, 0).uniforms(1000)
    u1 = RngStream(5, 1).uniforms(1000)
    d1 = RngStream(5, 0, domain=1).uniforms(1000)
    assert not np.array_equal(u0, u1)
    assert not np.array_equal(u0, d1)
    assert abs(np.corrcoef(u0, u1)[0, 1]) < 0.15


# ------------------------------------------------------------ step


def test_step_trivial_unitary(rng):
    m = build_model(single_cfg(50, h0=np.zeros((2, 2)), c=np.zeros((2, 2))))
    rho = random_density(rng)
    for k in range(4):
        r = step(m, rho, k, RngStream(1, k))
        assert np.allclose(r.next_state, rho, atol=1e-14)


def test_step_certain_outcome_is_deterministic(rng):
    # sigma_z readout with C = 0: the environment stays in e_0, outcome 0 has probability one
    m = build_model(single_cfg(50, c=np.zeros((2, 2)), observable=SIGMA_Z, allow_diagonal=True))
    rho = random_density(rng)
    for k in range(5):
        r = step(m, rho, 0, RngStream(9, k))
        assert r.outcome == 0
        assert r.x == (0.0,)
        assert np.isclose(r.probs[0], 1.0, atol=1e-14)
    rho0 = conditional_updates(m, rho)[0][1]
    assert np.allclose(r.next_state, rho0, atol=1e-15)


def test_step_probabilities_close_to_p00(rng):
    ns = [100, 400, 1600, 6400]
    worst = []
    for n in ns:
        m = build_model(single_cfg(n))
        p00 = m.constants.p00[0]
        dev = 0.0
        for _ in range(10):
            r = step(m, random_density(rng), 0, RngStream(0, 0))
            assert abs(sum(r.probs) - 1) <= 1e-12
            assert all(0 <= p <= 1 for p in r.probs)
            dev = max(dev, abs(r.probs[0] - p00))
        worst.append(dev)
    assert all(w * math.sqrt(n) <= 3.0 for w, n in zip(worst, ns))


@settings(max_examples=15)
@given(seeds, st.sampled_from(["single", "alternating", "noise", "memory_reset"]))
def test_step_output_is_density(seed, kind):
    rng = np.random.default_rng(seed)
    m = build_model(any_cfg(kind, 64))
    rho = random_density(rng)
    r = step(m, rho, int(rng.integers(0, 10)), RngStream(seed, 0))
    assert validate_density(r.next_state).passed
    assert abs(sum(r.probs) - 1) <= 1e-12


# ------------------------------------------------------------ simulate


@pytest.mark.parametrize("kind", KINDS)
def test_simulate_records_are_valid(kind):
    m = build_model(any_cfg(kind, 100))
    rec = simulate(m, 3, 1)
    assert rec.validate(1e-10)
    assert len(rec.times) == 101 and np.isclose(rec.times[-1], 1.0)
    rec2 = simulate(m, 3, 1)
    assert np.array_equal(rec.states, rec2.states)
    assert rec.to_csv({"a": 1}) == rec2.to_csv({"a": 1})


def test_simulate_matches_batch_row():
    m = build_model(single_cfg(300))
    batch = simulate_batch(m, 11, range(5))
    rec = simulate(m, 11, 3)
    assert np.array_equal(batch.states[:, 3], rec.states)


def test_noise_eps_zero_is_constant(rng):
    rho = random_density(rng)
    m = build_model(noise_cfg(100, eps=0.0, rho0=rho))
    rec = simulate(m, 4, 0)
    assert np.max(np.abs(rec.states - rho)) <= 1e-13


def test_csv_layout():
    rec = simulate(build_model(single_cfg(10)), 0, 0)
    lines = rec.to_csv({"schema_version": 1}).splitlines()
    assert lines[0] == "# schema_version=1"
    assert lines[1].split(",")[:4] == ["k", "t", "outcome", "x"]
    assert len(lines[1].split(",")) == 12
    assert len(lines) == 2 + 11


def test_mean_matches_master_ode():
    n, M = 1000, 10000
    m = build_model(single_cfg(n))
    res = simulate_batch(m, 21, range(M), record_steps=[n])
    final = res.states[0]
    ode = solve_ode("master", dict(h0=SIGMA_Z, c=LOWERING), STATE_PRESETS["plus"], 1e-3)
    for part in (np.real, np.imag):
        vals = part(final)
        se = vals.std(axis=0) / math.sqrt(M)
        assert np.all(np.abs(vals.mean(axis=0) - part(ode.states[-1])) <= 4 * se + 1e-12)


def test_conditional_moments_of_x():
    M = 20000
    m = build_model(single_cfg(400))
    x = simulate_batch(m, 5, range(M), record_steps=[], keep_x=True).x[:, :, 0]
    for k in (0, 99, 399):
        assert abs(x[k].mean()) <= 4 / math.sqrt(M)
        assert abs((x[k] ** 2).mean() - 1) <= 6 / math.sqrt(M)
    fourth = (x**4).mean(axis=1)
    assert np.max(fourth) < 10


def test_noise_cross_products():
    M = 20000
    m = build_model(noise_cfg(400))
    res = simulate_batch(m, 8, range(M), record_steps=[], keep_x=True, keep_outcomes=True)
    # outcome i in 1..3 sets nu^(i) = 1; outcome 0 sets none
    assert set(np.unique(res.outcomes)) <= {0, 1, 2, 3}
    x = res.x[200]
    for i in range(3):
        for j in range(i + 1, 3):
            prod = x[:, i] * x[:, j]
            se = prod.std() / math.sqrt(M)
            assert abs(prod.mean() + 1 / 3) <= 4 * se


def test_diagonal_observable_no_jump_branch(rng):
    c = np.array([[0.3, 1.0], [0.2, -0.1]], dtype=complex)
    rho = random_density(rng)
    ns = [100, 1000, 10000, 100000]
    res = []
    for n in ns:
        m = build_model(single_cfg(n, c=c, observable=SIGMA_Z, allow_diagonal=True, rho0=rho))
        (p, nxt, x), (q, _, _) = conditional_updates(m, rho)
        jump = c @ rho @ c.conj().T
        jump_dir = jump / np.trace(jump) - rho
        r = nxt - rho - lindblad_apply(rho, SIGMA_Z, c) / n - jump_dir * math.sqrt(p * q) * x[0]
        res.append(np.linalg.norm(r))
    assert -loglog_slope(ns, res).slope >= 1.4


# ------------------------------------------------------------ memory swap


def test_swap_memory_memoryless_limit(rng):
    n = 20
    rho = random_density(rng)
    m = build_model(ModelConfig("memory_swap", n, hamiltonian=SWAP_H, gamma_mem=1e5, rho0=rho))
    states = evolve_memory_swap(m)
    for k in range(1, n + 1):
        assert np.allclose(states[k], eps_map(1.0 / n, states[k - 1], SWAP_H), atol=1e-13)


def test_swap_memory_no_decay(rng):
    n = 40
    rho = random_density(rng)
    m = build_model(ModelConfig("memory_swap", n, hamiltonian=SWAP_H, gamma_mem=0.0, rho0=rho))
    states = evolve_memory_swap(m)
    for k in (1, 7, 40):
        assert np.allclose(states[k], eps_map(k / n, rho, SWAP_H), atol=1e-12)


def test_swap_memory_converges_to_volterra():
    rho = STATE_PRESETS["ket1"]
    ode = solve_ode("volterra_det", dict(hamiltonian=SWAP_H, gamma_mem=1.0), rho, 1 / 3200)
    ns = [100, 400, 1600]
    errs = []
    for n in ns:
        m = build_model(ModelConfig("memory_swap", n, hamiltonian=SWAP_H, gamma_mem=1.0, rho0=rho))
        states = evolve_memory_swap(m)
        ref = ode.states[:: 3200 // n]
        errs.append(np.max(np.linalg.norm(states - ref, axis=(1, 2))))
    # sup_k error <= C/n with C fitted at the coarsest level
    consts = [e * n for e, n in zip(errs, ns)]
    assert max(consts) <= consts[0] * (1 + 1e-9)
    assert errs[-1] <= errs[0] / 8 + 1e-6


def test_structural_invariants_all_kinds():
    for kind in ("single", "alternating", "noise", "memory_reset"):
        m = build_model(any_cfg(kind, 200))
        states = simulate_batch(m, 2, range(50)).states
        counts = density_violations(states.reshape(-1, 2, 2))
        assert counts["hermitian"] == counts["unit_trace"] == counts["psd"] == 0
