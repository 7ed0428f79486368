import math

import numpy as np
import pytest
from hypothesis import given, settings

from belavkin_lab.asymptotic_calculus import derive_constants, loglog_slope
from belavkin_lab.continuous_limits import (
    SdeSpec,
    VolterraKernelPair,
    brownian_increments,
    build_sde_spec,
    em_integrate,
    em_integrate_batch,
    eps_map,
    lindblad_apply,
    solve_ode,
    superop_of,
    theta_apply,
    volterra_direct,
)
from belavkin_lab.discrete_models import KRAUS_PRESETS, LOWERING, OBSERVABLE_PRESETS, STATE_PRESETS
from belavkin_lab.errors import DivergenceError, ValidationError
from belavkin_lab.linalg_core import SIGMA_X, SIGMA_Z, hermitian_spectral, matrix_exp, partial_trace_env

from helpers import random_complex, random_density, random_hermitian, seeds

SWAP = np.eye(4)[[0, 2, 1, 3]].astype(complex)
ZERO = np.zeros((2, 2), dtype=complex)


# ------------------------------------------------------------ generators


def test_lindblad_without_jump(rng):
    h = random_hermitian(rng, 2)
    rho = random_density(rng)
    assert np.allclose(lindblad_apply(rho, h, ZERO), -1j * (h @ rho - rho @ h), atol=1e-15)


def test_lindblad_lowering_on_mixed():
    out = lindblad_apply(np.eye(2) / 2, ZERO, LOWERING)
    assert np.allclose(out, np.diag([0.5, -0.5]), atol=1e-15)


@given(seeds)
def test_lindblad_traceless_hermitian(seed):
    rng = np.random.default_rng(seed)
    rho = random_density(rng)
    for conv in ("standard", "adjoint"):
        out = lindblad_apply(rho, random_hermitian(rng, 2), random_complex(rng, 2), conv)
        assert abs(np.trace(out)) <= 1e-13
        assert np.max(np.abs(out - out.conj().T)) <= 1e-13


def test_lindblad_conventions_agree_for_hermitian_jump(rng):
    rho = random_density(rng)
    c = random_hermitian(rng, 2)
    assert np.allclose(lindblad_apply(rho, SIGMA_Z, c), lindblad_apply(rho, SIGMA_Z, c, "adjoint"), atol=1e-14)


@given(seeds)
def test_theta_properties(seed):
    rng = np.random.default_rng(seed)
    rho = random_density(rng)
    c = random_complex(rng, 2)
    th = theta_apply(rho, c)
    assert abs(np.trace(th)) <= 1e-14
    assert np.max(np.abs(th - th.conj().T)) <= 1e-14
    assert np.allclose(theta_apply(rho, -c), -th, atol=1e-15)
    assert np.allclose(theta_apply(rho, np.eye(2)), 0, atol=1e-15)


def test_theta_stacks(rng):
    rhos = np.stack([random_density(rng) for _ in range(5)])
    c = random_complex(rng, 2)
    stacked = theta_apply(rhos, c)
    for r, s in zip(rhos, stacked):
        assert np.allclose(theta_apply(r, c), s, atol=1e-15)


def test_eps_map_trivial(rng):
    rho = random_density(rng)
    h = random_hermitian(rng, 4)
    assert np.allclose(eps_map(0.0, rho, h), rho, atol=1e-15)
    assert np.allclose(eps_map(0.7, rho, np.zeros((4, 4))), rho, atol=1e-15)


def test_eps_map_swap_composition(rng):
    rho = random_density(rng)
    t = np.pi / 4
    u = matrix_exp(-1j * t * SWAP)
    ref = partial_trace_env(u @ np.kron(rho, np.diag([1.0, 0.0])) @ u.conj().T, 2, 2)
    assert np.allclose(eps_map(t, rho, SWAP), ref, atol=1e-14)
    # at t = pi/2 the swap fully exchanges system and environment
    assert np.allclose(eps_map(np.pi / 2, rho, SWAP), np.diag([1.0, 0.0]), atol=1e-13)


# ------------------------------------------------------------ ODEs


def test_master_trivial_is_constant(rng):
    rho = random_density(rng)
    path = solve_ode("master", dict(h0=ZERO, c=ZERO), rho, 1e-2)
    assert np.allclose(path.states, rho, atol=1e-15)


def test_channel_eps_zero_exponential(rng):
    rho = random_density(rng)
    path = solve_ode("channel", dict(kraus=KRAUS_PRESETS["depolarizing"], eps=0.0), rho, 1e-2)
    ref = np.exp(path.times)[:, None, None] * rho
    assert np.max(np.abs(path.states - ref)) <= 1e-9


def test_master_rk4_order(rng):
    rho = random_density(rng)
    params = dict(h0=SIGMA_Z, c=LOWERING)
    gen = superop_of(lambda r: lindblad_apply(r, SIGMA_Z, LOWERING))
    exact = (matrix_exp(gen) @ rho.reshape(4)).reshape(2, 2)
    errs = [np.linalg.norm(solve_ode("master", params, rho, dt).states[-1] - exact) for dt in (1e-2, 5e-3, 2.5e-3)]
    assert -loglog_slope([1e-2, 5e-3, 2.5e-3], errs).slope <= -3.8


def test_volterra_det_no_memory(rng):
    rho = random_density(rng)
    path = solve_ode("volterra_det", dict(hamiltonian=SWAP + 0.3 * np.kron(SIGMA_X, np.eye(2)), gamma_mem=0.0),
                     rho, 1e-2)
    for k in (0, 10, 100):
        ref = eps_map(path.times[k], rho, SWAP + 0.3 * np.kron(SIGMA_X, np.eye(2)))
        assert np.allclose(path.states[k], ref, atol=1e-12)


def test_volterra_det_second_order(rng):
    rho = random_density(rng)
    params = dict(hamiltonian=2.0 * SWAP, gamma_mem=1.5)
    fine = solve_ode("volterra_det", params, rho, 1 / 1600).states[-1]
    errs = [np.linalg.norm(solve_ode("volterra_det", params, rho, dt).states[-1] - fine) for dt in (1e-2, 5e-3, 2.5e-3)]
    assert -loglog_slope([1e-2, 5e-3, 2.5e-3], errs).slope <= -1.8


def test_solve_ode_rejects_coarse_step():
    with pytest.raises(ValidationError):
        solve_ode("master", dict(h0=ZERO, c=ZERO), np.eye(2) / 2, 0.1)


# ------------------------------------------------------------ SDE specs


def _noise_constants():
    return derive_constants(hermitian_spectral(OBSERVABLE_PRESETS["dft4"]), "noise")


def test_sde_builder_shapes():
    s = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING))
    assert s.m == 1 and np.allclose(s.covariance, [[1.0]])
    a = build_sde_spec("alternating", dict(h0=SIGMA_Z, c_plus=LOWERING, c_minus=SIGMA_Z))
    assert a.m == 2 and np.isclose(a.diffusion_scale, 1 / math.sqrt(2))
    n = build_sde_spec("noise", dict(kraus=KRAUS_PRESETS["depolarizing"], eps=0.1, constants=_noise_constants()))
    off = n.covariance[~np.eye(3, dtype=bool)]
    assert np.allclose(off, -1 / 3)
    assert np.max(np.abs(n.cov_sqrt @ n.cov_sqrt - n.covariance)) <= 1e-10
    v = build_sde_spec("volterra_lift", dict(h0=SIGMA_Z, c=LOWERING, gamma_mem=1.0))
    assert v.time_dependent
    with pytest.raises(ValidationError):
        build_sde_spec("poisson", {})


@pytest.mark.parametrize("kind", ["belavkin", "alternating", "noise", "volterra_lift"])
def test_vectorised_path_matches_callables(kind):
    params = dict(h0=SIGMA_Z, c=LOWERING, c_plus=LOWERING, c_minus=0.8 * SIGMA_Z, gamma_mem=0.7,
                  kraus=KRAUS_PRESETS["depolarizing"], eps=0.2, constants=_noise_constants(), gamma=-1.0)
    spec = build_sde_spec(kind, params)
    rho0 = STATE_PRESETS["plus"] * 0.8 + 0.1 * np.eye(2)
    _, fast = em_integrate_batch(spec, rho0, 1e-3, 0.5, 3, range(6))
    _, slow = em_integrate_batch(spec, rho0, 1e-3, 0.5, 3, range(6), vectorised=False)
    assert np.max(np.abs(fast - slow)) <= 1e-12


def test_batch_rows_independent_of_batch():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING))
    _, big = em_integrate_batch(spec, STATE_PRESETS["plus"], 1e-3, 1.0, 9, range(10))
    _, one = em_integrate_batch(spec, STATE_PRESETS["plus"], 1e-3, 1.0, 9, [7])
    assert np.array_equal(big[:, 7], one[:, 0])


# ------------------------------------------------------------ Euler-Maruyama


def test_zero_dynamics_constant(rng):
    rho = random_density(rng)
    spec = build_sde_spec("belavkin", dict(h0=ZERO, c=ZERO))
    path = em_integrate(spec, rho, 1e-3, 1.0, 1)
    assert np.allclose(path.states, rho, atol=1e-15)


def test_belavkin_trace_conservation():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING, gamma=-1.0))
    path = em_integrate(spec, STATE_PRESETS["plus"], 1e-4, 1.0, 12)
    assert path.metadata["max_trace_error"] <= 1e-10
    assert np.max(np.abs(path.states - np.conj(np.swapaxes(path.states, 1, 2)))) <= 1e-10


def test_noise_path_shape_checked():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING))
    with pytest.raises(ValidationError):
        em_integrate(spec, STATE_PRESETS["plus"], 1e-2, 1.0, 0, noise_path=np.zeros((1, 50)))


def test_explicit_noise_path_reproduces(rng):
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING))
    a = em_integrate(spec, STATE_PRESETS["plus"], 1e-3, 1.0, 4)
    b = em_integrate(spec, STATE_PRESETS["plus"], 1e-3, 1.0, 999, noise_path=a.noise_increments)
    assert np.array_equal(a.states, b.states)
    assert abs(a.noise_increments.mean()) <= 4 * math.sqrt(1e-3 / 1000)


def test_strong_order_half():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING, gamma=-1.0))
    rho0 = STATE_PRESETS["plus"]
    B = 400
    fine_steps = 4096
    dw = brownian_increments(17, range(B), fine_steps, 1, 1.0 / fine_steps)
    _, ref = em_integrate_batch(spec, rho0, 1.0 / fine_steps, 1.0, 0, range(B), record_steps=[fine_steps],
                                noise_path=dw)
    dts, errs = [], []
    for level in (128, 256, 512):
        agg = dw.reshape(level, fine_steps // level, B, 1).sum(axis=1)
        _, coarse = em_integrate_batch(spec, rho0, 1.0 / level, 1.0, 0, range(B), record_steps=[level],
                                       noise_path=agg)
        errs.append(np.mean(np.linalg.norm(coarse[0] - ref[0], axis=(1, 2)) ** 2) ** 0.5)
        dts.append(1.0 / level)
    assert loglog_slope(dts, errs).slope >= 0.45


def test_divergence_guard():
    spec = SdeSpec(2, lambda r, t: 1e4 * r, (lambda r, t: 0 * r,), np.eye(1), np.eye(1), label="blowup")
    with pytest.raises(DivergenceError) as info:
        em_integrate(spec, np.eye(2) / 2, 1e-2, 1.0, 0)
    assert info.value.step >= 1


def test_noise_sde_eps_zero_is_exponential(rng):
    rho = random_density(rng)
    spec = build_sde_spec("noise", dict(kraus=KRAUS_PRESETS["depolarizing"], eps=0.0,
                                        constants=_noise_constants(), drift_form="raw"))
    path = em_integrate(spec, rho, 1e-3, 1.0, 2)
    ref = np.exp(path.grid)[:, None, None] * rho
    assert np.max(np.abs(path.states - ref)) <= 2e-3 * math.e
    assert np.max(np.abs(path.states[-1] - ref[-1])) >= 0  # deterministic: no noise enters


def test_unitarized_noise_sde_keeps_trace():
    spec = build_sde_spec("noise", dict(kraus=KRAUS_PRESETS["depolarizing"], eps=0.2,
                                        constants=_noise_constants(), drift_form="unitarized"))
    path = em_integrate(spec, STATE_PRESETS["mixed"], 1e-3, 1.0, 5)
    assert path.metadata["max_trace_error"] <= 1e-10


def test_sde_path_csv_has_scheme_column():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING))
    text = em_integrate(spec, STATE_PRESETS["plus"], 1e-2, 0.1, 0).to_csv({"schema_version": 1})
    lines = text.splitlines()
    assert lines[1].startswith("k,t,scheme,re_00")
    assert lines[2].split(",")[2] == "belavkin"


# ------------------------------------------------------------ Volterra


def test_constant_kernel_reduces_to_euler():
    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING, gamma=-1.0))
    rho0 = STATE_PRESETS["plus"]
    ref = em_integrate(spec, rho0, 1e-3, 1.0, 6)
    direct = volterra_direct(rho0, VolterraKernelPair.constant(), lambda r: spec.drift(r, 0.0),
                             lambda r: spec.diffusions[0](r, 0.0), 1e-3, 1.0, 0,
                             noise_path=ref.noise_increments[0])
    assert np.max(np.abs(direct.states - ref.states)) <= 1e-12


def test_lift_matches_direct_convolution():
    g = 1.3
    params = dict(h0=SIGMA_Z, c=LOWERING, gamma_mem=g, gamma=-1.0)
    spec = build_sde_spec("volterra_lift", params)
    rho0 = STATE_PRESETS["plus"]
    lift = em_integrate(spec, rho0, 1e-3, 1.0, 10)
    jump = -1.0 * LOWERING
    direct = volterra_direct(
        rho0, VolterraKernelPair.exponential(g), lambda r: lindblad_apply(r, SIGMA_Z, LOWERING),
        lambda r: theta_apply(r, jump), 1e-3, 1.0, 0, noise_path=lift.noise_increments[0],
    )
    assert np.max(np.abs(lift.states - direct.states)) <= 1e-8
    traces = np.trace(direct.states, axis1=1, axis2=2)
    assert np.max(np.abs(traces - 1)) <= 1e-8


def test_deterministic_volterra_limit():
    # zero diffusion, exponential kernel: rho_t = rho0 + int e^{-g(t-s)} L(rho_s) ds
    g = 1.0
    rho0 = STATE_PRESETS["plus"]
    dt = 1e-3
    direct = volterra_direct(rho0, VolterraKernelPair.exponential(g), lambda r: lindblad_apply(r, SIGMA_Z, LOWERING),
                             lambda r: 0 * r, dt, 1.0, 0)
    ode = solve_ode("reset_mean", dict(h0=SIGMA_Z, c=LOWERING, gamma_mem=g, rho0=rho0), rho0, dt)
    assert np.max(np.abs(direct.states - ode.states)) <= 5 * dt


def test_tabulated_kernel():
    grid = np.linspace(0, 1, 101)
    k = VolterraKernelPair.tabulated(grid, np.exp(-grid), np.exp(-grid))
    ref = VolterraKernelPair.exponential(1.0)
    t = np.linspace(0, 1, 7)
    assert np.allclose(k.k_b(t), ref.k_b(t), atol=1e-4)


# ------------------------------------------------------------ purity under Euler


def _purity(states):
    return np.real(np.einsum("...ij,...ji->...", states, states))


@settings(max_examples=5)
@given(seeds)
def test_pure_start_stays_pure_on_chain_but_not_under_euler(seed):
    # The discrete chain maps pure states to pure states exactly, while the
    # Euler scheme leaks a purity defect that only vanishes as dt -> 0.  This is why weak-marginal
    # comparisons of purity use a mixed initial state.
    from belavkin_lab.discrete_models import ModelConfig, build_model, simulate_batch

    model = build_model(ModelConfig(kind="single", n=100, h0=SIGMA_Z, c=LOWERING,
                                    observable=SIGMA_X, rho0=STATE_PRESETS["plus"]))
    chain = simulate_batch(model, seed % 1000, range(8), record_steps=[100]).states[0]
    assert np.max(np.abs(_purity(chain) - 1.0)) <= 1e-12

    spec = build_sde_spec("belavkin", dict(h0=SIGMA_Z, c=LOWERING, gamma=-1.0))
    defects = []
    for dt in (1e-2, 2.5e-3):
        _, s = em_integrate_batch(spec, STATE_PRESETS["plus"], dt, 1.0, seed % 1000, range(64),
                                  record_steps=[round(1 / dt)])
        defects.append(np.mean(np.abs(1.0 - _purity(s[0]))))
    assert defects[0] > 1e-3
    assert defects[1] < defects[0] / 1.2
