import math
import os

import numpy as np
import pytest

from pathmkv.errors import (
    ConfigurationError,
    DomainError,
    IntegrationBlowupError,
    NonConvergenceError,
)
from pathmkv.hilbert import GENERATOR, SpaceSpec, SpectralOperator
from pathmkv.models import (
    make_frozen,
    make_meanfield_growth,
    make_meanfield_ou,
    make_ou,
    make_ou_drift,
)
from pathmkv.paths import TimeGrid
from pathmkv.rng import brownian_increments, refine_increments
from pathmkv.sde import (
    ModelSpec,
    constant_initial,
    flow_restart_check,
    gaussian_initial,
    integrate,
    integrate_picard,
    integrate_yosida,
    lipschitz_initial_constant,
    ramp_initial,
    s2_distance,
    shifted_initial,
    stopped_initial,
    two_point_initial,
)


def test_frozen_dynamics_constant_paths():
    grid = TimeGrid(1.0, 50)
    model = make_frozen(grid)
    ens = integrate(model, constant_initial([2.5]), n_particles=8, seed=0)
    assert np.all(ens.values == 2.5)


def test_noise_increments_are_iid_gaussian():
    dt = 0.01
    noise = brownian_increments(seed=3, n_particles=200, n_steps=50, dk=2, dt=dt)
    flat = noise.ravel()
    n = flat.size
    assert abs(flat.mean()) < 4 * math.sqrt(dt / n)
    assert abs(flat.var() - dt) < 5 * dt * math.sqrt(2.0 / n)
    # distinct particles get distinct streams
    assert not np.array_equal(noise[0], noise[1])


def test_refine_increments_preserves_brownian_path():
    noise = brownian_increments(seed=1, n_particles=4, n_steps=16, dk=1, dt=1.0 / 16)
    coarse = refine_increments(noise, 4)
    assert coarse.shape == (4, 4, 1)
    assert np.allclose(coarse.sum(axis=1), noise.sum(axis=1))


def test_bit_reproducibility():
    grid = TimeGrid(1.0, 64)
    model = make_ou(grid, a=-1.0, s0=0.5)
    a = integrate(model, constant_initial([1.0]), n_particles=32, seed=11)
    b = integrate(model, constant_initial([1.0]), n_particles=32, seed=11)
    assert np.array_equal(a.values, b.values)
    c = integrate(model, constant_initial([1.0]), n_particles=32, seed=12)
    assert not np.array_equal(a.values, c.values)


def test_meanfield_mean_constant_and_particle_decay():
    grid = TimeGrid(1.0, 200)
    model = make_meanfield_ou(grid, theta=1.0, s0=0.0)
    ens = integrate(model, two_point_initial(-1.0, 1.0), n_particles=64, seed=5)
    means = ens.values.mean(axis=0)[:, 0]
    assert np.abs(means).max() < 1e-12
    # each particle decays like e^{-t} x0 up to O(dt)
    times = grid.times
    x0 = ens.values[:, 0, 0]
    target = x0[:, None] * np.exp(-times)[None, :]
    assert np.abs(ens.values[:, :, 0] - target).max() < 1.0 * grid.dt


def test_ou_terminal_variance_oracle():
    grid = TimeGrid(1.0, 500)
    model = make_ou(grid, a=-1.0, s0=0.5)
    n = 3000
    ens = integrate(model, constant_initial([0.0]), n_particles=n, seed=9)
    xt = ens.values[:, -1, 0]
    var_theory = 0.25 * (1 - math.exp(-2.0)) / 2.0
    se_var = xt.var(ddof=1) * math.sqrt(2.0 / (n - 1))
    assert abs(np.mean(xt)) <= 3 * xt.std(ddof=1) / math.sqrt(n)
    assert abs(xt.var(ddof=1) - var_theory) <= 3 * se_var + 2 * grid.dt * var_theory


def test_coefficient_calls_match_on_stopped_paths():
    # b_t(x, ...) and b_t(stop(x, t), ...) agree bit for bit: the batch and
    # law views clamp reads at the node of t.
    from pathmkv.paths import stop_values
    from pathmkv.sde import EnsembleLaw, PathBatch

    grid = TimeGrid(1.0, 40)
    model = make_meanfield_ou(grid, theta=1.3, s0=0.2)
    rng = np.random.default_rng(13)
    vals = rng.normal(size=(8, grid.steps + 1, 1))
    j = grid.node(0.4)
    stopped = stop_values(vals, j)
    for block_a, block_b in ((vals, stopped),):
        b1 = model.drift_at(0.4, PathBatch(grid, block_a, j), EnsembleLaw(grid, block_a, j), None, None)
        b2 = model.drift_at(0.4, PathBatch(grid, block_b, j), EnsembleLaw(grid, block_b, j), None, None)
        assert np.array_equal(b1, b2)


def test_nonanticipativity_of_solution():
    grid = TimeGrid(1.0, 100)
    model = make_ou(grid, a=-1.0, s0=0.5)
    init = ramp_initial(scale=1.0)
    t0 = 0.3
    a = integrate(model, init, t0=t0, n_particles=16, seed=2)
    b = integrate(model, stopped_initial(init, t0), t0=t0, n_particles=16, seed=2)
    assert np.array_equal(a.values, b.values)


def test_initial_datum_continuity():
    grid = TimeGrid(1.0, 100)
    model = make_meanfield_ou(grid, theta=1.0, s0=0.2)
    init = gaussian_initial(0.0, 1.0)
    delta = 0.05
    a = integrate(model, init, n_particles=64, seed=3)
    b = integrate(model, shifted_initial(init, [delta]), n_particles=64, seed=3)
    c_lip = lipschitz_initial_constant(model.lipschitz, model.eta, grid.T)
    gap = s2_distance(a, b)
    assert gap <= 3.0 * c_lip * delta
    assert gap > 0.0


def test_weak_error_halves_with_dt():
    # Drift-form OU (decay in b, A = 0): the scheme has genuine O(dt) mean error.
    x0, kappa, s0 = 4.0, 1.0, 0.1
    n = 4000
    fine_steps = 400
    noise_fine = brownian_increments(71, n, fine_steps, 1, 1.0 / fine_steps)
    errors = []
    for factor in (8, 4, 2):
        steps = fine_steps // factor
        grid = TimeGrid(1.0, steps)
        model = make_ou_drift(grid, kappa=kappa, s0=s0)
        noise = refine_increments(noise_fine, factor)
        ens = integrate(
            model, constant_initial([x0]), n_particles=n, seed=71, noise=noise
        )
        errors.append(abs(ens.values[:, -1, 0].mean() - x0 * math.exp(-kappa)))
    assert errors[0] > errors[1] > errors[2]
    for coarse, fine in zip(errors, errors[1:]):
        assert 0.3 <= fine / coarse <= 0.7


def test_picard_converges_in_one_iteration_without_coupling():
    grid = TimeGrid(1.0, 50)
    model = make_ou(grid, a=-1.0, s0=0.3)  # b independent of the law
    res = integrate_picard(model, constant_initial([1.0]), n_particles=16, seed=4)
    assert res.iterations == 1
    assert res.gaps[0] == 0.0


def test_picard_matches_integrate_and_contracts():
    grid = TimeGrid(1.0, 100)
    model = make_meanfield_ou(grid, theta=1.0, s0=0.1)
    init = two_point_initial(-1.0, 1.0)
    res = integrate_picard(model, init, n_particles=32, seed=6, tol=1e-10)
    direct = integrate(model, init, n_particles=32, seed=6)
    assert s2_distance(res.ensemble, direct) <= 1e-9 + 10 * grid.dt
    gaps = res.gaps
    assert len(gaps) >= 3
    for a, b in zip(gaps[1:], gaps[2:]):
        if a > 0:
            assert b < a
    ratios = [b / a for a, b in zip(gaps[1:-1], gaps[2:]) if a > 0]
    assert all(r < 1.0 for r in ratios)


def test_picard_nonconvergence_and_window_split():
    # Lipschitz constant scaled x50: the law-map iterates grow like
    # (50 T)^k / k! and the unsplit window cannot converge in 25 passes.
    grid = TimeGrid(1.0, 200)
    model = make_meanfield_growth(grid, theta=50.0)
    init = constant_initial([1.0])
    with pytest.raises(NonConvergenceError) as exc:
        integrate_picard(model, init, n_particles=16, seed=7, max_iter=25)
    assert len(exc.value.gaps) == 25
    res = integrate_picard(
        model, init, n_particles=16, seed=7, max_iter=25, window=0.01
    )
    direct = integrate(model, init, n_particles=16, seed=7)
    assert s2_distance(res.ensemble, direct) <= 1e-8 + 10 * grid.dt


def test_picard_factorial_decay_on_growth_model():
    grid = TimeGrid(1.0, 100)
    model = make_meanfield_growth(grid, theta=1.0)
    res = integrate_picard(model, constant_initial([1.0]), n_particles=8, seed=3)
    gaps = res.gaps
    assert len(gaps) >= 5
    for a, b in zip(gaps, gaps[1:]):
        assert b < a


def test_yosida_identical_when_a_zero():
    grid = TimeGrid(1.0, 50)
    model = make_ou_drift(grid, kappa=1.0, s0=0.2)  # A = 0
    base = integrate(model, constant_initial([1.0]), n_particles=16, seed=8)
    for n in (2, 8, 32):
        yos = integrate_yosida(model, n, constant_initial([1.0]), n_particles=16, seed=8)
        assert np.array_equal(yos.values, base.values)


def test_yosida_ladder_strictly_decreasing():
    grid = TimeGrid(1.0, 200)
    model = make_ou(grid, a=-1.0, s0=0.5)
    init = constant_initial([1.0])
    base = integrate(model, init, n_particles=64, seed=9)
    dists = []
    for n in (2, 8, 32):
        yos = integrate_yosida(model, n, init, n_particles=64, seed=9)
        dists.append(s2_distance(yos, base))
    assert dists[0] > dists[1] > dists[2]


def test_yosida_rejects_small_index():
    grid = TimeGrid(1.0, 10)
    model = make_ou(grid, a=-1.0, s0=0.1)
    with pytest.raises(DomainError):
        integrate_yosida(model, -2.0, constant_initial([0.0]), n_particles=4, seed=0)


def test_s2_distance_properties():
    grid = TimeGrid(1.0, 40)
    model = make_ou(grid, a=-1.0, s0=0.5)
    a = integrate(model, constant_initial([0.0]), n_particles=8, seed=10)
    assert s2_distance(a, a) == 0.0
    shifted = integrate(
        model, constant_initial([0.0]), n_particles=8, seed=10
    )
    shifted_vals = shifted.values + 0.75
    from dataclasses import replace

    b = replace(shifted, values=shifted_vals)
    assert s2_distance(a, b) == pytest.approx(0.75, rel=1e-12)
    small = integrate(model, constant_initial([0.0]), n_particles=4, seed=10)
    with pytest.raises(ConfigurationError):
        s2_distance(a, small)


def test_flow_restart_gap_is_zero_on_builtin_models():
    grid = TimeGrid(1.0, 64)
    init = two_point_initial(-1.0, 1.0)
    for model in (
        make_frozen(grid),
        make_ou(grid, a=-1.0, s0=0.5),
        make_meanfield_ou(grid, theta=1.0, s0=0.2),
        make_ou_drift(grid, kappa=1.0, s0=0.3),
    ):
        for s in (0.0, 0.5, 1.0):
            report = flow_restart_check(
                model, init, t0=0.0, s=s, n_particles=16, seed=11
            )
            assert report["max_particle_gap"] == 0.0


def test_rectangular_noise_dimensions():
    # dK < d: only the first dK state coordinates are driven.
    grid = TimeGrid(1.0, 100)
    space = SpaceSpec(2, dK=1)

    def diffusion(t, xs, mu, u, nu):
        return np.full((xs.n, 1), 0.5)

    model = ModelSpec(
        space=space,
        grid=grid,
        A=SpectralOperator([0.0, 0.0], kind=GENERATOR),
        diffusion=diffusion,
        lipschitz=0.5,
        tag="rect",
    )
    ens = integrate(model, constant_initial([0.0, 0.0]), n_particles=64, seed=0)
    assert ens.values[:, -1, 0].std() > 0.1
    assert np.all(ens.values[:, :, 1] == 0.0)

    # dK > d: extra noise coordinates exist but are never consumed.
    space2 = SpaceSpec(1, dK=3)
    model2 = ModelSpec(
        space=space2,
        grid=grid,
        A=SpectralOperator([0.0], kind=GENERATOR),
        diffusion=lambda t, xs, mu, u, nu: np.full((xs.n, 1), 0.5),
        lipschitz=0.5,
        tag="rect2",
    )
    ens2 = integrate(model2, constant_initial([0.0]), n_particles=64, seed=0)
    assert ens2.noise.shape == (64, 100, 3)
    assert ens2.values[:, -1, 0].std() > 0.1


def test_blowup_detected_with_context():
    grid = TimeGrid(1.0, 60)
    space = SpaceSpec(1)
    lam = 5e7

    def drift(t, xs, mu, u, nu):
        return lam * xs.values_now

    model = ModelSpec(
        space=space,
        grid=grid,
        A=SpectralOperator([0.0], kind=GENERATOR),
        drift=drift,
        lipschitz=lam,
        tag="stiff",
    )
    with pytest.raises(IntegrationBlowupError) as exc, np.errstate(over="ignore"):
        integrate(model, constant_initial([1.0]), n_particles=4, seed=0)
    assert exc.value.step > 0
    assert exc.value.particle >= 0


def test_anticipative_model_rejected():
    grid = TimeGrid(1.0, 20)
    space = SpaceSpec(1)

    def drift(t, xs, mu, u, nu):
        # peeks at the raw array beyond the current node
        return xs._values[:, -1, :]

    model = ModelSpec(
        space=space,
        grid=grid,
        A=SpectralOperator([0.0], kind=GENERATOR),
        drift=drift,
        lipschitz=1.0,
        tag="cheater",
    )
    with pytest.raises(ConfigurationError):
        integrate(model, constant_initial([0.0]), n_particles=4, seed=0)


def test_wrong_lipschitz_declaration_rejected():
    grid = TimeGrid(1.0, 20)
    model = make_meanfield_ou(grid, theta=3.0)
    model.lipschitz = 0.1  # deliberately too small
    model._validated = False
    with pytest.raises(ConfigurationError):
        integrate(model, constant_initial([0.0]), n_particles=4, seed=0)


def test_ensemble_export(tmp_path):
    grid = TimeGrid(1.0, 10)
    model = make_ou(grid, a=-1.0, s0=0.5)
    ens = integrate(model, constant_initial([0.0]), n_particles=3, seed=1)
    out = tmp_path / "run"
    ens.export(str(out))
    assert sorted(os.listdir(out)) == [
        "manifest.json",
        "particle_00000.csv",
        "particle_00001.csv",
        "particle_00002.csv",
    ]
    import json

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert manifest["model_tag"] == "ou"
    assert manifest["grid"] == {"T": 1.0, "steps": 10}


@pytest.mark.slow
def test_particle_convergence_in_n():
    # W2(empirical law at N, law at 4N) shrinks as N grows (8-seed average).
    from pathmkv.measure import wasserstein2

    grid = TimeGrid(1.0, 50)
    model = make_meanfield_ou(grid, theta=1.0, s0=0.3)
    init = gaussian_initial(0.0, 1.0)
    avg = []
    for n in (250, 1000, 4000):
        dists = []
        for seed in range(8):
            small = integrate(model, init, n_particles=n, seed=seed)
            big = integrate(model, init, n_particles=4 * n, seed=1000 + seed)
            dists.append(
                wasserstein2(small.law(), big.law(), mode="sliced", projections=128, seed=seed)
            )
        avg.append(np.mean(dists))
    assert avg[0] > avg[1] > avg[2]
