import numpy as np
import pytest
import torch

from refboost.closedloop import rollout
from refboost.plant import (
    DisturbanceSpec,
    MismatchSpec,
    Obstacles,
    Plant,
    RobotParams,
    base_force,
    corridor_layout,
    get_layout,
    make_reference_signal,
    mountain_range_layout,
    sample_disturbance,
    sample_reference,
)
from refboost.ren import DTYPE


def T(x):
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def ref_tensor(targets, horizon, params, batch=1):
    return T(make_reference_signal(targets, horizon, params))[None].repeat(batch, 1, 1)


def test_equilibrium_is_a_fixed_point():
    params = RobotParams()
    plant = Plant(params)
    targets = np.array([[1.0, -0.5], [-2.0, 0.25]])
    x_ref = T(make_reference_signal(targets, 1, params))[:1]
    eta = plant.equilibrium(x_ref[0:1])
    nxt = plant.step(eta, torch.zeros(1, params.ctrl_dim, dtype=DTYPE), x_ref[0:1])
    assert torch.equal(nxt, eta)


def test_base_controller_tracks_constant_reference():
    """The gain defaults are pinned by this closed-loop oracle."""
    params = RobotParams()
    plant = Plant(params)
    targets = np.array([[-2.0, 2.0], [2.0, 2.0]])
    horizon = 400
    w = torch.zeros(1, horizon + 1, params.aug_dim, dtype=DTYPE)
    starts = np.zeros((2, 2, 2))
    starts[:, 0, :] = [[-2.0, -2.0], [2.0, -2.0]]
    w[0, 0, : params.plant_dim] = T(starts.reshape(-1))
    x_ref = ref_tensor(targets, horizon, params)
    res = rollout(plant, None, w, x_ref)
    final = plant.positions(res.eta)[0, -1].numpy()
    assert np.linalg.norm(final - targets, axis=-1).max() < 1e-3


def test_base_force_equilibrium_and_linearity(rng):
    params = RobotParams(n_robots=1)
    p = T(rng.standard_normal((1, 1, 2)))
    q = torch.zeros(1, 1, 2, dtype=DTYPE)
    v = torch.zeros(1, 1, 2, dtype=DTYPE)
    # at p = target + offset with zero rates, the force vanishes
    off = T(rng.standard_normal((1, 1, 2)))
    f = base_force(params, p, q, v, p - off, off)
    assert float(f.abs().max()) == 0.0
    # doubling the offset doubles the proportional contribution
    tgt = T(rng.standard_normal((1, 1, 2)))
    f0 = base_force(params, p, q, v, tgt, torch.zeros_like(off))
    f1 = base_force(params, p, q, v, tgt, off)
    f2 = base_force(params, p, q, v, tgt, 2 * off)
    assert torch.allclose(f2 - f0, 2 * (f1 - f0), atol=1e-12)


def test_free_decay_dissipates_kinetic_energy(rng):
    """With the controller off, drag strictly dissipates kinetic energy."""
    params = RobotParams(kp=0.0, kd=0.0, ki=0.0)
    plant = Plant(params)
    eta = torch.zeros(1, params.aug_dim, dtype=DTYPE)
    p, q, v = plant.split(eta)
    q = q + T(rng.standard_normal((1, 2, 2)) * 3.0)
    eta = plant.pack(p, q, v)
    x_ref = ref_tensor(np.zeros((2, 2)), 1, params)[:, 0]
    energies = []
    for _ in range(200):
        _, q_now, _ = plant.split(eta)
        energies.append(0.5 * params.mass * float((q_now**2).sum()))
        eta = plant.step(eta, torch.zeros(1, params.ctrl_dim, dtype=DTYPE), x_ref)
    diffs = np.diff(energies)
    assert (diffs < 0).all()
    assert energies[-1] < 1e-6 * energies[0]


def test_time_zero_map_is_identity_regardless_of_controller(rng, small_boost):
    """x_0 = w_{x,0} and v_0 = 0 no matter which controller is attached."""
    params = RobotParams()
    plant = Plant(params, corridor_layout())
    w = torch.zeros(1, 3, params.aug_dim, dtype=DTYPE)
    w[0, 0, : params.plant_dim] = T(rng.standard_normal(params.plant_dim))
    x_ref = ref_tensor(np.ones((2, 2)), 2, params)
    for controller in (None, small_boost.session(batch=1)):
        res = rollout(plant, controller, w, x_ref)
        assert torch.equal(res.eta[:, 0, : params.plant_dim], w[:, 0, : params.plant_dim])
        assert float(res.eta[:, 0, params.plant_dim :].abs().max()) == 0.0


def test_plant_is_strictly_causal(rng):
    """eta_t does not depend on u_t (inputs act with one step of delay)."""
    params = RobotParams()
    plant = Plant(params, corridor_layout())
    horizon = 20
    w = T(sample_disturbance(DisturbanceSpec(), corridor_layout(), params, horizon,
                             np.random.default_rng(0)))[None]
    x_ref = ref_tensor(np.array([[0.0, 2.0], [1.5, 2.0]]), horizon, params)
    t_split = 7
    u_a = torch.zeros(1, horizon + 1, params.ctrl_dim, dtype=DTYPE)
    u_b = u_a.clone()
    u_b[0, t_split:] = T(rng.standard_normal((horizon + 1 - t_split, params.ctrl_dim)))
    from refboost.closedloop import ReplaySession

    res_a = rollout(plant, ReplaySession(u_a), w, x_ref)
    res_b = rollout(plant, ReplaySession(u_b), w, x_ref)
    assert torch.equal(res_a.eta[:, : t_split + 1], res_b.eta[:, : t_split + 1])
    assert not torch.equal(res_a.eta[:, t_split + 1], res_b.eta[:, t_split + 1])


def test_reference_governor_wiring_is_target_offset(rng):
    """f(eta, u, x_ref) == f(eta, 0, x_ref + embed(u)): the boost output is
    literally an offset on the tracked target."""
    params = RobotParams()
    plant = Plant(params)
    eta = T(rng.standard_normal((3, params.aug_dim)))
    u = T(rng.standard_normal((3, params.ctrl_dim)))
    x_ref = T(rng.standard_normal((3, params.plant_dim)))
    shifted = x_ref.reshape(3, 2, 2, 2).clone()
    shifted[:, :, 0, :] += u.reshape(3, 2, 2)
    lhs = plant.step(eta, u, x_ref)
    rhs = plant.step(eta, torch.zeros_like(u), shifted.reshape(3, -1))
    assert torch.equal(lhs, rhs)


def test_disturbance_reconstruction_identity_under_perfect_model(rng, small_boost):
    params = RobotParams()
    layout = corridor_layout()
    plant = Plant(params, layout)
    horizon = 60
    spec = DisturbanceSpec(sigma=0.5, process_noise=0.05, process_cutoff=20)
    for k in range(10):
        w = T(sample_disturbance(spec, layout, params, horizon, rng))[None]
        x_ref = ref_tensor(sample_reference(layout, rng), horizon, params)
        res = rollout(plant, small_boost.session(batch=1), w, x_ref)
        assert float((res.w_hat - res.w).abs().max()) <= 1e-12
        assert torch.equal(res.w_hat[:, 0], res.eta[:, 0])  # w_hat_0 = eta_0


def test_mismatch_none_is_bit_identical(rng):
    params = RobotParams()
    layout = corridor_layout()
    w = T(sample_disturbance(DisturbanceSpec(), layout, params, 40, rng))[None]
    x_ref = ref_tensor(np.array([[0.0, 2.0], [1.0, 2.0]]), 40, params)
    res_a = rollout(Plant(params, layout), None, w, x_ref)
    res_b = rollout(Plant(params, layout, MismatchSpec(kind="none")), None, w, x_ref)
    assert torch.equal(res_a.eta, res_b.eta)


def test_mismatch_gain_bound_zero_and_estimated(rng):
    params = RobotParams()
    assert Plant(params, mismatch=MismatchSpec(kind="bounded_op", c=0.0)).mismatch_gain_bound == 0.0

    c = 0.1
    plant = Plant(params, mismatch=MismatchSpec(kind="bounded_op", c=c, seed=3))

    class DeltaOp:
        """The mismatch as a memoryless causal operator on (x - x_ref, u)."""

        input_dim = params.plant_dim + params.ctrl_dim
        output_dim = params.plant_dim

        def reset(self):
            pass

        def step(self, z):
            z = T(z)[None]
            x = z[:, : params.plant_dim]
            u = z[:, params.plant_dim :]
            return plant._mismatch.delta(x, u, torch.zeros_like(x), params)[0].numpy()

    from refboost.robust import estimate_incremental_gain

    est = estimate_incremental_gain(DeltaOp(), trials=20, horizon=20, rng=rng)
    assert 0 < est <= c + 1e-12


def test_mismatch_reconstruction_decomposition(rng):
    """Under mismatch, w_hat equals the injected error along the realized
    trajectory plus the true disturbance."""
    params = RobotParams()
    layout = corridor_layout()
    plant = Plant(params, layout, MismatchSpec(kind="bounded_op", c=0.05, seed=9))
    horizon = 50
    w = T(sample_disturbance(DisturbanceSpec(sigma=0.3), layout, params, horizon, rng))[None]
    x_ref = ref_tensor(np.array([[-1.0, 2.0], [1.0, 2.0]]), horizon, params)
    from refboost.closedloop import ReplaySession

    u = T(rng.standard_normal((1, horizon + 1, params.ctrl_dim)) * 0.2)
    res = rollout(plant, ReplaySession(u), w, x_ref)
    for t in range(1, horizon + 1):
        delta = plant.mismatch_delta(res.eta[:, t - 1], res.u[:, t - 1], x_ref[:, t - 1])
        expected = res.w[:, t].clone()
        expected[:, : params.plant_dim] += delta
        assert float((res.w_hat[:, t] - expected).abs().max()) < 1e-12


def test_drag_error_mismatch_matches_perturbed_params(rng):
    """The drag-error delta reproduces a plant with scaled drag exactly."""
    params = RobotParams()
    perturbed = RobotParams(drag_lin=1.2 * params.drag_lin, drag_quad=0.7 * params.drag_quad)
    plant = Plant(params, mismatch=MismatchSpec(kind="drag_error",
                                                drag_lin_error=0.2, drag_quad_error=-0.3))
    ref_plant = Plant(perturbed)
    eta = T(rng.standard_normal((4, params.aug_dim)))
    u = T(rng.standard_normal((4, params.ctrl_dim)))
    x_ref = T(rng.standard_normal((4, params.plant_dim)))
    assert torch.allclose(plant.step_true(eta, u, x_ref), ref_plant.step(eta, u, x_ref),
                          atol=1e-12)


def test_sample_disturbance_deterministic_and_zero_sigma():
    params = RobotParams()
    layout = corridor_layout()
    spec = DisturbanceSpec(sigma=0.0)
    w = sample_disturbance(spec, layout, params, 10, np.random.default_rng(0))
    expected = np.zeros((2, 2, 2))
    expected[:, 0, :] = layout.starts
    assert np.array_equal(w[0, : params.plant_dim], expected.reshape(-1))
    assert np.array_equal(w[1:], np.zeros_like(w[1:]))


def test_sample_disturbance_statistics_and_structure(rng):
    params = RobotParams()
    layout = corridor_layout()
    spec = DisturbanceSpec(sigma=0.5, reject_inside_obstacles=False)
    draws = np.stack(
        [sample_disturbance(spec, layout, params, 1, rng)[0] for _ in range(10_000)]
    )
    pos = draws[:, : params.plant_dim].reshape(-1, 2, 2, 2)[:, :, 0, :]
    centered = pos - layout.starts
    assert np.std(centered) == pytest.approx(0.5, rel=0.05)
    # velocity entries and the controller block never carry noise
    vel = draws[:, : params.plant_dim].reshape(-1, 2, 2, 2)[:, :, 1, :]
    assert np.abs(vel).max() == 0.0
    assert np.abs(draws[:, params.plant_dim :]).max() == 0.0


def test_sample_disturbance_rejects_starts_inside_obstacles(rng):
    params = RobotParams()
    layout = corridor_layout()
    spec = DisturbanceSpec(sigma=1.5, reject_inside_obstacles=True)
    for _ in range(200):
        w = sample_disturbance(spec, layout, params, 1, rng)
        pos = w[0, : params.plant_dim].reshape(2, 2, 2)[:, 0, :]
        assert not layout.obstacles.contains(pos).any()


def test_sample_reference_constraints(rng):
    layout = corridor_layout()
    min_sep = np.inf
    for _ in range(10_000):
        pts = sample_reference(layout, rng)
        assert np.all(pts[:, 1] == layout.ref_y)
        assert np.all((-2.0 <= pts[:, 0]) & (pts[:, 0] <= 2.0))
        min_sep = min(min_sep, np.linalg.norm(pts[0] - pts[1]))
    assert min_sep >= layout.min_separation
    # the benchmark pair itself satisfies the constraints
    bench = layout.benchmark_targets
    assert np.linalg.norm(bench[0] - bench[1]) >= 1.0
    assert np.all(bench[:, 1] == 2.0) and np.all(np.abs(bench[:, 0]) <= 2.0)


def test_layouts_well_formed():
    for layout in (corridor_layout(), mountain_range_layout()):
        assert len(layout.obstacles) >= 2
        assert not layout.obstacles.contains(layout.starts).any()
        assert not layout.obstacles.contains(layout.benchmark_targets).any()
    assert len(mountain_range_layout().obstacles) == 6
    with pytest.raises(ValueError):
        get_layout("nonexistent")
    with pytest.raises(ValueError):
        Obstacles(np.zeros((1, 2)), np.array([0.0]), np.ones(1))


def test_make_reference_signal_shape_and_content():
    params = RobotParams()
    targets = np.array([[1.0, 2.0], [-1.0, 2.0]])
    sig = make_reference_signal(targets, 5, params)
    assert sig.shape == (6, params.plant_dim)
    row = sig[0].reshape(2, 2, 2)
    assert np.array_equal(row[:, 0, :], targets)
    assert np.abs(row[:, 1, :]).max() == 0.0
    with pytest.raises(ValueError):
        make_reference_signal(np.zeros((3, 2)), 5, params)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        RobotParams(mass=0.0)
    with pytest.raises(ValueError):
        RobotParams(drag_lin=-1.0)
    with pytest.raises(ValueError):
        MismatchSpec(kind="other")
    with pytest.raises(ValueError):
        MismatchSpec(kind="bounded_op", c=-0.1)
