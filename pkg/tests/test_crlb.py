import numpy as np
import pytest

import sensing.crlb as crlb
from experiment.harness import symbol_source
from experiment.scenario_loader import load_scenario
from sensing.crlb import (
    CoopPosFim,
    Efim2,
    PerBsFim,
    _delay_stencil,
    _richardson,
    coop_fim,
    efim_reduce,
    fim_per_bs,
    jacobian_m,
    jacobian_n,
    mu_elements,
    peb,
    peb_map,
    position_bound,
    range_angle_bounds,
)
from sensing.estimator import RoiGrid
from sensing.otfs_core import (
    SPEED_OF_LIGHT,
    ChannelOperator,
    DelayDopplerFrame,
    apply_G,
    array_response,
    build_psi_dense,
)
from sensing.scene import (
    BsSite,
    SceneConfig,
    TargetState,
    design_sector_beamformer,
    to_polar,
)
from sensing.src.exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    NuisanceDegeneracyError,
    NumericalDerivativeError,
    UnobservablePositionError,
)
from tests.conftest import TABLE_ONE, make_params


def _random_operator(rng, params):
    return ChannelOperator(
        params,
        rng.uniform(-1, 1) * params.doppler_resolution,
        rng.uniform(0.05, 0.95) * params.T,
        rng.uniform(-1.0, 1.0),
        support_halfwidth=3,
    )


def _is_psd(matrix, tolerance=1e-8) -> bool:
    eigenvalues = np.linalg.eigvalsh(matrix)
    return eigenvalues.min() >= -tolerance * np.abs(eigenvalues).max()


def _random_spd(rng, size=5):
    q, _ = np.linalg.qr(rng.standard_normal((size, size)))
    return q @ np.diag(rng.uniform(0.5, 5.0, size)) @ q.T


@pytest.fixture(scope="module")
def table_one():
    """Fixture to provide the bundled three-BS scenario."""
    return load_scenario(TABLE_ONE)


@pytest.fixture(scope="module")
def table_one_frame(table_one):
    """Fixture to provide the reference frame used for bounds."""
    params = table_one.scene.params
    return symbol_source(0, params.M, params.N)


def test_mu_elements_match_dense_oracle(small_params, small_frame):
    """Test the noise-free samples against h (b kron Psi) x."""
    op = ChannelOperator.exact(small_params, 2e4, 0.33e-6, 0.4)
    h = 0.3 - 0.2j
    psi_x = build_psi_dense(op) @ small_frame.vectorize()
    dense = h * np.kron(array_response(0.4, 2), psi_x)

    mu = mu_elements(op, h, small_frame)

    assert mu.shape == (8, 4, 2)
    flat = mu.transpose(2, 1, 0).reshape(-1)
    assert np.linalg.norm(flat - dense) < 1e-10 * np.linalg.norm(dense)
    assert mu[3, 2, 1] == pytest.approx(dense[1 * 32 + 3 + 8 * 2])


def test_fim_symmetric_and_psd(rng, small_params):
    """Test symmetry and positive semidefiniteness over random configurations."""
    for _ in range(20):
        op = _random_operator(rng, small_params)
        x = symbol_source(int(rng.integers(1 << 30)), 8, 4)
        h = 1e-6 * complex(rng.standard_normal(), rng.standard_normal())

        fim = fim_per_bs(op, h, x).matrix

        assert fim.shape == (5, 5)
        np.testing.assert_allclose(fim, fim.T, rtol=1e-10, atol=0)
        assert _is_psd(fim)


def test_fim_beta_entry_identity(small_params, small_frame):
    """Test I[beta, beta] = (2 / sigma^2) ||G x||^2."""
    op = ChannelOperator(small_params, 1e4, 0.4e-6, 0.2, support_halfwidth=4)
    fim = fim_per_bs(op, 2e-6 * np.exp(0.3j), small_frame)
    g_x = apply_G(op, small_frame)

    expected = 2.0 / small_params.noise_var * np.vdot(g_x, g_x).real
    assert abs(fim.matrix[0, 0] - expected) < 1e-10 * expected


def test_fim_scaling_laws(small_params, small_frame):
    """Test x -> 2x multiplies the FIM by 4 and sigma^2 -> k sigma^2 divides it by k."""
    op = ChannelOperator(small_params, -3e4, 0.61e-6, -0.3, support_halfwidth=3)
    h = 1e-6 * np.exp(1.1j)
    base = fim_per_bs(op, h, small_frame).matrix
    doubled = fim_per_bs(op, h, DelayDopplerFrame(2 * small_frame.symbols)).matrix
    noise_var = 3 * small_params.noise_var
    noisier = fim_per_bs(op, h, small_frame, noise_var=noise_var).matrix

    scale = np.abs(base).max()
    np.testing.assert_allclose(doubled, 4 * base, rtol=1e-7, atol=1e-9 * scale)
    np.testing.assert_allclose(noisier, base / 3, rtol=1e-12, atol=1e-15 * scale)


def test_richardson_recovers_known_derivative():
    """Test all three stencils on a smooth function with a known derivative."""
    samples = lambda delta: np.exp(1j * 3.0 * (0.7 + delta))  # noqa: E731
    expected = 3.0j * np.exp(1j * 2.1)

    for stencil in ("central", "forward", "backward"):
        derivative, gap = _richardson(samples, 1e-4, stencil)
        assert abs(derivative - expected) < 1e-8
        assert gap < 1e-4


def test_delay_stencil_stays_inside_sample_cell(small_params):
    """Test the stencil choice near both edges of a pulse-sample cell."""
    spacing = small_params.T / small_params.M
    step = 1e-4 * small_params.delay_resolution

    def stencil(tau):
        return _delay_stencil(ChannelOperator(small_params, 0.0, tau), step)

    assert stencil(2.5 * spacing) == "central"
    assert stencil(2 * spacing) == "forward"
    assert stencil(3 * spacing - 0.5 * step) == "backward"


def test_efim_block_diagonal_and_schur_property(rng):
    """Test EFIM = C when B = 0 and C - EFIM >= 0 in general."""
    matrix = _random_spd(rng)
    matrix[:3, 3:] = 0.0
    matrix[3:, :3] = 0.0
    matrix += np.diag([1.0] * 5)
    reduced = efim_reduce(PerBsFim(matrix)).matrix
    np.testing.assert_allclose(reduced, matrix[3:, 3:], atol=1e-12)

    for _ in range(20):
        fim = PerBsFim(_random_spd(rng))
        efim = efim_reduce(fim)
        assert _is_psd(fim.C - efim.matrix)


def test_efim_matches_direct_block_arithmetic(rng):
    """Test the Schur complement against explicit block algebra."""
    matrix = _random_spd(rng)
    a, b, c = matrix[:3, :3], matrix[:3, 3:], matrix[3:, 3:]
    expected = c - b.T @ np.linalg.solve(a, b)

    efim = efim_reduce(PerBsFim(matrix))

    assert np.abs(efim.matrix - expected).max() < 1e-12 * np.abs(expected).max()
    assert isinstance(efim, Efim2) and efim.condition >= 1.0


def test_efim_rejects_singular_nuisance_block(rng):
    """Test the nuisance-degeneracy failure."""
    matrix = _random_spd(rng)
    matrix[0, :] = 0.0
    matrix[:, 0] = 0.0
    with pytest.raises(NuisanceDegeneracyError):
        efim_reduce(PerBsFim(matrix))


def test_jacobians():
    """Test closed-form and finite-difference Jacobians of the polar map."""
    j_m = jacobian_m((3.0, 4.0))
    np.testing.assert_allclose(
        j_m,
        [[6 / (5 * SPEED_OF_LIGHT), 8 / (5 * SPEED_OF_LIGHT)], [-4 / 25, 3 / 25]],
        rtol=1e-14,
    )

    step = 1e-6
    for column, delta in enumerate(([step, 0.0], [0.0, step])):
        plus = np.array(to_polar(np.add((3.0, 4.0), delta)))
        minus = np.array(to_polar(np.subtract((3.0, 4.0), delta)))
        difference = (plus - minus) / (2 * step)
        np.testing.assert_allclose(difference, j_m[:, column], rtol=1e-8)

    np.testing.assert_allclose(jacobian_n(0.0), np.eye(2))
    assert np.linalg.det(jacobian_n(1.234)) == pytest.approx(1.0)
    with pytest.raises(DegenerateGeometryError):
        jacobian_m((0.0, 0.0))


def test_coop_fim_single_bs_and_subset_monotonicity(rng):
    """Test the one-BS identity case and Loewner growth when BSs are added."""
    p = (30.0, 12.0)
    efim = Efim2(_random_spd(rng, 2) * 1e20, 1.0)
    origin = BsSite(1, (0.0, 0.0), 0.0)

    single = coop_fim([efim], [origin], p).matrix
    j_m = jacobian_m(p)
    np.testing.assert_allclose(
        single, j_m.T @ efim.matrix @ j_m, rtol=1e-12, atol=1e-12 * np.abs(single).max()
    )

    sites = [
        origin,
        BsSite(2, (60.0, 0.0), np.pi),
        BsSite(3, (30.0, 50.0), 3 * np.pi / 2),
    ]
    efims = [Efim2(_random_spd(rng, 2) * 1e20, 1.0) for _ in sites]
    full = coop_fim(efims, sites, p).matrix
    partial = coop_fim(efims[:2], sites[:2], p).matrix
    assert _is_psd(full - partial)

    with pytest.raises(DegenerateGeometryError):
        coop_fim([efim], [BsSite(1, (40.0, 0.0), 0.0)], p)


def test_peb_closed_form_and_singular_fim():
    """Test PEB = sqrt(2 / a) for diag(a, a) and the unobservable failure."""
    assert peb(CoopPosFim(np.diag([8.0, 8.0]))) == pytest.approx(0.5)
    with pytest.raises(UnobservablePositionError):
        peb(CoopPosFim(np.array([[1.0, 1.0], [1.0, 1.0]])))


def test_range_angle_bounds_efim_and_full_agree(small_params, small_frame):
    """Test that the EFIM inverse and the full-FIM inverse give the same bounds."""
    op = ChannelOperator(small_params, 4e4, 0.52e-6, 0.25, support_halfwidth=3)
    bounds = range_angle_bounds(fim_per_bs(op, 3e-6 * np.exp(0.4j), small_frame))

    assert bounds.efim_range_m == pytest.approx(bounds.full_range_m, rel=1e-6)
    assert bounds.efim_angle_rad == pytest.approx(bounds.full_angle_rad, rel=1e-6)
    assert bounds.efim_range_m > 0 and bounds.efim_angle_rad > 0


def test_peb_monotone_in_cooperating_bss(table_one, table_one_frame):
    """Test PEB(3 BS) <= PEB(2 BS) <= PEB(1 BS) at 100 random RoI points."""
    scene = table_one.scene
    roi = scene.roi
    rng = np.random.default_rng(5)

    for _ in range(100):
        point = (rng.uniform(roi.x_min, roi.x_max), rng.uniform(roi.y_min, roi.y_max))
        moved = scene.with_target(scene.target.moved_to(point))
        sites = moved.subset([1, 2, 3])
        efims = position_bound(moved, sites, table_one_frame).efims
        pebs = [peb(coop_fim(efims[:n], sites[:n], point)) for n in (1, 2, 3)]
        assert pebs[0] >= pebs[1] >= pebs[2]


def test_single_bs_peb_grows_along_diagonal(table_one, table_one_frame):
    """Test that the BS 1 bound increases strictly with range along its boresight."""
    scene = table_one.scene
    pebs = []
    for d in (20.0, 30.0, 40.0, 48.3, 60.0, 70.0):
        moved = scene.with_target(scene.target.moved_to((d, d)))
        pebs.append(position_bound(moved, moved.subset([1]), table_one_frame).peb_m)

    assert all(a < b for a, b in zip(pebs, pebs[1:]))


def test_three_bs_bound_at_scenario_target(table_one, table_one_frame):
    """Test the full bound chain at the scenario target and its reference bounds."""
    scene = table_one.scene
    bound = position_bound(scene, scene.subset([1, 2, 3]), table_one_frame)

    assert len(bound.per_bs) == len(bound.efims) == 3
    assert 0.02 < bound.peb_m < 0.5
    reference = bound.reference
    assert reference.efim_range_m == pytest.approx(reference.full_range_m, rel=1e-6)
    two = position_bound(scene, scene.subset([1, 2]), table_one_frame)
    assert np.trace(np.linalg.inv(bound.position_fim.matrix)) < np.trace(
        np.linalg.inv(two.position_fim.matrix)
    )


def test_peb_map_excludes_pixels_behind_arrays():
    """Test NaN exclusion and subset ordering on a small PEB raster."""
    params = make_params(M=16, N=8, n_tx=8, n_rx=4)
    beamformer = design_sector_beamformer(params, (0.0, np.deg2rad(60.0)))
    sites = (BsSite(1, (0.0, 0.0), np.pi / 4), BsSite(2, (60.0, 0.0), 3 * np.pi / 4))
    scene = SceneConfig(params, sites, TargetState((30.0, 30.0)), beamformer)
    frame = symbol_source(1, params.M, params.N)

    straddling = RoiGrid(-2.0, 2.0, 0.5, 1.5, 1.0, 0.5)
    single = peb_map(straddling, sites[:1], scene, frame)
    assert single.excluded.any() and not single.excluded.all()
    assert single.bs_indices == (1,)

    roi = RoiGrid(28.0, 32.0, 28.0, 32.0, 2.0, 2.0)
    one = peb_map(roi, sites[:1], scene, frame, threads=2)
    both = peb_map(roi, sites, scene, frame)
    assert not one.excluded.any()
    assert np.all(both.values <= one.values)
    serial = peb_map(roi, sites[:1], scene, frame)
    np.testing.assert_array_equal(one.values, serial.values)


@pytest.mark.parametrize(
    "error",
    [
        NuisanceDegeneracyError("Nuisance block is singular"),
        NumericalDerivativeError("Step halving did not converge"),
    ],
)
def test_peb_map_marks_numerical_failures(mocker, error):
    """Test that a numerical failure at one pixel gives NaN there and a log line."""
    params = make_params(M=16, N=8, n_tx=8, n_rx=4)
    beamformer = design_sector_beamformer(params, (0.0, np.deg2rad(60.0)))
    sites = (BsSite(1, (0.0, 0.0), np.pi / 4),)
    scene = SceneConfig(params, sites, TargetState((30.0, 30.0)), beamformer)
    frame = symbol_source(1, params.M, params.N)
    roi = RoiGrid(28.0, 32.0, 28.0, 32.0, 2.0, 2.0)
    real_bound = crlb.position_bound

    def fail_at_centre(moved, *args):
        if np.allclose(moved.target.position, (30.0, 30.0)):
            raise error
        return real_bound(moved, *args)

    mocker.patch("sensing.crlb.position_bound", side_effect=fail_at_centre)
    warning = mocker.patch.object(crlb.logger, "warning")

    bound_map = peb_map(roi, sites, scene, frame, threads=2)

    assert np.isnan(bound_map.values[1, 1])
    assert np.isfinite(bound_map.values).sum() == roi.size - 1
    warning.assert_any_call("%d PEB pixels failed numerically", 1)


def test_peb_map_propagates_configuration_errors(mocker):
    """Test that a configuration error is not mistaken for a pixel failure."""
    params = make_params(M=16, N=8, n_tx=8, n_rx=4)
    beamformer = design_sector_beamformer(params, (0.0, np.deg2rad(60.0)))
    sites = (BsSite(1, (0.0, 0.0), np.pi / 4),)
    scene = SceneConfig(params, sites, TargetState((30.0, 30.0)), beamformer)
    mocker.patch(
        "sensing.crlb.position_bound",
        side_effect=ConfigurationError("Frame shape does not match M x N"),
    )

    with pytest.raises(ConfigurationError):
        peb_map(
            RoiGrid(28.0, 32.0, 28.0, 32.0, 2.0, 2.0),
            sites,
            scene,
            symbol_source(1, params.M, params.N),
        )
