import numpy as np
import pytest

from cagesplat.scene import init_proxy_from_mesh, make_box_mesh
from cagesplat.sensor import (
    CalibrationTable,
    DeformationState,
    IIRLowpass,
    SensorError,
    SensorFrame,
    calibrate,
    calibrate_inverse,
    filter_chain,
    generate_dataset,
    load_sequence,
    load_sequence_scene,
    lowpass_iir,
    median3x3,
    oracle_deform,
    save_sequence,
    simulate_resistance,
    tile_frames,
)


DEFAULT_R0 = 1000.0


@pytest.fixture(scope="module")
def rod():
    mesh = make_box_mesh((0.1, 0.01, 0.01), center=(0.05, 0.0, 0.0))
    return init_proxy_from_mesh(mesh, 3000, seed=1)


# -- deformation oracle -------------------------------------------------------


def test_oracle_zero_magnitude(rod):
    st = DeformationState("bend", 0.0, 0.3, 0.0)
    assert np.abs(oracle_deform(rod, st)).max() == 0.0
    st = DeformationState("twist", 0.0, 0.3, 0.0)
    assert np.abs(oracle_deform(rod, st)).max() == 0.0


def test_oracle_bend_tip_displacement(rod):
    # bend of pi/2 about the rod's base: tip moves by the closed-form arc
    # endpoint offset L * ||(sin t / t - 1, (1 - cos t) / t)||
    theta = np.pi / 2
    st = DeformationState("bend", theta, -np.pi / 2, 0.5)   # bend along +x
    disp = oracle_deform(rod, st)
    tip = np.argmax(rod.centers[:, 0])
    span = rod.centers[:, 0].max() - rod.centers[:, 0].min()
    s = rod.centers[tip, 0] - rod.centers[:, 0].min()
    expected = s * np.hypot(np.sin(theta * s / span) / (theta * s / span) - 1.0,
                            (1 - np.cos(theta * s / span)) / (theta * s / span))
    got = np.linalg.norm(disp[tip])
    assert abs(got - expected) < 1e-9


def _ring_sections():
    """Exact circular cross-sections about the x axis, several stations."""
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts = []
    for x in np.linspace(0.0, 0.1, 9):
        for r in (0.004, 0.008):
            pts.append(np.stack([np.full_like(ang, x),
                                 r * np.cos(ang), r * np.sin(ang)], axis=1))
    pts = np.concatenate(pts)
    from cagesplat.scene import GaussianScene
    covs = np.zeros((len(pts), 6))
    covs[:, [0, 3, 5]] = 1e-6
    return GaussianScene(centers=pts, covs_packed=covs,
                         opacity=np.full(len(pts), 0.9),
                         color=np.full((len(pts), 3), 0.5))


def test_oracle_twist_centroids_fixed():
    scene = _ring_sections()
    st = DeformationState("twist", np.radians(40), 0.0, 0.5)
    moved = scene.centers + oracle_deform(scene, st)
    s = scene.centers[:, 0]
    for x in np.unique(s):
        m = s == x
        assert np.abs(moved[m].mean(axis=0) - scene.centers[m].mean(axis=0)).max() < 1e-9


def test_oracle_twist_preserves_section_distances():
    scene = _ring_sections()
    st = DeformationState("twist", np.radians(55), 0.0, 0.5)
    moved = scene.centers + oracle_deform(scene, st)
    s = scene.centers[:, 0]
    x = np.unique(s)[4]
    m = s == x
    d0 = np.linalg.norm(scene.centers[m][:, None] - scene.centers[m][None], axis=2)
    d1 = np.linalg.norm(moved[m][:, None] - moved[m][None], axis=2)
    assert np.abs(d0 - d1).max() < 1e-9


def test_oracle_c1_in_magnitude(rod):
    # displacement is continuous through magnitude 0
    eps = 1e-7
    st_p = DeformationState("bend", eps, -np.pi / 2, 0.5)
    st_m = DeformationState("bend", -eps, -np.pi / 2, 0.5)
    dp = oracle_deform(rod, st_p)
    dm = oracle_deform(rod, st_m)
    assert np.abs(dp + dm).max() < 1e-8   # odd to first order, both tiny
    assert np.abs(dp).max() < 1e-6


# -- resistance simulation ----------------------------------------------------


def test_simulate_rest_equals_baseline():
    st = DeformationState("bend", 0.0, 0.0, 0.0)
    frame = simulate_resistance(st, 0.0, seed=0)
    assert np.array_equal(frame.grid, CalibrationTable.default().r0)


def test_simulate_bend_axis_profile():
    # bend about the row axis: constant along the axis direction, monotone
    # across it
    st = DeformationState("bend", np.radians(60), 0.0, 0.5)
    frame = simulate_resistance(st, 0.0, seed=0)
    assert np.allclose(frame.grid, frame.grid[:, :1])   # rows differ, cols equal
    col = frame.grid[:, 0]
    diffs = np.diff(col)
    assert (diffs >= -1e-9).all() or (diffs <= 1e-9).all()


def test_simulate_monotone_in_magnitude():
    prev = -1.0
    for deg in (0, 15, 30, 45, 60, 90):
        st = DeformationState("bend", np.radians(deg), 0.3, 0.5)
        frame = simulate_resistance(st, 0.0, seed=0)
        rel = np.abs(frame.grid / DEFAULT_R0 - 1.0).max()
        assert rel >= prev - 1e-12
        prev = rel


def test_simulate_determinism():
    st = DeformationState("twist", 0.4, 0.2, 0.5)
    a = simulate_resistance(st, 3.0, seed=42)
    b = simulate_resistance(st, 3.0, seed=42)
    c = simulate_resistance(st, 3.0, seed=43)
    assert np.array_equal(a.grid, b.grid)
    assert not np.array_equal(a.grid, c.grid)


def test_twist_signature_antisymmetric():
    st = DeformationState("twist", np.radians(45), 0.0, 0.5)
    frame = simulate_resistance(st, 0.0, seed=0)
    rel = frame.grid / DEFAULT_R0 - 1.0
    assert np.allclose(rel, -rel[::-1, :], atol=1e-12)


# -- calibration ---------------------------------------------------------------


def test_calibrate_baseline_zero():
    table = CalibrationTable.default()
    raw = SensorFrame(grid=table.r0.copy(), timestamp=0.0)
    out = calibrate(raw, table)
    assert out.units == "relative"
    assert np.abs(out.grid).max() == 0.0


def test_calibrate_affine_single_channel():
    table = CalibrationTable.default()
    grid = table.r0.copy()
    grid[3, 4] *= 2.0
    out = calibrate(SensorFrame(grid=grid, timestamp=0.0), table)
    assert out.grid[3, 4] == pytest.approx(1.0)
    out.grid[3, 4] = 0.0
    assert np.abs(out.grid).max() == 0.0


def test_calibrate_roundtrip():
    rng = np.random.default_rng(0)
    table = CalibrationTable(r0=np.full((10, 10), 800.0),
                             gain=rng.uniform(0.5, 2.0, (10, 10)),
                             offset=rng.uniform(-50, 50, (10, 10)))
    raw = SensorFrame(grid=rng.uniform(500, 1500, (10, 10)), timestamp=0.0)
    rel = calibrate(raw, table)
    back = calibrate_inverse(rel, table)
    assert np.abs(back.grid - raw.grid).max() < 1e-6


def test_calibrate_dim_mismatch():
    with pytest.raises(SensorError):
        calibrate(SensorFrame(grid=np.ones((10, 20)), timestamp=0.0),
                  CalibrationTable.default((10, 10)))


# -- filters --------------------------------------------------------------------


def test_iir_step_coefficient():
    # first output of a unit step equals a = 1 - exp(-2 pi fc / fs)
    frames = [SensorFrame(grid=np.ones((10, 10)), timestamp=t / 250.0,
                          units="relative") for t in range(3)]
    out = list(lowpass_iir(frames, 10.0, 250.0))
    a = 1.0 - np.exp(-2.0 * np.pi * 10.0 / 250.0)
    assert abs(out[0].grid[0, 0] - a) < 1e-12
    assert abs(out[1].grid[0, 0] - (a + (1 - a) * a)) < 1e-12


def test_iir_dc_convergence():
    frames = [SensorFrame(grid=np.full((10, 10), 0.7), timestamp=t / 250.0,
                          units="relative") for t in range(300)]
    out = list(lowpass_iir(frames, 10.0, 250.0))
    assert abs(out[-1].grid[0, 0] - 0.7) < 1e-10


def test_iir_sine_attenuation():
    fs, fc = 250.0, 10.0
    t = np.arange(1500) / fs
    x = np.sin(2 * np.pi * 5 * fc * t)         # 5x cutoff
    frames = [SensorFrame(grid=np.full((10, 10), v), timestamp=ts, units="relative")
              for v, ts in zip(x, t)]
    y = np.array([f.grid[0, 0] for f in lowpass_iir(frames, fc, fs)])
    warm = len(y) // 3
    assert np.std(y[warm:]) < 0.3 * np.std(x[warm:])


def test_iir_rejects_nyquist():
    with pytest.raises(SensorError):
        IIRLowpass(125.0, 250.0)
    with pytest.raises(SensorError):
        IIRLowpass(200.0, 250.0)


def test_median_constant_and_spike():
    const = SensorFrame(grid=np.full((10, 10), 3.3), timestamp=0.0)
    assert np.array_equal(median3x3(const).grid, const.grid)
    spiked = SensorFrame(grid=np.full((10, 10), 1.0), timestamp=0.0)
    spiked.grid[5, 5] = 99.0
    out = median3x3(spiked)
    assert out.grid[5, 5] == 1.0


def test_median_matches_bruteforce():
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(10, 10))
    out = median3x3(SensorFrame(grid=grid, timestamp=0.0)).grid
    padded = np.pad(grid, 1, mode="edge")
    for i in range(10):
        for j in range(10):
            window = padded[i:i + 3, j:j + 3].ravel()
            assert out[i, j] == np.sort(window)[4]


def test_median_too_small():
    with pytest.raises(SensorError):
        median3x3(SensorFrame(grid=np.ones((2, 5)), timestamp=0.0))


def test_filter_chain_dc_idempotent():
    frames = [SensorFrame(grid=np.full((10, 10), 0.25), timestamp=t / 250.0,
                          units="relative") for t in range(400)]
    once = list(filter_chain(frames, 10.0, 250.0))
    twice = list(filter_chain(once, 10.0, 250.0))
    assert np.abs(twice[-1].grid - once[-1].grid).max() < 1e-9


# -- tiling ---------------------------------------------------------------------


def test_tile_identity_and_concat():
    a = SensorFrame(grid=np.arange(100, dtype=float).reshape(10, 10) + 1,
                    timestamp=0.0)
    out = tile_frames([a], (1, 1))
    assert np.array_equal(out.grid, a.grid)
    b = SensorFrame(grid=a.grid * 2, timestamp=0.001)
    wide = tile_frames([a, b], (1, 2))
    assert wide.grid.shape == (10, 20)
    assert np.array_equal(wide.grid[:, :10], a.grid)
    assert np.array_equal(wide.grid[:, 10:], b.grid)
    assert wide.timestamp == b.timestamp


def test_tile_skew_rejected():
    a = SensorFrame(grid=np.ones((10, 10)), timestamp=0.0)
    b = SensorFrame(grid=np.ones((10, 10)), timestamp=0.05)
    with pytest.raises(SensorError):
        tile_frames([a, b], (1, 2), sample_period=1.0 / 250.0)
    with pytest.raises(SensorError):
        tile_frames([a], (1, 2))


# -- dataset generation -----------------------------------------------------


def test_dataset_counts(rod):
    seqs = generate_dataset(rod, "bend", 1, 20, 8, seed=0,
                            magnitude_max=np.pi / 3)
    assert len(seqs) == 1
    assert len(seqs[0]) == 20 + 19 * 8


def test_dataset_first_frame_rest(rod):
    seqs = generate_dataset(rod, "bend", 1, 4, 2, seed=0, magnitude_max=1.0)
    assert seqs[0].states[0].magnitude == 0.0
    assert np.abs(seqs[0].gt[0]).max() == 0.0


def test_dataset_seeds_change_noise_not_states(rod):
    a = generate_dataset(rod, "twist", 1, 3, 1, seed=1, magnitude_max=0.5,
                         noise_std=2.0)[0]
    b = generate_dataset(rod, "twist", 1, 3, 1, seed=2, magnitude_max=0.5,
                         noise_std=2.0)[0]
    assert all(sa.magnitude == sb.magnitude for sa, sb in zip(a.states, b.states))
    assert np.array_equal(a.gt, b.gt)
    assert not np.array_equal(a.frames[1].grid, b.frames[1].grid)


def test_dataset_timestamps_regular(rod):
    seq = generate_dataset(rod, "bend", 1, 3, 2, seed=0, magnitude_max=1.0,
                           sample_hz=250.0)[0]
    stamps = np.array([f.timestamp for f in seq.frames])
    assert np.abs(np.diff(stamps) - 1.0 / 250.0).max() < 1e-12


def test_sequence_disk_roundtrip(rod, tmp_path):
    seq = generate_dataset(rod, "bend", 1, 3, 2, seed=3, magnitude_max=1.0,
                           noise_std=1.0)[0]
    seq.labels = np.random.default_rng(0).normal(
        size=(len(seq), 27, 3)).astype(np.float32)
    seq.node_support = np.ones(27, dtype=np.float32)
    d = tmp_path / "seq"
    save_sequence(seq, d, scene=rod)
    back = load_sequence(d)
    assert len(back) == len(seq)
    assert back.mode == "bend"
    for fa, fb in zip(seq.frames, back.frames):
        assert np.allclose(fa.grid, fb.grid, atol=1e-7)
        assert fa.timestamp == fb.timestamp
    assert np.array_equal(back.gt, seq.gt)
    assert np.array_equal(back.labels, seq.labels)
    assert np.array_equal(back.node_support, seq.node_support)
    scene_back = load_sequence_scene(d)
    assert np.array_equal(scene_back.centers, rod.centers)
