import numpy as np
import pytest

from cagesplat.cage import (
    CageDisplacementField,
    CageError,
    align_patch,
    bind_weights,
    build_cage,
    cage_for_scene,
    extract_cage_labels,
    load_cage,
    load_weights,
    propagate,
    save_cage,
    save_weights,
)
from cagesplat.scene import GaussianScene, make_box_mesh, init_proxy_from_mesh


def scene_from_points(points):
    n = len(points)
    covs = np.zeros((n, 6))
    covs[:, [0, 3, 5]] = 1e-6
    return GaussianScene(centers=np.asarray(points, dtype=np.float64),
                         covs_packed=covs, opacity=np.full(n, 0.9),
                         color=np.full((n, 3), 0.5))


def random_volume_scene(n, lo=(0, 0, 0), hi=(1, 1, 1), seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, 3))
    return scene_from_points(pts)


def test_cage_corner_topology():
    cage = build_cage((0, 0, 0), (1, 1, 1), (2, 2, 2))
    assert cage.n_nodes == 8
    assert np.all(cage.degrees() == 3)
    ext = cage.nodes.max(axis=0) - cage.nodes.min(axis=0)
    assert np.allclose(ext, 1.1)          # 5% padding both sides


def test_cage_15_cubed_counts():
    cage = build_cage((0, 0, 0), (1, 1, 1), (15, 15, 15))
    assert cage.n_nodes == 3375
    assert cage.edges.shape[0] == 3 * 14 * 15 * 15      # 9450
    deg = cage.degrees()
    assert deg.min() == 3 and deg.max() == 6
    # row-major ordering, x fastest
    assert cage.node_index(1, 0, 0) == 1
    assert cage.node_index(0, 1, 0) == 15
    assert np.allclose(cage.nodes[1] - cage.nodes[0],
                       [(1.1 / 14.0), 0, 0])


def test_cage_degenerate_rejected():
    with pytest.raises(CageError):
        build_cage((0, 0, 0), (1, 1, 1), (1, 2, 2))
    with pytest.raises(CageError):
        build_cage((0, 0, 0), (0, 1, 1), (2, 2, 2))


def test_bind_coincident_node_dominates():
    cage = build_cage((0, 0, 0), (1, 1, 1), (3, 3, 3), padding=0.0)
    scene = scene_from_points([cage.nodes[5]])
    w = bind_weights(cage, scene, k=4, epsilon=1e-9)
    assert w.node_idx[0, 0] == 5
    assert w.weights[0, 0] >= 0.999


def test_bind_equidistant_uniform():
    cage = build_cage((0, 0, 0), (1, 1, 1), (2, 2, 2), padding=0.0)
    scene = scene_from_points([[0.5, 0.5, 0.5]])
    w = bind_weights(cage, scene, k=8, epsilon=1e-6)
    assert np.allclose(w.weights[0], 1.0 / 8.0, atol=1e-9)


def test_bind_direct_idw_ratio():
    # cubic cage so normalized-frame distances match physical ones, point
    # placed so its two nearest nodes sit at distances (d, 2d): Eq-style
    # normalized inverse distances give weights (2/3, 1/3) at epsilon 0
    cage = build_cage((0, 0, 0), (1, 1, 1), (2, 2, 2), padding=0.0)
    d = 1.0 / np.sqrt(3.0)
    scene = scene_from_points([[-d, 0.0, 0.0]])
    w = bind_weights(cage, scene, k=2, epsilon=0.0)
    dist = np.linalg.norm(cage.nodes[w.node_idx[0]] - scene.centers[0], axis=1)
    assert np.allclose(dist, [d, 2 * d], atol=1e-12)
    assert np.allclose(w.weights[0], [2.0 / 3.0, 1.0 / 3.0], atol=1e-9)


def test_bind_tie_break_lower_index():
    cage = build_cage((0, 0, 0), (1, 1, 1), (3, 3, 3), padding=0.0)
    scene = scene_from_points([[0.5, 0.5, 0.5]])      # the exact center node 13
    w = bind_weights(cage, scene, k=7, epsilon=1e-6)
    # center node first, then the 6 equidistant face neighbors: ties resolve
    # to the lowest node indices
    assert w.node_idx[0, 0] == 13
    assert list(w.node_idx[0, 1:]) == sorted(w.node_idx[0, 1:])


def test_partition_of_unity_random():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(2, 6, 3))
        scene = random_volume_scene(200, seed=seed)
        cage = cage_for_scene(scene, dims)
        w = bind_weights(cage, scene, k=min(8, cage.n_nodes), epsilon=1e-6)
        assert np.abs(w.weights.sum(axis=1) - 1.0).max() < 1e-6
        assert (w.weights >= 0).all()


def test_propagate_constant_translation():
    scene = random_volume_scene(300, seed=1)
    cage = cage_for_scene(scene, (4, 4, 4))
    w = bind_weights(cage, scene, 8, 1e-6)
    t = np.array([0.03, -0.01, 0.02])
    field = CageDisplacementField(offsets=np.tile(t, (cage.n_nodes, 1)))
    moved = propagate(w, field, scene)
    assert np.abs(moved.centers - scene.centers - t).max() < 1e-12


def test_propagate_zero_and_single_node():
    scene = random_volume_scene(200, seed=2)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 8, 1e-6)
    zero = CageDisplacementField(offsets=np.zeros((cage.n_nodes, 3)))
    assert np.array_equal(propagate(w, zero, scene).centers, scene.centers)
    m = 13
    d = np.array([0.01, 0.02, -0.005])
    offsets = np.zeros((cage.n_nodes, 3))
    offsets[m] = d
    moved = propagate(w, CageDisplacementField(offsets=offsets), scene)
    delta = moved.centers - scene.centers
    binds = (w.node_idx == m)
    expect = np.where(binds.any(axis=1),
                      np.where(binds, w.weights, 0).sum(axis=1), 0.0)
    assert np.allclose(delta, expect[:, None] * d, atol=1e-15)


def test_propagate_translation_equivariance():
    scene = random_volume_scene(150, seed=3)
    cage = cage_for_scene(scene, (3, 4, 5))
    w = bind_weights(cage, scene, 8, 1e-6)
    rng = np.random.default_rng(3)
    dc = rng.normal(0, 0.01, (cage.n_nodes, 3))
    t = np.array([0.005, 0.006, -0.004])
    a = propagate(w, CageDisplacementField(offsets=dc + t), scene)
    b = propagate(w, CageDisplacementField(offsets=dc), scene)
    assert np.abs(a.centers - (b.centers + t)).max() < 1e-9


def test_propagate_locality_bit_exact():
    scene = random_volume_scene(100, seed=4)
    cage = cage_for_scene(scene, (4, 4, 4))
    w = bind_weights(cage, scene, 6, 1e-6)
    rng = np.random.default_rng(5)
    dc = rng.normal(0, 0.01, (cage.n_nodes, 3))
    base = propagate(w, CageDisplacementField(offsets=dc), scene)
    j = 17
    bound = set(w.node_idx[j].tolist())
    unbound = next(i for i in range(cage.n_nodes) if i not in bound)
    dc2 = dc.copy()
    dc2[unbound] += 0.5
    moved = propagate(w, CageDisplacementField(offsets=dc2), scene)
    assert np.array_equal(moved.centers[j], base.centers[j])


def test_propagate_length_mismatch():
    scene = random_volume_scene(10, seed=0)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 4, 1e-6)
    with pytest.raises(CageError):
        propagate(w, CageDisplacementField(offsets=np.zeros((5, 3))), scene)


def test_label_extraction_recovers_full_rank():
    scene = random_volume_scene(300, seed=6)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 8, 1e-6)
    rng = np.random.default_rng(7)
    dc_true = rng.normal(0, 0.02, (cage.n_nodes, 3))
    gt = propagate(w, CageDisplacementField(offsets=dc_true), scene).centers - scene.centers
    rec = extract_cage_labels(w, gt, lambda_reg=0.0)
    assert np.abs(rec.offsets - dc_true).max() < 1e-6


def test_label_extraction_zero_gt():
    scene = random_volume_scene(100, seed=8)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 8, 1e-6)
    rec = extract_cage_labels(w, np.zeros((100, 3)), lambda_reg=1e-8)
    assert np.abs(rec.offsets).max() == 0.0


def test_label_extraction_rank_deficient_minimal_norm():
    # leave the corner node with no bound Gaussian: its label must come back
    # exactly zero (regularizer picks the minimal-norm value) while observed
    # nodes are recovered
    rng = np.random.default_rng(9)
    pts = rng.uniform(0.0, 1.0, size=(600, 3))
    cage = build_cage((0, 0, 0), (1, 1, 1), (3, 3, 3), padding=0.0)
    w0 = bind_weights(cage, scene_from_points(pts), 8, 1e-6)
    pts = pts[~(w0.node_idx == 0).any(axis=1)]        # drop corner-bound points
    scene = scene_from_points(pts)
    w = bind_weights(cage, scene, 8, 1e-6)
    support = w.node_support()
    assert support[0] == 0.0
    dc_true = rng.normal(0, 0.02, (cage.n_nodes, 3))
    dc_true[support == 0.0] = 0.0     # unobservable components carry no signal
    gt = propagate(w, CageDisplacementField(offsets=dc_true), scene).centers - scene.centers
    rec = extract_cage_labels(w, gt, lambda_reg=1e-6)
    assert np.abs(rec.offsets[0]).max() == 0.0
    observed = support > 1e-9
    assert np.abs(rec.offsets[observed] - dc_true[observed]).max() < 1e-4


def test_label_extraction_errors():
    scene = random_volume_scene(10, seed=0)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 4, 1e-6)
    with pytest.raises(CageError):
        extract_cage_labels(w, np.zeros((3, 3)))
    with pytest.raises(CageError):
        extract_cage_labels(w, np.zeros((0, 3)))


def test_align_patch_recovers_rigid():
    rng = np.random.default_rng(10)
    src = rng.normal(size=(4, 3))
    angle = 0.7
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
    t = np.array([0.1, -0.2, 0.3])
    dst = src @ R.T + t
    tr = align_patch(src, dst)
    assert np.abs(tr.rotation - R).max() < 1e-9
    assert np.abs(tr.translation - t).max() < 1e-9


def test_align_patch_identity():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tr = align_patch(pts, pts)
    assert np.abs(tr.rotation - np.eye(3)).max() < 1e-12
    assert np.abs(tr.translation).max() < 1e-12


def test_align_patch_rejects_reflection():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.4, 1.0]])
    mirrored = pts * np.array([1, 1, -1.0])
    tr = align_patch(pts, mirrored)
    assert np.linalg.det(tr.rotation) > 0.999
    rms = np.sqrt(((tr.apply(pts) - mirrored) ** 2).sum(axis=1).mean())
    assert rms > 1e-3


def test_align_patch_collinear_rejected():
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
    with pytest.raises(CageError, match="collinear"):
        align_patch(line, line + 1.0)


def test_align_patch_common_rigid_invariance():
    rng = np.random.default_rng(11)
    src = rng.normal(size=(4, 3))
    dst = rng.normal(size=(4, 3))
    base = align_patch(src, dst)
    angle = 0.4
    R = np.array([[np.cos(angle), -np.sin(angle), 0],
                  [np.sin(angle), np.cos(angle), 0], [0, 0, 1.0]])
    t = np.array([1.0, 2.0, 3.0])
    moved = align_patch(src @ R.T + t, dst @ R.T + t)
    a = moved.apply(src @ R.T + t)
    b = base.apply(src) @ R.T + t
    assert np.abs(a - b).max() < 1e-9


def test_weights_sidecar_roundtrip(tmp_path):
    scene = random_volume_scene(64, seed=12)
    cage = cage_for_scene(scene, (3, 3, 3))
    w = bind_weights(cage, scene, 8, 1e-6)
    path = tmp_path / "w.cbwt"
    save_weights(w, path)
    back = load_weights(path)
    assert np.array_equal(back.node_idx, w.node_idx)
    assert np.allclose(back.weights, w.weights, atol=1e-7)
    assert back.epsilon == w.epsilon
    assert back.n_nodes == w.n_nodes


def test_cage_text_roundtrip(tmp_path):
    cage = build_cage((0, -1, 2), (1, 1, 5), (3, 4, 2))
    path = tmp_path / "cage.txt"
    save_cage(cage, path)
    back = load_cage(path)
    assert back.dims == cage.dims
    assert np.array_equal(back.nodes, cage.nodes)
    assert np.array_equal(np.sort(back.edges, axis=1).tolist(),
                          np.sort(cage.edges, axis=1).tolist())
