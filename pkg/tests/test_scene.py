import numpy as np
import pytest

from cagesplat.scene import (
    HEADER,
    RECORD_BYTES,
    GaussianScene,
    SplatFormatError,
    init_proxy_from_mesh,
    load_scene,
    make_box_mesh,
    make_cylinder_mesh,
    pack_covariance,
    read_stl_binary,
    save_scene,
    unpack_covariance,
    write_stl_binary,
)


def random_scene(n, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1, (n, 3)).astype(np.float32)
    # random SPD covariances via A A^T + floor
    a = rng.normal(0, 0.01, (n, 3, 3))
    covs = a @ a.transpose(0, 2, 1) + 1e-6 * np.eye(3)
    return GaussianScene(
        centers=centers.astype(np.float64),
        covs_packed=pack_covariance(covs).astype(np.float32).astype(np.float64),
        opacity=rng.uniform(0.05, 1.0, n).astype(np.float32).astype(np.float64),
        color=rng.uniform(0, 1, (n, 3)).astype(np.float32).astype(np.float64),
    )


def test_single_primitive_roundtrip(tmp_path):
    var = float(np.float32(1e-4))           # file records store f32
    scene = GaussianScene(
        centers=np.zeros((1, 3)),
        covs_packed=np.array([[var, 0, 0, var, 0, var]]),
        opacity=np.array([1.0]),
        color=np.array([[1.0, 0.0, 0.0]]),
    )
    path = tmp_path / "one.cspl"
    save_scene(scene, path)
    back = load_scene(path)
    assert len(back) == 1
    assert np.array_equal(back.centers, scene.centers)
    assert np.array_equal(back.covs_packed, scene.covs_packed)
    assert back.opacity[0] == 1.0
    assert np.array_equal(back.color, scene.color)


def test_roundtrip_random_scene(tmp_path):
    scene = random_scene(1000, seed=3)
    path = tmp_path / "big.cspl"
    save_scene(scene, path)
    back = load_scene(path)
    for field in ("centers", "covs_packed", "opacity", "color"):
        assert np.array_equal(getattr(back, field), getattr(scene, field)), field


def test_empty_scene_file(tmp_path):
    scene = random_scene(0)
    path = tmp_path / "empty.cspl"
    save_scene(scene, path)
    assert len(load_scene(path)) == 0
    assert path.stat().st_size == HEADER.size


def test_file_size_is_header_plus_records(tmp_path):
    path = tmp_path / "sz.cspl"
    save_scene(random_scene(1, seed=1), path)
    assert path.stat().st_size == HEADER.size + RECORD_BYTES
    save_scene(random_scene(7, seed=1), path)
    assert path.stat().st_size == HEADER.size + 7 * RECORD_BYTES


def test_out_of_range_opacity_names_record(tmp_path):
    scene = random_scene(10, seed=2)
    scene.opacity[7] = 1.5
    with pytest.raises(SplatFormatError, match="record 7"):
        save_scene(scene, tmp_path / "bad.cspl")


def test_non_psd_covariance_rejected_on_load(tmp_path):
    scene = random_scene(5, seed=4)
    path = tmp_path / "psd.cspl"
    save_scene(scene, path)
    blob = bytearray(path.read_bytes())
    # corrupt record 2's xx entry to a negative value
    off = HEADER.size + 2 * RECORD_BYTES + 3 * 4
    blob[off:off + 4] = np.float32(-1.0).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(SplatFormatError, match="record 2"):
        load_scene(path)


def test_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "trunc.cspl"
    save_scene(random_scene(3, seed=5), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(SplatFormatError):
        load_scene(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(SplatFormatError):
        load_scene(path)


def test_covariance_packing_roundtrip():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 3, 3))
    covs = a @ a.transpose(0, 2, 1)
    assert np.allclose(unpack_covariance(pack_covariance(covs)), covs)


def test_stl_roundtrip(tmp_path):
    mesh = make_cylinder_mesh(0.01, 0.1, segments=16)
    path = tmp_path / "m.stl"
    write_stl_binary(mesh, path)
    back = read_stl_binary(path)
    assert back.n_faces == mesh.n_faces
    assert np.allclose(np.sort(back.face_areas()), np.sort(mesh.face_areas()),
                       rtol=1e-6)


def test_ascii_stl_rejected(tmp_path):
    path = tmp_path / "a.stl"
    path.write_text("solid thing\nfacet normal 0 0 1\nendsolid thing\n")
    with pytest.raises(SplatFormatError, match="ASCII"):
        read_stl_binary(path)


def test_proxy_single_triangle_inside():
    mesh = read_back = None
    vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    from cagesplat.scene import TriangleMesh
    mesh = TriangleMesh(vertices=vertices, faces=np.array([[0, 1, 2]]))
    scene = init_proxy_from_mesh(mesh, 1, seed=0)
    p = scene.centers[0]
    # barycentric coordinates all >= 0
    assert p[0] >= 0 and p[1] >= 0 and p[0] + p[1] <= 1 + 1e-9
    assert abs(p[2]) < 1e-12


def test_proxy_determinism():
    mesh = make_box_mesh((1, 1, 1))
    a = init_proxy_from_mesh(mesh, 500, seed=9)
    b = init_proxy_from_mesh(mesh, 500, seed=9)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.covs_packed, b.covs_packed)
    c = init_proxy_from_mesh(mesh, 500, seed=10)
    assert not np.array_equal(a.centers, c.centers)


def test_proxy_area_uniform_cube_counts():
    # unit cube: 6 equal faces of 2 triangles each; mean per-face count over
    # 10 runs stays within 5% of n/6
    mesh = make_box_mesh((1, 1, 1))
    n = 6000
    counts = np.zeros(6)
    runs = 10
    for seed in range(runs):
        rng = np.random.default_rng(seed)
        from cagesplat.scene import sample_surface
        _, face_idx = sample_surface(mesh, n, rng)
        counts += np.bincount(face_idx // 2, minlength=6)
    counts /= runs
    assert np.all(np.abs(counts - 1000) <= 50), counts


def test_proxy_chi_square_area_weighting():
    mesh = make_box_mesh((1, 1, 1))
    from cagesplat.scene import sample_surface
    _, face_idx = sample_surface(mesh, 6000, np.random.default_rng(123))
    counts = np.bincount(face_idx // 2, minlength=6)
    chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum()
    # 5 dof: p > 0.01 means chi2 < 15.09
    assert chi2 < 15.09, counts


def test_proxy_covariances_cholesky():
    mesh = make_box_mesh((1, 2, 3))
    scene = init_proxy_from_mesh(mesh, 2000, seed=1)
    np.linalg.cholesky(unpack_covariance(scene.covs_packed))
    assert np.all(scene.opacity == 0.9)


def test_bounds_contain_centers():
    scene = random_scene(100, seed=8)
    lo, hi = scene.bounds
    assert np.all(scene.centers >= lo - 1e-12)
    assert np.all(scene.centers <= hi + 1e-12)


def test_with_centers_shares_appearance():
    scene = random_scene(50, seed=6)
    moved = scene.with_centers(scene.centers + 0.1)
    assert moved.frame_id == scene.frame_id + 1
    assert moved.covs_packed is scene.covs_packed
    assert moved.opacity is scene.opacity
