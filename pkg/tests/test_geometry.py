"""Geometry: surface mapping, parameter sampling, mesh assembly, model files."""
import numpy as np
import pytest

from peelsim.geometry import (
    GeometryParams,
    MeshConfig,
    Surface,
    build_model,
    load_model,
    rotation_matrix,
    sample_params,
    save_model,
    surface_point,
)

TENDON_KW = dict(k_struct=400.0, k_break=150.0, c_damp=2.0, node_mass=0.01,
                 break_threshold=3.0)


def identity_params(**kw):
    return GeometryParams(dx=0.0, dy=0.0, theta_x=0.0, theta_y=0.0,
                          theta_z=0.0, **kw)


# ---------------------------------------------------------------------------
# Rotation / surface mapping
# ---------------------------------------------------------------------------

def independent_rotation(tx, ty, tz):
    """Hand-rolled reference: rotate about x, then y, then z."""
    def rx(p):
        return np.array([p[0],
                         np.cos(tx) * p[1] - np.sin(tx) * p[2],
                         np.sin(tx) * p[1] + np.cos(tx) * p[2]])

    def ry(p):
        return np.array([np.cos(ty) * p[0] + np.sin(ty) * p[2],
                         p[1],
                         -np.sin(ty) * p[0] + np.cos(ty) * p[2]])

    def rz(p):
        return np.array([np.cos(tz) * p[0] - np.sin(tz) * p[1],
                         np.sin(tz) * p[0] + np.cos(tz) * p[1],
                         p[2]])

    return lambda p: rz(ry(rx(np.asarray(p, dtype=float))))


def test_rotation_matrix_matches_independent_composition():
    rng = np.random.default_rng(3)
    for _ in range(50):
        tx, ty, tz = rng.uniform(-np.pi, np.pi, size=3)
        rot = rotation_matrix(tx, ty, tz)
        ref = independent_rotation(tx, ty, tz)
        for p in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                  rng.normal(size=3)):
            assert np.allclose(rot @ p, ref(p), atol=1e-12)


def test_planar_point_identity():
    point, normal = surface_point(identity_params(), 0.3, 0.01)
    assert np.allclose(point, [0.3, 0.01, 0.0], atol=1e-15)
    assert np.allclose(normal, [0.0, 0.0, 1.0], atol=1e-15)


def test_planar_point_quarter_turn():
    params = GeometryParams(dx=0.0, dy=0.0, theta_x=0.0, theta_y=0.0,
                            theta_z=np.pi / 2)
    point, normal = surface_point(params, 0.3, 0.0)
    assert np.allclose(point, [0.0, 0.3, 0.0], atol=1e-12)
    assert np.allclose(normal, [0.0, 0.0, 1.0], atol=1e-12)


def test_planar_normal_tilts_with_theta_x():
    params = GeometryParams(dx=0.0, dy=0.0, theta_x=np.pi / 2, theta_y=0.0,
                            theta_z=0.0)
    point, normal = surface_point(params, 0.3, 0.0)
    assert np.allclose(point, [0.3, 0.0, 0.0], atol=1e-12)
    assert np.allclose(normal, [0.0, -1.0, 0.0], atol=1e-12)


def test_translation_is_scaled_and_horizontal():
    params = GeometryParams(dx=0.5, dy=-1.0, theta_x=0.0, theta_y=0.0,
                            theta_z=0.0, translation_scale=0.25)
    point, _ = surface_point(params, 0.0, 0.0)
    assert np.allclose(point, [0.125, -0.25, 0.0], atol=1e-15)


def test_cylinder_apex_and_quarter_arc():
    params = identity_params(surface=Surface.CYLINDER, radius=0.5)
    point, normal = surface_point(params, 0.0, 0.0)
    assert np.allclose(point, [0.0, 0.0, 0.5], atol=1e-15)
    assert np.allclose(normal, [0.0, 0.0, 1.0], atol=1e-15)
    # Quarter arc: u = r * pi/2 lands on the horizontal tangent point.
    point, normal = surface_point(params, 0.5 * np.pi / 2, 0.02)
    assert np.allclose(point, [0.5, 0.02, 0.0], atol=1e-12)
    assert np.allclose(normal, [1.0, 0.0, 0.0], atol=1e-12)


def test_cylinder_arc_wrap_rejected():
    params = identity_params(surface=Surface.CYLINDER, radius=0.4)
    with pytest.raises(ValueError):
        surface_point(params, 0.4 * np.pi + 1e-3, 0.0)


def test_half_width_guard():
    with pytest.raises(ValueError):
        surface_point(identity_params(), 0.1, 0.06, half_width=0.05)


# ---------------------------------------------------------------------------
# Parameter validation / sampling
# ---------------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(ValueError):
        GeometryParams(dx=1.5, dy=0.0, theta_x=0.0, theta_y=0.0, theta_z=0.0)
    with pytest.raises(ValueError):
        GeometryParams(dx=0.0, dy=0.0, theta_x=0.0, theta_y=0.0, theta_z=4.0)
    with pytest.raises(ValueError):
        identity_params(radius=0.5)  # planar carries no radius
    with pytest.raises(ValueError):
        identity_params(surface=Surface.CYLINDER)  # needs a radius
    with pytest.raises(ValueError):
        MeshConfig(rows=1)


def test_sampling_is_deterministic_per_seed():
    for case in ("T1", "T2", "T3"):
        a = sample_params(case, 1234)
        b = sample_params(case, 1234)
        assert a == b
        c = sample_params(case, 1235)
        assert a != c


def test_t1_is_planar_in_plane_only():
    for seed in range(200):
        p = sample_params("T1", seed)
        assert p.surface is Surface.PLANAR and p.radius is None
        assert p.theta_x == 0.0 and p.theta_y == 0.0
        assert -1.0 <= p.dx <= 1.0 and -1.0 <= p.dy <= 1.0
        assert -np.pi <= p.theta_z <= np.pi


def test_t2_tilts_bounded():
    lim = np.pi / 6
    saw_tilt = False
    for seed in range(200):
        p = sample_params("T2", seed)
        assert p.surface is Surface.PLANAR
        assert abs(p.theta_x) <= lim and abs(p.theta_y) <= lim
        saw_tilt = saw_tilt or abs(p.theta_x) > 0.01
    assert saw_tilt


def test_t2_full_rotation_flag_widens_tilts():
    wide = [sample_params("T2", s, full_rotation=True) for s in range(200)]
    assert any(abs(p.theta_x) > np.pi / 6 for p in wide)
    assert all(abs(p.theta_x) <= np.pi for p in wide)


def test_t3_cylinder_fraction_near_half():
    n_cyl = 0
    for seed in range(1000):
        p = sample_params("T3", seed)
        if p.surface is Surface.CYLINDER:
            n_cyl += 1
            assert 0.4 <= p.radius <= 0.8
    assert 0.45 <= n_cyl / 1000.0 <= 0.55


def test_unknown_case_rejected():
    with pytest.raises(ValueError):
        sample_params("T4", 0)


# ---------------------------------------------------------------------------
# Mesh assembly
# ---------------------------------------------------------------------------

def test_default_mesh_counts():
    model = build_model(identity_params(), MeshConfig(), **TENDON_KW)
    assert model.total_breakable == 39          # 13 rows x 3 cols
    assert model.n_nodes == 42                  # grid + handle row
    # 39 along-u + 28 across-v + 52 diagonals.
    assert model.struct_a.shape[0] == 119
    assert model.handle_nodes.tolist() == [39, 40, 41]


def test_identity_layout():
    mesh = MeshConfig()
    model = build_model(identity_params(), mesh, **TENDON_KW)
    assert np.allclose(model.anchors[0], [0.0, -0.05, 0.0], atol=1e-15)
    assert np.allclose(model.anchors[2], [0.0, 0.05, 0.0], atol=1e-15)
    assert np.allclose(model.anchors[36], [0.5, -0.05, 0.0], atol=1e-12)
    # Top layer floats one gap above, handle extends past row 0 along -x.
    assert np.allclose(model.top_nodes[:39, 2], 0.01, atol=1e-15)
    assert np.allclose(model.top_nodes[39], [-0.05, -0.05, 0.01], atol=1e-12)
    assert np.allclose(model.handle_direction, [-1.0, 0.0, 0.0], atol=1e-15)


def test_rest_lengths_are_as_built():
    for seed in (0, 5, 9):
        params = sample_params("T3", seed)
        model = build_model(params, MeshConfig(), **TENDON_KW)
        built = np.linalg.norm(
            model.top_nodes[model.struct_a] - model.top_nodes[model.struct_b],
            axis=1)
        assert np.allclose(built, model.struct_len0, rtol=1e-12, atol=0)
        assert np.all(model.struct_len0 > 0)
        gaps = np.linalg.norm(
            model.top_nodes[model.break_node] - model.anchors, axis=1)
        assert np.allclose(gaps, model.break_len0, rtol=1e-12, atol=0)
        assert np.allclose(model.break_len0, MeshConfig().layer_gap, atol=1e-12)


def test_release_axes_identity_scene():
    """Flat identity strip: every axis bisects +z and -x exactly."""
    model = build_model(identity_params(), MeshConfig(), **TENDON_KW)
    want = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0)
    assert model.break_axis.shape == (39, 3)
    assert np.allclose(model.break_axis, want, atol=1e-12)


def test_release_axes_follow_cylinder_arc():
    """On a cylinder the axis rotates with the local surface frame: unit
    length everywhere, outward normal component positive, and the row-0
    axis differs from the last row's by roughly the wrapped arc angle."""
    params = GeometryParams(dx=0.0, dy=0.0, theta_x=0.0, theta_y=0.0,
                            theta_z=0.0, surface=Surface.CYLINDER, radius=0.4)
    model = build_model(params, MeshConfig(), **TENDON_KW)
    axes = model.break_axis
    assert np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-12)
    normals = np.repeat(model.row_normal, MeshConfig().cols, axis=0)
    assert np.all(np.einsum("ij,ij->i", axes, normals) > 0.5)
    arc = MeshConfig().strip_length / params.radius
    turn = np.arccos(np.clip(np.dot(axes[0], axes[-1]), -1.0, 1.0))
    assert turn == pytest.approx(arc, rel=0.1)


def test_cylinder_top_layer_radius():
    params = GeometryParams(dx=0.2, dy=-0.3, theta_x=0.0, theta_y=0.0,
                            theta_z=0.0, surface=Surface.CYLINDER, radius=0.5)
    model = build_model(params, MeshConfig(), **TENDON_KW)
    shift_x = params.translation_scale * params.dx
    radial = np.hypot(model.top_nodes[:39, 0] - shift_x, model.top_nodes[:39, 2])
    assert np.allclose(radial, 0.51, atol=1e-12)   # radius + layer_gap


def test_build_deterministic():
    params = sample_params("T3", 77)
    a = build_model(params, MeshConfig(), **TENDON_KW)
    b = build_model(params, MeshConfig(), **TENDON_KW)
    assert np.array_equal(a.top_nodes, b.top_nodes)
    assert np.array_equal(a.anchors, b.anchors)
    assert np.array_equal(a.struct_len0, b.struct_len0)


def test_handle_row_connected_to_first_grid_row():
    model = build_model(identity_params(), MeshConfig(), **TENDON_KW)
    pairs = set(zip(model.struct_a.tolist(), model.struct_b.tolist()))
    norm = {tuple(sorted(p)) for p in pairs}
    assert (0, 39) in norm and (1, 40) in norm and (2, 41) in norm
    # Breakables never touch the handle row.
    assert np.all(model.break_node < 39)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    params = sample_params("T3", 41)
    model = build_model(params, MeshConfig(), **TENDON_KW)
    path = tmp_path / "model.json"
    save_model(model, str(path))
    back = load_model(str(path))
    assert back.params == model.params
    assert back.mesh == model.mesh
    for name in ("top_nodes", "node_mass", "anchors", "struct_a", "struct_b",
                 "struct_k", "struct_c", "struct_len0", "break_node",
                 "break_k", "break_c", "break_len0", "break_threshold",
                 "handle_nodes"):
        assert np.array_equal(getattr(back, name), getattr(model, name)), name
