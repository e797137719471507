"""Randomized attachment surfaces and the velcro strip mesh built on them.

Coordinate conventions:
  - World frame: x/y horizontal, z up.  The untransformed strip runs along +x
    (length direction u) and spans y (width direction v), attached at z = 0.
  - A cylindrical surface has its axis along y through the origin before the
    rigid transform is applied; u is arc length measured from the apex, so
    u = 0 sits directly above the axis.
  - The rigid transform rotates by theta_x, theta_y, theta_z (applied in that
    order) and translates in the horizontal plane.  Translation draws live in
    [-1, 1] and are scaled to meters by `translation_scale`.
  - The strip mesh has `rows` node rows along u (row 0 at u = 0) and `cols`
    nodes across v.  The handle extends the top layer beyond row 0, away from
    the strip, and is the part a gripper holds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TEST_CASES = ("T1", "T2", "T3")

DEFAULT_TILT_LIMIT = np.pi / 6
DEFAULT_TRANSLATION_SCALE = 0.25


class Surface(Enum):
    PLANAR = "planar"
    CYLINDER = "cylinder"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryParams:
    """One sampled attachment scenario.

    dx, dy are unscaled translation draws in [-1, 1]; theta_* are rotation
    angles in radians; radius is set only for cylindrical surfaces.
    """
    dx: float
    dy: float
    theta_x: float
    theta_y: float
    theta_z: float
    surface: Surface = Surface.PLANAR
    radius: float | None = None
    translation_scale: float = DEFAULT_TRANSLATION_SCALE

    def __post_init__(self):
        for name in ("dx", "dy"):
            val = getattr(self, name)
            if not -1.0 <= val <= 1.0:
                raise ValueError(f"{name} outside [-1, 1]: {val}")
        for name in ("theta_x", "theta_y", "theta_z"):
            val = getattr(self, name)
            if not -np.pi <= val <= np.pi:
                raise ValueError(f"{name} outside [-pi, pi]: {val}")
        if self.surface is Surface.PLANAR:
            if self.radius is not None:
                raise ValueError("planar surface carries no radius")
        else:
            if self.radius is None or self.radius <= 0.0:
                raise ValueError(f"cylinder needs a positive radius, got {self.radius}")
        if self.translation_scale < 0.0:
            raise ValueError("translation_scale must be >= 0")


def rotation_matrix(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    """Rotation applying theta_x, then theta_y, then theta_z (world axes)."""
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def sample_params(
    test_case: str,
    rng_seed: int,
    *,
    tilt_limit: float = DEFAULT_TILT_LIMIT,
    full_rotation: bool = False,
    translation_scale: float = DEFAULT_TRANSLATION_SCALE,
) -> GeometryParams:
    """Draw scenario parameters for one of the test cases T1/T2/T3.

    T1: planar, in-plane rotation only.  T2: planar with out-of-plane tilts
    (bounded by tilt_limit unless full_rotation).  T3: half planar, half
    cylindrical with radius drawn from [0.4, 0.8] m.  Deterministic per seed.
    """
    if test_case not in TEST_CASES:
        raise ValueError(f"unknown test case {test_case!r}")
    rng = np.random.default_rng(rng_seed)
    dx = rng.uniform(-1.0, 1.0)
    dy = rng.uniform(-1.0, 1.0)
    theta_z = rng.uniform(-np.pi, np.pi)
    theta_x = theta_y = 0.0
    if test_case in ("T2", "T3"):
        lim = np.pi if full_rotation else tilt_limit
        theta_x = rng.uniform(-lim, lim)
        theta_y = rng.uniform(-lim, lim)
    surface = Surface.PLANAR
    radius = None
    if test_case == "T3" and rng.random() < 0.5:
        surface = Surface.CYLINDER
        radius = rng.uniform(0.4, 0.8)
    return GeometryParams(
        dx=dx, dy=dy, theta_x=theta_x, theta_y=theta_y, theta_z=theta_z,
        surface=surface, radius=radius, translation_scale=translation_scale,
    )


def surface_point(
    params: GeometryParams,
    u: float,
    v: float,
    *,
    half_width: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Map strip coordinates (u along length, v across width) to a world-frame
    point and outward unit normal on the attachment surface."""
    if half_width is not None and abs(v) > half_width + 1e-12:
        raise ValueError(f"v={v} outside strip half-width {half_width}")
    rot = rotation_matrix(params.theta_x, params.theta_y, params.theta_z)
    shift = np.array([
        params.translation_scale * params.dx,
        params.translation_scale * params.dy,
        0.0,
    ])
    if params.surface is Surface.PLANAR:
        base = np.array([u, v, 0.0])
        normal = np.array([0.0, 0.0, 1.0])
    else:
        radius = params.radius
        phi = u / radius
        if abs(phi) > np.pi:
            raise ValueError(f"arc coordinate u={u} wraps past the cylinder half-shell")
        base = np.array([radius * np.sin(phi), v, radius * np.cos(phi)])
        normal = np.array([np.sin(phi), 0.0, np.cos(phi)])
    return rot @ base + shift, rot @ normal


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshConfig:
    """Strip discretization.  Node rows run along the strip length."""
    rows: int = 13
    cols: int = 3
    strip_length: float = 0.5
    strip_width: float = 0.1
    layer_gap: float = 0.01
    handle_length: float = 0.05

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("mesh needs at least 2 rows and 2 cols")
        for name in ("strip_length", "strip_width", "layer_gap", "handle_length"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class VelcroModel:
    """As-built strip: top layer nodes, fixed anchors, and the tendon lists.

    Top nodes are indexed row-major with the grid rows first (row r, col c at
    r * cols + c) and the handle row last.  Breakable tendon j ties top node
    break_node[j] to anchors[j]; structural tendons tie top-node pairs and
    never break.  Rest lengths are as-built distances, so the fresh model
    stores no elastic energy.
    """
    params: GeometryParams
    mesh: MeshConfig
    top_nodes: np.ndarray          # [n_top, 3]
    node_mass: np.ndarray          # [n_top]
    anchors: np.ndarray            # [rows * cols, 3]
    struct_a: np.ndarray           # [n_struct] int32
    struct_b: np.ndarray           # [n_struct] int32
    struct_k: np.ndarray
    struct_c: np.ndarray
    struct_len0: np.ndarray
    break_node: np.ndarray         # [rows * cols] int32
    break_k: np.ndarray
    break_c: np.ndarray
    break_len0: np.ndarray
    break_threshold: np.ndarray
    handle_nodes: np.ndarray       # [cols] int32
    # Static per-row geometry used by the privileged boundary view.
    row_anchor_mean: np.ndarray = field(repr=False, default=None)
    row_normal: np.ndarray = field(repr=False, default=None)
    handle_direction: np.ndarray = field(repr=False, default=None)
    # Unit release axis per breakable: the direction a hook lets go along,
    # bisecting the local surface normal and the back-tangent toward the
    # handle.  None on hand-built models; physics then falls back to the
    # as-built tendon direction.
    break_axis: np.ndarray = field(repr=False, default=None)
    # Unit back-tangent per breakable: the way the hook throat faces.
    # None on hand-built models; stretch then never counts as jammed.
    break_back: np.ndarray = field(repr=False, default=None)

    @property
    def total_breakable(self) -> int:
        return int(self.break_node.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.top_nodes.shape[0])


RELEASE_BACK_WEIGHT = 1.0   # handle-ward lean of the release axis


def back_tangents(anchors: np.ndarray, normals: np.ndarray,
                  rows: int, cols: int) -> np.ndarray:
    """Unit in-plane back-tangent per breakable, row-major.

    The direction along the surface toward the previous row (row 0 reuses
    the row 1 -> 0 step) -- the way the hook throats face.  Zero where the
    anchor grid is degenerate.
    """
    grid = anchors.reshape(rows, cols, 3)
    backs = np.zeros((rows * cols, 3))
    for r in range(rows):
        for c in range(cols):
            n = normals[r]
            back = grid[r - 1, c] - grid[r, c] if r > 0 else grid[0, c] - grid[1, c]
            back = back - np.dot(back, n) * n
            nb = np.linalg.norm(back)
            if nb > 1e-12:
                backs[r * cols + c] = back / nb
    return backs


def release_axes(anchors: np.ndarray, normals: np.ndarray,
                 rows: int, cols: int) -> np.ndarray:
    """Unit release axis per breakable, row-major.

    Hooks open toward the handle, so a tendon lets go easiest along a
    direction leaning from the local surface normal toward the back-tangent.
    The lean is RELEASE_BACK_WEIGHT; at 1 the axis is the bisector, 45
    degrees above the surface.  Pulls at an angle need proportionally more
    tension; pulls far enough off axis -- glancing drags, or into the
    attachment -- never release at all.
    """
    backs = back_tangents(anchors, normals, rows, cols)
    axes = np.zeros((rows * cols, 3))
    for r in range(rows):
        for c in range(cols):
            axis = normals[r] + RELEASE_BACK_WEIGHT * backs[r * cols + c]
            axes[r * cols + c] = axis / np.linalg.norm(axis)
    return axes


def build_model(
    params: GeometryParams,
    mesh: MeshConfig,
    *,
    k_struct: float,
    k_break: float,
    c_damp: float,
    node_mass: float,
    break_threshold: float,
) -> VelcroModel:
    """Lay the strip onto the surface and assemble tendons.

    Anchors sit on the surface at a rows x cols grid; top nodes are offset by
    layer_gap along the local normal.  Structural tendons connect top-layer
    grid neighbors plus both cell diagonals (shear stiffness) and include the
    handle row, which extends handle_length beyond row 0 along the local
    tangent, away from the strip.
    """
    rows, cols = mesh.rows, mesh.cols
    half_w = mesh.strip_width / 2.0
    u_vals = [r * mesh.strip_length / (rows - 1) for r in range(rows)]
    v_vals = [-half_w + c * mesh.strip_width / (cols - 1) for c in range(cols)]

    anchors = np.zeros((rows * cols, 3))
    tops = np.zeros(((rows + 1) * cols, 3))
    normals = np.zeros((rows, 3))
    for r in range(rows):
        for c in range(cols):
            point, normal = surface_point(params, u_vals[r], v_vals[c], half_width=half_w)
            anchors[r * cols + c] = point
            tops[r * cols + c] = point + mesh.layer_gap * normal
        normals[r] = surface_point(params, u_vals[r], 0.0)[1]

    # Handle row: continue the top layer past row 0 along the local -u tangent.
    rot = rotation_matrix(params.theta_x, params.theta_y, params.theta_z)
    u_dir = rot @ np.array([1.0, 0.0, 0.0])   # d(surface)/du at u = 0, both surfaces
    handle_idx = np.arange(rows * cols, (rows + 1) * cols, dtype=np.int32)
    for c in range(cols):
        tops[rows * cols + c] = tops[c] - mesh.handle_length * u_dir

    # Structural connectivity over the full top layer, handle row included.
    # Grid row index -1 stands for the handle row.
    def node(r: int, c: int) -> int:
        return rows * cols + c if r == -1 else r * cols + c

    pairs = []
    for r in range(-1, rows):
        for c in range(cols):
            if r + 1 < rows:
                pairs.append((node(r, c), node(r + 1, c)))          # along u
            if c + 1 < cols:
                pairs.append((node(r, c), node(r, c + 1)))          # across v
                if r + 1 < rows:
                    pairs.append((node(r, c), node(r + 1, c + 1)))  # diagonals
                    pairs.append((node(r, c + 1), node(r + 1, c)))
    struct_a = np.array([p[0] for p in pairs], dtype=np.int32)
    struct_b = np.array([p[1] for p in pairs], dtype=np.int32)
    struct_len0 = np.linalg.norm(tops[struct_a] - tops[struct_b], axis=1)

    n_break = rows * cols
    break_node = np.arange(n_break, dtype=np.int32)
    break_len0 = np.linalg.norm(tops[:n_break] - anchors, axis=1)

    row_mean = anchors.reshape(rows, cols, 3).mean(axis=1)
    return VelcroModel(
        params=params,
        mesh=mesh,
        top_nodes=tops,
        node_mass=np.full((rows + 1) * cols, node_mass),
        anchors=anchors,
        struct_a=struct_a,
        struct_b=struct_b,
        struct_k=np.full(len(pairs), k_struct),
        struct_c=np.full(len(pairs), c_damp),
        struct_len0=struct_len0,
        break_node=break_node,
        break_k=np.full(n_break, k_break),
        break_c=np.full(n_break, c_damp),
        break_len0=break_len0,
        break_threshold=np.full(n_break, break_threshold),
        handle_nodes=handle_idx,
        row_anchor_mean=row_mean,
        row_normal=normals,
        handle_direction=-u_dir,
        break_axis=release_axes(anchors, normals, rows, cols),
        break_back=back_tangents(anchors, normals, rows, cols),
    )


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_model(model: VelcroModel, path: str) -> None:
    """Write the model as a JSON document that reloads bit-exactly."""
    params = model.params
    doc = {
        "params": {
            "dx": params.dx, "dy": params.dy,
            "theta_x": params.theta_x, "theta_y": params.theta_y,
            "theta_z": params.theta_z,
            "surface": params.surface.value,
            "radius": params.radius,
            "translation_scale": params.translation_scale,
        },
        "mesh": {
            "rows": model.mesh.rows, "cols": model.mesh.cols,
            "strip_length": model.mesh.strip_length,
            "strip_width": model.mesh.strip_width,
            "layer_gap": model.mesh.layer_gap,
            "handle_length": model.mesh.handle_length,
        },
        "top_nodes": model.top_nodes.tolist(),
        "node_mass": model.node_mass.tolist(),
        "anchors": model.anchors.tolist(),
        "structural": {
            "a": model.struct_a.tolist(), "b": model.struct_b.tolist(),
            "k": model.struct_k.tolist(), "c": model.struct_c.tolist(),
            "len0": model.struct_len0.tolist(),
        },
        "breakable": {
            "node": model.break_node.tolist(),
            "k": model.break_k.tolist(), "c": model.break_c.tolist(),
            "len0": model.break_len0.tolist(),
            "threshold": model.break_threshold.tolist(),
        },
        "handle_nodes": model.handle_nodes.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path: str) -> VelcroModel:
    with open(path) as fh:
        doc = json.load(fh)
    p = doc["params"]
    params = GeometryParams(
        dx=p["dx"], dy=p["dy"], theta_x=p["theta_x"], theta_y=p["theta_y"],
        theta_z=p["theta_z"], surface=Surface(p["surface"]), radius=p["radius"],
        translation_scale=p["translation_scale"],
    )
    mesh = MeshConfig(**doc["mesh"])
    s, b = doc["structural"], doc["breakable"]
    rows, cols = mesh.rows, mesh.cols
    anchors = np.array(doc["anchors"])
    rot = rotation_matrix(params.theta_x, params.theta_y, params.theta_z)
    u_dir = rot @ np.array([1.0, 0.0, 0.0])
    normals = np.stack([
        surface_point(params, r * mesh.strip_length / (rows - 1), 0.0)[1]
        for r in range(rows)
    ])
    return VelcroModel(
        params=params,
        mesh=mesh,
        top_nodes=np.array(doc["top_nodes"]),
        node_mass=np.array(doc["node_mass"]),
        anchors=anchors,
        struct_a=np.array(s["a"], dtype=np.int32),
        struct_b=np.array(s["b"], dtype=np.int32),
        struct_k=np.array(s["k"]),
        struct_c=np.array(s["c"]),
        struct_len0=np.array(s["len0"]),
        break_node=np.array(b["node"], dtype=np.int32),
        break_k=np.array(b["k"]),
        break_c=np.array(b["c"]),
        break_len0=np.array(b["len0"]),
        break_threshold=np.array(b["threshold"]),
        handle_nodes=np.array(doc["handle_nodes"], dtype=np.int32),
        row_anchor_mean=anchors.reshape(rows, cols, 3).mean(axis=1),
        row_normal=normals,
        handle_direction=-u_dir,
        break_axis=release_axes(anchors, normals, rows, cols),
        break_back=back_tangents(anchors, normals, rows, cols),
    )
