"""TSDF fusion of registered clouds and surface extraction.

The volume stores a truncated signed distance and an accumulation weight
at every voxel center.  Registered clouds are integrated by updating all
voxels within the truncation band of any point: the signed distance of a
voxel is the projection of its offset from the nearest point onto that
point's normal, so the zero level set tracks the observed surface.  The
mesh is pulled out with the classic 256-case marching-cubes tables over
cells whose eight corners have all been observed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._mc_tables import CORNER_OFFSETS, EDGE_ANCHORS, TRI_TABLE
from .errors import EmptyInputError, EmptyMeshError, OpenMeshError
from .geometry import PointCloud, RigidTransform, _freeze


class TsdfVolume:
    """Cubic truncated-signed-distance volume.

    ``tsdf`` is normalized to [-1, 1] (signed distance over truncation),
    initialized to +1 (free space); ``weights`` start at 0 (unobserved).
    """

    def __init__(
        self,
        center,
        side_mm: float = 350.0,
        resolution: int = 256,
        truncation: float | None = None,
    ):
        if side_mm <= 0.0 or resolution < 2:
            raise ValueError("side_mm must be positive and resolution >= 2")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.side_mm = float(side_mm)
        self.resolution = int(resolution)
        self.voxel_size = self.side_mm / self.resolution
        if self.voxel_size > 6.0:
            raise ValueError(f"voxel size {self.voxel_size:.2f} mm exceeds the 6 mm cap")
        self.truncation = 3.0 * self.voxel_size if truncation is None else float(truncation)
        if self.truncation <= 0.0:
            raise ValueError("truncation must be positive")
        # Position of the (0,0,0) voxel center.
        self.origin = self.center - self.side_mm / 2.0 + self.voxel_size / 2.0
        shape = (self.resolution,) * 3
        self.tsdf = np.ones(shape, dtype=np.float64)
        self.weights = np.zeros(shape, dtype=np.float64)

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(indices, dtype=np.float64) * self.voxel_size


def _candidate_voxels(vol: TsdfVolume, points: np.ndarray) -> np.ndarray:
    """Unique voxel indices whose centers can lie within truncation of a point."""
    reach = vol.truncation / vol.voxel_size + math.sqrt(3.0) / 2.0
    r = int(math.ceil(reach))
    axis = np.arange(-r, r + 1)
    offs = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    offs = offs[np.linalg.norm(offs, axis=1) <= reach]
    base = np.round((points - vol.origin) / vol.voxel_size).astype(np.int64)
    cand = (base[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    ok = np.all((cand >= 0) & (cand < vol.resolution), axis=1)
    cand = cand[ok]
    if len(cand) == 0:
        return cand
    lin = (cand[:, 0] * vol.resolution + cand[:, 1]) * vol.resolution + cand[:, 2]
    keep = np.unique(lin)
    out = np.empty((len(keep), 3), dtype=np.int64)
    out[:, 0], rem = divmod(keep, vol.resolution * vol.resolution)
    out[:, 1], out[:, 2] = divmod(rem, vol.resolution)
    return out


def integrate(vol: TsdfVolume, cloud: PointCloud, pose: RigidTransform) -> TsdfVolume:
    """Fuse one registered cloud into the volume (running weighted average).

    Every voxel center within the truncation distance of some transformed
    point gets the signed distance ``dot(center - nearest point, nearest
    normal)``, clamped to the truncation band.  Points outside the volume
    are ignored; the increment weight is 1.
    """
    if cloud.normals is None:
        raise ValueError("integration needs per-point normals")
    if len(cloud.points) == 0:
        return vol
    pts = pose.apply(cloud.points)
    nrm = cloud.normals @ pose.rotation.T
    lo = vol.center - vol.side_mm / 2.0
    hi = vol.center + vol.side_mm / 2.0
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    pts, nrm = pts[inside], nrm[inside]
    if len(pts) == 0:
        return vol
    voxels = _candidate_voxels(vol, pts)
    if len(voxels) == 0:
        return vol
    centers = vol.voxel_centers(voxels)
    dist, nearest = cKDTree(pts).query(centers)
    in_band = dist <= vol.truncation
    voxels, centers, nearest = voxels[in_band], centers[in_band], nearest[in_band]
    if len(voxels) == 0:
        return vol
    sd = np.einsum("ij,ij->i", centers - pts[nearest], nrm[nearest])
    sd = np.clip(sd / vol.truncation, -1.0, 1.0)
    ix, iy, iz = voxels.T
    w_old = vol.weights[ix, iy, iz]
    t_old = vol.tsdf[ix, iy, iz]
    # Unobserved voxels hold the free-space placeholder +1 with weight 0,
    # so the average starts from the new sample alone.
    w_new = w_old + 1.0
    vol.tsdf[ix, iy, iz] = (t_old * w_old + sd) / w_new
    vol.weights[ix, iy, iz] = w_new
    return vol


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup with optional per-vertex normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(t) and np.any(
            (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        ):
            raise ValueError("degenerate triangle with a repeated vertex index")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "triangles", _freeze(t))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(v):
                raise ValueError("need one normal per vertex")
            object.__setattr__(self, "normals", _freeze(n))

    def edges(self) -> np.ndarray:
        """Undirected unique edges as sorted index pairs."""
        e = np.vstack(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        return np.unique(np.sort(e, axis=1), axis=0)


def euler_characteristic(mesh: TriangleMesh) -> int:
    return len(mesh.vertices) - len(mesh.edges()) + len(mesh.triangles)


def is_closed(mesh: TriangleMesh) -> bool:
    """True when every edge is shared by exactly two consistently wound triangles."""
    if len(mesh.triangles) == 0:
        return False
    directed = np.vstack(
        [mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]]
    )
    keys = directed[:, 0] * len(mesh.vertices) + directed[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False  # repeated directed edge: inconsistent winding
    swapped = directed[:, 1] * len(mesh.vertices) + directed[:, 0]
    return bool(np.all(np.isin(keys, swapped)))


def _vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    face_n = np.cross(b - a, c - a)  # area-weighted
    out = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(out, triangles[:, i], face_n)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms > 0.0, norms, 1.0)


def _prune_components(vertices, triangles, min_fraction=0.01):
    """Drop connected components carrying fewer than ``min_fraction`` of triangles."""
    nv, nt = len(vertices), len(triangles)
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
    _, labels = connected_components(adj, directed=False)
    tri_labels = labels[triangles[:, 0]]
    counts = np.bincount(tri_labels)
    keep_labels = np.nonzero(counts >= min_fraction * nt)[0]
    keep = np.isin(tri_labels, keep_labels)
    triangles = triangles[keep]
    used = np.unique(triangles)
    remap = np.full(nv, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles]


def extract_mesh(vol: TsdfVolume, min_component_fraction: float = 0.01) -> TriangleMesh:
    """Marching cubes over the zero level set of the fused volume.

    Only cells whose eight corner voxels all carry positive weight are
    polygonized; vertices are deduplicated across cells by global edge id
    and linearly interpolated along the crossing edge.
    """
    res = vol.resolution
    inside = vol.tsdf < 0.0
    observed = vol.weights > 0.0
    n = res - 1
    case = np.zeros((n, n, n), dtype=np.int32)
    all_observed = np.ones((n, n, n), dtype=bool)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner_inside = inside[ox : ox + n, oy : oy + n, oz : oz + n]
        case |= corner_inside.astype(np.int32) << bit
        all_observed &= observed[ox : ox + n, oy : oy + n, oz : oz + n]
    active = (case != 0) & (case != 255) & all_observed
    ix, iy, iz = np.nonzero(active)
    if len(ix) == 0:
        raise EmptyMeshError("no observed zero crossing in the volume")
    cell_case = case[ix, iy, iz]

    # Global id of each of the 12 cell edges: anchor grid point * 3 + axis.
    anchor = EDGE_ANCHORS[:, :3]
    axis = EDGE_ANCHORS[:, 3].astype(np.int64)
    gx = ix[:, None] + anchor[None, :, 0]
    gy = iy[:, None] + anchor[None, :, 1]
    gz = iz[:, None] + anchor[None, :, 2]
    edge_ids = ((gx * res + gy) * res + gz) * 3 + axis[None, :]

    tri_edges = TRI_TABLE[cell_case]  # (cells, 16), -1 padded
    valid = tri_edges >= 0
    face_ids = np.take_along_axis(
        edge_ids, np.where(valid, tri_edges, 0).astype(np.int64), axis=1
    )[valid]
    unique_ids, tri_flat = np.unique(face_ids, return_inverse=True)
    triangles = tri_flat.reshape(-1, 3)

    # Interpolate each unique crossing edge once, low corner toward high.
    ax = unique_ids % 3
    lin = unique_ids // 3
    vx, rem = np.divmod(lin, res * res)
    vy, vz = np.divmod(rem, res)
    lo = np.column_stack([vx, vy, vz])
    hi = lo.copy()
    hi[np.arange(len(hi)), ax] += 1
    v_lo = vol.tsdf[lo[:, 0], lo[:, 1], lo[:, 2]]
    v_hi = vol.tsdf[hi[:, 0], hi[:, 1], hi[:, 2]]
    t = v_lo / (v_lo - v_hi)
    step = np.zeros((len(t), 3))
    step[np.arange(len(t)), ax] = t
    vertices = vol.voxel_centers(lo) + step * vol.voxel_size

    # The raw table winding faces the negative (inside) region; flip so
    # triangle normals point outward.
    triangles = triangles[:, ::-1]
    vertices, triangles = _prune_components(vertices, triangles, min_component_fraction)
    if len(triangles) == 0:
        raise EmptyMeshError("all surface components fell below the size threshold")
    return TriangleMesh(vertices, triangles, _vertex_normals(vertices, triangles))


def laplacian_smooth(mesh: TriangleMesh, iterations: int, lam: float = 0.5) -> TriangleMesh:
    """Uniform-weight Laplacian smoothing: v <- v + lam * (neighbor mean - v)."""
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    if iterations == 0:
        return mesh
    edges = mesh.edges()
    degree = np.zeros(len(mesh.vertices))
    np.add.at(degree, edges[:, 0], 1.0)
    np.add.at(degree, edges[:, 1], 1.0)
    if np.any(degree == 0):
        raise ValueError("smoothing needs every vertex connected to an edge")
    verts = mesh.vertices.copy()
    for _ in range(iterations):
        acc = np.zeros_like(verts)
        np.add.at(acc, edges[:, 0], verts[edges[:, 1]])
        np.add.at(acc, edges[:, 1], verts[edges[:, 0]])
        verts += lam * (acc / degree[:, None] - verts)
    normals = None
    if mesh.normals is not None:
        normals = _vertex_normals(verts, mesh.triangles)
    return TriangleMesh(verts, mesh.triangles, normals)


@dataclass(frozen=True)
class Probe:
    """One named measurement request against the final mesh.

    kinds: ``extent`` (size along ``axis``), ``slice_diameter`` (largest
    pairwise distance among surface points at ``position`` along ``axis``),
    ``volume`` (signed enclosed volume, requires a closed mesh).
    """

    name: str
    kind: str
    axis: int = 2
    position: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("extent", "slice_diameter", "volume"):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1, or 2")


def _slice_points(mesh: TriangleMesh, axis: int, position: float) -> np.ndarray:
    """Edge/plane intersection points of the mesh with coordinate = position."""
    edges = mesh.edges()
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    da = a[:, axis] - position
    db = b[:, axis] - position
    crossing = (da * db) < 0.0
    a, b, da, db = a[crossing], b[crossing], da[crossing], db[crossing]
    t = da / (da - db)
    pts = a + t[:, None] * (b - a)
    exact = mesh.vertices[np.abs(mesh.vertices[:, axis] - position) == 0.0]
    return np.vstack([pts, exact]) if len(exact) else pts


def signed_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume by signed tetrahedra; positive for outward winding."""
    if not is_closed(mesh):
        raise OpenMeshError("volume requires a closed, consistently wound mesh")
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)


def measure_dimensions(mesh: TriangleMesh, probes) -> dict[str, float]:
    """Evaluate named probes against the mesh; returns name -> millimeters/mm^3."""
    if len(mesh.vertices) == 0:
        raise EmptyInputError("cannot measure an empty mesh")
    out: dict[str, float] = {}
    for probe in probes:
        if probe.kind == "extent":
            coords = mesh.vertices[:, probe.axis]
            out[probe.name] = float(coords.max() - coords.min())
        elif probe.kind == "slice_diameter":
            pts = _slice_points(mesh, probe.axis, probe.position)
            if len(pts) < 2:
                raise EmptyInputError(
                    f"probe {probe.name!r}: slice plane misses the mesh"
                )
            if len(pts) > 400:
                from scipy.spatial import ConvexHull

                keep = np.delete(np.arange(3), probe.axis)
                try:
                    pts = pts[ConvexHull(pts[:, keep]).vertices]
                except Exception:
                    pass  # nearly collinear slice: fall through to all pairs
            diff = pts[:, None, :] - pts[None, :, :]
            out[probe.name] = float(np.sqrt((diff**2).sum(-1)).max())
        else:
            out[probe.name] = signed_volume(mesh)
    return out
