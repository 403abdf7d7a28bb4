"""Triangle mesh collision detection and penetration energies.

Detection runs exact triangle-triangle tests on candidate pairs proposed by
a per-mesh axis-aligned-box hierarchy. The hierarchy is built once from a
mesh topology and refit to new vertex positions per frame, which keeps the
containment guarantees while skipping the rebuild.

Intersection uses a strict-interior convention: triangle pairs that merely
touch at a point, an edge, or lie in a common plane do not count. Contact
without penetration must score zero.

The penetration energy follows a local plane field: for a colliding
triangle f with centroid c and outward unit normal n, a point v carries
depth psi = max(0, -(v - c) . n), the distance along the inward normal,
zero on the outward side. Each vertex of a colliding triangle accumulates
the squared norm of -psi times its own vertex normal. The exact analytic
field this stands in for is not published; the plane field keeps the same
deeper-is-worse structure and is differentiable away from contact onset.

Everything here is numpy in float64; callers hand in posed vertices from
the torch side and convert once.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

_EPS_PLANE = 1e-10
_EPS_OVERLAP = 1e-12
_MIN_AREA = 1e-12
# Fixed ray for inside tests, irrational components to dodge edge grazing.
_RAY_DIR = np.array([0.57735026919, 0.577350269190217, 0.5773502691896258])
_RAY_DIR = _RAY_DIR / np.linalg.norm(_RAY_DIR)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # V X 3 float64
    faces: np.ndarray     # F X 3 int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]  # F X 3 X 3

    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        return n / np.maximum(norm, 1e-30)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)

    def vertex_normals(self) -> np.ndarray:
        tri = self.triangles
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # area-weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=-1, keepdims=True)
        return vn / np.maximum(norm, 1e-30)

    def signed_volume(self) -> float:
        tri = self.triangles
        return float(np.einsum("fi,fi->", np.cross(tri[:, 0], tri[:, 1]), tri[:, 2]) / 6.0)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class CollisionReport:
    colliding_pairs: list[tuple[int, int]]
    penetration_loss: float
    per_vertex_depths: dict[str, float] = field(default_factory=dict)


class BVH:
    """Binary box tree over faces; median split on centroids, refit-able.

    Leaves own contiguous slices of a face permutation, so refitting the
    leaf boxes is a reduceat over per-face boxes.
    """

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 8):
        areas = mesh.face_areas()
        good = np.nonzero(areas > _MIN_AREA)[0]
        skipped = np.nonzero(areas <= _MIN_AREA)[0]
        if len(skipped):
            warnings.warn(
                f"BVH: skipping {len(skipped)} degenerate faces: {skipped.tolist()[:8]}"
            )
        self.skipped_faces = skipped.tolist()
        self.faces = mesh.faces
        self.leaf_size = leaf_size

        tri = mesh.triangles[good]
        centroids = tri.mean(axis=1)
        perm_local = np.arange(len(good))

        lefts: list[int] = []
        rights: list[int] = []
        ranges: list[tuple[int, int]] = []
        order: list[int] = []  # post-order for bottom-up refit

        def build(lo: int, hi: int) -> int:
            idx = len(lefts)
            lefts.append(-1)
            rights.append(-1)
            ranges.append((lo, hi))
            if hi - lo > leaf_size:
                sub = centroids[perm_local[lo:hi]]
                axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
                key = np.argsort(sub[:, axis], kind="stable")
                perm_local[lo:hi] = perm_local[lo:hi][key]
                mid = (lo + hi) // 2
                lefts[idx] = build(lo, mid)
                rights[idx] = build(mid, hi)
            order.append(idx)
            return idx

        if len(good):
            build(0, len(good))
        self.left = np.asarray(lefts, dtype=np.int64)
        self.right = np.asarray(rights, dtype=np.int64)
        self.ranges = np.asarray(ranges, dtype=np.int64).reshape(-1, 2)
        self.post_order = order
        self.perm = good[perm_local]  # slice -> original face indices
        self.lo = np.zeros((len(lefts), 3))
        self.hi = np.zeros((len(lefts), 3))
        self.refit(mesh.vertices)

    @property
    def num_nodes(self) -> int:
        return len(self.left)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_faces(self, node: int) -> np.ndarray:
        lo, hi = self.ranges[node]
        return self.perm[lo:hi]

    def refit(self, vertices: np.ndarray) -> None:
        """Recompute all boxes for new vertex positions, same topology."""
        if self.num_nodes == 0:
            return
        tri = np.asarray(vertices, dtype=np.float64)[self.faces[self.perm]]
        face_lo = tri.min(axis=1)
        face_hi = tri.max(axis=1)
        for node in self.post_order:
            if self.is_leaf(node):
                lo, hi = self.ranges[node]
                self.lo[node] = face_lo[lo:hi].min(axis=0)
                self.hi[node] = face_hi[lo:hi].max(axis=0)
            else:
                l, r = self.left[node], self.right[node]
                self.lo[node] = np.minimum(self.lo[l], self.lo[r])
                self.hi[node] = np.maximum(self.hi[l], self.hi[r])


def build_bvh(mesh: TriangleMesh, leaf_size: int = 8) -> BVH:
    return BVH(mesh, leaf_size=leaf_size)


def _boxes_overlap(bvh_a: BVH, i: int, bvh_b: BVH, j: int) -> bool:
    return bool(
        (bvh_a.lo[i] <= bvh_b.hi[j] + _EPS_OVERLAP).all()
        and (bvh_b.lo[j] <= bvh_a.hi[i] + _EPS_OVERLAP).all()
    )


def candidate_pairs(bvh_a: BVH, bvh_b: BVH) -> np.ndarray:
    """Face index pairs whose leaf boxes overlap, shape P X 2.

    A superset of the truly intersecting pairs.
    """
    if bvh_a.num_nodes == 0 or bvh_b.num_nodes == 0:
        return np.zeros((0, 2), dtype=np.int64)
    out_a: list[np.ndarray] = []
    out_b: list[np.ndarray] = []
    stack = [(0, 0)]
    while stack:
        i, j = stack.pop()
        if not _boxes_overlap(bvh_a, i, bvh_b, j):
            continue
        leaf_i = bvh_a.is_leaf(i)
        leaf_j = bvh_b.is_leaf(j)
        if leaf_i and leaf_j:
            fa = bvh_a.leaf_faces(i)
            fb = bvh_b.leaf_faces(j)
            grid_a = np.repeat(fa, len(fb))
            grid_b = np.tile(fb, len(fa))
            out_a.append(grid_a)
            out_b.append(grid_b)
        elif leaf_i or (
            not leaf_j
            and (bvh_b.hi[j] - bvh_b.lo[j]).sum() > (bvh_a.hi[i] - bvh_a.lo[i]).sum()
        ):
            stack.append((i, bvh_b.left[j]))
            stack.append((i, bvh_b.right[j]))
        else:
            stack.append((bvh_a.left[i], j))
            stack.append((bvh_a.right[i], j))
    if not out_a:
        return np.zeros((0, 2), dtype=np.int64)
    return np.stack([np.concatenate(out_a), np.concatenate(out_b)], axis=1)


def _plane(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    d = -np.einsum("pi,pi->p", n, tri[:, 0])
    return n, d


def _interval_on_axis(
    tri: np.ndarray, dist: np.ndarray, coord: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Projection interval of a triangle's plane-crossing set onto an axis.

    tri: P X 3 X 3, dist: P X 3 signed distances to the other plane,
    coord: P X 3 vertex coordinates along the chosen axis. Candidate points
    are vertices lying on the plane and edges whose endpoints strictly
    straddle it.
    """
    cands = []
    masks = []
    on_plane = np.abs(dist) <= _EPS_PLANE
    for k in range(3):
        cands.append(coord[:, k])
        masks.append(on_plane[:, k])
    for i, j in ((0, 1), (1, 2), (2, 0)):
        di, dj = dist[:, i], dist[:, j]
        cross = ((di > _EPS_PLANE) & (dj < -_EPS_PLANE)) | (
            (di < -_EPS_PLANE) & (dj > _EPS_PLANE)
        )
        denom = np.where(cross, di - dj, 1.0)
        t = np.where(cross, di / denom, 0.0)
        cands.append(coord[:, i] + t * (coord[:, j] - coord[:, i]))
        masks.append(cross)
    cand = np.stack(cands, axis=1)   # P X 6
    mask = np.stack(masks, axis=1)
    lo = np.where(mask, cand, np.inf).min(axis=1)
    hi = np.where(mask, cand, -np.inf).max(axis=1)
    return lo, hi


def tri_tri_intersect(tri_a: np.ndarray, tri_b: np.ndarray) -> np.ndarray:
    """Strict-interior intersection test for P triangle pairs.

    tri_a, tri_b: P X 3 X 3. Returns a boolean mask. Touching contacts and
    coplanar overlap return False.
    """
    tri_a = np.asarray(tri_a, dtype=np.float64)
    tri_b = np.asarray(tri_b, dtype=np.float64)
    n_a, d_a = _plane(tri_a)
    n_b, d_b = _plane(tri_b)

    dist_a = np.einsum("pi,pki->pk", n_b, tri_a) + d_b[:, None]  # P X 3
    dist_b = np.einsum("pi,pki->pk", n_a, tri_b) + d_a[:, None]
    straddle_a = (dist_a > _EPS_PLANE).any(axis=1) & (dist_a < -_EPS_PLANE).any(axis=1)
    straddle_b = (dist_b > _EPS_PLANE).any(axis=1) & (dist_b < -_EPS_PLANE).any(axis=1)
    alive = straddle_a & straddle_b
    if not alive.any():
        return alive

    line = np.cross(n_a, n_b)
    axis = np.argmax(np.abs(line), axis=1)  # P
    rows = np.arange(len(tri_a))
    coord_a = tri_a[rows[:, None], np.arange(3)[None, :], axis[:, None]]
    coord_b = tri_b[rows[:, None], np.arange(3)[None, :], axis[:, None]]

    lo_a, hi_a = _interval_on_axis(tri_a, dist_a, coord_a)
    lo_b, hi_b = _interval_on_axis(tri_b, dist_b, coord_b)
    overlap = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    return alive & (overlap > _EPS_OVERLAP)


def colliding_triangles(
    mesh_a: TriangleMesh,
    mesh_b: TriangleMesh,
    bvh_a: BVH | None = None,
    bvh_b: BVH | None = None,
) -> list[tuple[int, int]]:
    """Sorted list of strictly intersecting (face in A, face in B) pairs."""
    if bvh_a is None:
        bvh_a = build_bvh(mesh_a)
    if bvh_b is None:
        bvh_b = build_bvh(mesh_b)
    cand = candidate_pairs(bvh_a, bvh_b)
    if len(cand) == 0:
        return []
    hit = tri_tri_intersect(mesh_a.triangles[cand[:, 0]], mesh_b.triangles[cand[:, 1]])
    pairs = cand[hit]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return [(int(a), int(b)) for a, b in pairs[order]]


def _plane_depths(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """psi for P X M points against P triangles: max(0, -(v - c) . n_hat)."""
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-30)
    c = tri.mean(axis=1)
    return np.maximum(0.0, -np.einsum("pmi,pi->pm", points - c[:, None], n))


def penetration_loss(
    mesh_a: TriangleMesh,
    mesh_b: TriangleMesh,
    bvh_a: BVH | None = None,
    bvh_b: BVH | None = None,
) -> CollisionReport:
    """Plane-field penetration energy over the colliding triangle set.

    For each colliding pair, every vertex of one triangle that sits behind
    the other triangle's plane contributes the squared norm of its depth
    times its own vertex normal; both directions are accumulated, in sorted
    pair order so reruns match bit for bit.
    """
    pairs = colliding_triangles(mesh_a, mesh_b, bvh_a, bvh_b)
    if not pairs:
        return CollisionReport([], 0.0, {})

    idx = np.asarray(pairs, dtype=np.int64)
    tri_a = mesh_a.triangles[idx[:, 0]]
    tri_b = mesh_b.triangles[idx[:, 1]]
    vn_a = mesh_a.vertex_normals()[mesh_a.faces[idx[:, 0]]]  # P X 3 X 3
    vn_b = mesh_b.vertex_normals()[mesh_b.faces[idx[:, 1]]]

    psi_a = _plane_depths(tri_a, tri_b)  # P X 3, depth of A verts in B's field
    psi_b = _plane_depths(tri_b, tri_a)
    contrib_a = ((-psi_a[..., None] * vn_a) ** 2).sum(axis=-1)  # P X 3
    contrib_b = ((-psi_b[..., None] * vn_b) ** 2).sum(axis=-1)
    loss = float(np.sum(contrib_a) + np.sum(contrib_b))

    depths: dict[str, float] = {}
    for tag, psi, faces, rows in (
        ("a", psi_a, mesh_a.faces, idx[:, 0]),
        ("b", psi_b, mesh_b.faces, idx[:, 1]),
    ):
        hit = np.nonzero(psi > 0.0)
        for p, k in zip(*hit):
            key = f"{tag}:{int(faces[rows[p], k])}"
            depths[key] = max(depths.get(key, 0.0), float(psi[p, k]))
    return CollisionReport(pairs, loss, depths)


def _ray_hits(origins: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Crossing counts of the fixed ray from each origin against all faces.

    origins: M X 3, tri: F X 3 X 3. Returns int crossings per origin.
    """
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(_RAY_DIR, e2)  # F X 3
    det = np.einsum("fi,fi->f", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - tri[None, :, 0]  # M X F X 3
    u = np.einsum("mfi,fi->mf", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.einsum("mfi,i->mf", qvec, _RAY_DIR) * inv
    t = np.einsum("mfi,fi->mf", qvec, e2) * inv
    hit = ok[None] & (u > 1e-12) & (v > 1e-12) & (u + v < 1.0 - 1e-12) & (t > 1e-12)
    return hit.sum(axis=1)


def points_inside(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Ray-parity inside test for M X 3 points against a watertight mesh."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    lo, hi = mesh.aabb()
    rough = ((points >= lo - 1e-9) & (points <= hi + 1e-9)).all(axis=1)
    inside = np.zeros(len(points), dtype=bool)
    if rough.any():
        crossings = _ray_hits(points[rough], mesh.triangles)
        inside[rough] = (crossings % 2) == 1
    return inside


def point_triangle_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distance from each of M points to the nearest of F triangles.

    Projects onto the plane, clamps to the triangle via edge regions.
    Returns M distances.
    """
    points = np.asarray(points, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    p = points[:, None, :]  # M X 1 X 3
    ap = p - a[None]
    d1 = np.einsum("mfi,fi->mf", ap, ab)
    d2 = np.einsum("mfi,fi->mf", ap, ac)
    bp = p - b[None]
    d3 = np.einsum("mfi,fi->mf", bp, ab)
    d4 = np.einsum("mfi,fi->mf", bp, ac)
    cp = p - c[None]
    d5 = np.einsum("mfi,fi->mf", cp, ab)
    d6 = np.einsum("mfi,fi->mf", cp, ac)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.maximum(va + vb + vc, 1e-300)
    v = vb / denom
    w = vc / denom

    # Start from the interior projection, then overwrite by region.
    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]

    # Vertex regions.
    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    cond_c = (d6 >= 0) & (d5 <= d6)
    # Edge regions.
    t_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    reg_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    reg_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    num_bc = d4 - d3
    den_bc = (d4 - d3) + (d5 - d6)
    t_bc = np.divide(num_bc, den_bc, out=np.zeros_like(num_bc), where=den_bc != 0)
    reg_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    pick = lambda mask, val: np.where(mask[..., None], val, closest)
    closest = pick(reg_bc, b[None] + t_bc[..., None] * (c - b)[None])
    closest = pick(reg_ac, a[None] + t_ac[..., None] * ac[None])
    closest = pick(reg_ab, a[None] + t_ab[..., None] * ab[None])
    closest = pick(cond_c, c[None])
    closest = pick(reg_b, b[None])
    closest = pick(reg_a, a[None])

    d = np.linalg.norm(p - closest, axis=-1)
    return d.min(axis=1)


def penetrating_depths(mesh_a: TriangleMesh, mesh_b: TriangleMesh) -> np.ndarray:
    """Nearest-surface depth for every vertex of A inside B and of B inside A."""
    out = []
    for src, dst in ((mesh_a, mesh_b), (mesh_b, mesh_a)):
        inside = points_inside(src.vertices, dst)
        if inside.any():
            out.append(point_triangle_distances(src.vertices[inside], dst.triangles))
    if not out:
        return np.zeros(0)
    return np.concatenate(out)


def average_penetration_depth(mesh_a: TriangleMesh, mesh_b: TriangleMesh) -> float:
    """Mean nearest-surface depth over penetrating vertices, 0 when none."""
    depths = penetrating_depths(mesh_a, mesh_b)
    if len(depths) == 0:
        return 0.0
    return float(depths.mean())


def report_to_text(report: CollisionReport) -> str:
    lines = [
        f"penetration_loss {report.penetration_loss:.9e}",
        f"colliding_pairs {len(report.colliding_pairs)}",
    ]
    for a, b in report.colliding_pairs:
        lines.append(f"pair {a} {b}")
    for key in sorted(report.per_vertex_depths):
        lines.append(f"depth {key} {report.per_vertex_depths[key]:.9e}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> CollisionReport:
    loss = 0.0
    pairs: list[tuple[int, int]] = []
    depths: dict[str, float] = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "penetration_loss":
            loss = float(parts[1])
        elif parts[0] == "pair":
            pairs.append((int(parts[1]), int(parts[2])))
        elif parts[0] == "depth":
            depths[parts[1]] = float(parts[2])
    return CollisionReport(pairs, loss, depths)
