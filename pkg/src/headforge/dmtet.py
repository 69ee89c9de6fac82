"""Fine-stage geometry: deformable tet grid, marching tetrahedra, rasterization.

The grid is a body-centered lattice (cube corners + cell centers; four tets
per internal cell face). Each vertex carries an optimizable signed-distance
value s and an offset dv clamped to half a cell. Surfaces are extracted with
marching tetrahedra (crossing vertex at the linear zero of s along each edge,
so extraction is differentiable w.r.t. both s and dv), textured by the coarse
color field, and rasterized with a hard z-buffer.

Geometry gradients flow only through crossing-vertex positions at visible
pixels; there are no silhouette/coverage gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import CameraPose, project_points
from .errors import ExtractionError, ShapeError
from .field import FieldParams, color_eval, field_eval
from .head_prior import HeadMesh, PriorField, cached_distance_grid, signed_distance

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_ZERO_NUDGE = 1e-8
_OCC_EPS = 1e-5


# ---------------------------------------------------------------------------
# Case table: for each of the 16 sign patterns, triangles as local-edge ids,
# wound so normals point toward s > 0. Derived geometrically on the canonical
# positively-oriented tet; valid for every positively-oriented tet.

def _build_case_table():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    table = []
    for code in range(16):
        occ = [(code >> i) & 1 for i in range(4)]
        crossing = [e for e, (p, q) in enumerate(TET_EDGES) if occ[p] != occ[q]]
        if not crossing:
            table.append(())
            continue
        mid = {e: 0.5 * (corners[TET_EDGES[e][0]] + corners[TET_EDGES[e][1]]) for e in crossing}
        pos_centroid = corners[[i for i in range(4) if occ[i]]].mean(axis=0)

        def oriented(tri):
            a, b, c = (mid[e] for e in tri)
            n = np.cross(b - a, c - a)
            center = (a + b + c) / 3.0
            return tri if np.dot(n, pos_centroid - center) > 0 else (tri[0], tri[2], tri[1])

        if len(crossing) == 3:
            table.append((oriented(tuple(crossing)),))
        else:
            # order the 4 crossing edges into a quad cycle: two crossing edges
            # are quad-adjacent iff they lie on a common tet face
            def on_common_face(e1, e2):
                return len(set(TET_EDGES[e1]) | set(TET_EDGES[e2])) == 3

            first = crossing[0]
            nbrs = [e for e in crossing[1:] if on_common_face(first, e)]
            opposite = next(e for e in crossing[1:] if e not in nbrs)
            cycle = (first, nbrs[0], opposite, nbrs[1])
            table.append((oriented(cycle[:3]), oriented((cycle[0], cycle[2], cycle[3]))))
    return tuple(table)


CASE_TABLE = _build_case_table()


# ---------------------------------------------------------------------------
# Grid


@dataclass
class TetGrid:
    vertices: np.ndarray  # (V, 3) canonical lattice positions
    tets: np.ndarray  # (T, 4) int64, positively oriented
    s: torch.Tensor  # (V,) signed distance values
    dv: torch.Tensor  # (V, 3) offsets, |dv| <= cell/2 per component
    cell: float
    resolution: int

    def clamp_offsets(self) -> None:
        with torch.no_grad():
            self.dv.clamp_(-self.cell / 2.0, self.cell / 2.0)

    def effective_vertices(self) -> torch.Tensor:
        base = torch.tensor(self.vertices, dtype=self.dv.dtype)
        return base + self.dv.clamp(-self.cell / 2.0, self.cell / 2.0)

    def tet_volumes(self) -> torch.Tensor:
        v = self.effective_vertices()[torch.tensor(self.tets, dtype=torch.long)]
        e = v[:, 1:] - v[:, :1]
        return torch.det(e) / 6.0


@dataclass
class TriMesh:
    vertices: torch.Tensor  # (N, 3); carries autograd graph after extraction
    faces: np.ndarray  # (F, 3) int64
    vertex_colors: np.ndarray | None = None

    @property
    def vertices_np(self) -> np.ndarray:
        return self.vertices.detach().cpu().numpy()

    def to_head_mesh(self) -> HeadMesh:
        return HeadMesh(self.vertices_np.astype(np.float64), self.faces.copy())


def build_bcc_lattice(resolution: int, lo, hi) -> tuple[np.ndarray, np.ndarray, float]:
    """Corners + cell centers; 4 tets per internal cell face."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    R = resolution
    cell = float((hi - lo).max() / R)
    axes = [np.linspace(lo[i], lo[i] + cell * R, R + 1) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    corners = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    caxes = [axes[i][:-1] + cell / 2.0 for i in range(3)]
    cx, cy, cz = np.meshgrid(*caxes, indexing="ij")
    centers = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    verts = np.concatenate([corners, centers], axis=0)

    def corner_id(i, j, k):
        return (i * (R + 1) + j) * (R + 1) + k

    def center_id(i, j, k):
        return (R + 1) ** 3 + (i * R + j) * R + k

    tets = []
    ii, jj, kk = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
    for axis in range(3):
        # neighbour cell in +axis direction
        sel = [ii, jj, kk][axis] < R - 1
        a = np.stack([ii[sel], jj[sel], kk[sel]], axis=-1)
        b = a.copy()
        b[:, axis] += 1
        c1 = center_id(a[:, 0], a[:, 1], a[:, 2])
        c2 = center_id(b[:, 0], b[:, 1], b[:, 2])
        # shared face corners, as a cycle
        f = b.copy()
        others = [ax for ax in range(3) if ax != axis]
        ring = []
        for d0, d1 in ((0, 0), (1, 0), (1, 1), (0, 1)):
            g = f.copy()
            g[:, others[0]] += d0
            g[:, others[1]] += d1
            ring.append(corner_id(g[:, 0], g[:, 1], g[:, 2]))
        for e in range(4):
            tets.append(np.stack([c1, c2, ring[e], ring[(e + 1) % 4]], axis=-1))
    tets = np.concatenate(tets, axis=0).astype(np.int64)

    # enforce positive orientation by swapping the face pair where needed
    v = verts[tets]
    vol = np.linalg.det(v[:, 1:] - v[:, :1])
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return verts, tets, cell


def init_grid(
    resolution: int,
    prior: PriorField | None = None,
    coarse: FieldParams | None = None,
    bounds=None,
    iso: float = 0.5,
    prior_grid_res: int = 96,
    dtype: torch.dtype = torch.float32,
) -> TetGrid:
    """Lattice with s from the prior's signed distance, or from a coarse field
    via the opacity proxy occ = 1 - exp(-sigma * cell), s = logit(iso) - logit(occ).
    """
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    if prior is None:
        raise ValueError("a prior mesh is required to size the lattice")
    if bounds is None:
        center, radius = prior.mesh.bounding_sphere()
        half = radius * 1.25
        bounds = (center - half, center + half)
    verts, tets, cell = build_bcc_lattice(resolution, *bounds)

    if coarse is None:
        s = signed_distance(prior, verts)
    else:
        grid = cached_distance_grid(prior, prior_grid_res)
        sig_chunks = []
        with torch.no_grad():
            for i in range(0, len(verts), 1 << 16):
                chunk = torch.tensor(verts[i : i + (1 << 16)], dtype=dtype)
                sig, _, _ = field_eval(coarse, prior, chunk, distance_fn=grid.query, validate=False)
                sig_chunks.append(sig.numpy())
        sigma = np.concatenate(sig_chunks).astype(np.float64)
        occ = np.clip(1.0 - np.exp(-sigma * cell), _OCC_EPS, 1.0 - _OCC_EPS)
        s = np.log(iso / (1.0 - iso)) - (np.log(occ) - np.log1p(-occ))

    return TetGrid(
        vertices=verts,
        tets=tets,
        s=torch.tensor(s, dtype=dtype),
        dv=torch.zeros((len(verts), 3), dtype=dtype),
        cell=cell,
        resolution=resolution,
    )


# ---------------------------------------------------------------------------
# Marching tetrahedra


def marching_tets(grid: TetGrid) -> TriMesh:
    """Extract the s=0 surface; differentiable w.r.t. grid.s and grid.dv."""
    s = grid.s
    s = torch.where(s == 0.0, s + _ZERO_NUDGE, s)
    verts = grid.effective_vertices()
    tets = grid.tets

    occ_vertex = (s > 0).numpy()  # (V,)
    occ = occ_vertex[tets]  # (T, 4)
    code = (occ * (1 << np.arange(4))).sum(axis=1)
    active = np.nonzero((code > 0) & (code < 15))[0]
    if active.size == 0:
        return TriMesh(verts.new_zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    vols = np.linalg.det(
        grid.vertices[tets[active, 1:]] - grid.vertices[tets[active, :1]]
    )
    degenerate = np.nonzero(np.abs(vols) < 1e-14)[0]
    if degenerate.size:
        raise ExtractionError(f"degenerate tet at index {int(active[degenerate[0]])}")

    # global crossing edges, deduplicated by sorted vertex pair
    local = np.array(TET_EDGES, dtype=np.int64)
    edges = tets[active][:, local]  # (A, 6, 2)
    edges = np.sort(edges.reshape(-1, 2), axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    crossing_mask = occ_vertex[uniq[:, 0]] != occ_vertex[uniq[:, 1]]
    new_index = np.full(len(uniq), -1, dtype=np.int64)
    new_index[crossing_mask] = np.arange(crossing_mask.sum())

    pq = uniq[crossing_mask]
    sp = s[torch.tensor(pq[:, 0])]
    sq = s[torch.tensor(pq[:, 1])]
    t = (sp / (sp - sq))[:, None]
    vp = verts[torch.tensor(pq[:, 0])]
    vq = verts[torch.tensor(pq[:, 1])]
    out_verts = vp + t * (vq - vp)

    edge_rows = new_index[inverse].reshape(-1, 6)  # per active tet: local edge -> vertex
    faces = []
    for case in range(1, 15):
        rows = np.nonzero(code[active] == case)[0]
        if rows.size == 0:
            continue
        for tri in CASE_TABLE[case]:
            faces.append(edge_rows[rows][:, list(tri)])
    faces = np.concatenate(faces, axis=0) if faces else np.zeros((0, 3), dtype=np.int64)
    return TriMesh(out_verts, faces)


# ---------------------------------------------------------------------------
# Rasterization


@dataclass
class RasterResult:
    rgb: np.ndarray  # (H, W, 3) float32
    visibility: np.ndarray  # (H, W) int64 triangle index, -1 for background
    image_graph: torch.Tensor | None = None  # same image, with autograd graph


def _raster_coverage(verts2d, depth, faces, width, height):
    """Hard z-buffer: winning (pixel, face, perspective-correct barycentric)."""
    tri_uv = verts2d[faces]  # (F, 3, 2)
    tri_z = depth[faces]  # (F, 3)
    front = (tri_z > 1e-6).all(axis=1)
    x0 = np.clip(np.floor(tri_uv[..., 0].min(axis=1) - 0.5), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(tri_uv[..., 0].max(axis=1) + 0.5), 0, width).astype(np.int64)
    y0 = np.clip(np.floor(tri_uv[..., 1].min(axis=1) - 0.5), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(tri_uv[..., 1].max(axis=1) + 0.5), 0, height).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = np.where(front, nx * ny, 0)

    pix_all, tri_all, bary_all, z_all = [], [], [], []
    CH = 2048
    for s0 in range(0, len(faces), CH):
        sel = np.arange(s0, min(s0 + CH, len(faces)))
        sel = sel[counts[sel] > 0]
        if sel.size == 0:
            continue
        reps = counts[sel]
        tri_idx = np.repeat(sel, reps)
        offs = np.concatenate([np.arange(r) for r in reps])
        w_local = nx[tri_idx]
        px = x0[tri_idx] + offs % w_local
        py = y0[tri_idx] + offs // w_local
        pc = np.stack([px + 0.5, py + 0.5], axis=-1)

        a, b, c = tri_uv[tri_idx, 0], tri_uv[tri_idx, 1], tri_uv[tri_idx, 2]

        def edge(p, q, r):
            return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

        area = edge(a, b, c)
        w0 = edge(b, c, pc)
        w1 = edge(c, a, pc)
        w2 = edge(a, b, pc)
        with np.errstate(divide="ignore", invalid="ignore"):
            bary = np.stack([w0, w1, w2], axis=-1) / area[:, None]
        inside = (np.abs(area) > 1e-12) & (bary >= 0).all(axis=1)
        if not inside.any():
            continue
        tri_idx = tri_idx[inside]
        bary = bary[inside]
        px, py = px[inside], py[inside]
        zs = tri_z[tri_idx]
        inv_z = (bary / zs).sum(axis=1)
        z_pix = 1.0 / inv_z
        bary3d = (bary / zs) / inv_z[:, None]
        pix_all.append(py * width + px)
        tri_all.append(tri_idx)
        bary_all.append(bary3d)
        z_all.append(z_pix)

    if not pix_all:
        return (np.zeros(0, np.int64),) * 2 + (np.zeros((0, 3)),)
    pix = np.concatenate(pix_all)
    tri = np.concatenate(tri_all)
    bary = np.concatenate(bary_all)
    z = np.concatenate(z_all)
    # winner per pixel: smallest depth, ties to lowest triangle index
    order = np.lexsort((tri, z, pix))
    pix, tri, bary, z = pix[order], tri[order], bary[order], z[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    return pix[first], tri[first], bary[first]


def rasterize_core(
    mesh: TriMesh,
    color_params: FieldParams,
    pose: CameraPose,
    width: int,
    height: int,
    background=(1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, np.ndarray]:
    """Textured z-buffer rasterization; returns (image with graph, visibility)."""
    dtype = mesh.vertices.dtype
    bg = torch.as_tensor(np.asarray(background, np.float64), dtype=dtype)
    img = bg.expand(height * width, 3).clone()
    vis = np.full(height * width, -1, dtype=np.int64)
    if len(mesh.faces) == 0:
        return img.reshape(height, width, 3), vis.reshape(height, width)

    uv, depth, _ = project_points(pose, mesh.vertices_np, width, height)
    pix, tri, bary = _raster_coverage(uv, depth, mesh.faces, width, height)
    if len(pix):
        corners = mesh.vertices[torch.tensor(mesh.faces[tri], dtype=torch.long)]  # (P, 3, 3)
        w = torch.tensor(bary, dtype=dtype)[..., None]
        points = (corners * w).sum(dim=1)
        colors = color_eval(color_params, points)
        img = img.index_put((torch.tensor(pix, dtype=torch.long),), colors)
        vis[pix] = tri
    return img.reshape(height, width, 3), vis.reshape(height, width)


def rasterize(
    mesh: TriMesh,
    color_params: FieldParams,
    pose: CameraPose,
    width: int,
    height: int,
    background=(1.0, 1.0, 1.0),
) -> RasterResult:
    with torch.no_grad():
        img, vis = rasterize_core(mesh, color_params, pose, width, height, background)
    return RasterResult(img.numpy().astype(np.float32), vis)


def rasterize_backward(
    grid: TetGrid,
    color_params: FieldParams,
    pose: CameraPose,
    width: int,
    height: int,
    upstream: np.ndarray,
    background=(1.0, 1.0, 1.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(image * upstream) w.r.t. (color params, s, dv)."""
    upstream = np.asarray(upstream)
    if upstream.shape != (height, width, 3):
        raise ShapeError(f"upstream gradient must be ({height}, {width}, 3)")
    grid.s.requires_grad_(True)
    grid.dv.requires_grad_(True)
    color_params.set_requires_grad(True)
    color_params.zero_grad()
    if grid.s.grad is not None:
        grid.s.grad = None
    if grid.dv.grad is not None:
        grid.dv.grad = None
    try:
        mesh = marching_tets(grid)
        img, _ = rasterize_core(mesh, color_params, pose, width, height, background)
        (img * torch.tensor(upstream, dtype=img.dtype)).sum().backward()
        s_grad = np.zeros(len(grid.s), np.float32) if grid.s.grad is None else grid.s.grad.numpy().copy()
        dv_grad = (
            np.zeros((len(grid.s), 3), np.float32) if grid.dv.grad is None else grid.dv.grad.numpy().copy()
        )
        return color_params.collect_grad(), s_grad, dv_grad
    finally:
        grid.s.requires_grad_(False)
        grid.dv.requires_grad_(False)
        color_params.set_requires_grad(False)


# ---------------------------------------------------------------------------
# Export


def export_obj(mesh: TriMesh, path: str | Path) -> None:
    """ASCII OBJ with 1-based indices; per-vertex RGB as extended v records."""
    path = Path(path)
    verts = mesh.vertices_np
    try:
        with open(path, "w", encoding="utf-8") as fh:
            if mesh.vertex_colors is not None:
                for v, c in zip(verts, mesh.vertex_colors):
                    fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            else:
                for v in verts:
                    fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    except OSError as exc:
        raise OSError(f"failed to write OBJ to {path}: {exc}") from exc
