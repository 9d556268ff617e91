"""Coarse simplicial meshes, face refinement, and layer neighborhoods.

The coarse mesh is a 2D triangulation whose edges are called *faces*
throughout (the data model is dimension-generic even though only d=2 is
implemented).  Every face carries a fixed unit normal; the element the
normal points out of is the face's *left* element.  All skeleton
quantities (multipliers, trace integrals) are stored relative to that
orientation, and per-element views apply the sign ``+1`` for the left
element and ``-1`` for the right one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CoarseMesh",
    "FinePartition",
    "ElementGeometry",
    "ElementSet",
    "MeshError",
    "build_structured_mesh",
    "build_mesh",
    "refine_faces",
    "element_layers",
    "saturation_depth",
    "saturation_radius",
    "load_mesh",
    "save_mesh",
]

# Right isoceles triangles from grid cells have ratio 1 + sqrt(2); leave
# generous headroom for loaded meshes.
DEFAULT_SHAPE_REGULARITY_BOUND = 20.0


class MeshError(ValueError):
    """Invalid mesh input (degenerate element, bad connectivity, ...)."""


@dataclass
class CoarseMesh:
    """Coarse triangulation with oriented faces and adjacency queries."""

    vertices: np.ndarray          # (nv, 2)
    elements: np.ndarray          # (ne, 3) vertex ids, ccw
    faces: np.ndarray             # (nf, 2) vertex ids, left element sees a->b ccw
    face_left: np.ndarray         # (nf,) element id whose outward normal is n_F
    face_right: np.ndarray        # (nf,) element id or -1 on the boundary
    face_normals: np.ndarray      # (nf, 2) unit normals
    face_boundary: np.ndarray     # (nf,) bool
    element_faces: np.ndarray     # (ne, 3) face id per local edge (0-1, 1-2, 2-0)
    element_face_signs: np.ndarray  # (ne, 3) +1 if element is the left element
    areas: np.ndarray             # (ne,)
    centroids: np.ndarray         # (ne, 2)
    face_measures: np.ndarray     # (nf,)
    diameters: np.ndarray         # (ne,) element diameters
    vertex_elements: list[np.ndarray] = field(repr=False)  # vertex id -> incident elements

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def coarse_size(self) -> float:
        """Mesh size H: the largest element diameter."""
        return float(self.diameters.max())

    def face_sign(self, elem: int, face: int) -> int:
        """+1 if ``n_F`` points outward from ``elem``, else -1."""
        if self.face_left[face] == elem:
            return 1
        if self.face_right[face] == elem:
            return -1
        raise MeshError(f"face {face} is not incident to element {elem}")

    def face_elements(self, face: int) -> tuple[int, ...]:
        """Incident element ids (one for boundary faces, two otherwise)."""
        if self.face_boundary[face]:
            return (int(self.face_left[face]),)
        return (int(self.face_left[face]), int(self.face_right[face]))

    def boundary_measure(self, elem: int) -> float:
        """Total measure of the element boundary."""
        return float(self.face_measures[self.element_faces[elem]].sum())

    def closure_neighbors(self, elem: int) -> np.ndarray:
        """Elements whose closure intersects the closure of ``elem``.

        Includes ``elem`` itself.  Closure intersection means sharing at
        least a vertex, which is strictly larger than face adjacency.
        """
        parts = [self.vertex_elements[v] for v in self.elements[elem]]
        return np.unique(np.concatenate(parts))


@dataclass(frozen=True)
class ElementSet:
    """A layer neighborhood T_j(seed): a set of coarse element ids."""

    indices: frozenset[int]
    seed: tuple[str, int]
    j: int

    def as_array(self) -> np.ndarray:
        return np.array(sorted(self.indices), dtype=int)

    def __contains__(self, elem: int) -> bool:
        return elem in self.indices

    def __len__(self) -> int:
        return len(self.indices)

    def issubset(self, other: "ElementSet") -> bool:
        return self.indices.issubset(other.indices)


def _triangle_quality(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> tuple[float, float]:
    """Signed area and circumradius/inradius ratio of a triangle."""
    a = np.linalg.norm(p1 - p2)
    b = np.linalg.norm(p2 - p0)
    c = np.linalg.norm(p0 - p1)
    signed = 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    area = abs(signed)
    if area == 0.0:
        return signed, math.inf
    s = 0.5 * (a + b + c)
    circum = a * b * c / (4.0 * area)
    inrad = area / s
    return signed, circum / inrad


def build_mesh(
    vertices: np.ndarray,
    elements: np.ndarray,
    shape_regularity_bound: float = DEFAULT_SHAPE_REGULARITY_BOUND,
) -> CoarseMesh:
    """Build a validated :class:`CoarseMesh` from raw arrays.

    Elements are reoriented counterclockwise if needed.  Raises
    :class:`MeshError` on degenerate elements, shape-regularity
    violations, or faces shared by more than two elements.
    """
    vertices = np.asarray(vertices, dtype=float)
    elements = np.asarray(elements, dtype=int).copy()
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (nv, 2) array")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an (ne, 3) array")
    if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
        raise MeshError("element vertex index out of range")

    ne = elements.shape[0]
    areas = np.empty(ne)
    for t in range(ne):
        p = vertices[elements[t]]
        signed, ratio = _triangle_quality(p[0], p[1], p[2])
        if signed == 0.0:
            raise MeshError(f"element {t} is degenerate")
        if signed < 0.0:
            elements[t, 1], elements[t, 2] = elements[t, 2], elements[t, 1]
            signed = -signed
        if ratio > shape_regularity_bound:
            raise MeshError(
                f"element {t} violates shape regularity: ratio {ratio:.3g} > "
                f"{shape_regularity_bound:.3g}"
            )
        areas[t] = signed

    # Collect unique faces.  key: sorted vertex pair.
    face_of: dict[tuple[int, int], int] = {}
    face_pairs: list[tuple[int, int]] = []     # oriented as first seen (ccw in first element)
    incident: list[list[int]] = []
    element_faces = np.empty((ne, 3), dtype=int)
    for t in range(ne):
        v = elements[t]
        for e, (a, b) in enumerate(((v[0], v[1]), (v[1], v[2]), (v[2], v[0]))):
            key = (min(a, b), max(a, b))
            fid = face_of.get(key)
            if fid is None:
                fid = len(face_pairs)
                face_of[key] = fid
                face_pairs.append((int(a), int(b)))
                incident.append([t])
            else:
                incident[fid].append(t)
            element_faces[t, e] = fid

    nf = len(face_pairs)
    faces = np.array(face_pairs, dtype=int)
    face_left = np.full(nf, -1, dtype=int)
    face_right = np.full(nf, -1, dtype=int)
    for fid, elems in enumerate(incident):
        if len(elems) > 2:
            raise MeshError(f"face {fid} shared by more than two elements")
        # The first incident element traversed (a, b) ccw, so it is the
        # left element for the stored orientation.
        face_left[fid] = elems[0]
        if len(elems) == 2:
            face_right[fid] = elems[1]
    face_boundary = face_right < 0

    tangents = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    face_measures = np.linalg.norm(tangents, axis=1)
    if np.any(face_measures == 0.0):
        raise MeshError("zero-length face")
    # Rotate the tangent by -90 degrees: outward from the left element.
    face_normals = np.column_stack((tangents[:, 1], -tangents[:, 0])) / face_measures[:, None]

    element_face_signs = np.empty((ne, 3), dtype=int)
    for t in range(ne):
        for e in range(3):
            element_face_signs[t, e] = 1 if face_left[element_faces[t, e]] == t else -1

    centroids = vertices[elements].mean(axis=1)
    edge_l = np.stack(
        [
            np.linalg.norm(vertices[elements[:, i]] - vertices[elements[:, (i + 1) % 3]], axis=1)
            for i in range(3)
        ]
    )
    diameters = edge_l.max(axis=0)

    vertex_elements: list[list[int]] = [[] for _ in range(len(vertices))]
    for t in range(ne):
        for v in elements[t]:
            vertex_elements[v].append(t)
    vertex_elements_np = [np.array(sorted(set(lst)), dtype=int) for lst in vertex_elements]

    mesh = CoarseMesh(
        vertices=vertices,
        elements=elements,
        faces=faces,
        face_left=face_left,
        face_right=face_right,
        face_normals=face_normals,
        face_boundary=face_boundary,
        element_faces=element_faces,
        element_face_signs=element_face_signs,
        areas=areas,
        centroids=centroids,
        face_measures=face_measures,
        diameters=diameters,
        vertex_elements=vertex_elements_np,
    )
    _check_connected(mesh)
    return mesh


def _check_connected(mesh: CoarseMesh) -> None:
    """Face-connectivity check; disconnected meshes break the Lambda^0 solve."""
    if mesh.n_elements == 0:
        raise MeshError("empty mesh")
    seen = np.zeros(mesh.n_elements, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        t = stack.pop()
        for fid in mesh.element_faces[t]:
            other = mesh.face_right[fid] if mesh.face_left[fid] == t else mesh.face_left[fid]
            if other >= 0 and not seen[other]:
                seen[other] = True
                stack.append(int(other))
    if not seen.all():
        raise MeshError("mesh is not face-connected")


def build_structured_mesh(
    nx: int,
    ny: int,
    domain: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
) -> CoarseMesh:
    """Structured triangulation of a rectangle.

    ``domain`` is (x0, y0, x1, y1).  Each of the nx*ny grid cells is split
    along its lower-left/upper-right diagonal, giving 2*nx*ny elements and
    3*nx*ny + nx + ny faces.
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"grid counts must be >= 1, got {nx} x {ny}")
    x0, y0, x1, y1 = map(float, domain)
    if x1 <= x0 or y1 <= y0:
        raise MeshError("domain side lengths must be positive")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack((xx.ravel(), yy.ravel()))

    def vid(i: int, j: int) -> int:
        return j * (nx + 1) + i

    elements = []
    for j in range(ny):
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    return build_mesh(vertices, np.array(elements, dtype=int))


def element_layers(mesh: CoarseMesh, seed: tuple[str, int], j: int) -> ElementSet:
    """Layer neighborhood T_j(seed) grown by closure adjacency.

    ``seed`` is ``("element", k)`` or ``("face", f)``.  T_0 is empty,
    T_1("element", K) = {K}, T_1("face", F) = the incident element(s), and
    T_{j+1} adds every element whose closure touches T_j (vertex
    neighbors included).
    """
    kind, idx = seed
    if j < 0:
        raise ValueError("layer count j must be >= 0")
    if kind == "element":
        if not 0 <= idx < mesh.n_elements:
            raise MeshError(f"unknown element seed {idx}")
        first = {int(idx)}
    elif kind == "face":
        if not 0 <= idx < mesh.n_faces:
            raise MeshError(f"unknown face seed {idx}")
        first = set(mesh.face_elements(idx))
    else:
        raise MeshError(f"unknown seed kind {kind!r}")

    if j == 0:
        return ElementSet(frozenset(), seed, 0)
    current = set(first)
    for _ in range(j - 1):
        if len(current) == mesh.n_elements:
            break
        grown = set(current)
        for t in current:
            grown.update(int(e) for e in mesh.closure_neighbors(t))
        current = grown
    return ElementSet(frozenset(current), seed, j)


def saturation_depth(mesh: CoarseMesh, seed: tuple[str, int]) -> int:
    """Smallest j with T_j(seed) = the whole mesh."""
    j = 1
    while len(element_layers(mesh, seed, j)) < mesh.n_elements:
        j += 1
        if j > mesh.n_elements + 1:
            raise MeshError("layer growth stalled; mesh not connected?")
    return j


def saturation_radius(mesh: CoarseMesh) -> int:
    """Smallest j with T_j(seed) = the whole mesh for *every* seed.

    Equals one plus the diameter of the closure-adjacency graph; face
    seeds saturate no later than their incident elements, so the maximum
    over element seeds covers them.
    """
    worst = 1
    for start in range(mesh.n_elements):
        dist = np.full(mesh.n_elements, -1, dtype=int)
        dist[start] = 0
        queue = [start]
        while queue:
            nxt: list[int] = []
            for t in queue:
                for e in mesh.closure_neighbors(t):
                    if dist[e] < 0:
                        dist[e] = dist[t] + 1
                        nxt.append(int(e))
            queue = nxt
        worst = max(worst, 1 + int(dist.max()))
    return worst


# ---------------------------------------------------------------------------
# Fine partition: refined skeleton + per-element interior triangulations.
# ---------------------------------------------------------------------------


@dataclass
class ElementGeometry:
    """Interior triangulation of one coarse element plus its trace structure.

    ``trace_matrix`` maps interior P1 nodal values to their integrals over
    each fine sub-face of the element boundary (rows ordered by local edge,
    then by the sub-face index along the *stored* orientation of the parent
    coarse face), exact for P1 traces.
    """

    elem: int
    nodes: np.ndarray            # (nn, 2)
    cells: np.ndarray            # (nc, 3)
    cell_areas: np.ndarray       # (nc,)
    cell_centroids: np.ndarray   # (nc, 2)
    grads: np.ndarray            # (nc, 3, 2) P1 basis gradients per cell
    boundary_face_ids: np.ndarray   # (n_bf,) global fine-face ids
    boundary_signs: np.ndarray      # (n_bf,) +-1, sign of parent coarse face
    trace_matrix: np.ndarray        # (n_bf, nn)
    face_rows: dict[int, np.ndarray]  # coarse face id -> row indices (ordered by sub-face)
    boundary_node_mask: np.ndarray  # (nn,) True for nodes on the element boundary

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_boundary_faces(self) -> int:
        return self.boundary_face_ids.shape[0]

    @property
    def interior_nodes(self) -> np.ndarray:
        return np.nonzero(~self.boundary_node_mask)[0]


@dataclass
class FinePartition:
    """Fine face partition F_h plus per-element interior triangulations."""

    mesh: CoarseMesh
    face_level: int
    interior_level: int
    faces_per_coarse: int         # 2**face_level
    fine_measures: np.ndarray     # (n_fine,)
    fine_midpoints: np.ndarray    # (n_fine, 2)
    fine_endpoints: np.ndarray    # (n_fine, 2, 2)
    geometry: list[ElementGeometry]

    @property
    def n_fine_faces(self) -> int:
        return self.fine_measures.shape[0]

    @property
    def fine_size(self) -> float:
        """h: the largest fine sub-face diameter."""
        return float(self.fine_measures.max())

    def face_slice(self, face: int) -> slice:
        n = self.faces_per_coarse
        return slice(face * n, (face + 1) * n)

    def coarse_face_of(self, fine_face: int) -> int:
        return fine_face // self.faces_per_coarse


def _lattice(level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Barycentric lattice of a uniformly refined reference triangle.

    Returns (bary, cells, index) where bary is (nn, 2) with the (i, j)
    lattice coordinates scaled by 1/n, cells the (nc, 3) connectivity, and
    index the (n+1, n+1) lookup from lattice coordinates to node id.
    """
    n = 2 ** level
    index = -np.ones((n + 1, n + 1), dtype=int)
    coords = []
    k = 0
    for j in range(n + 1):
        for i in range(n + 1 - j):
            index[i, j] = k
            coords.append((i / n, j / n))
            k += 1
    cells = []
    for j in range(n):
        for i in range(n - j):
            cells.append((index[i, j], index[i + 1, j], index[i, j + 1]))
            if i + j < n - 1:
                cells.append((index[i + 1, j], index[i + 1, j + 1], index[i, j + 1]))
    return np.array(coords), np.array(cells, dtype=int), index


def _edge_lattice_nodes(index: np.ndarray, local_edge: int, n: int) -> np.ndarray:
    """Node ids along a local edge, ordered from its first local vertex."""
    if local_edge == 0:    # v0 -> v1
        return np.array([index[m, 0] for m in range(n + 1)])
    if local_edge == 1:    # v1 -> v2
        return np.array([index[n - m, m] for m in range(n + 1)])
    return np.array([index[0, n - m] for m in range(n + 1)])  # v2 -> v0


def refine_faces(mesh: CoarseMesh, level: int, interior_level: int | None = None) -> FinePartition:
    """Split every coarse face into 2**level equal fine sub-faces.

    The interior triangulation of each element is a uniform refinement at
    ``interior_level`` (default ``level + 1``; must stay at least one level
    finer than the faces so the local problems are inf-sup safe).
    """
    if level < 0:
        raise ValueError("refinement level must be >= 0")
    if interior_level is None:
        interior_level = level + 1
    if interior_level < level + 1:
        raise ValueError("interior_level must be at least face level + 1")

    nfs = 2 ** level
    n_fine = mesh.n_faces * nfs
    fine_measures = np.repeat(mesh.face_measures / nfs, nfs)
    endpoints = np.empty((n_fine, 2, 2))
    for f in range(mesh.n_faces):
        p = mesh.vertices[mesh.faces[f, 0]]
        q = mesh.vertices[mesh.faces[f, 1]]
        ts = np.linspace(0.0, 1.0, nfs + 1)
        pts = p[None, :] + ts[:, None] * (q - p)[None, :]
        endpoints[f * nfs : (f + 1) * nfs, 0] = pts[:-1]
        endpoints[f * nfs : (f + 1) * nfs, 1] = pts[1:]
    fine_midpoints = endpoints.mean(axis=1)

    bary, cells, index = _lattice(interior_level)
    n = 2 ** interior_level
    per_sub = n // nfs   # interior boundary edges per fine sub-face

    geometry = []
    for t in range(mesh.n_elements):
        v = mesh.vertices[mesh.elements[t]]
        nodes = v[0] + bary[:, 0:1] * (v[1] - v[0]) + bary[:, 1:2] * (v[2] - v[0])
        p = nodes[cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        cell_areas = 0.5 * det
        # P1 gradients: grad(phi_k) obtained from edge rotations / (2A).
        grads = np.empty((len(cells), 3, 2))
        for k in range(3):
            a = p[:, (k + 1) % 3]
            b = p[:, (k + 2) % 3]
            grads[:, k, 0] = (a[:, 1] - b[:, 1]) / det
            grads[:, k, 1] = (b[:, 0] - a[:, 0]) / det

        n_bf = 3 * nfs
        trace = np.zeros((n_bf, nodes.shape[0]))
        b_ids = np.empty(n_bf, dtype=int)
        b_signs = np.empty(n_bf, dtype=int)
        face_rows: dict[int, np.ndarray] = {}
        boundary_mask = np.zeros(nodes.shape[0], dtype=bool)
        elem_verts = mesh.elements[t]
        for e in range(3):
            fid = int(mesh.element_faces[t, e])
            sign = int(mesh.element_face_signs[t, e])
            ga, gb = int(elem_verts[e]), int(elem_verts[(e + 1) % 3])
            aligned = (ga, gb) == (int(mesh.faces[fid, 0]), int(mesh.faces[fid, 1]))
            edge_nodes = _edge_lattice_nodes(index, e, n)
            boundary_mask[edge_nodes] = True
            seg_len = mesh.face_measures[fid] / n
            rows = np.empty(nfs, dtype=int)
            for m in range(n):
                s_mid = (m + 0.5) / n
                tpar = s_mid if aligned else 1.0 - s_mid
                k_sub = min(int(tpar * nfs), nfs - 1)
                row = e * nfs + k_sub
                na, nb = edge_nodes[m], edge_nodes[m + 1]
                trace[row, na] += 0.5 * seg_len
                trace[row, nb] += 0.5 * seg_len
            for k_sub in range(nfs):
                row = e * nfs + k_sub
                rows[k_sub] = row
                b_ids[row] = fid * nfs + k_sub
                b_signs[row] = sign
            face_rows[fid] = rows
        geometry.append(
            ElementGeometry(
                elem=t,
                nodes=nodes,
                cells=cells,
                cell_areas=cell_areas,
                cell_centroids=p.mean(axis=1),
                grads=grads,
                boundary_face_ids=b_ids,
                boundary_signs=b_signs,
                trace_matrix=trace,
                face_rows=face_rows,
                boundary_node_mask=boundary_mask,
            )
        )

    part = FinePartition(
        mesh=mesh,
        face_level=level,
        interior_level=interior_level,
        faces_per_coarse=nfs,
        fine_measures=fine_measures,
        fine_midpoints=fine_midpoints,
        fine_endpoints=endpoints,
        geometry=geometry,
    )
    _check_partition(part)
    return part


def _check_partition(part: FinePartition) -> None:
    """Construction-time invariants: sub-face measures and trace alignment."""
    mesh = part.mesh
    nfs = part.faces_per_coarse
    sums = part.fine_measures.reshape(mesh.n_faces, nfs).sum(axis=1)
    if not np.allclose(sums, mesh.face_measures, rtol=1e-12, atol=0.0):
        raise MeshError("fine sub-face measures do not sum to coarse face measures")
    for geom in part.geometry:
        # Each trace row integrates the constant 1 to the sub-face measure,
        # which also certifies that interior boundary edges tile the
        # sub-faces exactly.
        row_sums = geom.trace_matrix.sum(axis=1)
        expected = part.fine_measures[geom.boundary_face_ids]
        if not np.allclose(row_sums, expected, rtol=1e-12, atol=1e-15):
            raise MeshError(f"boundary triangulation of element {geom.elem} misaligned")


# ---------------------------------------------------------------------------
# Line-oriented mesh file format (documented in the README):
#   nv
#   x y          (nv lines)
#   ne
#   i j k        (ne lines, 0-based vertex ids)
# ---------------------------------------------------------------------------


def save_mesh(mesh: CoarseMesh, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"{mesh.n_elements}\n")
        for a, b, c in mesh.elements:
            fh.write(f"{a} {b} {c}\n")


def load_mesh(path: str, shape_regularity_bound: float = DEFAULT_SHAPE_REGULARITY_BOUND) -> CoarseMesh:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    pos = 0

    def take(n: int) -> list[str]:
        nonlocal pos
        if pos + n > len(tokens):
            raise MeshError(f"mesh file {path} truncated")
        out = tokens[pos : pos + n]
        pos += n
        return out

    nv = int(take(1)[0])
    verts = np.array([float(x) for x in take(2 * nv)]).reshape(nv, 2)
    ne = int(take(1)[0])
    elems = np.array([int(x) for x in take(3 * ne)], dtype=int).reshape(ne, 3)
    if pos != len(tokens):
        raise MeshError(f"mesh file {path} has trailing data")
    return build_mesh(verts, elems, shape_regularity_bound)
