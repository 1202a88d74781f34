"""Planar triangulations, linear FEM structure matrices, and point projection.

Coordinates are planar (UTM-like) and measured in km. All meshes are
conforming triangulations with counter-clockwise triangles.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

# Tolerance band for point-in-triangle tests (barycentric coordinates).
_BARY_TOL = 1e-12


class MeshError(ValueError):
    """Raised for invalid meshes or degenerate mesh parameters."""


@dataclass(frozen=True)
class TriangleMesh:
    """A conforming planar triangulation.

    nodes: (m, 2) float array of km coordinates.
    triangles: (n_tri, 3) int array of node indices, counter-clockwise.
    """

    nodes: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        triangles = np.asarray(self.triangles, dtype=np.int64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", triangles)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must be an (m, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must be an (n_tri, 3) array")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("node coordinates must be finite")
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(nodes):
                raise MeshError("triangle index out of range")
        areas = self.signed_areas()
        bad = np.flatnonzero(areas <= 0)
        if bad.size:
            raise MeshError(
                f"triangle {bad[0]} has non-positive signed area {areas[bad[0]]:g}"
            )
        self._check_conforming()

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def _check_conforming(self):
        # Every directed edge may appear at most once; an undirected edge in
        # at most two triangles. Catches overlaps and orientation flips that
        # share nodes without being edge-conforming.
        seen = set()
        for t, (i, j, k) in enumerate(self.triangles):
            for a, b in ((i, j), (j, k), (k, i)):
                if (a, b) in seen:
                    raise MeshError(
                        f"triangle {t} repeats directed edge ({a}, {b}); "
                        "mesh is not edge-conforming"
                    )
                seen.add((a, b))

    def total_area(self) -> float:
        return float(np.sum(self.signed_areas()))


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass diagonal and stiffness matrix for linear elements.

    C_diag: (m,) diagonal of the lumped mass matrix (km^2).
    G: (m, m) sparse symmetric stiffness matrix (dimensionless).
    """

    C_diag: np.ndarray
    G: sparse.csr_matrix

    @property
    def C(self) -> sparse.dia_matrix:
        return sparse.diags(self.C_diag)

    @functools.cached_property
    def gcg(self) -> sparse.csc_matrix:
        """The parameter-independent product G C^{-1} G (cached, symmetrized)."""
        P = (self.G @ sparse.diags(1.0 / self.C_diag) @ self.G).tocsc()
        return ((P + P.T) * 0.5).tocsc()

    @functools.cached_property
    def precision_template(self) -> "PrecisionTemplate":
        """Fixed-pattern assembler for the SPDE precision matrix (cached)."""
        return PrecisionTemplate(self)


class PrecisionTemplate:
    """Vectorized assembly of T(K^2 C K^2 + K^2 G + G K^2 + G C^-1 G)T.

    The sparsity pattern is parameter independent, so it is computed once;
    each assembly is then elementwise arithmetic on the data array:
    Q_ij = tau_i tau_j ((kappa_i^2 + kappa_j^2) G_ij + (G C^-1 G)_ij)
    plus tau_i^2 kappa_i^4 C_ii on the diagonal. Entrywise symmetric by
    construction.
    """

    def __init__(self, fem: FemMatrices):
        G = ((fem.G + fem.G.T) * 0.5).tocsc()
        gcg = fem.gcg
        m = G.shape[0]
        union = (abs(G) + abs(gcg) + sparse.identity(m, format="csc")).tocsc()
        union.sort_indices()
        rows = union.indices
        cols = np.repeat(np.arange(m), np.diff(union.indptr))
        union_keys = cols.astype(np.int64) * m + rows

        def aligned(M):
            M = M.tocsc()
            M.sort_indices()
            mcols = np.repeat(np.arange(m), np.diff(M.indptr))
            keys = mcols.astype(np.int64) * m + M.indices
            pos = np.searchsorted(union_keys, keys)
            if not np.array_equal(union_keys[pos], keys):
                raise AssertionError("pattern alignment failed")
            out = np.zeros(union.nnz)
            out[pos] = M.data
            return out

        self.indices = union.indices
        self.indptr = union.indptr
        self.g_data = aligned(G)
        self.gcg_data = aligned(gcg)
        self.m = m
        self.C_diag = fem.C_diag
        self.rows = rows
        self.cols = cols
        self.diag_mask = np.flatnonzero(rows == cols)

    def assemble(self, tau: np.ndarray, kappa: np.ndarray) -> sparse.csc_matrix:
        # Overflow at extreme parameters yields non-finite entries; callers
        # treat the subsequent factorization failure as an excluded point.
        with np.errstate(over="ignore", invalid="ignore"):
            k2 = kappa**2
            data = tau[self.rows] * tau[self.cols] * (
                (k2[self.rows] + k2[self.cols]) * self.g_data + self.gcg_data
            )
            diag_rows = self.rows[self.diag_mask]
            data[self.diag_mask] += (
                tau[diag_rows] ** 2 * k2[diag_rows] ** 2 * self.C_diag[diag_rows]
            )
        return sparse.csc_matrix(
            (data, self.indices, self.indptr), shape=(self.m, self.m)
        )


@dataclass(frozen=True)
class Projector:
    """Barycentric evaluation weights of mesh basis functions at query points.

    A: (n, m) sparse matrix; row i holds the basis weights of location i.
    inside: (n,) bool; False rows of A are zero (location outside the mesh).
    """

    A: sparse.csr_matrix
    inside: np.ndarray

    @property
    def n_locations(self) -> int:
        return self.A.shape[0]

    def interpolate(self, node_values: np.ndarray) -> np.ndarray:
        """Evaluate a nodal field at the projector's locations."""
        return self.A @ np.asarray(node_values, dtype=float)

    def outside_records(self) -> list[int]:
        """Indices of locations that fell outside every triangle."""
        return np.flatnonzero(~self.inside).tolist()


def build_structured_mesh(
    extent: tuple[float, float, float, float], resolution: float
) -> TriangleMesh:
    """Triangulate the rectangle (x0, x1, y0, y1) with node spacing <= resolution.

    Each grid cell is split into two counter-clockwise triangles. The node
    count per axis is floor(extent/resolution) + 1 when the resolution divides
    the extent exactly, otherwise one extra row/column keeps spacing below
    the requested resolution.
    """
    x0, x1, y0, y1 = map(float, extent)
    width, height = x1 - x0, y1 - y0
    if width <= 0 or height <= 0:
        raise MeshError("degenerate mesh: extent has non-positive width or height")
    if resolution <= 0:
        raise MeshError("degenerate mesh: resolution must be positive")
    if resolution > width or resolution > height:
        raise MeshError("degenerate mesh: resolution exceeds extent")
    nx = int(math.ceil(width / resolution - 1e-9))
    ny = int(math.ceil(height / resolution - 1e-9))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    n00 = (iy * (nx + 1) + ix).ravel()
    n10 = n00 + 1
    n01 = n00 + (nx + 1)
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.vstack([lower, upper])
    return TriangleMesh(nodes=nodes, triangles=triangles)


def assemble_fem(mesh: TriangleMesh) -> FemMatrices:
    """Assemble the lumped mass diagonal C and the stiffness matrix G.

    C_ii is one third of the total area of triangles adjacent to node i,
    G_ij integrates grad(psi_i) . grad(psi_j) exactly for linear elements.
    """
    m = mesh.node_count
    tris = mesh.triangles
    p = mesh.nodes[tris]  # (n_tri, 3, 2)
    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        t = int(np.flatnonzero(areas <= 0)[0])
        raise MeshError(f"zero-area triangle {t}")

    # Edge vector opposite each vertex: e_a = p_{a+2} - p_{a+1} (mod 3).
    edges = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]  # (n_tri, 3, 2)
    local = np.einsum("tad,tbd->tab", edges, edges) / (4.0 * areas)[:, None, None]

    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    G = sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(m, m)
    ).tocsr()
    G.sum_duplicates()

    C_diag = np.zeros(m)
    np.add.at(C_diag, tris.ravel(), np.repeat(areas / 3.0, 3))
    return FemMatrices(C_diag=C_diag, G=G)


def _triangle_bins(mesh: TriangleMesh, nbins: int):
    """Uniform spatial hash of triangle bounding boxes for point location."""
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    p = mesh.nodes[mesh.triangles]
    tlo = np.clip(((p.min(axis=1) - lo) / span * nbins).astype(int), 0, nbins - 1)
    thi = np.clip(((p.max(axis=1) - lo) / span * nbins).astype(int), 0, nbins - 1)
    bins: dict[tuple[int, int], list[int]] = {}
    for t in range(len(mesh.triangles)):
        for bx in range(tlo[t, 0], thi[t, 0] + 1):
            for by in range(tlo[t, 1], thi[t, 1] + 1):
                bins.setdefault((bx, by), []).append(t)
    return bins, lo, span


def project(mesh: TriangleMesh, locations: np.ndarray) -> Projector:
    """Map query locations to barycentric weights of their containing triangle.

    Points within the 1e-12 barycentric tolerance of an edge are assigned to
    the lowest-index adjacent triangle (candidates are scanned in index
    order), so the projection is deterministic. Locations outside every
    triangle yield a zero row and inside=False instead of a global failure.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n = len(locations)
    nbins = max(1, int(math.sqrt(max(mesh.triangle_count, 1))))
    bins, lo, span = _triangle_bins(mesh, nbins)

    p = mesh.nodes[mesh.triangles]
    v0 = p[:, 0]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    inv_det = 1.0 / (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    rows, cols, vals = [], [], []
    inside = np.zeros(n, dtype=bool)
    for i, q in enumerate(locations):
        cell = np.clip(((q - lo) / span * nbins).astype(int), 0, nbins - 1)
        candidates = sorted(bins.get((cell[0], cell[1]), ()))
        for t in candidates:
            r = q - v0[t]
            l1 = (r[0] * d2[t, 1] - r[1] * d2[t, 0]) * inv_det[t]
            l2 = (d1[t, 0] * r[1] - d1[t, 1] * r[0]) * inv_det[t]
            l0 = 1.0 - l1 - l2
            if l0 >= -_BARY_TOL and l1 >= -_BARY_TOL and l2 >= -_BARY_TOL:
                lam = np.clip([l0, l1, l2], 0.0, None)
                lam /= lam.sum()
                for a in range(3):
                    rows.append(i)
                    cols.append(mesh.triangles[t, a])
                    vals.append(lam[a])
                inside[i] = True
                break
    A = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n, mesh.node_count)
    )
    return Projector(A=A, inside=inside)


def write_mesh_json(
    path,
    mesh: TriangleMesh,
    covariate: np.ndarray | None = None,
    manifest: dict | None = None,
):
    """Serialize a mesh (and optional per-node covariate) to the JSON format."""
    doc = {
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
    }
    if covariate is not None:
        doc["covariate"] = np.asarray(covariate, dtype=float).tolist()
    if manifest is not None:
        doc["manifest"] = manifest
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_mesh_json(path) -> tuple[TriangleMesh, np.ndarray | None]:
    """Read a mesh JSON document; returns (mesh, covariate-or-None)."""
    with open(path) as fh:
        doc = json.load(fh)
    if "nodes" not in doc or "triangles" not in doc:
        raise MeshError(f"{path}: mesh JSON must contain 'nodes' and 'triangles'")
    mesh = TriangleMesh(
        nodes=np.asarray(doc["nodes"], dtype=float),
        triangles=np.asarray(doc["triangles"], dtype=np.int64),
    )
    covariate = None
    if "covariate" in doc:
        covariate = np.asarray(doc["covariate"], dtype=float)
        if covariate.shape != (mesh.node_count,):
            raise MeshError(
                f"{path}: covariate length {covariate.size} != node count "
                f"{mesh.node_count}"
            )
    return mesh, covariate


def read_covariate_csv(path, node_count: int) -> np.ndarray:
    """Read a per-node covariate CSV with columns node_index,value."""
    values = np.full(node_count, np.nan)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if lineno == 1 and parts[0].strip() == "node_index":
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
            try:
                idx = int(parts[0])
                val = float(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= idx < node_count:
                raise ValueError(f"{path}:{lineno}: node index {idx} out of range")
            values[idx] = val
    if np.isnan(values).any():
        missing = int(np.isnan(values).sum())
        raise ValueError(f"{path}: covariate missing for {missing} nodes")
    return values
