"""Triangle meshes and a Wavefront OBJ subset (v / vn / vt / f).

Meshes are stored indexed: shared position/normal/uv pools plus per-corner
index triples, which keeps OBJ round trips order-preserving. UVs are
mandatory for the UV pipeline; loading a mesh without them raises
``MissingUVError`` so the failure is distinguishable from a parse error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    pass


class MissingUVError(MeshError):
    """OBJ has no vt records (or faces without vt indices)."""


class ObjParseError(MeshError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    positions: (V, 3) world units
    normals:   (N, 3) unit vectors
    uvs:       (T, 2) in [0, 1]^2
    faces_v / faces_vn / faces_vt: (F, 3) int indices into the pools above
    """

    positions: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray
    faces_v: np.ndarray
    faces_vn: np.ndarray
    faces_vt: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces_v = np.asarray(self.faces_v, dtype=np.int64).reshape(-1, 3)
        self.faces_vn = np.asarray(self.faces_vn, dtype=np.int64).reshape(-1, 3)
        self.faces_vt = np.asarray(self.faces_vt, dtype=np.int64).reshape(-1, 3)
        f = self.faces_v.shape[0]
        if self.faces_vn.shape[0] != f or self.faces_vt.shape[0] != f:
            raise MeshError("face index arrays disagree in length")
        for idx, pool, what in (
            (self.faces_v, self.positions, "position"),
            (self.faces_vn, self.normals, "normal"),
            (self.faces_vt, self.uvs, "uv"),
        ):
            if f and (idx.min() < 0 or idx.max() >= len(pool)):
                raise MeshError(f"{what} index out of range")
        # renormalize, but leave already-unit normals untouched so that
        # load -> save -> load is a strict fixpoint
        if len(self.normals):
            norm = np.linalg.norm(self.normals, axis=1, keepdims=True)
            norm[norm == 0] = 1.0
            off = np.abs(norm - 1.0) > 1e-6
            self.normals = np.where(off, self.normals / norm, self.normals)

    @property
    def n_faces(self) -> int:
        return self.faces_v.shape[0]

    def corner_positions(self) -> np.ndarray:
        return self.positions[self.faces_v]  # (F, 3, 3)

    def corner_normals(self) -> np.ndarray:
        return self.normals[self.faces_vn]

    def corner_uvs(self) -> np.ndarray:
        return self.uvs[self.faces_vt]

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Center and radius of the vertex centroid sphere."""
        if not len(self.positions):
            raise MeshError("empty mesh has no bounds")
        center = 0.5 * (self.positions.min(axis=0) + self.positions.max(axis=0))
        radius = float(np.linalg.norm(self.positions - center, axis=1).max())
        return center, radius


def _area_weighted_vertex_normals(positions: np.ndarray, faces_v: np.ndarray) -> np.ndarray:
    # cross product length = 2*area, so summing raw cross products is the
    # area weighting
    p = positions[faces_v]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = np.zeros_like(positions)
    for k in range(3):
        np.add.at(normals, faces_v[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return normals / norm


def load_mesh(path) -> TriMesh:
    """Parse a Wavefront OBJ (v/vn/vt/f). Quads are fan-triangulated.

    Missing normals are computed per-face and averaged per vertex with
    area weighting. Missing UVs are an error: the UV pipeline cannot run
    without a parameterization.
    """
    positions: list[list[float]] = []
    normals: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[tuple[int, int | None, int | None]]] = []

    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("v needs 3 coordinates")
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    if len(parts) < 4:
                        raise ValueError("vn needs 3 coordinates")
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    if len(parts) < 3:
                        raise ValueError("vt needs 2 coordinates")
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    if len(parts) < 4:
                        raise ValueError("f needs at least 3 vertices")
                    corners = []
                    for spec in parts[1:]:
                        fields = spec.split("/")
                        vi = int(fields[0])
                        ti = int(fields[1]) if len(fields) > 1 and fields[1] else None
                        ni = int(fields[2]) if len(fields) > 2 and fields[2] else None
                        corners.append((vi, ti, ni))
                    # fan triangulation shares the first corner
                    for k in range(1, len(corners) - 1):
                        faces.append([corners[0], corners[k], corners[k + 1]])
                # other record types (o, g, s, usemtl, ...) are ignored
            except (ValueError, IndexError) as e:
                raise ObjParseError(path, line_no, f"malformed {tag!r} record: {e}") from e

    if not faces:
        raise MeshError(f"{path}: no faces")

    def resolve(idx: int, pool_len: int) -> int:
        # OBJ is 1-based; negative indices count back from the end
        r = idx - 1 if idx > 0 else pool_len + idx
        if r < 0 or r >= pool_len:
            raise MeshError(f"{path}: face index {idx} out of range")
        return r

    fv = np.array([[resolve(c[0], len(positions)) for c in tri] for tri in faces], dtype=np.int64)

    has_uv = all(c[1] is not None for tri in faces for c in tri) and len(uvs) > 0
    if not has_uv:
        raise MissingUVError(f"{path}: mesh has no UV coordinates (vt records required)")
    ft = np.array([[resolve(c[1], len(uvs)) for c in tri] for tri in faces], dtype=np.int64)

    has_n = all(c[2] is not None for tri in faces for c in tri) and len(normals) > 0
    pos_arr = np.asarray(positions, dtype=np.float64)
    if has_n:
        n_arr = np.asarray(normals, dtype=np.float64)
        fn = np.array([[resolve(c[2], len(normals)) for c in tri] for tri in faces], dtype=np.int64)
    else:
        n_arr = _area_weighted_vertex_normals(pos_arr, fv)
        fn = fv.copy()

    return TriMesh(pos_arr, n_arr, np.asarray(uvs, dtype=np.float64), fv, fn, ft)


def save_mesh(path, mesh: TriMesh) -> None:
    """Write OBJ preserving vertex/normal/uv order and full float64
    precision (shortest round-trip decimals), so load(save(load(x))) is a
    strict fixpoint."""

    def fmt(x: float) -> str:
        return repr(float(x))

    with open(path, "w", encoding="utf-8") as f:
        for p in mesh.positions:
            f.write(f"v {fmt(p[0])} {fmt(p[1])} {fmt(p[2])}\n")
        for t in mesh.uvs:
            f.write(f"vt {fmt(t[0])} {fmt(t[1])}\n")
        for n in mesh.normals:
            f.write(f"vn {fmt(n[0])} {fmt(n[1])} {fmt(n[2])}\n")
        for v, t, n in zip(mesh.faces_v, mesh.faces_vt, mesh.faces_vn):
            f.write(
                "f "
                + " ".join(f"{v[k] + 1}/{t[k] + 1}/{n[k] + 1}" for k in range(3))
                + "\n"
            )


# ---------------------------------------------------------------------------
# Procedural primitives used by the demos and the test scenes.

def make_quad(size: float = 1.0, z: float = 0.0) -> TriMesh:
    """Unit quad in the XY plane facing +Z, UVs spanning [0,1]^2."""
    s = size * 0.5
    positions = np.array([[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    normals = np.array([[0.0, 0.0, 1.0]])
    faces_v = np.array([[0, 1, 2], [0, 2, 3]])
    faces_vt = faces_v.copy()
    faces_vn = np.zeros_like(faces_v)
    return TriMesh(positions, normals, uvs, faces_v, faces_vn, faces_vt)


def make_uv_sphere(radius: float = 1.0, rings: int = 24, segments: int = 48,
                   center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Lat-long sphere with the equirect-style UV parameterization
    (u = azimuth, v = polar angle), pole axis +Z."""
    center = np.asarray(center, dtype=np.float64)
    verts = []
    uvs = []
    for j in range(rings + 1):
        v = j / rings
        theta = v * np.pi
        for i in range(segments + 1):  # duplicated seam column keeps UVs clean
            u = i / segments
            phi = u * 2.0 * np.pi - np.pi
            d = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
            verts.append(center + radius * d)
            uvs.append([u, 1.0 - v])
    verts = np.asarray(verts)
    uvs = np.asarray(uvs)
    normals = (verts - center) / radius
    faces = []
    cols = segments + 1
    for j in range(rings):
        for i in range(segments):
            a = j * cols + i
            b = a + 1
            c = a + cols
            d = c + 1
            if j > 0:
                faces.append([a, c, b])
            if j < rings - 1:
                faces.append([b, c, d])
    fv = np.asarray(faces, dtype=np.int64)
    return TriMesh(verts, normals, uvs, fv, fv.copy(), fv.copy())


def make_torus(major: float = 1.0, minor: float = 0.4, major_segments: int = 48,
               minor_segments: int = 24) -> TriMesh:
    """Torus around the Z axis; UVs are the (major, minor) angle grid."""
    verts = []
    normals = []
    uvs = []
    for j in range(minor_segments + 1):
        v = j / minor_segments
        beta = v * 2.0 * np.pi
        for i in range(major_segments + 1):
            u = i / major_segments
            alpha = u * 2.0 * np.pi
            ring = np.array([np.cos(alpha), np.sin(alpha), 0.0])
            n = np.cos(beta) * ring + np.array([0.0, 0.0, np.sin(beta)])
            verts.append(major * ring + minor * n)
            normals.append(n)
            uvs.append([u, v])
    verts = np.asarray(verts)
    normals = np.asarray(normals)
    uvs = np.asarray(uvs)
    faces = []
    cols = major_segments + 1
    for j in range(minor_segments):
        for i in range(major_segments):
            a = j * cols + i
            b = a + 1
            c = a + cols
            d = c + 1
            faces.append([a, b, c])
            faces.append([b, d, c])
    fv = np.asarray(faces, dtype=np.int64)
    return TriMesh(verts, normals, uvs, fv, fv.copy(), fv.copy())


def make_icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron with spherical UVs (seam handled by corner
    duplication)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [v for v in verts]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key in cache:
            return cache[key]
        m = verts[a] + verts[b]
        m /= np.linalg.norm(m)
        verts.append(m)
        cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = next_faces

    positions = np.asarray(verts) * radius
    fv = np.asarray(faces, dtype=np.int64)

    # spherical UVs per corner, duplicating the seam/pole corners
    dirs = positions / radius
    base_u = (np.arctan2(dirs[:, 1], dirs[:, 0]) + np.pi) / (2.0 * np.pi)
    base_v = 1.0 - np.arccos(np.clip(dirs[:, 2], -1, 1)) / np.pi
    uv_list = [[base_u[i], base_v[i]] for i in range(len(dirs))]
    ft = fv.copy()
    for fi in range(len(fv)):
        us = base_u[fv[fi]]
        if us.max() - us.min() > 0.5:  # triangle crosses the azimuth seam
            for k in range(3):
                if us[k] < 0.5:
                    uv_list.append([base_u[fv[fi, k]] + 1.0, base_v[fv[fi, k]]])
                    ft[fi, k] = len(uv_list) - 1
    uvs = np.asarray(uv_list)
    uvs[:, 0] = np.clip(uvs[:, 0], 0.0, 1.0)
    return TriMesh(positions, dirs, uvs, fv, fv.copy(), ft)
