"""Triangle meshes as probability measures.

A mesh is stored as a read-only ``(V, 3)`` float array of vertices and a
``(F, 3)`` int array of faces.  Point sets are plain ``(N, 3)`` float arrays;
their uniform weights ``1/N`` are implicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.utils import check_array

__all__ = [
    "MeshFormatError",
    "TriMesh",
    "make_rng",
    "check_points",
    "load_mesh",
    "save_mesh",
    "vertex_measure",
    "sample_surface",
    "sample_surface_with_faces",
    "adjacency",
    "make_synthetic",
    "parse_shape",
]


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


def make_rng(seed=0):
    """Return a counter-based (Philox) generator.

    Generators are passed through unchanged so callers can thread one stream
    through several calls.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def check_points(points, name="points", min_points=1):
    """Validate an ``(N, 3)`` finite float array and return a copy-free view."""
    arr = check_array(
        points,
        dtype=np.float64,
        ensure_min_samples=min_points,
        input_name=name,
    )
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _face_areas(vertices, faces):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """An immutable triangle mesh.

    Parameters
    ----------
    vertices : array-like, shape (V, 3)
        Vertex coordinates in mm.
    faces : array-like, shape (F, 3)
        Zero-based vertex indices of each triangle.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise ValueError(f"vertices must have shape (V, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices contain non-finite coordinates")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise ValueError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.issubdtype(f.dtype, np.integer):
            if not np.all(f == np.round(f)):
                raise ValueError("face indices must be integers")
        f = f.astype(np.int64)
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face: repeated vertex index")
        areas = _face_areas(v, f)
        if not areas.sum() > 0:
            raise ValueError("mesh has zero total surface area")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        object.__setattr__(self, "face_areas", _readonly(areas))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def area(self):
        return float(self.face_areas.sum())

    def edges(self):
        """Unique undirected edges as a sorted ``(E, 2)`` array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()) + self.n_faces

    def recompute_areas(self):
        return _face_areas(self.vertices, self.faces)

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return TriMesh(vertices, self.faces)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (
            self.vertices.shape == other.vertices.shape
            and self.faces.shape == other.faces.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# file I/O

def _parse_obj(lines):
    verts, faces = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag = tok[0]
        if tag == "v":
            if len(tok) < 4:
                raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshFormatError(f"line {lineno}: malformed vertex") from None
        elif tag == "f":
            if len(tok) != 4:
                raise MeshFormatError(
                    f"line {lineno}: non-triangular face with {len(tok) - 1} vertices"
                )
            idx = []
            for t in tok[1:]:
                try:
                    i = int(t.split("/")[0])
                except ValueError:
                    raise MeshFormatError(f"line {lineno}: malformed face index") from None
                if i < 0:
                    i = len(verts) + i + 1
                if i < 1:
                    raise MeshFormatError(f"line {lineno}: face index out of range")
                idx.append(i - 1)
            faces.append(idx)
        # vn, vt, o, g, s, usemtl ... carry nothing we need
    return verts, faces


def _parse_ply(lines):
    it = iter(enumerate(lines, start=1))
    try:
        lineno, first = next(it)
    except StopIteration:
        raise MeshFormatError("line 1: empty file") from None
    if first.strip() != "ply":
        raise MeshFormatError(f"line {lineno}: missing 'ply' magic")
    elements = []  # (name, count, [props])
    fmt = None
    for lineno, raw in it:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
            if fmt != "ascii":
                raise MeshFormatError(f"line {lineno}: only ASCII PLY is supported")
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise MeshFormatError(f"line {lineno}: malformed element header") from None
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"line {lineno}: property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise MeshFormatError(f"line {lineno}: unexpected header line")
    else:
        raise MeshFormatError("missing end_header")
    if fmt is None:
        raise MeshFormatError("missing format line")

    verts, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            try:
                lineno, raw = next(it)
            except StopIteration:
                raise MeshFormatError(f"unexpected end of file in element '{name}'") from None
            tok = raw.split()
            if name == "vertex":
                try:
                    vals = dict(zip(props, (float(t) for t in tok)))
                    verts.append([vals["x"], vals["y"], vals["z"]])
                except (KeyError, ValueError):
                    raise MeshFormatError(f"line {lineno}: malformed vertex") from None
            elif name == "face":
                try:
                    n = int(tok[0])
                    idx = [int(t) for t in tok[1 : 1 + n]]
                except (IndexError, ValueError):
                    raise MeshFormatError(f"line {lineno}: malformed face") from None
                if n != 3 or len(idx) != 3:
                    raise MeshFormatError(
                        f"line {lineno}: non-triangular face with {n} vertices"
                    )
                faces.append(idx)
    return verts, faces


def load_mesh(path):
    """Read an ASCII OBJ or PLY triangle mesh.

    Vertex order is kept as in the file and duplicate positions are not
    merged.  Raises :class:`MeshFormatError` naming the offending line.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
        verts, faces = _parse_ply(lines)
    else:
        verts, faces = _parse_obj(lines)
    if not verts or not faces:
        raise MeshFormatError(f"{path}: empty mesh")
    try:
        return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))
    except ValueError as exc:
        raise MeshFormatError(f"{path}: {exc}") from None


def _fmt(x):
    return repr(float(x))


def save_mesh(mesh, path):
    """Write ``mesh`` as ASCII OBJ, or PLY if the suffix is ``.ply``.

    Coordinates are written with shortest round-trip repr so that
    ``load_mesh(save_mesh(m))`` reproduces every bit.
    """
    path = Path(path)
    out = []
    if path.suffix.lower() == ".ply":
        out += [
            "ply",
            "format ascii 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {mesh.n_faces}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        out += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
        out += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    else:
        out += ["v " + " ".join(_fmt(c) for c in v) for v in mesh.vertices]
        out += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# measures

def vertex_measure(mesh):
    """Vertices of ``mesh`` as an empirical point set, in index order."""
    return np.array(mesh.vertices, dtype=np.float64)


def sample_surface_with_faces(mesh, n, rng=None):
    """Area-weighted surface samples and the face each one came from."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a zero-area mesh")
    rng = make_rng(0 if rng is None else rng)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r = rng.random((n, 2))
    s = np.sqrt(r[:, 0])
    u = 1.0 - s
    v = s * (1.0 - r[:, 1])
    w = s * r[:, 1]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]
    return pts, face_idx


def sample_surface(mesh, n, rng=None):
    """Draw ``n`` points uniformly (by area) from the surface of ``mesh``."""
    return sample_surface_with_faces(mesh, n, rng)[0]


def adjacency(mesh):
    """1-ring neighbour lists, sorted ascending, one list per vertex."""
    edges = mesh.edges()
    nbrs = [[] for _ in range(mesh.n_vertices)]
    for i, j in edges:
        nbrs[i].append(int(j))
        nbrs[j].append(int(i))
    return [sorted(n) for n in nbrs]


# ---------------------------------------------------------------------------
# synthetic shapes

def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(v, f):
    cache = {}
    verts = list(v)

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in f:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(out, dtype=np.int64)


def icosphere(subdivisions=0):
    """Unit icosphere with outward-oriented faces."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    v, f = _icosahedron()
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    return v, f


def parse_shape(spec):
    """Parse ``"sphere"``, ``"ellipsoid(a,b,c)"`` or ``"perturbed-sphere(amp,freq)"``."""
    if isinstance(spec, tuple):
        return spec
    s = spec.strip().lower().replace(" ", "")
    name, _, rest = s.partition("(")
    args = ()
    if rest:
        if not rest.endswith(")"):
            raise ValueError(f"bad shape spec {spec!r}")
        try:
            args = tuple(float(a) for a in rest[:-1].split(",") if a)
        except ValueError:
            raise ValueError(f"bad shape spec {spec!r}") from None
    arity = {"sphere": (0,), "ellipsoid": (3,), "perturbed-sphere": (0, 2)}
    if name not in arity:
        raise ValueError(f"unknown shape {name!r}")
    if len(args) not in arity[name]:
        raise ValueError(f"shape {name!r} takes {arity[name]} arguments, got {len(args)}")
    if name == "perturbed-sphere" and not args:
        args = (0.15, 2.0)
    return (name,) + args


def make_synthetic(shape="sphere", subdivisions=3, rng=None, scale=1.0):
    """Closed synthetic surface built on a subdivided unit icosphere.

    ``perturbed-sphere(amplitude, frequency)`` displaces each vertex radially
    by ``amplitude * mean_k sin(frequency * <d_k, x> + phi_k)`` over three
    random directions ``d_k`` and phases ``phi_k`` drawn from ``rng``; the
    result generically has no rotational or reflective symmetry.  ``scale``
    multiplies all coordinates (a radius in mm for mm-scale experiments).
    """
    if not scale > 0:
        raise ValueError("scale must be > 0")
    name, *args = parse_shape(shape)
    v, f = icosphere(subdivisions)
    if name == "ellipsoid":
        v = v * np.asarray(args, dtype=np.float64)
    elif name == "perturbed-sphere":
        amp, freq = args
        rng = make_rng(0 if rng is None else rng)
        d = rng.standard_normal((3, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        bump = np.sin(freq * v @ d.T + phase).mean(axis=1)
        v = v * (1.0 + amp * bump)[:, None]
    return TriMesh(v * scale, f)
