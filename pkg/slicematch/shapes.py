# Deterministic synthetic meshes for tests, benchmarks and near-isometric matching experiments.

import numpy as np

from .mesh import TriMesh

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

ICOSAHEDRON_VERTICES = [
    (-1, GOLDEN_RATIO, 0), (1, GOLDEN_RATIO, 0), (-1, -GOLDEN_RATIO, 0), (1, -GOLDEN_RATIO, 0),
    (0, -1, GOLDEN_RATIO), (0, 1, GOLDEN_RATIO), (0, -1, -GOLDEN_RATIO), (0, 1, -GOLDEN_RATIO),
    (GOLDEN_RATIO, 0, -1), (GOLDEN_RATIO, 0, 1), (-GOLDEN_RATIO, 0, -1), (-GOLDEN_RATIO, 0, 1),
]

ICOSAHEDRON_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def tetrahedron(edge=1.0):
    """
    Regular tetrahedron with the given edge length.
    """
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    vertices *= edge / (2.0 * np.sqrt(2.0))
    return TriMesh(vertices, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


def unit_square():
    """
    The unit square split into two right triangles along the (0, 0)-(1, 1) diagonal.
    """
    return TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def grid(columns, rows, width=1.0, height=1.0):
    """
    A flat rectangular grid of (columns + 1) x (rows + 1) vertices in the z = 0 plane; vertex index is
    row * (columns + 1) + column.
    """
    xs = np.linspace(0.0, width, columns + 1)
    ys = np.linspace(0.0, height, rows + 1)
    vertices = np.array([[x, y, 0.0] for y in ys for x in xs])

    faces = []
    for row in range(rows):
        for column in range(columns):
            a = row * (columns + 1) + column
            b, c, d = a + 1, a + columns + 1, a + columns + 2
            faces += [[a, b, d], [a, d, c]]

    return TriMesh(vertices, faces)


def strip(segments, spacing=1.0):
    """
    A chain of collinear triangles: two rows of points along the x axis; the bottom row has indices 0..segments.
    """
    return grid(segments, 1, width=segments * spacing, height=1.0)


def icosphere(subdivisions=3, radius=1.0):
    """
    Sphere mesh built by repeated midpoint subdivision of an icosahedron; the vertex set is symmetric under every
    coordinate sign flip.
    """
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in ICOSAHEDRON_VERTICES]
    faces = [tuple(f) for f in ICOSAHEDRON_FACES]

    for _ in range(subdivisions):
        midpoints = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                point = vertices[a] + vertices[b]
                vertices.append(point / np.linalg.norm(point))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined

    return TriMesh(radius * np.array(vertices), faces)


def bumpy(mesh, amplitude=0.1, seed=0, symmetric=False):
    """
    Displace every vertex radially by a smooth random field (a few random low-frequency waves), breaking the
    symmetries of the input. With symmetric=True the field depends on |x| only through x**2, so a mesh that is
    mirror symmetric in x stays so.
    """
    rng = np.random.default_rng(seed)
    vertices = mesh.vertices
    directions = rng.normal(size=(4, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    if symmetric:
        directions[:, 0] = 0.0

    field = np.zeros(mesh.n_vertices)
    for direction, phase in zip(directions, phases):
        field += np.sin(vertices.dot(direction) * 2.0 + phase)
    if symmetric:
        field += vertices[:, 0] ** 2
    field /= np.abs(field).max()

    return mesh.with_vertices(vertices * (1.0 + amplitude * field)[:, None])


def stretched(mesh, scales):
    """
    Scale the coordinate axes independently (e.g. to turn a sphere into an elongated ellipsoid).
    """
    return mesh.with_vertices(mesh.vertices * np.asarray(scales, dtype=np.float64))


def tapered(mesh, taper):
    """
    Widen a flat mesh linearly along x: y is scaled by 1 at the smallest x and by 1 + taper at the largest. A grid
    becomes a right trapezoid with no mirror symmetry.
    """
    x = mesh.vertices[:, 0]
    span = max(x.max() - x.min(), 1e-12)
    vertices = mesh.vertices.copy()
    vertices[:, 1] *= 1.0 + taper * (x - x.min()) / span
    return mesh.with_vertices(vertices)


def bend(mesh, curvature):
    """
    Smoothly bend a mesh along its x axis into an arc of the given curvature in the x-z plane, keeping the
    connectivity; the result is nearly isometric to the input and vertex i corresponds to vertex i.
    """
    if curvature == 0:
        return mesh.with_vertices(mesh.vertices.copy())

    x, y, z = mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.vertices[:, 2]
    radius = 1.0 / curvature
    angle = x * curvature
    bent = np.column_stack([(radius - z) * np.sin(angle), y, radius - (radius - z) * np.cos(angle)])
    return mesh.with_vertices(bent)


def mirror_partner(mesh, axis=0):
    """
    For a mesh symmetric under flipping the given axis, return the index of each vertex's mirror image.
    """
    flipped = mesh.vertices.copy()
    flipped[:, axis] *= -1.0
    distances = np.linalg.norm(mesh.vertices[None, :, :] - flipped[:, None, :], axis=2)
    return np.argmin(distances, axis=1)
