# Triangle meshes: file formats, validation, discrete Laplace-Beltrami operators and edge-graph geodesics.

import logging
import os
import struct

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .exceptions import DataException, NumericalException

logger = logging.getLogger(__name__)

# Faces whose area is below this fraction of the total surface area are rejected at load.
DEGENERATE_AREA_TOLERANCE = 1e-12

MESH_FORMATS = ("off", "ply", "obj")


def _face_exception(face, message):
    """
    Build a DataException which remembers the offending face, so loaders can point at its location in the file.
    """
    error = DataException(message)
    error.face = face
    return error


class TriMesh(object):
    """
    A triangle mesh: n x 3 vertex positions and m x 3 vertex indices, with per-face areas and the total surface
    area. The constructor validates the mesh (index range, repeated vertices, degenerate faces, connectivity);
    instances are never modified afterwards.
    """

    def __init__(self, vertices, faces):
        vertices = np.array(vertices, dtype=np.float64)
        faces = np.array(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] == 0:
            raise DataException("Vertices must be a non-empty n x 3 array, got shape " + repr(vertices.shape))
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] == 0:
            raise DataException("Faces must be a non-empty m x 3 array, got shape " + repr(faces.shape))
        if not np.all(np.isfinite(vertices)):
            raise DataException("Vertex coordinates must be finite")

        n = vertices.shape[0]
        out_of_range = np.flatnonzero(np.any((faces < 0) | (faces >= n), axis=1))
        if len(out_of_range) > 0:
            face = int(out_of_range[0])
            raise _face_exception(face, "Face %d references vertex %s, but the mesh has %d vertices"
                    % (face, repr(faces[face].tolist()), n))

        repeated = np.flatnonzero((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2]))
        if len(repeated) > 0:
            face = int(repeated[0])
            raise _face_exception(face, "Face %d repeats a vertex: %s" % (face, repr(faces[face].tolist())))

        corners = vertices[faces]
        face_areas = 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]),
                axis=1)
        total_area = float(face_areas.sum())
        if not total_area > 0:
            raise DataException("Mesh has zero surface area")

        degenerate = np.flatnonzero(face_areas < DEGENERATE_AREA_TOLERANCE * total_area)
        if len(degenerate) > 0:
            face = int(degenerate[0])
            raise _face_exception(face, "Face %d is degenerate (area %g of total %g)"
                    % (face, face_areas[face], total_area))

        # Unique undirected edges, each stored as (low, high).
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
        edges = np.unique(np.sort(edges, axis=1), axis=0)

        adjacency = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
        components, _ = csgraph.connected_components(adjacency, directed=False)
        if components != 1:
            raise DataException("Mesh is disconnected: the edge graph has %d components" % components)

        for array in (vertices, faces, face_areas, edges):
            array.setflags(write=False)

        self.vertices = vertices
        self.faces = faces
        self.face_areas = face_areas
        self.total_area = total_area
        self.edges = edges

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def edge_lengths(self):
        """
        Euclidean length of every edge in self.edges.
        """
        return np.linalg.norm(self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1)

    def edge_graph(self):
        """
        Symmetric sparse matrix of edge lengths (the graph used for geodesic distances).
        """
        n = self.n_vertices
        lengths = self.edge_lengths()
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sparse.csr_matrix((np.concatenate([lengths, lengths]), (rows, cols)), shape=(n, n))

    def with_vertices(self, vertices):
        """
        Return a new mesh with the same connectivity and the given vertex positions.
        """
        return TriMesh(vertices, self.faces)

    def transformed(self, rotation=None, translation=None, scale=1.0):
        """
        Return a copy with every vertex mapped to scale * R v + t.
        """
        vertices = self.vertices
        if rotation is not None:
            vertices = vertices.dot(np.asarray(rotation, dtype=np.float64).T)
        vertices = scale * vertices
        if translation is not None:
            vertices = vertices + np.asarray(translation, dtype=np.float64)
        return TriMesh(vertices, self.faces)

    def permuted(self, order):
        """
        Return a relabeled copy whose vertex i is vertex order[i] of this mesh.
        """
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.n_vertices)):
            raise DataException("Vertex order must be a permutation of 0.." + str(self.n_vertices - 1))
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return TriMesh(self.vertices[order], inverse[self.faces])


def cotangent_laplacian(mesh):
    """
    Build the cotangent stiffness matrix W and the barycentric lumped mass matrix M of a mesh.

    Off-diagonal entries are w_ij = -(cot a_ij + cot b_ij) / 2 summed over the faces sharing edge (i, j), so
    non-manifold edges simply accumulate more terms; the diagonal is minus the row sum. M is diagonal, each vertex
    receiving a third of the area of its incident faces. Both are returned as CSR matrices.
    """
    vertices, faces = mesh.vertices, mesh.faces
    n = mesh.n_vertices

    rows, cols, values = [], [], []
    for corner in range(3):
        opposite = faces[:, corner]
        i = faces[:, (corner + 1) % 3]
        j = faces[:, (corner + 2) % 3]
        u = vertices[i] - vertices[opposite]
        w = vertices[j] - vertices[opposite]
        cot = np.sum(u * w, axis=1) / np.linalg.norm(np.cross(u, w), axis=1)
        rows += [i, j]
        cols += [j, i]
        values += [-0.5 * cot, -0.5 * cot]

    stiffness = sparse.coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsr()
    stiffness = (stiffness - sparse.diags(np.asarray(stiffness.sum(axis=1)).ravel())).tocsr()

    lumped = np.bincount(faces.ravel(), weights=np.repeat(mesh.face_areas, 3), minlength=n) / 3.0
    mass = sparse.diags(lumped).tocsr()

    return stiffness, mass


def geodesic_distances(mesh, sources):
    """
    Shortest-path distances from each source vertex to every vertex, over the edge graph with Euclidean edge
    lengths. Returns a |sources| x n array; this overestimates true surface geodesics slightly.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.ndim != 1:
        raise DataException("Geodesic sources must be a flat list of vertex indices")
    if np.any((sources < 0) | (sources >= mesh.n_vertices)):
        raise DataException("Geodesic source out of range for a mesh with %d vertices: %s"
                % (mesh.n_vertices, repr(sources[(sources < 0) | (sources >= mesh.n_vertices)].tolist())))

    distances = csgraph.dijkstra(mesh.edge_graph(), directed=False, indices=sources)
    if not np.all(np.isfinite(distances)):
        raise NumericalException("Unreachable vertex in geodesic computation on a connected mesh")

    return distances


# --- File formats ---

def _location_exception(path, location, message):
    return DataException("%s: %s: %s" % (path, location, message))


def _build_mesh(path, vertices, faces, face_locations):
    """
    Construct a TriMesh from parsed data, attaching the file location of the offending face to any error.
    """
    try:
        return TriMesh(vertices, faces)
    except DataException as error:
        face = getattr(error, "face", None)
        if face is not None and face < len(face_locations):
            raise _location_exception(path, face_locations[face], str(error))
        raise DataException("%s: %s" % (path, str(error)))


def _fan(polygon):
    """
    Fan-triangulate a polygon given as a list of vertex indices.
    """
    return [[polygon[0], polygon[i], polygon[i + 1]] for i in range(1, len(polygon) - 1)]


def _text_records(path):
    """
    Yield (line number, tokens) for every non-empty, non-comment line of a text file.
    """
    with open(path, "r") as mesh_file:
        for number, line in enumerate(mesh_file, start=1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield number, line.split()


def read_off(path):
    """
    Load an ASCII OFF (or COFF) file. Colors and the edge count are ignored; polygons are fan-triangulated.
    """
    records = _text_records(path)
    try:
        number, tokens = next(records)
    except StopIteration:
        raise _location_exception(path, "line 1", "empty file")

    if tokens[0] not in ("OFF", "COFF"):
        raise _location_exception(path, "line %d" % number, "missing OFF header, found " + repr(tokens[0]))

    counts = tokens[1:]
    if not counts:
        try:
            number, counts = next(records)
        except StopIteration:
            raise _location_exception(path, "line %d" % number, "missing vertex/face counts")
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise _location_exception(path, "line %d" % number, "malformed counts " + repr(" ".join(counts)))

    vertices = []
    for _ in range(n_vertices):
        try:
            number, tokens = next(records)
            vertices.append([float(t) for t in tokens[:3]])
        except StopIteration:
            raise _location_exception(path, "line %d" % number, "expected %d vertices, found %d"
                    % (n_vertices, len(vertices)))
        except ValueError:
            raise _location_exception(path, "line %d" % number, "malformed vertex " + repr(" ".join(tokens)))
        if len(vertices[-1]) != 3:
            raise _location_exception(path, "line %d" % number, "vertex needs 3 coordinates")

    faces, face_locations = [], []
    for _ in range(n_faces):
        try:
            number, tokens = next(records)
            size = int(tokens[0])
            polygon = [int(t) for t in tokens[1:1 + size]]
        except StopIteration:
            raise _location_exception(path, "line %d" % number, "expected %d faces, found %d"
                    % (n_faces, len(faces)))
        except ValueError:
            raise _location_exception(path, "line %d" % number, "malformed face " + repr(" ".join(tokens)))
        if size < 3 or len(polygon) != size:
            raise _location_exception(path, "line %d" % number, "face needs at least 3 vertex indices")
        for triangle in _fan(polygon):
            faces.append(triangle)
            face_locations.append("line %d" % number)

    return _build_mesh(path, vertices, faces, face_locations)


def read_obj(path):
    """
    Load the vertices and faces of a Wavefront OBJ file. Texture/normal references in face tokens are dropped,
    negative indices count back from the latest vertex, and polygons are fan-triangulated.
    """
    vertices, faces, face_locations = [], [], []
    for number, tokens in _text_records(path):
        if tokens[0] == "v":
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise _location_exception(path, "line %d" % number, "malformed vertex " + repr(" ".join(tokens)))
            if len(vertices[-1]) != 3:
                raise _location_exception(path, "line %d" % number, "vertex needs 3 coordinates")
        elif tokens[0] == "f":
            polygon = []
            for token in tokens[1:]:
                try:
                    index = int(token.split("/")[0])
                except ValueError:
                    raise _location_exception(path, "line %d" % number, "malformed face index " + repr(token))
                if index == 0:
                    raise _location_exception(path, "line %d" % number, "OBJ indices are 1-based, found 0")
                polygon.append(index - 1 if index > 0 else len(vertices) + index)
            if len(polygon) < 3:
                raise _location_exception(path, "line %d" % number, "face needs at least 3 vertex indices")
            for triangle in _fan(polygon):
                faces.append(triangle)
                face_locations.append("line %d" % number)

    return _build_mesh(path, vertices, faces, face_locations)


# PLY scalar types -> struct codes (little-endian).
PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply_header(path, ply_file):
    """
    Parse a PLY header, returning (format, elements, header line count); elements is a list of
    (name, count, properties) where a property is (name, type) or (name, count type, item type) for lists.
    """
    line = ply_file.readline()
    if line.strip() != b"ply":
        raise _location_exception(path, "line 1", "missing 'ply' magic")

    file_format, elements, number = None, [], 1
    while True:
        line = ply_file.readline()
        number += 1
        if not line:
            raise _location_exception(path, "line %d" % number, "header ended without end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        try:
            if tokens[0] == "format":
                file_format = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    properties = (tokens[4], PLY_TYPES[tokens[2]], PLY_TYPES[tokens[3]])
                else:
                    properties = (tokens[2], PLY_TYPES[tokens[1]])
                elements[-1][2].append(properties)
            else:
                raise _location_exception(path, "line %d" % number, "unknown header keyword " + repr(tokens[0]))
        except (IndexError, KeyError, ValueError):
            raise _location_exception(path, "line %d" % number, "malformed header line " + repr(" ".join(tokens)))

    if file_format not in ("ascii", "binary_little_endian"):
        raise _location_exception(path, "line %d" % number, "unsupported PLY format " + repr(file_format))
    return file_format, elements, number


def _collect_ply_element(path, name, records, vertices, faces, face_locations):
    """
    Keep the coordinates of vertex records and the index lists of face records; other elements are skipped.
    """
    for location, record in records:
        if name == "vertex":
            try:
                vertices.append([float(record["x"]), float(record["y"]), float(record["z"])])
            except KeyError:
                raise _location_exception(path, location, "vertex element lacks x/y/z properties")
        elif name == "face":
            polygon = record.get("vertex_indices", record.get("vertex_index"))
            if polygon is None or len(polygon) < 3:
                raise _location_exception(path, location, "face needs a vertex_indices list of at least 3 indices")
            for triangle in _fan([int(i) for i in polygon]):
                faces.append(triangle)
                face_locations.append(location)


def read_ply(path):
    """
    Load vertices and faces from an ASCII or binary little-endian PLY file.
    """
    vertices, faces, face_locations = [], [], []
    with open(path, "rb") as ply_file:
        file_format, elements, header_lines = _read_ply_header(path, ply_file)

        if file_format == "ascii":
            lines = ply_file.read().decode("ascii", errors="replace").splitlines()
            position = 0
            for name, count, properties in elements:
                records = []
                for _ in range(count):
                    while position < len(lines) and not lines[position].strip():
                        position += 1
                    if position >= len(lines):
                        raise _location_exception(path, "line %d" % (header_lines + position + 1),
                                "expected %d %s records" % (count, name))
                    location = "line %d" % (header_lines + position + 1)
                    tokens = lines[position].split()
                    position += 1
                    record, cursor = {}, 0
                    try:
                        for prop in properties:
                            if len(prop) == 3:
                                size = int(tokens[cursor])
                                record[prop[0]] = [float(t) for t in tokens[cursor + 1:cursor + 1 + size]]
                                if len(record[prop[0]]) != size:
                                    raise IndexError(prop[0])
                                cursor += 1 + size
                            else:
                                record[prop[0]] = float(tokens[cursor])
                                cursor += 1
                    except (IndexError, ValueError):
                        raise _location_exception(path, location, "malformed %s record" % name)
                    records.append((location, record))
                _collect_ply_element(path, name, records, vertices, faces, face_locations)
        else:
            data = ply_file.read()
            base = ply_file.tell() - len(data)
            offset = 0
            for name, count, properties in elements:
                records = []
                for _ in range(count):
                    location = "byte %d" % (base + offset)
                    record = {}
                    try:
                        for prop in properties:
                            if len(prop) == 3:
                                (size,) = struct.unpack_from("<" + prop[1], data, offset)
                                offset += struct.calcsize(prop[1])
                                record[prop[0]] = list(struct.unpack_from("<%d%s" % (size, prop[2]), data, offset))
                                offset += size * struct.calcsize(prop[2])
                            else:
                                (record[prop[0]],) = struct.unpack_from("<" + prop[1], data, offset)
                                offset += struct.calcsize(prop[1])
                    except struct.error:
                        raise _location_exception(path, location, "truncated %s record" % name)
                    records.append((location, record))
                _collect_ply_element(path, name, records, vertices, faces, face_locations)

    return _build_mesh(path, vertices, faces, face_locations)


def load_mesh(path, format=None):
    """
    Load a triangle mesh from an OFF, PLY or OBJ file. The format defaults to the file extension; vertex order is
    preserved from the file.
    """
    file_format = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    if file_format not in MESH_FORMATS:
        raise DataException("Unknown mesh format " + repr(file_format) + " for " + path)

    reader = {"off": read_off, "ply": read_ply, "obj": read_obj}[file_format]
    mesh = reader(path)
    logger.debug("Loaded %s: %d vertices, %d faces", path, mesh.n_vertices, mesh.n_faces)
    return mesh


def write_off(path, mesh):
    """
    Write a mesh as an ASCII OFF file.
    """
    with open(path, "w") as off_file:
        off_file.write("OFF\n%d %d 0\n" % (mesh.n_vertices, mesh.n_faces))
        np.savetxt(off_file, mesh.vertices, fmt="%.17g %.17g %.17g")
        np.savetxt(off_file, mesh.faces, fmt="3 %d %d %d")


def write_ply(path, mesh, colors=None):
    """
    Write a mesh as an ASCII PLY file, optionally with per-vertex RGB colors (n x 3 values in [0, 255]).
    """
    if colors is not None:
        colors = np.clip(np.rint(np.asarray(colors, dtype=np.float64)), 0, 255).astype(np.int64)
        if colors.shape != (mesh.n_vertices, 3):
            raise DataException("Expected %d x 3 colors, got shape %s" % (mesh.n_vertices, repr(colors.shape)))

    with open(path, "w") as ply_file:
        ply_file.write("ply\nformat ascii 1.0\n")
        ply_file.write("element vertex %d\n" % mesh.n_vertices)
        ply_file.write("property double x\nproperty double y\nproperty double z\n")
        if colors is not None:
            ply_file.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        ply_file.write("element face %d\n" % mesh.n_faces)
        ply_file.write("property list uchar int vertex_indices\nend_header\n")
        for i, vertex in enumerate(mesh.vertices):
            line = "%.17g %.17g %.17g" % tuple(vertex)
            if colors is not None:
                line += " %d %d %d" % tuple(colors[i])
            ply_file.write(line + "\n")
        np.savetxt(ply_file, mesh.faces, fmt="3 %d %d %d")
