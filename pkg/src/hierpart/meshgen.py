"""Structured demo mesh generators.

Small deterministic meshes for tests, fixtures, and CLI walkthroughs:
a right-triangle grid on a rectangle and a six-tet (Kuhn) subdivision of a
box.  Ids are dense, nodes lexicographic, elements cell by cell.
"""

from __future__ import annotations

from itertools import permutations

from .mesh import MeshChunk, element_faces

# Boundary tags: 2D uses 1..4 (bottom, right, top, left), 3D uses 1..6
# (xmin, xmax, ymin, ymax, zmin, zmax).


def triangle_grid(nx: int, ny: int, *, spacing: float = 1.0) -> MeshChunk:
    """2*nx*ny right triangles tiling an nx-by-ny rectangle."""
    if nx < 1 or ny < 1:
        raise ValueError("grid needs nx >= 1 and ny >= 1")
    chunk = MeshChunk("triangle")
    for j in range(ny + 1):
        for i in range(nx + 1):
            chunk.nodes[j * (nx + 1) + i] = (i * spacing, j * spacing)
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10 = v00 + 1
            v01 = v00 + (nx + 1)
            v11 = v01 + 1
            cell = j * nx + i
            chunk.elements[2 * cell] = (v00, v10, v11)
            chunk.elements[2 * cell + 1] = (v00, v11, v01)
            if j == 0:
                chunk.boundary.append((1, (v00, v10)))
            if i == nx - 1:
                chunk.boundary.append((2, (v10, v11)))
            if j == ny - 1:
                chunk.boundary.append((3, (v11, v01)))
            if i == 0:
                chunk.boundary.append((4, (v01, v00)))
    return chunk


def tet_box(nx: int, ny: int, nz: int, *, spacing: float = 1.0) -> MeshChunk:
    """Kuhn subdivision of an nx-by-ny-by-nz box: six tets per cube cell.

    Every cube is split along the same main diagonal, so faces of adjacent
    cubes match and the mesh is conforming.
    """
    if nx < 1 or ny < 1 or nz < 1:
        raise ValueError("box needs nx, ny, nz >= 1")
    chunk = MeshChunk("tetrahedron")

    def nid(i: int, j: int, k: int) -> int:
        return (k * (ny + 1) + j) * (nx + 1) + i

    for k in range(nz + 1):
        for j in range(ny + 1):
            for i in range(nx + 1):
                chunk.nodes[nid(i, j, k)] = (i * spacing, j * spacing, k * spacing)

    perms = list(permutations((0, 1, 2)))
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                cell = (k * ny + j) * nx + i
                base = [i, j, k]
                for p, axes in enumerate(perms):
                    corner = list(base)
                    verts = [nid(*corner)]
                    for ax in axes:
                        corner[ax] += 1
                        verts.append(nid(*corner))
                    chunk.elements[cell * 6 + p] = tuple(verts)

    _attach_box_boundary(chunk, nx, ny, nz, spacing)
    return chunk


def _attach_box_boundary(chunk: MeshChunk, nx: int, ny: int, nz: int,
                         spacing: float) -> None:
    counts: dict[tuple[int, ...], int] = {}
    for conn in chunk.elements.values():
        for face in element_faces(conn, chunk.kind):
            counts[face] = counts.get(face, 0) + 1
    extents = (nx * spacing, ny * spacing, nz * spacing)
    for face in sorted(f for f, c in counts.items() if c == 1):
        coords = [chunk.nodes[n] for n in face]
        tag = None
        for axis in range(3):
            if all(c[axis] == 0.0 for c in coords):
                tag = 2 * axis + 1
                break
            if all(c[axis] == extents[axis] for c in coords):
                tag = 2 * axis + 2
                break
        assert tag is not None, f"open face {face} not on the box surface"
        chunk.boundary.append((tag, face))
