"""ASCII PLY read/write for triangle meshes with normals and colors."""
from pathlib import Path

import numpy as np

from .surface import TriangleMesh


class MalformedMeshError(ValueError):
    pass


def export_ply(mesh: TriangleMesh, path):
    v, n = mesh.vertices, mesh.normals
    c = mesh.colors if mesh.colors is not None else np.full((mesh.n_vertices, 3), 200, np.uint8)
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property float x", "property float y", "property float z",
             "property float nx", "property float ny", "property float nz",
             "property uchar red", "property uchar green", "property uchar blue",
             f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    for p, q, col in zip(v, n, c):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {q[0]:.9g} {q[1]:.9g} {q[2]:.9g} "
                     f"{int(col[0])} {int(col[1])} {int(col[2])}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_ply(path) -> TriangleMesh:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MalformedMeshError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedMeshError("missing 'ply' magic")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise MalformedMeshError("only 'format ascii 1.0' is supported")
    nv = nf = None
    props = []
    cur = None
    end = None
    for i, line in enumerate(lines[2:], 2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "element":
            if len(parts) != 3:
                raise MalformedMeshError(f"line {i + 1}: bad element line")
            cur = parts[1]
            if cur == "vertex":
                nv = int(parts[2])
            elif cur == "face":
                nf = int(parts[2])
        elif parts[0] == "property":
            if cur == "vertex":
                props.append(parts[-1])
        elif parts[0] == "end_header":
            end = i
            break
        else:
            raise MalformedMeshError(f"line {i + 1}: unexpected header entry {parts[0]!r}")
    if end is None or nv is None:
        raise MalformedMeshError("incomplete header")
    nf = nf or 0
    body = lines[end + 1:]
    if len(body) < nv + nf:
        raise MalformedMeshError("file truncated")
    try:
        vdata = np.array([[float(x) for x in body[k].split()] for k in range(nv)]).reshape(nv, len(props))
    except ValueError as exc:
        raise MalformedMeshError(f"bad vertex record: {exc}") from exc
    col = {p: vdata[:, k] for k, p in enumerate(props)}
    if not all(k in col for k in ("x", "y", "z")):
        raise MalformedMeshError("vertex element lacks x/y/z")
    verts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1) if "nx" in col else None
    colors = (np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
              if "red" in col else None)
    faces = []
    for k in range(nv, nv + nf):
        parts = body[k].split()
        try:
            cnt = int(parts[0])
            idx = [int(x) for x in parts[1:1 + cnt]]
        except (ValueError, IndexError) as exc:
            raise MalformedMeshError(f"bad face record on body line {k + 1}") from exc
        if cnt != 3 or len(idx) != 3:
            raise MalformedMeshError("only triangle faces are supported")
        faces.append(idx)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= nv):
        raise MalformedMeshError("face index out of range")
    return TriangleMesh(verts, faces, normals, colors)
