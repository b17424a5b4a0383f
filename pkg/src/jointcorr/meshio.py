"""OBJ / PLY mesh files and correspondence files."""
from __future__ import annotations

import os

import numpy as np

from .errors import MeshFormatError, MeshIndexError
from .mesh import TriMesh

CORR_MAGIC = b"CORRv001"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return load_obj(path)
    if ext == ".ply":
        return read_ply(path)["mesh"]
    raise MeshFormatError(f"{path}: unsupported extension {ext!r}")


def save_mesh(mesh: TriMesh, path, **kw):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return save_obj(mesh, path)
    if ext == ".ply":
        return write_ply(mesh, path, **kw)
    raise MeshFormatError(f"{path}: unsupported extension {ext!r}")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex line") from None
                if len(verts[-1]) != 3:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        k = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshFormatError(f"{path}:{lineno}: bad face index {tok!r}") from None
                    if k == 0:
                        raise MeshIndexError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                    k = k - 1 if k > 0 else len(verts) + k
                    if not 0 <= k < len(verts):
                        raise MeshIndexError(f"{path}:{lineno}: face index {tok} out of range")
                    idx.append(k)
                if len(idx) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face needs at least 3 vertices")
                for t in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[t], idx[t + 1]))
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(p))
        for f in mesh.faces + 1:
            fh.write("f %d %d %d\n" % tuple(f))


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MeshFormatError(f"{path}: offset 0: missing 'ply' magic")
    fmt = None
    elements = []  # [name, count, [(prop, dtype) | (prop, ('list', count_t, item_t))]]
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError(f"{path}: offset {fh.tell()}: header not terminated")
        toks = line.decode("ascii", "replace").split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        if toks[0] == "format":
            fmt = toks[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise MeshFormatError(f"{path}: unsupported PLY format {fmt}")
        elif toks[0] == "element":
            elements.append([toks[1], int(toks[2]), []])
        elif toks[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: offset {fh.tell()}: property before element")
            try:
                if toks[1] == "list":
                    elements[-1][2].append((toks[4], ("list", _PLY_TYPES[toks[2]], _PLY_TYPES[toks[3]])))
                else:
                    elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
            except KeyError as exc:
                raise MeshFormatError(f"{path}: offset {fh.tell()}: unknown PLY type {exc}") from None
        elif toks[0] == "end_header":
            break
        else:
            raise MeshFormatError(f"{path}: offset {fh.tell()}: unexpected header line {toks[0]!r}")
    if fmt is None:
        raise MeshFormatError(f"{path}: missing format line")
    return fmt, elements


def read_ply(path) -> dict:
    """Parse a PLY file.

    Returns a dict with ``mesh`` and ``vertex`` (mapping property name to array,
    e.g. colours written by :func:`write_ply`).
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body_offset = fh.tell()
        data = fh.read()
    out = {}
    if fmt == "ascii":
        lines = data.decode("ascii", "replace").splitlines()
        pos = 0
        for name, count, props in elements:
            rows = []
            for r in range(count):
                while pos < len(lines) and not lines[pos].strip():
                    pos += 1
                if pos >= len(lines):
                    raise MeshFormatError(f"{path}: unexpected end of data in element {name!r}")
                toks = lines[pos].split()
                pos += 1
                vals, t = {}, 0
                try:
                    for pname, ptype in props:
                        if isinstance(ptype, tuple):
                            k = int(toks[t])
                            vals[pname] = [int(x) for x in toks[t + 1:t + 1 + k]]
                            t += 1 + k
                        else:
                            vals[pname] = float(toks[t])
                            t += 1
                except (ValueError, IndexError):
                    raise MeshFormatError(f"{path}: data line {pos}: malformed {name!r} record") from None
                rows.append(vals)
            out[name] = rows
        vertex = {p: np.array([r[p] for r in out.get("vertex", [])], dtype=np.dtype(t))
                  for p, t in _scalar_props(elements, "vertex")}
        faces = [r.get("vertex_indices", r.get("vertex_index")) for r in out.get("face", [])]
    else:
        offset = 0
        vertex, faces = {}, []
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, "<" + t) for p, t in props])
                need = dt.itemsize * count
                if offset + need > len(data):
                    raise MeshFormatError(f"{path}: offset {body_offset + offset}: truncated element {name!r}")
                arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
                offset += need
                if name == "vertex":
                    vertex = {p: arr[p].copy() for p, _ in props}
                continue
            rows, offset = _read_binary_lists(data, offset, count, props, path, body_offset, name)
            if name == "face":
                faces = rows
    mesh_faces = []
    for k, f in enumerate(faces):
        if f is None or len(f) < 3:
            raise MeshFormatError(f"{path}: face {k} has fewer than 3 indices")
        for t in range(1, len(f) - 1):
            mesh_faces.append((f[0], f[t], f[t + 1]))
    try:
        v = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float64)
    except KeyError:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None
    res = {"vertex": vertex}
    res["mesh"] = TriMesh(v, np.array(mesh_faces, dtype=np.int64).reshape(-1, 3))
    return res


def _scalar_props(elements, name):
    for ename, _, props in elements:
        if ename == name:
            return [(p, t) for p, t in props if not isinstance(t, tuple)]
    return []


def _read_binary_lists(data, offset, count, props, path, body_offset, name):
    # fast path: single list property holding triangles
    if len(props) == 1 and isinstance(props[0][1], tuple):
        _, ct, it = props[0][1]
        dt = np.dtype([("n", "<" + ct), ("idx", "<" + it, 3)])
        need = dt.itemsize * count
        if offset + need <= len(data):
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            if np.all(arr["n"] == 3):
                return arr["idx"].astype(np.int64).tolist(), offset + need
    rows = []
    for r in range(count):
        row = None
        for pname, ptype in props:
            try:
                if isinstance(ptype, tuple):
                    _, ct, it = ptype
                    k = int(np.frombuffer(data, "<" + ct, 1, offset)[0])
                    offset += np.dtype(ct).itemsize
                    vals = np.frombuffer(data, "<" + it, k, offset)
                    offset += np.dtype(it).itemsize * k
                    if pname in ("vertex_indices", "vertex_index"):
                        row = vals.astype(np.int64).tolist()
                else:
                    offset += np.dtype(ptype).itemsize
            except ValueError:
                raise MeshFormatError(f"{path}: offset {body_offset + offset}: truncated {name!r} record {r}") from None
        rows.append(row)
    return rows, offset


def write_ply(mesh: TriMesh, path, binary=True, colors=None, dtype="f8"):
    """Write a PLY file; ``colors`` is an optional (n, 3) uint8 array."""
    n, m = mesh.n, mesh.n_faces
    ptype = {"f8": "double", "f4": "float"}[dtype]
    header = ["ply", "format %s 1.0" % ("binary_little_endian" if binary else "ascii"),
              f"element vertex {n}",
              f"property {ptype} x", f"property {ptype} y", f"property {ptype} z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<" + dtype), ("y", "<" + dtype), ("z", "<" + dtype)]
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = mesh.vertices.T
            if colors is not None:
                rec["red"], rec["green"], rec["blue"] = colors.T
            fh.write(rec.tobytes())
            frec = np.empty(m, dtype=[("n", "u1"), ("idx", "<i4", 3)])
            frec["n"] = 3
            frec["idx"] = mesh.faces
            fh.write(frec.tobytes())
        else:
            for k, p in enumerate(mesh.vertices):
                line = "%.17g %.17g %.17g" % tuple(p)
                if colors is not None:
                    line += " %d %d %d" % tuple(colors[k])
                fh.write((line + "\n").encode("ascii"))
            for f in mesh.faces:
                fh.write(("3 %d %d %d\n" % tuple(f)).encode("ascii"))


def write_correspondences(pairs, path, binary=False):
    """Write (src, tgt) 0-based index pairs as text lines or a ``CORRv001`` stream."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if binary:
        if pairs.size and (pairs.min() < 0 or pairs.max() > 0xFFFFFFFF):
            raise ValueError("indices do not fit in u32")
        with open(path, "wb") as fh:
            fh.write(CORR_MAGIC)
            fh.write(pairs.astype("<u4").tobytes())
    else:
        with open(path, "w") as fh:
            for s, t in pairs:
                fh.write(f"{s} {t}\n")


def read_correspondences(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(CORR_MAGIC):
        body = raw[len(CORR_MAGIC):]
        if len(body) % 8:
            raise MeshFormatError(f"{path}: offset {len(raw)}: truncated u32 pair stream")
        return np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(-1, 2)
    rows = []
    for lineno, line in enumerate(raw.decode("ascii", "replace").splitlines(), 1):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        if len(toks) != 2:
            raise MeshFormatError(f"{path}:{lineno}: expected 'src tgt'")
        try:
            rows.append((int(toks[0]), int(toks[1])))
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: non-integer index") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)

