"""PLY reader/writer for point clouds and triangle meshes.

Supported: ``format ascii 1.0`` and ``format binary_little_endian 1.0``.
Vertex properties ``x y z`` are required; ``red green blue`` and ``label``
are optional.  Faces use a list property named ``vertex_indices`` (or
``vertex_index``); polygons with more than three corners are fan
triangulated.  Other elements are parsed and ignored.

Written files store coordinates as ``double`` so a binary round trip is
bit-exact.  Colours are written as ``uchar`` when every channel is an exact
multiple of 1/255 and as ``double`` otherwise; on reading, integer colour
channels are scaled by their type's maximum.

Every decoding failure raises a :class:`~spinecomplete.errors.CodecError`
subclass carrying the byte offset of the problem.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import CodecError, PlyHeaderError, PlyTruncatedError, PlyUnsupportedError, PlyValueError
from ..geometry import PointCloud, TriangleMesh
from .atomic import atomic_write_bytes

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_MAX_HEADER = 1 << 16


@dataclass
class _Property:
    name: str
    dtype: str
    count_dtype: str | None = None  # set for list properties


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)


@dataclass
class PlyData:
    """Decoded contents of a PLY file."""

    points: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    faces: np.ndarray | None = None  # (F, 3) triangles
    comments: list = field(default_factory=list)

    def level(self) -> int | None:
        for c in self.comments:
            parts = c.split()
            if len(parts) == 2 and parts[0] == "level":
                try:
                    return int(parts[1])
                except ValueError:
                    return None
        return None


def _parse_header(blob: bytes):
    if not blob.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic", 0)
    end = blob.find(b"end_header", 0, _MAX_HEADER)
    if end < 0:
        raise PlyHeaderError("no end_header line", min(len(blob), _MAX_HEADER))
    nl = blob.find(b"\n", end)
    if nl < 0:
        raise PlyTruncatedError("header ends without a newline", len(blob))
    body_start = nl + 1
    fmt = None
    elements: list[_Element] = []
    comments = []
    offset = 0
    try:
        text = blob[:body_start].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyHeaderError("header is not ASCII", exc.start) from None
    for line in text.splitlines(keepends=True):
        here = offset
        offset += len(line)
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "ply" and here == 0:
            continue
        if key in ("comment", "obj_info"):
            comments.append(line.strip()[len(key):].strip())
        elif key == "format":
            if len(parts) != 3:
                raise PlyHeaderError("bad format line", here)
            if parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyHeaderError(f"unknown format {parts[1]!r}", here)
            if parts[1] == "binary_big_endian":
                raise PlyUnsupportedError("binary_big_endian PLY is not supported", here)
            if parts[2] != "1.0":
                raise PlyUnsupportedError(f"PLY version {parts[2]} is not supported", here)
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3:
                raise PlyHeaderError("bad element line", here)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyHeaderError(f"element count {parts[2]!r} is not an integer", here) from None
            if count < 0:
                raise PlyHeaderError("negative element count", here)
            elements.append(_Element(parts[1], count))
        elif key == "property":
            if not elements:
                raise PlyHeaderError("property before any element", here)
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _TYPES or parts[3] not in _TYPES:
                    raise PlyHeaderError("unknown list property type", here)
                if _TYPES[parts[2]][0] == "f":
                    raise PlyHeaderError("list count type must be an integer", here)
                elements[-1].props.append(_Property(parts[4], _TYPES[parts[3]], _TYPES[parts[2]]))
            elif len(parts) == 3:
                if parts[1] not in _TYPES:
                    raise PlyHeaderError(f"unknown property type {parts[1]!r}", here)
                elements[-1].props.append(_Property(parts[2], _TYPES[parts[1]]))
            else:
                raise PlyHeaderError("bad property line", here)
        elif key == "end_header":
            break
        else:
            raise PlyHeaderError(f"unexpected header keyword {key!r}", here)
    if fmt is None:
        raise PlyHeaderError("missing format line", 0)
    return fmt, elements, comments, body_start


# -- ascii ----------------------------------------------------------------------


def _ascii_rows(blob: bytes, start: int):
    """Yield (byte offset, tokens) for each non-empty body line."""
    pos = start
    n = len(blob)
    while pos < n:
        nl = blob.find(b"\n", pos)
        stop = n if nl < 0 else nl + 1
        tokens = blob[pos:stop].split()
        if tokens:
            yield pos, tokens
        pos = stop


def _read_ascii(blob, elements, start):
    rows = _ascii_rows(blob, start)
    out = {}
    for el in elements:
        scalars = {p.name: [] for p in el.props if p.count_dtype is None}
        lists = {p.name: [] for p in el.props if p.count_dtype is not None}
        for _ in range(el.count):
            try:
                offset, tokens = next(rows)
            except StopIteration:
                raise PlyTruncatedError(f"element {el.name!r} has fewer than {el.count} rows", len(blob)) from None
            i = 0
            try:
                for p in el.props:
                    if p.count_dtype is None:
                        scalars[p.name].append(_ascii_value(tokens[i], p.dtype))
                        i += 1
                    else:
                        k = int(tokens[i])
                        if k < 0:
                            raise PlyValueError("negative list length", offset)
                        lists[p.name].append([_ascii_value(t, p.dtype) for t in tokens[i + 1:i + 1 + k]])
                        if len(lists[p.name][-1]) != k:
                            raise PlyTruncatedError(f"row of {el.name!r} is short", offset)
                        i += 1 + k
            except IndexError:
                raise PlyTruncatedError(f"row of {el.name!r} is short", offset) from None
            except CodecError:
                raise
            except ValueError as exc:
                raise PlyValueError(f"cannot parse value in {el.name!r}: {exc}", offset) from None
        try:
            cols = {name: np.array(v, dtype=_dtype_for(el, name)) for name, v in scalars.items()}
        except OverflowError as exc:
            raise PlyValueError(f"value out of range in {el.name!r}: {exc}", start) from None
        cols.update({name: v for name, v in lists.items()})
        out[el.name] = cols
    return out


def _dtype_for(el, name):
    for p in el.props:
        if p.name == name:
            return np.dtype(p.dtype)
    return np.float64


def _ascii_value(token: bytes, dtype: str):
    if dtype[0] == "f":
        return float(token)
    return int(token)


# -- binary ---------------------------------------------------------------------


def _read_binary(blob, elements, start):
    pos = start
    out = {}
    for el in elements:
        has_list = any(p.count_dtype for p in el.props)
        if not has_list:
            dt = np.dtype([(f"p{i}", "<" + p.dtype) for i, p in enumerate(el.props)])
            need = dt.itemsize * el.count
            if pos + need > len(blob):
                raise PlyTruncatedError(
                    f"element {el.name!r} needs {need} bytes, {len(blob) - pos} remain", len(blob)
                )
            arr = np.frombuffer(blob, dtype=dt, count=el.count, offset=pos)
            pos += need
            out[el.name] = {p.name: arr[f"p{i}"].copy() for i, p in enumerate(el.props)}
            continue
        fast = _binary_triangles(blob, el, pos)
        if fast is not None:
            cols, pos = fast
            out[el.name] = cols
            continue
        cols = {p.name: [] for p in el.props}
        for _ in range(el.count):
            for p in el.props:
                if p.count_dtype is None:
                    size = np.dtype(p.dtype).itemsize
                    if pos + size > len(blob):
                        raise PlyTruncatedError(f"element {el.name!r} is truncated", len(blob))
                    cols[p.name].append(np.frombuffer(blob, "<" + p.dtype, 1, pos)[0])
                    pos += size
                else:
                    csize = np.dtype(p.count_dtype).itemsize
                    if pos + csize > len(blob):
                        raise PlyTruncatedError(f"element {el.name!r} is truncated", len(blob))
                    k = int(np.frombuffer(blob, "<" + p.count_dtype, 1, pos)[0])
                    pos += csize
                    if k < 0:
                        raise PlyValueError("negative list length", pos - csize)
                    size = np.dtype(p.dtype).itemsize * k
                    if pos + size > len(blob):
                        raise PlyTruncatedError(f"element {el.name!r} is truncated", len(blob))
                    cols[p.name].append(np.frombuffer(blob, "<" + p.dtype, k, pos).tolist())
                    pos += size
        out[el.name] = {
            p.name: (np.array(cols[p.name], dtype=p.dtype) if p.count_dtype is None else cols[p.name])
            for p in el.props
        }
    return out


def _binary_triangles(blob, el, pos):
    """Fast path for the common ``list <int> <int> vertex_indices`` face with all triangles."""
    if len(el.props) != 1 or el.props[0].count_dtype is None:
        return None
    p = el.props[0]
    dt = np.dtype([("n", "<" + p.count_dtype), ("i", "<" + p.dtype, (3,))])
    need = dt.itemsize * el.count
    if pos + need > len(blob):
        return None
    arr = np.frombuffer(blob, dtype=dt, count=el.count, offset=pos)
    if not np.all(arr["n"] == 3):
        return None
    return {p.name: arr["i"].astype(np.int64)}, pos + need


# -- public API -----------------------------------------------------------------


def decode_ply(blob: bytes) -> PlyData:
    try:
        return _decode(bytes(blob))
    except CodecError:
        raise
    except (ValueError, OverflowError, IndexError, TypeError) as exc:
        # last line of defence: malformed input must never escape uncategorised
        raise PlyValueError(f"malformed PLY payload: {exc}", None) from None


def _decode(blob: bytes) -> PlyData:
    fmt, elements, comments, start = _parse_header(blob)
    by_name = {el.name: el for el in elements}
    vertex = by_name.get("vertex")
    if vertex is None:
        raise PlyHeaderError("no vertex element", 0)
    names = [p.name for p in vertex.props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyHeaderError(f"vertex element lacks property {axis!r}", 0)
    data = _read_ascii(blob, elements, start) if fmt == "ascii" else _read_binary(blob, elements, start)
    v = data["vertex"]
    pts = np.stack([np.asarray(v[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argmax(~np.isfinite(pts).all(axis=1)))
        raise PlyValueError(f"vertex {bad} has a non-finite coordinate", start)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        chans = []
        for c in ("red", "green", "blue"):
            arr = np.asarray(v[c])
            if arr.dtype.kind in "iu":
                arr = arr.astype(np.float64) / np.iinfo(arr.dtype).max
            chans.append(arr.astype(np.float64))
        colors = np.stack(chans, axis=1).reshape(-1, 3)
        if not np.all(np.isfinite(colors)) or colors.min(initial=0) < 0 or colors.max(initial=0) > 1:
            raise PlyValueError("colour channels must lie in [0, 1]", start)
    labels = None
    if "label" in names:
        lab = np.asarray(v["label"])
        if lab.dtype.kind == "f":
            if not np.all(np.isfinite(lab)) or np.any(lab != np.round(lab)):
                raise PlyValueError("labels must be integers", start)
        labels = lab.astype(np.int64)
    faces = None
    if "face" in by_name:
        fel = by_name["face"]
        key = next((p.name for p in fel.props if p.name in ("vertex_indices", "vertex_index")), None)
        if key is None:
            raise PlyHeaderError("face element lacks vertex_indices", 0)
        faces = _triangulate(data["face"][key], len(pts))
    return PlyData(pts, colors, labels, faces, comments)


def _triangulate(rows, n_vertices: int) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        tris = rows.reshape(-1, 3)
    else:
        out = []
        for r in rows:
            if len(r) < 3:
                raise PlyValueError(f"face with {len(r)} corners", None)
            out.extend((r[0], r[i], r[i + 1]) for i in range(1, len(r) - 1))
        tris = np.array(out, dtype=np.int64).reshape(-1, 3)
    tris = tris.astype(np.int64)
    if tris.size and (tris.min() < 0 or tris.max() >= n_vertices):
        raise PlyValueError("face index out of range", None)
    return tris


def read_ply(path) -> PlyData:
    with open(path, "rb") as fh:
        return decode_ply(fh.read())


def read_point_cloud(path) -> PointCloud:
    d = read_ply(path)
    return PointCloud(d.points, d.colors, d.labels)


def read_mesh(path, level: int | None = None) -> TriangleMesh:
    """Mesh from a PLY with faces; ``level`` falls back to a ``comment level N`` line."""
    d = read_ply(path)
    if d.faces is None:
        raise PlyHeaderError("file has no face element", 0)
    if level is None:
        level = d.level()
    if level is None:
        raise PlyValueError("mesh level not given and no 'comment level' line present", None)
    try:
        return TriangleMesh(d.points, d.faces, int(level))
    except ValueError as exc:
        raise PlyValueError(str(exc), None) from None


def _colors_as_uchar(colors: np.ndarray):
    scaled = colors * 255.0
    as_int = np.round(scaled)
    if np.all(scaled == as_int):
        return as_int.astype(np.uint8)
    return None


def encode_ply(
    points,
    colors=None,
    labels=None,
    faces=None,
    binary: bool = True,
    comments=(),
) -> bytes:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise PlyValueError("cannot write non-finite coordinates", None)
    cols = None if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    ucols = None if cols is None else _colors_as_uchar(cols)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cols is not None:
        ctype = "u1" if ucols is not None else "f8"
        fields += [("red", ctype), ("green", ctype), ("blue", ctype)]
    if labels is not None:
        fields.append(("label", "i4"))
    ply_name = {"f8": "double", "u1": "uchar", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {len(pts)}")
    header += [f"property {ply_name[t]} {n}" for n, t in fields]
    tris = None
    if faces is not None:
        tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    vert = np.zeros(len(pts), dtype=[(n, "<" + t) for n, t in fields])
    vert["x"], vert["y"], vert["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cols is not None:
        src = ucols if ucols is not None else cols
        vert["red"], vert["green"], vert["blue"] = src[:, 0], src[:, 1], src[:, 2]
    if labels is not None:
        vert["label"] = np.asarray(labels, dtype=np.int64)
    if binary:
        body = vert.tobytes()
        if tris is not None:
            fdt = np.zeros(len(tris), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            fdt["n"] = 3
            fdt["i"] = tris
            body += fdt.tobytes()
        return head + body
    lines = []
    for row in vert:
        lines.append(" ".join(_fmt(row[n]) for n, _ in fields))
    if tris is not None:
        lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    return head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def _fmt(v) -> str:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))  # shortest repr round-trips exactly
    return str(int(v))


def write_ply(path, data: PointCloud | TriangleMesh, binary: bool = True) -> None:
    if isinstance(data, TriangleMesh):
        blob = encode_ply(data.vertices, faces=data.triangles, binary=binary, comments=[f"level {data.level}"])
    else:
        blob = encode_ply(data.points, data.colors, data.labels, binary=binary)
    atomic_write_bytes(os.fspath(path), blob)
