"""Readers and writers for PLY checkpoints and the BGS1/BGM1/BGC1 formats.

All binary formats are little-endian. Layout summary::

    BGS1  magic, u32 N, u8 L, L x u8 dims, N x f32[3+3+4+1+3+D]
    BGM1  magic, u32 W, u32 H, u8 L, L x (H x W) u32 labels
    BGC1  magic, u32 N, u8 L, L x u8 dims, N x u32 codes
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .exceptions import EmptySceneError, FormatError
from .scene import (SH_C0, Camera, CodeTable, GaussianScene, LevelLayout, MaskPyramid,
                    _as_label_stack, validate_nesting)

SCENE_MAGIC = b"BGS1"
MASK_MAGIC = b"BGM1"
CODE_MAGIC = b"BGC1"

PLY_REQUIRED = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic line)")
    fmt, n_vertex, props, seen_vertex, in_vertex = None, None, [], False, False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header has no end_header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                if props:
                    raise FormatError("vertex must be the first PLY element")
                n_vertex, seen_vertex = int(tok[2]), True
            elif not seen_vertex:
                raise FormatError("vertex must be the first PLY element")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError("list properties are not supported on vertices")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"unknown PLY property type {tok[1]!r}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"expected binary_little_endian PLY, got {fmt!r}")
    if n_vertex is None:
        raise FormatError("PLY has no vertex element")
    return n_vertex, np.dtype(props)


def import_ply(path, layout: LevelLayout | None = None, feature_logits=None) -> GaussianScene:
    """Load a pre-trained 3D-GS checkpoint.

    The opacity property is taken as a logit, degree-0 SH coefficients are
    converted to RGB and clamped; higher SH bands are dropped. Feature
    logits default to zeros unless given.
    """
    layout = layout or LevelLayout()
    with open(path, "rb") as fh:
        n, dtype = _read_ply_header(fh)
        for name in PLY_REQUIRED:
            if name not in dtype.names:
                raise FormatError(f"PLY is missing vertex property {name!r}")
        if n == 0:
            raise EmptySceneError(f"{path}: PLY has zero vertices")
        raw = fh.read(n * dtype.itemsize)
    if len(raw) < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    v = np.frombuffer(raw, dtype=dtype, count=n)

    def cols(*names):
        return np.stack([v[k].astype(np.float64) for k in names], axis=1)

    colors = np.clip(SH_C0 * cols("f_dc_0", "f_dc_1", "f_dc_2") + 0.5, 0.0, 1.0)
    if feature_logits is None:
        feature_logits = np.zeros((n, layout.total_dim))
    return GaussianScene(
        positions=cols("x", "y", "z"),
        log_scales=cols("scale_0", "scale_1", "scale_2"),
        rotations=cols("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=v["opacity"].astype(np.float64),
        colors=colors,
        feature_logits=feature_logits,
        layout=layout,
    )


def export_ply(scene: GaussianScene, path):
    names = PLY_REQUIRED
    dtype = np.dtype([(k, "<f4") for k in names])
    rec = np.empty(len(scene), dtype=dtype)
    for i, k in enumerate("xyz"):
        rec[k] = scene.positions[:, i]
    for i in range(3):
        rec[f"scale_{i}"] = scene.log_scales[:, i]
        rec[f"f_dc_{i}"] = (scene.colors[:, i] - 0.5) / SH_C0
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    rec["opacity"] = scene.opacity_logits
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property float {k}" for k in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# BGS1 / BGC1
# ---------------------------------------------------------------------------


def _layout_header(magic, n, layout):
    dims = layout.level_dims
    return magic + struct.pack("<IB", n, len(dims)) + bytes(dims)


def _read_layout_header(buf, magic, path):
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 9:
        raise FormatError(f"{path}: truncated header")
    n, n_levels = struct.unpack_from("<IB", buf, 4)
    end = 9 + n_levels
    if len(buf) < end:
        raise FormatError(f"{path}: truncated level table")
    try:
        layout = LevelLayout(tuple(buf[9:end]))
    except ValueError as exc:
        raise FormatError(f"{path}: bad level table: {exc}") from None
    return n, layout, end


def scene_record_width(layout: LevelLayout) -> int:
    return 14 + layout.total_dim


def scene_to_bytes(scene: GaussianScene) -> bytes:
    rec = np.hstack([scene.positions, scene.log_scales, scene.rotations,
                     scene.opacity_logits[:, None], scene.colors, scene.feature_logits])
    return _layout_header(SCENE_MAGIC, len(scene), scene.layout) + rec.astype("<f4").tobytes()


def save_scene(scene: GaussianScene, path):
    with open(path, "wb") as fh:
        fh.write(scene_to_bytes(scene))


def load_scene(path, allow_empty=False) -> GaussianScene:
    with open(path, "rb") as fh:
        buf = fh.read()
    n, layout, off = _read_layout_header(buf, SCENE_MAGIC, path)
    width = scene_record_width(layout)
    if len(buf) != off + 4 * width * n:
        raise FormatError(f"{path}: payload size does not match {n} records")
    if n == 0 and not allow_empty:
        raise EmptySceneError(f"{path}: scene has zero Gaussians")
    rec = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, width).astype(np.float64)
    return GaussianScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14],
                         rec[:, 14:], layout)


def codes_to_bytes(table: CodeTable) -> bytes:
    return (_layout_header(CODE_MAGIC, len(table), table.layout)
            + table.codes.astype("<u4").tobytes())


def save_codes(table: CodeTable, path):
    with open(path, "wb") as fh:
        fh.write(codes_to_bytes(table))


def load_codes(path) -> CodeTable:
    with open(path, "rb") as fh:
        buf = fh.read()
    n, layout, off = _read_layout_header(buf, CODE_MAGIC, path)
    if len(buf) != off + 4 * n:
        raise FormatError(f"{path}: payload size does not match {n} codes")
    return CodeTable(np.frombuffer(buf, dtype="<u4", offset=off).copy(), layout)


# ---------------------------------------------------------------------------
# BGM1
# ---------------------------------------------------------------------------


def labels_to_bytes(stack) -> bytes:
    stack = np.asarray(stack, dtype=np.uint32)
    if stack.ndim == 2:
        stack = stack[None]
    n_levels, h, w = stack.shape
    return MASK_MAGIC + struct.pack("<IIB", w, h, n_levels) + stack.astype("<u4").tobytes()


def save_label_stack(stack, path):
    with open(path, "wb") as fh:
        fh.write(labels_to_bytes(stack))


def load_label_stack(path) -> np.ndarray:
    """Read a BGM1 file into an (L, H, W) uint32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: expected magic {MASK_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 13:
        raise FormatError(f"{path}: truncated header")
    w, h, n_levels = struct.unpack_from("<IIB", buf, 4)
    if len(buf) != 13 + 4 * w * h * n_levels:
        raise FormatError(f"{path}: payload does not match {n_levels} levels of {w}x{h}")
    return np.frombuffer(buf, dtype="<u4", offset=13).reshape(n_levels, h, w).astype(np.uint32)


def load_masks(paths, layout: LevelLayout) -> MaskPyramid:
    """Load one BGM1 file per view and validate nesting."""
    stacks = []
    shape = None
    for p in paths:
        stack = load_label_stack(p)
        if stack.shape[0] != layout.n_levels:
            raise FormatError(f"{p}: has {stack.shape[0]} levels, layout has {layout.n_levels}")
        if shape is not None and stack.shape != shape:
            raise FormatError(f"{p}: size {stack.shape[1:]} differs from first view {shape[1:]}")
        shape = stack.shape
        stacks.append(_as_label_stack(stack, layout))
    registries, parents = validate_nesting(stacks)
    return MaskPyramid(stacks, layout, registries, parents)


def save_masks(pyramid: MaskPyramid, directory, prefix="view"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for v, stack in enumerate(pyramid.labels):
        p = os.path.join(directory, f"{prefix}_{v:03d}.bgm")
        save_label_stack(stack, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


CAMERA_FIELDS = "width height fx fy cx cy near far r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2"


def save_cameras(cameras, path):
    lines = ["# " + CAMERA_FIELDS]
    for cam in cameras:
        vals = [cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far]
        vals += cam.extrinsics.reshape(-1).tolist()
        lines.append(" ".join(repr(float(x)) if i >= 2 else str(int(x))
                              for i, x in enumerate(vals)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 20:
                raise FormatError(f"{path}:{lineno}: expected 20 values, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric camera value") from None
            ext = np.array(vals[8:]).reshape(3, 4)
            try:
                cams.append(Camera(fx=vals[2], fy=vals[3], cx=vals[4], cy=vals[5],
                                   width=int(vals[0]), height=int(vals[1]),
                                   rotation=ext[:, :3], translation=ext[:, 3],
                                   near=vals[6], far=vals[7]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not cams:
        raise FormatError(f"{path}: no cameras")
    return cams


def sniff(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)
