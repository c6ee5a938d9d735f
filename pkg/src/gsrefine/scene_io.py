"""Scene input/output: meshes, camera calibrations, images, sequence manifests.

All world coordinates are millimeters. Images are row-major uint8 RGB with
the origin at the top-left corner, x rightward, y downward. Every object
returned here is immutable after construction and safe to share between
workers.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CameraError, ImageError, MeshError, ParseError


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with an optional per-vertex refinable mask.

    vertices: (n, 3) float64, mm. faces: (m, 3) int64, CCW winding.
    refinable: (n,) bool, True where the surface may be displaced.
    """

    vertices: np.ndarray
    faces: np.ndarray
    refinable: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64)).reshape(-1, 3)
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64)).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        mask = self.refinable
        if mask is None:
            mask = np.ones(len(v), dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != v.shape[0]:
            raise MeshError(f"refinable mask has {mask.shape[0]} entries for {v.shape[0]} vertices")
        object.__setattr__(self, "refinable", mask)
        validate_mesh(self)
        for arr in (self.vertices, self.faces, self.refinable):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a (e, 2) array with edge[0] < edge[1]."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.setflags(write=True)
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces.copy(), self.refinable.copy())


def validate_mesh(mesh: Mesh) -> None:
    """Raise MeshError on bad indices, degenerate faces, or non-manifold edges."""
    n = mesh.vertices.shape[0]
    f = mesh.faces
    if f.size:
        if f.min() < 0 or f.max() >= n:
            bad = int(np.argmax((f < 0).any(axis=1) | (f >= n).any(axis=1)))
            raise MeshError(f"face {bad} references vertex outside [0, {n})")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
        if same.any():
            raise MeshError(f"face {int(np.argmax(same))} is degenerate (repeated vertex index)")
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if counts.size and counts.max() > 2:
            raise MeshError("non-manifold edge: shared by more than 2 faces")


@dataclass(frozen=True)
class CameraSpec:
    """Calibrated camera: 3x4 projection P (world mm -> homogeneous px),
    focal length f in pixels, camera center in mm, image size (w, h)."""

    cam_id: int
    P: np.ndarray
    f: float
    center: np.ndarray
    image_size: tuple

    def __post_init__(self):
        P = np.ascontiguousarray(np.asarray(self.P, dtype=np.float64)).reshape(3, 4)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if np.linalg.matrix_rank(P) != 3:
            raise CameraError(f"camera {self.cam_id}: projection matrix is rank-deficient")
        if not (self.f > 0):
            raise CameraError(f"camera {self.cam_id}: focal length must be positive")
        self.P.setflags(write=False)
        self.center.setflags(write=False)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]


@dataclass(frozen=True)
class SequenceManifest:
    """Frame list for a capture sequence.

    frames: list of (mesh_path, [image_path per camera]).
    camera_path: calibration file shared by all frames.
    reference_frame: frame index used for model coloring.
    mask_path: optional region-mask sidecar applied to every frame mesh.
    """

    camera_path: str
    reference_frame: int
    frames: tuple
    mask_path: str = None

    def __post_init__(self):
        if not self.frames:
            raise ParseError("manifest lists no frames")
        n_imgs = {len(imgs) for _, imgs in self.frames}
        if len(n_imgs) != 1:
            raise ParseError("manifest frames disagree on image count")
        if next(iter(n_imgs)) < 1:
            raise ParseError("manifest frames must list at least one image")
        if not (0 <= self.reference_frame < len(self.frames)):
            raise ParseError(
                f"reference frame {self.reference_frame} outside [0, {len(self.frames)})"
            )

    @property
    def n_cameras(self) -> int:
        return len(self.frames[0][1])


def load_mesh(path: str) -> Mesh:
    """Parse an OBJ file (v/f records, triangles only, 1-based indices)."""
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex coordinate: {exc}") from exc
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise ParseError(f"{path}:{lineno}: only triangular faces are supported")
                face = []
                for tok in idx:
                    tok = tok.split("/")[0]
                    try:
                        i = int(tok)
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                    if i == 0:
                        raise ParseError(f"{path}:{lineno}: OBJ face indices are 1-based, got 0")
                    if i < 0:
                        i = len(vertices) + 1 + i
                    if not (1 <= i <= len(vertices)):
                        raise ParseError(f"{path}:{lineno}: face index {tok} out of range")
                    face.append(i - 1)
                faces.append(face)
            # other record types (vn, vt, o, g, s, mtllib, usemtl, ...) ignored
    try:
        return Mesh(
            np.array(vertices, dtype=np.float64).reshape(-1, 3),
            np.array(faces, dtype=np.int64).reshape(-1, 3),
        )
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_mesh(mesh: Mesh, path: str) -> None:
    """Write an OBJ file that round-trips vertices to within 1e-6 mm."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_region_mask(path: str, n_vertices: int) -> np.ndarray:
    """Sidecar mask file: one refinable vertex index per line."""
    mask = np.zeros(n_vertices, dtype=bool)
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                idx = int(line)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad vertex index {line!r}") from exc
            if not (0 <= idx < n_vertices):
                raise ParseError(f"{path}:{lineno}: vertex index {idx} out of range")
            mask[idx] = True
    return mask


def save_region_mask(mask: np.ndarray, path: str) -> None:
    atomic_write_text(path, "\n".join(str(i) for i in np.flatnonzero(mask)) + "\n")


def load_cameras(path: str) -> list:
    """Parse the camera calibration file (one 7-line stanza per camera)."""
    with open(path, "r") as fh:
        lines = [(no, raw.strip()) for no, raw in enumerate(fh, start=1)]
    lines = [(no, ln) for no, ln in lines if ln and not ln.startswith("#")]
    cams = []
    pos = 0
    while pos < len(lines):
        block = lines[pos : pos + 7]
        if len(block) < 7:
            raise ParseError(f"{path}:{block[0][0]}: truncated camera stanza")
        cams.append(_parse_camera_stanza(path, block))
        pos += 7
    if not cams:
        raise ParseError(f"{path}: no cameras found")
    return cams


def _parse_camera_stanza(path, block):
    def fail(entry, msg):
        raise ParseError(f"{path}:{entry[0]}: {msg}")

    no, header = block[0]
    parts = header.split()
    if len(parts) != 2 or parts[0] != "camera":
        fail(block[0], f"expected 'camera <id>', got {header!r}")
    try:
        cam_id = int(parts[1])
    except ValueError:
        fail(block[0], f"bad camera id {parts[1]!r}")
    rows = []
    for entry in block[1:4]:
        toks = entry[1].split()
        if len(toks) != 4:
            fail(entry, "projection row needs 4 numbers")
        try:
            rows.append([float(t) for t in toks])
        except ValueError as exc:
            fail(entry, f"malformed number: {exc}")
    fields = {}
    for key, width, entry in (("f", 1, block[4]), ("center", 3, block[5]), ("size", 2, block[6])):
        toks = entry[1].split()
        if len(toks) != width + 1 or toks[0] != key:
            fail(entry, f"expected '{key}' record with {width} value(s)")
        try:
            fields[key] = [float(t) for t in toks[1:]]
        except ValueError as exc:
            fail(entry, f"malformed number: {exc}")
    try:
        return CameraSpec(
            cam_id=cam_id,
            P=np.array(rows, dtype=np.float64),
            f=fields["f"][0],
            center=np.array(fields["center"], dtype=np.float64),
            image_size=(int(fields["size"][0]), int(fields["size"][1])),
        )
    except CameraError as exc:
        raise CameraError(f"{path}: {exc}") from exc


def save_cameras(cams, path: str) -> None:
    chunks = []
    for cam in cams:
        rows = "\n".join(" ".join(f"{x:.12g}" for x in row) for row in cam.P)
        chunks.append(
            f"camera {cam.cam_id}\n{rows}\nf {cam.f:.12g}\n"
            f"center {cam.center[0]:.12g} {cam.center[1]:.12g} {cam.center[2]:.12g}\n"
            f"size {cam.width} {cam.height}"
        )
    atomic_write_text(path, "\n".join(chunks) + "\n")


def load_image(path: str) -> np.ndarray:
    """Load a PNG or PPM image as an (h, w, 3) uint8 array."""
    if os.path.getsize(path) == 0:
        raise ImageError(f"{path}: truncated file (0 bytes)")
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise ImageError(f"{path}: unsupported format {img.format!r} (PNG or PPM only)")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageError(f"{path}: not a recognizable image file") from exc
    except OSError as exc:
        raise ImageError(f"{path}: {exc}") from exc
    return arr


def save_image(image: np.ndarray, path: str) -> None:
    """Write an (h, w, 3) uint8 array as PNG (atomic replace)."""
    image = np.asarray(image, dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(image, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_manifest(path: str) -> SequenceManifest:
    """Parse a sequence manifest; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    camera_path = None
    mask_path = None
    reference = 0
    frames = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "cameras":
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 'cameras <path>'")
                camera_path = resolve(parts[1])
            elif parts[0] == "mask":
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 'mask <path>'")
                mask_path = resolve(parts[1])
            elif parts[0] == "reference":
                try:
                    reference = int(parts[1])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}:{lineno}: expected 'reference <frame index>'")
            elif parts[0] == "frame":
                if len(parts) < 3:
                    raise ParseError(f"{path}:{lineno}: frame needs a mesh and at least one image")
                frames.append((resolve(parts[1]), tuple(resolve(p) for p in parts[2:])))
            else:
                raise ParseError(f"{path}:{lineno}: unknown manifest record {parts[0]!r}")
    if camera_path is None:
        raise ParseError(f"{path}: manifest missing 'cameras' header")
    try:
        return SequenceManifest(
            camera_path=camera_path, reference_frame=reference, frames=tuple(frames), mask_path=mask_path
        )
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_manifest(manifest: SequenceManifest, path: str) -> None:
    lines = [f"cameras {manifest.camera_path}", f"reference {manifest.reference_frame}"]
    if manifest.mask_path:
        lines.append(f"mask {manifest.mask_path}")
    for mesh_path, imgs in manifest.frames:
        lines.append("frame " + mesh_path + " " + " ".join(imgs))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
