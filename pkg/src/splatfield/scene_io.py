"""On-disk artifacts: Gaussian PLY scenes, cameras, tensors, prompt banks,
feature stores, and mask images.

Formats:
  - Scene: binary_little_endian PLY 1.0, the de-facto splatting property set
    (x,y,z, f_dc_0..2, f_rest_*, opacity, scale_0..2, rot_0..3), float32.
  - FTN1 tensor: magic "FTN1", u8 rank, rank x u64 LE dims, row-major float32.
  - Cameras: JSON array with explicit world-to-camera pose (x_cam = R x + t).
  - Prompt bank: JSON {dim, prompts: [{name, embedding}]}.
  - Masks: 8-bit PGM (P5); label images: 16-bit PGM, stored value = label + 1.
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptySceneError, ParseError, ValidationError
from .splat_core import Camera, GaussianCloud

FTN1_MAGIC = b"FTN1"
STORE_MAGIC = b"FST1"
NPY_MAGIC = b"\x93NUMPY"

_REQUIRED_PLY_PROPS = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


@dataclass
class FeatureMap:
    """One view's 2D feature tensor, H x W x D float32."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValidationError(f"feature map must be H x W x D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class FeatureStore:
    """Per-Gaussian feature rows plus pruned flags; pruned rows are kept all-zero."""

    features: np.ndarray        # (N, D) float32
    pruned: np.ndarray          # (N,) bool
    _row_norms: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.pruned = np.ascontiguousarray(self.pruned, dtype=bool)
        if self.features.ndim != 2:
            raise ValidationError(f"feature store must be N x D, got shape {self.features.shape}")
        if self.pruned.shape != (len(self.features),):
            raise ValidationError("pruned flags must have one entry per Gaussian")
        if self.pruned.any():
            self.features[self.pruned] = 0.0

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def row_norms(self) -> np.ndarray:
        """L2 norm per row, computed once and cached (float32)."""
        if self._row_norms is None:
            self._row_norms = np.sqrt(np.einsum("ij,ij->i", self.features, self.features))
        return self._row_norms

    def take(self, indices: np.ndarray) -> "FeatureStore":
        return FeatureStore(self.features[indices].copy(), self.pruned[indices].copy())


@dataclass
class PromptBank:
    """Named query embeddings sharing one dimension."""

    names: list[str]
    embeddings: np.ndarray      # (P, D) float64

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.names):
            raise ValidationError("prompt bank: one embedding row per name required")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("prompt bank: duplicate prompt names")
        if len(self.names) and np.any(np.all(self.embeddings == 0.0, axis=1)):
            raise ValidationError("prompt bank: all-zero embedding")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValidationError("prompt bank: non-finite embedding")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def get(self, name: str) -> np.ndarray:
        try:
            return self.embeddings[self.names.index(name)]
        except ValueError:
            raise ValidationError(
                f"unknown prompt {name!r}; available: {', '.join(self.names)}"
            ) from None


@dataclass
class SceneBundle:
    """A loaded scene: cloud + ordered cameras + background color."""

    cloud: GaussianCloud
    cameras: list[Camera]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(self.background < 0) or np.any(self.background > 1):
            raise ValidationError("background color must lie in [0, 1]")
        for i, cam in enumerate(self.cameras):
            if cam.view != i:
                raise ValidationError(
                    f"camera views must be contiguous from 0; position {i} has view {cam.view}"
                )

    @property
    def view_count(self) -> int:
        return len(self.cameras)


# ---------------------------------------------------------------------------
# Gaussian PLY
# ---------------------------------------------------------------------------

def load_ply(path) -> GaussianCloud:
    """Load a splat scene from the standard binary PLY layout.

    Raw opacity passes through a sigmoid, raw scales through exp, and raw
    quaternions are normalized; the SH degree is inferred from the number of
    f_rest properties.  Unknown float properties are preserved verbatim so a
    save round-trips bitwise.
    """
    path = Path(path)
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ParseError(f"{path.name}: not a PLY file")
        names: list[str] = []
        count = None
        fmt_seen = False
        while True:
            line = f.readline()
            if not line:
                raise ParseError(f"{path.name}: header ended before end_header")
            tok = line.decode("ascii", "replace").strip().split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                if tok[1] != "binary_little_endian":
                    raise ParseError(f"{path.name}: unsupported format {tok[1]!r}")
                fmt_seen = True
            elif tok[0] == "element":
                if tok[1] != "vertex":
                    raise ParseError(f"{path.name}: unsupported element {tok[1]!r}")
                count = int(tok[2])
            elif tok[0] == "property":
                if tok[1] not in ("float", "float32"):
                    raise ParseError(f"{path.name}: property {tok[2]!r} is not float32")
                names.append(tok[2])
            elif tok[0] == "end_header":
                break
        if not fmt_seen or count is None:
            raise ParseError(f"{path.name}: malformed header")
        if count == 0:
            raise EmptySceneError(f"{path.name}: scene has zero Gaussians")

        payload = f.read(count * len(names) * 4)
        if len(payload) != count * len(names) * 4:
            raise ParseError(
                f"{path.name}: truncated payload, expected {count * len(names) * 4} bytes, "
                f"got {len(payload)}"
            )
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, len(names))
    return _cloud_from_columns(path.name, names, mat)


def _cloud_from_columns(label: str, names: list[str], mat: np.ndarray) -> GaussianCloud:
    cols = {name: i for i, name in enumerate(names)}
    for prop in _REQUIRED_PLY_PROPS:
        if prop not in cols:
            raise ParseError(f"{label}: missing property {prop!r}")
    rest_count = len([n for n in names if re.fullmatch(r"f_rest_\d+", n)])
    if rest_count % 3 != 0 or rest_count // 3 not in (0, 3, 8, 15):
        raise ParseError(f"{label}: {rest_count} f_rest properties is not a degree <= 3 layout")
    if not np.all(np.isfinite(mat)):
        bad = int(np.argmin(np.isfinite(mat).ravel()))
        raise ParseError(
            f"{label}: non-finite value in property {names[bad % len(names)]!r} "
            f"at vertex {bad // len(names)}"
        )

    def col(name):
        return mat[:, cols[name]].astype(np.float64)

    n = len(mat)
    k = rest_count // 3 + 1
    sh = np.zeros((n, k, 3))
    for ch in range(3):
        sh[:, 0, ch] = col(f"f_dc_{ch}")
    if k > 1:
        # f_rest is channel-major: index = channel * (K - 1) + coefficient.
        for ch in range(3):
            for j in range(k - 1):
                sh[:, 1 + j, ch] = col(f"f_rest_{ch * (k - 1) + j}")

    quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    qnorm = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(qnorm < 1e-12):
        raise ParseError(f"{label}: zero-norm quaternion")
    opacities = 1.0 / (1.0 + np.exp(-col("opacity")))

    return GaussianCloud(
        positions=np.stack([col("x"), col("y"), col("z")], axis=1),
        rotations=quats / qnorm,
        scales=np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1)),
        opacities=np.clip(opacities, 1e-12, 1.0 - 1e-12),
        sh_coeffs=sh,
        raw_properties=(list(names), mat.copy()),
    )


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud back to binary PLY (bitwise round-trip for loaded scenes)."""
    if cloud.count == 0:
        raise EmptySceneError("refusing to write a scene with zero Gaussians")
    if cloud.raw_properties is not None:
        names, mat = cloud.raw_properties
    else:
        names, mat = _columns_from_cloud(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mat)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def _columns_from_cloud(cloud: GaussianCloud) -> tuple[list[str], np.ndarray]:
    k = cloud.sh_coeffs.shape[1]
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    op = cloud.opacities
    blocks = [
        cloud.positions,
        cloud.sh_coeffs[:, 0, :],
        cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(cloud.count, -1),
        np.log(op / (1.0 - op))[:, None],
        np.log(cloud.scales),
        cloud.rotations,
    ]
    return names, np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# FTN1 tensors
# ---------------------------------------------------------------------------

def save_tensor(values: np.ndarray, path) -> None:
    """Write an arbitrary-rank float32 tensor in the FTN1 container."""
    values = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FTN1_MAGIC)
        f.write(bytes([values.ndim]))
        f.write(np.asarray(values.shape, dtype="<u8").tobytes())
        f.write(values.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read an FTN1 tensor (or an NPY v1.0 file as a convenience)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic == NPY_MAGIC[:4]:
            arr = np.load(path)
            if arr.dtype.kind not in "fiu":
                raise ParseError(f"{path.name}: NPY payload is not numeric")
            return np.ascontiguousarray(arr, dtype=np.float32)
        if magic != FTN1_MAGIC:
            raise ParseError(f"{path.name}: bad magic {magic!r}")
        rank_byte = f.read(1)
        if not rank_byte:
            raise ParseError(f"{path.name}: truncated header")
        rank = rank_byte[0]
        dims_raw = f.read(8 * rank)
        if len(dims_raw) != 8 * rank:
            raise ParseError(f"{path.name}: truncated dims")
        dims = np.frombuffer(dims_raw, dtype="<u8").astype(np.int64)
        total = int(np.prod(dims)) if rank else 1
        payload = f.read(total * 4)
        if len(payload) != total * 4:
            raise ParseError(
                f"{path.name}: truncated payload, expected {total * 4} bytes, got {len(payload)}"
            )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_feature_map(fmap: FeatureMap, path) -> None:
    save_tensor(fmap.values, path)


def load_feature_map(path) -> FeatureMap:
    """Load an H x W x D feature tensor; rejects wrong rank and non-finite values."""
    path = Path(path)
    values = load_tensor(path)
    if values.ndim != 3:
        raise ParseError(f"{path.name}: expected 3 dims (H, W, D), got {values.ndim}")
    finite = np.isfinite(values)
    if not finite.all():
        bad = np.unravel_index(int(np.argmin(finite)), values.shape)
        raise ParseError(f"{path.name}: non-finite value at index {tuple(int(i) for i in bad)}")
    return FeatureMap(values)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

_CAMERA_FIELDS = ("view", "width", "height", "fx", "fy", "cx", "cy", "R", "t")


def load_cameras(path) -> list[Camera]:
    """Read the camera JSON array, ordered by view index."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path.name}: invalid JSON ({e})") from None
    if not isinstance(records, list):
        raise ParseError(f"{path.name}: expected a JSON array of cameras")
    cameras = []
    seen = set()
    for rec in records:
        for fieldname in _CAMERA_FIELDS:
            if fieldname not in rec:
                raise ParseError(f"{path.name}: camera missing field {fieldname!r}")
        view = int(rec["view"])
        if view in seen:
            raise ParseError(f"{path.name}: duplicate view index {view}")
        seen.add(view)
        R = np.asarray(rec["R"], dtype=np.float64)
        if R.size != 9:
            raise ParseError(f"{path.name}: camera {view}: R must have 9 entries")
        cameras.append(
            Camera(
                view=view,
                width=int(rec["width"]),
                height=int(rec["height"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                R=R.reshape(3, 3),
                t=np.asarray(rec["t"], dtype=np.float64).reshape(3),
            )
        )
    cameras.sort(key=lambda c: c.view)
    return cameras


def save_cameras(cameras: list[Camera], path) -> None:
    records = [
        {
            "view": cam.view,
            "width": cam.width,
            "height": cam.height,
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "R": [float(v) for v in cam.R.ravel()],
            "t": [float(v) for v in cam.t],
        }
        for cam in cameras
    ]
    Path(path).write_text(json.dumps(records, indent=1))


# ---------------------------------------------------------------------------
# Prompt banks
# ---------------------------------------------------------------------------

def load_prompt_bank(path) -> PromptBank:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path.name}: invalid JSON ({e})") from None
    try:
        dim = int(doc["dim"])
        names = [p["name"] for p in doc["prompts"]]
        rows = [np.asarray(p["embedding"], dtype=np.float64) for p in doc["prompts"]]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path.name}: malformed prompt bank ({e})") from None
    for name, row in zip(names, rows):
        if row.shape != (dim,):
            raise ParseError(f"{path.name}: prompt {name!r} has dimension {row.size}, not {dim}")
    embeddings = np.stack(rows) if rows else np.empty((0, dim))
    return PromptBank(names=names, embeddings=embeddings)


def save_prompt_bank(bank: PromptBank, path) -> None:
    doc = {
        "dim": bank.dim,
        "prompts": [
            {"name": name, "embedding": [float(v) for v in emb]}
            for name, emb in zip(bank.names, bank.embeddings)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# Feature stores
# ---------------------------------------------------------------------------

def save_feature_store(store: FeatureStore, path) -> None:
    """Lossless container: header, float32 rows, packed pruned bitmap."""
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(np.asarray([store.count, store.dim], dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(store.features, dtype="<f4").tobytes())
        f.write(np.packbits(store.pruned).tobytes())


def load_feature_store(path, expected_count: int | None = None) -> FeatureStore:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != STORE_MAGIC:
            raise ParseError(f"{path.name}: bad magic")
        head = f.read(16)
        if len(head) != 16:
            raise ParseError(f"{path.name}: truncated header")
        n, d = (int(v) for v in np.frombuffer(head, dtype="<u8"))
        payload = f.read(n * d * 4)
        if len(payload) != n * d * 4:
            raise ParseError(f"{path.name}: truncated feature payload")
        bitmap = f.read((n + 7) // 8)
        if len(bitmap) != (n + 7) // 8:
            raise ParseError(f"{path.name}: truncated pruned bitmap")
    if expected_count is not None and n != expected_count:
        raise ValidationError(
            f"{path.name}: store has {n} Gaussians, expected {expected_count}"
        )
    features = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    if not np.all(np.isfinite(features)):
        raise ParseError(f"{path.name}: non-finite feature values")
    pruned = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), count=n).astype(bool)
    return FeatureStore(features=features, pruned=pruned)


# ---------------------------------------------------------------------------
# Mask / label images (PGM) and PNG export
# ---------------------------------------------------------------------------

def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Binary mask as 8-bit P5: 0 = background, 255 = mask."""
    mask = np.asarray(mask)
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def save_label_pgm(labels: np.ndarray, path) -> None:
    """Label image as 16-bit P5; stored value = label + 1, 0 = unlabeled."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < -1 or labels.max() > 65534:
        raise ValidationError("labels must lie in [-1, 65534]")
    data = (labels + 1).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{labels.shape[1]} {labels.shape[0]}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pgm(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path.name}: not a P5 PGM")
    # Header: magic, width, height, maxval as whitespace-separated tokens
    # (comments allowed), then a single whitespace byte before the payload.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(t) for t in tokens)
    dtype = ">u2" if maxval > 255 else np.uint8
    count = w * h
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if arr.size != count:
        raise ParseError(f"{path.name}: truncated pixel data")
    return arr.reshape(h, w), maxval


def load_mask_pgm(path) -> np.ndarray:
    arr, _ = _read_pgm(path)
    return arr > 0


def load_label_pgm(path) -> np.ndarray:
    arr, _ = _read_pgm(path)
    return arr.astype(np.int64) - 1


def _to_u8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return image


def save_png(image: np.ndarray, path) -> None:
    """Save an image as 8-bit PNG; float arrays are treated as [0, 1]."""
    image = _to_u8(image)
    Image.fromarray(image, mode="L" if image.ndim == 2 else "RGB").save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    """PNG-encode an image in memory (for HTTP responses)."""
    image = _to_u8(image)
    buf = io.BytesIO()
    Image.fromarray(image, mode="L" if image.ndim == 2 else "RGB").save(buf, format="PNG")
    return buf.getvalue()
