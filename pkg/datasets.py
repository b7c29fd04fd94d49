"""
Datasets - synthetic classification data, IDX ingestion and the on-disk container
All features live in the [0, 1] domain; generation is deterministic per seed
"""

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models import LabeledExample
from tensor_core import DTYPE, LabError

PathLike = Union[str, Path]


class DatasetError(LabError):
    """Invalid dataset parameters or an unreadable dataset file"""


class IdxFormatError(DatasetError):
    """Malformed IDX image/label file"""


@dataclass
class Dataset:
    features: np.ndarray   # (N, *input_shape) float64
    labels: np.ndarray     # (N,) int64
    num_classes: int
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim < 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"{self.features.shape[0] if self.features.ndim else 0} feature rows "
                               f"but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"Labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def examples(self) -> List[LabeledExample]:
        return [LabeledExample(self.features[i], int(self.labels[i])) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       self.domain_lo, self.domain_hi, dict(self.meta))

    def head(self, n: int) -> "Dataset":
        return self.subset(range(min(n, len(self))))

    def split(self, train_fraction: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Shuffled train/test split; both halves keep at least one example"""
        if not 0 < train_fraction < 1 or len(self) < 2:
            raise DatasetError(f"Cannot split {len(self)} examples at fraction {train_fraction}")
        order = np.random.default_rng(seed).permutation(len(self))
        cut = min(max(1, int(round(train_fraction * len(self)))), len(self) - 1)
        return self.subset(order[:cut]), self.subset(order[cut:])


def _check_counts(n: int, n_features: int, n_classes: int):
    if n <= 0:
        raise DatasetError(f"Example count must be positive, got {n}")
    if n_features <= 0:
        raise DatasetError(f"Feature count must be positive, got {n_features}")
    if n_classes < 2:
        raise DatasetError(f"Need at least 2 classes, got {n_classes}")


def _balanced_labels(rng, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes).astype(np.int64)


def generate_blobs(n: int, n_features: int = 8, n_classes: int = 3, separation: float = 0.5,
                   noise: float = 0.05, seed: int = 0) -> Dataset:
    """Gaussian blobs around centers spread uniformly over a cube of side `separation` at 0.5"""
    _check_counts(n, n_features, n_classes)
    if noise < 0 or separation <= 0:
        raise DatasetError(f"Invalid blob geometry: separation {separation}, noise {noise}")
    rng = np.random.default_rng(seed)
    centers = 0.5 + 0.5 * separation * rng.uniform(-1.0, 1.0, size=(n_classes, n_features))
    labels = _balanced_labels(rng, n, n_classes)
    features = np.clip(centers[labels] + noise * rng.standard_normal((n, n_features)), 0.0, 1.0)
    meta = dict(kind="blobs", n=n, n_features=n_features, n_classes=n_classes,
                separation=separation, noise=noise, seed=seed)
    return Dataset(features, labels, n_classes, meta=meta)


def generate_rings(n: int, n_classes: int = 2, noise: float = 0.02, seed: int = 0) -> Dataset:
    """Concentric 2-D rings centred at (0.5, 0.5); class k sits on radius 0.45 (k+1)/C"""
    _check_counts(n, 2, n_classes)
    if noise < 0:
        raise DatasetError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n, n_classes)
    radius = 0.45 * (labels + 1) / n_classes
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    points = np.stack([np.cos(angle), np.sin(angle)], axis=1) * radius[:, None]
    features = np.clip(0.5 + points + noise * rng.standard_normal((n, 2)), 0.0, 1.0)
    meta = dict(kind="rings", n=n, n_features=2, n_classes=n_classes, noise=noise, seed=seed)
    return Dataset(features, labels, n_classes, meta=meta)


# Container layout: magic "ADVDATA" | version u8 | header length u32 | JSON header |
# arrays in header order, little-endian, row-major
CONTAINER_MAGIC = b"ADVDATA"
CONTAINER_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def write_container(path: PathLike, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    specs, payload = [], []
    for name, arr in arrays.items():
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        specs.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(CONTAINER_MAGIC + struct.pack("<BI", CONTAINER_VERSION, len(header))
                         + header + b"".join(payload))
    except OSError as e:
        raise DatasetError(f"Cannot write {path}: {e}") from e
    return path


def _check_header(path: Path, header: Any):
    if not isinstance(header, dict) or not isinstance(header.get("meta"), dict) \
            or not isinstance(header.get("arrays"), list):
        raise DatasetError(f"{path}: corrupt header (needs a 'meta' object and an 'arrays' list)")
    for spec in header["arrays"]:
        if not isinstance(spec, dict) or not isinstance(spec.get("name"), str):
            raise DatasetError(f"{path}: corrupt header (array entry without a name: {spec!r})")
        if spec.get("dtype") not in _DTYPES:
            raise DatasetError(f"{path}: corrupt header (array '{spec['name']}' has unknown dtype "
                               f"{spec.get('dtype')!r})")
        shape = spec.get("shape")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise DatasetError(f"{path}: corrupt header (array '{spec['name']}' has bad shape {shape!r})")


def read_container(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"Cannot read {path}: {e}") from e
    if data[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise DatasetError(f"{path} is not a dataset container (magic {data[:len(CONTAINER_MAGIC)]!r})")
    offset = len(CONTAINER_MAGIC)
    if len(data) < offset + 5:
        raise DatasetError(f"{path} truncated in header")
    version, header_len = struct.unpack_from("<BI", data, offset)
    if version != CONTAINER_VERSION:
        raise DatasetError(f"{path}: unsupported container version {version}")
    offset += 5
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: corrupt header ({e})") from e
    _check_header(path, header)
    offset += header_len
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        size = 8 * count
        if offset + size > len(data):
            raise DatasetError(f"{path}: array '{spec['name']}' truncated")
        arrays[spec["name"]] = np.frombuffer(data, dtype=_DTYPES[spec["dtype"]], count=count,
                                             offset=offset).reshape(spec["shape"]).copy()
        offset += size
    if offset != len(data):
        raise DatasetError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], arrays


def save_dataset(dataset: Dataset, path: PathLike, config: Optional[Dict[str, Any]] = None) -> Path:
    meta = {"kind": "dataset", "num_classes": dataset.num_classes, "domain": [dataset.domain_lo, dataset.domain_hi],
            "source": dataset.meta, "config": config or {}}
    return write_container(path, meta, {"features": dataset.features, "labels": dataset.labels})


def load_dataset(path: PathLike) -> Dataset:
    meta, arrays = read_container(path)
    if meta.get("kind") != "dataset" or "features" not in arrays or "labels" not in arrays \
            or "domain" not in meta or "num_classes" not in meta:
        raise DatasetError(f"{path} does not hold a dataset")
    lo, hi = meta["domain"]
    return Dataset(arrays["features"].astype(DTYPE), arrays["labels"], int(meta["num_classes"]),
                   float(lo), float(hi), meta.get("source", {}))


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_raw(path: PathLike) -> bytes:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IdxFormatError(f"Cannot read {path}: {e}") from e
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as e:
            raise IdxFormatError(f"{path}: broken gzip stream ({e})") from e
    return data


def read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzip-compressed) into an array"""
    data = _read_raw(path)
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated before the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims))
    if len(data) - header_end < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(data) - header_end} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def ingest_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"Count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and int(labels.max()) >= num_classes:
        raise IdxFormatError(f"Label {int(labels.max())} out of range for {num_classes} classes")
    meta = dict(kind="idx", images=str(images_path), labels=str(labels_path), n=int(labels.shape[0]))
    return Dataset(images.astype(DTYPE) / 255.0, labels.astype(np.int64), num_classes, meta=meta)
