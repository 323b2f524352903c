"""Binary file formats: datasets (LBDS), vocabularies (LBVC), checkpoints (LBCK).

All integers and floats are little-endian.

    LBDS: "LBDS" u16 version u16 H u16 W u32 count u16 vocab-checksum,
          then per sample H*W*3 f32 pixels, u16 label, 4 x u8 scene enums.
    LBVC: "LBVC" u16 version u32 V, then per token u16 length + UTF-8 bytes.
    LBCK: "LBCK" u16 version u32 meta-length + JSON metadata, u32 entry count,
          per entry u16 name-length + name, 2-byte dtype ("f4"/"f8"), u8 ndim,
          ndim x u32 extents; then the blobs in manifest order.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from langneck.data import Color, ImageSample, Position, SceneSpec, Shape, Size, Vocabulary, build_vocabulary, class_label
from langneck.errors import ArgumentError, ConfigError, FormatError

DATASET_MAGIC = b"LBDS"
VOCAB_MAGIC = b"LBVC"
CHECKPOINT_MAGIC = b"LBCK"
FORMAT_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sHHHIH")
_PREAMBLE = struct.Struct("<4sH")
DATASET_HEADER_SIZE = _DATASET_HEADER.size
SPEC_BYTES = 4
LABEL_BYTES = 2

CHECKPOINT_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


@dataclass
class DatasetHeader:
    version: int
    height: int
    width: int
    count: int
    vocab_checksum: int


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    metadata: Dict[str, Any]
    dtypes: Dict[str, str]


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"Truncated file while reading {what}", path=self.path, offset=self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def preamble(self, magic: bytes):
        found, version = _PREAMBLE.unpack(self.take(_PREAMBLE.size, "header"))
        if found != magic:
            raise FormatError(f"Bad magic {found!r}, expected {magic!r}", path=self.path, offset=0)
        if version != FORMAT_VERSION:
            raise FormatError(f"Unsupported version {version}, expected {FORMAT_VERSION}", path=self.path, offset=4)
        return version


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("File not found", path=str(path))


def sample_record_size(height: int, width: int) -> int:
    return height * width * 3 * 4 + LABEL_BYTES + SPEC_BYTES


def save_dataset(path, samples: Sequence[ImageSample], vocab: Optional[Vocabulary] = None):
    """Write samples as LBDS; pixels are stored as f32."""
    if not samples:
        raise ArgumentError("Cannot write an empty dataset")
    vocab = vocab or build_vocabulary()
    height, width = samples[0].pixels.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, height, width, len(samples), vocab.checksum16()))
        for s in samples:
            f.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
            f.write(struct.pack("<H", s.label))
            spec = s.spec
            f.write(struct.pack("<4B", spec.shape, spec.color, spec.size, spec.position))


def read_dataset_header(path) -> DatasetHeader:
    data = _read_bytes(path)
    return _parse_dataset_header(_Reader(data, str(path)))


def _parse_dataset_header(reader: _Reader) -> DatasetHeader:
    reader.preamble(DATASET_MAGIC)
    height, width, count, checksum = reader.unpack("<HHIH", "header")
    return DatasetHeader(FORMAT_VERSION, height, width, count, checksum)


def load_dataset(path, expected_checksum: Optional[int] = None) -> List[ImageSample]:
    """Read an LBDS file; with `expected_checksum`, refuse datasets built for another vocabulary."""
    reader = _Reader(_read_bytes(path), str(path))
    header = _parse_dataset_header(reader)
    if expected_checksum is not None and header.vocab_checksum != expected_checksum:
        raise ConfigError(
            f"Dataset {path} was built for vocabulary checksum {header.vocab_checksum:#06x}, "
            f"expected {expected_checksum:#06x}"
        )
    pixel_count = header.height * header.width * 3
    samples = []
    for _ in range(header.count):
        start = reader.offset
        pixels = np.frombuffer(reader.take(pixel_count * 4, "pixels"), dtype="<f4")
        (label,) = reader.unpack("<H", "label")
        shape, color, size, position = reader.unpack("<4B", "scene spec")
        try:
            spec = SceneSpec(Shape(shape), Color(color), Size(size), Position(position))
        except ValueError:
            raise FormatError("Invalid scene enum", path=str(path), offset=start)
        if label != class_label(spec.shape, spec.color):
            raise FormatError(f"Label {label} does not match its scene", path=str(path), offset=start)
        samples.append(
            ImageSample(
                pixels=pixels.astype(np.float64).reshape(header.height, header.width, 3),
                label=label,
                spec=spec,
            )
        )
    if reader.offset != len(reader.data):
        raise FormatError("Trailing bytes after last sample", path=str(path), offset=reader.offset)
    return samples


def save_vocabulary(path, vocab: Vocabulary):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(VOCAB_MAGIC, FORMAT_VERSION))
        f.write(struct.pack("<I", len(vocab)))
        for token in vocab.tokens:
            encoded = token.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)


def load_vocabulary(path) -> Vocabulary:
    reader = _Reader(_read_bytes(path), str(path))
    reader.preamble(VOCAB_MAGIC)
    (count,) = reader.unpack("<I", "vocabulary size")
    tokens = []
    for _ in range(count):
        (length,) = reader.unpack("<H", "token length")
        start = reader.offset
        try:
            tokens.append(reader.take(length, "token").decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("Token is not valid UTF-8", path=str(path), offset=start)
    return Vocabulary(tokens)


def save_checkpoint(path, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any], dtype: str = "f4"):
    """Write named arrays plus a JSON metadata block as LBCK."""
    if dtype not in CHECKPOINT_DTYPES:
        raise ArgumentError(f"Unsupported checkpoint dtype '{dtype}'")
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, FORMAT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(dtype.encode("ascii"))
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype=CHECKPOINT_DTYPES[dtype]).tobytes())


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(_read_bytes(path), str(path))
    reader.preamble(CHECKPOINT_MAGIC)
    (meta_len,) = reader.unpack("<I", "metadata length")
    meta_start = reader.offset
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("Metadata block is not valid JSON", path=str(path), offset=meta_start)

    (entries,) = reader.unpack("<I", "entry count")
    manifest = []
    for _ in range(entries):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        dtype_start = reader.offset
        dtype = reader.take(2, "dtype").decode("ascii", errors="replace")
        if dtype not in CHECKPOINT_DTYPES:
            raise FormatError(f"Unknown dtype '{dtype}' for {name}", path=str(path), offset=dtype_start)
        (ndim,) = reader.unpack("<B", "rank")
        shape = reader.unpack(f"<{ndim}I", "shape")
        manifest.append((name, dtype, shape))

    arrays: Dict[str, np.ndarray] = {}
    dtypes: Dict[str, str] = {}
    for name, dtype, shape in manifest:
        np_dtype = CHECKPOINT_DTYPES[dtype]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        blob = reader.take(nbytes, f"blob {name}")
        arrays[name] = np.frombuffer(blob, dtype=np_dtype).astype(np.float64).reshape(shape)
        dtypes[name] = dtype
    if reader.offset != len(reader.data):
        raise FormatError("Trailing bytes after last blob", path=str(path), offset=reader.offset)
    return Checkpoint(arrays=arrays, metadata=metadata, dtypes=dtypes)


def checkpoint_blobs(path) -> Dict[str, bytes]:
    """Raw stored bytes of every array, for byte-level comparisons."""
    ckpt = load_checkpoint(path)
    return {
        name: np.ascontiguousarray(arr, dtype=CHECKPOINT_DTYPES[ckpt.dtypes[name]]).tobytes()
        for name, arr in ckpt.arrays.items()
    }
