"""Netpbm images, the dataset index and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .hierarchy import EmotionHierarchy, leaves_to_paths


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(raw)
            fp.flush()
            os.fsync(fp.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# PPM (P6) / PGM (P5), 8-bit


def encode_ppm(image: np.ndarray) -> bytes:
    """3 × H × W uint8 → binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise DataError(f"PPM needs a 3×H×W uint8 array, got {image.shape} {image.dtype}")
    _, h, w = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    """H × W uint8 → binary P5."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise DataError(f"PGM needs an H×W uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise DataError("truncated netpbm header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def decode_netpbm(data: bytes) -> np.ndarray:
    """Decode 8-bit P5/P6; returns H × W or 3 × H × W uint8."""
    (magic, w, h, maxval), start = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported netpbm magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataError("non-numeric netpbm header") from None
    if maxval != 255:
        raise DataError(f"only 8-bit netpbm is supported (maxval {maxval})")
    ch = 3 if magic == b"P6" else 1
    raster = data[start : start + w * h * ch]
    if len(raster) != w * h * ch:
        raise DataError(f"netpbm raster truncated: expected {w * h * ch} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).copy() if ch == 3 else arr.reshape(h, w).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    img = decode_netpbm(Path(path).read_bytes())
    if img.ndim != 3:
        raise DataError(f"{path}: expected a colour (P6) image")
    return img


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    atomic_write(path, encode_ppm(image))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    atomic_write(path, encode_pgm(image))


def to_gray8(m: np.ndarray) -> np.ndarray:
    """Min-max scale a map to 0..255; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# dataset index


@dataclass
class DatasetIndex:
    """``#mean r g b`` / ``#std r g b`` header, then ``path<TAB>leaf-name`` rows."""

    mean: np.ndarray
    std: np.ndarray
    entries: list[tuple[str, str]]
    root: Path

    def to_text(self) -> str:
        lines = ["#mean " + " ".join(repr(float(v)) for v in self.mean),
                 "#std " + " ".join(repr(float(v)) for v in self.std)]
        lines += [f"{p}\t{name}" for p, name in self.entries]
        return "\n".join(lines) + "\n"

    def load(self, hierarchy: EmotionHierarchy) -> tuple[np.ndarray, np.ndarray]:
        """Read every image (uint8) and map leaf names to label paths."""
        leaf_names = hierarchy.names(hierarchy.depth)
        pos = {n: i for i, n in enumerate(leaf_names)}
        leaves, images = [], []
        for lineno, (rel, name) in enumerate(self.entries, start=3):
            if name not in pos:
                raise DataError(f"index line {lineno}: {name!r} is not a leaf class of the hierarchy")
            path = self.root / rel
            try:
                images.append(read_ppm(path))
            except OSError as exc:
                raise DataError(f"index line {lineno}: cannot read {path}: {exc.strerror}") from exc
            except DataError as exc:
                raise DataError(f"index line {lineno}: {path}: {exc}") from exc
            leaves.append(pos[name])
        if images and len({im.shape for im in images}) != 1:
            raise DataError("images in the index have different sizes")
        stack = np.stack(images) if images else np.zeros((0, 3, 0, 0), dtype=np.uint8)
        return stack, leaves_to_paths(hierarchy, leaves)


def parse_index(text: str, root: str | Path) -> DatasetIndex:
    """Parse an index; every malformed line raises :class:`DataError` naming its line number."""
    mean = std = None
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, rest = line[1:].partition(" ")
            if key in ("mean", "std"):
                try:
                    vals = np.array([float(v) for v in rest.split()])
                except ValueError:
                    raise DataError(f"index line {lineno}: non-numeric #{key} values") from None
                if vals.shape != (3,) or not np.all(np.isfinite(vals)):
                    raise DataError(f"index line {lineno}: #{key} needs three finite values")
                if key == "std" and np.any(vals <= 0):
                    raise DataError(f"index line {lineno}: #std values must be positive")
                if key == "mean":
                    mean = vals
                else:
                    std = vals
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"index line {lineno}: expected 'path<TAB>leaf-class', got {raw!r}")
        entries.append((parts[0].strip(), parts[1].strip()))
    if mean is None or std is None:
        raise DataError("index is missing the #mean / #std header")
    return DatasetIndex(mean, std, entries, Path(root))


def read_index(path: str | Path) -> DatasetIndex:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read index {path}: {exc.strerror}") from exc
    return parse_index(text, path.parent)
