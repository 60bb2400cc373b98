"""Weight-matrix containers, SMAT persistence, sign-magnitude decomposition
and sign-drift ratios."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError

SMAT_MAGIC = b"SMAT"
SMAT_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_MAX_PAYLOAD = 2**40


@dataclass(frozen=True)
class WeightMatrix:
    """A named, finite, read-only 2-D weight matrix."""

    name: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.data, copy=True)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ConfigError(f"{self.name}: expected a nonempty 2-D matrix, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise ConfigError(f"{self.name}: matrix contains non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size


def _array(W) -> np.ndarray:
    return np.asarray(W.data if isinstance(W, WeightMatrix) else W)


def sign_decompose(W) -> tuple[np.ndarray, np.ndarray]:
    """Split ``W`` into an int8 sign matrix (sign(0) = +1) and |W|."""
    a = _array(W)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ConfigError("sign_decompose: non-finite entry")
    S = np.where(a >= 0, 1, -1).astype(np.int8)
    return S, np.abs(a)


def recompose(S, A) -> np.ndarray:
    S = np.asarray(S)
    A = np.asarray(A)
    if S.shape != A.shape:
        raise ConfigError(f"shape mismatch: signs {S.shape} vs magnitudes {A.shape}")
    return S.astype(A.dtype) * A


def is_sign_matrix(S) -> bool:
    S = np.asarray(S)
    return bool(np.all((S == 1) | (S == -1)))


def flip_ratio(S_now, S_ref) -> float:
    """Fraction of entries whose sign differs between two sign matrices."""
    a = np.asarray(S_now)
    b = np.asarray(S_ref)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.count_nonzero(a != b)) / a.size


def pooled_flip_ratio(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Entry-weighted flip ratio over several layers."""
    changed = 0
    total = 0
    for now, ref in pairs:
        now = np.asarray(now)
        ref = np.asarray(ref)
        if now.shape != ref.shape:
            raise ConfigError(f"shape mismatch: {now.shape} vs {ref.shape}")
        changed += int(np.count_nonzero(now != ref))
        total += now.size
    if total == 0:
        raise ConfigError("pooled flip ratio needs at least one entry")
    return changed / total


# ---------------------------------------------------------------------------
# SMAT files and manifests
# ---------------------------------------------------------------------------

def save_matrix(W: WeightMatrix, path) -> None:
    a = np.ascontiguousarray(_array(W), dtype="<f4")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SMAT_MAGIC, SMAT_VERSION, rows, cols))
        fh.write(a.tobytes(order="C"))


def load_matrix(path, name: str | None = None) -> WeightMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SMAT_MAGIC:
        raise FormatError(f"{path}: bad magic (not an SMAT file)")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, rows, cols = _HEADER.unpack_from(raw)
    if version != SMAT_VERSION:
        raise FormatError(f"{path}: unsupported SMAT version {version}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: zero dimension {rows}x{cols}")
    n = rows * cols
    if n * 4 > _MAX_PAYLOAD:
        raise FormatError(f"{path}: dimensions {rows}x{cols} overflow the payload")
    payload = raw[_HEADER.size:]
    if len(payload) < n * 4:
        raise FormatError(f"{path}: truncated payload ({len(payload)} bytes, need {n * 4})")
    if len(payload) > n * 4:
        raise FormatError(f"{path}: {len(payload) - n * 4} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return WeightMatrix(name or Path(path).stem, data)


def save_manifest(layers: Sequence[WeightMatrix], directory) -> Path:
    """Write each layer as ``<name>.smat`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in layers:
        fname = f"{layer.name}.smat"
        save_matrix(layer, directory / fname)
        entries.append({"name": layer.name, "path": fname})
    path = directory / "manifest.json"
    path.write_text(json.dumps({"layers": entries}, indent=2))
    return path


def load_manifest(path) -> list[WeightMatrix]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise FormatError(f"{path}: manifest must be an object with a 'layers' list")
    layers = []
    for entry in doc["layers"]:
        try:
            name, rel = entry["name"], entry["path"]
        except (TypeError, KeyError) as exc:
            raise FormatError(f"{path}: layer entries need 'name' and 'path'") from exc
        layers.append(load_matrix(path.parent / rel, name=name))
    return layers
