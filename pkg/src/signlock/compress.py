"""Sub-bit compression: uniform quantization of SVD factors of the magnitude
matrix, reconstruction against a regenerable sign template, a magnitude
pruning baseline, and exact bits-per-weight accounting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, FormatError, InfeasibleBudgetError
from .interventions import TemplateConfig, make_template, template_seed
from .numerics import truncated_svd

PRUNE_MIN_KEEP = 0.005
DEFAULT_BITS = 4
DEFAULT_EPS_ZS = 1e-6
_TIE_RTOL = 1e-9


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------

def _check_bits(b: int) -> None:
    if int(b) != b or b < 2:
        raise ConfigError(f"bit width must be an integer >= 2, got {b}")


def quantize_codes(x, b: int, alpha: float) -> np.ndarray:
    """Integer codes clip(round(x / alpha), -2^(b-1), 2^(b-1) - 1).

    Rounding is to nearest with ties away from zero. A ratio within a relative
    1e-9 of a half-integer counts as a tie, so decimal inputs such as
    0.35 / 0.1 round the way their exact values would.
    """
    _check_bits(b)
    if not (math.isfinite(alpha) and alpha > 0):
        raise ConfigError(f"scale must be positive and finite, got {alpha}")
    q = np.asarray(x, dtype=np.float64) / alpha
    a = np.abs(q)
    fl = np.floor(a)
    up = (a - fl) >= 0.5 - _TIE_RTOL * np.maximum(1.0, a)
    r = np.copysign(fl + up, q)
    lo, hi = -(2 ** (b - 1)), 2 ** (b - 1) - 1
    return np.clip(r, lo, hi).astype(np.int64)


def quantize(x, b: int, alpha: float):
    codes = quantize_codes(x, b, alpha)
    out = alpha * codes.astype(np.float64)
    return float(out) if np.ndim(x) == 0 else out


def scale_for(x, b: int) -> float:
    """Per-tensor scale max|x| / (2^(b-1) - 1); 1.0 for an all-zero tensor."""
    _check_bits(b)
    m = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return m / (2 ** (b - 1) - 1) if m > 0 else 1.0


def codebook(b: int, alpha: float) -> np.ndarray:
    _check_bits(b)
    return alpha * np.arange(-(2 ** (b - 1)), 2 ** (b - 1), dtype=np.float64)


# ---------------------------------------------------------------------------
# Bit accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BitReport:
    values: Fraction
    indices: Fraction = Fraction(0)
    pointers: Fraction = Fraction(0)
    signs: Fraction = Fraction(0)

    @property
    def bpw(self) -> Fraction:
        return self.values + self.indices + self.pointers + self.signs

    def as_dict(self) -> dict:
        return {
            "bpw_eff": float(self.bpw),
            "bpw_eff_exact": str(self.bpw),
            "values": float(self.values),
            "indices": float(self.indices),
            "pointers": float(self.pointers),
            "signs": float(self.signs),
        }


def bpw_svd(m: int, n: int, r: int, b: int) -> Fraction:
    if min(m, n, r, b) < 1:
        raise ConfigError("bpw_svd arguments must be positive")
    return Fraction(b * (m * r + n * r + r), m * n)


def bpw_csr(m: int, n: int, nnz: int, b_val: int = DEFAULT_BITS, b_idx: int = 32,
            b_ptr: int = 32) -> Fraction:
    if m < 1 or n < 1:
        raise ConfigError("matrix dimensions must be positive")
    if not 0 <= nnz <= m * n:
        raise ConfigError(f"nnz={nnz} outside [0, {m * n}]")
    return _csr_report(m, n, nnz, b_val, b_idx, b_ptr).bpw


def _csr_report(m, n, nnz, b_val, b_idx, b_ptr) -> BitReport:
    mn = m * n
    return BitReport(Fraction(nnz * b_val, mn), Fraction(nnz * b_idx, mn),
                     Fraction((m + 1) * b_ptr, mn))


def _as_fraction(x) -> Fraction:
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def rank_for_target(m: int, n: int, b: int, target_bpw) -> int:
    """Largest rank whose SVD-factor cost stays within ``target_bpw``.

    A float target that equals a rank's cost after rounding to double counts
    as meeting it.
    """
    target = _as_fraction(target_bpw)
    lowest = bpw_svd(m, n, 1, b)
    if target < lowest and float(target) != float(lowest):
        raise InfeasibleBudgetError(
            f"{m}x{n} at {b} bits needs at least {float(lowest):.6g} bpw (rank 1); "
            f"target was {float(target):.6g}", float(lowest))
    d = min(m, n)
    r = max(1, min(int(target / bpw_svd(m, n, 1, b)), d))
    while r < d and float(bpw_svd(m, n, r + 1, b)) <= float(target):
        r += 1
    return r


# ---------------------------------------------------------------------------
# SVD-factor compression
# ---------------------------------------------------------------------------

@dataclass
class QuantizedFactors:
    """Integer codes and scales; enough to rebuild the approximation exactly."""

    mode: str  # "naive" | "zscore" | "raw"
    bits: int
    shape: tuple[int, int]
    rank: int
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray | None
    alpha_U: float
    alpha_V: float
    alpha_S: float | None = None
    zeta: np.ndarray | None = None
    denom: np.ndarray | None = None

    def report(self) -> BitReport:
        m, n = self.shape
        return BitReport(bpw_svd(m, n, self.rank, self.bits))


def reconstruct_factors(f: QuantizedFactors) -> np.ndarray:
    U = f.alpha_U * f.U.astype(np.float64)
    V = f.alpha_V * f.V.astype(np.float64)
    if f.S is not None:
        U = U * (f.alpha_S * f.S.astype(np.float64))
    M = U @ V.T
    if f.mode == "zscore":
        M = M * f.denom + f.zeta
    if f.mode != "raw":
        M = np.maximum(M, 0.0)
    return M


def _factor(M: np.ndarray, r: int):
    if not np.any(M):
        m, n = M.shape
        return np.zeros((m, r)), np.zeros(r), np.zeros((n, r))
    F = truncated_svd(M, r)
    return F.U, F.S, F.V


def quantize_svd(M, r: int, b: int, mode: str = "naive", eps_zs: float = DEFAULT_EPS_ZS) -> QuantizedFactors:
    """Rank-r SVD with b-bit per-tensor quantized factors.

    ``naive`` and ``raw`` quantize U, Sigma and V separately; ``raw`` skips the
    nonnegativity clamp so it applies to signed weights. ``zscore`` standardizes
    columns first and folds Sigma into U.
    """
    _check_bits(b)
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ConfigError("expected a matrix")
    if not np.all(np.isfinite(M)):
        raise ConfigError("matrix contains non-finite entries")
    d = min(M.shape)
    if not 1 <= r <= d:
        raise ConfigError(f"rank {r} outside [1, {d}]")
    if mode in ("naive", "raw"):
        U, S, V = _factor(M, r)
        aU, aS, aV = scale_for(U, b), scale_for(S, b), scale_for(V, b)
        return QuantizedFactors(mode, b, M.shape, r, quantize_codes(U, b, aU), quantize_codes(V, b, aV),
                                quantize_codes(S, b, aS), aU, aV, aS)
    if mode == "zscore":
        if not eps_zs > 0:
            raise ConfigError("eps_zs must be positive")
        zeta = M.mean(axis=0)
        denom = M.std(axis=0) + eps_zs
        U, S, V = _factor((M - zeta) / denom, r)
        U = U * S
        aU, aV = scale_for(U, b), scale_for(V, b)
        return QuantizedFactors(mode, b, M.shape, r, quantize_codes(U, b, aU), quantize_codes(V, b, aV),
                                None, aU, aV, None, zeta, denom)
    raise ConfigError(f"unknown SVD mode {mode!r}")


@dataclass(frozen=True)
class CompressionPlan:
    storage: str = "svd_factors"  # or "csr_sparse"
    rank: int | None = None
    keep_frac: float | None = None
    bits: int = DEFAULT_BITS
    precondition: str = "naive"  # or "zscore"
    eps_zs: float = DEFAULT_EPS_ZS
    target_bpw: float | None = None

    def __post_init__(self):
        if self.storage not in ("svd_factors", "csr_sparse"):
            raise ConfigError(f"unknown storage {self.storage!r}")
        if self.precondition not in ("naive", "zscore"):
            raise ConfigError(f"unknown preconditioning {self.precondition!r}")
        _check_bits(self.bits)
        if self.storage == "svd_factors" and self.rank is None and self.target_bpw is None:
            raise ConfigError("SVD plan needs a rank or a target bpw")
        if self.storage == "csr_sparse" and self.keep_frac is None:
            raise ConfigError("CSR plan needs keep_frac")

    def rank_for(self, m: int, n: int) -> int:
        if self.rank is not None:
            return self.rank
        return rank_for_target(m, n, self.bits, self.target_bpw)


def compress_magnitude(A, plan: CompressionPlan) -> tuple[np.ndarray, BitReport]:
    A = np.asarray(A, dtype=np.float64)
    if np.any(A < 0):
        raise ConfigError("magnitude matrix has negative entries")
    r = plan.rank_for(*A.shape)
    f = quantize_svd(A, r, plan.bits, plan.precondition, plan.eps_zs)
    return reconstruct_factors(f), f.report()


def compress_raw(W, plan: CompressionPlan) -> tuple[np.ndarray, BitReport]:
    """Same factor budget applied directly to signed weights (no template)."""
    W = np.asarray(W, dtype=np.float64)
    r = plan.rank_for(*W.shape)
    f = quantize_svd(W, r, plan.bits, "raw")
    return reconstruct_factors(f), f.report()


def reconstruct_weight(T, A_hat) -> np.ndarray:
    T = np.asarray(T)
    A_hat = np.asarray(A_hat, dtype=np.float64)
    if T.shape != A_hat.shape:
        raise ConfigError(f"shape mismatch: template {T.shape} vs magnitudes {A_hat.shape}")
    return T * A_hat


# ---------------------------------------------------------------------------
# Pruning baseline
# ---------------------------------------------------------------------------

def _prune(W: np.ndarray, keep_frac: float, b_val: int):
    if not PRUNE_MIN_KEEP < keep_frac <= 1:
        raise ConfigError(f"keep_frac must lie in ({PRUNE_MIN_KEEP}, 1], got {keep_frac}")
    m, n = W.shape
    k = math.ceil(keep_frac * m * n)
    keep = np.sort(np.argsort(-np.abs(W).ravel(), kind="stable")[:k])
    vals = W.ravel()[keep]
    alpha = scale_for(vals, b_val)
    return keep, quantize_codes(vals, b_val, alpha), alpha


def _csr_from_codes(keep, codes, alpha, shape) -> sparse.csr_matrix:
    rows, cols = np.divmod(keep, shape[1])
    return sparse.csr_matrix((alpha * codes.astype(np.float64), (rows, cols)), shape=shape)


def magnitude_prune(W, keep_frac: float, b_val: int = DEFAULT_BITS, b_idx: int = 32,
                    b_ptr: int = 32) -> tuple[sparse.csr_matrix, BitReport]:
    """Keep the ceil(keep_frac * mn) largest |w| (row-major order breaks ties),
    quantize them at b_val bits and store as CSR."""
    W = np.asarray(W, dtype=np.float64)
    keep, codes, alpha = _prune(W, keep_frac, b_val)
    m, n = W.shape
    return _csr_from_codes(keep, codes, alpha, W.shape), _csr_report(m, n, keep.size, b_val, b_idx, b_ptr)


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

CONTAINER_VERSION = 1


def pack_codes(codes: np.ndarray, b: int) -> bytes:
    """Offset-binary b-bit fields, least significant bit first, zero padded."""
    u = (np.asarray(codes, dtype=np.int64).ravel() + 2 ** (b - 1)).astype(np.uint64)
    bits = ((u[:, None] >> np.arange(b, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(blob: bytes, b: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")
    if bits.size < count * b:
        raise FormatError(f"blob holds {bits.size} bits, need {count * b}")
    fields = bits[: count * b].reshape(count, b).astype(np.int64)
    u = (fields << np.arange(b, dtype=np.int64)).sum(axis=1)
    return u - 2 ** (b - 1)


def _write_blob(out: Path, name: str, codes: np.ndarray, b: int) -> dict:
    path = out / name
    path.write_bytes(pack_codes(codes, b))
    return {"file": name, "shape": list(codes.shape)}


def _read_blob(root: Path, entry: dict, b: int) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    try:
        blob = (root / entry["file"]).read_bytes()
    except OSError as exc:
        raise FormatError(f"missing blob {entry['file']}") from exc
    return unpack_codes(blob, b, count).reshape(shape)


def _f64_blob(out: Path, name: str, x: np.ndarray) -> dict:
    (out / name).write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return {"file": name, "shape": list(x.shape)}


def _read_f64(root: Path, entry: dict) -> np.ndarray:
    raw = (root / entry["file"]).read_bytes()
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(entry["shape"])).copy()


def write_container(out, layers: list[dict], meta: dict) -> Path:
    """layers: dicts with name, mode ('template' | 'raw' | 'csr') and payload."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for L in layers:
        name, mode = L["name"], L["mode"]
        safe = name.replace("/", "_")
        e = {"name": name, "mode": mode}
        if mode in ("template", "raw"):
            f: QuantizedFactors = L["factors"]
            b = f.bits
            e.update(bits=b, shape=list(f.shape), rank=f.rank, svd_mode=f.mode,
                     alpha_U=f.alpha_U.hex(), alpha_V=f.alpha_V.hex(),
                     U=_write_blob(out, f"{safe}.U.bin", f.U, b),
                     V=_write_blob(out, f"{safe}.V.bin", f.V, b))
            if f.S is not None:
                e.update(alpha_S=f.alpha_S.hex(), S=_write_blob(out, f"{safe}.S.bin", f.S, b))
            if f.mode == "zscore":
                e.update(zeta=_f64_blob(out, f"{safe}.zeta.f64", f.zeta),
                         denom=_f64_blob(out, f"{safe}.denom.f64", f.denom))
            if mode == "template":
                e["template"] = asdict(L["template"])
        elif mode == "csr":
            b = L["bits"]
            e.update(bits=b, shape=list(L["shape"]), alpha=L["alpha"].hex(),
                     values=_write_blob(out, f"{safe}.vals.bin", L["codes"], b))
            (out / f"{safe}.keep.u64").write_bytes(L["keep"].astype("<u8").tobytes())
            e["keep"] = f"{safe}.keep.u64"
        else:
            raise ConfigError(f"unknown layer mode {mode!r}")
        e["report"] = L["report"].as_dict()
        entries.append(e)
    doc = {"format": "signlock-compressed", "version": CONTAINER_VERSION, "meta": meta, "layers": entries}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))
    return out / "manifest.json"


def read_container(path) -> dict[str, np.ndarray]:
    """Rebuild every layer of a container; returns name -> float64 matrix."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable container manifest ({exc})") from exc
    if doc.get("format") != "signlock-compressed" or doc.get("version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: not a version-{CONTAINER_VERSION} container")
    out = {}
    try:
        for e in doc["layers"]:
            b = e["bits"]
            if e["mode"] in ("template", "raw"):
                f = QuantizedFactors(
                    e["svd_mode"], b, tuple(e["shape"]), e["rank"],
                    _read_blob(root, e["U"], b), _read_blob(root, e["V"], b),
                    _read_blob(root, e["S"], b) if "S" in e else None,
                    float.fromhex(e["alpha_U"]), float.fromhex(e["alpha_V"]),
                    float.fromhex(e["alpha_S"]) if "alpha_S" in e else None,
                    _read_f64(root, e["zeta"]) if "zeta" in e else None,
                    _read_f64(root, e["denom"]) if "denom" in e else None,
                )
                M = reconstruct_factors(f)
                if e["mode"] == "template":
                    T = make_template(*f.shape, TemplateConfig(**e["template"]))
                    M = reconstruct_weight(T, M)
                out[e["name"]] = M
            else:
                keep = np.frombuffer((root / e["keep"]).read_bytes(), dtype="<u8").astype(np.int64)
                codes = _read_blob(root, e["values"], b)
                mat = _csr_from_codes(keep, codes, float.fromhex(e["alpha"]), tuple(e["shape"]))
                out[e["name"]] = mat.toarray()
    except KeyError as exc:
        raise FormatError(f"{path}: layer entry missing {exc}") from exc
    return out


def template_for(name: str, shape: tuple[int, int], global_seed: int, rank: int = 2,
                 dist: str = "gaussian") -> TemplateConfig:
    """The per-layer template config the trainer uses for the same seed."""
    return TemplateConfig(min(rank, min(shape)), template_seed(global_seed, name), dist)


def compress_layer(name: str, W, plan: CompressionPlan, mode: str,
                   template: TemplateConfig | None = None) -> tuple[dict, np.ndarray]:
    """Compress one layer; returns (container entry, reconstruction)."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if mode == "csr":
        keep, codes, alpha = _prune(W, plan.keep_frac, plan.bits)
        rep = _csr_report(m, n, keep.size, plan.bits, 32, 32)
        entry = {"name": name, "mode": "csr", "keep": keep, "codes": codes, "alpha": alpha,
                 "bits": plan.bits, "shape": (m, n), "report": rep}
        return entry, _csr_from_codes(keep, codes, alpha, (m, n)).toarray()
    r = plan.rank_for(m, n)
    if mode == "raw":
        f = quantize_svd(W, r, plan.bits, "raw")
        return {"name": name, "mode": "raw", "factors": f, "report": f.report()}, reconstruct_factors(f)
    if mode == "template":
        if template is None:
            raise ConfigError("template mode needs a template config")
        f = quantize_svd(np.abs(W), r, plan.bits, plan.precondition, plan.eps_zs)
        T = make_template(m, n, template)
        return ({"name": name, "mode": "template", "factors": f, "template": template,
                 "report": f.report()}, reconstruct_weight(T, reconstruct_factors(f)))
    raise ConfigError(f"unknown compression mode {mode!r}")
