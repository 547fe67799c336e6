"""
On-disk artifacts: checkpoint and mask binaries, run manifests, probe CSVs
and JSON reports. Everything here is Qt-free so the viewer's loaders can be
tested headless.

Checkpoint  "PMPCKPT1" | u64 layout_hash | u64 d | u64 len | config JSON | d x f32 | u32 CRC32
Mask        "PMPMASK1" | u64 d | u64 k | f64 rho | u64 layout_hash | ceil(d/8) bitset | u32 CRC32

All integers little-endian; the CRC covers every preceding byte.
"""

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from core.errors import FormatError, UsageError
from core.mask import BinaryMask
from core.platform_utils import git_commit
from core.quantgeom import crc32
from core.trainer import Checkpoint
from core.utils import get_logger

logger = get_logger("PMP.formats")

CKPT_MAGIC = b"PMPCKPT1"
MASK_MAGIC = b"PMPMASK1"
_CKPT_HEAD = struct.Struct("<8sQQQ")
_MASK_HEAD = struct.Struct("<8sQQdQ")
_CRC = struct.Struct("<I")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: PathLike, data: bytes):
    """Write to a temp file in the target directory, then rename over the target."""
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", suffix=".tmp", dir=str(p.parent))
    except OSError as e:
        raise UsageError(f"cannot write {p}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, p)
    except OSError as e:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise UsageError(f"cannot write {p}: {e}") from e
    logger.debug(f"WROTE: {p} ({len(data)} bytes)")


def atomic_write_text(path: PathLike, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _check_crc(data: bytes, what: str) -> bytes:
    if len(data) < _CRC.size:
        raise FormatError(f"{what}: file truncated ({len(data)} bytes)")
    body, (stored,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    actual = crc32(body)
    if actual != stored:
        raise FormatError(f"{what}: CRC mismatch (stored {stored:#010x}, computed {actual:#010x})")
    return body


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"model": ckpt.model_config, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    values = np.ascontiguousarray(ckpt.params, dtype="<f4")
    if values.shape != (ckpt.d,):
        raise FormatError(f"checkpoint vector shape {values.shape} != ({ckpt.d},)")
    body = _CKPT_HEAD.pack(CKPT_MAGIC, ckpt.layout_hash, ckpt.d, len(meta)) + meta + values.tobytes()
    return body + _CRC.pack(crc32(body))


def decode_checkpoint(data: bytes, source: str = "checkpoint") -> Checkpoint:
    if len(data) < _CKPT_HEAD.size or data[:8] != CKPT_MAGIC:
        raise FormatError(f"{source}: not a PMP checkpoint (bad magic)")
    body = _check_crc(data, source)
    _, layout_hash, d, meta_len = _CKPT_HEAD.unpack_from(body)
    off = _CKPT_HEAD.size
    if len(body) != off + meta_len + 4 * d:
        raise FormatError(f"{source}: expected {off + meta_len + 4 * d} body bytes, found {len(body)}")
    try:
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: malformed config block: {e}") from e
    params = np.frombuffer(body, dtype="<f4", count=d, offset=off + meta_len).astype(np.float32)
    return Checkpoint(layout_hash, d, params, meta.get("model", {}), meta.get("meta", {}))


def write_checkpoint(path: PathLike, ckpt: Checkpoint):
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def read_checkpoint(path: PathLike) -> Checkpoint:
    return decode_checkpoint(_read(path), str(path))


# ---------------------------------------------------------------------------
# Mask
# ---------------------------------------------------------------------------

def encode_mask(mask: BinaryMask) -> bytes:
    body = _MASK_HEAD.pack(MASK_MAGIC, mask.d, mask.k, float(mask.rho), mask.layout_hash) + mask.to_bytes()
    return body + _CRC.pack(crc32(body))


def decode_mask(data: bytes, source: str = "mask") -> BinaryMask:
    if len(data) < _MASK_HEAD.size or data[:8] != MASK_MAGIC:
        raise FormatError(f"{source}: not a PMP mask file (bad magic)")
    body = _check_crc(data, source)
    _, d, k, rho, layout_hash = _MASK_HEAD.unpack_from(body)
    bitset = body[_MASK_HEAD.size:]
    if len(bitset) != (d + 7) // 8:
        raise FormatError(f"{source}: bitset of {len(bitset)} bytes does not match d={d}")
    mask = BinaryMask.from_bytes(bitset, d, rho, layout_hash)
    if mask.k != k:
        raise FormatError(f"{source}: header k={k} but bitset has {mask.k} bits set")
    return mask


def write_mask(path: PathLike, mask: BinaryMask):
    atomic_write_bytes(path, encode_mask(mask))


def read_mask(path: PathLike) -> BinaryMask:
    return decode_mask(_read(path), str(path))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_PACKAGE_ROOT = Path(__file__).resolve().parent.parent


def build_id() -> str:
    """git commit of the checkout, else a SHA-1 over the package sources."""
    commit = git_commit(_PACKAGE_ROOT)
    if commit:
        return commit
    h = hashlib.sha1()
    for src in sorted(_PACKAGE_ROOT.glob("core/*.py")) + sorted(_PACKAGE_ROOT.glob("ui/*.py")):
        h.update(src.name.encode("utf-8"))
        h.update(src.read_bytes())
    return f"src-{h.hexdigest()}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    build: str = field(default_factory=build_id)

    def finish(self):
        self.finished = _now()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command, "config": self.config, "seed": self.seed,
            "inputs": self.inputs, "outputs": self.outputs,
            "started": self.started, "finished": self.finished, "build": self.build,
        }


def manifest_path(output: PathLike) -> Path:
    p = Path(output)
    return p.with_name(p.name + ".manifest.json")


def write_manifest(output: PathLike, manifest: RunManifest) -> Path:
    if manifest.finished is None:
        manifest.finish()
    path = manifest_path(output)
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# Reports and loaders
# ---------------------------------------------------------------------------

def write_json(path: PathLike, payload: Dict[str, Any]):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot load JSON report {path}: {e}") from e


LANDSCAPE_HEADER = ("alpha", "loss_masked", "loss_full")


def write_landscape_csv(path: PathLike, rows: List[Tuple[float, float, float]]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LANDSCAPE_HEADER)
    for a, m, f in rows:
        w.writerow([repr(float(a)), repr(float(m)), repr(float(f))])
    atomic_write_text(path, buf.getvalue())


def read_landscape_csv(path: PathLike) -> List[Tuple[float, float, float]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != LANDSCAPE_HEADER:
                raise FormatError(f"{path}: expected header {','.join(LANDSCAPE_HEADER)}, got {','.join(header)}")
            return [(float(a), float(m), float(f)) for a, m, f in reader]
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: malformed row: {e}") from e


def read_metrics(path: PathLike) -> List[Dict[str, Any]]:
    """Records of a JSON-lines metrics file; blank lines are skipped."""
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    records.append(json.loads(line))
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {n} is not JSON: {e}") from e
    return records


def summarize_metrics(records: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Headline numbers of a metrics log: update counts per phase, final loss, last IoU."""
    phases: Dict[str, int] = {}
    for r in records:
        phases[str(r.get("phase", "?"))] = phases.get(str(r.get("phase", "?")), 0) + 1
    train = [r for r in records if r.get("phase") == "train"]
    ious = [r["iou"] for r in records if "iou" in r]
    return {
        "records": len(records),
        "phases": phases,
        "first_loss": train[0]["loss"] if train else None,
        "final_loss": train[-1]["loss"] if train else None,
        "last_iou": ious[-1] if ious else None,
    }


def summarize_landscape(rows: List[Tuple[float, float, float]], alpha: float = 0.1) -> Dict[str, Optional[float]]:
    """Mean loss increase at +/-alpha along masked and full directions (None when off-grid)."""
    base = [m for a, m, _ in rows if a == 0.0]
    near = [(m, f) for a, m, f in rows if abs(abs(a) - alpha) < 1e-9]
    if not base or not near:
        return {"base": base[0] if base else None, "masked_increase": None, "full_increase": None}
    return {
        "base": base[0],
        "masked_increase": float(np.mean([m for m, _ in near])) - base[0],
        "full_increase": float(np.mean([f for _, f in near])) - base[0],
    }
