"""Versioned, checksummed checkpoint files.

Layout::

    b"MOEICKPT" | u32 format version | u64 header length | JSON header | payload | sha256

The header carries the configuration and a manifest of every tensor (name,
section, shape, byte offset, byte length) into the payload, which is raw
little-endian float32. The trailing digest covers everything before it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .adapters import AdapterSet, AdapterSpec, inject
from .backbone import Backbone, ModelConfig
from .errors import CorruptionError, ShapeError, UnsupportedVersionError
from .rng import stream

MAGIC = b"MOEICKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST = 32
BACKBONE = "backbone"
ADAPTERS = "adapters"


@dataclass
class Checkpoint:
    model: Backbone
    sites: Optional[AdapterSet]
    header: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get("config", {})

    @property
    def meta(self) -> Dict[str, Any]:
        return self.header.get("meta", {})


def _spec_dict(spec: AdapterSpec) -> Dict[str, Any]:
    d = asdict(spec)
    d["sites"] = list(spec.sites) if spec.sites is not None else None
    return d


def _atomic_write(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(model: Backbone, sites: Optional[AdapterSet] = None, config: Optional[Dict] = None,
           meta: Optional[Dict] = None) -> bytes:
    """Serialize a backbone and (optionally) its adapters to bytes."""
    entries: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0

    def put(section: str, name: str, data: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
        entries.append({"name": name, "section": section, "shape": list(data.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, t in model.named_parameters():
        put(BACKBONE, name, t.data)
    if sites is not None:
        for name, t in sites.named_parameters():
            put(ADAPTERS, name, t.data)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "adapters": _spec_dict(sites.spec) if sites is not None else None,
        "config": config or {},
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    body = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str, model: Backbone, sites: Optional[AdapterSet] = None,
                    config: Optional[Dict] = None, meta: Optional[Dict] = None) -> str:
    """Write atomically (temp file + rename); returns the payload's sha256 hex digest."""
    blob = encode(model, sites, config, meta)
    _atomic_write(path, blob)
    return hashlib.sha256(blob).hexdigest()


def decode(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], bytes]:
    """Validate framing, version, checksum and manifest; returns ``(header, payload)``."""
    fixed = len(MAGIC) + _PREFIX.size
    if len(blob) < fixed + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CorruptionError(f"{source}: not a checkpoint file (bad magic or truncated)")
    version, head_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})"
        )
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{source}: checksum mismatch (file truncated or modified)")
    if fixed + head_len > len(body):
        raise CorruptionError(f"{source}: header length exceeds file size")
    try:
        header = json.loads(body[fixed : fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{source}: unreadable header ({exc})") from None
    payload = body[fixed + head_len :]
    _check_manifest(header.get("tensors", []), len(payload), source)
    return header, payload


def _check_manifest(entries: List[Dict[str, Any]], size: int, source: str) -> None:
    cursor = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        expected = 4 * int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != cursor or e["nbytes"] != expected:
            raise CorruptionError(f"{source}: manifest entry {e['name']} overlaps or leaves a gap")
        cursor += e["nbytes"]
    if cursor != size:
        raise CorruptionError(f"{source}: manifest covers {cursor} bytes but payload has {size}")


def read_raw(path: str) -> Tuple[Dict[str, Any], bytes]:
    with open(path, "rb") as fh:
        return decode(fh.read(), path)


def _tensor(payload: bytes, entry: Dict[str, Any]) -> np.ndarray:
    raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
    return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)


def section_bytes(path: str, section: str = BACKBONE) -> bytes:
    """Concatenated payload bytes of one section, in manifest order."""
    header, payload = read_raw(path)
    return b"".join(
        payload[e["offset"] : e["offset"] + e["nbytes"]] for e in header["tensors"] if e["section"] == section
    )


def _restore_backbone(header: Dict[str, Any], payload: bytes, source: str) -> Backbone:
    model = Backbone(ModelConfig(**header["model_config"]), stream(0, "checkpoint"))
    entries = {e["name"]: e for e in header["tensors"] if e["section"] == BACKBONE}
    for name, t in model.named_parameters():
        if name not in entries:
            raise CorruptionError(f"{source}: backbone tensor {name} missing")
        data = _tensor(payload, entries[name])
        if data.shape != t.data.shape:
            raise ShapeError(f"{source}: backbone tensor {name} has shape {data.shape}, expected {t.data.shape}")
        t.data = data
        t.requires_grad = False
    return model


def _restore_adapters(header: Dict[str, Any], payload: bytes, model: Backbone, source: str) -> Optional[AdapterSet]:
    spec_dict = header.get("adapters")
    if spec_dict is None:
        return None
    spec = AdapterSpec(**spec_dict)
    entries = {e["name"]: e for e in header["tensors"] if e["section"] == ADAPTERS}
    for site_id in spec.site_ids(model):
        weight, _ = model.linear(site_id)
        a = entries.get(f"{site_id}.A")
        if a is None:
            raise CorruptionError(f"{source}: adapter tensors for site {site_id} missing")
        if a["shape"][1] != weight.shape[1] or entries[f"{site_id}.B"]["shape"][0] != weight.shape[0]:
            raise ShapeError(
                f"{source}: adapters for site {site_id} expect a {entries[f'{site_id}.B']['shape'][0]}x"
                f"{a['shape'][1]} linear, backbone has {weight.shape[0]}x{weight.shape[1]}"
            )
    sites = inject(model, spec, stream(0, "checkpoint", "adapters"))
    for name, t in sites.named_parameters():
        entry = entries.get(name)
        if entry is None:
            raise CorruptionError(f"{source}: adapter tensor {name} missing")
        data = _tensor(payload, entry)
        if data.shape != t.data.shape:
            raise ShapeError(f"{source}: adapter tensor {name} has shape {data.shape}, expected {t.data.shape}")
        t.data = data
    return sites.eval()


def load_checkpoint(path: str) -> Checkpoint:
    """Rebuild the frozen backbone and adapters; nothing is returned on any error."""
    header, payload = read_raw(path)
    model = _restore_backbone(header, payload, path)
    sites = _restore_adapters(header, payload, model, path)
    return Checkpoint(model, sites, header)


def load_adapters(path: str, model: Backbone) -> Optional[AdapterSet]:
    """Attach a checkpoint's adapters to a different backbone of compatible shape."""
    header, payload = read_raw(path)
    return _restore_adapters(header, payload, model, path)
