"""Raw and rendered image I/O.

Formats on disk:
  * Raw mosaics: 16-bit binary PGM (P5, maxval 65535) plus a JSON sidecar
    holding the CFA layout and an optional label or mask reference.
  * Rendered RGB: 16-bit PNG. Masks: 8-bit PNG with 0/255 values.
  * Dataset manifests: JSON with url/path/sha256/bytes rows and optional
    named splits.

All writes go through a temp file and os.replace, so readers never observe
a partial file and reruns that produce identical bytes leave identical
files. Encoded values use round-half-up quantization: the decode error for
any v in [0, 1] is at most 1/(2*65535).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

SIDECAR_SCHEMA = "raw-meta/1"
MANIFEST_SCHEMA = "manifest/1"
CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
# Red lives at the (odd row, odd col) site of every 2x2 tile by default.
DEFAULT_CFA_PATTERN = "BGGR"


class RawIoError(Exception):
    """I/O or format failure; `code` names the exact condition."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


class ChecksumError(Exception):
    """Downloaded or cached payload does not match its manifest row."""


@dataclass(frozen=True)
class CfaLayout:
    """2x2 color filter tile, pattern read row-major from the (0, 0) corner."""

    pattern: str = DEFAULT_CFA_PATTERN

    def __post_init__(self):
        if self.pattern not in CFA_PATTERNS:
            raise ValueError(f"unknown CFA pattern {self.pattern!r}")

    def channel_map(self, h: int, w: int) -> np.ndarray:
        """Integer (h, w) map: 0 red, 1 green, 2 blue at each site."""
        tile = np.array(["RGB".index(c) for c in self.pattern]).reshape(2, 2)
        ys, xs = np.mgrid[0:h, 0:w]
        return tile[ys % 2, xs % 2]

    def plane_masks(self, h: int, w: int) -> np.ndarray:
        """Float (3, h, w) indicator masks for the red, green, blue sites."""
        cm = self.channel_map(h, w)
        return np.stack([(cm == c).astype(np.float64) for c in range(3)])


def blacklevel_site_map(h: int, w: int) -> np.ndarray:
    """Map each site to its black-level offset index by row/col parity.

    Offsets are ordered (odd, odd), (even, odd), (odd, even), (even, even),
    independent of the CFA color assignment.
    """
    tile = np.array([[3, 1], [2, 0]])
    ys, xs = np.mgrid[0:h, 0:w]
    return tile[ys % 2, xs % 2]


@dataclass
class RawImage:
    mosaic: np.ndarray
    cfa: CfaLayout = field(default_factory=CfaLayout)
    label: int | None = None
    mask: np.ndarray | None = None
    provenance: str | None = None

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic, dtype=np.float64)
        if self.mosaic.ndim != 2:
            raise ValueError("raw mosaic must be 2-d")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.mosaic.shape:
                raise ValueError("mask shape must match the mosaic")


def mosaic_rgb(rgb: np.ndarray, cfa: CfaLayout) -> np.ndarray:
    """Sample a (3, h, w) image down to its Bayer mosaic."""
    _, h, w = rgb.shape
    cm = cfa.channel_map(h, w)
    return np.take_along_axis(rgb, cm[None], axis=0)[0]


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def quantize16(v: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint16 with round-half-up."""
    return np.floor(np.clip(v, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)


def _sidecar_path(pgm_path: Path) -> Path:
    return Path(pgm_path).with_suffix(".json")


def save_raw(path: Path, raw: RawImage) -> None:
    """Write a 16-bit PGM mosaic plus its JSON sidecar (and mask PNG if any)."""
    path = Path(path)
    h, w = raw.mosaic.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    payload = quantize16(raw.mosaic).astype(">u2").tobytes()
    atomic_write_bytes(path, header + payload)
    meta = {"schema": SIDECAR_SCHEMA, "cfa": raw.cfa.pattern}
    if raw.label is not None:
        meta["label"] = int(raw.label)
    if raw.provenance is not None:
        meta["provenance"] = raw.provenance
    if raw.mask is not None:
        mask_name = path.stem + "_mask.png"
        save_mask_png(path.parent / mask_name, raw.mask)
        meta["mask"] = mask_name
    atomic_write_text(_sidecar_path(path), dump_json(meta))


def _parse_pgm_header(data: bytes, path: Path) -> tuple[int, int, int, int]:
    if data[:2] != b"P5":
        raise RawIoError("magic", f"{path}: not a binary PGM (magic {data[:2]!r})")
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        if i >= len(data):
            raise RawIoError("header", f"{path}: truncated header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        elif c.isdigit():
            j = i
            while j < len(data) and data[j:j + 1].isdigit():
                j += 1
            fields.append(int(data[i:j]))
            i = j
        else:
            raise RawIoError("header", f"{path}: unexpected byte {c!r} in header")
    if i >= len(data) or not data[i:i + 1].isspace():
        raise RawIoError("header", f"{path}: missing delimiter after maxval")
    return fields[0], fields[1], fields[2], i + 1


def load_raw(path: Path) -> RawImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise RawIoError("missing", f"{path}: {e}") from e
    w, h, maxval, offset = _parse_pgm_header(data, path)
    if maxval != 65535:
        raise RawIoError("maxval", f"{path}: maxval {maxval}, expected 65535")
    payload = data[offset:]
    if len(payload) < 2 * w * h:
        raise RawIoError("truncated",
                         f"{path}: payload {len(payload)} bytes, expected {2 * w * h}")
    mosaic = np.frombuffer(payload[:2 * w * h], dtype=">u2").reshape(h, w)
    side = _sidecar_path(path)
    if not side.exists():
        raise RawIoError("sidecar", f"{side}: sidecar not found")
    try:
        meta = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise RawIoError("sidecar", f"{side}: unreadable sidecar ({e})") from e
    if meta.get("schema") != SIDECAR_SCHEMA:
        raise RawIoError("schema", f"{side}: schema {meta.get('schema')!r}, "
                                   f"expected {SIDECAR_SCHEMA!r}")
    mask = None
    if "mask" in meta:
        mask = load_mask_png(path.parent / meta["mask"])
    return RawImage(mosaic=mosaic.astype(np.float64) / 65535.0,
                    cfa=CfaLayout(meta["cfa"]),
                    label=meta.get("label"),
                    mask=mask,
                    provenance=meta.get("provenance"))


def _encode_png(array: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", array)
    if not ok:
        raise RawIoError("encode", "PNG encoding failed")
    return buf.tobytes()


def save_rgb_png(path: Path, rgb: np.ndarray) -> None:
    """Write a (3, h, w) float image in [0, 1] as a 16-bit RGB PNG."""
    q = quantize16(rgb)
    bgr = np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])
    atomic_write_bytes(Path(path), _encode_png(bgr))


def load_rgb_png(path: Path) -> np.ndarray:
    data = np.fromfile(str(path), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 3:
        raise RawIoError("decode", f"{path}: not a color PNG")
    if img.dtype == np.uint8:
        scale = 255.0
    else:
        scale = 65535.0
    rgb = img[:, :, ::-1].transpose(2, 0, 1)
    return rgb.astype(np.float64) / scale


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    m = (np.asarray(mask, dtype=bool) * np.uint8(255))
    atomic_write_bytes(Path(path), _encode_png(m))


def load_mask_png(path: Path) -> np.ndarray:
    data = np.fromfile(str(path), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise RawIoError("decode", f"{path}: not a readable PNG")
    return img >= 128


@dataclass
class ManifestEntry:
    url: str
    path: str
    sha256: str
    bytes: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    splits: dict[str, list[str]] = field(default_factory=dict)

    @staticmethod
    def load(path: Path) -> "DatasetManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise RawIoError("manifest", f"{path}: {e}") from e
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise RawIoError("schema", f"{path}: schema {doc.get('schema')!r}, "
                                       f"expected {MANIFEST_SCHEMA!r}")
        entries = [ManifestEntry(**row) for row in doc["entries"]]
        return DatasetManifest(entries=entries, splits=doc.get("splits", {}))

    def save(self, path: Path) -> None:
        doc = {
            "schema": MANIFEST_SCHEMA,
            "entries": [vars(e) for e in self.entries],
            "splits": self.splits,
        }
        atomic_write_text(Path(path), dump_json(doc))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fetch_dataset(manifest: DatasetManifest, dest: Path, force: bool = False,
                  log=None) -> list[Path]:
    """Download and verify every manifest entry into dest.

    Existing files that already match their checksum are kept unless force
    is set. A checksum or size mismatch raises ChecksumError and leaves no
    partial file behind.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    out: list[Path] = []
    for entry in manifest.entries:
        target = dest / entry.path
        if target.exists() and not force:
            data = target.read_bytes()
            if len(data) == entry.bytes and _sha256(data) == entry.sha256:
                if log:
                    log(f"keep {entry.path} (verified)")
                out.append(target)
                continue
        with urllib.request.urlopen(entry.url) as resp:
            data = resp.read()
        if len(data) != entry.bytes:
            raise ChecksumError(
                f"{entry.path}: got {len(data)} bytes, manifest says {entry.bytes}")
        digest = _sha256(data)
        if digest != entry.sha256:
            raise ChecksumError(
                f"{entry.path}: sha256 {digest}, manifest says {entry.sha256}")
        atomic_write_bytes(target, data)
        if log:
            log(f"fetch {entry.path} ({entry.bytes} bytes)")
        out.append(target)
    return out
