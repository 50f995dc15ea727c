"""Binary PPM (P6) images and the plain-text dataset manifest."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .weather import ImagePair


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as 8-bit P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    _, h, w = img.shape
    body = np.transpose(to_bytes(img), (1, 2, 0)).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file into a [3, H, W] float array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=pos)
    return np.transpose(data.reshape(h, w, 3), (2, 0, 1)).astype(np.float64) / 255.0


MANIFEST_HEADER = "# index\tkind\tseed\tparams\tclean\tdegraded"


@dataclass
class ManifestRecord:
    index: int
    kind: str
    seed: int
    params: str
    clean: str
    degraded: str


def write_dataset(pairs: list[ImagePair], out_dir) -> Path:
    """Write ``clean_XXXX.ppm`` / ``degraded_XXXX.ppm`` and ``manifest.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for i, pair in enumerate(pairs):
        clean, deg = f"clean_{i:04d}.ppm", f"degraded_{i:04d}.ppm"
        write_ppm(out / clean, pair.clean)
        write_ppm(out / deg, pair.degraded)
        params = ";".join(f"{k}:{v}" for k, v in sorted(pair.params.items())) or "-"
        lines.append(f"{i}\t{pair.kind}\t{pair.seed}\t{params}\t{clean}\t{deg}")
    path = out / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"{path}:{n}: expected 6 tab-separated fields, got {len(parts)}")
        idx, kind, seed, params, clean, deg = parts
        records.append(ManifestRecord(int(idx), kind, int(seed), params, clean, deg))
    return records


def load_dataset(path) -> list[ImagePair]:
    """Load every pair named in a manifest (paths are relative to the manifest)."""
    path = Path(path)
    base = path if path.is_dir() else path.parent
    pairs = []
    for rec in read_manifest(path):
        pairs.append(ImagePair(read_ppm(base / rec.clean), read_ppm(base / rec.degraded),
                               rec.kind, {"summary": rec.params}, rec.seed))
    return pairs
