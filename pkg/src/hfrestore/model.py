"""Encoder-decoder restoration network and its binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import CheckpointError, ConfigurationError, ShapeError
from .params import ParameterStore
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 2, 2)
    heads: int = 2
    bins: int = 16
    bin_frequency: int = 16
    expansion: int = 2
    image_size: int = 64
    seed: int = 0
    # ablation switches
    use_histogram: bool = True
    use_task_path: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        self.validate()

    def validate(self) -> None:
        w, nb = self.stage_widths, self.blocks_per_stage
        problems = []
        if len(w) != 4 or len(nb) != 4:
            problems.append("stage_widths and blocks_per_stage need exactly 4 entries")
        else:
            if any(w[i + 1] != 2 * w[i] for i in range(3)):
                problems.append(f"stage widths must double stage to stage, got {w}")
            if any(c % self.heads for c in w):
                problems.append(f"every stage width must be divisible by heads={self.heads}")
            if any(c % 2 for c in w):
                problems.append("stage widths must be even (dynamic-range channel split)")
            if any(b < 0 for b in nb):
                problems.append("blocks_per_stage must be non-negative")
        if self.image_size < 8 or self.image_size % 8:
            problems.append(f"image_size {self.image_size} must be divisible by 8")
        if self.image_size & (self.image_size - 1):
            problems.append(f"image_size {self.image_size} must be a power of two (FFT loss)")
        if self.heads < 1 or self.bins < 1 or self.bin_frequency < 1 or self.expansion < 1:
            problems.append("heads, bins, bin_frequency and expansion must be positive")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown NetConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    cfg: NetConfig
    store: ParameterStore
    p: dict = field(default_factory=dict)

    @property
    def hist(self) -> B.HistConfig:
        return B.HistConfig(self.cfg.bins, self.cfg.bin_frequency)

    def attn(self, level: int) -> B.AttentionConfig:
        return B.AttentionConfig(self.cfg.heads, self.cfg.stage_widths[level])

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def build(cfg: NetConfig, seed: Optional[int] = None) -> Model:
    """Create a model with deterministic parameters (normal(0, 0.02) weights, zero biases and gates)."""
    cfg.validate()
    store = ParameterStore(cfg.seed if seed is None else seed)
    w = cfg.stage_widths
    mcfg = B.MsffConfig(cfg.expansion)
    p: dict = {}
    p["embed_w"] = store.normal("embed.w", (w[0], 3, 3, 3))
    p["embed_b"] = store.zeros("embed.b", (w[0],))
    for s in range(4):
        size = cfg.image_size >> s
        if cfg.use_histogram:
            p[f"enc{s}"] = [B.init_htb(store, f"enc{s}.htb{j}", w[s], mcfg)
                            for j in range(cfg.blocks_per_stage[s])]
        if s < 3:
            p[f"down{s}_w"] = store.normal(f"down{s}.w", (w[s + 1], w[s], 3, 3))
            p[f"down{s}_b"] = store.zeros(f"down{s}.b", (w[s + 1],))
            if cfg.use_task_path:
                p[f"tipb{s}"] = B.init_tipb(store, f"tipb{s}", w[s], (size // 2) ** 2, cfg.expansion)
                tp: dict = {}
                B._init_linear(store, f"taskproj{s}", "proj", w[s + 1], w[s], tp)
                p[f"taskproj{s}"] = tp
                p[f"spfi{s + 1}"] = B.init_spfi(store, f"spfi{s + 1}", w[s + 1])
    if cfg.use_task_path:
        p["tqb"] = B.init_task_query(store, "tqb", (w[0], w[1], w[2]))
        # decoder levels at stage-3 and stage-2 resolution consume the task query
        p["tsg2"] = B.init_tsg(store, "tsg2", w[2], w[2], cfg.expansion)
        p["tsg1"] = B.init_tsg(store, "tsg1", w[1], w[2], cfg.expansion)
    for s in (2, 1, 0):
        p[f"up{s}_w"] = store.normal(f"up{s}.w", (w[s], w[s + 1]))
        p[f"up{s}_b"] = store.zeros(f"up{s}.b", (w[s],))
        p[f"mix{s}"] = store.zeros(f"mix{s}.theta", (1,))
    p["out_w"] = store.normal("out.w", (3, w[0], 3, 3))
    p["out_b"] = store.zeros("out.b", (3,))
    return Model(cfg, store, p)


def forward(model: Model, x: Tensor, return_aux: bool = False):
    """Restore a [3, H, W] image.  The output is not clamped."""
    cfg, p = model.cfg, model.p
    if x.shape != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected input of shape {(3, cfg.image_size, cfg.image_size)}, got {x.shape}")
    hcfg = model.hist
    f = T.conv2d(x, p["embed_w"], p["embed_b"])
    skips, tasks = [], []
    for s in range(4):
        acfg = model.attn(s)
        for bp in p.get(f"enc{s}", []):
            f = B.htb_forward(f, bp, hcfg, acfg)
        skips.append(f)
        if s == 3:
            break
        t = B.tipb_forward(f, p[f"tipb{s}"], acfg) if cfg.use_task_path else None
        tasks.append(t)
        f = T.conv2d(f, p[f"down{s}_w"], p[f"down{s}_b"], stride=2)
        if t is not None:
            t = B.pointwise(T.bilinear_resize(t, 0.5), p[f"taskproj{s}"], "proj")
            f = B.spfi_fuse(f, t, p[f"spfi{s + 1}"])
    qtask = None
    if cfg.use_task_path:
        qtask = B.task_query_build(B.TaskFeaturePyramid(*tasks), p["tqb"])
    for s in (2, 1, 0):
        f = B.pointwise(T.bilinear_resize(f, 2), p, f"up{s}")
        f = B.adaptive_mixup(skips[s], f, p[f"mix{s}"])
        if qtask is not None and s in (2, 1):
            q = qtask if s == 2 else T.bilinear_resize(qtask, 2)
            f = B.tsg_forward(f, q, p[f"tsg{s}"], model.attn(s))
    out = T.conv2d(f, p["out_w"], p["out_b"]) + x
    if return_aux:
        return out, {"tasks": tasks, "qtask": qtask, "skips": skips}
    return out


def restore(model: Model, image: np.ndarray) -> np.ndarray:
    """Inference helper: numpy in, clamped numpy out."""
    return np.clip(forward(model, Tensor(image)).data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   "HFRM" | u32 version | u32 len | meta JSON (utf-8) | u32 count | records
#   record: u32 name_len | name | u32 rank | u32 dims[rank] | f64 payload
# all little-endian.

MAGIC = b"HFRM"
VERSION = 1


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    parts += [_pack_record(k, v) for k, v in arrays.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}, "
                                  f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic at offset 0: not an HFRM checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4 (expected {VERSION})")
    n = r.u32("config length")
    start = r.pos
    try:
        meta = json.loads(r.take(n, "config text").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unparseable config text at offset {start}: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32("record count")):
        at = r.pos
        name_b = r.take(r.u32("name length"), "name")
        try:
            name = name_b.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad parameter name at offset {at}") from exc
        rank = r.u32("rank")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name!r} at offset {at}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * count, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return meta, arrays


def save(model: Model, path, extra_meta: Optional[dict] = None,
         extra_arrays: Optional[dict[str, np.ndarray]] = None) -> None:
    meta = {"net": model.cfg.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{k}": t.data for k, t in model.store.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_checkpoint(path, meta, arrays)


def load(path, cfg: Optional[NetConfig] = None) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint.

    If ``cfg`` is given it must match the stored configuration.  Returns the
    model, the metadata and any non-parameter arrays (optimizer moments).
    """
    meta, arrays = read_checkpoint(path)
    stored = NetConfig.from_dict(meta["net"])
    if cfg is not None and cfg != stored:
        diff = {k: (v, getattr(stored, k)) for k, v in cfg.to_dict().items()
                if stored.to_dict()[k] != v}
        raise CheckpointError(f"NetConfig mismatch (expected, checkpoint): {diff}")
    model = build(stored)
    load_into(model, arrays)
    rest = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return model, meta, rest


def load_into(model: Model, arrays: dict[str, np.ndarray]) -> None:
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.store.load_state_dict(params)
