"""Adam, the step learning-rate schedule, the training loop and evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .errors import CheckpointError, ConfigurationError, NumericError
from .params import ParameterStore
from .weather import ImagePair

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 60
    batch_size: int = 2
    seed: int = 0
    lam: float = 0.04
    beta: float = 0.004
    # fractions of the run after which the rate is halved
    milestones: tuple = (2 / 3, 5 / 6)
    net: M.NetConfig = field(default_factory=M.NetConfig)

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", M.NetConfig.from_dict(self.net))
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("learning_rate, epochs and batch_size must be positive")
        if self.lam < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be non-negative")

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lam, self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def milestone_epochs(cfg: TrainConfig) -> list[int]:
    return [int(math.floor(f * cfg.epochs + 1e-9)) for f in cfg.milestones]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Rate used during 1-indexed ``epoch``: halved once per milestone already passed.

    A milestone that floors to epoch 0 (very short runs) never fires.
    """
    passed = sum(1 for m in milestone_epochs(cfg) if 1 <= m < epoch)
    return cfg.learning_rate * 0.5 ** passed


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "AdamState":
        m = {k[len("adam.m/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam.v/")}
        return cls(m, v, t)


def adam_step(store: ParameterStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter, in name order.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name in sorted(store.names()):
        g = store[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name in sorted(store.names()):
        p = store[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def format_log(epoch: int, lr: float, terms: dict) -> str:
    return (f"epoch={epoch} lr={lr:.10g} total={terms['total']!r} l1={terms['l1']!r} "
            f"perc={terms['perc']!r} freq={terms['freq']!r}")


def parse_log(line: str) -> dict:
    out = {}
    for part in line.split():
        k, v = part.split("=", 1)
        out[k] = int(v) if k == "epoch" else float(v)
    return out


class Trainer:
    """Owns a model, its optimizer state and the loss configuration."""

    def __init__(self, model: M.Model, cfg: TrainConfig,
                 extractor: Optional[L.PerceptualExtractor] = None, state: Optional[AdamState] = None):
        self.model = model
        self.cfg = cfg
        self.extractor = extractor or L.default_extractor()
        self.state = state or AdamState()
        self.epoch = 0

    def sample_terms(self, degraded: np.ndarray, clean: np.ndarray, scale: float = 1.0) -> dict:
        """Forward and backward one pair; gradients (times ``scale``) accumulate on parameters."""
        terms: dict = {}
        with T.Tape() as tape:
            pred = M.forward(self.model, T.Tensor(degraded))
            loss = L.total_loss(pred, clean, self.cfg.weights, self.extractor, terms)
            bad = [k for k, v in terms.items() if not math.isfinite(v)]
            if bad or not math.isfinite(float(loss.data)):
                raise NumericError(f"non-finite loss term(s) {bad or ['total']}: {terms}")
            tape.backward(loss * scale)
        terms["total"] = float(loss.data)
        return terms

    def train_step(self, batch: Sequence[ImagePair], lr: float) -> dict:
        self.model.store.zero_grad()
        n = len(batch)
        acc = {"total": 0.0, "l1": 0.0, "perc": 0.0, "freq": 0.0}
        for pair in batch:
            terms = self.sample_terms(pair.degraded, pair.clean, 1.0 / n)
            for k in acc:
                acc[k] += terms[k] / n
        adam_step(self.model.store, self.state, lr)
        return acc

    def run_epoch(self, pairs: Sequence[ImagePair]) -> dict:
        self.epoch += 1
        lr = lr_at_epoch(self.cfg, self.epoch)
        order = np.random.default_rng([self.cfg.seed, self.epoch]).permutation(len(pairs))
        bs = self.cfg.batch_size
        sums = {"l1": 0.0, "perc": 0.0, "freq": 0.0}
        steps = 0
        for start in range(0, len(order), bs):
            step_terms = self.train_step([pairs[i] for i in order[start:start + bs]], lr)
            for k in sums:
                sums[k] += step_terms[k]
            steps += 1
        terms = {k: v / steps for k, v in sums.items()}
        terms["total"] = terms["l1"] + self.cfg.lam * terms["perc"] + self.cfg.beta * terms["freq"]
        terms["lr"] = lr
        return terms

    def save(self, path) -> None:
        M.save(self.model, path,
               extra_meta={"train": self.cfg.to_dict(), "epoch": self.epoch, "step": self.state.t},
               extra_arrays=self.state.to_arrays())

    @classmethod
    def resume(cls, path, cfg: Optional[TrainConfig] = None) -> "Trainer":
        model, meta, rest = M.load(path, cfg.net if cfg is not None else None)
        stored = TrainConfig.from_dict(meta["train"])
        if cfg is not None and cfg != stored:
            raise CheckpointError("training configuration differs from the checkpoint's")
        trainer = cls(model, stored, state=AdamState.from_arrays(rest, int(meta["step"])))
        trainer.epoch = int(meta["epoch"])
        return trainer


def train(cfg: TrainConfig, pairs: Sequence[ImagePair], out_dir=None, resume=None,
          log: Callable[[str], None] = print, trainer: Optional[Trainer] = None) -> Trainer:
    """Run (or continue) training to ``cfg.epochs``, checkpointing after every epoch."""
    if not pairs:
        raise ValueError("no samples to train on")
    if trainer is None:
        trainer = Trainer.resume(resume, cfg) if resume else Trainer(M.build(cfg.net), cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while trainer.epoch < cfg.epochs:
        terms = trainer.run_epoch(pairs)
        log(format_log(trainer.epoch, terms["lr"], terms))
        if out is not None:
            trainer.save(out / f"epoch_{trainer.epoch:04d}.hfrm")
            trainer.save(out / "last.hfrm")
    return trainer


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: M.Model, pairs: Sequence[ImagePair]) -> dict:
    """Mean PSNR/SSIM of restored and degraded images against clean, per kind and overall."""
    if not pairs:
        raise ValueError("no samples to evaluate")
    rows: dict[str, list] = {}
    for pair in pairs:
        restored = M.restore(model, pair.degraded)
        vals = (L.psnr(restored, pair.clean), L.ssim(restored, pair.clean),
                L.psnr(pair.degraded, pair.clean), L.ssim(pair.degraded, pair.clean))
        rows.setdefault(pair.kind, []).append(vals)
        rows.setdefault("overall", []).append(vals)
    report = {}
    for kind, vals in rows.items():
        arr = np.array(vals)
        report[kind] = {
            "n": len(vals),
            "psnr_restored": float(arr[:, 0].mean()),
            "ssim_restored": float(arr[:, 1].mean()),
            "psnr_degraded": float(arr[:, 2].mean()),
            "ssim_degraded": float(arr[:, 3].mean()),
        }
    return report


def format_report(report: dict) -> str:
    """Plain-text table followed by ``metric,name,value`` lines."""
    kinds = sorted(k for k in report if k != "overall") + ["overall"]
    head = f"{'kind':<10} {'n':>4} {'PSNR out':>9} {'SSIM out':>9} {'PSNR in':>9} {'SSIM in':>9}"
    lines = [head, "-" * len(head)]
    for k in kinds:
        r = report[k]
        lines.append(f"{k:<10} {r['n']:>4d} {r['psnr_restored']:>9.3f} {r['ssim_restored']:>9.4f} "
                     f"{r['psnr_degraded']:>9.3f} {r['ssim_degraded']:>9.4f}")
    lines.append("")
    for k in kinds:
        for metric in ("psnr_restored", "ssim_restored", "psnr_degraded", "ssim_degraded"):
            lines.append(f"metric,{k}.{metric},{report[k][metric]!r}")
    return "\n".join(lines)
