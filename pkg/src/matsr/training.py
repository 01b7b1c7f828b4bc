"""L1 objective, Adam, step schedule, patch sampling and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .data import ImagePair, dihedral
from .errors import ConfigurationError, NonFiniteError, ValidationError
from .model import MATModel, mat_forward, read_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, result

log = logging.getLogger(__name__)

DEFAULT_MILESTONES = (250_000, 400_000, 450_000, 475_000)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    milestones: tuple = DEFAULT_MILESTONES
    total_iters: int = 500_000
    batch: int = 16
    patch: int = 64
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        self.validate()

    def validate(self) -> None:
        ms = self.milestones
        if any(b >= a for a, b in zip(ms[1:], ms[:-1])):
            raise ConfigurationError(f"milestones must be strictly increasing, got {list(ms)}")
        if ms and ms[-1] >= self.total_iters:
            raise ConfigurationError(f"milestone {ms[-1]} is not below total_iters={self.total_iters}")
        if self.total_iters < 1 or self.batch < 1 or self.patch < 1:
            raise ConfigurationError("total_iters, batch and patch must be positive")
        if self.lr0 <= 0 or self.eps <= 0 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("need lr0 > 0, eps > 0 and betas in [0, 1)")
        if self.log_every < 1 or self.ckpt_every < 1:
            raise ConfigurationError("log_every and ckpt_every must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["milestones"] = list(self.betas), list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """lr0 halved once per milestone already reached."""
    return cfg.lr0 * 0.5 ** sum(1 for m in cfg.milestones if m <= it)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    if pred.shape != target.shape:
        raise ValidationError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def backward(g):
        gs = np.sign(diff) * (g / n)
        return gs.astype(pred.dtype, copy=False), (-gs).astype(target.dtype, copy=False)

    return result(out, (pred, target), backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas: Sequence[float] = (0.9, 0.99), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p.data = p.data - step
    return state


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def usable_pairs(dataset: Sequence[ImagePair], patch: int) -> list[ImagePair]:
    keep = []
    for pair in dataset:
        h, w = pair.lr.shape[-2:]
        if h < patch or w < patch:
            log.warning("skipping %s: LR %dx%d smaller than patch %d", pair.name, h, w, patch)
        else:
            keep.append(pair)
    if not keep:
        raise ValidationError(f"no training image is at least {patch}x{patch}")
    return keep


def sample_batch(dataset: Sequence[ImagePair], patch: int, scale: int, rng: np.random.Generator,
                 batch: int = 1) -> tuple[Tensor, Tensor, list[int]]:
    """Aligned random crops with one dihedral transform per pair.

    Draw order per sample: image index, crop x, crop y, transform index.
    Returns (lr, hr, transform ids).
    """
    pairs = usable_pairs(dataset, patch)
    lrs, hrs, ts = [], [], []
    for _ in range(batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        h, w = pair.lr.shape[-2:]
        x = int(rng.integers(w - patch + 1))
        y = int(rng.integers(h - patch + 1))
        t = int(rng.integers(8))
        lr = pair.lr.data[0, :, y:y + patch, x:x + patch]
        hr = pair.hr.data[0, :, y * scale:(y + patch) * scale, x * scale:(x + patch) * scale]
        lrs.append(dihedral(lr, t))
        hrs.append(dihedral(hr, t))
        ts.append(t)
    return Tensor(np.stack(lrs)), Tensor(np.stack(hrs)), ts


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def format_lr(lr: float) -> str:
    """2e-4 -> '2.0e-4' (one decimal, unpadded exponent)."""
    mant, exp = f"{lr:.1e}".split("e")
    return f"{mant}e{int(exp)}"


def log_line(it: int, lr: float, loss: float) -> str:
    return f"iter={it} lr={format_lr(lr)} l1={loss:.5f}"


def _state_arrays(state: AdamState) -> dict:
    out = {f"optim.m.{k}": v for k, v in state.m.items()}
    out.update({f"optim.v.{k}": v for k, v in state.v.items()})
    return out


@dataclass
class TrainResult:
    model: MATModel
    state: AdamState
    losses: list          # per-iteration L1, index i is iteration start_iter + i
    log_lines: list
    start_iter: int
    checkpoint: Path | None


def train_step(model: MATModel, state: AdamState, cfg: TrainConfig, dataset: Sequence[ImagePair],
               it: int) -> float:
    """One optimisation step; the batch depends only on (seed, it)."""
    rng = np.random.default_rng([cfg.seed, it])
    lr_img, hr_img, _ = sample_batch(dataset, cfg.patch, model.config.scale, rng, cfg.batch)
    names = list(model.params)
    srcs = [model.params[n] for n in names]
    for p in srcs:
        p.requires_grad = True
    with Tape() as tape:
        loss = l1_loss(mat_forward(lr_img, model), hr_img)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at iteration {it}")
    grads = dict(zip(names, tape.gradient(loss, srcs)))
    adam_step(model.params, grads, state, lr_at(it, cfg), cfg.betas, cfg.eps)
    return value


def resume_state(path, model: MATModel) -> tuple[MATModel, AdamState, int]:
    """Restore parameters, Adam moments and the step counter from a checkpoint."""
    ck = read_checkpoint(path)
    if ck.config != model.config:
        raise ConfigurationError(f"{path}: checkpoint config differs from the requested model config")
    params = {}
    for name, p in model.params.items():
        if name not in ck.arrays:
            raise ConfigurationError(f"{path}: missing parameter {name!r}")
        params[name] = Tensor(ck.arrays[name], dtype=p.dtype)
    state = AdamState.zeros_like(params)
    for name in params:
        m, v = ck.arrays.get(f"optim.m.{name}"), ck.arrays.get(f"optim.v.{name}")
        if m is not None and v is not None:
            state.m[name], state.v[name] = m.copy(), v.copy()
    state.t = int(ck.meta.get("adam_t", ck.step))
    return MATModel(model.config, params), state, int(ck.step)


def train_loop(model: MATModel, cfg: TrainConfig, dataset: Sequence[ImagePair], checkpoint_dir=None,
               resume=None, log_file: TextIO | None = None, on_log: Callable[[str], None] | None = None,
               stop_at: int | None = None) -> TrainResult:
    """Train from iteration 0 (or a resumed step) up to ``cfg.total_iters``.

    Logs every ``log_every`` iterations, checkpoints every ``ckpt_every``
    iterations and at the end.  A non-finite loss writes ``abort.ckpt`` with
    the last good weights and re-raises.  ``stop_at`` ends early (for tests).
    """
    if dataset and dataset[0].scale != model.config.scale:
        raise ConfigurationError(f"dataset scale x{dataset[0].scale} differs from model x{model.config.scale}")
    usable_pairs(dataset, cfg.patch)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume is not None:
        model, state, start = resume_state(resume, model)
    else:
        model, state, start = model.copy(), AdamState.zeros_like(model.params), 0
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    losses, lines, window = [], [], []
    last_ck = None

    def checkpoint(name: str, step: int, m: MATModel, s: AdamState) -> Path:
        path = ckdir / name
        save_checkpoint(m, path, step=step, extra=_state_arrays(s),
                        meta={"adam_t": s.t, "train": cfg.to_dict()})
        return path

    for it in range(start, end):
        backup = None
        if ckdir is not None:
            backup = (model.copy(), AdamState({k: v.copy() for k, v in state.m.items()},
                                              {k: v.copy() for k, v in state.v.items()}, state.t))
        try:
            value = train_step(model, state, cfg, dataset, it)
        except NonFiniteError:
            if backup is not None:
                path = checkpoint("abort.ckpt", it, *backup)
                log.error("non-finite value at iteration %d; last good weights in %s", it, path)
            raise
        losses.append(value)
        window.append(value)
        done = it + 1
        if done % cfg.log_every == 0 or done == end:
            line = log_line(done, lr_at(it, cfg), float(np.mean(window)))
            window = []
            lines.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if on_log is not None:
                on_log(line)
        if ckdir is not None and (done % cfg.ckpt_every == 0 or done == end):
            last_ck = checkpoint(f"iter_{done:07d}.ckpt", done, model, state)
    return TrainResult(model, state, losses, lines, start, last_ck)
