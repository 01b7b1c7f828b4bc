"""Command-line entry point: train, eval, upscale, cost, erf, bench, selftest.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import plotting
from .analysis import erf_map, multi_adds
from .attention import AttentionSpec, neighborhood_attention, window_attention_baseline
from .data import evaluate, load_dataset, load_png, save_png, self_ensemble
from .errors import ConfigurationError, ValidationError
from .model import (
    MATModel, ModelConfig, load_checkpoint, mat_forward, mat_forward_tiled, preset, read_checkpoint,
)
from .selftest import run_selftest
from .tensor import Tensor
from .training import TrainConfig, train_loop

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("matsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__} | {"preset"}
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_DATA_KEYS = {"train_dir", "val_dir", "out_dir", "cache_lr"}
SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}

DEFAULTS = {
    "model.preset": "tiny",
    "model.scale": 2,
    "train.lr0": 2e-4,
    "train.batch": 16,
    "train.patch": 64,
    "train.total_iters": 500_000,
    "train.milestones": [250_000, 400_000, 450_000, 475_000],
    "train.seed": 0,
    "train.log_every": 100,
    "train.ckpt_every": 5000,
    "data.train_dir": None,
    "data.val_dir": None,
    "data.out_dir": "runs/train",
    "data.cache_lr": True,
}

# train flags -> dotted config keys
_FLAG_KEYS = {
    "preset": "model.preset", "scale": "model.scale", "lr0": "train.lr0", "batch": "train.batch",
    "patch": "train.patch", "total_iters": "train.total_iters", "milestones": "train.milestones",
    "seed": "train.seed", "log_every": "train.log_every", "ckpt_every": "train.ckpt_every",
    "train_dir": "data.train_dir", "val_dir": "data.val_dir", "out_dir": "data.out_dir",
}


@dataclass
class Resolved:
    values: dict
    source: dict

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def render(self) -> str:
        width = max(len(k) for k in self.values)
        lines = ["resolved configuration:"]
        for k in sorted(self.values):
            lines.append(f"  {k:<{width}} = {json.dumps(self.values[k])}  [{self.source[k]}]")
        return "\n".join(lines)


def flatten_config(doc: dict) -> dict:
    """Check a parsed config file against the known key set and flatten it."""
    flat = {}
    for sec, body in doc.items():
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{sec}]; expected one of {sorted(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigurationError(f"[{sec}] must be a table")
        for key, val in body.items():
            if key not in SECTIONS[sec]:
                raise ConfigurationError(f"unknown key {sec}.{key}")
            flat[f"{sec}.{key}"] = val
    return flat


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigurationError(f"{path}: {err}") from err
    return flatten_config(doc)


def parse_override(text: str) -> tuple[str, Any]:
    """'train.lr0=1e-3' -> ('train.lr0', 0.001); values use TOML syntax, bare words are strings."""
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    sec, _, name = key.partition(".")
    if sec not in SECTIONS or name not in SECTIONS[sec]:
        raise ConfigurationError(f"unknown key {key}")
    try:
        val = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        val = raw
    return key, val


def resolve_config(file_values: dict, flag_values: dict) -> Resolved:
    """Precedence: flag > file > default."""
    values, source = {}, {}
    for layer, tag in ((DEFAULTS, "default"), (file_values, "file"), (flag_values, "flag")):
        for k, v in layer.items():
            if v is None and tag != "default":
                continue
            values[k], source[k] = v, tag
    return Resolved(values, source)


def build_model_config(res: Resolved) -> ModelConfig:
    sec = res.section("model")
    base = preset(sec.pop("preset", "tiny"), sec.pop("scale", None))
    return base.replace(**sec) if sec else base


def build_train_config(res: Resolved) -> TrainConfig:
    return TrainConfig.from_dict(res.section("train"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _parse_res(text: str) -> tuple[int, int]:
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"resolution must look like 1280x720, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise ValidationError(f"resolution must be positive, got {text!r}")
    return w, h


def _forward(model: MATModel, tile: bool):
    return (lambda x: mat_forward_tiled(x, model)) if tile else (lambda x: mat_forward(x, model))


def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {_FLAG_KEYS[k]: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None}
    for item in args.set or []:
        k, v = parse_override(item)
        flags[k] = v
    res = resolve_config(file_values, flags)
    print(res.render(), flush=True)
    mcfg = build_model_config(res)
    tcfg = build_train_config(res)
    if not res.get("data.train_dir"):
        raise ValidationError("data.train_dir is required (config file or --train-dir)")
    out_dir = Path(res.get("data.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    train = load_dataset(res.get("data.train_dir"), mcfg.scale, cache=bool(res.get("data.cache_lr")))
    model = MATModel.create(mcfg, seed=tcfg.seed)
    print(f"model: {mcfg.variant} x{mcfg.scale}, {model.num_params():,} parameters; "
          f"{len(train)} training images", flush=True)
    (out_dir / "config.json").write_text(json.dumps(
        {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "source": res.source}, indent=2))
    with open(out_dir / "train.log", "a") as log_file:
        result = train_loop(model, tcfg, train, out_dir, resume=args.resume, log_file=log_file,
                            on_log=lambda line: print(line, flush=True))
    start = result.start_iter
    plotting.loss_curve(np.arange(start + 1, start + len(result.losses) + 1), result.losses,
                        out_dir / "loss.png")
    print(f"checkpoint: {result.checkpoint}")
    if res.get("data.val_dir"):
        val = load_dataset(res.get("data.val_dir"), mcfg.scale, cache=bool(res.get("data.cache_lr")))
        report = evaluate(_forward(result.model, False), val)
        print(report.table())
        (out_dir / "eval.csv").write_text(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    pairs = load_dataset(args.data, model.config.scale, cache=not args.no_cache)
    report = evaluate(_forward(model, args.tile), pairs, ensemble=args.ensemble)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    else:
        print()
        print(report.to_csv(), end="")
    if args.plot:
        plotting.eval_bars(report, args.plot)
    return 0


def cmd_upscale(args) -> int:
    model = load_checkpoint(args.ckpt)
    lr = load_png(args.inp)
    fwd = _forward(model, args.tile)
    sr = self_ensemble(fwd, lr) if args.ensemble else fwd(lr)
    save_png(sr, args.out)
    print(f"{args.inp} {lr.shape[3]}x{lr.shape[2]} -> {args.out} {sr.shape[3]}x{sr.shape[2]}")
    return 0


def cmd_cost(args) -> int:
    cfg = preset(args.preset, args.scale)
    w, h = _parse_res(args.res)
    report = multi_adds(cfg, h, w, fine=args.fine)
    print(f"{cfg.variant} x{cfg.scale}")
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.plot:
        plotting.cost_breakdown(report, args.plot)
    return 0


def cmd_erf(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    elif args.preset:
        model = MATModel.create(preset(args.preset, args.scale), seed=args.seed)
    else:
        raise ValidationError("erf needs --ckpt or --preset")
    probe = load_png(args.inp)
    res = erf_map(model, probe, window=args.window)
    save_png(Tensor(res.heat[None, None]), args.out)
    if args.figure:
        plotting.erf_figure(res.heat, res.areas, args.figure)
    print(json.dumps(res.summary(), indent=2))
    return 0


def _bench_once(kind: str, k: int, dilation: int, w: int, h: int, channels: int, heads: int,
                rng: np.random.Generator, window: int) -> float:
    x = Tensor(rng.standard_normal((1, channels, h, w)).astype(np.float32))
    if kind == "wsa":
        qkv = Tensor(rng.standard_normal((3 * channels, channels, 1, 1)) * 0.1)
        proj = (Tensor(rng.standard_normal((channels, channels, 1, 1)) * 0.1), None)
        t0 = time.perf_counter()
        window_attention_baseline(x, qkv, proj, heads, window=window, shifted=True)
        return time.perf_counter() - t0
    dil = 1 if kind == "ra" else dilation
    q, kk, v = (Tensor(rng.standard_normal(x.shape).astype(np.float32)) for _ in range(3))
    t0 = time.perf_counter()
    neighborhood_attention(q, kk, v, k, dil, heads)
    return time.perf_counter() - t0


def cmd_bench(args) -> int:
    w, h = _parse_res(args.res)
    rng = np.random.default_rng(args.seed)
    dilations = [int(d) for d in str(args.dilation).split(",")]
    kinds = args.attn.split(",")
    rows = []
    for kind in kinds:
        if kind not in ("ra", "sga", "wsa"):
            raise ValidationError(f"unknown attention kind {kind!r}; use ra, sga or wsa")
        for dil in (dilations if kind == "sga" else [1]):
            if kind != "wsa":
                spec = AttentionSpec(args.k, args.heads, args.channels // args.heads, dil)
                spec.resolve(h, w)
            _bench_once(kind, args.k, dil, w, h, args.channels, args.heads, rng, args.window)  # warm-up
            best = min(_bench_once(kind, args.k, dil, w, h, args.channels, args.heads, rng, args.window)
                       for _ in range(args.repeat))
            label = f"{kind} k={args.k}" + (f" d={dil}" if kind == "sga" else "") + (
                f" win={args.window}" if kind == "wsa" else "")
            rows.append({"label": label, "ms": best * 1e3, "mpix_per_s": w * h / best / 1e6})
    print(f"forward throughput, {args.channels} channels, {args.heads} heads, {w}x{h}, best of {args.repeat}")
    print(f"{'config':<24}{'ms':>10}{'Mpix/s':>10}")
    for r in rows:
        print(f"{r['label']:<24}{r['ms']:>10.2f}{r['mpix_per_s']:>10.3f}")
    if args.plot:
        plotting.bench_figure(rows, args.plot)
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(seed=args.seed, only=args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<18} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 0 if not failed else 2


def cmd_inspect(args) -> int:
    ck = read_checkpoint(args.ckpt)
    print(json.dumps({"step": ck.step, "config": ck.config.to_dict(), "tensors": len(ck.arrays)}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="matsr", description="Multi-range attention super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file and/or flags")
    t.add_argument("--config", help="TOML file with [model], [train], [data] tables")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--preset", choices=["light", "classical", "tiny"])
    t.add_argument("--scale", type=int, choices=[2, 3, 4])
    t.add_argument("--lr0", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--total-iters", dest="total_iters", type=int)
    t.add_argument("--milestones", type=lambda s: [int(v) for v in s.split(",") if v])
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    t.add_argument("--train-dir", dest="train_dir")
    t.add_argument("--val-dir", dest="val_dir")
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a directory of HR PNGs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ensemble", action="store_true", help="also report 8-way self-ensemble scores")
    e.add_argument("--tile", action="store_true")
    e.add_argument("--no-cache", action="store_true", help="do not write <name>_x<s>.png LR files")
    e.add_argument("--csv")
    e.add_argument("--plot")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("upscale", help="super-resolve one PNG")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--tile", action="store_true", help="64px tiles with 16px overlap")
    u.add_argument("--ensemble", action="store_true")
    u.add_argument("--seed", type=int, default=0)
    u.set_defaults(func=cmd_upscale)

    c = sub.add_parser("cost", help="parameter and Multi-Adds table")
    c.add_argument("--preset", choices=["light", "classical", "tiny"], default="light")
    c.add_argument("--scale", type=int, choices=[2, 3, 4], default=4)
    c.add_argument("--res", default="1280x720", help="output resolution WxH")
    c.add_argument("--fine", action="store_true", help="break RMAGs down into LAB/MAB/conv")
    c.add_argument("--json")
    c.add_argument("--plot")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cost)

    r = sub.add_parser("erf", help="effective receptive field of the central output pixels")
    r.add_argument("--ckpt")
    r.add_argument("--preset", choices=["light", "classical", "tiny"], help="random weights instead of a checkpoint")
    r.add_argument("--scale", type=int, choices=[2, 3, 4])
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True, help="grayscale PNG of the normalised map")
    r.add_argument("--figure", help="annotated matplotlib rendering")
    r.add_argument("--window", type=int, default=2)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_erf)

    b = sub.add_parser("bench", help="attention kernel throughput")
    b.add_argument("--attn", default="ra,sga,wsa", help="comma list of ra, sga, wsa")
    b.add_argument("--k", type=int, default=7)
    b.add_argument("--dilation", default="1,2,4", help="comma list (sga only)")
    b.add_argument("--res", default="64x64")
    b.add_argument("--channels", type=int, default=20)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--window", type=int, default=8, help="wsa window size")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--plot")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="run the built-in oracle and gradient suites")
    s.add_argument("--only", nargs="*")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("ckpt")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        if args.verbose:
            raise
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
