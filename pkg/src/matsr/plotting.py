"""Matplotlib figures written straight to files (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curve(iters: Sequence[int], losses: Sequence[float], path, title: str = "training L1") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iters, losses, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def erf_figure(heat: np.ndarray, areas: dict, path, title: str = "effective receptive field") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    im = ax.imshow(heat, cmap="magma", vmin=0.0, vmax=1.0)
    ax.contour(heat, levels=sorted(areas), colors=["#6ec6ff", "#ffffff", "#7CFC00"][:len(areas)],
               linewidths=0.8)
    label = ", ".join(f">{t:g}: {a:.1%}" for t, a in sorted(areas.items()))
    ax.set_title(f"{title}\n{label}", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def cost_breakdown(report, path) -> Path:
    names = [e.name for e in report.entries]
    params = np.array([e.params for e in report.entries]) / 1e3
    macs = np.array([e.multi_adds for e in report.entries]) / 1e9
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.barh(names, params, color="#4C72B0")
    a1.set_xlabel("parameters (K)")
    a1.invert_yaxis()
    a2.barh(names, macs, color="#DD8452")
    a2.set_xlabel("multi-adds (G)")
    a2.invert_yaxis()
    fig.suptitle(f"total {report.total_params / 1e3:.1f}K params, {report.total_multi_adds / 1e9:.2f}G multi-adds")
    return _save(fig, path)


def eval_bars(report, path) -> Path:
    names = [s.name for s in report.scores]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(names) + 2), 3.5))
    width = 0.4 if not report.has_ensemble else 0.27
    ax.bar(x - width, [s.bicubic_psnr_db for s in report.scores], width, label="bicubic")
    ax.bar(x, [s.psnr_db for s in report.scores], width, label="model")
    if report.has_ensemble:
        ax.bar(x + width, [s.ensemble_psnr_db for s in report.scores], width, label="model + ensemble")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("Y-PSNR (dB)")
    lo = min(s.bicubic_psnr_db for s in report.scores)
    ax.set_ylim(lo - 2, None)
    ax.legend(fontsize=8)
    return _save(fig, path)


def bench_figure(rows: Sequence[dict], path) -> Path:
    """Throughput per configuration; rows carry 'label' and 'mpix_per_s'."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["label"] for r in rows], [r["mpix_per_s"] for r in rows], color="#55A868")
    ax.set_ylabel("megapixels / s")
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
