"""PNG figures written next to the CSV/JSON results of each subcommand."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

WIDTH = 5.0
HEIGHT = WIDTH * (math.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _new():
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(WIDTH, HEIGHT))


def loss_curve(path, epochs: Sequence[int], losses: Sequence[float], label: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _new()
        ax.plot(epochs, losses, marker="o", ms=2, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def coverage_curve(path, series: dict[str, tuple[Sequence[int], Sequence[float]]], d: int) -> Path:
    """Coverage (rank / d^2) against number of trainable parameters, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = _new()
        for name, (params, coverage) in series.items():
            ax.plot(params, coverage, marker="o", ms=3, label=name)
        ax.set_xscale("log", base=2)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("trainable parameters")
        ax.set_ylabel(f"rank / {d * d}")
        ax.legend(frameon=False)
        return _save(fig, path)


def timing_bars(path, timings: dict[str, float]) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _new()
        names = list(timings)
        ax.bar(names, [timings[n] for n in names], color=["C0", "C1", "C2"][: len(names)])
        ax.set_ylabel("ms / batch")
        ax.set_yscale("log")
        return _save(fig, path)


def metric_lines(path, xs: Sequence, series: dict[str, Sequence[float]], xlabel: str, ylabel: str, log_x: bool = False) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _new()
        for name, ys in series.items():
            ax.plot(xs[: len(ys)], ys, marker="o", ms=3, label=name)
        if log_x:
            ax.set_xscale("log", base=2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)
