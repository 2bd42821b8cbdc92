"""SVG figures: root loci, participation bars, compass mode shapes, traces.

Output is byte-reproducible: the SVG hash salt is fixed and the date
metadata is dropped.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "coupling-modes", "svg.fonttype": "path", "figure.dpi": 100}


def _save(fig, path):
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def root_locus_svg(result, path, min_freq_hz: float = 1.0, coupling_only: bool = False) -> None:
    """Eigenvalue trajectories of a sweep, darker markers at larger parameter values."""
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 5))
        grid = np.array(result.spec.grid)
        lo, hi = grid.min(), grid.max()
        for t in result.trajectories:
            f = t.freq(result)
            if f.max() < min_freq_hz or (coupling_only and not t.is_coupling(result)):
                continue
            lam = t.lambdas(result)
            vals = t.values(result)
            shade = (vals - lo) / (hi - lo) if hi > lo else np.ones_like(vals)
            ax.plot(lam.real, lam.imag / (2 * math.pi), "-", color="0.6", lw=0.8)
            ax.scatter(lam.real, lam.imag / (2 * math.pi), c=shade, cmap="viridis", vmin=0, vmax=1, s=14,
                       zorder=3)
        ax.axvline(0.0, color="k", lw=0.6)
        ax.set_xlabel("real part (1/s)")
        ax.set_ylabel("frequency (Hz)")
        ax.set_title(f"{result.spec.path}: {lo:g} to {hi:g}")
        ax.grid(True, lw=0.3)
        fig.tight_layout()
    _save(fig, path)


def participation_svg(report, path, top: int = 12) -> None:
    items = sorted(report.participations.items(), key=lambda kv: -kv[1])[:top]
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(range(len(items)), [100 * v for _, v in items], color="0.35")
        ax.set_xticks(range(len(items)))
        ax.set_xticklabels([k for k, _ in items], rotation=60, ha="right", fontsize=8)
        ax.set_ylabel("participation (%)")
        lam = report.mode.lam
        ax.set_title(f"{lam.real:.1f} {lam.imag:+.1f}j  ({report.mode.freq_hz:.0f} Hz, "
                     f"{100 * report.mode.damping:.1f} %)")
        fig.tight_layout()
    _save(fig, path)


def compass_svg(shapes: dict, path, title: str = "") -> None:
    """Arrows for complex mode shapes, scaled to the largest magnitude."""
    with matplotlib.rc_context(_RC):
        fig = plt.figure(figsize=(4.5, 4.5))
        ax = fig.add_subplot(projection="polar")
        top = max((abs(v) for v in shapes.values()), default=1.0) or 1.0
        for k, (name, v) in enumerate(shapes.items()):
            ax.annotate("", xy=(np.angle(v), abs(v) / top), xytext=(0, 0),
                        arrowprops={"arrowstyle": "->", "color": f"C{k}", "lw": 1.5})
            ax.plot([], [], color=f"C{k}", label=name)
        ax.set_rmax(1.05)
        ax.legend(loc="lower left", bbox_to_anchor=(-0.1, -0.12), fontsize=8, ncol=len(shapes))
        if title:
            ax.set_title(title, fontsize=9)
        fig.tight_layout()
    _save(fig, path)


def trace_svg(trace, path, channels=None) -> None:
    channels = list(channels or trace.channels)
    with matplotlib.rc_context(_RC):
        fig, axes = plt.subplots(len(channels), 1, figsize=(7, 1.8 * len(channels)), sharex=True,
                                 squeeze=False)
        for ax, c in zip(axes[:, 0], channels):
            ax.plot(trace.t * 1e3, trace[c], lw=0.8)
            ax.set_ylabel(c, fontsize=8)
            ax.grid(True, lw=0.3)
        axes[-1, 0].set_xlabel("time (ms)")
        fig.tight_layout()
    _save(fig, path)
