"""Static panels rendered from an ``episodes.csv`` produced by ``eval``."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANELS = ("orientation", "commands", "joints")
PANEL_COLUMNS = {
    "orientation": ["roll", "pitch"],
    "commands": ["target_vx", "target_vy", "target_wz", "command_vx", "command_vy", "command_wz"],
    "joints": ["q0"],
}


def read_episodes(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    cols = {}
    for name in rows[0]:
        vals = [r[name] for r in rows]
        try:
            cols[name] = np.array(vals, dtype=float)
        except ValueError:
            cols[name] = np.array(vals)
    return cols


def _check(cols, panel, path):
    missing = [c for c in PANEL_COLUMNS[panel] if c not in cols]
    if missing:
        raise ValueError(f"{path}: panel {panel!r} needs columns {missing}")


def render(csv_path, out_dir, panels=PANELS, seed=None, q_max=None) -> list[Path]:
    """One PNG per panel. ``seed`` picks the episode pair (default: the first seed in the file)."""
    cols = read_episodes(csv_path)
    for panel in panels:
        if panel not in PANEL_COLUMNS:
            raise ValueError(f"unknown panel {panel!r}; choose from {PANELS}")
        _check(cols, panel, csv_path)
    seed = cols["seed"][0] if seed is None else float(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = [m for m in ("policy", "planner") if np.any(cols["mode"] == m)]
    joints = sorted((c for c in cols if c.startswith("q") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    paths = []
    for panel in panels:
        fig, axes = plt.subplots(len(modes), 1, figsize=(7, 2.6 * len(modes)), sharex=True, squeeze=False)
        for ax, mode in zip(axes[:, 0], modes):
            sel = (cols["mode"] == mode) & (cols["seed"] == seed)
            t = cols["t"][sel]
            if panel == "orientation":
                ax.plot(t, cols["roll"][sel], label="roll")
                ax.plot(t, cols["pitch"][sel], label="pitch")
                ax.set_ylabel("rad")
            elif panel == "commands":
                for axis in ("vx", "vy", "wz"):
                    line, = ax.plot(t, cols[f"command_{axis}"][sel], label=f"chosen {axis}")
                    ax.plot(t, cols[f"target_{axis}"][sel], "--", color=line.get_color(), label=f"target {axis}")
            else:
                q = np.stack([cols[j][sel] for j in joints], axis=1)
                ax.fill_between(t, q.min(axis=1), q.max(axis=1), alpha=0.3, label="joint envelope")
                for j in joints:
                    ax.plot(t, cols[j][sel], lw=0.8)
                if q_max is not None:
                    ax.axhline(q_max, color="k", ls=":", label="limit")
                    ax.axhline(-q_max, color="k", ls=":")
                ax.set_ylabel("rad")
            ax.set_title(f"{panel}: {mode}")
            ax.legend(fontsize=7, loc="upper right")
        axes[-1, 0].set_xlabel("step")
        fig.tight_layout()
        path = out_dir / f"{panel}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
