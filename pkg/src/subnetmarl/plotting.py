"""Figures paired with their exact data files.

Each kind has a writer that persists the numbers to CSV and a ``plot_*``
function that draws only from that CSV, so re-plotting a data file gives the
same image bytes.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

KINDS = ("reward", "outage", "timeline", "payload")
# strip the version/date metadata so images are a pure function of the data
_PNG_META = {"Software": None}


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


# -- data writers -------------------------------------------------------------


def reward_data(metrics_by_seed: dict, path):
    """metrics_by_seed: {seed: [metric rows]} -> seed,episode,mean_reward."""
    rows = [(seed, m["episode"], repr(float(m["mean_reward"])))
            for seed, ms in sorted(metrics_by_seed.items()) for m in ms]
    return _write_csv(path, ["seed", "episode", "mean_reward"], rows)


def outage_data(records, path):
    rows = [(r.variant, r.sweep, repr(float(r.value)), r.seed, repr(r.outage), repr(r.ci_low), repr(r.ci_high))
            for r in records if r.status == "ok"]
    return _write_csv(path, ["variant", "sweep", "value", "seed", "outage", "ci_low", "ci_high"], rows)


def timeline_data(trace_rows, path, episode=0):
    rows = [(r["agent"], r["tti"], r["channel"], repr(float(r["power_dbm"])))
            for r in trace_rows if r.get("episode", 0) == episode]
    return _write_csv(path, ["agent", "tti", "channel", "power_dbm"], rows)


def payload_data(timeline, path):
    """timeline: (T+1, N) remaining bits."""
    timeline = np.asarray(timeline)
    header = ["tti"] + [f"agent_{i}" for i in range(timeline.shape[1])]
    rows = [[t] + [repr(float(v)) for v in row] for t, row in enumerate(timeline)]
    return _write_csv(path, header, rows)


# -- plots from data files -----------------------------------------------------


def plot_reward(data_path, image_path):
    _, rows = _read_csv(data_path)
    series = defaultdict(list)
    for seed, ep, r in rows:
        series[seed].append((int(ep), float(r)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, pts in series.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"seed {seed}", lw=1)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean episode reward")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, image_path)


_SWEEP_LABELS = {"density": "number of subnetworks", "bandwidth": "channel bandwidth (Hz)"}


def plot_outage(data_path, image_path, xlabel=None):
    _, rows = _read_csv(data_path)
    by_variant = defaultdict(lambda: defaultdict(list))
    sweeps = set()
    for variant, sweep, value, seed, outage, lo, hi in rows:
        sweeps.add(sweep)
        by_variant[variant][float(value)].append(float(outage))
    if xlabel is None:
        xlabel = _SWEEP_LABELS.get(sweeps.pop(), "sweep value") if len(sweeps) == 1 else "sweep value"
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, pts in by_variant.items():
        xs = sorted(pts)
        means = [np.mean(pts[x]) for x in xs]
        (line,) = ax.plot(xs, means, marker="o", label=variant)
        for x in xs:
            ax.scatter([x] * len(pts[x]), pts[x], color=line.get_color(), s=10, alpha=0.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("outage probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, image_path)


def timeline_matrices(data_path):
    """Read a timeline CSV back into (channel, power) N x T matrices."""
    _, rows = _read_csv(data_path)
    agents = sorted({int(r[0]) for r in rows})
    ttis = sorted({int(r[1]) for r in rows})
    col = {t: k for k, t in enumerate(ttis)}
    ch = np.full((len(agents), len(ttis)), np.nan)
    pw = np.full((len(agents), len(ttis)), np.nan)
    for a, t, c, p in rows:
        ch[int(a), col[int(t)]] = int(c)
        pw[int(a), col[int(t)]] = float(p)
    return ch, pw


def plot_timeline(data_path, image_path):
    ch, pw = timeline_matrices(data_path)
    fig, axes = plt.subplots(2, 1, figsize=(8, 4), sharex=True)
    n_ch = int(np.nanmax(ch)) + 1
    # one discrete colour per channel
    cmap = matplotlib.colors.ListedColormap(plt.get_cmap("tab10").colors[:n_ch])
    im0 = axes[0].imshow(ch, aspect="auto", interpolation="nearest", cmap=cmap, vmin=-0.5, vmax=n_ch - 0.5)
    axes[0].set_ylabel("agent")
    axes[0].set_title("channel")
    fig.colorbar(im0, ax=axes[0], ticks=range(n_ch))
    im1 = axes[1].imshow(pw, aspect="auto", interpolation="nearest", cmap="viridis")
    axes[1].set_ylabel("agent")
    axes[1].set_xlabel("TTI")
    axes[1].set_title("power (dBm)")
    fig.colorbar(im1, ax=axes[1])
    fig.tight_layout()
    return _save(fig, image_path)


def plot_payload(data_path, image_path):
    header, rows = _read_csv(data_path)
    data = np.array([[float(v) for v in r] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(header[1:], start=1):
        ax.plot(data[:, 0], data[:, k], label=name)
    ax.set_xlabel("TTI")
    ax.set_ylabel("remaining payload (bits)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, image_path)


_WRITERS = {"reward": reward_data, "outage": outage_data, "timeline": timeline_data, "payload": payload_data}
_PLOTTERS = {"reward": plot_reward, "outage": plot_outage, "timeline": plot_timeline, "payload": plot_payload}


def replot(kind, data_path, image_path):
    return _PLOTTERS[kind](data_path, image_path)


def render_plots(data, kind, out_dir, name=None):
    """Write the data file for ``kind`` and draw the figure next to it.

    Returns (image_path, data_path), or None with a warning when ``data`` is empty.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    empty = data is None or (hasattr(data, "__len__") and len(data) == 0)
    if not empty and kind == "outage":
        empty = not any(r.status == "ok" for r in data)
    if empty:
        warnings.warn(f"nothing to plot for {kind}")
        return None
    out_dir = Path(out_dir)
    stem = name or kind
    data_path = _WRITERS[kind](data, out_dir / f"{stem}.csv")
    image_path = _PLOTTERS[kind](data_path, out_dir / f"{stem}.png")
    return image_path, data_path
