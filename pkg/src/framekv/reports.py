"""Report rendering: delimited tables plus matplotlib figures.

Every CLI command funnels its results through a ReportBundle, which lands on
disk as either CSV or JSON next to a rendered PNG. Reports are deterministic
for fixed inputs and seed; the input digest in the envelope makes reruns
comparable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["figure.figsize"] = (7.0, 3.2)
plt.rcParams["figure.dpi"] = 130
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3
plt.rcParams["font.size"] = 9

SCHEMA_VERSION = 1

_CLASS_COLOR = {"R240": "#d62728", "R480": "#ff7f0e", "R640": "#2ca02c", "R1080": "#1f77b4"}


def input_digest(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ReportBundle:
    def __init__(self, command, params, header, rows, summary=None):
        self.command = command
        self.input_digest = input_digest(params)
        self.header = list(header)
        self.rows = [list(r) for r in rows]
        self.summary = summary or {}

    def to_json(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "input_digest": self.input_digest,
            "header": self.header,
            "rows": self.rows,
            "summary": self.summary,
        }

    def write(self, out_dir, fmt="csv", name=None):
        """Write <name>.<fmt> under out_dir and return the path."""
        os.makedirs(out_dir, exist_ok=True)
        name = name or self.command
        if fmt == "json":
            path = os.path.join(out_dir, f"{name}.json")
            with open(path, "w") as fh:
                json.dump(self.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        elif fmt == "csv":
            path = os.path.join(out_dir, f"{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["# command", self.command])
                w.writerow(["# input_digest", self.input_digest])
                for k in sorted(self.summary):
                    w.writerow([f"# {k}", self.summary[k]])
                w.writerow(self.header)
                w.writerows(self.rows)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        return path


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# per-command figures


def corpus_figure(values_u8, path, title="synthetic KV, layer 0"):
    fig, ax = plt.subplots()
    im = ax.imshow(values_u8, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("channel")
    ax.set_ylabel("token")
    ax.set_title(title)
    ax.grid(False)
    fig.colorbar(im, ax=ax, label="byte value")
    return _save(fig, path)


def search_figure(rows, best_key, path):
    """rows: (label, total_bytes); best_key highlighted."""
    labels = [r[0] for r in rows]
    sizes = [r[1] / 1e6 for r in rows]
    colors = ["#d62728" if lab == best_key else "#1f77b4" for lab in labels]
    fig, ax = plt.subplots(figsize=(7.0, 0.18 * len(rows) + 1.2))
    ax.barh(range(len(rows)), sizes, color=colors)
    ax.set_yticks(range(len(rows)), labels, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("encoded corpus size (MB)")
    ax.set_title("intra-frame tiling candidates")
    return _save(fig, path)


def pack_figure(per_resolution, raw_fp16_mb, raw_int8_mb, path):
    """per_resolution: {name: encoded MB total}."""
    names = list(per_resolution)
    vals = [per_resolution[n] for n in names]
    fig, ax = plt.subplots()
    ax.bar(names, vals, color=[_CLASS_COLOR.get(n, "#888") for n in names])
    ax.axhline(raw_fp16_mb, ls="--", c="k", lw=1, label=f"fp16 raw {raw_fp16_mb:.1f} MB")
    ax.axhline(raw_int8_mb, ls=":", c="k", lw=1, label=f"int8 raw {raw_int8_mb:.1f} MB")
    ax.set_ylabel("bytes on disk (MB)")
    ax.set_title("encoded chunk sizes by resolution class")
    ax.legend()
    return _save(fig, path)


def timeline_figure(timelines, path):
    """Transfer/decode spans per chunk for one or more named timelines."""
    fig, axes = plt.subplots(len(timelines), 1, sharex=True, squeeze=False,
                             figsize=(7.0, 1.8 * len(timelines) + 0.8))
    for ax, (name, tl) in zip(axes[:, 0], timelines.items()):
        for r in tl.records:
            c = _CLASS_COLOR.get(r["resolution"], "#888")
            ax.barh(1, r["transfer_end"] - r["transfer_start"], left=r["transfer_start"],
                    height=0.6, color=c, alpha=0.45, edgecolor="k", lw=0.4)
            ax.barh(0, r["decode_end"] - r["decode_start"], left=r["decode_start"],
                    height=0.6, color=c, edgecolor="k", lw=0.4)
        ax.set_yticks([0, 1], ["decode", "transfer"])
        ax.set_title(f"{name}: ttft {tl.ttft:.3f} s, idle {tl.total_bubble:.3f} s",
                     fontsize=9)
    axes[-1, 0].set_xlabel("time (s)")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in _CLASS_COLOR.values()]
    fig.legend(handles, _CLASS_COLOR.keys(), loc="upper right", ncol=4, fontsize=7)
    return _save(fig, path)


def schedule_figure(metrics, path):
    fig, ax = plt.subplots()
    for flag, color, label in ((False, "#1f77b4", "non-reuse"), (True, "#d62728", "reuse")):
        xs = [r["arrival_s"] for r in metrics["requests"] if r["reuse"] == flag]
        ys = [r["ttft_s"] for r in metrics["requests"] if r["reuse"] == flag]
        if xs:
            ax.scatter(xs, ys, s=14, color=color, label=label)
    ax.set_xlabel("arrival (s)")
    ax.set_ylabel("TTFT (s)")
    ax.set_title("per-request TTFT by class")
    ax.legend()
    return _save(fig, path)


def similarity_figure(report, path):
    axes_names = list(report)
    ssims = [report[a]["ssim"] for a in axes_names]
    psnrs = [report[a]["psnr"] for a in axes_names]
    fig, (ax1, ax2) = plt.subplots(1, 2)
    ax1.bar(axes_names, ssims, color="#1f77b4")
    ax1.set_ylabel("mean SSIM")
    ax1.set_ylim(0, 1)
    ax2.bar(axes_names, psnrs, color="#ff7f0e")
    ax2.set_ylabel("mean PSNR (dB)")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30)
    fig.suptitle("adjacent-slice similarity per tensor axis")
    return _save(fig, path)


def restore_figure(rows, path):
    """rows: (chunk_index, payload_bytes, peak_stream_bytes)."""
    idx = [r[0] for r in rows]
    pay = [r[1] / 1e6 for r in rows]
    peak = [r[2] / 1e6 for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2)
    ax1.bar(idx, pay, color="#1f77b4")
    ax1.set_xlabel("chunk")
    ax1.set_ylabel("payload (MB)")
    ax2.bar(idx, peak, color="#2ca02c")
    ax2.set_xlabel("chunk")
    ax2.set_ylabel("peak restore buffer (MB)")
    fig.suptitle("restored chunks")
    return _save(fig, path)
