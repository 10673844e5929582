"""CSV tables, a JSON run manifest and SVG AP-vs-noise plots."""

from __future__ import annotations

import csv
import json
import subprocess
from pathlib import Path

from .. import __version__

NO_GT = "no-GT"
NOISE_HEADER = ("noise_level", "ap50", "ap70")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(v):
    if v is None:
        return NO_GT
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == NO_GT:
        return None
    try:
        return float(v)
    except ValueError:
        return v


def write_table(path, rows, header=None) -> Path:
    path = Path(path)
    header = tuple(header or (NOISE_HEADER if rows and "noise_level" in rows[0] else rows[0].keys()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])
    return path


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_noise_tables(path, tables: dict) -> Path:
    """One line per noise table, AP@0.5 solid and AP@0.7 dashed."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rows in tables.items():
        xs = [r["noise_level"] for r in rows]
        for key, style in (("ap50", "-o"), ("ap70", "--s")):
            ys = [float("nan") if r[key] is None else r[key] for r in rows]
            ax.plot(xs, ys, style, label=f"{name} {key}")
    ax.set_xlabel("pose noise level (m / deg)")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def emit_report(tables: dict, traces: dict, out_dir, config=None, extra: dict | None = None) -> dict:
    """Write ``<name>.csv`` per table, ``trace_<name>.json`` per trace, plots, and ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory {out} is not writable: {exc}") from exc
    files = []
    noise_tables = {}
    for name, rows in tables.items():
        if not rows:
            continue
        files.append(write_table(out / f"{name}.csv", rows).name)
        if "noise_level" in rows[0]:
            noise_tables[name] = rows
    for name, trace in traces.items():
        p = out / f"trace_{name}.json"
        p.write_text(json.dumps(trace, indent=1))
        files.append(p.name)
    if noise_tables:
        files.append(plot_noise_tables(out / "ap_vs_noise.svg", noise_tables).name)
    manifest = {
        "version": version_string(),
        "seed": None if config is None else config.seed,
        "config": None if config is None else config.to_dict(),
        "files": files,
        "fidelity_notes": [
            "synthetic two-agent scenes stand in for the real-world dataset; no train/val split protocol applies",
            "desk-scale grid, channel width and schedule; absolute AP values are not comparable to full-scale runs",
        ],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
