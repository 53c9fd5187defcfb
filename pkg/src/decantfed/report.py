"""Tables and figures summarizing one or more finished runs.

Input is a sweep directory (manifest plus one metrics CSV per cell); output
is a set of delimited tables and, alongside them, rendered PNG figures.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sim import MetricsLog, MetricsRow, metrics_from_csv_text

log = logging.getLogger(__name__)

NEVER = "never"


def _fmt(value) -> str:
    if value is None:
        return NEVER
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def report_time_to_accuracy(logs: list[MetricsLog], target_acc: float) -> list[tuple]:
    """First simulated time each run reaches the target accuracy.

    Returns (algorithm, seed, iteration, time_s) rows, one per log, with
    None (rendered as "never") when the target is unreached, followed by
    one mean row per algorithm (mean only when every seed reached it).
    """
    if not logs:
        raise ValueError("no logs to report on")
    if not 0.0 < target_acc <= 1.0:
        raise ValueError(f"target_acc must be in (0, 1], got {target_acc!r}")
    rows: list[tuple] = []
    by_algo: dict[str, list] = {}
    for lg in logs:
        t = lg.time_to_accuracy(target_acc)
        it = next((r.iteration for r in lg.rows if r.test_acc >= target_acc), None)
        rows.append((lg.algorithm, lg.seed, it, t))
        by_algo.setdefault(lg.algorithm, []).append(t)
    for algo in sorted(by_algo):
        times = by_algo[algo]
        if any(t is None for t in times):
            rows.append((algo, "mean", None, None))
        else:
            rows.append((algo, "mean", None, sum(times) / len(times)))
    return rows


# --- sweep directory ingestion ---


def load_sweep(sweep_dir) -> list[dict]:
    """Cells from a sweep directory: resolved params, seed, parsed rows."""
    sweep_dir = Path(sweep_dir)
    manifest_path = sweep_dir / "manifest.json"
    if sweep_dir.is_file():
        manifest_path = sweep_dir
        sweep_dir = sweep_dir.parent
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    cells = []
    for cell in manifest["cells"]:
        if cell.get("status") != "ok":
            log.warning("skipping failed cell %s: %s", cell.get("csv"), cell.get("status"))
            continue
        with open(sweep_dir / cell["csv"], encoding="utf-8") as f:
            rows = metrics_from_csv_text(f.read())
        cells.append(
            {
                "algorithm": cell["resolved"]["algorithm"],
                "tau_s": float(cell["resolved"]["tau_s"]),
                "beta": float(cell["resolved"]["beta"]),
                "seed": int(cell["seed"]),
                "rows": rows,
            }
        )
    if not cells:
        raise ValueError(f"{manifest_path}: no successful cells to report on")
    return cells


def _group(cells: list[dict]):
    """Map (algorithm, beta, tau_s) -> list of cells (one per seed)."""
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["algorithm"], c["beta"], c["tau_s"]), []).append(c)
    return groups


def final_accuracy_rows(cells: list[dict]) -> list[tuple]:
    """(algorithm, beta, tau_s, seed, final_acc) per cell plus mean rows."""
    rows = []
    for c in sorted(cells, key=lambda c: (c["algorithm"], c["beta"], c["tau_s"], c["seed"])):
        rows.append((c["algorithm"], c["beta"], c["tau_s"], c["seed"],
                     c["rows"][-1].test_acc if c["rows"] else None))
    for key, group in sorted(_group(cells).items()):
        finals = [g["rows"][-1].test_acc for g in group if g["rows"]]
        mean = sum(finals) / len(finals) if finals else None
        rows.append((key[0], key[1], key[2], "mean", mean))
    return rows


def tau_table_rows(cells: list[dict]) -> list[tuple]:
    """Period-vs-final-accuracy table: one row per (algorithm, beta, tau)."""
    rows = []
    for (algo, beta, tau), group in sorted(_group(cells).items()):
        finals = [g["rows"][-1].test_acc for g in group if g["rows"]]
        mean = sum(finals) / len(finals) if finals else None
        rows.append((algo, beta, tau, mean, len(finals)))
    return rows


def time_to_accuracy_rows(cells: list[dict], target_acc: float) -> list[tuple]:
    """(algorithm, beta, tau_s, seed, iteration, time_s) rows plus means."""
    if not 0.0 < target_acc <= 1.0:
        raise ValueError(f"target_acc must be in (0, 1], got {target_acc!r}")
    rows = []
    for c in sorted(cells, key=lambda c: (c["algorithm"], c["beta"], c["tau_s"], c["seed"])):
        hit = next((r for r in c["rows"] if r.test_acc >= target_acc), None)
        rows.append(
            (c["algorithm"], c["beta"], c["tau_s"], c["seed"],
             hit.iteration if hit else None, hit.time_s if hit else None)
        )
    for (algo, beta, tau), group in sorted(_group(cells).items()):
        times = []
        for g in group:
            hit = next((r for r in g["rows"] if r.test_acc >= target_acc), None)
            times.append(hit.time_s if hit else None)
        mean = None if (not times or any(t is None for t in times)) else sum(times) / len(times)
        rows.append((algo, beta, tau, "mean", None, mean))
    return rows


# --- figures ---


def _mean_curve(group: list[dict]):
    """Seed-mean accuracy curve on the common row prefix."""
    length = min(len(g["rows"]) for g in group)
    iters = [group[0]["rows"][k].iteration for k in range(length)]
    times = [
        sum(g["rows"][k].time_s for g in group) / len(group) for k in range(length)
    ]
    accs = [
        sum(g["rows"][k].test_acc for g in group) / len(group) for k in range(length)
    ]
    return iters, times, accs


def _label(key: tuple, cells: list[dict]) -> str:
    algo, beta, tau = key
    parts = [algo]
    if len({c["beta"] for c in cells}) > 1:
        parts.append(f"beta={beta:g}")
    if len({c["tau_s"] for c in cells}) > 1:
        parts.append(f"tau={tau:g}s")
    return " ".join(parts)


def render_accuracy_curves(cells: list[dict], path, x_axis: str = "iteration") -> None:
    """Seed-mean test accuracy per (algorithm, beta, tau) group."""
    if x_axis not in ("iteration", "time"):
        raise ValueError(f"x_axis must be 'iteration' or 'time', got {x_axis!r}")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, group in sorted(_group(cells).items()):
        if not all(g["rows"] for g in group):
            continue
        iters, times, accs = _mean_curve(group)
        xs = iters if x_axis == "iteration" else times
        ax.plot(xs, accs, label=_label(key, cells), linewidth=1.5)
    ax.set_xlabel("iteration" if x_axis == "iteration" else "simulated time (s)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_tau_curve(cells: list[dict], path) -> None:
    """Final accuracy against the aggregation period, one line per algorithm/beta."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    series: dict[tuple, list[tuple]] = {}
    for (algo, beta, tau), group in _group(cells).items():
        finals = [g["rows"][-1].test_acc for g in group if g["rows"]]
        if finals:
            series.setdefault((algo, beta), []).append((tau, sum(finals) / len(finals)))
    many_beta = len({k[1] for k in series}) > 1
    for (algo, beta), points in sorted(series.items()):
        points.sort()
        label = f"{algo} beta={beta:g}" if many_beta else algo
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
    ax.set_xlabel("aggregation period tau (s)")
    ax.set_ylabel("final test accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def generate_report(sweep_dir, out_dir, target_acc: float = 0.8, figures: bool = True) -> dict:
    """Write every table (and figure) for a sweep; returns written paths."""
    cells = load_sweep(sweep_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    path = out_dir / "final_accuracy.csv"
    write_rows_csv(path, ["algorithm", "beta", "tau_s", "seed", "final_acc"],
                   final_accuracy_rows(cells))
    written["final_accuracy"] = str(path)

    path = out_dir / "tau_accuracy.csv"
    write_rows_csv(path, ["algorithm", "beta", "tau_s", "mean_final_acc", "n_seeds"],
                   tau_table_rows(cells))
    written["tau_accuracy"] = str(path)

    path = out_dir / "time_to_accuracy.csv"
    write_rows_csv(
        path,
        ["algorithm", "beta", "tau_s", "seed", "iteration", "time_s"],
        time_to_accuracy_rows(cells, target_acc),
    )
    written["time_to_accuracy"] = str(path)

    if figures:
        path = out_dir / "accuracy_vs_iteration.png"
        render_accuracy_curves(cells, path, x_axis="iteration")
        written["accuracy_vs_iteration"] = str(path)
        path = out_dir / "accuracy_vs_time.png"
        render_accuracy_curves(cells, path, x_axis="time")
        written["accuracy_vs_time"] = str(path)
        if len({c["tau_s"] for c in cells}) > 1:
            path = out_dir / "tau_accuracy.png"
            render_tau_curve(cells, path)
            written["tau_accuracy_png"] = str(path)
    return written
