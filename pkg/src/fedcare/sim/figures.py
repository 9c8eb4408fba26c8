"""Report artifacts: matplotlib figures and a delimited metrics file."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

DAY = 86_400


def render_report_artifacts(report: dict, report_path: Path) -> list[Path]:
    """Render PNG figures and metrics.csv next to the report file."""
    out_dir = report_path.parent / (report_path.stem + "_artifacts")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    written.append(_metrics_csv(report, out_dir))
    timeline_fig = _timeline_figure(report, out_dir)
    if timeline_fig:
        written.append(timeline_fig)
    rmse_fig = _rmse_figure(report, out_dir)
    if rmse_fig:
        written.append(rmse_fig)
    rounds_fig = _rounds_figure(report, out_dir)
    if rounds_fig:
        written.append(rounds_fig)
    return written


def _metrics_csv(report: dict, out_dir: Path) -> Path:
    path = out_dir / "metrics.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge_id", "target", "source", "rmse", "mae", "r2",
                         "accuracy", "f1", "chosen"])
        per_edge = report.get("metrics", {}).get("per_edge", {})
        for edge_id in sorted(per_edge):
            for target in sorted(per_edge[edge_id]):
                selection = per_edge[edge_id][target]
                for cand in selection.get("candidates", []):
                    m = cand.get("metrics", {})
                    writer.writerow([
                        edge_id, target, cand.get("source"),
                        m.get("rmse"), m.get("mae"), m.get("r2"),
                        m.get("accuracy"), m.get("f1"),
                        selection.get("chosen"),
                    ])
        for target, m in report.get("metrics", {}).get("centralized", {}).items():
            writer.writerow(["pooled", target, "centralized_oracle",
                             m.get("rmse"), m.get("mae"), m.get("r2"),
                             m.get("accuracy"), m.get("f1"), ""])
        for target, m in report.get("metrics", {}).get("federated_global", {}).items():
            writer.writerow(["pooled", target, "federated_global",
                             m.get("rmse"), m.get("mae"), m.get("r2"),
                             m.get("accuracy"), m.get("f1"), ""])
    return path


def _timeline_figure(report: dict, out_dir: Path) -> Path | None:
    sample = report.get("queries", {}).get("sample", {})
    timeline = sample.get("timeline")
    if not timeline or not timeline.get("observations"):
        return None
    observations = timeline["observations"]
    predictions = timeline.get("predictions", [])
    interventions = timeline.get("interventions", [])
    t0 = observations[0]["measured_at"]
    days = lambda t: (t - t0) / DAY

    issues = sorted({name for obs in observations for name in obs["issue_scores"]})
    issue_rows = [i for i in issues
                  if any(p["target"] == i for p in predictions) or
                  any(obs["issue_scores"].get(i, 0) for obs in observations)]
    n_rows = 1 + len(issue_rows)
    fig, axes = plt.subplots(n_rows, 1, figsize=(8, 2.6 * n_rows), sharex=True,
                             squeeze=False)
    axes = axes[:, 0]

    def plot_series(ax, target, recorded, label):
        xs = [days(obs["measured_at"]) for obs in observations]
        ax.plot(xs, recorded, "o-", color="tab:blue", label="recorded")
        pred = [p for p in predictions if p["target"] == target]
        if pred:
            px = [days(p["time"]) for p in pred]
            py = [p["value"] for p in pred]
            ax.plot([xs[-1]] + px, [recorded[-1]] + py, "s--", color="tab:orange",
                    mfc="none", label="predicted")
        ax.set_ylabel(label)
        ax.set_ylim(0, 100)
        ax.legend(loc="upper left", fontsize=8)

    plot_series(axes[0], "overall_qol",
                [obs["overall_qol"] for obs in observations],
                "overall QoL\n(higher is better)")
    # intervention spans as horizontal segments under the overall chart
    for lane, iv in enumerate(interventions):
        start = days(iv["start"])
        end = days(iv["end"]) if iv.get("end") is not None else axes[0].get_xlim()[1]
        y = 4 + lane * 6
        axes[0].plot([start, end], [y, y], lw=3, color="tab:green", alpha=0.7)
        axes[0].text(start, y + 1.5, iv["name"], fontsize=7, color="tab:green")

    for ax, issue in zip(axes[1:], issue_rows):
        plot_series(ax, issue, [obs["issue_scores"].get(issue, 0.0)
                                for obs in observations],
                    f"{issue}\n(lower is better)")
    axes[-1].set_xlabel("days since first observation")
    fig.suptitle(f"patient {sample.get('patient', '')[:8]}… timeline")
    fig.tight_layout()
    path = out_dir / "timeline.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _rmse_figure(report: dict, out_dir: Path) -> Path | None:
    metrics = report.get("metrics", {})
    per_edge = metrics.get("per_edge", {})
    if not per_edge:
        return None
    targets = sorted({t for sel in per_edge.values() for t in sel})
    fig, axes = plt.subplots(1, len(targets), figsize=(4.5 * len(targets), 3.4),
                             squeeze=False)
    for ax, target in zip(axes[0], targets):
        edges = sorted(per_edge)
        locals_, feds = [], []
        for edge_id in edges:
            cands = {c["source"]: c["metrics"]
                     for c in per_edge[edge_id].get(target, {}).get("candidates", [])}
            locals_.append(cands.get("local", {}).get("rmse"))
            feds.append(cands.get("federated_global", {}).get("rmse"))
        x = range(len(edges))
        width = 0.38
        ax.bar([i - width / 2 for i in x], locals_, width, label="local",
               color="tab:blue")
        if any(v is not None for v in feds):
            ax.bar([i + width / 2 for i in x],
                   [v if v is not None else 0 for v in feds], width,
                   label="federated", color="tab:orange")
        central = metrics.get("centralized", {}).get(target, {}).get("rmse")
        if central is not None:
            ax.axhline(central, color="tab:green", ls="--", lw=1.2,
                       label="centralized oracle")
        ax.set_xticks(list(x))
        ax.set_xticklabels(edges, rotation=20, fontsize=8)
        ax.set_title(target)
        ax.set_ylabel("held-out RMSE")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "rmse_comparison.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _rounds_figure(report: dict, out_dir: Path) -> Path | None:
    rounds = report.get("rounds", {})
    if not rounds:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for key, entries in sorted(rounds.items()):
        xs = [e["round"] for e in entries]
        ys = [e["eval_rmse"] for e in entries]
        ax.plot(xs, ys, "o-", label=key.split(".")[1])
    ax.set_xlabel("federation round")
    ax.set_ylabel("evaluation-cohort RMSE")
    ax.legend(fontsize=8)
    ax.set_title("round-by-round global model quality")
    fig.tight_layout()
    path = out_dir / "round_convergence.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
