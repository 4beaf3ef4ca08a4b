"""Report figures. Rendered off-screen with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def training_curves(report: dict, path: Path) -> str:
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for run in report["runs"]:
            ep = [e["epoch"] + 1 for e in run["epochs"]]
            ax_acc.plot(ep, [e["test_acc"] for e in run["epochs"]], marker="o", label=f"seed {run['seed']}")
            ax_loss.plot(ep, [e["train_loss"] for e in run["epochs"]], marker="o")
        ax_acc.set(xlabel="epoch", ylabel="test accuracy (%)")
        ax_loss.set(xlabel="epoch", ylabel="train loss")
        ax_acc.legend()
        fig.suptitle(f"{report['name']}: {report['operator']} K={report['K']}")
        return _save(fig, path)


def sweep_curve(report: dict, path: Path) -> str:
    rows = [r for r in report["rows"] if r["status"] == "ok"]
    ks = [r["K"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(ks, [r["mean_acc"] for r in rows], yerr=[r["std_acc"] for r in rows], marker="o", capsize=3)
        ax.set(xlabel="group size K", ylabel="test accuracy (%)", xscale="log", xticks=ks, xticklabels=ks)
        ax.minorticks_off()
        twin = ax.twinx()
        twin.plot(ks, [r["conv_calls"] for r in rows], color="0.5", ls="--", marker="s")
        twin.set_ylabel("conv calls per forward", color="0.4")
        return _save(fig, path)


def sparsity_bars(report: dict, path: Path) -> str:
    rows = [r for r in report["statistics"] if r["statistic"] != "max_abs_error_vs_dense"]
    labels = [r["statistic"].replace("_", " ") for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        y = range(len(rows))
        ax.barh([i + 0.2 for i in y], [r["predicted"] for r in rows], height=0.4, label="closed form", color="0.7")
        ax.barh([i - 0.2 for i in y], [r["measured"] for r in rows], height=0.4, label="measured")
        ax.set_yticks(list(y), labels)
        ax.set_xscale("symlog", linthresh=1e-3)
        ax.legend()
        return _save(fig, path)


def error_scaling(report: dict, path: Path) -> str:
    rows = report["error_probe"]["rows"]
    ks = [r["k"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(ks, [r["mean_error"] for r in rows], yerr=[2 * r["sem_error"] for r in rows],
                    marker="o", capsize=3, label="measured")
        ax.plot(ks, [r["bound"] for r in rows], ls="--", color="0.4", label="linear bound, C fit at smallest K")
        ax.set(xlabel="group size K", ylabel="squared membrane error", xticks=ks)
        ax.legend()
        return _save(fig, path)


def call_counts(report: dict, path: Path) -> str:
    rows = [r for r in report["call_accounting"] if r["status"] == "ok"]
    labels = [f"{r['operator']}\nK={r['K']}" for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(labels, [r["conv_calls"] for r in rows])
        ax.set_ylabel("conv calls per forward")
        return _save(fig, path)


def render(report: dict, out_dir: Path) -> list[str]:
    """Every figure that applies to ``report``; returns the written paths."""
    fig_dir = Path(out_dir) / "figures"
    exp = report["experiment"]
    if exp == "train":
        return [training_curves(report, fig_dir / "training.png")]
    if exp == "sweep":
        paths = [training_curves(r, fig_dir / f"training_k{r['K']}.png") for r in report["runs"]]
        if any(r["status"] == "ok" for r in report["rows"]):
            paths.append(sweep_curve(report, fig_dir / "sweep.png"))
        return paths
    if exp == "sparsity_lab":
        return [sparsity_bars(report, fig_dir / "sparsity.png")]
    if exp == "error_probe":
        return [error_scaling(report, fig_dir / "error_scaling.png")]
    if exp == "call_accounting":
        return [call_counts(report, fig_dir / "conv_calls.png")]
    return []
