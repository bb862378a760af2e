import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from analysis.errors import SchemaError

log = logging.getLogger(__name__)


def _curve(ax, table, title):
    groups = table.groupby("label", sort=False) if "label" in table.columns else [(title, table)]
    for label, part in groups:
        t = part["instant_ns"] / 1e3
        ax.plot(t, part["mean"], marker="o", markersize=3, label=label)
        ax.fill_between(t, part["mean"] - part["half_width"], part["mean"] + part["half_width"], alpha=0.25)
    ax.set_xlabel("time (us)")
    ax.set_ylabel("fidelity")
    ax.legend(fontsize=8)


def _relative_errors(ax, table, title):
    sns.boxplot(data=table, x="kind", y="relative_error", hue="model" if "model" in table.columns else None,
                ax=ax, showfliers=False)
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_ylabel("relative error")


def _surface(ax, table, title):
    p1, p2 = [c for c in table.columns if c != "cost"][:2]
    grid = table.pivot(index=p2, columns=p1, values="cost")
    mesh = ax.contourf(grid.columns.to_numpy(), grid.index.to_numpy(), grid.to_numpy(), levels=30, cmap="viridis")
    plt.colorbar(mesh, ax=ax, label="cost")
    ax.set_xlabel(f"{p1} (GHz)")
    ax.set_ylabel(f"{p2} (GHz)")


def _gate_report(ax, table, title):
    if "frames" in table.columns:
        table = table.assign(pulse=table["axis"] + " " + table["frames"])
    hue = "pulse" if "pulse" in table.columns else "axis"
    sns.barplot(data=table, x="drag_alpha", y="infidelity", hue=hue, ax=ax)
    ax.set_yscale("log")
    ax.set_xlabel("DRAG alpha")


def _spectrum(ax, table, title):
    ax.plot(table["freq_ghz"], table["magnitude"])
    ax.set_xlim(-1.0, 1.0)
    ax.set_xlabel("frequency (GHz)")
    ax.set_ylabel("normalized magnitude")


def _kind_of(table):
    cols = set(table.columns)
    if {"instant_ns", "mean", "half_width"} <= cols:
        return _curve
    if {"relative_error", "kind"} <= cols:
        return _relative_errors
    if "cost" in cols and len(cols) == 3:
        return _surface
    if {"drag_alpha", "infidelity", "axis"} <= cols:
        return _gate_report
    if {"freq_ghz", "magnitude"} <= cols:
        return _spectrum
    raise SchemaError(f"no plot known for columns {sorted(cols)}")


def plot_csv(path, out_path=None):
    """Render an emitted CSV to SVG; reads nothing but the file itself."""
    if not os.path.isfile(path):
        raise SchemaError(f"{path} does not exist")
    table = pd.read_csv(path)
    draw = _kind_of(table)
    title = os.path.splitext(os.path.basename(path))[0]
    out_path = out_path or os.path.splitext(path)[0] + ".svg"

    fig, ax = plt.subplots(figsize=(7, 4.5))
    draw(ax, table, title)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    log.info("plotted %s -> %s", path, out_path)
    return out_path
