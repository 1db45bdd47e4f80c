# SVG views rendered from the CSV files the commands write; nothing here computes new data.
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from utiles.toolbox import read_csv  # noqa: E402

# fixed ids and no timestamp, so the same CSV gives the same SVG bytes
plt.rcParams["svg.hashsalt"] = "icarus"
SVG_METADATA = {"Date": None}


def _save(fig, path: str) -> str:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def _columns(path: str) -> dict:
    header, rows = read_csv(path)
    return {name: [row[i] for row in rows] for i, name in enumerate(header)}


def _floats(cells) -> np.ndarray:
    return np.array([float(c) if c != "" else np.nan for c in cells], dtype=np.float64)


def plot_loss(train_csv: str, out_svg: str) -> str:
    cols = _columns(train_csv)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(_floats(cols["traces_seen"]), _floats(cols["loss"]), lw=1)
    ax.set_xlabel("traces")
    ax.set_ylabel("mean -log q")
    fig.tight_layout()
    return _save(fig, out_svg)


def plot_weighted_scatter(samples_csv: str, x_col: str, y_col: str, out_svg: str, radius=None) -> str:
    """Samples coloured by normalised importance weight; optional circle of the given radius."""
    cols = _columns(samples_csv)
    lw = _floats(cols["log_weight"])
    w = np.exp(lw - np.nanmax(lw))
    w = w / np.nansum(w)
    fig, ax = plt.subplots(figsize=(5, 5))
    points = ax.scatter(_floats(cols[x_col]), _floats(cols[y_col]), c=w, s=6, cmap="viridis")
    if radius is not None:
        t = np.linspace(0.0, 2.0 * math.pi, 400)
        ax.plot(radius * np.cos(t), radius * np.sin(t), color="white", lw=1)
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    ax.set_aspect("equal")
    fig.colorbar(points, ax=ax, label="weight")
    fig.tight_layout()
    return _save(fig, out_svg)


def plot_fault_bars(faults_csv: str, out_svg: str, observation: str = "0") -> str:
    cols = _columns(faults_csv)
    keep = [i for i, o in enumerate(cols["observation"]) if o == observation]
    labels = [f"{cols['location'][i]} {cols['kind'][i]}" for i in keep]
    probs = [float(cols["probability"][i]) for i in keep]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(range(len(probs)), probs)
    ax.set_xticks(range(len(probs)), labels, rotation=90, fontsize=7)
    ax.set_ylabel("posterior probability")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    return _save(fig, out_svg)


def plot_attention(attention_csv: str, target: str, out_svg: str) -> str:
    """Heatmap of queries x attended sites for one proposed site."""
    cols = _columns(attention_csv)
    keep = [i for i, s in enumerate(cols["proposed_site"]) if s == target]
    queries = sorted({int(cols["query"][i]) for i in keep})
    attended = list(dict.fromkeys(cols["attended_site"][i] for i in keep))
    grid = np.zeros((len(queries), len(attended)))
    for i in keep:
        grid[queries.index(int(cols["query"][i])), attended.index(cols["attended_site"][i])] = float(cols["weight"][i])
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(attended) + 2), 2.5))
    image = ax.imshow(grid, aspect="auto", vmin=0.0, vmax=1.0, cmap="magma")
    ax.set_xticks(range(len(attended)), attended, rotation=90, fontsize=7)
    ax.set_yticks(range(len(queries)), [f"query {q + 1}" for q in queries])
    ax.set_title(f"proposing {target}")
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    return _save(fig, out_svg)


def plot_reconstruction(reconstruction_csv: str, out_svg: str) -> str:
    """Observed |Vout| against the responses of sampled traces."""
    cols = _columns(reconstruction_csv)
    freqs = _floats(cols["freq"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in cols:
        if name.startswith("sample_"):
            ax.plot(freqs, _floats(cols[name]), color="tab:blue", alpha=0.3, lw=0.8)
    ax.plot(freqs, _floats(cols["observed_abs"]), "k.", ms=3, label="observed")
    ax.set_xscale("log")
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("|Vout| [V]")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_svg)


def plot_ess_comparison(compare_csv: str, out_svg: str) -> str:
    cols = _columns(compare_csv)
    means, stds = _floats(cols["ess_mean"]), _floats(cols["ess_std"])
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(means) + 2), 3.5))
    ax.bar(range(len(means)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(means)), cols["network"], rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean ESS")
    fig.tight_layout()
    return _save(fig, out_svg)
