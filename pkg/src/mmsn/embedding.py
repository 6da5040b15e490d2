"""2-D t-SNE export of encoder embeddings for single-label samples."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CONDITIONS
from .errors import TooFewSamples

MIN_SAMPLES = 3
PANEL_TITLES = ("most prevalent", "mid prevalence", "least prevalent")


@dataclass
class Embedding2D:
    coords: np.ndarray  # (n, 2)
    rows: np.ndarray  # indices of the kept (single-label) input rows
    classes: np.ndarray  # label index of every kept row
    prevalence_order: list[int]  # label indices, most frequent first
    panels: list[list[int]]
    plot_path: Path | None = None


def single_label_rows(labels) -> np.ndarray:
    Y = np.asarray(labels)
    return np.flatnonzero(Y.sum(axis=1) == 1)


def prevalence_panels(classes: np.ndarray) -> tuple[list[int], list[list[int]]]:
    """Rank classes by count (ties by index) and cut into top / middle / bottom groups of four.

    With fewer than 12 classes present the ranking is split into three near-equal parts.
    """
    present, counts = np.unique(classes, return_counts=True)
    order = [int(c) for c, _ in sorted(zip(present, counts), key=lambda t: (-t[1], t[0]))]
    n = len(order)
    if n >= 12:
        mid = (n - 4) // 2
        panels = [order[:4], order[mid : mid + 4], order[-4:]]
    else:
        panels = [list(map(int, p)) for p in np.array_split(order, 3)]
    return order, panels


def export_2d_embedding(embeddings, labels, seed: int = 0, path: str | Path | None = None,
                        perplexity: float = 30.0, max_iter: int = 1000) -> Embedding2D:
    from sklearn.manifold import TSNE

    X = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(labels)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} embeddings but {Y.shape[0]} label rows")
    rows = single_label_rows(Y)
    if rows.size < MIN_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_SAMPLES} single-label samples, got {rows.size}")
    classes = Y[rows].argmax(axis=1)
    tsne = TSNE(n_components=2, perplexity=min(perplexity, rows.size - 1), max_iter=max_iter,
                init="pca", random_state=seed)
    coords = tsne.fit_transform(X[rows])
    order, panels = prevalence_panels(classes)
    out = Embedding2D(coords, rows, classes, order, panels)
    if path is not None:
        out.plot_path = plot_panels(out, path)
    return out


def plot_panels(emb: Embedding2D, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(15, 5))
    cmap = plt.get_cmap("tab10")
    for ax, title, group in zip(axes, PANEL_TITLES, emb.panels):
        ax.scatter(emb.coords[:, 0], emb.coords[:, 1], s=6, c="0.85")
        for k, c in enumerate(group):
            sel = emb.classes == c
            ax.scatter(emb.coords[sel, 0], emb.coords[sel, 1], s=10, color=cmap(k), label=CONDITIONS[c])
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        if group:
            ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
