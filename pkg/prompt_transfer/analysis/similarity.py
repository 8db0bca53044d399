import os
from dataclasses import dataclass
from typing import Dict, List, Mapping

import matplotlib
import numpy as np

matplotlib.use('Agg')
import matplotlib.pyplot as plt

from prompt_transfer.modelling.numerics import Matrix, Vector, cosine, l2_norm
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, compose

__all__ = ["SimilarityMatrix", "prompt_embedding", "similarity_matrix", "render_heatmap", "HEATMAP_COLORMAP"]

HEATMAP_COLORMAP = "coolwarm"


def prompt_embedding(shared: SharedPrompt, factors: TaskFactors) -> Vector:
    """Composed prompt averaged over its l rows."""
    return compose(shared, factors).mean(axis=0)


@dataclass
class SimilarityMatrix:
    task_ids: List[str]
    entries: Matrix

    def __post_init__(self):
        n = len(self.task_ids)
        if self.entries.shape != (n, n):
            raise ValueError(f"similarity matrix: {self.entries.shape} entries for {n} tasks")

    def __getitem__(self, pair) -> float:
        a, b = pair
        return float(self.entries[self.task_ids.index(a), self.task_ids.index(b)])

    def to_text(self) -> str:
        lines = [" ".join(self.task_ids)]
        for row in self.entries:
            lines.append(" ".join("%.4f" % x for x in row))
        return "\n".join(lines) + "\n"


def similarity_matrix(embeddings: Mapping[str, Vector]) -> SimilarityMatrix:
    if len(embeddings) < 2:
        raise ValueError(f"similarity_matrix: needs >= 2 tasks, got {len(embeddings)}")
    task_ids = list(embeddings.keys())
    for t in task_ids:
        if l2_norm(embeddings[t]) == 0.0:
            raise ValueError(f"similarity_matrix: task {t} has a zero-norm embedding")
    n = len(task_ids)
    entries = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            entries[i, j] = entries[j, i] = cosine(embeddings[task_ids[i]], embeddings[task_ids[j]])
    return SimilarityMatrix(task_ids, entries)


def render_heatmap(sim: SimilarityMatrix, path: str, title: str = "prompt cosine similarity") -> str:
    n = len(sim.task_ids)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * n, 0.8 + 0.8 * n))
    im = ax.imshow(sim.entries, cmap=HEATMAP_COLORMAP, vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(sim.task_ids, rotation=45, ha="right")
    ax.set_yticklabels(sim.task_ids)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, "%.2f" % sim.entries[i, j], ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path + ".tmp", format="png", metadata={
        "Description": f"linear colormap {HEATMAP_COLORMAP}: -1 blue, 0 white, +1 red",
        "Software": None,
    })
    plt.close(fig)
    os.rename(path + ".tmp", path)
    return path
