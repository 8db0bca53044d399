import io
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonlines
import matplotlib
import numpy as np

matplotlib.use('Agg')
import matplotlib.pyplot as plt


__all__ = ['plot', 'plot_progress']


def plot(
        xaxis: str,
        yaxes: Sequence[str],
        records: List[Dict[str, float]],
        colors: Sequence[Optional[str]],
        title: str = "",
) -> io.BytesIO:
    buf = io.BytesIO()
    plt.figure(figsize=(6, 3))
    handles, labels = [], []
    for yaxis, color in zip(yaxes, colors):
        pts = [(r[xaxis], r[yaxis]) for r in records if xaxis in r and yaxis in r and np.isfinite(r[yaxis])]
        if not pts:
            continue
        xs, ys = (np.array(v, dtype=np.float64) for v in zip(*pts))
        handles.append(plt.plot(xs, ys, color=color)[0])
        labels.append(yaxis)
    plt.grid(which="both", alpha=0.2)
    plt.title(title or ", ".join(yaxes), loc="right")
    if handles:
        plt.legend(handles, labels, loc="upper right")
    plt.savefig(buf, format='svg')
    plt.close('all')
    buf.seek(0)
    return buf


def plot_progress(run_path: str, progress_filename: str = "progress.jsonl") -> Optional[Path]:
    """Render the stage's loss components into progress.svg next to progress.jsonl."""
    run_path = Path(run_path)
    progress_fn = run_path / progress_filename
    if not progress_fn.exists():
        return None
    with jsonlines.open(progress_fn) as reader:
        records = list(reader)
    buf = plot(
        "epoch",
        ["l_total", "l_plm", "l_logits", "l_hidden"],
        records,
        ["#ff0000", "#880000", "#0066cc", "#00aa44"],
    )
    out = run_path / "progress.svg"
    with open(out.with_suffix(".tmp"), "wb") as f:
        f.write(buf.getvalue())
    os.rename(out.with_suffix(".tmp"), out)
    return out
