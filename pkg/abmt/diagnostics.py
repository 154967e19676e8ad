"""
ABMT Diagnostics - divergence curves of a finished adaptation run.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Union

from .exceptions import ContractError
from .trainer import MetricsReport

logger = logging.getLogger("abmt.diagnostics")

DIVERGENCE_COLUMNS = ["epoch", "cross_branch_distance", "teacher_student_distance"]


def diagnose(report: MetricsReport, out_path: Union[str, Path], plot: bool = False) -> Dict[str, Path]:
    """
    Write the per-epoch divergence CSV and, optionally, line plots.

    Args:
        report: Report of an adaptation run with at least two recorded epochs
        out_path: CSV path; plots go next to it as ``<stem>_<metric>.png``
        plot: Also render PNG plots (needs the ``plot`` extra)

    Returns:
        Mapping of artifact name to written path

    Raises:
        ContractError: fewer than two epochs were recorded
    """
    traces = sorted(report.divergence, key=lambda t: t.epoch)
    if len(traces) < 2:
        raise ContractError(f"diagnose needs at least 2 recorded epochs, got {len(traces)}")

    csv_path = Path(out_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(DIVERGENCE_COLUMNS)
        for trace in traces:
            writer.writerow([trace.epoch, repr(trace.cross_branch_distance), repr(trace.teacher_student_distance)])
    written = {"csv": csv_path}
    logger.info(f"📝 Divergence of {len(traces)} epochs written to {csv_path}")

    if plot:
        epochs = [t.epoch for t in traces]
        for column in DIVERGENCE_COLUMNS[1:]:
            values = [getattr(t, column) for t in traces]
            written[column] = _plot_curve(epochs, values, column, csv_path.with_name(f"{csv_path.stem}_{column}.png"))
    return written


def _plot_curve(epochs: List[int], values: List[float], label: str, path: Path) -> Path:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ImportError("Matplotlib package not installed. Install with: pip install abmt[plot]")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, values, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel(label.replace("_", " "))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"📈 Plot written to {path}")
    return path
