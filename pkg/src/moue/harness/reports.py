"""CSV and text report writers.

Every file is UTF-8 with LF line endings and a fixed header; floats are
written with ``repr`` so equal runs give byte-identical files.  Schemas are
documented in ``docs/reports.md``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..topology import ConnectivityMap, ParameterBudget, exposure_degrees

LOSS_HEADER = ["step", "task_loss", "aux_loss", "ue_share"]
SKEW_HEADER = ["step", "group", "max_mean_ratio"]
BUDGET_HEADER = ["activated", "total_physical", "virtual"]
EXPOSURE_HEADER = ["ring_position", "expert_id", "exposure"]
UE_RATIO_HEADER = ["layer", "ue_gate_mass", "ue_prob_mass"]
DOMAIN_HEADER = ["domain", "layer", "ue_gate_mass"]


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])


def expert_header(prefix: str, n: int) -> list[str]:
    return [prefix] + [f"e{i}" for i in range(n)]


def write_matrix(path: Path, label: str, mat: np.ndarray) -> None:
    """One row per leading index with columns e0..e{n-1}."""
    write_rows(path, expert_header(label, mat.shape[1]),
               ([i, *row] for i, row in enumerate(mat)))


def write_budget(path: Path, b: ParameterBudget) -> None:
    write_rows(path, BUDGET_HEADER, [[b.activated, b.total_physical, b.virtual]])


def write_connectivity(path: Path, cmap: ConnectivityMap) -> None:
    path.write_text(cmap.to_csv(), encoding="utf-8")


def write_exposure(path: Path, cmap: ConnectivityMap) -> None:
    c = exposure_degrees(cmap)
    off = cmap.universal_offset
    write_rows(path, EXPOSURE_HEADER, ([j, off + j, int(c[j])] for j in range(cmap.num_universal)))


def write_group_masks(path: Path, cmap: ConnectivityMap) -> None:
    write_matrix(path, "group", cmap.group_masks().astype(np.int64))


def write_pathcount(path: Path, log_count: float, exact: int | None) -> None:
    lines = [f"log_paths={log_count!r}"]
    if exact is not None and exact < 2 ** 63:
        lines.append(f"paths={exact}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
