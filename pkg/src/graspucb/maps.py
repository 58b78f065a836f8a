"""Grid export: CSV for exact values, 16-bit PGM for viewing.

PGM images are min/max normalised to the full 0..65535 range; the original
range goes to a ``.range.json`` sidecar so the image can be mapped back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PGM_MAX = 65535
MAP_NAMES = ("q_mean", "v_epi", "v_ale", "v_all", "q_ucb")


def write_csv_grid(grid: np.ndarray, path: str | Path) -> None:
    """One row per line, ``repr`` floats so reading back is exact."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("expected a 2-D grid")
    lines = [",".join(repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_grid(path: str | Path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def normalize_u16(grid: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map ``[min, max]`` linearly onto ``[0, 65535]``; a constant grid maps to zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = np.rint((grid - lo) / (hi - lo) * PGM_MAX)
    else:
        scaled = np.zeros_like(grid)
    return scaled.astype(np.uint16), lo, hi


def write_pgm(grid: np.ndarray, path: str | Path) -> tuple[float, float]:
    """Binary (P5) 16-bit PGM plus a min/max sidecar. Returns the original range."""
    path = Path(path)
    img, lo, hi = normalize_u16(grid)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n{PGM_MAX}\n".encode() + img.astype(">u2").tobytes())
    path.with_suffix(".range.json").write_text(json.dumps({"min": lo, "max": hi}) + "\n")
    return lo, hi


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != PGM_MAX:
        raise ValueError("expected a 16-bit PGM")
    return np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w).astype(np.uint16)


def export_grid(grid: np.ndarray, directory: str | Path, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_csv_grid(grid, directory / f"{name}.csv")
    write_pgm(grid, directory / f"{name}.pgm")


def export_prediction_maps(stats, q_ucb: np.ndarray, directory: str | Path) -> dict[str, np.ndarray]:
    """Write q_mean, v_epi, v_ale, v_all and the UCB map as CSV + PGM."""
    grids = {"q_mean": stats.q_mean, "v_epi": stats.v_epi, "v_ale": stats.v_ale, "v_all": stats.v_all,
             "q_ucb": q_ucb}
    for name, grid in grids.items():
        export_grid(grid, directory, name)
    return grids


def export_observation(obs, directory: str | Path) -> None:
    """Height, the three normal components and intensity as CSV + PGM grids."""
    grids = {"height": obs.height, "normal_x": obs.normals[..., 0], "normal_y": obs.normals[..., 1],
             "normal_z": obs.normals[..., 2], "intensity": obs.intensity}
    for name, grid in grids.items():
        export_grid(grid, directory, name)
