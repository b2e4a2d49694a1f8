"""Experiment grids: every cell is a config override run once per split.

Each run writes ``<out>/<cell>/split<k>/result.json``; a run whose result
file exists with the same config hash is read back instead of retrained, so
an interrupted grid picks up where it stopped.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .train import DataBundle, RunResult, TrainConfig, build_data, train_run

log = logging.getLogger(__name__)

METRIC = "best_miou"


@dataclass
class CellResult:
    overrides: dict
    values: list  # one best-mIoU per split
    runs: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        """Population std over the splits."""
        return float(np.std(self.values))

    def to_dict(self) -> dict:
        return {"overrides": self.overrides, "values": self.values, "mean": self.mean, "std": self.std,
                "runs": self.runs}


def expand(params: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of the swept fields, in the order given."""
    keys = list(params)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(params[k] for k in keys))]


def cell_name(overrides: dict) -> str:
    if not overrides:
        return "base"
    parts = []
    for k, v in overrides.items():
        if isinstance(v, (list, tuple)):
            v = ":".join(str(x) for x in v)
        parts.append(f"{k}={v}")
    return ",".join(parts).replace("/", "_")


def run_config(base: TrainConfig, overrides: dict, split: int) -> TrainConfig:
    """Cell config for one split; the split index also offsets the run seed."""
    return base.replace(**overrides, split_index=split, seed=base.seed + split)


def _load_result(path: Path, cfg: TrainConfig) -> Optional[RunResult]:
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    if d.get("config_hash") != cfg.hash():
        return None
    return RunResult(**d)


def _discard_stale(run_dir: Path, cfg: TrainConfig) -> None:
    """Remove outputs of a different config so the run starts clean.

    A checkpoint from the same config (an interrupted run) is kept and resumed.
    """
    ckpt = run_dir / "checkpoint_last.npz"
    stale = (run_dir / "result.json").exists()
    if ckpt.exists() and not stale:
        with np.load(ckpt, allow_pickle=False) as z:
            stale = json.loads(str(z["__header__"])).get("resume_key") != cfg.resume_key()
    if stale:
        for name in ("result.json", "checkpoint_last.npz", "best_teacher.npz", "losses.csv", "report.json"):
            (run_dir / name).unlink(missing_ok=True)


def run_grid(
    base: TrainConfig,
    params: dict[str, Sequence],
    out_dir=None,
    n_splits: Optional[int] = None,
    runner: Callable[[TrainConfig, Optional[DataBundle]], RunResult] = None,
) -> list[CellResult]:
    """Run every cell of ``params`` on ``n_splits`` splits (default ``base.n_splits``).

    Writes ``grid.csv`` and ``grid.json`` to ``out_dir`` when given.
    """
    n_splits = base.n_splits if n_splits is None else n_splits
    if n_splits > base.n_splits:
        base = base.replace(n_splits=n_splits)
    runner = runner or (lambda cfg, data: train_run(cfg, data=data))
    out = Path(out_dir) if out_dir else None
    data_cache: dict = {}
    cells = []
    for overrides in expand(params):
        values, runs = [], []
        for split in range(n_splits):
            cfg = run_config(base, overrides, split)
            run_dir = out / cell_name(overrides) / f"split{split}" if out else None
            if run_dir is not None:
                cfg = cfg.replace(out_dir=str(run_dir))
            result = _load_result(run_dir / "result.json", cfg) if run_dir else None
            if result is None:
                if run_dir is not None:
                    _discard_stale(run_dir, cfg)
                key = (cfg.data_seed, cfg.n_images, cfg.image_size, cfg.num_classes, cfg.imbalance, cfg.n_val,
                       cfg.n_labeled, cfg.n_splits, cfg.split_index)
                if key not in data_cache:
                    data_cache.clear()
                    data_cache[key] = build_data(cfg)
                result = runner(cfg, data_cache[key])
                if run_dir is not None:
                    run_dir.mkdir(parents=True, exist_ok=True)
                    (run_dir / "result.json").write_text(json.dumps(result.__dict__, indent=2))
            else:
                log.info("cell %s split %d: reusing finished run", cell_name(overrides), split)
            values.append(getattr(result, METRIC))
            runs.append({"split": split, "seed": cfg.seed, "best_miou": result.best_miou,
                         "final_miou": result.final_miou, "config_hash": result.config_hash,
                         "wall_time": result.wall_time})
        cells.append(CellResult(overrides, values, runs))
    if out is not None:
        write_tables(out, cells)
    return cells


def write_tables(out: Path, cells: list[CellResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for c in cells for k in c.overrides})
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["n", "mean", "std", "values"])
        for c in cells:
            w.writerow([c.overrides.get(k, "") for k in keys]
                       + [len(c.values), repr(c.mean), repr(c.std), " ".join(repr(v) for v in c.values)])
    (out / "grid.json").write_text(json.dumps([c.to_dict() for c in cells], indent=2))


def regime_table(cells: list[CellResult], n_total: int, row_key: str = "method",
                 col_key: str = "n_labeled") -> str:
    """Rows per ``row_key``, one column per labeled regime, entries ``mean ± std`` in percent.

    Column headers show the labeled fraction and the labeled count, e.g.
    ``1/32 (16)``.
    """
    rows = list(dict.fromkeys(c.overrides.get(row_key) for c in cells))
    cols = sorted({c.overrides[col_key] for c in cells})
    lookup = {(c.overrides.get(row_key), c.overrides[col_key]): c for c in cells}

    def header(n):
        frac = n / n_total
        inv = 1 / frac if frac else math.inf
        label = f"1/{round(inv)}" if frac and abs(inv - round(inv)) < 1e-9 else f"{frac:.3g}"
        return f"{label} ({n})"

    lines = [" | ".join([row_key] + [header(n) for n in cols])]
    for r in rows:
        entries = []
        for n in cols:
            c = lookup.get((r, n))
            entries.append("-" if c is None else f"{100 * c.mean:.2f} ± {100 * c.std:.2f}")
        lines.append(" | ".join([str(r)] + entries))
    return "\n".join(lines)
