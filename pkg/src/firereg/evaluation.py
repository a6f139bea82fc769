"""Dice, inverse-consistency error and the per-sample evaluation report."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import geometry

REPORT_COLUMNS = ("sample_id", "dice_unaligned", "dice_after", "dice_after_reverse", "ice_rms", "affine_param_error")


def dice(mask_x, mask_y) -> float:
    """2|X n Y| / (|X| + |Y|); two empty masks score 1."""
    x = np.asarray(mask_x)
    y = np.asarray(mask_y)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    for m in (x, y):
        if not np.isin(m, (0, 1)).all():
            raise ValueError("dice expects binary masks with values in {0, 1}")
    x = x.astype(bool)
    y = y.astype(bool)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def _interior(x: torch.Tensor, border: int) -> torch.Tensor:
    if border <= 0:
        return x
    idx = (slice(None), slice(None)) + tuple(slice(border, s - border) for s in x.shape[2:])
    return x[idx]


def inverse_consistency_error(
    affine_ab: torch.Tensor,
    field_ab: Optional[torch.Tensor],
    affine_ba: torch.Tensor,
    field_ba: Optional[torch.Tensor],
    xa: torch.Tensor,
    xb: Optional[torch.Tensor] = None,
    border: int = 2,
) -> torch.Tensor:
    """Per-sample RMS between an image and its round trip through both transforms.

    ``xa`` goes A->B->A, ``xb`` (if given) B->A->B, and the two errors are
    averaged.  A ``border``-voxel band is excluded because padding dominates it.
    """
    def roundtrip_rms(x, first, second):
        there = geometry.warp_image(x, *first)
        back = geometry.warp_image(there, *second)
        d = _interior(back - x, border)
        return d.pow(2).flatten(1).mean(1).sqrt()

    ab, ba = (affine_ab, field_ab), (affine_ba, field_ba)
    err = roundtrip_rms(xa, ab, ba)
    if xb is not None:
        err = 0.5 * (err + roundtrip_rms(xb, ba, ab))
    return err


@dataclass
class EvalRow:
    sample_id: int
    dice_unaligned: float
    dice_after: float
    dice_after_reverse: float
    ice_rms: float
    affine_param_error: float


@dataclass
class EvalReport:
    rows: List[EvalRow]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def aggregate(self) -> dict:
        """Mean and sample standard deviation of every numeric column."""
        out = {}
        for name in REPORT_COLUMNS[1:]:
            values = self.column(name)
            finite = values[np.isfinite(values)]
            out[name] = {
                "mean": float(finite.mean()) if finite.size else math.nan,
                "std": float(finite.std(ddof=1)) if finite.size > 1 else 0.0,
            }
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(asdict(r))
        return path

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(REPORT_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path} lacks columns {sorted(missing)}")
            rows = [
                EvalRow(int(r["sample_id"]), *(float(r[c]) for c in REPORT_COLUMNS[1:]))
                for r in reader
            ]
        return cls(rows)

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [f"{'metric':<20} {'mean':>9} {'sd':>9}", "-" * 40]
        for name, stats in agg.items():
            lines.append(f"{name:<20} {stats['mean']:>9.4f} {stats['std']:>9.4f}")
        lines.append(f"samples: {len(self.rows)}")
        return "\n".join(lines)


def _masks(samples, attr) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(s, attr) for s in samples]).astype(np.float32))[:, None]


def evaluate(checkpoint, samples, out_dir=None, batch_size: int = 10) -> EvalReport:
    """Register every sample both ways and score the warped masks.

    Masks are warped with nearest interpolation so they stay binary.  With
    ``out_dir`` set, writes ``eval_report.csv`` and ``eval_summary.txt``.
    """
    from .data import to_tensors
    from .training import _model_of, register_pair

    model = _model_of(checkpoint)
    samples = list(samples)
    if samples and tuple(samples[0].shape) != model.cfg.image_shape:
        raise ValueError(f"data shape {samples[0].shape} does not match checkpoint shape {model.cfg.image_shape}")
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        xa, xb = to_tensors(chunk)
        reg = register_pair(model, xa, xb)
        ma, mb = _masks(chunk, "mask_a"), _masks(chunk, "mask_b")
        wa = geometry.warp_image(ma, reg.affine_ab, reg.field_ab, "nearest", 0.0)
        wb = geometry.warp_image(mb, reg.affine_ba, reg.field_ba, "nearest", 0.0)
        with torch.no_grad():
            ice = inverse_consistency_error(reg.affine_ab, reg.field_ab, reg.affine_ba, reg.field_ba, xa, xb)
        for i, s in enumerate(chunk):
            gt = getattr(s, "gt_affine", None)
            rows.append(EvalRow(
                sample_id=start + i,
                dice_unaligned=dice(s.mask_a, s.mask_b),
                dice_after=dice(wa[i, 0].numpy().astype(np.uint8), s.mask_b),
                dice_after_reverse=dice(wb[i, 0].numpy().astype(np.uint8), s.mask_a),
                ice_rms=float(ice[i]),
                affine_param_error=float(np.abs(reg.affine_ab[i].numpy() - gt).mean()) if gt is not None else math.nan,
            ))
    report = EvalReport(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "eval_report.csv")
        (out / "eval_summary.txt").write_text(report.summary() + "\n")
    return report
