"""Alternating three-optimizer training, checkpoints and inference."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import geometry
from .losses import REPORT_FIELDS, LossOptions, full_forward
from .networks import GROUPS, FireModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("iteration", "group") + REPORT_FIELDS
DEFAULT_ORDER = ("t_af", "t_nr", "g")


class CheckpointError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass


def schedule_group(iteration: int, order: Sequence[str] = DEFAULT_ORDER, block: int = 1) -> str:
    """Parameter group updated at ``iteration``.

    ``block`` consecutive iterations go to each group before rotating; the
    default rotates every iteration: 0 -> t_af, 1 -> t_nr, 2 -> g, 3 -> t_af, ...
    """
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return order[(iteration // block) % len(order)]


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_taf: float = 5e-5
    lr_tnr: float = 5e-5
    lr_gf: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: Optional[str] = None
    schedule_order: Tuple[str, ...] = DEFAULT_ORDER
    schedule_block: int = 1
    clip_grad_norm: Optional[float] = 1.0
    use_reg_ic: bool = True
    smooth_lambda: Optional[float] = None
    smooth_operator: str = "laplacian"
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.schedule_order = tuple(self.schedule_order)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_taf", "lr_tnr", "lr_gf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if sorted(self.schedule_order) != sorted(GROUPS):
            raise ValueError(f"schedule_order must be a permutation of {GROUPS}")
        if self.schedule_block < 1:
            raise ValueError("schedule_block must be >= 1")

    @property
    def group_lr(self) -> Dict[str, float]:
        return {"t_af": self.lr_taf, "t_nr": self.lr_tnr, "g": self.lr_gf}

    @property
    def loss_options(self) -> LossOptions:
        return LossOptions(self.use_reg_ic, self.smooth_lambda, self.smooth_operator)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["schedule_order"] = list(self.schedule_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Trainer:
    """Model, three Adam optimizers and the iteration counter.

    This is also the in-memory form of a checkpoint.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.model = FireModel(config.model, seed=config.seed)
        self.optimizers = {
            g: torch.optim.Adam(self.model.group_parameters(g), lr=config.group_lr[g], betas=(0.9, 0.999), eps=1e-8)
            for g in GROUPS
        }
        self.iteration = 0
        self.step_counts = {g: 0 for g in GROUPS}

    @property
    def next_group(self) -> str:
        return schedule_group(self.iteration, self.config.schedule_order, self.config.schedule_block)

    def _batch_rng(self) -> np.random.Generator:
        # a pure function of (seed, iteration) so resumed runs draw the same batches
        return np.random.default_rng([self.config.seed, self.iteration])

    def draw_batch(self, xa: torch.Tensor, xb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        count = xa.shape[0]
        bs = self.config.batch_size
        idx = self._batch_rng().choice(count, size=bs, replace=count < bs)
        idx = torch.from_numpy(np.sort(idx))
        return xa[idx], xb[idx]

    def step(self, xa: torch.Tensor, xb: torch.Tensor) -> Dict[str, float]:
        """One optimisation step of the scheduled group on the batch (xa, xb)."""
        group = self.next_group
        params = self.model.group_parameters(group)
        # only the scheduled group needs gradients; the rest are frozen this iteration
        for g in GROUPS:
            for p in self.model.group_parameters(g):
                p.requires_grad_(g == group)
        opt = self.optimizers[group]
        opt.zero_grad(set_to_none=True)
        _, report = full_forward(self.model, xa, xb, self.config.loss_options)
        report.total.backward()
        if self.config.clip_grad_norm:
            torch.nn.utils.clip_grad_norm_(params, self.config.clip_grad_norm)
        opt.step()
        opt.zero_grad(set_to_none=True)
        for p in self.model.parameters():
            p.requires_grad_(True)
        row = {"iteration": self.iteration, "group": group, **report.as_dict()}
        self.step_counts[group] += 1
        self.iteration += 1
        return row


def _as_tensors(dataset, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(dataset, tuple):
        xa, xb = dataset
    else:
        from .data import to_tensors
        xa, xb = to_tensors(dataset, dtype)
    return xa.to(dtype), xb.to(dtype)


def train(
    config: TrainConfig,
    dataset,
    out_dir=None,
    trainer: Optional[Trainer] = None,
    log_every: int = 0,
) -> Tuple[Trainer, List[dict]]:
    """Run ``config.iterations`` steps (continuing ``trainer`` if given).

    ``dataset`` is a sequence of SyntheticSample or a pair of tensors
    ``(xa, xb)`` of shape (N, 1, *image_shape).  With ``out_dir`` set, writes
    ``train_log.csv``, periodic ``checkpoint_XXXXXX`` directories and a final
    ``checkpoint``.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    xa_all, xb_all = _as_tensors(dataset)
    if xa_all.shape[0] == 0:
        raise ValueError("empty dataset")
    expected = (1,) + config.model.image_shape
    if tuple(xa_all.shape[1:]) != expected or tuple(xb_all.shape[1:]) != expected:
        raise ValueError(f"dataset images {tuple(xa_all.shape[1:])} do not match model shape {expected}")
    trainer = trainer or Trainer(config)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = trainer.iteration == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
    rows = []
    end = trainer.iteration + config.iterations
    try:
        while trainer.iteration < end:
            xa, xb = trainer.draw_batch(xa_all, xb_all)
            try:
                row = trainer.step(xa, xb)
            except FloatingPointError as e:  # NonFiniteLossError or a non-finite warp grid
                if out is not None:
                    save_checkpoint(trainer, out / "checkpoint_last_good")
                raise TrainingAborted(f"iteration {trainer.iteration}: {e}") from e
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if log_every and row["iteration"] % log_every == 0:
                log.info("iter %d [%s] total=%.4f", row["iteration"], row["group"], row["total"])
            if out is not None and config.checkpoint_every and trainer.iteration % config.checkpoint_every == 0:
                save_checkpoint(trainer, out / f"checkpoint_{trainer.iteration:06d}")
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        save_checkpoint(trainer, out / "checkpoint")
    return trainer, rows


# -- checkpoints ------------------------------------------------------------

def _group_arrays(trainer: Trainer, group: str) -> Dict[str, np.ndarray]:
    arrays = {}
    opt = trainer.optimizers[group]
    for name, p in trainer.model.named_group_parameters(group).items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
        state = opt.state.get(p)
        if state:
            arrays[f"exp_avg/{name}"] = state["exp_avg"].cpu().numpy()
            arrays[f"exp_avg_sq/{name}"] = state["exp_avg_sq"].cpu().numpy()
            arrays[f"step/{name}"] = np.asarray(float(state["step"]))
    return arrays


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Directory with ``<group>.npz`` per parameter group and ``meta.json``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for g in GROUPS:
        np.savez(tmp / f"{g}.npz", **_group_arrays(trainer, g))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": trainer.iteration,
        "step_counts": trainer.step_counts,
        "config": trainer.config.to_dict(),
    }
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path, model_config: Optional[ModelConfig] = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint directory.

    With ``model_config`` given, every stored array must match the shapes that
    config implies; nothing is assigned unless all groups validate.
    """
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path} has no meta.json") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt meta.json in {path}: {e}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} != supported {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(meta["config"])
    if model_config is not None:
        config.model = model_config
    trainer = Trainer(config)

    loaded = {}
    for g in GROUPS:
        f = path / f"{g}.npz"
        if not f.exists():
            raise CheckpointError(f"checkpoint {path} is missing group {g!r}")
        try:
            with np.load(f) as data:
                loaded[g] = {k: data[k] for k in data.files}
        except (zipfile.BadZipFile, EOFError, OSError, ValueError) as e:
            raise CheckpointError(f"corrupt group file {f}: {e}") from None
        params = trainer.model.named_group_parameters(g)
        for name, p in params.items():
            key = f"param/{name}"
            if key not in loaded[g]:
                raise CheckpointError(f"group {g!r} lacks parameter {name}")
            if tuple(loaded[g][key].shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {loaded[g][key].shape}, model {tuple(p.shape)}"
                )
        extra = {k.split("/", 1)[1] for k in loaded[g]} - set(params)
        if extra:
            raise CheckpointError(f"group {g!r} has unexpected arrays {sorted(extra)[:3]}")

    with torch.no_grad():
        for g in GROUPS:
            arrays = loaded[g]
            opt = trainer.optimizers[g]
            for name, p in trainer.model.named_group_parameters(g).items():
                p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
                if f"exp_avg/{name}" in arrays:
                    opt.state[p] = {
                        "step": torch.tensor(float(arrays[f"step/{name}"])),
                        "exp_avg": torch.from_numpy(arrays[f"exp_avg/{name}"].copy()),
                        "exp_avg_sq": torch.from_numpy(arrays[f"exp_avg_sq/{name}"].copy()),
                    }
    trainer.iteration = int(meta["iteration"])
    trainer.step_counts = {g: int(meta["step_counts"][g]) for g in GROUPS}
    return trainer


# -- inference ----------------------------------------------------------------

@dataclass
class Registration:
    affine_ab: torch.Tensor
    field_ab: torch.Tensor
    affine_ba: torch.Tensor
    field_ba: torch.Tensor
    xa_warped: torch.Tensor   # x^A o phi^{A->B}
    xb_warped: torch.Tensor   # x^B o phi^{B->A}


def _model_of(obj) -> FireModel:
    return obj.model if isinstance(obj, Trainer) else obj


@torch.no_grad()
def register_pair(checkpoint, xa: torch.Tensor, xb: torch.Tensor) -> Registration:
    """Predict both transforms for a batch of pairs and warp each image onto the other."""
    model = _model_of(checkpoint)
    for name, x in (("x^A", xa), ("x^B", xb)):
        if x.dim() != model.cfg.n + 2:
            raise ValueError(f"{name} must be batched (B, 1, *spatial), got {tuple(x.shape)}")
        if x.min() < -1 - 1e-6 or x.max() > 1 + 1e-6:
            raise ValueError(f"{name} is not normalized to [-1, 1]")
    fa, fb = model.encode(xa), model.encode(xb)
    A_ab, u_ab, _ = model.transform_from_features(fa, fb, "AB")
    A_ba, u_ba, _ = model.transform_from_features(fb, fa, "BA")
    return Registration(
        affine_ab=A_ab, field_ab=u_ab, affine_ba=A_ba, field_ba=u_ba,
        xa_warped=geometry.warp_image(xa, A_ab, u_ab),
        xb_warped=geometry.warp_image(xb, A_ba, u_ba),
    )
