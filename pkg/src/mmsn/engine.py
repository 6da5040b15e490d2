"""Multi-modal MSN pretraining loop.

Randomness is derived, never carried: the epoch's sample order comes from
``SeedSequence([seed, 0, epoch])`` and the views of the ``i``-th image in
global step ``s`` from ``SeedSequence([seed, 1, s, i])``. Resuming from a
checkpoint therefore needs only the counters, and results do not depend on
how augmentation work is scheduled.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from . import checkpoint as ckpt_io
from .data import DatasetManifest, Sample
from .ehr import FeatureGroupSpec, assemble_batch, parse_feature_group
from .encoders import ModelConfig, MultimodalMSN
from .errors import CheckpointMismatch, EmptyBatch, InvalidDistribution, NonFiniteLoss
from .loss import LossBreakdown, LossConfig, total_loss
from .views import ViewBundle, ViewConfig, build_view_bundle

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = 64
    max_epochs: int = 100
    # optional hard cap on optimizer steps; also shortens the cosine horizon
    max_steps: int | None = None
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Literal["cosine_annealing"] = "cosine_annealing"
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-5
    grad_clip: float | None = None
    seed: int = 0
    feature_group: str = "none"
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size, max_epochs and learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.early_stop_patience < 1 or self.weight_decay < 0:
            raise ValueError("early_stop_patience must be >= 1 and weight_decay >= 0")
        parse_feature_group(self.feature_group)
        return self

    @property
    def features(self) -> FeatureGroupSpec | None:
        return parse_feature_group(self.feature_group)


def cosine_lr(epoch: int, base_lr: float, horizon: int) -> float:
    """Per-epoch cosine annealing from ``base_lr`` at epoch 0 to 0 at ``horizon``."""
    t = min(max(epoch, 0), horizon) / horizon
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class EarlyStopping:
    patience: int
    min_delta: float
    best: float = math.inf
    bad_epochs: int = 0

    def update(self, value: float) -> bool:
        """Record one epoch; True once ``patience`` epochs passed without improvement."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class CollatedBatch:
    target: torch.Tensor
    grid: tuple[int, int]
    anchor_views: list  # [(patches (B, V, N, P), keep (B, V, k) | None, grid)]
    x_ehr: torch.Tensor | None


def collate(bundles: Sequence[ViewBundle], cfg: ViewConfig, x_ehr: np.ndarray | None = None,
            dtype=torch.float32) -> CollatedBatch:
    def t(a):
        return torch.as_tensor(np.asarray(a), dtype=dtype)

    target = t(np.stack([b.target.patches for b in bundles]))
    groups = []
    R = cfg.n_random_masked
    spans = [(0, R, cfg.grid), (R, cfg.n_anchor_views, cfg.focal_grid)]
    for lo, hi, grid in spans:
        if hi <= lo:
            continue
        patches = t(np.stack([np.stack([v.patches for v in b.anchors[lo:hi]]) for b in bundles]))
        keep_np = np.stack([np.stack([v.mask.as_array() for v in b.anchors[lo:hi]]) for b in bundles])
        keep = None if keep_np.shape[-1] == grid[0] * grid[1] else torch.as_tensor(keep_np)
        groups.append((patches, keep, grid))
    return CollatedBatch(target, cfg.grid, groups, None if x_ehr is None else t(x_ehr))


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model or resume training."""

    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def epoch(self) -> int:
        return self.meta["epoch"]

    @property
    def config(self) -> dict:
        return self.meta["config"]

    def configs(self):
        c = self.meta["config"]
        return (ViewConfig(**c["view"]), ModelConfig(**c["model"]),
                LossConfig(**c["loss"]), PretrainConfig(**c["pretrain"]))

    def build_model(self) -> MultimodalMSN:
        view_cfg, model_cfg, loss_cfg, cfg = self.configs()
        model = build_model(view_cfg, model_cfg, loss_cfg, cfg)
        load_model_arrays(model, self.arrays)
        return model

    def save(self, path: str | Path) -> Path:
        return ckpt_io.write_archive(path, self.arrays, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = ckpt_io.read_archive(path)
        return cls(arrays, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)


def build_model(view_cfg: ViewConfig, model_cfg: ModelConfig, loss_cfg: LossConfig,
                cfg: PretrainConfig) -> MultimodalMSN:
    features = cfg.features
    vit_cfg = model_cfg.vit_config(patch_size=view_cfg.patch_size, channels=view_cfg.channels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = MultimodalMSN(
            vit_cfg,
            n_prototypes=loss_cfg.n_prototypes,
            n_proj=model_cfg.n_proj,
            head_hidden=model_cfg.head_hidden,
            n_ehr=None if features is None else features.dim,
            ehr_dim=model_cfg.ehr_dim,
        )
    return model.to(DTYPES[cfg.dtype])


def load_model_arrays(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    for name, tensor in state.items():
        key = f"model/{name}"
        if key not in arrays:
            raise CheckpointMismatch(f"checkpoint lacks {name}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} != model {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(np.array(arr)).to(tensor.dtype)
    extra = {k[len("model/"):] for k in arrays if k.startswith("model/")} - set(state)
    if extra:
        raise CheckpointMismatch(f"checkpoint has unknown parameters {sorted(extra)}")
    model.load_state_dict(state)


class Pretrainer:
    """Owns the model, optimizer and counters of one pretraining run."""

    def __init__(self, view_cfg: ViewConfig | None = None, model_cfg: ModelConfig | None = None,
                 loss_cfg: LossConfig | None = None, cfg: PretrainConfig | None = None):
        self.view_cfg = view_cfg or ViewConfig()
        self.model_cfg = model_cfg or ModelConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.cfg = cfg or PretrainConfig()
        self.features = self.cfg.features
        self.dtype = DTYPES[self.cfg.dtype]
        self.model = build_model(self.view_cfg, self.model_cfg, self.loss_cfg, self.cfg)
        self.param_names = [n for n, _ in self.model.trainable_named_parameters()]
        self.optimizer = torch.optim.AdamW(
            [p for _, p in self.model.trainable_named_parameters()],
            lr=self.cfg.learning_rate,
            betas=self.cfg.betas,
            eps=self.cfg.eps,
            weight_decay=self.cfg.weight_decay,
        )
        self.stopper = EarlyStopping(self.cfg.early_stop_patience, self.cfg.early_stop_min_delta)
        self.epoch = 0
        self.step = 0
        self.epoch_losses: list[float] = []
        self.log: list[dict] = []
        self.stopped = False
        self._pixels: dict[str, np.ndarray] = {}

    # -- one optimization step ------------------------------------------------

    def _bundles(self, samples: Sequence[Sample], root) -> list[ViewBundle]:
        out = []
        for i, s in enumerate(samples):
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 1, self.step, i]))
            out.append(build_view_bundle(self._image(s, root), self.view_cfg, rng))
        return out

    def _image(self, s: Sample, root) -> np.ndarray:
        if s.sample_id not in self._pixels:
            self._pixels[s.sample_id] = s.pixels(root)
        return self._pixels[s.sample_id]

    def collate(self, samples: Sequence[Sample], root=None) -> CollatedBatch:
        x_ehr = None
        if self.features is not None:
            x_ehr = assemble_batch([s.ehr for s in samples], self.features)
        return collate(self._bundles(samples, root), self.view_cfg, x_ehr, self.dtype)

    def loss(self, batch: CollatedBatch) -> LossBreakdown:
        z = self.model.anchor_projections(batch.anchor_views, batch.x_ehr)
        z_plus = self.model.target_projections(batch.target, batch.grid)
        lc = self.loss_cfg
        return total_loss(z, z_plus, self.model.prototypes, lc.tau, lc.tau_plus, lc.lam)

    def train_step(self, samples: Sequence[Sample], root=None) -> LossBreakdown:
        if len(samples) == 0:
            raise EmptyBatch("empty batch")
        self.model.train()
        batch = self.collate(samples, root)
        try:
            out = self.loss(batch)
        except InvalidDistribution as exc:
            # NaN assignments fail the distribution check before a loss exists
            diag = self._diagnostics(None)
            if diag["nonfinite_parameters"]:
                raise NonFiniteLoss(f"non-finite parameters at step {self.step}", diag) from exc
            raise
        if not torch.isfinite(out.total.detach()):
            raise NonFiniteLoss(f"non-finite loss at step {self.step}", self._diagnostics(out))
        self.optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.optimizer.param_groups[0]["params"], self.cfg.grad_clip)
        self.optimizer.step()
        self.model.update_target(self.model_cfg.ema_momentum)
        record = {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.optimizer.param_groups[0]["lr"],
            **out.as_dict(),
        }
        self.log.append(record)
        self.step += 1
        return out

    def _diagnostics(self, out: LossBreakdown | None) -> dict:
        bad = [n for n, p in self.model.named_parameters() if not torch.isfinite(p).all()]
        return {
            "step": self.step,
            "epoch": self.epoch,
            "ce_term": None if out is None else float(out.ce_term.detach()),
            "entropy_term": None if out is None else float(out.entropy_term.detach()),
            "nonfinite_parameters": bad,
            "max_abs_parameter": max(float(p.detach().abs().max()) for p in self.model.parameters()),
        }

    # -- epochs ------------------------------------------------------------------

    def horizon(self, n_samples: int) -> int:
        per_epoch = max(1, math.ceil(n_samples / self.cfg.batch_size))
        if self.cfg.max_steps is None:
            return self.cfg.max_epochs
        return max(1, min(self.cfg.max_epochs, math.ceil(self.cfg.max_steps / per_epoch)))

    def fit(self, manifest: DatasetManifest | Sequence[Sample], log_path: str | Path | None = None,
            until_epoch: int | None = None) -> "Pretrainer":
        """Train until max_epochs / max_steps, early stop, or ``until_epoch``."""
        samples = list(manifest)
        root = getattr(manifest, "root", None)
        if not samples:
            raise EmptyBatch("cannot pretrain on an empty manifest")
        horizon = self.horizon(len(samples))
        log_fh = open(log_path, "a") if log_path is not None else None
        try:
            while not self.stopped and self.epoch < self.cfg.max_epochs:
                if until_epoch is not None and self.epoch >= until_epoch:
                    break
                if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                    break
                lr = cosine_lr(self.epoch, self.cfg.learning_rate, horizon)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                order = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0, self.epoch])).permutation(len(samples))
                totals = []
                for start in range(0, len(samples), self.cfg.batch_size):
                    if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                        break
                    batch = [samples[i] for i in order[start : start + self.cfg.batch_size]]
                    out = self.train_step(batch, root)
                    totals.append(float(out.total.detach()))
                    if log_fh is not None:
                        log_fh.write(json.dumps(self.log[-1]) + "\n")
                epoch_loss = float(np.mean(totals))
                self.epoch_losses.append(epoch_loss)
                logger.info("epoch %d loss %.6f lr %.3g", self.epoch, epoch_loss, lr)
                self.epoch += 1
                if self.stopper.update(epoch_loss):
                    self.stopped = True
        finally:
            if log_fh is not None:
                log_fh.close()
        return self

    # -- persistence -------------------------------------------------------------

    def config_snapshot(self) -> dict:
        return {
            "view": self.view_cfg.model_dump(mode="json"),
            "model": self.model_cfg.model_dump(mode="json"),
            "loss": self.loss_cfg.model_dump(mode="json"),
            "pretrain": self.cfg.model_dump(mode="json"),
        }

    def checkpoint(self) -> Checkpoint:
        arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        opt = self.optimizer.state_dict()
        for idx, name in enumerate(self.param_names):
            for key, value in opt["state"].get(idx, {}).items():
                arrays[f"optim/{name}/{key}"] = torch.as_tensor(value).cpu().numpy()
        groups = [{k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]]
        meta = {
            "config": self.config_snapshot(),
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.cfg.seed,
            "feature_group": self.cfg.feature_group,
            "n_ehr": None if self.features is None else self.features.dim,
            "embed_dim": self.model.embed_dim,
            "stopped": self.stopped,
            "early_stop": {"best": self.stopper.best if math.isfinite(self.stopper.best) else None,
                           "bad_epochs": self.stopper.bad_epochs},
            "epoch_losses": self.epoch_losses,
            "optimizer": {"param_groups": groups},
            "rng": {"views": "SeedSequence([seed, 1, step, i])", "order": "SeedSequence([seed, 0, epoch])"},
        }
        return Checkpoint(arrays, json.loads(json.dumps(meta)))

    def save(self, path: str | Path) -> Path:
        return self.checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint | str | Path) -> "Pretrainer":
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        view_cfg, model_cfg, loss_cfg, cfg = checkpoint.configs()
        self = cls(view_cfg, model_cfg, loss_cfg, cfg)
        load_model_arrays(self.model, checkpoint.arrays)
        state = {}
        for idx, name in enumerate(self.param_names):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr = checkpoint.arrays.get(f"optim/{name}/{key}")
                if arr is not None:
                    entry[key] = torch.from_numpy(np.array(arr))
            if entry:
                state[idx] = entry
        groups = checkpoint.meta["optimizer"]["param_groups"]
        for g, params in zip(groups, self.optimizer.state_dict()["param_groups"]):
            g["params"] = params["params"]
            g["betas"] = tuple(g["betas"])
        self.optimizer.load_state_dict({"state": state, "param_groups": groups})
        m = checkpoint.meta
        self.epoch, self.step, self.stopped = m["epoch"], m["step"], m["stopped"]
        best = m["early_stop"]["best"]
        self.stopper.best = math.inf if best is None else best
        self.stopper.bad_epochs = m["early_stop"]["bad_epochs"]
        self.epoch_losses = list(m["epoch_losses"])
        return self


def train_step(batch: Sequence[Sample], state: Pretrainer) -> tuple[LossBreakdown, Pretrainer]:
    out = state.train_step(batch)
    return out, state


def train(manifest: DatasetManifest, view_cfg: ViewConfig | None = None, model_cfg: ModelConfig | None = None,
          loss_cfg: LossConfig | None = None, cfg: PretrainConfig | None = None,
          log_path: str | Path | None = None) -> Checkpoint:
    trainer = Pretrainer(view_cfg, model_cfg, loss_cfg, cfg)
    trainer.fit(manifest, log_path=log_path)
    return trainer.checkpoint()
