"""Downstream protocol: linear probing, fine-tuning and the low-data regime.

The frozen target encoder is the feature extractor; the classifier is one
affine map to 14 logits trained with per-label binary cross-entropy (Adam).
Every protocol run trains one (learning rate, scheduler) configuration and the
validation-best run is the only one scored on the test split.
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict

from .data import N_LABELS, DatasetManifest, subsample_fraction
from .encoders import MultimodalMSN, VisionTransformer
from .engine import Checkpoint, EarlyStopping, cosine_lr
from .errors import SingleClass
from .metrics import MetricReport, macro_auroc, metric_report
from .views import ViewConfig, center_view, finetune_view, normalize, patchify

logger = logging.getLogger(__name__)

COSINE = "cosine_annealing_with_earlystop"
PLATEAU = "reduce_on_plateau"


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["linear", "finetune"] = "linear"
    learning_rates: tuple[float, ...] = (1e-3, 5e-4, 1e-4)
    plateau_learning_rates: tuple[float, ...] = (5e-4, 1e-4)
    max_epochs: int = 50
    batch_size: int = 64
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-4
    n_bootstrap: int = 1000
    low_data_fractions: tuple[float, ...] = (0.01, 0.05, 0.10)
    low_data_subsets: int = 5
    seed: int = 0


@dataclass(frozen=True)
class RunSpec:
    learning_rate: float
    scheduler: str


def protocol_grid(cfg: ProbeConfig) -> list[RunSpec]:
    """Cosine + early stopping per learning rate, then reduce-on-plateau ones."""
    return [RunSpec(lr, COSINE) for lr in cfg.learning_rates] + [
        RunSpec(lr, PLATEAU) for lr in cfg.plateau_learning_rates
    ]


# ---------------------------------------------------------------- features


def _as_model(source) -> tuple[MultimodalMSN, ViewConfig]:
    if isinstance(source, Checkpoint):
        return source.build_model(), source.configs()[0]
    if isinstance(source, tuple):
        return source
    raise TypeError("expected a Checkpoint or a (model, ViewConfig) pair")


def _encode(encoder: VisionTransformer, views: Sequence[np.ndarray], view_cfg: ViewConfig) -> torch.Tensor:
    dtype = encoder.patch_embed.weight.dtype
    patches = np.stack([patchify(normalize(v, view_cfg), view_cfg.patch_size) for v in views])
    return encoder(torch.as_tensor(patches, dtype=dtype), view_cfg.grid)


def extract_embeddings(manifest: DatasetManifest, source, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """v_cxr+ of every sample (center view, target encoder) and its labels."""
    model, view_cfg = _as_model(source)
    encoder = model.target
    encoder.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            views = [center_view(manifest.image(i), view_cfg)
                     for i in range(start, min(start + batch_size, len(manifest)))]
            out.append(_encode(encoder, views, view_cfg).double().numpy())
    X = np.concatenate(out) if out else np.zeros((0, model.embed_dim))
    return X, manifest.labels()


# ---------------------------------------------------------------- probe training


@dataclass
class ProbeResult:
    spec: RunSpec
    classifier: nn.Linear
    encoder: VisionTransformer | None
    best_epoch: int
    val_auroc: float
    degenerate_labels: list[int]
    history: list[dict] = field(default_factory=list)
    # linear mode: train-split mean/std applied before f_c (still one affine map)
    shift: torch.Tensor | None = None
    scale: torch.Tensor | None = None

    def summary(self) -> dict:
        return {
            "learning_rate": self.spec.learning_rate,
            "scheduler": self.spec.scheduler,
            "best_epoch": self.best_epoch,
            "val_auroc": None if math.isnan(self.val_auroc) else self.val_auroc,
            "epochs_run": len(self.history),
            "degenerate_labels": self.degenerate_labels,
        }


def degenerate_labels(Y: np.ndarray) -> list[int]:
    """Labels that are constant over the training rows."""
    Y = np.asarray(Y)
    return [j for j in range(Y.shape[1]) if Y.shape[0] == 0 or Y[:, j].min() == Y[:, j].max()]


def _score_auroc(scores: np.ndarray, Y: np.ndarray, exclude) -> float:
    try:
        return macro_auroc(scores, Y, exclude)
    except SingleClass:
        return math.nan


class _Features:
    """Uniform access to (features, labels) for linear or fine-tune mode."""

    def __init__(self, data, encoder, view_cfg, train: bool, seed: int, shift=None, scale=None):
        self.encoder = encoder
        self.view_cfg = view_cfg
        self.train = train
        self.seed = seed
        if isinstance(data, DatasetManifest):
            self.manifest = data
            self.X = None
            self.Y = data.labels()
        else:
            self.manifest = None
            X, Y = data
            self.X = torch.as_tensor(np.asarray(X), dtype=torch.float64)
            if shift is not None:
                self.X = (self.X - shift) / scale
            self.Y = np.asarray(Y)

    def __len__(self):
        return self.Y.shape[0]

    def batch(self, idx: np.ndarray, epoch: int) -> torch.Tensor:
        if self.manifest is None:
            return self.X[idx]
        views = []
        for i in idx:
            img = self.manifest.image(int(i))
            if self.train:
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch, int(i)]))
                views.append(finetune_view(img, rng, self.view_cfg))
            else:
                views.append(center_view(img, self.view_cfg))
        return _encode(self.encoder, views, self.view_cfg).double()


def _init_classifier(dim: int, seed: int) -> nn.Linear:
    # explicit generator so concurrent runs never share the global torch RNG
    gen = torch.Generator().manual_seed(seed)
    clf = nn.Linear(dim, N_LABELS, dtype=torch.float64)
    bound = 1.0 / math.sqrt(dim)
    with torch.no_grad():
        clf.weight.copy_(torch.rand(clf.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        clf.bias.copy_(torch.rand(clf.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
    return clf


def train_probe(train, val, spec: RunSpec, cfg: ProbeConfig, encoder: VisionTransformer | None = None,
                view_cfg: ViewConfig | None = None, seed: int = 0) -> ProbeResult:
    """Fit f_c (and, in fine-tune mode, a copy of the encoder).

    ``train``/``val`` are ``(X, Y)`` embedding pairs in linear mode and
    manifests in fine-tune mode. Returns the validation-AUROC-best epoch.
    """
    finetune = cfg.mode == "finetune"
    if finetune:
        if encoder is None or view_cfg is None:
            raise ValueError("fine-tuning needs an encoder and a view config")
        encoder = copy.deepcopy(encoder).double()
        for p in encoder.parameters():
            p.requires_grad_(True)
    shift = scale = None
    if not finetune:
        X = torch.as_tensor(np.asarray(train[0]), dtype=torch.float64)
        shift, scale = X.mean(0), X.std(0, unbiased=False).clamp_min(1e-6)
    tr = _Features(train, encoder, view_cfg, True, seed, shift, scale)
    va = _Features(val, encoder, view_cfg, False, seed, shift, scale)
    if len(tr) == 0:
        raise ValueError("empty training set")
    dim = encoder.embed_dim if finetune else tr.X.shape[1]
    degenerate = degenerate_labels(tr.Y)

    clf = _init_classifier(dim, seed)
    params = list(clf.parameters()) + (list(encoder.parameters()) if finetune else [])
    opt = torch.optim.Adam(params, lr=spec.learning_rate)
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="max") if spec.scheduler == PLATEAU else None
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.early_stop_min_delta)
    Ytr = torch.as_tensor(tr.Y, dtype=torch.float64)

    best = (-math.inf, -1, None, None)
    history = []
    for epoch in range(cfg.max_epochs):
        if spec.scheduler == COSINE:
            for g in opt.param_groups:
                g["lr"] = cosine_lr(epoch, spec.learning_rate, cfg.max_epochs)
        if finetune:
            encoder.train()
        order = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch])).permutation(len(tr))
        losses = []
        for start in range(0, len(tr), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = clf(tr.batch(idx, epoch))
            loss = F.binary_cross_entropy_with_logits(logits, Ytr[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))

        if finetune:
            encoder.eval()
        with torch.no_grad():
            scores = torch.sigmoid(clf(_batched(va, cfg.batch_size))).numpy()
        val_auroc = _score_auroc(scores, va.Y, degenerate)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_auroc": None if math.isnan(val_auroc) else val_auroc,
                        "lr": opt.param_groups[0]["lr"]})
        score = -math.inf if math.isnan(val_auroc) else val_auroc
        if best[2] is None or score > best[0]:
            best = (score, epoch, copy.deepcopy(clf.state_dict()),
                    copy.deepcopy(encoder.state_dict()) if finetune else None)
        if plateau is not None:
            plateau.step(score if math.isfinite(score) else 0.0)
        elif stopper.update(-score if math.isfinite(score) else math.inf):
            break

    clf.load_state_dict(best[2])
    if finetune:
        encoder.load_state_dict(best[3])
        encoder.eval()
    return ProbeResult(spec, clf, encoder if finetune else None, best[1],
                       best[0] if math.isfinite(best[0]) else math.nan, degenerate, history, shift, scale)


def _batched(feats: _Features, batch_size: int) -> torch.Tensor:
    if len(feats) == 0:
        return torch.zeros((0, 0), dtype=torch.float64)
    parts = [feats.batch(np.arange(s, min(s + batch_size, len(feats))), 0)
             for s in range(0, len(feats), batch_size)]
    return torch.cat(parts)


def predict(result: ProbeResult, data, view_cfg: ViewConfig | None = None, batch_size: int = 64) -> np.ndarray:
    feats = _Features(data, result.encoder, view_cfg, False, 0, result.shift, result.scale)
    with torch.no_grad():
        return torch.sigmoid(result.classifier(_batched(feats, batch_size))).numpy()


# ---------------------------------------------------------------- protocols


@dataclass
class ProtocolResult:
    mode: str
    runs: list[dict]
    best_index: int
    report: MetricReport
    n_test_evaluations: int = 1

    def to_dict(self) -> dict:
        return {"mode": self.mode, "runs": self.runs, "best_index": self.best_index,
                "n_test_evaluations": self.n_test_evaluations, "report": self.report.to_dict()}


def _split_inputs(mode: str, manifests, model: MultimodalMSN, view_cfg: ViewConfig, batch_size: int):
    if mode == "linear":
        return [extract_embeddings(m, (model, view_cfg), batch_size) for m in manifests]
    return list(manifests)


def evaluate_test(result: ProbeResult, test, cfg: ProbeConfig, view_cfg: ViewConfig, sample_ids) -> MetricReport:
    scores = predict(result, test, view_cfg, cfg.batch_size)
    Y = test.labels() if isinstance(test, DatasetManifest) else np.asarray(test[1])
    return metric_report(scores, Y, n_boot=cfg.n_bootstrap, seed=cfg.seed,
                         exclude=result.degenerate_labels, sample_ids=sample_ids)


def run_protocol(train: DatasetManifest, val: DatasetManifest, test: DatasetManifest, source,
                 cfg: ProbeConfig | None = None, mode: str | None = None, jobs: int = 1) -> ProtocolResult:
    """Run every grid configuration, then score only the validation-best on test."""
    cfg = cfg or ProbeConfig()
    if mode is not None:
        cfg = cfg.model_copy(update={"mode": mode})
    model, view_cfg = _as_model(source)
    tr, va, te = _split_inputs(cfg.mode, (train, val, test), model, view_cfg, cfg.batch_size)
    grid = protocol_grid(cfg)

    def one(k):
        return train_probe(tr, va, grid[k], cfg, encoder=model.target, view_cfg=view_cfg, seed=cfg.seed * 1000 + k)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(len(grid))))
    else:
        results = [one(k) for k in range(len(grid))]
    runs = []
    for k, res in enumerate(results):
        logger.info("run %d %s lr=%g val_auroc=%s", k, res.spec.scheduler, res.spec.learning_rate, res.val_auroc)
        runs.append({"run": k, "mode": cfg.mode, **res.summary()})
    scores = [(-math.inf if math.isnan(r.val_auroc) else r.val_auroc) for r in results]
    best = int(np.argmax(scores))
    for r in runs:
        r["selected"] = r["run"] == best
    report = evaluate_test(results[best], te, cfg, view_cfg, [s.sample_id for s in test])
    return ProtocolResult(cfg.mode, runs, best, report)


@dataclass
class LowDataResult:
    runs: list[dict]
    reports: dict  # (fraction, seed) -> MetricReport | None

    def selected(self, fraction: float) -> dict:
        return next(r for r in self.runs if r["fraction"] == fraction and r["selected"])

    def to_dict(self) -> dict:
        return {"runs": self.runs,
                "reports": {f"{f}/{s}": (None if r is None else r.to_dict()) for (f, s), r in self.reports.items()}}


def low_data_protocol(train: DatasetManifest, val: DatasetManifest, test: DatasetManifest, source,
                      spec: RunSpec, cfg: ProbeConfig | None = None,
                      fractions: Sequence[float] | None = None) -> LowDataResult:
    """Fine-tune on seeded subsets of the training set, five per fraction.

    Every run is scored on the full test set; per fraction the run with the
    best validation AUROC is flagged ``selected``.
    """
    cfg = (cfg or ProbeConfig()).model_copy(update={"mode": "finetune"})
    fractions = tuple(fractions if fractions is not None else cfg.low_data_fractions)
    model, view_cfg = _as_model(source)
    runs, reports = [], {}
    for fi, fraction in enumerate(fractions):
        block = []
        for s in range(cfg.low_data_subsets):
            subset_seed = cfg.seed * 10_000 + fi * 100 + s
            subset = subsample_fraction(train, fraction, subset_seed)
            res = train_probe(subset, val, spec, cfg, encoder=model.target, view_cfg=view_cfg, seed=subset_seed)
            try:
                report = evaluate_test(res, test, cfg, view_cfg, [t.sample_id for t in test])
            except SingleClass:
                report = None
            reports[(fraction, s)] = report
            block.append({
                "fraction": fraction,
                "subset": s,
                "seed": subset_seed,
                "n_train": len(subset),
                "sample_ids": [x.sample_id for x in subset],
                "val_auroc": None if math.isnan(res.val_auroc) else res.val_auroc,
                "test_auroc": None if report is None else report.auroc,
                "test_auprc": None if report is None else report.auprc,
            })
        keyed = [(-math.inf if b["val_auroc"] is None else b["val_auroc"]) for b in block]
        best = int(np.argmax(keyed))
        for k, b in enumerate(block):
            b["selected"] = k == best
        runs.extend(block)
    return LowDataResult(runs, reports)
