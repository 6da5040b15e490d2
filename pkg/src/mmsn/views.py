"""Augmented views, patchification and patch masking for MSN pretraining.

Each image yields one unmasked global target view and ``M`` anchor views:
``n_random_masked`` global crops with random patch dropping and ``n_focal``
small crops whose own patch grid is kept whole (the crop itself is the focal
mask). All randomness is drawn from an injected ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from .errors import ImageTooSmall, NonDivisibleSize

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ViewConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = 224
    patch_size: int = 16
    focal_size: int = 96
    n_anchor_views: int = 11
    n_random_masked: int = 1
    n_focal: int = 10
    mask_ratio: float = 0.15
    hflip_prob: float = 0.5
    global_scale: tuple[float, float] = (0.3, 1.0)
    focal_scale: tuple[float, float] = (0.05, 0.3)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    # extra random patch dropping inside focal views (off: the crop is the mask)
    focal_extra_drop: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        p = self.patch_size
        if p <= 0 or self.image_size % p or self.focal_size % p:
            raise NonDivisibleSize(
                f"image_size {self.image_size} and focal_size {self.focal_size} "
                f"must be divisible by patch_size {p}"
            )
        if self.focal_size > self.image_size:
            raise ValueError("focal_size must not exceed image_size")
        if self.n_random_masked + self.n_focal != self.n_anchor_views:
            raise ValueError("n_random_masked + n_focal must equal n_anchor_views")
        if self.n_anchor_views < 1:
            raise ValueError("need at least one anchor view")
        if not 0 <= self.mask_ratio < 1 or not 0 <= self.focal_extra_drop < 1:
            raise ValueError("mask ratios must lie in [0, 1)")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have one entry per channel")
        return self

    @property
    def channels(self) -> int:
        return len(self.mean)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def focal_grid(self) -> tuple[int, int]:
        g = self.focal_size // self.patch_size
        return g, g


@dataclass(frozen=True)
class TransformParams:
    """Everything needed to replay one view exactly."""

    kind: str
    top: int
    left: int
    height: int
    width: int
    flip: bool
    out_size: int


@dataclass(frozen=True)
class MaskPattern:
    kept_indices: tuple[int, ...]
    total_patches: int
    grid: tuple[int, int]

    def __post_init__(self):
        kept = tuple(int(i) for i in self.kept_indices)
        if list(kept) != sorted(set(kept)):
            raise ValueError("kept indices must be sorted and unique")
        if kept and (kept[0] < 0 or kept[-1] >= self.total_patches):
            raise ValueError("kept index out of range")
        if self.grid[0] * self.grid[1] != self.total_patches:
            raise ValueError("grid does not match total_patches")
        object.__setattr__(self, "kept_indices", kept)

    @property
    def n_kept(self) -> int:
        return len(self.kept_indices)

    def is_rectangle(self) -> bool:
        """True when the kept patches form one axis-aligned block of the grid."""
        if not self.kept_indices:
            return False
        gw = self.grid[1]
        rows = [i // gw for i in self.kept_indices]
        cols = [i % gw for i in self.kept_indices]
        r0, r1, c0, c1 = min(rows), max(rows), min(cols), max(cols)
        return self.n_kept == (r1 - r0 + 1) * (c1 - c0 + 1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.kept_indices, dtype=np.int64)


@dataclass
class View:
    patches: np.ndarray  # (total_patches, patch_dim), full grid
    mask: MaskPattern
    params: TransformParams

    @property
    def kept_patches(self) -> np.ndarray:
        return self.patches[self.mask.as_array()]


@dataclass
class ViewBundle:
    target: View
    anchors: list[View]

    @property
    def provenance(self) -> list[dict]:
        return [asdict(self.target.params)] + [asdict(a.params) for a in self.anchors]


# ---------------------------------------------------------------- transforms


def sample_crop(shape: tuple[int, int], scale, ratio, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random-resized-crop box (top, left, h, w); falls back to a center crop."""
    H, W = shape
    area = H * W
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        w, h = W, H
    return (H - h) // 2, (W - w) // 2, h, w


def sample_transform(shape: tuple[int, int], kind: str, rng: np.random.Generator, cfg: ViewConfig) -> TransformParams:
    if kind not in ("global", "focal"):
        raise ValueError(f"kind must be 'global' or 'focal', got {kind!r}")
    if min(shape) < cfg.focal_size:
        raise ImageTooSmall(f"image {shape} smaller than focal size {cfg.focal_size}")
    scale = cfg.global_scale if kind == "global" else cfg.focal_scale
    top, left, h, w = sample_crop(shape, scale, cfg.crop_ratio, rng)
    flip = bool(rng.random() < cfg.hflip_prob)
    size = cfg.image_size if kind == "global" else cfg.focal_size
    return TransformParams(kind, top, left, h, w, flip, size)


def render(image: np.ndarray, params: TransformParams) -> np.ndarray:
    """Apply a crop/resize/flip recipe to a 2-D grayscale image."""
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32)[None]
    out = TF.resized_crop(
        t, params.top, params.left, params.height, params.width,
        [params.out_size, params.out_size],
        interpolation=InterpolationMode.BILINEAR, antialias=True,
    )[0].numpy()
    if params.flip:
        out = hflip(out)
    return out.astype(np.float32)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def apply_transforms(image: np.ndarray, kind: str, rng: np.random.Generator, cfg: ViewConfig | None = None) -> np.ndarray:
    """Random resized crop + horizontal flip. No color jitter, no blur."""
    cfg = cfg or ViewConfig()
    image = np.asarray(image)
    return render(image, sample_transform(image.shape[-2:], kind, rng, cfg))


def normalize(image: np.ndarray, cfg: ViewConfig) -> np.ndarray:
    """Grayscale (H, W) -> (C, H, W), standardized per channel."""
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    stacked = np.broadcast_to(np.asarray(image, dtype=np.float32), (cfg.channels,) + image.shape[-2:])
    return (stacked - mean) / std


def center_view(image: np.ndarray, cfg: ViewConfig) -> np.ndarray:
    """Inference transform: resize the short side then center crop."""
    image = np.asarray(image)
    H, W = image.shape[-2:]
    side = min(H, W)
    params = TransformParams("center", (H - side) // 2, (W - side) // 2, side, side, False, cfg.image_size)
    return render(image, params)


def finetune_view(image: np.ndarray, rng: np.random.Generator, cfg: ViewConfig,
                  max_rotation: float = 10.0, max_translate: float = 0.05,
                  scale: tuple[float, float] = (0.95, 1.05)) -> np.ndarray:
    """Training-time augmentation for fine-tuning: flip, random affine, center crop."""
    view = center_view(image, cfg)
    if rng.random() < cfg.hflip_prob:
        view = hflip(view)
    angle = float(rng.uniform(-max_rotation, max_rotation))
    limit = max_translate * cfg.image_size
    tx, ty = (int(round(v)) for v in rng.uniform(-limit, limit, size=2))
    s = float(rng.uniform(*scale))
    t = torch.from_numpy(np.ascontiguousarray(view))[None]
    out = TF.affine(t, angle=angle, translate=[tx, ty], scale=s, shear=[0.0, 0.0],
                    interpolation=InterpolationMode.BILINEAR)
    return out[0].numpy()


# ---------------------------------------------------------------- patches


def patchify(image, patch_size: int):
    """(H, W) or (C, H, W) -> (H/p * W/p, C*p*p) in row-major patch order."""
    is_torch = isinstance(image, torch.Tensor)
    x = image if is_torch else np.asarray(image)
    if x.ndim == 2:
        x = x[None]
    C, H, W = x.shape
    p = patch_size
    if H % p or W % p:
        raise NonDivisibleSize(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = x.reshape(C, gh, p, gw, p)
    x = x.permute(1, 3, 0, 2, 4) if is_torch else x.transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, C * p * p)


def unpatchify(patches, grid: tuple[int, int], patch_size: int, channels: int = 1):
    is_torch = isinstance(patches, torch.Tensor)
    gh, gw = grid
    p = patch_size
    x = patches.reshape(gh, gw, channels, p, p)
    x = x.permute(2, 0, 3, 1, 4) if is_torch else x.transpose(2, 0, 3, 1, 4)
    x = x.reshape(channels, gh * p, gw * p)
    return x[0] if channels == 1 else x


def random_mask(total_patches: int, ratio: float, rng: np.random.Generator,
                grid: tuple[int, int] | None = None) -> MaskPattern:
    """Drop round(ratio * total) patches uniformly at random."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_drop = int(math.floor(ratio * total_patches + 0.5))
    keep = np.sort(rng.permutation(total_patches)[: total_patches - n_drop])
    if grid is None:
        g = int(round(math.sqrt(total_patches)))
        grid = (g, g) if g * g == total_patches else (1, total_patches)
    return MaskPattern(tuple(keep.tolist()), total_patches, grid)


def full_mask(grid: tuple[int, int]) -> MaskPattern:
    n = grid[0] * grid[1]
    return MaskPattern(tuple(range(n)), n, grid)


def focal_mask_from_crop(view, patch_size: int | None = None) -> MaskPattern:
    """Mask for a focal crop: its whole (contiguous) patch grid is kept.

    ``view`` is either a focal image (H, W) / (C, H, W), in which case
    ``patch_size`` is required, or a ``(gh, gw)`` grid shape.
    """
    if isinstance(view, tuple) and len(view) == 2 and all(isinstance(v, int) for v in view):
        return full_mask(view)
    arr = np.asarray(view)
    if patch_size is None:
        raise ValueError("patch_size required when passing an image")
    H, W = arr.shape[-2:]
    if H % patch_size or W % patch_size:
        raise NonDivisibleSize(f"focal view {H}x{W} not divisible by {patch_size}")
    return full_mask((H // patch_size, W // patch_size))


def _make_view(image: np.ndarray, params: TransformParams, cfg: ViewConfig) -> np.ndarray:
    return patchify(normalize(render(image, params), cfg), cfg.patch_size)


def build_view_bundle(image: np.ndarray, cfg: ViewConfig, rng: np.random.Generator) -> ViewBundle:
    """One unmasked target plus ``cfg.n_anchor_views`` masked anchors.

    Accepts raw pixels or any object exposing ``.pixels()`` (a ``Sample``).
    """
    if hasattr(image, "pixels"):
        image = image.pixels()
    image = np.asarray(image)
    shape = image.shape[-2:]
    if min(shape) < cfg.focal_size:
        raise ImageTooSmall(f"image {shape} smaller than focal size {cfg.focal_size}")

    t_params = sample_transform(shape, "global", rng, cfg)
    target = View(_make_view(image, t_params, cfg), full_mask(cfg.grid), t_params)

    anchors = []
    total = cfg.grid[0] * cfg.grid[1]
    for _ in range(cfg.n_random_masked):
        params = sample_transform(shape, "global", rng, cfg)
        patches = _make_view(image, params, cfg)
        anchors.append(View(patches, random_mask(total, cfg.mask_ratio, rng, cfg.grid), params))
    for _ in range(cfg.n_focal):
        params = sample_transform(shape, "focal", rng, cfg)
        patches = _make_view(image, params, cfg)
        mask = full_mask(cfg.focal_grid)
        if cfg.focal_extra_drop > 0:
            mask = random_mask(mask.total_patches, cfg.focal_extra_drop, rng, cfg.focal_grid)
        anchors.append(View(patches, mask, params))
    return ViewBundle(target, anchors)


def replay_view(image: np.ndarray, params: TransformParams | dict, cfg: ViewConfig) -> np.ndarray:
    """Rebuild a view's patches from its recorded provenance."""
    if isinstance(params, dict):
        params = TransformParams(**params)
    return _make_view(np.asarray(image), params, cfg)
