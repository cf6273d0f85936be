"""Synthetic ultrasound-style phantoms, non-IID partitioning, and augmentation.

The phantom generator stands in for clinical scans that cannot be shipped:
normal samples are lesion-free speckle fields, benign lesions are smooth
darkened ellipses, malignant lesions get an irregular boundary from random
angular harmonics. Every image carries multiplicative speckle and a vertical
attenuation gradient; the mask is the exact lesion support.

A user-supplied directory of PNG image/mask pairs in the
``<root>/{normal|benign|malignant}/<name>.png`` + ``<name>_mask.png`` layout
can be loaded instead, and synthetic datasets export to the same layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


class Label(str, Enum):
    NORMAL = "normal"
    BENIGN = "benign"
    MALIGNANT = "malignant"


_LABEL_CODE = {Label.NORMAL: 0, Label.BENIGN: 1, Label.MALIGNANT: 2}


@dataclass
class Sample:
    """One grayscale scan: image in [0,1], binary mask, lesion class."""

    image: np.ndarray
    mask: np.ndarray
    label: Label
    uid: str = ""


Dataset = list[Sample]


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client and server-test label compositions, scaled by ``scale``."""

    clients: tuple[tuple[tuple[Label, int], ...], ...]
    server_test: tuple[tuple[Label, int], ...]
    scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.clients:
            raise ConfigError("partition plan needs at least one client")
        if self.scale <= 0:
            raise ConfigError(f"partition scale must be positive, got {self.scale}")
        for comp in list(self.clients) + [self.server_test]:
            for _, count in comp:
                if count < 0:
                    raise ConfigError("label counts must be non-negative")


# Default partition: two clients drawn from one source (benign-heavy and
# malignant-heavy) and a third from a second source, which is what makes
# the split non-IID.
DEFAULT_PLAN = PartitionPlan(
    clients=(
        ((Label.BENIGN, 400), (Label.NORMAL, 50)),
        ((Label.MALIGNANT, 200), (Label.NORMAL, 50)),
        ((Label.BENIGN, 110), (Label.MALIGNANT, 53)),
    ),
    server_test=((Label.BENIGN, 97), (Label.MALIGNANT, 23), (Label.NORMAL, 34)),
)


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    flip_h: float = 0.5
    flip_v: float = 0.5
    rotate_deg: float = 25.0
    translate_frac: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_delta: float = 0.1

    @staticmethod
    def disabled() -> "AugmentationConfig":
        return AugmentationConfig(enabled=False)


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: list[str] = field(default_factory=list)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled coarse Gaussian grid; slow spatial variation."""
    coarse = rng.standard_normal((cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0, :] * (1.0 - f)[:, None] + coarse[i0 + 1, :] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    return (p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]) / 9.0


def generate_phantom(label: Label, size: int, rng: np.random.Generator,
                     uid: str = "") -> Sample:
    """Deterministic synthetic scan for the given lesion class."""
    label = Label(label)
    base = 0.55 + 0.05 * rng.uniform(-1.0, 1.0)
    image = base + 0.05 * _smooth_noise(rng, size, 4)
    mask = np.zeros((size, size))

    if label is not Label.NORMAL:
        cy, cx = rng.uniform(0.32, 0.68, size=2) * size
        if label is Label.BENIGN:
            ry, rx = rng.uniform(0.12, 0.28, size=2) * size
            amps = np.zeros(0)
            phases = np.zeros(0)
        else:
            ry, rx = rng.uniform(0.10, 0.26, size=2) * size
            harmonics = np.arange(3, 8)
            amps = rng.uniform(0.04, 0.16, size=harmonics.size)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics.size)
        # radius floor keeps the lesion from slipping between grid points
        # at tiny image sizes (0.3 * 2.5 px > half a pixel diagonal)
        ry, rx = max(ry, 2.5), max(rx, 2.5)
        tilt = rng.uniform(0.0, np.pi)
        darken = rng.uniform(0.3, 0.6)

        ys, xs = np.meshgrid(np.arange(size, dtype=float),
                             np.arange(size, dtype=float), indexing="ij")
        dy, dx = ys - cy, xs - cx
        u = (np.cos(tilt) * dy + np.sin(tilt) * dx) / ry
        v = (-np.sin(tilt) * dy + np.cos(tilt) * dx) / rx
        rho = np.sqrt(u * u + v * v)
        boundary = np.ones_like(rho)
        if amps.size:
            theta = np.arctan2(v, u)
            for k, a, ph in zip(range(3, 8), amps, phases):
                boundary = boundary + a * np.cos(k * theta + ph)
            boundary = np.maximum(boundary, 0.3)
        mask = (rho <= boundary).astype(np.float64)
        # smooth hypoechoic edge on the image only; the mask stays exact
        width = 1.5 / min(ry, rx)
        inside = np.clip((boundary - rho) / width, 0.0, 1.0)
        image = image * (1.0 - (1.0 - darken) * inside)

    speckle = 1.0 + 0.45 * _box3(rng.standard_normal((size, size)))
    image = image * speckle
    image = image * np.linspace(1.0, 0.72, size)[:, None]
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image, mask=mask, label=label, uid=uid)


def _scale_count(count: int, scale: float) -> int:
    if count <= 0:
        return 0
    return max(1, _round_half_up(count * scale))


def _generate_slice(comp, scale, size, seed, group: int, prefix: str) -> Dataset:
    samples: Dataset = []
    for label, count in comp:
        label = Label(label)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, group, _LABEL_CODE[label])))
        for k in range(_scale_count(count, scale)):
            samples.append(generate_phantom(label, size, rng,
                                            uid=f"{prefix}/{label.value}/{k:04d}"))
    return samples


def _partition_source(samples: Dataset, plan: PartitionPlan):
    pools: dict[Label, list[Sample]] = {lab: [] for lab in Label}
    for s in samples:
        pools[Label(s.label)].append(s)
    rng = np.random.default_rng(plan.seed)
    for lab in Label:
        order = rng.permutation(len(pools[lab]))
        pools[lab] = [pools[lab][i] for i in order]

    def take(comp, who: str) -> Dataset:
        out: Dataset = []
        for label, count in comp:
            label = Label(label)
            need = _scale_count(count, plan.scale)
            if len(pools[label]) < need:
                raise DataError(
                    f"{who} needs {need} {label.value} samples but only "
                    f"{len(pools[label])} remain in the source dataset"
                )
            out.extend(pools[label][:need])
            del pools[label][:need]
        return out

    clients = [take(comp, f"client {i + 1}") for i, comp in enumerate(plan.clients)]
    return clients, take(plan.server_test, "server test")


def build_partition(plan: PartitionPlan, size: int = 64,
                    source: Dataset | None = None):
    """Materialize the per-client datasets and the server test set.

    With ``source=None`` samples are freshly generated phantoms; otherwise
    they are drawn without replacement from the given dataset. Assignment is
    disjoint and deterministic under the plan seed.
    """
    plan.validate()
    if source is not None:
        return _partition_source(source, plan)
    clients = [
        _generate_slice(comp, plan.scale, size, plan.seed, ci, f"client{ci + 1}")
        for ci, comp in enumerate(plan.clients)
    ]
    server = _generate_slice(plan.server_test, plan.scale, size, plan.seed,
                             len(plan.clients), "server")
    return clients, server


# -- augmentation --------------------------------------------------------------


def _warp(arr: np.ndarray, ainv: np.ndarray, shift: np.ndarray,
          order: str) -> np.ndarray:
    """Inverse-map resample: src = ainv @ (dst - center - shift) + center.

    Bilinear or nearest sampling with zero fill outside the frame.
    """
    h, w = arr.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    dy = ys - cy - shift[0]
    dx = xs - cx - shift[1]
    sy = ainv[0, 0] * dy + ainv[0, 1] * dx + cy
    sx = ainv[1, 0] * dy + ainv[1, 1] * dx + cx

    if order == "nearest":
        iy = np.rint(sy).astype(int)
        ix = np.rint(sx).astype(int)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(arr)
        out[valid] = arr[iy[valid], ix[valid]]
        return out

    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros_like(arr)
    for oy, ox, wgt in ((y0, x0, (1 - fy) * (1 - fx)),
                        (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)),
                        (y0 + 1, x0 + 1, fy * fx)):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        vals = np.zeros_like(arr)
        vals[valid] = arr[oy[valid], ox[valid]]
        out += vals * wgt
    return out


def apply_geometric(image: np.ndarray, mask: np.ndarray, flip_h: bool, flip_v: bool,
                    angle_deg: float, translate: tuple[float, float],
                    scale: float) -> tuple[np.ndarray, np.ndarray]:
    """One affine warp for both planes: bilinear image, nearest re-binarized mask."""
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    flip = np.diag([-1.0 if flip_v else 1.0, -1.0 if flip_h else 1.0])
    forward = scale * (rot @ flip)
    ainv = np.linalg.inv(forward)
    shift = np.asarray(translate, dtype=float)
    warped_image = _warp(image, ainv, shift, "bilinear")
    warped_mask = (_warp(mask, ainv, shift, "nearest") >= 0.5).astype(np.float64)
    return warped_image, warped_mask


def augment(sample: Sample, cfg: AugmentationConfig,
            rng: np.random.Generator) -> Sample:
    """Randomized geometric + photometric transform; label and binarity preserved."""
    if not cfg.enabled:
        return Sample(sample.image, sample.mask, sample.label, sample.uid)

    size = sample.image.shape[0]
    flip_h = rng.random() < cfg.flip_h
    flip_v = rng.random() < cfg.flip_v
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    translate = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * size
    scale = rng.uniform(*cfg.scale_range)
    gain = rng.uniform(*cfg.contrast_range)
    delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)

    image, mask = apply_geometric(sample.image, sample.mask, flip_h, flip_v,
                                  angle, tuple(translate), scale)
    mean = image.mean()
    image = np.clip(mean + (image - mean) * gain + delta, 0.0, 1.0)
    return Sample(image=image, mask=mask, label=sample.label, uid=sample.uid)


def train_test_split(dataset: Dataset, fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Label-stratified disjoint split, deterministic under the seed."""
    if len(dataset) < 5:
        raise DataError(f"dataset of {len(dataset)} samples is too small to split")
    groups: dict[Label, list[int]] = {}
    for i, s in enumerate(dataset):
        groups.setdefault(Label(s.label), []).append(i)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for label in sorted(groups, key=lambda l: l.value):
        idxs = groups[label]
        order = rng.permutation(len(idxs))
        n_test = max(1, _round_half_up(fraction * len(idxs)))
        test_idx.update(idxs[j] for j in order[:n_test])
    train = [s for i, s in enumerate(dataset) if i not in test_idx]
    test = [s for i, s in enumerate(dataset) if i in test_idx]
    return train, test


# -- disk I/O -------------------------------------------------------------------


def _to_png_array(plane: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_dataset(samples: Dataset, root) -> None:
    """Write PNG image/mask pairs in the BUS directory layout."""
    root = Path(root)
    counters: dict[Label, int] = {}
    for s in samples:
        label = Label(s.label)
        idx = counters.get(label, 0)
        counters[label] = idx + 1
        d = root / label.value
        d.mkdir(parents=True, exist_ok=True)
        name = f"{label.value}_{idx:04d}"
        Image.fromarray(_to_png_array(s.image), mode="L").save(d / f"{name}.png")
        Image.fromarray(_to_png_array(s.mask), mode="L").save(d / f"{name}_mask.png")


def _read_gray(path: Path, size: int, resample) -> np.ndarray:
    with Image.open(path) as im:
        plane = im.convert("L").resize((size, size), resample)
        return np.asarray(plane, dtype=np.float64) / 255.0


def load_bus_directory(path, size: int) -> tuple[Dataset, LoadReport]:
    """Load user-supplied image/mask pairs, resized to ``size`` x ``size``.

    A missing mask is an error naming the file; unreadable files are skipped
    with a warning and counted in the returned report.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    samples: Dataset = []
    report = LoadReport()
    for label in Label:
        d = root / label.value
        if not d.is_dir():
            continue
        for img_path in sorted(d.glob("*.png")):
            if img_path.stem.endswith("_mask"):
                continue
            mask_path = d / f"{img_path.stem}_mask.png"
            if not mask_path.exists():
                raise DataError(f"missing mask {mask_path.name} for image {img_path}")
            try:
                image = _read_gray(img_path, size, Image.BILINEAR)
                mask = (_read_gray(mask_path, size, Image.NEAREST) >= 0.5)
            except (OSError, UnidentifiedImageError) as exc:
                logger.warning("skipping unreadable pair %s: %s", img_path, exc)
                report.skipped.append(str(img_path))
                continue
            mask = mask.astype(np.float64)
            if label is Label.NORMAL and mask.any():
                raise DataError(f"normal-labeled image {img_path} has a non-empty mask")
            if label is not Label.NORMAL and not mask.any():
                raise DataError(f"{label.value} image {img_path} has an empty mask")
            samples.append(Sample(image=image, mask=mask, label=label,
                                  uid=str(img_path)))
    if not samples:
        raise DataError(f"no image/mask pairs found under {root}")
    report.loaded = len(samples)
    return samples, report


def generate_labeled_set(counts: dict[Label, int], size: int,
                         seed: int) -> Dataset:
    """Standalone phantom set for data generation and one-shot evaluation."""
    samples: Dataset = []
    for label in Label:
        n = counts.get(label, 0)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, 7, _LABEL_CODE[label])))
        for k in range(n):
            samples.append(generate_phantom(label, size, rng,
                                            uid=f"{label.value}/{k:04d}"))
    return samples


def parse_composition(text: str) -> tuple[tuple[Label, int], ...]:
    """Parse "benign:400,normal:50" into a label composition."""
    comp = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"bad label:count entry {part!r}")
        name, _, num = part.partition(":")
        try:
            label = Label(name.strip())
        except ValueError:
            raise ConfigError(f"unknown label {name.strip()!r}") from None
        try:
            count = int(num)
        except ValueError:
            raise ConfigError(f"bad count {num!r} for label {name.strip()!r}") from None
        if count < 0:
            raise ConfigError(f"negative count for label {name.strip()!r}")
        comp.append((label, count))
    if not comp:
        raise ConfigError(f"empty composition {text!r}")
    return tuple(comp)


def plan_replace(plan: PartitionPlan, **kw) -> PartitionPlan:
    return replace(plan, **kw)
