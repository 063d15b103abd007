"""Data pipeline: manifests, crops, augmentation, and the synthetic dataset.

Images are float64 arrays of shape (S, S, 3) with values in [0, 1]; 8-bit RGB
PNG on disk. Manifests are JSON-lines with one building record per line and
image paths relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import geometry
from .errors import InvalidConfig, ParseError, ValidationError, ZeroStd

NUM_CLASSES = 4
SPLITS = ("train", "test")


@dataclass(frozen=True)
class BuildingRecord:
    pre_image_path: str
    post_image_path: str
    polygon: tuple[tuple[float, float], ...]
    label: int
    split: str

    def validate(self) -> None:
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise ValidationError(f"polygon needs >= 3 (x, y) vertices: {self.polygon}")
        if geometry.polygon_area(poly) <= 0:
            raise ValidationError("polygon has zero area")
        if not (0 <= self.label < NUM_CLASSES):
            raise ValidationError(f"label {self.label} outside [0, {NUM_CLASSES})")
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}: {self.split!r}")


@dataclass
class SamplePair:
    pre: np.ndarray   # (S, S, 3)
    post: np.ndarray  # (S, S, 3)
    label: int


@dataclass(frozen=True)
class AugmentParams:
    """Augmentation magnitudes; geometric transforms stay pair-registered."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rotate_deg: float = 15.0
    translate_frac: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_blur: float = 0.3
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    p_noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        for p in (self.p_hflip, self.p_vflip, self.p_blur, self.p_noise):
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"probability {p} outside [0, 1]")
        for lo, hi in (self.scale_range, self.blur_sigma, self.noise_sigma):
            if hi < lo:
                raise InvalidConfig(f"empty range ({lo}, {hi})")


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[BuildingRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                rec = BuildingRecord(
                    pre_image_path=raw["pre_image_path"],
                    post_image_path=raw["post_image_path"],
                    polygon=tuple(tuple(p) for p in raw["polygon"]),
                    label=int(raw["label"]),
                    split=raw["split"],
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: missing/invalid field ({exc})") from exc
            try:
                rec.validate()
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")


def class_counts(records_or_labels) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for item in records_or_labels:
        label = item.label if hasattr(item, "label") else int(item)
        counts[label] += 1
    return counts


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(arr: np.ndarray, path) -> None:
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _affine_dst_to_src(size: int, angle_deg: float, scale: float,
                       tx: float, ty: float) -> np.ndarray | None:
    """Inverse (sampling) matrix of rotate+scale about center then translate."""
    if angle_deg == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        return None
    c = (size - 1) / 2.0
    th = math.radians(angle_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    fwd = np.array([
        [scale * cos_t, -scale * sin_t, 0.0],
        [scale * sin_t, scale * cos_t, 0.0],
        [0.0, 0.0, 1.0],
    ])
    pre = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    post = np.array([[1, 0, c + tx], [0, 1, c + ty], [0, 0, 1.0]])
    return np.linalg.inv(post @ fwd @ pre)


def augment(pair: SamplePair, params: AugmentParams,
            seed: int | None = None) -> SamplePair:
    """Apply the configured augmentations; geometry is shared by both crops,
    blur and noise are drawn independently per crop."""
    params.validate()
    rng = np.random.default_rng(params.seed if seed is None else seed)
    size = pair.pre.shape[0]

    angle = rng.uniform(-params.rotate_deg, params.rotate_deg) if params.rotate_deg else 0.0
    scale = rng.uniform(*params.scale_range)
    t_max = params.translate_frac * size
    tx = rng.uniform(-t_max, t_max) if params.translate_frac else 0.0
    ty = rng.uniform(-t_max, t_max) if params.translate_frac else 0.0
    flip_h = rng.random() < params.p_hflip
    flip_v = rng.random() < params.p_vflip

    h_inv = _affine_dst_to_src(size, angle, scale, tx, ty)

    def geometric(img: np.ndarray) -> np.ndarray:
        out = img if h_inv is None else geometry.warp_image(img, h_inv, (size, size))
        if flip_h:
            out = out[:, ::-1]
        if flip_v:
            out = out[::-1, :]
        return np.ascontiguousarray(out)

    def photometric(img: np.ndarray) -> np.ndarray:
        if params.p_blur and rng.random() < params.p_blur:
            sigma = rng.uniform(*params.blur_sigma)
            img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
        if params.p_noise and rng.random() < params.p_noise:
            sigma = rng.uniform(*params.noise_sigma)
            img = np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0)
        return img

    pre = photometric(geometric(pair.pre))
    post = photometric(geometric(pair.post))
    return SamplePair(pre=pre, post=post, label=pair.label)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def compute_stats(pairs) -> NormStats:
    """Per-channel mean/std over all pre and post crops (training split)."""
    stack = np.concatenate([np.stack([p.pre, p.post]) for p in pairs])
    mean = stack.mean(axis=(0, 1, 2))
    std = stack.std(axis=(0, 1, 2))
    if np.any(std <= 0):
        raise ZeroStd(f"zero std in channel stats: {std.tolist()}")
    return NormStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def normalize(pair: SamplePair, stats: NormStats) -> SamplePair:
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    if np.any(std <= 0):
        raise ZeroStd(f"std must be positive: {stats.std}")
    return SamplePair(pre=(pair.pre - mean) / std,
                      post=(pair.post - mean) / std,
                      label=pair.label)


def denormalize(pair: SamplePair, stats: NormStats) -> SamplePair:
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    return SamplePair(pre=pair.pre * std + mean,
                      post=pair.post * std + mean,
                      label=pair.label)


def save_stats(stats: NormStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"mean": list(stats.mean), "std": list(stats.std)},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_stats(path) -> NormStats:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return NormStats(mean=tuple(raw["mean"]), std=tuple(raw["std"]))


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale paired dataset: textured 'buildings', class-scaled corruption."""

    proportions: tuple[float, ...] = (0.685, 0.231, 0.081, 0.003)
    n_samples: int = 2000
    size: int = 32
    intensities: tuple[float, ...] = (0.0, 0.15, 0.40, 0.80)
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if len(self.proportions) != NUM_CLASSES or len(self.intensities) != NUM_CLASSES:
            raise InvalidConfig(f"need {NUM_CLASSES} proportions and intensities")
        if abs(sum(self.proportions) - 1.0) > 1e-6:
            raise InvalidConfig(f"proportions sum to {sum(self.proportions)}, not 1")
        if any(p < 0 for p in self.proportions):
            raise InvalidConfig("negative class proportion")
        if any(not 0.0 <= f <= 1.0 for f in self.intensities):
            raise InvalidConfig("corruption intensities must lie in [0, 1]")
        if self.n_samples < 1 or self.size < 8:
            raise InvalidConfig("need n_samples >= 1 and size >= 8")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InvalidConfig("test_fraction must lie in [0, 1)")


def apportion(n: int, proportions) -> np.ndarray:
    """Largest-remainder apportionment; integer counts summing to n."""
    quotas = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(quotas).astype(np.int64)
    rem = n - counts.sum()
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape[:2]
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    xg, yg = np.meshgrid(xs, ys)
    return geometry.sample_bilinear(grid, xg, yg)


def _synth_pre_image(rng: np.random.Generator, size: int) -> np.ndarray:
    base = _bilinear_upsample(rng.uniform(0.1, 0.9, (4, 4, 3)), size)
    img = 0.6 * base
    # one bright "building" block with mild interior texture
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    hh = rng.uniform(0.18, 0.35) * size
    hw = rng.uniform(0.18, 0.35) * size
    color = rng.uniform(0.4, 1.0, 3)
    y0, y1 = int(max(0, cy - hh)), int(min(size, cy + hh))
    x0, x1 = int(max(0, cx - hw)), int(min(size, cx + hw))
    img[y0:y1, x0:x1] = 0.8 * color + 0.2 * img[y0:y1, x0:x1]
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _corrupt(rng: np.random.Generator, img: np.ndarray, fraction: float) -> np.ndarray:
    out = img.copy()
    if fraction <= 0:
        return out
    n_pix = img.shape[0] * img.shape[1]
    k = int(round(fraction * n_pix))
    if k == 0:
        return out
    idx = rng.choice(n_pix, size=k, replace=False)
    flat = out.reshape(-1, 3)
    flat[idx] = rng.uniform(0.0, 1.0, (k, 3))
    return out


def synth_generate(cfg: SynthConfig):
    """Deterministic synthetic pre/post pairs plus matching manifest records.

    Record image paths point at the layout `write_crop_store` produces.
    """
    cfg.validate()
    counts = apportion(cfg.n_samples, cfg.proportions)
    labels = np.repeat(np.arange(NUM_CLASSES), counts)

    # per-class test allotment, largest remainder, then seeded assignment
    test_counts = apportion(
        int(round(cfg.n_samples * cfg.test_fraction)),
        counts / counts.sum() if counts.sum() else counts,
    )
    test_counts = np.minimum(test_counts, counts)

    master = np.random.SeedSequence(cfg.seed)
    sample_seeds = master.spawn(cfg.n_samples + 1)
    split_rng = np.random.default_rng(sample_seeds[-1])

    splits = np.empty(cfg.n_samples, dtype=object)
    offset = 0
    for c in range(NUM_CLASSES):
        n_c = counts[c]
        flags = np.array(["train"] * n_c, dtype=object)
        if n_c:
            test_idx = split_rng.choice(n_c, size=int(test_counts[c]), replace=False)
            flags[test_idx] = "test"
        splits[offset:offset + n_c] = flags
        offset += n_c

    pairs = []
    records = []
    full = ((0.0, 0.0), (cfg.size - 1.0, 0.0),
            (cfg.size - 1.0, cfg.size - 1.0), (0.0, cfg.size - 1.0))
    for i in range(cfg.n_samples):
        rng = np.random.default_rng(sample_seeds[i])
        label = int(labels[i])
        pre = _synth_pre_image(rng, cfg.size)
        post = _corrupt(rng, pre, cfg.intensities[label])
        pairs.append(SamplePair(pre=pre, post=post, label=label))
        records.append(BuildingRecord(
            pre_image_path=f"crops/{i:05d}_pre.png",
            post_image_path=f"crops/{i:05d}_post.png",
            polygon=full,
            label=label,
            split=str(splits[i]),
        ))
    return pairs, records


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(pairs, batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0):
    """Yield (tensor_a, tensor_b, labels) batches covering every pair once.

    Tensors are (B, 3, S, S); shuffle order is fixed by (shuffle_seed, epoch).
    """
    if batch_size < 1:
        raise InvalidConfig(f"batch_size must be >= 1, got {batch_size}")
    n = len(pairs)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng((shuffle_seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        xa = np.stack([p.pre.transpose(2, 0, 1) for p in chunk])
        xb = np.stack([p.post.transpose(2, 0, 1) for p in chunk])
        labels = np.array([p.label for p in chunk], dtype=np.int64)
        yield xa, xb, labels


# ---------------------------------------------------------------------------
# crop store (prepare/synth output, train/eval input)
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Raw (unnormalized) crops; stats are applied downstream after augment."""

    train: list[SamplePair]
    test: list[SamplePair]
    counts: np.ndarray            # training-split class counts
    stats: NormStats | None = None


def dataset_from_pairs(pairs, records) -> Dataset:
    train = [p for p, r in zip(pairs, records) if r.split == "train"]
    test = [p for p, r in zip(pairs, records) if r.split == "test"]
    counts = class_counts([p.label for p in train])
    stats = compute_stats(train) if train else None
    return Dataset(train=train, test=test, counts=counts, stats=stats)


def write_crop_store(out_dir, pairs, records) -> None:
    """PNG crop pairs + crops.jsonl + stats.json + classes.json."""
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    rows = []
    for pair, rec in zip(pairs, records):
        save_image(pair.pre, out_dir / rec.pre_image_path)
        save_image(pair.post, out_dir / rec.post_image_path)
        rows.append({
            "pre_crop": rec.pre_image_path,
            "post_crop": rec.post_image_path,
            "label": int(pair.label),
            "split": rec.split,
        })
    with open(out_dir / "crops.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    # stats over the quantized training crops: exactly what training reloads
    train_pairs = [
        SamplePair(load_image(out_dir / r["pre_crop"]),
                   load_image(out_dir / r["post_crop"]), r["label"])
        for r in rows if r["split"] == "train"
    ]
    if not train_pairs:  # degenerate store with no train split
        train_pairs = [
            SamplePair(load_image(out_dir / r["pre_crop"]),
                       load_image(out_dir / r["post_crop"]), r["label"])
            for r in rows
        ]
    stats = compute_stats(train_pairs)
    save_stats(stats, out_dir / "stats.json")

    counts = class_counts([r["label"] for r in rows if r["split"] == "train"])
    from .metrics import class_weights  # local import avoids a cycle at module load
    weights = class_weights(np.maximum(counts, 1)).w
    with open(out_dir / "classes.json", "w", encoding="utf-8") as fh:
        json.dump({"counts": counts.tolist(),
                   "weights": [round(float(w), 6) for w in weights]},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_crop_store(store_dir) -> Dataset:
    store_dir = Path(store_dir)
    manifest = store_dir / "crops.jsonl"
    if not manifest.exists():
        raise ParseError(f"no crops.jsonl in {store_dir}")
    train, test = [], []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{manifest}:{lineno}: {exc}") from exc
            pair = SamplePair(
                pre=load_image(store_dir / row["pre_crop"]),
                post=load_image(store_dir / row["post_crop"]),
                label=int(row["label"]),
            )
            (train if row["split"] == "train" else test).append(pair)
    counts = class_counts([p.label for p in train])
    stats_path = store_dir / "stats.json"
    stats = load_stats(stats_path) if stats_path.exists() else (
        compute_stats(train) if train else None
    )
    return Dataset(train=train, test=test, counts=counts, stats=stats)


# ---------------------------------------------------------------------------
# prepare: manifest -> crop store
# ---------------------------------------------------------------------------

def prepare_crops(manifest_path, out_dir, size: int = 32, margin: float = 0.0):
    """Cut min-area-rect crops for every record and write a crop store."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    base = manifest_path.parent
    pairs = []
    out_records = []
    for i, rec in enumerate(records):
        pre_path = base / rec.pre_image_path
        post_path = base / rec.post_image_path
        for p in (pre_path, post_path):
            if not os.path.exists(p):
                raise ValidationError(f"record {i}: image not found: {p}")
        pre_img = load_image(pre_path)
        post_img = load_image(post_path)
        rect = geometry.min_area_rect(rec.polygon)
        if margin:
            rect = geometry.expand_rect(rect, margin)
        pre_crop = geometry.warp_to_square(pre_img, rect, size)
        post_crop = geometry.warp_to_square(post_img, rect, size)
        pairs.append(SamplePair(pre=np.clip(pre_crop, 0, 1),
                                post=np.clip(post_crop, 0, 1),
                                label=rec.label))
        out_records.append(BuildingRecord(
            pre_image_path=f"crops/{i:05d}_pre.png",
            post_image_path=f"crops/{i:05d}_post.png",
            polygon=rec.polygon,
            label=rec.label,
            split=rec.split,
        ))
    write_crop_store(out_dir, pairs, out_records)
    return pairs, out_records
