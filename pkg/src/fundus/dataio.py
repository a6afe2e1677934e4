"""Dataset plumbing: manifests, PNG image I/O, splits, augmentation, and a
synthetic fundus-image generator used for desk-scale verification.

The synthetic corpus draws a dark circular field with class-specific vessel
strokes and lesion patterns. Vessels get a strong chromatic (red-channel)
contrast but only a faint luminance offset, while lesions are pure luminance
features absent from the vessel masks; the two classifier channels therefore
carry complementary information, which is what makes vote fusion measurably
better than either channel alone.
"""

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fundus.validation import check_mask

SPLITS = ("train", "val", "test", "unassigned")

LUMA = np.array([0.299, 0.587, 0.114])

MIN_CROP_FRACTION = 0.875
AUGMENT_PROBABILITY = 0.7


@dataclass
class ManifestRecord:
    path: str
    label: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list

    def labels(self):
        return sorted({r.label for r in self.records})

    def subset(self, split):
        return [r for r in self.records if r.split == split]


def load_manifest(path, class_names=None):
    """Parse a 'path,label[,split]' CSV; errors carry the offending line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise ValueError(f"{path}: header must be 'path,label[,split]', got {header}")
        has_split = len(header) >= 3 and header[2].strip() == "split"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2 or not row[0].strip():
                raise ValueError(f"{path}:{lineno}: malformed row {row}")
            rec_path = row[0].strip()
            label = row[1].strip()
            split = row[2].strip() if has_split and len(row) > 2 and row[2].strip() else "unassigned"
            if rec_path in seen:
                raise ValueError(f"{path}:{lineno}: duplicate path {rec_path!r}")
            if class_names is not None and label not in class_names:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            seen.add(rec_path)
            records.append(ManifestRecord(rec_path, label, split))
    return DatasetManifest(records)


def save_manifest(manifest, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for r in manifest.records:
            writer.writerow([r.path, r.label, r.split])


def split_dataset(manifest, fractions=(0.7, 0.1, 0.2), seed=0, stratified=True):
    """Assign train/val/test splits; stratified per class, seeded shuffle.

    Val/test counts are the rounded per-class targets, the remainder goes to
    train. Classes with fewer than 3 samples go entirely to train.
    """
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    records = [ManifestRecord(r.path, r.label, "unassigned") for r in manifest.records]
    if stratified:
        groups = [
            [i for i, r in enumerate(records) if r.label == label]
            for label in sorted({r.label for r in records})
        ]
    else:
        groups = [list(range(len(records)))]
    for idx in groups:
        m = len(idx)
        if stratified and m < 3:
            warnings.warn(
                f"class {records[idx[0]].label!r} has only {m} samples; all assigned to train"
            )
            for i in idx:
                records[i].split = "train"
            continue
        order = rng.permutation(m)
        n_val = int(np.floor(f_val * m + 0.5))
        n_test = int(np.floor(f_test * m + 0.5))
        n_train = m - n_val - n_test
        for pos, j in enumerate(order):
            i = idx[j]
            if pos < n_train:
                records[i].split = "train"
            elif pos < n_train + n_val:
                records[i].split = "val"
            else:
                records[i].split = "test"
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# Image I/O


def bilinear_resize(arr, out_h, out_w):
    """Bilinear resampling at half-pixel-aligned sample centers."""
    arr = np.asarray(arr, dtype=np.float64)
    H, W = arr.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if arr.ndim == 3:
        fy = fy[:, :, None]
        fx = fx[:, :, None]
    top = arr[np.ix_(y0, x0)] * (1 - fx) + arr[np.ix_(y0, x1)] * fx
    bot = arr[np.ix_(y1, x0)] * (1 - fx) + arr[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def nearest_resize(arr, out_h, out_w):
    """Nearest-neighbor resampling; keeps value sets intact (binary masks stay binary)."""
    arr = np.asarray(arr)
    H, W = arr.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * (H / out_h)).astype(int), H - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (W / out_w)).astype(int), W - 1)
    return arr[np.ix_(ys, xs)]


def load_image(path, target_size=None):
    """Decode an 8-bit RGB or grayscale PNG to (H, W, 3) float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise ValueError(f"{path}: unsupported image mode {mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if target_size is not None:
        arr = bilinear_resize(arr, target_size, target_size)
    return arr


def save_image(image, path):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_mask(mask, path):
    """Write a binary mask as single-channel PNG with values 0/255."""
    m = check_mask(mask)
    Image.fromarray(m * np.uint8(255), mode="L").save(path, format="PNG")


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def to_luminance(image):
    """Rec. 601 luminance of an (H, W, 3) image."""
    return np.asarray(image, dtype=np.float64) @ LUMA


# ---------------------------------------------------------------------------
# Augmentation


def _apply_geometric(arr, op):
    if op == 0:  # horizontal flip
        return arr[:, ::-1].copy()
    if op in (1, 2, 3):  # rotate 90/180/270
        return np.rot90(arr, k=op, axes=(0, 1)).copy()
    if op == 4:  # transpose
        return arr.swapaxes(0, 1).copy()
    raise ValueError(f"unknown op {op}")


def augment(image, mask, rng):
    """With probability 0.7: one of {hflip, rot90/180/270, transpose}, then a
    random crop of at least 87.5% of the side, resized back. Mask (if given)
    receives the identical transform. Otherwise returns the inputs unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augment expects a square image, got {image.shape}")
    if rng.random() >= AUGMENT_PROBABILITY:
        return image, mask
    op = int(rng.integers(0, 5))
    side = image.shape[0]
    frac = rng.uniform(MIN_CROP_FRACTION, 1.0)
    crop = int(np.floor(side * frac + 0.5))
    crop = min(max(crop, 1), side)
    oy = int(rng.integers(0, side - crop + 1))
    ox = int(rng.integers(0, side - crop + 1))

    out_img = _apply_geometric(image, op)
    out_img = nearest_resize(out_img[oy : oy + crop, ox : ox + crop], side, side)
    out_mask = mask
    if mask is not None:
        out_mask = _apply_geometric(np.asarray(mask), op)
        out_mask = nearest_resize(out_mask[oy : oy + crop, ox : ox + crop], side, side)
    return out_img, out_mask


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class ClassProfile:
    """Rendering recipe for one disease class."""

    name: str
    vessel_count: tuple  # inclusive (lo, hi)
    curvature: tuple  # control-point offset range, fraction of the field radius
    lesion: str  # none | blobs | dots | wedge
    lesion_anchor: float = 0.0  # radians; stabilizes lesion placement per class
    vessel_anchor: float = 0.0  # radians; per-class rotation of the stroke fan


def default_profiles(n_classes):
    """Pair vessel density with lesion patterns so the channels complement.

    Class c draws exactly 2 + c vessels and lesion pattern c mod 4: classes
    sharing a lesion pattern differ strongly in vessel count (visible only to
    the mask channel), while classes with neighboring counts differ in lesion
    pattern (visible only to the luminance channel).
    """
    lesions = ("none", "blobs", "dots", "wedge")
    profiles = []
    for c in range(n_classes):
        count = 2 + c
        profiles.append(
            ClassProfile(
                name=f"class_{c:02d}",
                vessel_count=(count, count),
                curvature=(0.08 + 0.03 * c, 0.18 + 0.03 * c),
                lesion=lesions[c % len(lesions)],
                lesion_anchor=2.0 * np.pi * (c % len(lesions)) / len(lesions),
                vessel_anchor=2.0 * np.pi * c / max(n_classes, 1),
            )
        )
    return tuple(profiles)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    n_per_class: int = 50
    image_size: int = 64
    seed: int = 0
    profiles: tuple = None
    vessel_fraction_range: tuple = (0.003, 0.35)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.profiles is None:
            object.__setattr__(self, "profiles", default_profiles(self.n_classes))
        if len(self.profiles) != self.n_classes:
            raise ValueError(
                f"{len(self.profiles)} profiles for {self.n_classes} classes"
            )


# Vessel coloring: strong red-channel contrast for the segmentation network,
# near-zero luminance shift so the luminance-feature channel barely sees it.
_VESSEL_CHROMA = np.array([0.20, -0.10, -0.01])
_VESSEL_LUMA_HINT = 0.04


def _disc(size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _stamp_stroke(mask, points, width):
    size = mask.shape[0]
    r = int(np.ceil(width))
    offs = [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= width * width
    ]
    ys = np.clip(np.round(points[:, 0]).astype(int), 0, size - 1)
    xs = np.clip(np.round(points[:, 1]).astype(int), 0, size - 1)
    for dy, dx in offs:
        yy = np.clip(ys + dy, 0, size - 1)
        xx = np.clip(xs + dx, 0, size - 1)
        mask[yy, xx] = 1


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _render_vessels(rng, size, radius, center, profile):
    """Class-anchored stroke fan: stroke directions jitter around fixed angles,
    so masks of one class share a recognizable geometry."""
    mask = np.zeros((size, size), dtype=np.uint8)
    count = int(rng.integers(profile.vessel_count[0], profile.vessel_count[1] + 1))
    for s in range(count):
        theta = profile.vessel_anchor + 2 * np.pi * s / count + rng.normal(0.0, 0.12)
        spread = np.pi * (1.0 + rng.normal(0.0, 0.06))
        r0 = radius * rng.uniform(0.80, 0.95)
        r1 = radius * rng.uniform(0.80, 0.95)
        p0 = center + r0 * np.array([np.sin(theta), np.cos(theta)])
        p2 = center + r1 * np.array([np.sin(theta + spread), np.cos(theta + spread)])
        mid = (p0 + p2) / 2
        perp = np.array([-(p2 - p0)[1], (p2 - p0)[0]])
        norm = np.linalg.norm(perp)
        perp = perp / norm if norm > 0 else perp
        bend = rng.uniform(*profile.curvature) * radius * (1.0 if s % 2 == 0 else -1.0)
        p1 = mid + bend * perp
        n_pts = max(8, int(3 * np.linalg.norm(p2 - p0)))
        pts = _bezier(p0, p1, p2, n_pts)
        _stamp_stroke(mask, pts, width=rng.uniform(0.9, 1.3))
    return mask


def _render_lesions(rng, img, size, radius, center, profile):
    if profile.lesion == "none":
        return
    yy, xx = np.mgrid[0:size, 0:size]
    if profile.lesion == "blobs":
        for _ in range(int(rng.integers(2, 4))):
            ang = profile.lesion_anchor + rng.normal(0, 0.25)
            rad = radius * rng.uniform(0.35, 0.6)
            cy = center[0] + rad * np.sin(ang) + rng.normal(0, 1.5)
            cx = center[1] + rad * np.cos(ang) + rng.normal(0, 1.5)
            rr = rng.uniform(4.0, 7.0)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rr**2] += 0.32
    elif profile.lesion == "dots":
        for _ in range(int(rng.integers(10, 15))):
            ang = rng.uniform(0, 2 * np.pi)
            rad = radius * rng.uniform(0.25, 0.8)
            cy = center[0] + rad * np.sin(ang)
            cx = center[1] + rad * np.cos(ang)
            rr = rng.uniform(1.0, 2.0)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rr**2] += 0.30
    elif profile.lesion == "wedge":
        ang = np.arctan2(yy - center[0], xx - center[1])
        lo = profile.lesion_anchor + rng.normal(0, 0.15)
        span = rng.uniform(1.0, 1.3)
        delta = np.mod(ang - lo, 2 * np.pi)
        inside = (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2
        img[inside & (delta < span)] -= 0.25
    else:
        raise ValueError(f"unknown lesion pattern {profile.lesion!r}")


def synth_generate(spec):
    """Render the synthetic corpus; returns (images, masks, labels).

    Deterministic under spec.seed: two calls with the same spec yield
    byte-identical arrays.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed)))
    size = spec.image_size
    images, masks, labels = [], [], []
    for profile in spec.profiles:
        for _ in range(spec.n_per_class):
            center = np.array(
                [size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2)]
            )
            radius = size * rng.uniform(0.44, 0.48)
            base = np.array([0.42, 0.26, 0.13]) + rng.uniform(-0.03, 0.03, 3)
            img = np.full((size, size, 3), 0.02)
            inside = _disc(size, center[0], center[1], radius)
            img[inside] = base

            vessels = _render_vessels(rng, size, radius, center, profile)
            vessels &= inside
            img[vessels.astype(bool)] += _VESSEL_CHROMA + _VESSEL_LUMA_HINT

            # Lesions shift all channels equally, i.e. pure luminance features.
            delta = np.zeros((size, size))
            _render_lesions(rng, delta, size, radius, center, profile)
            img += delta[:, :, None]

            img += rng.normal(0.0, 0.01, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            masks.append(vessels.astype(np.uint8))
            labels.append(profile.name)
    return images, masks, labels


def synth_write(spec, out_dir):
    """Write the corpus as {images/*.png, masks/*.png, manifest.csv}."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    images, masks, labels = synth_generate(spec)
    records = []
    for i, (img, msk, label) in enumerate(zip(images, masks, labels)):
        name = f"{label}_{i:04d}.png"
        save_image(img, out_dir / "images" / name)
        save_mask(msk, out_dir / "masks" / name)
        records.append(ManifestRecord(str(Path("images") / name), label, "unassigned"))
    manifest = DatasetManifest(records)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def mask_path_for(image_path):
    """Sibling masks/ path for an images/ path (the corpus layout convention)."""
    p = Path(image_path)
    if p.parent.name != "images":
        raise ValueError(f"cannot derive mask path: {image_path!r} is not under images/")
    return p.parent.parent / "masks" / p.name
