"""Seeded synthetic scene generator plus preprocessing and dataset I/O.

Scenes mimic a stained-smear regime: many roundish objects on a bright
background, three categories with a heavily imbalanced ratio and
large/medium/small size ordering, overlap and border truncation allowed.
Generation is a pure function of (config, seed, index), so datasets shard
reproducibly. Images are stored as binary PPM (P6) to stay codec-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .anchors import BoxN
from .errors import ConfigError, ParseError

# category palette: base RGB and jitter, index-aligned with radii/ratios
_PALETTE = (
    ((0.84, 0.42, 0.44), 0.06),   # dominant: reddish, large
    ((0.50, 0.48, 0.86), 0.06),   # medium: blue-violet
    ((0.55, 0.25, 0.50), 0.06),   # small: dark magenta
)


@dataclass
class SceneConfig:
    image_h: int = 160
    image_w: int = 160
    # default imbalance mirrors a dominant-class histogram; configurable
    ratios: tuple = (0.70, 0.15, 0.15)
    # per-category radius ranges as fractions of min(H, W): large/medium/small
    radii: tuple = ((0.070, 0.120), (0.048, 0.085), (0.028, 0.048))
    objects_min: int = 4
    objects_max: int = 9
    # 0 = objects may only touch; 1 = centers may coincide
    overlap: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"category ratios must sum to 1, got {self.ratios}")
        if len(self.ratios) != len(self.radii):
            raise ConfigError("ratios and radius ranges must align per category")
        for lo, hi in self.radii:
            if lo <= 0 or hi < lo:
                raise ConfigError(f"invalid radius range ({lo}, {hi})")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError("objects-per-image range must be positive and ordered")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap allowance must be in [0,1], got {self.overlap}")

    @property
    def n_categories(self) -> int:
        return len(self.ratios)


@dataclass(frozen=True)
class Ellipse:
    cx: float   # pixel coordinates of the center
    cy: float
    rx: float
    ry: float
    angle: float


@dataclass
class LabeledImage:
    pixels: np.ndarray                      # (H, W, 3) floats in [0, 1]
    labels: list[tuple[int, BoxN]]
    objects: list[Ellipse] = field(default_factory=list)


def ellipse_mask(h: int, w: int, e: Ellipse) -> np.ndarray:
    """Boolean footprint of an ellipse over pixel centers (x+0.5, y+0.5)."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - e.cx
    dy = ys + 0.5 - e.cy
    c, s = math.cos(e.angle), math.sin(e.angle)
    u = (dx * c + dy * s) / e.rx
    v = (-dx * s + dy * c) / e.ry
    return u * u + v * v <= 1.0


def _mask_box(mask: np.ndarray) -> BoxN | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    h, w = mask.shape
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return BoxN((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h)


def generate_scene(config: SceneConfig, index: int) -> LabeledImage:
    """Render one scene: filled ellipses over a noisy bright background.

    Objects may overlap (later draws occlude earlier ones) and may be
    truncated at the borders; each label box is the exact pixel extent of
    its object's own footprint clipped to the image.
    """
    rng = np.random.default_rng([config.seed, index])
    h, w = config.image_h, config.image_w
    base = np.array([0.93, 0.90, 0.92])
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = base
    # gentle illumination gradient plus grain
    gy = np.linspace(-1, 1, h)[:, None, None] * rng.uniform(-0.02, 0.02)
    gx = np.linspace(-1, 1, w)[None, :, None] * rng.uniform(-0.02, 0.02)
    img = img + gy + gx + rng.normal(0.0, 0.012, (h, w, 3))

    scale = min(h, w)
    n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
    labels: list[tuple[int, BoxN]] = []
    objects: list[Ellipse] = []
    placed: list[tuple[float, float, float]] = []  # (cx, cy, mean radius)

    for _ in range(n_objects):
        cat = int(rng.choice(config.n_categories, p=config.ratios))
        lo, hi = config.radii[cat]
        for _attempt in range(60):
            rx = rng.uniform(lo, hi) * scale
            ry = rx * rng.uniform(0.78, 1.25)
            angle = rng.uniform(0.0, math.pi)
            # full range keeps border truncation in play
            cx = rng.uniform(0.0, w)
            cy = rng.uniform(0.0, h)
            r_mean = (rx + ry) / 2
            min_gap = (1.0 - config.overlap)
            ok = all(math.hypot(cx - px, cy - py) >= min_gap * (r_mean + pr)
                     for px, py, pr in placed)
            if not ok:
                continue
            e = Ellipse(cx, cy, rx, ry, angle)
            mask = ellipse_mask(h, w, e)
            visible = mask.sum()
            if visible < 9 or visible < 0.35 * math.pi * rx * ry:
                continue  # nearly gone at the border; try again
            box = _mask_box(mask)
            color = np.array(_PALETTE[cat % len(_PALETTE)][0])
            color = color + rng.uniform(-1, 1, 3) * _PALETTE[cat % len(_PALETTE)][1]
            shade = 1.0 - 0.25 * rng.random()
            img[mask] = color * shade + rng.normal(0.0, 0.02, (int(visible), 3))
            labels.append((cat, box))
            objects.append(e)
            placed.append((cx, cy, r_mean))
            break

    return LabeledImage(pixels=np.clip(img, 0.0, 1.0), labels=labels,
                        objects=objects)


# ---------------------------------------------------------------------------
# label files

def write_labels(path, labels: list[tuple[int, BoxN]]) -> None:
    """One `category_id cx cy w h` line per box, normalized, 6 decimals."""
    with open(path, "w") as f:
        for cat, box in labels:
            f.write(f"{cat} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}\n")


def read_labels(path, n_categories: int | None = None) -> list[tuple[int, BoxN]]:
    labels = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ParseError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            try:
                cat = int(parts[0])
                cx, cy, bw, bh = (float(v) for v in parts[1:])
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: {e}") from None
            if cat < 0 or (n_categories is not None and cat >= n_categories):
                raise ParseError(
                    f"{path}:{ln}: category {cat} out of range [0, {n_categories})")
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0
                    and 0.0 < bw <= 1.0 and 0.0 < bh <= 1.0):
                raise ParseError(f"{path}:{ln}: box values out of range")
            labels.append((cat, BoxN(cx, cy, bw, bh)))
    return labels


# ---------------------------------------------------------------------------
# image resampling and filters

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; constants stay constant."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target dims must be >= 1, got {out_h}x{out_w}")
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1, *([1] * (image.ndim - 2)))
    fx = (xs - x0).reshape(1, -1, *([1] * (image.ndim - 2)))
    top = image[np.ix_(y0, x0)] * (1 - fx) + image[np.ix_(y0, x1)] * fx
    bot = image[np.ix_(y1, x0)] * (1 - fx) + image[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(image: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * image.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(image, pad, mode="edge")
    out = np.zeros_like(image, dtype=np.float64)
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * image.ndim
        sl[axis] = slice(i, i + image.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def _median_filter(image: np.ndarray, k: int) -> np.ndarray:
    if k % 2 != 1:
        raise ConfigError(f"median window must be odd, got {k}")
    r = k // 2
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    h, w, c = img.shape
    stack = np.empty((k * k, h, w, c), dtype=img.dtype)
    for i in range(k):
        for j in range(k):
            stack[i * k + j] = padded[i:i + h, j:j + w]
    out = np.median(stack, axis=0)
    return out[..., 0] if squeeze else out


def preprocess_filter(image: np.ndarray, mode: str, labels=None, *,
                      sigma: float = 1.0, k: int = 3, factor: float = 1.0):
    """Denoise / contrast / geometric ops; geometric modes move labels too.

    Returns (image, labels); labels pass through unchanged for the
    non-geometric modes.
    """
    if mode == "gaussian":
        kern = _gaussian_kernel(sigma)
        out = _convolve_axis(_convolve_axis(image, kern, 0), kern, 1)
        return np.clip(out, 0.0, 1.0), labels
    if mode == "median":
        return _median_filter(image, k), labels
    if mode == "contrast":
        return np.clip(0.5 + factor * (image - 0.5), 0.0, 1.0), labels
    if mode == "mirror":
        out = image[:, ::-1].copy()
        if labels is not None:
            labels = [(c, BoxN(1.0 - b.cx, b.cy, b.w, b.h)) for c, b in labels]
        return out, labels
    if mode == "rotate90":
        out = np.rot90(image).copy()
        if labels is not None:
            labels = [(c, BoxN(b.cy, 1.0 - b.cx, b.h, b.w)) for c, b in labels]
        return out, labels
    raise ConfigError(f"unknown preprocess mode {mode!r}")


# ---------------------------------------------------------------------------
# PPM container (P6, maxval 255)

def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after header
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
