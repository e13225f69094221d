"""Dataset directory layout and key=value config files.

Layout: `root/images/{split}/NNNNNN.ppm`, `root/labels/{split}/NNNNNN.txt`,
plus `root/dataset.cfg` describing the generator settings and split counts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .synth import (SceneConfig, generate_scene, read_labels, read_ppm,
                    write_labels, write_ppm)


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _format_radii(radii) -> str:
    return ",".join(f"{lo}:{hi}" for lo, hi in radii)


def _parse_radii(raw: str):
    pairs = []
    for part in raw.split(","):
        lo, _, hi = part.partition(":")
        pairs.append((float(lo), float(hi)))
    return tuple(pairs)


@dataclass
class DatasetConfig:
    scene: SceneConfig
    train_count: int = 300
    val_count: int = 60

    def to_lines(self) -> list[str]:
        s = self.scene
        return [f"categories={s.n_categories}",
                f"train_count={self.train_count}",
                f"val_count={self.val_count}",
                f"seed={s.seed}",
                f"image_h={s.image_h}",
                f"image_w={s.image_w}",
                "ratios=" + ",".join(repr(r) for r in s.ratios),
                "radii=" + _format_radii(s.radii),
                f"objects_min={s.objects_min}",
                f"objects_max={s.objects_max}",
                f"overlap={s.overlap}"]

    @classmethod
    def from_file(cls, path) -> "DatasetConfig":
        kv = parse_kv_file(path)
        known = {"categories", "train_count", "val_count", "seed", "image_h",
                 "image_w", "ratios", "radii", "objects_min", "objects_max",
                 "overlap"}
        unknown = set(kv) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        scene_kwargs = {}
        for key in ("seed", "image_h", "image_w", "objects_min", "objects_max"):
            if key in kv:
                scene_kwargs[key] = int(kv[key])
        if "overlap" in kv:
            scene_kwargs["overlap"] = float(kv["overlap"])
        if "ratios" in kv:
            scene_kwargs["ratios"] = tuple(float(r) for r in kv["ratios"].split(","))
        if "radii" in kv:
            scene_kwargs["radii"] = _parse_radii(kv["radii"])
        scene = SceneConfig(**scene_kwargs)
        if "categories" in kv and int(kv["categories"]) != scene.n_categories:
            raise ConfigError(
                f"{path}: categories={kv['categories']} disagrees with "
                f"{scene.n_categories} ratio entries")
        out = cls(scene=scene)
        if "train_count" in kv:
            out.train_count = int(kv["train_count"])
        if "val_count" in kv:
            out.val_count = int(kv["val_count"])
        return out


def generate_dataset(config: DatasetConfig, root) -> None:
    """Render train and val splits; val indices continue after train."""
    splits = (("train", 0, config.train_count),
              ("val", config.train_count, config.val_count))
    for split, start, count in splits:
        img_dir = os.path.join(root, "images", split)
        lbl_dir = os.path.join(root, "labels", split)
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(lbl_dir, exist_ok=True)
        for i in range(count):
            scene = generate_scene(config.scene, start + i)
            stem = f"{i:06d}"
            write_ppm(os.path.join(img_dir, stem + ".ppm"), scene.pixels)
            write_labels(os.path.join(lbl_dir, stem + ".txt"), scene.labels)
    with open(os.path.join(root, "dataset.cfg"), "w") as f:
        f.write("\n".join(config.to_lines()) + "\n")


def dataset_categories(root) -> int:
    cfg = parse_kv_file(os.path.join(root, "dataset.cfg"))
    return int(cfg["categories"])


def list_split(root, split: str) -> list[tuple[str, str]]:
    """Sorted (image_path, label_path) pairs for one split."""
    img_dir = os.path.join(root, "images", split)
    lbl_dir = os.path.join(root, "labels", split)
    if not os.path.isdir(img_dir):
        raise ConfigError(f"missing split directory {img_dir}")
    pairs = []
    for name in sorted(os.listdir(img_dir)):
        if not name.endswith(".ppm"):
            continue
        stem = name[:-4]
        pairs.append((os.path.join(img_dir, name),
                      os.path.join(lbl_dir, stem + ".txt")))
    return pairs


def load_split(root, split: str, n_categories: int | None = None):
    """All images and labels of a split, in filename order."""
    images, labels = [], []
    for img_path, lbl_path in list_split(root, split):
        images.append(read_ppm(img_path))
        labels.append(read_labels(lbl_path, n_categories))
    return images, labels
