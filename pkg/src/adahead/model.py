"""Detector assembly: backbone + attention head + decode, checkpointing,
and the TNSR tensor dump format."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .anchors import AnchorSet, BoxN, dynamic_anchors
from .attention import HeadOutput, HeadParams, head_apply, init_head_params
from .backbone import (BackboneConfig, BackboneParams, backbone_forward,
                       init_backbone_params)
from .errors import ConfigError, ParseError
from .postprocess import Detection, nms
from .precision import dtype
from .tensor import Tensor

TNSR_MAGIC = b"TNSR"
CHECKPOINT_MAGIC = "ADHCK1"


@dataclass
class ModelConfig:
    input_h: int = 160
    input_w: int = 160
    n_categories: int = 3
    strides: tuple = (8, 16, 32)
    scales: tuple = (3.0, 4.0, 5.0)
    aspect_ratios: tuple = (1.0,)
    k_points: int = 9
    stem_channels: int = 16
    widths: tuple = (16, 32, 64, 64, 64)
    head_channels: int = 64
    leaky_slope: float = 0.1

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(stem_channels=self.stem_channels, widths=self.widths,
                              strides=self.strides, head_channels=self.head_channels,
                              leaky_slope=self.leaky_slope)

    @property
    def boxes_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            out.append(f"{f.name}={v}")
        return out

    @classmethod
    def from_lines(cls, lines: list[str]) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in lines:
            key, _, raw = line.partition("=")
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, tuple):
                parts = [p for p in raw.split(",") if p]
                elem = float if any("." in p for p in parts) else int
                kwargs[key] = tuple(elem(p) for p in parts)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


class Detector:
    """Backbone + head with a fixed anchor layout for the configured input."""

    def __init__(self, config: ModelConfig, backbone_params: BackboneParams,
                 head_params: HeadParams):
        self.config = config
        self.backbone_params = backbone_params
        self.head_params = head_params
        self.anchors: AnchorSet = dynamic_anchors(
            config.input_h, config.input_w, config.strides, config.scales,
            config.aspect_ratios)
        self._meta = _anchor_meta(self.anchors)

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Detector":
        rng = np.random.default_rng(seed)
        backbone_params = init_backbone_params(config.backbone(), rng=rng)
        head_params = init_head_params(config.head_channels, config.n_categories,
                                       config.boxes_per_cell,
                                       k_points=config.k_points, rng=rng)
        return cls(config, backbone_params, head_params)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.backbone_params.tensors().items():
            out[f"backbone.{name}"] = t
        for name, t in self.head_params.tensors().items():
            out[f"head.{name}"] = t
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def forward(self, images: np.ndarray) -> tuple[HeadOutput, Tensor]:
        """images: (N, H, W, 3) floats in [0, 1]; dims padded to stride."""
        if images.ndim == 3:
            images = images[None]
        images = _pad_batch(images, max(self.config.strides))
        pyramid = backbone_forward(Tensor(images), self.backbone_params,
                                   self.config.backbone())
        return head_apply(pyramid, self.head_params)

    def decode_detections(self, head_out: HeadOutput, image_index: int = 0,
                          conf_threshold: float = 0.25,
                          nms_iou: float = 0.45) -> list[Detection]:
        """Joint-score threshold, offset decode, corner clamp, then NMS."""
        meta = self._meta
        joint = head_out.joint_score[image_index]
        keep = np.flatnonzero(joint >= conf_threshold)
        if keep.size == 0:
            return []
        t = head_out.box_params.data[image_index][keep].astype(np.float64)
        logits = head_out.class_logits.data[image_index][keep]
        cx = (meta["ix"][keep] + _sigmoid(t[:, 0])) / meta["sx"][keep]
        cy = (meta["iy"][keep] + _sigmoid(t[:, 1])) / meta["sy"][keep]
        w = np.minimum(meta["aw"][keep] * np.exp(t[:, 2]), 1.0)
        h = np.minimum(meta["ah"][keep] * np.exp(t[:, 3]), 1.0)
        x1 = np.clip(cx - w / 2, 0.0, 1.0)
        x2 = np.clip(cx + w / 2, 0.0, 1.0)
        y1 = np.clip(cy - h / 2, 0.0, 1.0)
        y2 = np.clip(cy + h / 2, 0.0, 1.0)
        cats = logits.argmax(axis=1)
        dets = [Detection(BoxN((x1[i] + x2[i]) / 2, (y1[i] + y2[i]) / 2,
                               x2[i] - x1[i], y2[i] - y1[i]),
                          int(cats[i]), float(joint[keep[i]]))
                for i in range(keep.size)
                if x2[i] > x1[i] and y2[i] > y1[i]]
        return [dets[i] for i in nms(dets, nms_iou)]

    def infer(self, image: np.ndarray, conf_threshold: float = 0.25,
              nms_iou: float = 0.45) -> tuple[list[Detection], Tensor]:
        head_out, attended = self.forward(image[None])
        return self.decode_detections(head_out, 0, conf_threshold, nms_iou), attended


def _pad_batch(images: np.ndarray, stride: int) -> np.ndarray:
    h, w = images.shape[1:3]
    ph, pw = (-h) % stride, (-w) % stride
    if ph == 0 and pw == 0:
        return images
    return np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _anchor_meta(anchors: AnchorSet) -> dict[str, np.ndarray]:
    """Flat per-anchor arrays: cell indices, grid dims, base sizes."""
    ix, iy, sx, sy, aw, ah = [], [], [], [], [], []
    for lv in anchors.levels:
        nb = lv.sizes.shape[0]
        gx = np.tile(np.repeat(np.arange(lv.sx), nb), lv.sy)
        gy = np.repeat(np.arange(lv.sy), lv.sx * nb)
        ix.append(gx)
        iy.append(gy)
        sx.append(np.full(lv.count, lv.sx))
        sy.append(np.full(lv.count, lv.sy))
        aw.append(np.tile(lv.sizes[:, 0], lv.sx * lv.sy))
        ah.append(np.tile(lv.sizes[:, 1], lv.sx * lv.sy))
    return {k: np.concatenate(v).astype(np.float64) for k, v in
            (("ix", ix), ("iy", iy), ("sx", sx), ("sy", sy),
             ("aw", aw), ("ah", ah))}


# ---------------------------------------------------------------------------
# TNSR dump format

def write_tnsr(f, array: np.ndarray) -> None:
    """ASCII magic TNSR, one `rank d0 .. dr` line, little-endian f32 data."""
    own = not hasattr(f, "write")
    fh = open(f, "wb") if own else f
    try:
        dims = " ".join(str(d) for d in array.shape)
        fh.write(TNSR_MAGIC + b"\n")
        fh.write(f"{array.ndim} {dims}".rstrip().encode() + b"\n")
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    finally:
        if own:
            fh.close()


def read_tnsr(f) -> np.ndarray:
    own = not hasattr(f, "read")
    fh = open(f, "rb") if own else f
    try:
        magic = fh.readline().strip()
        if magic != TNSR_MAGIC:
            raise ParseError(f"bad tensor magic {magic!r}")
        header = fh.readline().split()
        rank = int(header[0])
        shape = tuple(int(d) for d in header[1:])
        if len(shape) != rank:
            raise ParseError(f"rank {rank} disagrees with dims {shape}")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(count * 4), dtype="<f4", count=count)
        return data.reshape(shape).astype(dtype())
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# checkpoints: text header + manifest of TNSR blobs

def save_checkpoint(path, detector: Detector, epoch: int = 0,
                    rng_state: dict | None = None) -> None:
    params = detector.parameters()
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n".encode())
        f.write(f"epoch={epoch}\n".encode())
        f.write(("rng=" + json.dumps(rng_state or {}, sort_keys=True) + "\n").encode())
        for line in detector.config.to_lines():
            f.write(f"config.{line}\n".encode())
        f.write(f"tensors={len(params)}\n".encode())
        for name, t in params.items():
            f.write(f"{name}\n".encode())
            write_tnsr(f, t.data)


def load_checkpoint(path) -> tuple[Detector, int, dict]:
    with open(path, "rb") as f:
        magic = f.readline().decode().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
        epoch = int(f.readline().decode().strip().split("=", 1)[1])
        rng_state = json.loads(f.readline().decode().strip().split("=", 1)[1])
        config_lines = []
        while True:
            line = f.readline().decode().strip()
            if line.startswith("tensors="):
                count = int(line.split("=", 1)[1])
                break
            if not line.startswith("config."):
                raise ParseError(f"{path}: unexpected header line {line!r}")
            config_lines.append(line[len("config."):])
        config = ModelConfig.from_lines(config_lines)
        detector = Detector.build(config)
        params = detector.parameters()
        if count != len(params):
            raise ParseError(
                f"{path}: checkpoint has {count} tensors, model needs {len(params)}")
        for _ in range(count):
            name = f.readline().decode().strip()
            if name not in params:
                raise ParseError(f"{path}: unknown parameter {name!r}")
            arr = read_tnsr(f)
            if arr.shape != params[name].shape:
                raise ParseError(
                    f"{path}: shape {arr.shape} != {params[name].shape} for {name}")
            params[name].data = arr.astype(params[name].data.dtype)
    return detector, epoch, rng_state
