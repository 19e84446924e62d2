"""Single-scale dense hand detector with an optional contextual attention stage.

Backbone: non-overlapping strided convolutions, so each grid cell only sees
its own patch.  The attention module is inserted residually after the last
backbone stage; a 1x1 hidden layer and a 1x1 head follow.  Per cell the head
predicts an objectness logit, four box offsets and a (sin, cos) pair for the
hand orientation.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attention_insert, build_distance_table, project_constraints
from .errors import ConfigError, DimensionError
from .evaluation import DetectionResult, GroundTruthBox, average_precision, iou, match_detections
from .orientation import OrientationLossConfig, combined_loss, orientation_loss_tensor
from .scenes import SyntheticScene, rng_stream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

HEAD_CHANNELS = 7  # objectness, tx, ty, tw, th, sin, cos
OBJ_PRIOR = 0.01
PIXEL_MEAN, PIXEL_STD = 127.5, 64.0


@dataclass(frozen=True)
class ToyDetectorConfig:
    image_size: int = 96
    backbone: tuple = ((4, 4, 16), (2, 2, 32))  # (kernel, stride, out channels) per stage
    hidden: int = 32
    similarity: bool = True
    semantic: bool = True
    K: int = 6
    lam: float = 0.1
    lr: float = 1e-2
    momentum: float = 0.9
    lr_decay_at: float = 2 / 3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    anchor: float = 16.0
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    grad_clip: float = 10.0
    alpha_lr_mult: float = 1.0
    prior_lr_mult: float = 1.0  # mu and sigma
    wp_lr_mult: float = 1.0
    sim_lr_mult: float = 3.0  # w_theta and w_phi
    prior_init: str = "local"  # "spread": mu over [0, diag/2], sigma diag/4; "local": mu_k = k, sigma 1
    wp_init_gain: float = 5.0  # scales the Xavier draw of w_p
    sim_init_gain: float = 1.0  # scales w_theta and w_phi
    wg_init_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(tuple(int(v) for v in s) for s in self.backbone))
        self.validate()

    @property
    def stride(self) -> int:
        return int(np.prod([s for _, s, _ in self.backbone]))

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def m(self) -> int:
        return self.backbone[-1][2]

    @property
    def context(self) -> bool:
        return self.similarity or self.semantic

    @property
    def label(self) -> str:
        if self.similarity and self.semantic:
            return "full-context"
        if self.similarity:
            return "no-semantic"
        if self.semantic:
            return "no-similarity"
        return "no-context"

    def validate(self):
        if not self.backbone:
            raise ConfigError("backbone needs at least one stage")
        if self.image_size % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide image size {self.image_size}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.K < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("K, batch size and learning rate must be positive, epochs non-negative")
        if self.prior_init not in ("spread", "local"):
            raise ConfigError(f"prior_init must be 'spread' or 'local', got {self.prior_init!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [list(s) for s in self.backbone]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDetectorConfig":
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = tuple(tuple(s) for s in d["backbone"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ToyDetectorConfig, rng=None) -> dict[str, Tensor]:
    """He-normal convolutions, Xavier-normal attention weights, objectness bias at a 1% prior."""
    rng = rng_stream(cfg.seed, "init") if rng is None else np.random.default_rng(rng)
    params: dict[str, Tensor] = {}
    cin = 3
    for i, (k, _, cout) in enumerate(cfg.backbone):
        params[f"conv{i}.w"] = Tensor(rng.normal(0, math.sqrt(2 / (k * k * cin)), (k, k, cin, cout)), True)
        params[f"conv{i}.b"] = Tensor(np.zeros(cout), True)
        cin = cout
    if cfg.context:
        attn = AttentionParams.init(cfg.m, cfg.K, cfg.grid, cfg.grid, rng)
        if cfg.prior_init == "local":
            attn.mu.data[:] = np.arange(cfg.K, dtype=np.float64)
            attn.sigma.data[:] = 1.0
        attn.w_p.data *= cfg.wp_init_gain
        attn.w_theta.data *= cfg.sim_init_gain
        attn.w_phi.data *= cfg.sim_init_gain
        attn.w_g.data *= cfg.wg_init_gain
        for name, t in attn.tensors().items():
            params[f"attn.{name}"] = t
    params["hidden.w"] = Tensor(rng.normal(0, math.sqrt(2 / cfg.m), (1, 1, cfg.m, cfg.hidden)), True)
    params["hidden.b"] = Tensor(np.zeros(cfg.hidden), True)
    params["head.w"] = Tensor(rng.normal(0, 0.01, (1, 1, cfg.hidden, HEAD_CHANNELS)), True)
    bias = np.zeros(HEAD_CHANNELS)
    bias[0] = -math.log((1 - OBJ_PRIOR) / OBJ_PRIOR)
    params["head.b"] = Tensor(bias, True)
    return params


def attention_params(params: dict[str, Tensor]) -> AttentionParams | None:
    if "attn.w_g" not in params:
        return None
    return AttentionParams(**{k[5:]: v for k, v in params.items() if k.startswith("attn.")})


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward, targets, loss


def images_to_array(scenes_or_images) -> np.ndarray:
    imgs = [s.image if isinstance(s, SyntheticScene) else s for s in scenes_or_images]
    return (np.stack(imgs).astype(np.float64) - PIXEL_MEAN) / PIXEL_STD


def forward(params: dict[str, Tensor], cfg: ToyDetectorConfig, images: np.ndarray) -> Tensor:
    """(n, size, size, 3) standardized images -> (n, grid, grid, 7) head outputs."""
    if images.ndim != 4 or images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected (n, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")
    x = Tensor(images)
    for i, (_, s, _) in enumerate(cfg.backbone):
        x = T.relu(T.conv2d(x, params[f"conv{i}.w"], stride=s) + params[f"conv{i}.b"])
    attn = attention_params(params)
    if attn is not None and cfg.context:
        D = _distance_table(cfg.grid)
        x = attention_insert(x, attn, cfg.similarity, cfg.semantic, D)
    x = T.relu(T.conv2d(x, params["hidden.w"]) + params["hidden.b"])
    return T.conv2d(x, params["head.w"]) + params["head.b"]


_D_CACHE: dict[int, np.ndarray] = {}


def _distance_table(g: int) -> np.ndarray:
    if g not in _D_CACHE:
        _D_CACHE[g] = build_distance_table(g, g)
    return _D_CACHE[g]


def encode_box(box, row: int, col: int, cfg: ToyDetectorConfig) -> np.ndarray:
    x0, y0, x1, y1 = box
    s = cfg.stride
    return np.array([
        (x0 + x1) / 2 / s - (col + 0.5),
        (y0 + y1) / 2 / s - (row + 0.5),
        math.log((x1 - x0) / cfg.anchor),
        math.log((y1 - y0) / cfg.anchor),
    ])


def decode_boxes(offsets: np.ndarray, rows: np.ndarray, cols: np.ndarray, cfg: ToyDetectorConfig) -> np.ndarray:
    s = cfg.stride
    cx = (offsets[..., 0] + cols + 0.5) * s
    cy = (offsets[..., 1] + rows + 0.5) * s
    w = np.exp(offsets[..., 2]) * cfg.anchor
    h = np.exp(offsets[..., 3]) * cfg.anchor
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass
class Targets:
    obj: np.ndarray  # (n, g, g)
    pos_index: tuple  # (n_idx, row_idx, col_idx)
    box: np.ndarray  # (npos, 4)
    angle: np.ndarray  # (npos,)


def build_targets(scenes: Sequence[SyntheticScene], cfg: ToyDetectorConfig) -> Targets:
    """Each hand is assigned to the cell holding its box center."""
    g, s = cfg.grid, cfg.stride
    obj = np.zeros((len(scenes), g, g))
    idx, boxes, angles = [], [], []
    for n, sc in enumerate(scenes):
        for ann in sc.annotations():
            box = GroundTruthBox.from_annotation(ann).box
            cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            r, c = min(int(cy // s), g - 1), min(int(cx // s), g - 1)
            if obj[n, r, c]:
                log.warning("%s: two hands share cell (%d, %d); keeping the first", sc.image_id, r, c)
                continue
            obj[n, r, c] = 1
            idx.append((n, r, c))
            boxes.append(encode_box(box, r, c, cfg))
            angles.append(ann.orientation)
    pos = tuple(np.array(v, dtype=np.intp) for v in zip(*idx)) if idx else (np.zeros(0, np.intp),) * 3
    return Targets(obj, pos, np.array(boxes).reshape(-1, 4), np.array(angles))


def detection_loss(out: Tensor, tg: Targets, cfg: ToyDetectorConfig) -> tuple[Tensor, dict]:
    """BCE objectness + smooth-L1 box offsets + lambda * wrapped orientation loss."""
    npos = max(len(tg.angle), 1)
    l_obj = T.bce_with_logits(out[..., 0], tg.obj).sum() / float(npos)
    if len(tg.angle):
        pos = out[tg.pos_index]  # (npos, 7)
        l_box = T.smooth_l1(pos[:, 1:5] - tg.box).sum() / float(npos)
        theta = T.atan2(pos[:, 5], pos[:, 6])
        l_ori = orientation_loss_tensor(theta, tg.angle).sum() / float(npos)
    else:
        l_box = T.scale(out[..., 1:5].sum(), 0.0)
        l_ori = T.scale(out[..., 5].sum(), 0.0)
    total = combined_loss([l_obj, l_box], l_ori, OrientationLossConfig(cfg.lam))
    return total, {"obj": l_obj.item(), "box": l_box.item(), "ori": l_ori.item()}


# ---------------------------------------------------------------------------
# inference


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> list[int]:
    """Greedy non-maximum suppression; ties in score keep input order."""
    keep = []
    for i in np.argsort(-scores, kind="stable"):
        if all(iou(boxes[i], boxes[j]) <= thresh for j in keep):
            keep.append(int(i))
    return keep


def decode_outputs(out: np.ndarray, cfg: ToyDetectorConfig, image_ids: Sequence[str]) -> list[DetectionResult]:
    dets = []
    g = cfg.grid
    rows, cols = np.divmod(np.arange(g * g), g)
    for n, image_id in enumerate(image_ids):
        o = out[n].reshape(g * g, HEAD_CHANNELS)
        scores = T._sigmoid(o[:, 0])
        sel = np.nonzero(scores >= cfg.score_thresh)[0]
        if sel.size == 0:
            continue
        boxes = decode_boxes(o[sel, 1:5], rows[sel], cols[sel], cfg)
        sc, cs = o[sel, 5], o[sel, 6]
        norm = np.hypot(sc, cs)
        norm[norm == 0] = 1.0
        angles = np.arctan2(sc / norm, cs / norm)
        for k in nms(boxes, scores[sel], cfg.nms_iou):
            dets.append(DetectionResult(image_id, tuple(boxes[k]), float(scores[sel][k]), float(angles[k])))
    return dets


def infer(params: dict[str, Tensor], cfg: ToyDetectorConfig, images, image_ids=None,
          batch_size: int = 64) -> list[DetectionResult]:
    """Detections for a list of images or scenes (no tape is recorded)."""
    items = list(images)
    if image_ids is None:
        image_ids = [s.image_id if isinstance(s, SyntheticScene) else str(i) for i, s in enumerate(items)]
    dets = []
    for start in range(0, len(items), batch_size):
        arr = images_to_array(items[start:start + batch_size])
        out = forward(params, cfg, arr).data
        dets.extend(decode_outputs(out, cfg, image_ids[start:start + batch_size]))
    return dets


def evaluate_ap(params, cfg: ToyDetectorConfig, scenes: Sequence[SyntheticScene]) -> float:
    dets = infer(params, cfg, scenes)
    gts = [GroundTruthBox.from_annotation(a) for sc in scenes for a in sc.annotations()]
    m = match_detections(dets, gts)
    return average_precision(m.tp, [d.score for d in dets], len(gts)).ap


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: dict, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # one dict per epoch

    @property
    def final_val_ap(self) -> float:
        return self.history[-1]["val_ap"] if self.history else float("nan")


def train(cfg: ToyDetectorConfig, train_scenes: Sequence[SyntheticScene],
          val_scenes: Sequence[SyntheticScene] = (), params: dict | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """SGD with momentum; attention constraints are projected after every step."""
    if not train_scenes:
        raise ValueError("no training scenes")
    params = init_params(cfg) if params is None else params
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    mult = {k: 1.0 for k in params}
    if "attn.alpha" in mult:
        mult["attn.alpha"] = cfg.alpha_lr_mult
        mult["attn.mu"] = mult["attn.sigma"] = cfg.prior_lr_mult
        mult["attn.w_p"] = cfg.wp_lr_mult
        mult["attn.w_theta"] = mult["attn.w_phi"] = cfg.sim_lr_mult
    shuffle = rng_stream(cfg.seed, "shuffle")
    images = images_to_array(train_scenes)
    attn = attention_params(params)
    history = []
    last_good = copy_params(params)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.1 if epoch >= cfg.lr_decay_at * cfg.epochs else 1.0)
        order = shuffle.permutation(len(train_scenes))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tg = build_targets([train_scenes[i] for i in idx], cfg)
            for p in params.values():
                p.zero_grad()
            with Tape() as tape:
                out = forward(params, cfg, images[idx])
                loss, _ = detection_loss(out, tg, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", last_good, history)
            tape.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            with np.errstate(over="ignore", invalid="ignore"):
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(gnorm):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}", last_good, history)
            clip = min(1.0, cfg.grad_clip / gnorm) if gnorm > 0 else 1.0
            for k, p in params.items():
                velocity[k] = cfg.momentum * velocity[k] + grads[k] * clip
                p.data -= lr * mult[k] * velocity[k]
            if attn is not None:
                project_constraints(attn)
            step += 1
            if on_step is not None:
                on_step(step, params)
            total += value
            batches += 1
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / batches}
        row["val_ap"] = evaluate_ap(params, cfg, val_scenes) if val_scenes else float("nan")
        history.append(row)
        log.info("epoch %d: loss %.4f val AP %.4f", epoch + 1, row["train_loss"], row["val_ap"])
        if not all(np.all(np.isfinite(p.data)) for p in params.values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}", last_good, history)
        last_good = copy_params(params)
    return TrainResult(params, history)


def write_metric_log(history: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,val_ap\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},{row['val_ap']!r}\n")


# ---------------------------------------------------------------------------
# checkpoints: magic, version, config JSON, then named float64 arrays

CKPT_MAGIC = b"HCTXCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], cfg: ToyDetectorConfig) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<III", CKPT_VERSION, len(cfg_blob), len(params)))
    buf.write(cfg_blob)
    for name in sorted(params):
        data = params[name].data
        nb = name.encode()
        buf.write(struct.pack("<HB", len(nb), data.ndim))
        buf.write(nb)
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ToyDetectorConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a detector checkpoint")
    version, ncfg, narr = struct.unpack_from("<III", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    cfg = ToyDetectorConfig.from_dict(json.loads(blob[pos:pos + ncfg]))
    pos += ncfg
    params = {}
    for _ in range(narr):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = Tensor(np.frombuffer(blob, "<f8", count, pos).reshape(shape), requires_grad=True)
        pos += 8 * count
    return params, cfg
