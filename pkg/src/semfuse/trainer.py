"""Deterministic training, inference and checkpoint IO."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .decoder import recombine_chroma
from .errors import CorruptCheckpoint, EmptyManifest, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .imagedata import ColorSpace, DatasetManifest, ImageTensor, Modality, Split, load_image
from .losses import LossWeights, loss_parts
from .model import FusionModel, ModelConfig
from .textsem import StubBackend, encode_text

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"SFCKPT\x00\x00"
TRACE_FIELDS = ("step", "semantic", "grad", "rec", "total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 150
    batch_size: int = 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    stages: int = 2
    channels: int = 32
    head_dim: int = 64
    image_size: tuple = (64, 64)
    upsample: bool = False
    max_steps: int | None = None
    clip_grad_norm: float | None = None

    DESK_EPOCHS = 20

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    @classmethod
    def desk(cls, **overrides):
        return cls(**{"epochs": cls.DESK_EPOCHS, **overrides})

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            stages=self.stages,
            head_dim=self.head_dim,
            image_size=self.image_size,
            upsample=self.upsample,
        )

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class TrainResult:
    model: FusionModel
    trace: list  # dicts keyed by TRACE_FIELDS


@contextlib.contextmanager
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _luma_tensor(img: ImageTensor, dtype):
    return torch.tensor(img.luminance(), dtype=dtype)[None]


def load_training_data(manifest: DatasetManifest, backend=None, dtype=torch.float32):
    """Luminance stacks ``(N, 1, H, W)`` and cached text embeddings ``(N, 128)``."""
    backend = backend or StubBackend()
    y1, y2, p1, p2 = [], [], [], []
    for e in manifest.entries:
        a = load_image(manifest.resolve(e.image1_path), None, e.modality1)
        b = load_image(manifest.resolve(e.image2_path), None, e.modality2)
        if a.shape[:2] != b.shape[:2]:
            raise ShapeMismatch(f"{e.id}: source sizes differ {a.shape[:2]} vs {b.shape[:2]}")
        y1.append(_luma_tensor(a, dtype))
        y2.append(_luma_tensor(b, dtype))
        p1.append(torch.as_tensor(encode_text(e.text1, backend), dtype=dtype))
        p2.append(torch.as_tensor(encode_text(e.text2, backend), dtype=dtype))
    return torch.stack(y1), torch.stack(y2), torch.stack(p1), torch.stack(p2)


def train(manifest: DatasetManifest, cfg: TrainConfig = TrainConfig(), backend=None, model=None,
          log_every=0) -> TrainResult:
    """Adam over the weighted total loss; bitwise reproducible for a given seed."""
    if len(manifest) == 0:
        raise EmptyManifest("cannot train on an empty manifest")
    if manifest.split != Split.TRAIN:
        raise ValueError(f"training needs a TRAIN manifest, got {manifest.split.value}")
    y1, y2, p1, p2 = load_training_data(manifest, backend)
    if tuple(y1.shape[-2:]) != cfg.image_size:
        raise ShapeMismatch(f"images are {tuple(y1.shape[-2:])}, config expects {cfg.image_size}")
    return train_tensors(y1, y2, p1, p2, cfg, model=model, log_every=log_every)


def train_tensors(y1, y2, p1, p2, cfg: TrainConfig, model=None, log_every=0) -> TrainResult:
    with _single_thread(), torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        if model is None:
            model = FusionModel(cfg.model_config())
        model = model.float().train()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        order_rng = np.random.default_rng(cfg.seed)
        n = y1.shape[0]
        trace = []
        step = 0
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return TrainResult(model, trace)
                idx = torch.as_tensor(order[start:start + cfg.batch_size])
                opt.zero_grad(set_to_none=True)
                _, parts = loss_parts(model, y1[idx], y2[idx], p1[idx], p2[idx], cfg.weights)
                total = parts["total"]
                if not torch.isfinite(total):
                    raise NonFiniteLoss(f"non-finite loss at step {step + 1}", step=step + 1)
                total.backward()
                if cfg.clip_grad_norm is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad_norm)
                opt.step()
                step += 1
                trace.append({"step": step, **{k: v.item() for k, v in parts.items()}})
                if log_every and step % log_every == 0:
                    log.info("epoch %d step %d total %.6f", epoch, step, trace[-1]["total"])
        return TrainResult(model, trace)


def write_trace(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["step"], *(repr(float(row[k])) for k in TRACE_FIELDS[1:])])


# --------------------------------------------------------------------------
# Inference


def fuse(img1: ImageTensor, img2: ImageTensor, texts, model: FusionModel, backend=None) -> ImageTensor:
    """Fuse a registered pair; RGB output when ``img2`` is color, GRAY otherwise."""
    size = model.config.image_size
    for img in (img1, img2):
        if tuple(img.shape[:2]) != size:
            raise ShapeMismatch(f"image is {img.shape[:2]}, model was built for {size}")
    backend = backend or StubBackend()
    dtype = next(model.parameters()).dtype
    phi1 = torch.as_tensor(encode_text(texts[0], backend), dtype=dtype)[None]
    phi2 = torch.as_tensor(encode_text(texts[1], backend), dtype=dtype)[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(_luma_tensor(img1, dtype)[None], _luma_tensor(img2, dtype)[None], phi1, phi2)
    finally:
        model.train(was_training)
    plane = np.clip(y[0, 0].double().numpy(), 0.0, 1.0)
    fused = ImageTensor(plane, Modality.FUSED, ColorSpace.GRAY)
    if img2.colorspace == ColorSpace.RGB:
        return recombine_chroma(fused, img2)
    return fused


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout: 8-byte magic | u32 header length | JSON header | float32 LE payload | u32 CRC32
# of everything before it.


def save_checkpoint(model: FusionModel, path, seed=None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        blobs.append(arr.tobytes(order="C"))
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": "semfuse-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "seed": seed,
        "dtype": "float32",
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse(data)[0]


def _parse(data: bytes):
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpoint("not a checkpoint file (bad magic or truncated)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch (file truncated or damaged)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", body[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    return header, body[pos + hlen:]


def load_checkpoint(path) -> FusionModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    header, payload = _parse(path.read_bytes())
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig(**header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"bad model section: {exc}") from exc
    model = FusionModel(cfg)
    state = {}
    for entry in header["tensors"]:
        count = math.prod(entry["shape"])
        start, stop = entry["offset"], entry["offset"] + 4 * count
        if stop > len(payload):
            raise CorruptCheckpoint(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"tensor manifest does not match the model: {exc}") from exc
    return model
