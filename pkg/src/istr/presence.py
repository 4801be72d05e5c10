"""Level-1: was text removed from this image?

A binary image classifier trained on removed-text positives against the
protocol's negatives, with Grad-CAM heatmaps to show where it looks.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from istr.metrics import binary_accuracy, confusion_counts
from istr.protocols import POSITIVE, DatasetManifest
from istr.report import MetricsReport
from istr.training import (CheckpointStore, EpochRecord, TrainLog, batch_indices, check_finite,
                           checkpoint_id, images_to_tensor, seed_everything, select_checkpoint)

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "PresenceVerdict", "PresenceModel", "SmallResNet", "train_presence",
           "select_checkpoint", "load_presence_model", "classify", "explain", "evaluate_presence"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    optimizer: str = "adam"  # or "adamw"
    seed: int = 0
    backbone: str = "small_resnet"  # or "resnet50"
    pretrained: bool = False
    weight_decay: float = 0.0
    hflip: bool = False
    input_size: tuple[int, int] | None = None  # None: use the training images' size
    keep: str = "best_last"
    deterministic: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.input_size is not None:
            self.input_size = tuple(self.input_size)


@dataclass
class PresenceVerdict:
    label: str  # "str_ed" or "clean"
    score: float


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False, padding_mode="replicate")
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False, padding_mode="replicate")
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class NoiseResidual(nn.Module):
    """Fixed second-order high-pass filter per channel (an SRM-style residual).

    Inpainting flattens or re-synthesises sensor-like noise; a fixed residual
    exposes that directly instead of leaving the first layer to discover it.
    """

    def __init__(self, channels: int = 3):
        super().__init__()
        k = torch.tensor([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=torch.float32) / 4
        self.register_buffer("kernel", k.view(1, 1, 3, 3).repeat(channels, 1, 1, 1))
        self.norm = nn.BatchNorm2d(channels)
        self.channels = channels

    def forward(self, x):
        r = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), self.kernel, groups=self.channels)
        return self.norm(r)


class SmallResNet(nn.Module):
    """Noise-residual front end, then nine 3x3 convolutions in four residual
    blocks (overall stride 8) and an average+max pooled linear head.

    Replicate padding keeps a constant image constant through every layer, so
    attribution maps carry no border artefacts.
    """

    def __init__(self, num_classes: int = 2, width: int = 16):
        super().__init__()
        w = width
        self.residual = NoiseResidual(3)
        self.stem = nn.Sequential(nn.Conv2d(6, w, 3, 2, 1, bias=False, padding_mode="replicate"),
                                  nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.layer1 = BasicBlock(w, w)
        self.layer2 = BasicBlock(w, 2 * w, 2)
        self.layer3 = BasicBlock(2 * w, 4 * w, 2)
        self.layer4 = BasicBlock(4 * w, 4 * w)
        self.fc = nn.Linear(8 * w, num_classes)

    @property
    def cam_layer(self) -> nn.Module:
        return self.layer4

    def forward(self, x):
        x = self.stem(torch.cat([x, self.residual(x)], 1))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        pooled = torch.cat([F.adaptive_avg_pool2d(x, 1), F.adaptive_max_pool2d(x, 1)], 1)
        return self.fc(torch.flatten(pooled, 1))


def build_backbone(name: str, pretrained: bool = False) -> nn.Module:
    if name == "small_resnet":
        if pretrained:
            raise ValueError("small_resnet has no pretrained weights")
        return SmallResNet()
    if name == "resnet50":
        try:
            import torchvision
        except ImportError as e:
            raise RuntimeError("the resnet50 backbone needs torchvision (pip install istr[pretrained])") from e
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        net.fc = nn.Linear(net.fc.in_features, 2)
        net.cam_layer = net.layer4
        return net
    raise ValueError(f"unknown backbone {name!r}")


class PresenceModel:
    """An immutable, inference-ready classifier restored from a checkpoint."""

    def __init__(self, net: nn.Module, mean, std, input_size, config: TrainConfig, epoch: int = 0):
        self.net = net.eval()
        self.mean = torch.as_tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
        self.std = torch.as_tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
        self.input_size = tuple(input_size)
        self.config = config
        self.epoch = epoch

    def prepare(self, images) -> torch.Tensor:
        return (images_to_tensor(images, self.input_size) - self.mean) / self.std

    @torch.no_grad()
    def scores(self, images, batch_size: int = 128) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            logits = self.net(self.prepare(images[i:i + batch_size]))
            out.append(F.softmax(logits, dim=1)[:, 1])
        return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.float32)


def _payload(net, mean, std, input_size, config, epoch):
    return {"kind": "presence", "model": net.state_dict(), "mean": mean.tolist(), "std": std.tolist(),
            "input_size": list(input_size), "config": asdict(config), "epoch": epoch}


def load_presence_model(payload: dict) -> PresenceModel:
    if payload.get("kind") != "presence":
        raise ValueError(f"not a presence checkpoint (kind={payload.get('kind')!r})")
    config = TrainConfig(**payload["config"])
    net = build_backbone(config.backbone, pretrained=False)
    net.load_state_dict(payload["model"])
    return PresenceModel(net, payload["mean"], payload["std"], payload["input_size"], config, payload["epoch"])


def _require_classes(manifest: DatasetManifest, splits):
    for split in splits:
        labels = {e.label for e in manifest.split(split)}
        if len(labels) < 2:
            raise ValueError(f"{split} split must contain both classes, has {sorted(labels) or 'nothing'}")


def train_presence(manifest: DatasetManifest, config: TrainConfig, store: CheckpointStore | None = None,
                   progress=None) -> tuple[TrainLog, CheckpointStore]:
    """Supervised training on the manifest's train split, validated every epoch."""
    _require_classes(manifest, ("train", "val"))
    gen = seed_everything(config.seed, config.deterministic)
    store = store if store is not None else CheckpointStore(keep=config.keep)

    train_recs, train_y = manifest.labeled("train")
    val_recs, val_y = manifest.labeled("val")
    size = config.input_size or train_recs[0].canvas
    x_train = images_to_tensor([r.pixels for r in train_recs], size)
    x_val = images_to_tensor([r.pixels for r in val_recs], size)
    y_train = torch.tensor(train_y)
    y_val = torch.tensor(val_y)
    mean = x_train.mean(dim=(0, 2, 3))
    std = x_train.std(dim=(0, 2, 3)).clamp_min(1e-3)
    x_train = (x_train - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)
    x_val = (x_val - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)

    net = build_backbone(config.backbone, config.pretrained)
    opt_cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    opt = opt_cls(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    log_ = TrainLog(metric="accuracy")

    for epoch in range(1, config.epochs + 1):
        net.train()
        total, correct, loss_sum = 0, 0, 0.0
        for idx in batch_indices(len(x_train), config.batch_size, gen):
            xb, yb = x_train[idx], y_train[idx]
            if config.hflip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(3), xb)
            logits = net(xb)
            loss = F.cross_entropy(logits, yb)
            check_finite(loss, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += (logits.argmax(1) == yb).sum().item()
            total += len(idx)

        net.eval()
        with torch.no_grad():
            val_logits = torch.cat([net(x_val[i:i + 256]) for i in range(0, len(x_val), 256)])
            val_loss = F.cross_entropy(val_logits, y_val).item()
            val_acc = 100.0 * (val_logits.argmax(1) == y_val).float().mean().item()
        ckpt = checkpoint_id(epoch)
        store.put(ckpt, _payload(net, mean, std, size, config, epoch), val_acc)
        rec = EpochRecord(epoch, loss_sum / total, 100.0 * correct / total, val_loss, val_acc, ckpt)
        log_.append(rec)
        log.info("presence epoch %d: loss %.4f acc %.2f | val loss %.4f acc %.2f",
                 epoch, rec.train_loss, rec.train_score, val_loss, val_acc)
        if progress is not None:
            progress(rec)
    return log_, store


def _as_image(image) -> np.ndarray:
    if isinstance(image, (str, bytes)) or hasattr(image, "__fspath__"):
        from istr.corpus import read_image
        image = read_image(image)
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ValueError(f"corrupt image: expected HxWx3 pixels, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"corrupt image: expected uint8 pixels, got {img.dtype}")
    return img


def classify(image, model: PresenceModel, threshold: float = 0.5) -> PresenceVerdict:
    score = float(model.scores([_as_image(image)])[0])
    return PresenceVerdict("str_ed" if score >= threshold else "clean", score)


def explain(image, model: PresenceModel) -> np.ndarray:
    """Grad-CAM for the "text removed" class, upsampled to the image size, in [0, 1]."""
    img = _as_image(image)
    layer = getattr(model.net, "cam_layer", None)
    if layer is None:
        raise ValueError("model exposes no convolutional feature layer for attribution")
    store = {}

    def fwd_hook(_m, _i, out):
        store["act"] = out
        out.register_hook(lambda g: store.__setitem__("grad", g))

    handle = layer.register_forward_hook(fwd_hook)
    try:
        x = model.prepare([img]).requires_grad_(False)
        with torch.enable_grad():
            logits = model.net(x)
            act = store.get("act")
            if act is None or act.dim() != 4:
                raise ValueError("attribution layer does not produce spatial feature maps")
            model.net.zero_grad(set_to_none=True)
            logits[0, 1].backward()
    finally:
        handle.remove()
    act, grad = store["act"].detach(), store["grad"].detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=img.shape[:2], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = cam.min(), cam.max()
    # a flat map stays flat instead of having float noise stretched to [0, 1]
    if hi - lo <= 1e-4 * max(float(hi), 1e-8):
        return np.zeros(img.shape[:2], dtype=np.float32)
    cam = (cam - lo) / (hi - lo)
    return cam.numpy().astype(np.float32)


def evaluate_presence(manifest: DatasetManifest, model: PresenceModel, split: str = "test",
                      threshold: float = 0.5, fingerprint: str = "") -> MetricsReport:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"{split} split is empty")
    images = [manifest.records[e.image_id].pixels for e in entries]
    labels = np.array([int(e.label == POSITIVE) for e in entries])
    scores = model.scores(images)
    preds = (scores >= threshold).astype(int)
    items = [{"image_id": e.image_id, "label": int(y), "score": float(s), "pred": int(p)}
             for e, y, s, p in zip(entries, labels, scores, preds)]
    metrics = {"accuracy": binary_accuracy(labels, preds), "n": len(entries), **confusion_counts(labels, preds)}
    return MetricsReport("level1", metrics, items, fingerprint,
                         extra={"protocol": manifest.protocol, "split": split, "epoch": model.epoch,
                                "str_method": _str_method(manifest)})


def _str_method(manifest: DatasetManifest) -> str:
    for rec in manifest.records.values():
        for step in rec.provenance:
            if step.kind.value == "STR_APPLIED":
                return str(step.params.get("method", "?"))
    return "?"
