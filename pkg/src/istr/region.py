"""Level-2: where was text removed?

A small encoder-decoder predicts a per-pixel "removed" probability; regions
are the connected components of the thresholded map, traced to polygons.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage import measure

from istr.corpus import ImageRecord, Step, format_polygon_line
from istr.metrics import RegionSetPair, mask_iou, rasterize, union_iou, union_mask
from istr.report import MetricsReport
from istr.training import (CheckpointStore, EpochRecord, TrainLog, batch_indices, check_finite,
                           checkpoint_id, images_to_tensor, seed_everything)

log = logging.getLogger(__name__)

DEFAULT_MIN_AREA = 25


@dataclass
class RegionTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 24
    epochs: int = 100
    optimizer: str = "adam"
    seed: int = 0
    mask_threshold: float = 0.5
    min_area: int = DEFAULT_MIN_AREA
    width: int = 16
    keep: str = "best_last"
    deterministic: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.mask_threshold < 1:
            raise ValueError(f"mask_threshold must be in (0, 1), got {self.mask_threshold}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DetectionResult:
    image_id: str
    regions: list[tuple[np.ndarray, float]] = field(default_factory=list)

    @property
    def polygons(self) -> list[np.ndarray]:
        return [p for p, _ in self.regions]

    def to_lines(self) -> list[str]:
        """``image_id,confidence,x1,y1,...`` per region."""
        return [format_polygon_line(p, prefix=(self.image_id, f"{c:.6f}")) for p, c in self.regions]


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class RegionNet(nn.Module):
    """Three-level U-Net producing one logit per pixel."""

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.enc1 = _block(3, w)
        self.enc2 = _block(w, 2 * w)
        self.enc3 = _block(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _block(2 * w, w)
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], 1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], 1))
        return self.head(d1)[..., :h, :w]


class RegionModel:
    """Inference wrapper: image -> per-pixel removed-text probability."""

    def __init__(self, net: nn.Module, mean, std, config: RegionTrainConfig, epoch: int = 0):
        self.net = net.eval()
        self.mean = torch.as_tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
        self.std = torch.as_tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
        self.config = config
        self.epoch = epoch

    @torch.no_grad()
    def probability_maps(self, images, batch_size: int = 32) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            x = (images_to_tensor(images[i:i + batch_size]) - self.mean) / self.std
            out.append(torch.sigmoid(self.net(x))[:, 0])
        return torch.cat(out).numpy()

    def __call__(self, image) -> np.ndarray:
        return self.probability_maps([image])[0]


def load_region_model(payload: dict) -> RegionModel:
    if payload.get("kind") != "region":
        raise ValueError(f"not a region checkpoint (kind={payload.get('kind')!r})")
    config = RegionTrainConfig(**payload["config"])
    net = RegionNet(config.width)
    net.load_state_dict(payload["model"])
    return RegionModel(net, payload["mean"], payload["std"], config, payload["epoch"])


def component_polygon(component: np.ndarray, tolerance: float = 0.5) -> np.ndarray | None:
    """Outer boundary of one connected component as a polygon.

    The contour is traced at level 0.5 between pixel centers, so rasterising
    the polygon with the pixel-center rule gives back the component (holes
    are filled).
    """
    padded = np.pad(component.astype(np.float32), 1)
    contours = measure.find_contours(padded, 0.5, fully_connected="high")
    if not contours:
        return None
    outer = max(contours, key=len)
    if tolerance > 0:
        outer = measure.approximate_polygon(outer, tolerance)
    # (row, col) in padded index space -> (x, y) in pixel-corner coordinates
    poly = np.stack([outer[:, 1] - 0.5, outer[:, 0] - 0.5], axis=1)
    if len(poly) > 1 and np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    return poly if len(poly) >= 3 else None


def regions_from_probability(prob: np.ndarray, mask_threshold: float = 0.5,
                             min_area: int = DEFAULT_MIN_AREA) -> list[tuple[np.ndarray, float]]:
    if not 0 < mask_threshold < 1:
        raise ValueError(f"mask_threshold must be in (0, 1), got {mask_threshold}")
    binary = prob >= mask_threshold
    labels = measure.label(binary, connectivity=2)
    found = []
    for lab in range(1, labels.max() + 1):
        comp = labels == lab
        if comp.sum() < min_area:
            continue
        poly = component_polygon(comp)
        if poly is None:
            continue
        found.append((poly, float(prob[comp].mean())))
    found.sort(key=lambda pc: -pc[1])
    return found


def detect_regions(image, model: Callable, mask_threshold: float = 0.5, min_area: int = DEFAULT_MIN_AREA,
                   image_id: str = "") -> DetectionResult:
    """``model`` is anything mapping an image to an HxW probability map."""
    prob = np.asarray(model(image), dtype=np.float32)
    return DetectionResult(image_id, regions_from_probability(prob, mask_threshold, min_area))


def _check_training_record(rec: ImageRecord) -> None:
    if not rec.steps or rec.steps[-1] != Step.STR_APPLIED:
        raise ValueError(f"{rec.id}: training images must end in STR_APPLIED, got {[s.value for s in rec.steps]}")
    if not any(s == Step.RENDERED_WITH_TEXT for s in rec.steps):
        raise ValueError(f"{rec.id}: image never had text to remove")


def gt_mask(rec: ImageRecord) -> np.ndarray:
    return union_mask(rec.polygons(), rec.canvas)


def _val_pairs(model: RegionModel, records: Sequence[ImageRecord], cfg: RegionTrainConfig):
    probs = model.probability_maps([r.pixels for r in records])
    pairs = []
    for rec, prob in zip(records, probs):
        regions = regions_from_probability(prob, cfg.mask_threshold, cfg.min_area)
        pairs.append(RegionSetPair(rec.polygons(), [p for p, _ in regions], rec.canvas))
    return pairs


def train_region(train: Sequence[ImageRecord], val: Sequence[ImageRecord], config: RegionTrainConfig,
                 store: CheckpointStore | None = None, progress=None) -> tuple[TrainLog, CheckpointStore]:
    """Fit the segmentation detector on removed-text images; score = val mean IoU."""
    for rec in list(train) + list(val):
        _check_training_record(rec)
    if not train or not val:
        raise ValueError("need non-empty train and val sets")
    gen = seed_everything(config.seed, config.deterministic)
    store = store if store is not None else CheckpointStore(keep=config.keep)

    x = images_to_tensor([r.pixels for r in train])
    y = torch.from_numpy(np.stack([gt_mask(r) for r in train])).float().unsqueeze(1)
    mean, std = x.mean(dim=(0, 2, 3)), x.std(dim=(0, 2, 3)).clamp_min(1e-3)
    x = (x - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)
    frac = float(y.mean().clamp(1e-4, 0.5))
    pos_weight = torch.tensor([(1 - frac) / frac]).sqrt()

    net = RegionNet(config.width)
    opt_cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    opt = opt_cls(net.parameters(), lr=config.learning_rate)
    log_ = TrainLog(metric="mean_iou")
    val_y = np.stack([gt_mask(r) for r in val])

    for epoch in range(1, config.epochs + 1):
        net.train()
        loss_sum, iou_sum, n = 0.0, 0.0, 0
        for idx in batch_indices(len(x), config.batch_size, gen):
            logits = net(x[idx])
            loss = F.binary_cross_entropy_with_logits(logits, y[idx], pos_weight=pos_weight)
            check_finite(loss, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            with torch.no_grad():
                pred = (logits > 0).numpy()[:, 0]
                iou_sum += sum(mask_iou(p, t) for p, t in zip(pred, y[idx].numpy()[:, 0].astype(bool)))
            n += len(idx)

        model = RegionModel(net, mean, std, config, epoch)
        pairs = _val_pairs(model, val, config)
        val_iou = float(np.mean([union_iou(p) for p in pairs]))
        with torch.no_grad():
            vx = (images_to_tensor([r.pixels for r in val]) - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)
            vlog = torch.cat([net(vx[i:i + 32]) for i in range(0, len(vx), 32)])
            val_loss = F.binary_cross_entropy_with_logits(
                vlog, torch.from_numpy(val_y).float().unsqueeze(1), pos_weight=pos_weight).item()
        net.train()
        ckpt = checkpoint_id(epoch)
        store.put(ckpt, {"kind": "region", "model": net.state_dict(), "mean": mean.tolist(),
                         "std": std.tolist(), "config": asdict(config), "epoch": epoch}, val_iou)
        rec = EpochRecord(epoch, loss_sum / n, iou_sum / n, val_loss, val_iou, ckpt)
        log_.append(rec)
        log.info("region epoch %d: loss %.4f pixel-IoU %.3f | val loss %.4f mean IoU %.3f",
                 epoch, rec.train_loss, rec.train_score, val_loss, val_iou)
        if progress is not None:
            progress(rec)
    return log_, store


def evaluate_region(records: Sequence[ImageRecord], model: RegionModel, mask_threshold: float | None = None,
                    min_area: int | None = None, k: int = 3, fingerprint: str = "",
                    predictions_path=None) -> tuple[MetricsReport, list[DetectionResult]]:
    """Mean per-image union IoU plus the ``k`` lowest and highest scoring images."""
    if not records:
        raise ValueError("evaluate_region needs a non-empty test set")
    thr = model.config.mask_threshold if mask_threshold is None else mask_threshold
    min_area = model.config.min_area if min_area is None else min_area
    probs = model.probability_maps([r.pixels for r in records])
    results, items = [], []
    for rec, prob in zip(records, probs):
        det = DetectionResult(rec.id, regions_from_probability(prob, thr, min_area))
        iou = union_iou(RegionSetPair(rec.polygons(), det.polygons, rec.canvas))
        results.append(det)
        items.append({"image_id": rec.id, "iou": iou, "n_gt": len(rec.regions), "n_pred": len(det.regions)})
    order = sorted(items, key=lambda it: (it["iou"], it["image_id"]))
    metrics = {"mean_iou": float(np.mean([it["iou"] for it in items])), "n": len(items)}
    extra = {"worst": [it["image_id"] for it in order[:k]], "best": [it["image_id"] for it in order[::-1][:k]],
             "epoch": model.epoch, "mask_threshold": thr, "min_area": min_area,
             "str_method": _str_method(records)}
    if predictions_path is not None:
        save_predictions(results, predictions_path)
    return MetricsReport("level2", metrics, items, fingerprint, extra=extra), results


def _str_method(records) -> str:
    for step in records[0].provenance:
        if step.kind == Step.STR_APPLIED:
            return str(step.params.get("method", "?"))
    return "?"


def save_predictions(results: Sequence[DetectionResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for r in results for line in r.to_lines()))
    return path


def load_predictions(path) -> dict[str, DetectionResult]:
    out: dict[str, DetectionResult] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, conf, *coords = line.split(",")
        poly = np.array([float(c) for c in coords]).reshape(-1, 2)
        out.setdefault(image_id, DetectionResult(image_id)).regions.append((poly, float(conf)))
    return out


def rasterize_result(result: DetectionResult, canvas) -> np.ndarray:
    return union_mask(result.polygons, canvas) if result.regions else np.zeros(canvas, dtype=bool)
