"""Training plumbing shared by the three levels: logs, checkpoints, seeding."""

from __future__ import annotations

import io
import logging
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_score: float
    val_loss: float
    val_score: float
    checkpoint_id: str = ""


@dataclass
class TrainLog:
    """Per-epoch history. ``metric`` names what the scores measure
    (accuracy, mean IoU, Text-Acc)."""

    metric: str = "accuracy"
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(d.get("metric", "accuracy"), [EpochRecord(**r) for r in d["records"]])


def best_epoch(log: TrainLog) -> EpochRecord:
    """Earliest epoch with the highest validation score."""
    if not log.records:
        raise ValueError("empty training log")
    best = log.records[0]
    for rec in log.records[1:]:
        if rec.val_score > best.val_score:
            best = rec
    return best


def select_checkpoint(log: TrainLog) -> str:
    return best_epoch(log).checkpoint_id


def checkpoint_id(epoch: int) -> str:
    return f"epoch_{epoch:04d}"


class CheckpointStore:
    """Checkpoints keyed by id, on disk when ``root`` is given, else in memory.

    ``keep="best_last"`` retains the best-so-far (strictly better replaces,
    so ties keep the earlier epoch) plus the latest; ``keep="all"`` retains
    every epoch.
    """

    def __init__(self, root=None, keep: str = "best_last"):
        if keep not in ("best_last", "all"):
            raise ValueError(f"unknown retention policy {keep!r}")
        self.root = Path(root) if root is not None else None
        self.keep = keep
        self._mem: dict[str, bytes] = {}
        self.best_id: str | None = None
        self.best_score = -np.inf
        self.last_id: str | None = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def ids(self) -> list[str]:
        if self.root is not None:
            return sorted(p.stem for p in self.root.glob("epoch_*.pt"))
        return sorted(self._mem)

    def put(self, ckpt_id: str, payload: dict, score: float) -> None:
        buf = io.BytesIO()
        torch.save(payload, buf)
        if self.root is not None:
            (self.root / f"{ckpt_id}.pt").write_bytes(buf.getvalue())
        else:
            self._mem[ckpt_id] = buf.getvalue()
        prev_last = self.last_id
        self.last_id = ckpt_id
        if score > self.best_score:
            prev_best, self.best_id, self.best_score = self.best_id, ckpt_id, score
            if self.keep == "best_last" and prev_best not in (None, ckpt_id, prev_last):
                self._drop(prev_best)
        if self.keep == "best_last" and prev_last not in (None, self.best_id, ckpt_id):
            self._drop(prev_last)

    def _drop(self, ckpt_id: str) -> None:
        if self.root is not None:
            (self.root / f"{ckpt_id}.pt").unlink(missing_ok=True)
        else:
            self._mem.pop(ckpt_id, None)

    def get(self, ckpt_id: str) -> dict:
        if self.root is not None:
            path = self.root / f"{ckpt_id}.pt"
            if not path.exists():
                raise KeyError(ckpt_id)
            return torch.load(path, map_location="cpu", weights_only=False)
        return torch.load(io.BytesIO(self._mem[ckpt_id]), map_location="cpu", weights_only=False)


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def batch_indices(n: int, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = True):
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss ({loss.item()}) at {where}; aborting")


def images_to_tensor(images, size: tuple[int, int] | None = None) -> torch.Tensor:
    """uint8 HxWx3 arrays -> float tensor (N, 3, H, W) in [0, 1]."""
    import cv2

    arrs = []
    for img in images:
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
        if size is not None and img.shape[:2] != tuple(size):
            img = cv2.resize(img, (size[1], size[0]), interpolation=cv2.INTER_AREA)
        arrs.append(img)
    x = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()
    return x.float().div_(255.0)
