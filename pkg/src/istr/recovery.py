"""Level-3-1: can the removed text be read back from its (erased) region?

Crops of removed-text regions are paired with the text that used to be there
(from a reader run on the original crop, or the renderer's transcript) and a
recognizer is trained on them. Reported per split for the best-validation
and the final checkpoint.
"""

from __future__ import annotations

import logging
import shlex
import string
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from istr.corpus import ImageRecord, Step, read_image, write_image
from istr.metrics import mean_char_accuracy, text_accuracy
from istr.report import MetricsReport
from istr.training import (CheckpointStore, EpochRecord, TrainLog, batch_indices, check_finite,
                           checkpoint_id, seed_everything, select_checkpoint)

log = logging.getLogger(__name__)

DEFAULT_PUNCTUATION = "!\"#$%&'()*+,-./:;<=>?@[]_"
DEFAULT_ALPHABET = string.ascii_uppercase + string.ascii_lowercase + string.digits + DEFAULT_PUNCTUATION
# 12,046 of 15,058 training crops are used for training, the rest for validation
DEFAULT_TRAIN_FRACTION = 12046 / 15058


class TextReader(Protocol):
    def read(self, crop: np.ndarray) -> tuple[str, float]: ...


@dataclass
class RecoveryInstance:
    crop: np.ndarray
    pseudo_gt: str
    source_image_id: str
    region_index: int
    split: str
    provenance: tuple = field(default=(), repr=False)

    @property
    def key(self) -> str:
        return f"{self.source_image_id}_{self.region_index:03d}"


def filter_latin(text: str, alphabet: str = DEFAULT_ALPHABET) -> bool:
    return all(ch in alphabet for ch in text)


def crop_region(image: np.ndarray, polygon, padding: int = 2, target_height: int | None = 32) -> np.ndarray:
    """Axis-aligned bounding box of ``polygon`` plus ``padding``, clipped to the
    image, resized to ``target_height`` keeping the aspect ratio."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    h, w = image.shape[:2]
    x0 = max(int(np.floor(pts[:, 0].min())) - padding, 0)
    y0 = max(int(np.floor(pts[:, 1].min())) - padding, 0)
    x1 = min(int(np.ceil(pts[:, 0].max())) + padding, w)
    y1 = min(int(np.ceil(pts[:, 1].max())) + padding, h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"polygon box ({x0},{y0})-({x1},{y1}) is empty after clipping to {w}x{h}")
    crop = image[y0:y1, x0:x1]
    if target_height is None:
        return crop.copy()
    new_w = max(1, int(round((x1 - x0) * target_height / (y1 - y0))))
    interp = cv2.INTER_AREA if target_height < (y1 - y0) else cv2.INTER_LINEAR
    return cv2.resize(crop, (new_w, target_height), interpolation=interp)


class SubprocessReader:
    """External OCR behind a command template with an ``{image}`` placeholder.

    The tool prints the recognised text on stdout, optionally followed by a
    tab and a confidence.
    """

    def __init__(self, command: str | Sequence[str], timeout: float | None = 120):
        self.args = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def read(self, crop: np.ndarray) -> tuple[str, float]:
        with tempfile.TemporaryDirectory(prefix="istr-ocr-") as tmp:
            path = Path(tmp) / "crop.png"
            write_image(path, crop)
            argv = [a.format(image=str(path)) for a in self.args]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"reader failed ({proc.returncode}): {proc.stderr.strip()}")
        text, _, conf = proc.stdout.rstrip("\n").partition("\t")
        return text.strip(), float(conf) if conf else 1.0


def build_recovery_set(with_text: Sequence[ImageRecord], str_ed: Sequence[ImageRecord],
                       reader: TextReader | None = None, alphabet: str = DEFAULT_ALPHABET, *,
                       padding: int = 2, target_height: int = 32,
                       train_fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0,
                       tally: dict | None = None) -> list[RecoveryInstance]:
    """Pair each removed-text crop with the text it used to show.

    Records are aligned by ``source_id``. Labels come from ``reader`` run on
    the original crop or, when ``reader`` is None, from the known transcript.
    Empty or out-of-alphabet labels are dropped. Test-pool images form the
    test split; the rest is split at random into train/val.
    """
    tally = tally if tally is not None else {}
    originals = {r.source_id: r for r in with_text}
    instances: list[RecoveryInstance] = []
    for rec in str_ed:
        if Step.STR_APPLIED not in rec.steps:
            raise ValueError(f"{rec.id}: crops must come from a removed-text image, got {[s.value for s in rec.steps]}")
        orig = originals.get(rec.source_id)
        if orig is None:
            raise ValueError(f"{rec.id}: no with-text record with source id {rec.source_id!r}")
        if len(orig.regions) != len(rec.regions) or orig.canvas != rec.canvas:
            raise ValueError(f"{rec.id}: regions/canvas do not line up with {orig.id}")
        for i, (before, after) in enumerate(zip(orig.regions, rec.regions)):
            if not np.allclose(before.polygon, after.polygon):
                raise ValueError(f"{rec.id}: region {i} polygon differs from {orig.id}")
            if reader is None:
                label = before.transcript
            else:
                try:
                    label, _ = reader.read(crop_region(orig.pixels, before.polygon, padding, target_height))
                except Exception as e:  # noqa: BLE001 - any reader failure only skips the crop
                    log.warning("%s region %d: reader failed: %s", orig.id, i, e)
                    tally["reader_failed"] = tally.get("reader_failed", 0) + 1
                    continue
            if not label:
                tally["empty"] = tally.get("empty", 0) + 1
                continue
            if not filter_latin(label, alphabet):
                tally["out_of_alphabet"] = tally.get("out_of_alphabet", 0) + 1
                continue
            crop = crop_region(rec.pixels, after.polygon, padding, target_height)
            instances.append(RecoveryInstance(crop, label, rec.source_id, i,
                                              "test" if rec.test_pool else "train", rec.provenance))
    return assign_recovery_splits(instances, train_fraction, seed)


def assign_recovery_splits(instances: list[RecoveryInstance], train_fraction: float = DEFAULT_TRAIN_FRACTION,
                           seed: int = 0) -> list[RecoveryInstance]:
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    pool = sorted((i for i in instances if i.split != "test"), key=lambda i: i.key)
    n_train = int(np.floor(train_fraction * len(pool)))
    for rank, idx in enumerate(np.random.default_rng(seed).permutation(len(pool))):
        pool[idx].split = "train" if rank < n_train else "val"
    return instances


def save_recovery_set(instances: Sequence[RecoveryInstance], root) -> Path:
    """``crops/*.png`` plus a tab-separated ``index.tsv``."""
    root = Path(root)
    rows = ["crop\tpseudo_gt\tsource_id\tregion_index\tsplit"]
    for inst in instances:
        rel = Path("crops") / f"{inst.key}.png"
        write_image(root / rel, inst.crop)
        rows.append(f"{rel.as_posix()}\t{inst.pseudo_gt}\t{inst.source_image_id}\t{inst.region_index}\t{inst.split}")
    path = root / "index.tsv"
    path.write_text("\n".join(rows) + "\n")
    return path


def load_recovery_set(root) -> list[RecoveryInstance]:
    root = Path(root)
    lines = (root / "index.tsv").read_text().splitlines()
    out = []
    for line in lines[1:]:
        if not line:
            continue
        rel, label, src, idx, split = line.split("\t")
        out.append(RecoveryInstance(read_image(root / rel), label, src, int(idx), split,
                                    ({"kind": Step.STR_APPLIED.value},)))
    return out


# --- recognizer --------------------------------------------------------------------

@dataclass
class RecoveryTrainConfig:
    learning_rate: float = 8.4e-5
    batch_size: int = 128
    epochs: int = 200
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    seed: int = 0
    alphabet: str = DEFAULT_ALPHABET
    max_len: int = 25
    input_height: int = 32
    input_width: int = 128
    width: int = 32
    hidden: int = 512
    keep: str = "best_last"
    deterministic: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has duplicate characters")


class Recognizer(nn.Module):
    """Convolutional feature extractor and a parallel decoder that classifies
    each of ``max_len`` output positions over the alphabet plus an end token."""

    def __init__(self, n_symbols: int, max_len: int, height: int = 32, width: int = 128,
                 channels: int = 32, hidden: int = 512):
        super().__init__()
        c = channels

        def conv(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
                                 nn.ReLU(inplace=True))

        self.features = nn.Sequential(conv(3, c), nn.MaxPool2d(2), conv(c, 2 * c), nn.MaxPool2d(2),
                                      conv(2 * c, 2 * c), nn.MaxPool2d((2, 1)))
        feat = 2 * c * (height // 8) * (width // 4)
        self.decoder = nn.Sequential(nn.Flatten(), nn.Linear(feat, hidden), nn.ReLU(inplace=True),
                                     nn.Linear(hidden, max_len * (n_symbols + 1)))
        self.max_len = max_len
        self.n_symbols = n_symbols

    def forward(self, x):
        return self.decoder(self.features(x)).view(len(x), self.max_len, self.n_symbols + 1)


def crops_to_tensor(crops: Sequence[np.ndarray], height: int, width: int) -> torch.Tensor:
    """Resize to ``height``, then right-pad with zeros (or squeeze) to ``width``."""
    out = np.zeros((len(crops), height, width, 3), dtype=np.uint8)
    for i, crop in enumerate(crops):
        h, w = crop.shape[:2]
        new_w = max(1, int(round(w * height / h)))
        if (h, new_w) != (height, w):
            crop = cv2.resize(crop, (new_w, height), interpolation=cv2.INTER_LINEAR)
        if new_w > width:
            crop = cv2.resize(crop, (width, height), interpolation=cv2.INTER_AREA)
            new_w = width
        out[i, :, :new_w] = crop
    return torch.from_numpy(out).permute(0, 3, 1, 2).float().div_(255.0).sub_(0.5).div_(0.25)


class RecognizerModel:
    """A trained recognizer; also satisfies the ``TextReader`` protocol."""

    def __init__(self, net: Recognizer, config: RecoveryTrainConfig, epoch: int = 0):
        self.net = net.eval()
        self.config = config
        self.epoch = epoch

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        end = len(self.config.alphabet)
        index = {ch: i for i, ch in enumerate(self.config.alphabet)}
        y = torch.full((len(texts), self.config.max_len), end, dtype=torch.long)
        for i, t in enumerate(texts):
            y[i, :len(t)] = torch.tensor([index[ch] for ch in t], dtype=torch.long)
        return y

    def decode(self, logits: torch.Tensor) -> list[tuple[str, float]]:
        probs = F.softmax(logits, dim=-1)
        conf, idx = probs.max(dim=-1)
        end = len(self.config.alphabet)
        out = []
        for row, crow in zip(idx.tolist(), conf):
            n = row.index(end) if end in row else len(row)
            out.append(("".join(self.config.alphabet[i] for i in row[:n]), float(crow[:n + 1].prod())))
        return out

    @torch.no_grad()
    def read_many(self, crops: Sequence[np.ndarray], batch_size: int = 256) -> list[tuple[str, float]]:
        out = []
        for i in range(0, len(crops), batch_size):
            x = crops_to_tensor(crops[i:i + batch_size], self.config.input_height, self.config.input_width)
            out.extend(self.decode(self.net(x)))
        return out

    def read(self, crop: np.ndarray) -> tuple[str, float]:
        return self.read_many([crop])[0]


def load_recognizer(payload: dict) -> RecognizerModel:
    if payload.get("kind") != "recovery":
        raise ValueError(f"not a recovery checkpoint (kind={payload.get('kind')!r})")
    cfg = RecoveryTrainConfig(**payload["config"])
    net = Recognizer(len(cfg.alphabet), cfg.max_len, cfg.input_height, cfg.input_width, cfg.width, cfg.hidden)
    net.load_state_dict(payload["model"])
    return RecognizerModel(net, cfg, payload["epoch"])


@dataclass
class RecoveryTraining:
    log: TrainLog
    store: CheckpointStore
    best_id: str
    last_id: str
    char_accuracy: dict = field(default_factory=dict)

    def best(self) -> RecognizerModel:
        return load_recognizer(self.store.get(self.best_id))

    def last(self) -> RecognizerModel:
        return load_recognizer(self.store.get(self.last_id))


def _split(instances, name):
    return [i for i in instances if i.split == name]


def train_recovery(instances: Sequence[RecoveryInstance], config: RecoveryTrainConfig,
                   store: CheckpointStore | None = None, progress=None) -> RecoveryTraining:
    """Train on the ``train`` split, pick "best" by validation Text-Acc."""
    train, val = _split(instances, "train"), _split(instances, "val")
    if len(train) < 2 or len(val) < 2:
        raise ValueError(f"need >= 2 train and val instances, got {len(train)} and {len(val)}")
    for inst in train + val:
        bad = [ch for ch in inst.pseudo_gt if ch not in config.alphabet]
        if bad:
            raise ValueError(f"instance {inst.key}: {inst.pseudo_gt!r} has characters outside the alphabet: {bad}")
        if len(inst.pseudo_gt) > config.max_len:
            raise ValueError(f"instance {inst.key}: {inst.pseudo_gt!r} longer than max_len={config.max_len}")
    gen = seed_everything(config.seed, config.deterministic)
    store = store if store is not None else CheckpointStore(keep=config.keep)

    net = Recognizer(len(config.alphabet), config.max_len, config.input_height, config.input_width,
                     config.width, config.hidden)
    model = RecognizerModel(net, config)
    x = crops_to_tensor([i.crop for i in train], config.input_height, config.input_width)
    y = model.encode([i.pseudo_gt for i in train])
    xv = crops_to_tensor([i.crop for i in val], config.input_height, config.input_width)
    yv = model.encode([i.pseudo_gt for i in val])
    opt_cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    opt = opt_cls(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    log_ = TrainLog(metric="text_accuracy")
    char_acc: dict[str, list[float]] = {"train": [], "val": []}

    def scores(xs, ys, labels):
        net.eval()
        with torch.no_grad():
            logits = torch.cat([net(xs[i:i + 512]) for i in range(0, len(xs), 512)])
            loss = F.cross_entropy(logits.flatten(0, 1), ys.flatten()).item()
        preds = [p for p, _ in model.decode(logits)]
        pairs = list(zip(labels, preds))
        return loss, text_accuracy(pairs), mean_char_accuracy(pairs)

    for epoch in range(1, config.epochs + 1):
        net.train()
        for idx in batch_indices(len(x), config.batch_size, gen):
            logits = net(x[idx])
            loss = F.cross_entropy(logits.flatten(0, 1), y[idx].flatten())
            check_finite(loss, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        tr_loss, tr_acc, tr_char = scores(x, y, [i.pseudo_gt for i in train])
        va_loss, va_acc, va_char = scores(xv, yv, [i.pseudo_gt for i in val])
        char_acc["train"].append(tr_char)
        char_acc["val"].append(va_char)
        ckpt = checkpoint_id(epoch)
        store.put(ckpt, {"kind": "recovery", "model": net.state_dict(), "config": asdict(config),
                         "epoch": epoch}, va_acc)
        rec = EpochRecord(epoch, tr_loss, tr_acc, va_loss, va_acc, ckpt)
        log_.append(rec)
        log.info("recovery epoch %d: loss %.4f text-acc %.2f | val loss %.4f text-acc %.2f",
                 epoch, tr_loss, tr_acc, va_loss, va_acc)
        if progress is not None:
            progress(rec)
    return RecoveryTraining(log_, store, select_checkpoint(log_), log_.records[-1].checkpoint_id, char_acc)


def _read_all(reader, crops):
    if hasattr(reader, "read_many"):
        return [t for t, _ in reader.read_many(crops)]
    return [reader.read(c)[0] for c in crops]


def evaluate_recovery(instances: Sequence[RecoveryInstance], best: TextReader, last: TextReader,
                      fingerprint: str = "", str_method: str = "?") -> MetricsReport:
    """Text-/Char-Accuracy for every split present, for both checkpoints."""
    table: dict[str, dict[str, dict[str, float]]] = {}
    items = []
    for split in ("train", "val", "test"):
        subset = _split(instances, split)
        if not subset:
            continue
        crops = [i.crop for i in subset]
        table[split] = {}
        for name, reader in (("best", best), ("last", last)):
            preds = _read_all(reader, crops)
            pairs = [(i.pseudo_gt, p) for i, p in zip(subset, preds)]
            table[split][name] = {"text_accuracy": text_accuracy(pairs), "char_accuracy": mean_char_accuracy(pairs),
                                  "n": len(pairs)}
            if split == "test":
                items.extend({"key": i.key, "checkpoint": name, "gt": i.pseudo_gt, "pred": p}
                             for i, p in zip(subset, preds))
    return MetricsReport("level3", {"table": table}, items, fingerprint, extra={"str_method": str_method})
