"""Synthetic scene-text corpora, a reference text-removal oracle and corpus I/O.

Every image carries its text polygons, transcripts and the ordered list of
operations that produced it, so downstream datasets can be checked against
how each image was made.
"""

from __future__ import annotations

import json
import logging
import shlex
import string
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import matplotlib
import numpy as np
from PIL import Image, ImageDraw, ImageFont

from istr.metrics import as_polygon, union_mask

log = logging.getLogger(__name__)

DEFAULT_CANVAS = (512, 512)
STR_METHODS = ("mean_fill", "diffusion_fill", "patch_copy")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
FONT_PATH = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / "DejaVuSans-Bold.ttf"


class Step(str, Enum):
    RENDERED_WITH_TEXT = "RENDERED_WITH_TEXT"
    RENDERED_TEXT_FREE = "RENDERED_TEXT_FREE"
    MANUAL_ERASE = "MANUAL_ERASE"
    STR_APPLIED = "STR_APPLIED"


@dataclass(frozen=True)
class ProvenanceStep:
    kind: Step
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": dict(sorted(self.params.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "ProvenanceStep":
        return cls(Step(d["kind"]), dict(d.get("params", {})))


@dataclass
class TextRegion:
    polygon: np.ndarray
    transcript: str = ""
    # set once the text is gone; the polygon stays as a historical annotation
    erased: bool = False

    def __post_init__(self):
        self.polygon = as_polygon(self.polygon)


@dataclass(eq=False)
class ImageRecord:
    id: str
    pixels: np.ndarray
    regions: list[TextRegion]
    provenance: tuple[ProvenanceStep, ...]
    source_id: str | None = None
    test_pool: bool = False
    twin: "ImageRecord | None" = field(default=None, repr=False)

    def __post_init__(self):
        if self.source_id is None:
            self.source_id = self.id
        self.provenance = tuple(self.provenance)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def steps(self) -> list[Step]:
        return [p.kind for p in self.provenance]

    @property
    def active_regions(self) -> list[TextRegion]:
        return [r for r in self.regions if not r.erased]

    def polygons(self) -> list[np.ndarray]:
        return [r.polygon for r in self.regions]

    def derive(self, step: ProvenanceStep, *, suffix: str, **changes) -> "ImageRecord":
        """New record with ``step`` appended; earlier steps are shared, never edited."""
        changes.setdefault("id", f"{self.id}.{suffix}")
        changes.setdefault("twin", None)
        return replace(self, provenance=self.provenance + (step,), **changes)


@dataclass
class Placement:
    text: str
    font_size: tuple[int, int] = (24, 56)
    # "random", "center", or an explicit (x, y) for the text's top-left corner
    position: object = "random"


@dataclass
class Background:
    kind: str = "procedural"
    image: np.ndarray | str | None = None
    noise_sigma: float = 6.0
    n_shapes: int = 6


class RenderError(ValueError):
    pass


def procedural_texture(canvas: tuple[int, int], rng: np.random.Generator,
                       noise_sigma: float = 6.0, n_shapes: int = 6) -> np.ndarray:
    h, w = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    t = (t - t.min()) / max(float(np.ptp(t)), 1e-6)
    c0, c1 = rng.uniform(40, 215, size=(2, 3))
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]

    coarse = rng.normal(0, 1, size=(6, 6, 3)).astype(np.float32)
    img += 28 * cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)

    for _ in range(n_shapes):
        color = rng.uniform(0, 255, size=3).tolist()
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        size = int(rng.integers(max(2, min(h, w) // 16), max(3, min(h, w) // 4)))
        layer = img.copy()
        if rng.random() < 0.5:
            cv2.circle(layer, (cx, cy), size, color, -1, lineType=cv2.LINE_AA)
        else:
            cv2.rectangle(layer, (cx - size, cy - size // 2), (cx + size, cy + size // 2), color, -1)
        img = 0.55 * img + 0.45 * layer

    img += rng.normal(0, noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _background_pixels(background: Background, canvas, rng) -> np.ndarray:
    if background.kind == "procedural":
        return procedural_texture(canvas, rng, background.noise_sigma, background.n_shapes)
    if background.kind == "image":
        img = background.image
        if isinstance(img, (str, Path)):
            img = read_image(img)
        img = np.asarray(img, dtype=np.uint8)
        if img.shape[:2] != tuple(canvas):
            img = cv2.resize(img, (canvas[1], canvas[0]), interpolation=cv2.INTER_AREA)
        return img.copy()
    raise ValueError(f"unknown background kind {background.kind!r}")


def _text_layer(text: str, size: int, canvas, origin) -> np.ndarray:
    font = ImageFont.truetype(str(FONT_PATH), size) if FONT_PATH.exists() else ImageFont.load_default()
    layer = Image.new("L", (canvas[1], canvas[0]), 0)
    left, top, _, _ = font.getbbox(text)
    ImageDraw.Draw(layer).text((origin[0] - left, origin[1] - top), text, font=font, fill=255)
    return np.asarray(layer, dtype=np.float32) / 255.0


def _text_extent(text: str, size: int) -> tuple[int, int]:
    font = ImageFont.truetype(str(FONT_PATH), size) if FONT_PATH.exists() else ImageFont.load_default()
    left, top, right, bottom = font.getbbox(text)
    return right - left, bottom - top


def render_scene(background: Background | None, placements: Sequence[Placement], seed: int,
                 canvas: tuple[int, int] = DEFAULT_CANVAS, *, record_id: str | None = None,
                 alphabet: str | None = None, margin: int = 6):
    """Render a scene with text and its text-free twin.

    Returns ``(with_text, text_free)``; ``with_text.twin`` points at the
    text-free record. Placements that do not fit the canvas are dropped with a
    warning. Raises ``RenderError`` when none survive.
    """
    if not placements:
        raise RenderError("render_scene needs at least one placement")
    background = background or Background()
    rng = np.random.default_rng(seed)
    record_id = record_id or f"scene{seed}"
    h, w = canvas
    base = _background_pixels(background, canvas, rng).astype(np.float32)
    out = base.copy()
    occupied = np.zeros((h, w), dtype=bool)
    regions: list[TextRegion] = []
    diagnostics: list[str] = []

    for k, pl in enumerate(placements):
        if not pl.text:
            raise RenderError(f"placement {k}: empty text")
        if alphabet is not None and any(ch not in alphabet for ch in pl.text):
            raise RenderError(f"placement {k}: {pl.text!r} has characters outside the alphabet")
        size = int(rng.integers(pl.font_size[0], pl.font_size[1] + 1))
        tw, th = _text_extent(pl.text, size)
        if tw + 2 > w or th + 2 > h:
            diagnostics.append(f"placement {k} ({pl.text!r}, {size}px) is {tw}x{th}, larger than canvas {w}x{h}")
            continue
        if pl.position == "center":
            candidates = [((w - tw) // 2, (h - th) // 2)]
        elif pl.position == "random":
            candidates = [(int(rng.integers(1, w - tw)), int(rng.integers(1, h - th))) for _ in range(60)]
        else:
            x, y = pl.position
            if x < 0 or y < 0 or x + tw > w or y + th > h:
                diagnostics.append(f"placement {k} ({pl.text!r}) at {(x, y)} overflows canvas {w}x{h}")
                continue
            candidates = [(int(x), int(y))]

        placed = False
        for x, y in candidates:
            alpha = _text_layer(pl.text, size, canvas, (x, y))
            ys, xs = np.nonzero(alpha > 0)
            if len(xs) == 0:
                continue
            x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            box = occupied[max(y0 - margin, 0):y1 + margin, max(x0 - margin, 0):x1 + margin]
            if box.any():
                continue
            occupied[y0:y1, x0:x1] = True
            color = _contrasting_color(base[y0:y1, x0:x1], rng)
            a = alpha[..., None]
            out = out * (1 - a) + color[None, None, :] * a
            poly = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            regions.append(TextRegion(np.array(poly, dtype=np.float64), pl.text))
            placed = True
            break
        if not placed:
            diagnostics.append(f"placement {k} ({pl.text!r}) found no free position")

    for msg in diagnostics:
        log.warning("%s: %s", record_id, msg)
    if not regions:
        raise RenderError(f"{record_id}: no valid placements ({'; '.join(diagnostics)})")

    params = {"seed": int(seed)}
    clean = ImageRecord(f"{record_id}.clean", np.clip(np.rint(base), 0, 255).astype(np.uint8), [],
                        (ProvenanceStep(Step.RENDERED_TEXT_FREE, params),), source_id=record_id)
    text = ImageRecord(record_id, np.clip(np.rint(out), 0, 255).astype(np.uint8), regions,
                       (ProvenanceStep(Step.RENDERED_WITH_TEXT, params),), twin=clean)
    return text, clean


def render_background(background: Background | None, seed: int,
                      canvas: tuple[int, int] = DEFAULT_CANVAS, *, record_id: str | None = None) -> ImageRecord:
    """A scene that never contained text."""
    rng = np.random.default_rng(seed)
    pixels = _background_pixels(background or Background(), canvas, rng)
    return ImageRecord(record_id or f"bg{seed}", pixels, [],
                       (ProvenanceStep(Step.RENDERED_TEXT_FREE, {"seed": int(seed)}),))


def _contrasting_color(patch: np.ndarray, rng) -> np.ndarray:
    mean = patch.reshape(-1, 3).mean(axis=0)
    for _ in range(20):
        c = rng.uniform(0, 255, size=3)
        if np.abs(c - mean).mean() > 70:
            return c.astype(np.float32)
    return (255 - mean).astype(np.float32)


def erase_manual(record: ImageRecord, twin: ImageRecord | None = None) -> ImageRecord:
    """Artifact-free erasure: swap in the twin's pixels, keep regions as history."""
    if not record.steps or record.steps[-1] != Step.RENDERED_WITH_TEXT:
        raise ValueError(f"{record.id}: manual erase needs a freshly rendered with-text record, got {record.steps}")
    twin = twin if twin is not None else record.twin
    if twin is None:
        raise ValueError(f"{record.id}: no text-free twin to erase with")
    if twin.pixels.shape != record.pixels.shape:
        raise ValueError(f"{record.id}: twin shape {twin.pixels.shape} != {record.pixels.shape}")
    regions = [replace(r, erased=True) for r in record.regions]
    return record.derive(ProvenanceStep(Step.MANUAL_ERASE, {"twin": twin.id}), suffix="ps",
                         pixels=twin.pixels.copy(), regions=regions)


def str_mask(record: ImageRecord, mask_dilation: int = 2) -> np.ndarray:
    """Union of the record's not-yet-erased regions, dilated by ``mask_dilation`` px."""
    if mask_dilation < 0:
        raise ValueError(f"mask_dilation must be >= 0, got {mask_dilation}")
    mask = union_mask([r.polygon for r in record.active_regions], record.canvas)
    if mask_dilation > 0 and mask.any():
        k = 2 * mask_dilation + 1
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (k, k))
        mask = cv2.dilate(mask.astype(np.uint8), kernel).astype(bool)
    return mask


def _components(mask: np.ndarray):
    n, labels = cv2.connectedComponents(mask.astype(np.uint8), connectivity=8)
    for i in range(1, n):
        yield labels == i


def _ring(component: np.ndarray, mask: np.ndarray, width: int = 3) -> np.ndarray:
    kernel = np.ones((2 * width + 1, 2 * width + 1), np.uint8)
    grown = cv2.dilate(component.astype(np.uint8), kernel).astype(bool)
    return grown & ~mask


def _mean_fill(img, mask, rng):
    out = img.astype(np.float32)
    for comp in _components(mask):
        ring = _ring(comp, mask)
        src = img[ring] if ring.any() else img[~mask] if (~mask).any() else img.reshape(-1, 3)
        out[comp] = src.reshape(-1, 3).mean(axis=0)
    return out


def _diffusion_fill(img, mask, rng, iterations: int = 400, tol: float = 0.05):
    out = _mean_fill(img, mask, rng)
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - 1, 0), min(ys.max() + 2, mask.shape[0])
    x0, x1 = max(xs.min() - 1, 0), min(xs.max() + 2, mask.shape[1])
    win = out[y0:y1, x0:x1]
    m = mask[y0:y1, x0:x1]
    for _ in range(iterations):
        p = np.pad(win, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4.0
        delta = np.abs(avg[m] - win[m]).max()
        win[m] = avg[m]
        if delta < tol:
            break
    out[y0:y1, x0:x1] = win
    return out


def _patch_copy(img, mask, rng, n_candidates: int = 48):
    out = img.astype(np.float32)
    h, w = mask.shape
    for comp in _components(mask):
        ys, xs = np.nonzero(comp)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        bh, bw = y1 - y0, x1 - x0
        ring = _ring(comp, mask, width=2)
        ry, rx = np.nonzero(ring)
        best, best_cost = None, np.inf
        for _ in range(n_candidates):
            dy = int(rng.integers(-2 * bh - 8, 2 * bh + 9))
            dx = int(rng.integers(-2 * bw - 8, 2 * bw + 9))
            if abs(dy) < bh and abs(dx) < bw:
                continue
            sy, sx = ys + dy, xs + dx
            if sy.min() < 0 or sx.min() < 0 or sy.max() >= h or sx.max() >= w:
                continue
            if mask[sy, sx].any():
                continue
            qy, qx = ry + dy, rx + dx
            ok = (qy >= 0) & (qx >= 0) & (qy < h) & (qx < w)
            if not ok.any():
                continue
            cost = np.mean((img[qy[ok], qx[ok]].astype(np.float32) - img[ry[ok], rx[ok]]) ** 2)
            if cost < best_cost:
                best, best_cost = (dy, dx), cost
        if best is None:
            log.debug("patch_copy: no clean source patch for component at (%d, %d); mean fill", y0, x0)
            out[comp] = _mean_fill(img, comp, rng)[comp]
            continue
        out[ys, xs] = img[ys + best[0], xs + best[1]]
    return out


_FILLS = {"mean_fill": _mean_fill, "diffusion_fill": _diffusion_fill, "patch_copy": _patch_copy}


def apply_str_oracle(record: ImageRecord, method: str = "mean_fill", mask_dilation: int = 2,
                     seed: int = 0) -> ImageRecord:
    """Remove the record's remaining text by filling its dilated region mask.

    Only masked pixels are written. Records with no remaining text come back
    pixel-identical, still stamped with STR_APPLIED.
    """
    if method not in _FILLS:
        raise ValueError(f"unknown STR method {method!r}; expected one of {STR_METHODS}")
    mask = str_mask(record, mask_dilation)
    pixels = record.pixels.copy()
    if mask.any():
        filled = _FILLS[method](record.pixels, mask, np.random.default_rng(seed))
        pixels[mask] = np.clip(np.rint(filled[mask]), 0, 255).astype(np.uint8)
    regions = [replace(r, erased=True) for r in record.regions]
    step = ProvenanceStep(Step.STR_APPLIED, {"method": method, "mask_dilation": int(mask_dilation), "seed": int(seed)})
    return record.derive(step, suffix="str", pixels=pixels, regions=regions)


def apply_external_str(record: ImageRecord, command: str | Sequence[str], mask_dilation: int = 2,
                       timeout: float | None = 600) -> ImageRecord:
    """Run an external text-removal model through a subprocess.

    ``command`` is a template with ``{image}``, ``{mask}`` and ``{output}``
    placeholders; the tool reads the RGB image and the binary mask (255 =
    erase) and writes the result to ``{output}``.
    """
    args = shlex.split(command) if isinstance(command, str) else list(command)
    mask = str_mask(record, mask_dilation)
    with tempfile.TemporaryDirectory(prefix="istr-str-") as tmp:
        tmp = Path(tmp)
        paths = {"image": tmp / "image.png", "mask": tmp / "mask.png", "output": tmp / "output.png"}
        write_image(paths["image"], record.pixels)
        cv2.imwrite(str(paths["mask"]), mask.astype(np.uint8) * 255)
        argv = [a.format(**{k: str(v) for k, v in paths.items()}) for a in args]
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"external STR failed ({proc.returncode}): {proc.stderr.strip()}")
        pixels = read_image(paths["output"])
    if pixels.shape != record.pixels.shape:
        raise RuntimeError(f"external STR returned shape {pixels.shape}, expected {record.pixels.shape}")
    regions = [replace(r, erased=True) for r in record.regions]
    step = ProvenanceStep(Step.STR_APPLIED, {"method": "external", "command": " ".join(args),
                                             "mask_dilation": int(mask_dilation)})
    return record.derive(step, suffix="str", pixels=pixels, regions=regions)


# --- synthetic corpus --------------------------------------------------------------

UPPER = string.ascii_uppercase


def random_word(rng: np.random.Generator, alphabet: str = UPPER, length: tuple[int, int] = (3, 6)) -> str:
    n = int(rng.integers(length[0], length[1] + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))


def default_font_range(canvas) -> tuple[int, int]:
    side = min(canvas)
    return max(10, side // 20), max(12, side // 9)


def synthesize_corpus(n_train: int, n_test: int, *, n_text_free: int | None = None,
                      canvas: tuple[int, int] = DEFAULT_CANVAS, seed: int = 0,
                      words_per_image: tuple[int, int] = (1, 4), alphabet: str = UPPER,
                      word_length: tuple[int, int] = (3, 6), noise_sigma: float = 6.0) -> list[ImageRecord]:
    """Rendered with-text scenes (twins attached) plus independent text-free scenes.

    The last ``n_test`` scenes of each kind are flagged as the fixed test pool.
    ``n_text_free`` defaults to ``n_train + n_test`` split in the same ratio.
    """
    canvas = tuple(int(c) for c in canvas)
    n_text_free = n_train + n_test if n_text_free is None else n_text_free
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test + n_text_free + 1, dtype=np.uint32)
    font = default_font_range(canvas)
    bg = Background(noise_sigma=noise_sigma)
    records: list[ImageRecord] = []
    for i in range(n_train + n_test):
        s = int(seeds[i])
        rng = np.random.default_rng(s ^ 0x5EED)
        for attempt in range(8):
            n_words = int(rng.integers(words_per_image[0], words_per_image[1] + 1))
            placements = [Placement(random_word(rng, alphabet, word_length), font) for _ in range(n_words)]
            try:
                rec, twin = render_scene(bg, placements, s + attempt, canvas, record_id=f"s{i:05d}",
                                         alphabet=alphabet)
                break
            except RenderError:
                if attempt == 7:
                    raise
        rec.test_pool = twin.test_pool = i >= n_train
        records.append(rec)
    n_free_test = int(round(n_text_free * n_test / max(n_train + n_test, 1)))
    for j in range(n_text_free):
        rec = render_background(bg, int(seeds[n_train + n_test + j]), canvas, record_id=f"b{j:05d}")
        rec.test_pool = j >= n_text_free - n_free_test
        records.append(rec)
    return records


# --- persistence -------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise IOError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.ndim == 2:
        ok = cv2.imwrite(str(path), pixels)
    else:
        ok = cv2.imwrite(str(path), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))
    if not ok:
        raise IOError(f"cannot write image {path}")


def format_polygon_line(polygon, text: str | None = None, prefix: Iterable = ()) -> str:
    coords = ",".join(_fmt(v) for v in np.asarray(polygon).reshape(-1))
    fields = [str(p) for p in prefix] + [coords]
    if text:
        fields.append(text)
    return ",".join(fields)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_annotation_line(line: str) -> TextRegion:
    """``x1,y1,...,xn,yn[,transcript]``; the transcript may itself contain commas."""
    tokens = line.strip().split(",")
    numbers = []
    for tok in tokens:
        try:
            numbers.append(float(tok))
        except ValueError:
            break
    if len(numbers) % 2 == 1:
        numbers.pop()
    if len(numbers) < 6:
        raise ValueError(f"need at least 3 vertices, got {len(numbers) // 2}: {line.strip()!r}")
    transcript = ",".join(tokens[len(numbers):]).strip()
    return TextRegion(np.array(numbers).reshape(-1, 2), transcript)


def read_annotations(path, tally: dict | None = None) -> list[TextRegion]:
    regions = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8-sig").splitlines(), 1):
        if not line.strip():
            continue
        try:
            regions.append(parse_annotation_line(line))
        except ValueError as e:
            log.warning("%s:%d: skipping malformed annotation: %s", path, n, e)
            if tally is not None:
                tally[str(path)] = tally.get(str(path), 0) + 1
    return regions


def write_annotations(path, regions: Sequence[TextRegion]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_polygon_line(r.polygon, r.transcript) + "\n" for r in regions))


def _first_dir(root: Path, names) -> Path | None:
    for name in names:
        if (root / name).is_dir():
            return root / name
    return None


def import_external(root, layout: str = "scut_enstext_pairs", canvas: tuple[int, int] | None = None,
                    tally: dict | None = None, test_pool: bool = False) -> list[ImageRecord]:
    """Import an external text-removal dataset laid out as paired folders.

    Expects ``images/`` (or ``all_images/``) and ``annotations/`` (or
    ``all_labels/``) with one ``<stem>.txt`` per image; an optional ``gts/``
    (or ``all_gts/``) folder holds the manually erased counterparts, which are
    attached as twins. ``canvas`` resizes images and scales polygons.
    """
    if layout != "scut_enstext_pairs":
        raise ValueError(f"unknown layout {layout!r}")
    root = Path(root)
    img_dir = _first_dir(root, ("images", "all_images"))
    if img_dir is None:
        return []
    ann_dir = _first_dir(root, ("annotations", "all_labels"))
    gt_dir = _first_dir(root, ("gts", "all_gts"))
    records = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            pixels = read_image(path)
        except IOError as e:
            log.warning("skipping unreadable image: %s", e)
            if tally is not None:
                tally[str(path)] = tally.get(str(path), 0) + 1
            continue
        regions = []
        ann = ann_dir / f"{path.stem}.txt" if ann_dir else None
        if ann is not None and ann.exists():
            regions = read_annotations(ann, tally)
        scale = None
        if canvas is not None and pixels.shape[:2] != tuple(canvas):
            scale = np.array([canvas[1] / pixels.shape[1], canvas[0] / pixels.shape[0]])
            pixels = cv2.resize(pixels, (canvas[1], canvas[0]), interpolation=cv2.INTER_AREA)
            regions = [replace(r, polygon=r.polygon * scale) for r in regions]
        params = {"source": str(path.relative_to(root))}
        kind = Step.RENDERED_WITH_TEXT if regions else Step.RENDERED_TEXT_FREE
        rec = ImageRecord(path.stem, pixels, regions, (ProvenanceStep(kind, params),), test_pool=test_pool)
        if gt_dir is not None and regions:
            twin_path = next((gt_dir / f"{path.stem}{s}" for s in IMAGE_SUFFIXES
                              if (gt_dir / f"{path.stem}{s}").exists()), None)
            if twin_path is not None:
                twin_px = read_image(twin_path)
                if twin_px.shape[:2] != pixels.shape[:2]:
                    twin_px = cv2.resize(twin_px, (pixels.shape[1], pixels.shape[0]), interpolation=cv2.INTER_AREA)
                rec.twin = ImageRecord(f"{path.stem}.clean", twin_px, [],
                                       (ProvenanceStep(Step.RENDERED_TEXT_FREE,
                                                       {"source": str(twin_path.relative_to(root))}),),
                                       source_id=rec.id, test_pool=test_pool)
        records.append(rec)
    return records


def save_corpus(records: Sequence[ImageRecord], root, manifest_name: str = "corpus.manifest") -> Path:
    """Write ``images/``, ``annotations/`` and a JSON-lines manifest; twins are saved too."""
    root = Path(root)
    seen: dict[str, ImageRecord] = {}
    for rec in records:
        seen.setdefault(rec.id, rec)
        if rec.twin is not None:
            seen.setdefault(rec.twin.id, rec.twin)
    lines = []
    for rec in seen.values():
        img_rel = Path("images") / f"{rec.id}.png"
        ann_rel = Path("annotations") / f"{rec.id}.txt"
        write_image(root / img_rel, rec.pixels)
        write_annotations(root / ann_rel, rec.regions)
        lines.append(json.dumps({
            "id": rec.id,
            "image": img_rel.as_posix(),
            "annotation": ann_rel.as_posix(),
            "source_id": rec.source_id,
            "test_pool": rec.test_pool,
            "twin": rec.twin.id if rec.twin is not None else None,
            "erased": [r.erased for r in rec.regions],
            "provenance": [p.to_dict() for p in rec.provenance],
        }))
    path = root / manifest_name
    path.write_text("\n".join(lines) + "\n")
    return path


def load_corpus(root, manifest_name: str = "corpus.manifest") -> list[ImageRecord]:
    root = Path(root)
    rows = [json.loads(line) for line in (root / manifest_name).read_text().splitlines() if line.strip()]
    by_id: dict[str, ImageRecord] = {}
    for row in rows:
        regions = read_annotations(root / row["annotation"])
        for r, erased in zip(regions, row.get("erased", [])):
            r.erased = bool(erased)
        by_id[row["id"]] = ImageRecord(
            row["id"], read_image(root / row["image"]), regions,
            tuple(ProvenanceStep.from_dict(p) for p in row["provenance"]),
            source_id=row.get("source_id"), test_pool=bool(row.get("test_pool", False)))
    twins = set()
    for row in rows:
        if row.get("twin"):
            by_id[row["id"]].twin = by_id.get(row["twin"])
            twins.add(row["twin"])
    return [rec for rid, rec in by_id.items() if rid not in twins]
