"""Metric reports and publication-style tables.

Published reference numbers are embedded only for side-by-side display; no
computation reads them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from istr import __version__

# Full-scale published numbers on SCUT-EnsText with ViTEraser / DeepEraser as the removal models.
PUBLISHED_TABLE1 = {  # accuracy (%) by dataset protocol
    "ViTEraser": {1: 98.89, 2: 99.93, 3: 93.05},
    "DeepEraser": {1: 97.97, 2: 95.91, 3: 97.29},
}
PUBLISHED_TABLE2 = {"ViTEraser": 0.676, "DeepEraser": 0.707}  # mean IoU
PUBLISHED_TABLE3 = {  # (Text-Acc, Char-Acc) per split and checkpoint
    "ViTEraser": {
        "train": {"best": (10.21, 22.33), "last": (92.98, 94.12)},
        "val": {"best": (2.86, 8.69), "last": (3.09, 8.89)},
        "test": {"best": (2.32, 8.13), "last": (2.18, 7.90)},
    },
    "DeepEraser": {
        "train": {"best": (89.55, 91.11), "last": (90.51, 91.91)},
        "val": {"best": (2.82, 8.81), "last": (2.59, 8.90)},
        "test": {"best": (1.57, 7.17), "last": (1.48, 7.25)},
    },
}


@dataclass
class MetricsReport:
    stage: str
    metrics: dict = field(default_factory=dict)
    items: list = field(default_factory=list)
    config_fingerprint: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fmt(v, digits=2):
    return "–" if v is None else f"{v:.{digits}f}"


def table1_markdown(reports: Sequence[MetricsReport], label: str = "desk") -> str:
    """Presence accuracy: rows are removal models, columns protocols 1/2/3."""
    by_method: dict[str, dict[int, float]] = {}
    for r in reports:
        method = r.extra.get("str_method", label)
        by_method.setdefault(f"{label} ({method})", {})[int(r.extra["protocol"])] = r.metrics["accuracy"]
    lines = [
        "**STR presence detection accuracy (%) on the test images**",
        "",
        "| | Protocol 1 | Protocol 2 | Protocol 3 |",
        "|---|---|---|---|",
        "| Pos. | w/ text → STR | w/ text → STR | w/ text → STR |",
        "| Neg. | w/ text → manual erase | w/o text | w/ text → manual erase → STR |",
    ]
    for name, row in by_method.items():
        lines.append(f"| {name} | " + " | ".join(_fmt(row.get(p)) for p in (1, 2, 3)) + " |")
    for name, row in PUBLISHED_TABLE1.items():
        lines.append(f"| published: {name} | " + " | ".join(_fmt(row[p]) for p in (1, 2, 3)) + " |")
    return "\n".join(lines)


def table2_markdown(reports: Sequence[MetricsReport], label: str = "desk") -> str:
    lines = ["**STR region detection performance on the test images by IoU**", "",
             "| STR model | IoU |", "|---|---|"]
    for r in reports:
        lines.append(f"| {label} ({r.extra.get('str_method', '?')}) | {_fmt(r.metrics['mean_iou'], 3)} |")
    for name, v in PUBLISHED_TABLE2.items():
        lines.append(f"| published: {name} | {_fmt(v, 3)} |")
    return "\n".join(lines)


def table3_markdown(reports: Sequence[MetricsReport], label: str = "desk") -> str:
    lines = ["**Accuracy of STR text recovery (Level-3-1)**", "",
             "| STR model | Split | Best Text-Acc | Best Char-Acc | Last Text-Acc | Last Char-Acc |",
             "|---|---|---|---|---|---|"]

    def rows(name, table):
        for split in ("train", "val", "test"):
            cells = table.get(split)
            if cells is None:
                continue
            b, l = cells.get("best", (None, None)), cells.get("last", (None, None))
            lines.append(f"| {name} | {split} | {_fmt(b[0])} | {_fmt(b[1])} | {_fmt(l[0])} | {_fmt(l[1])} |")

    for r in reports:
        table = {split: {ck: (v["text_accuracy"], v["char_accuracy"]) for ck, v in per.items()}
                 for split, per in r.metrics["table"].items()}
        rows(f"{label} ({r.extra.get('str_method', '?')})", table)
    for name, table in PUBLISHED_TABLE3.items():
        rows(f"published: {name}", table)
    return "\n".join(lines)


_TABLES = {"level1": table1_markdown, "level2": table2_markdown, "level3": table3_markdown}


def emit_report(reports: Sequence[MetricsReport], out_dir, fmt: str = "markdown") -> list[Path]:
    """Write reports as JSON (``structured``) or as publication-style markdown tables.

    Level-1 reports are grouped into one table; any other stage gets a plain
    key/value listing.
    """
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "structured":
        paths = []
        for r in reports:
            name = r.stage + (f"_p{r.extra['protocol']}" if "protocol" in r.extra else "")
            paths.append(r.save(out_dir / f"{name}.json"))
        return paths
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")

    sections = []
    for kind, render in _TABLES.items():
        group = [r for r in reports if r.stage == kind]
        if group:
            sections.append(render(group))
    for r in reports:
        if r.stage not in _TABLES:
            body = "\n".join(f"| {k} | {v} |" for k, v in sorted(r.metrics.items()))
            sections.append(f"**{r.stage}**\n\n| metric | value |\n|---|---|\n{body}")
    fingerprints = sorted({r.config_fingerprint for r in reports if r.config_fingerprint})
    footer = f"_istr {reports[0].version}; config fingerprint(s): {', '.join(fingerprints) or 'n/a'}_"
    path = out_dir / "report.md"
    path.write_text("\n\n".join(sections + [footer]) + "\n")
    return [path]
