"""Threshold sweeps over an image directory: one adaptive-depth run per
image, then every exit threshold is evaluated by re-thresholding the stored
coarse confidences, so a full sweep costs a single two-stage pass per image.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

from .config import ModelConfig
from .controller import run_inference, should_exit
from .cost import expected_flops
from .errors import CftError, InvalidValueError
from .imageio import load_image
from .model import ModelWeights

CSV_SCHEMA = "cft-sweep-v1"


def parse_eta_spec(spec: str) -> tuple[float, ...]:
    """Expand "start:stop:step" (inclusive) or a comma list into thresholds.

    Values are built in exact rationals so 0:1:0.05 yields 21 thresholds with
    no floating drift, each within [0, 1], ascending.
    """
    if ":" in spec:
        try:
            start, stop, step = (Fraction(str(float(s)))
                                 for s in spec.split(":"))
        except ValueError as exc:
            raise InvalidValueError(f"cannot parse threshold spec {spec!r}") from exc
        if step <= 0:
            raise InvalidValueError(f"step must be positive in {spec!r}")
        values = []
        v = start
        while v <= stop:
            values.append(float(v))
            v += step
    else:
        try:
            values = [float(s) for s in spec.split(",") if s.strip()]
        except ValueError as exc:
            raise InvalidValueError(f"cannot parse threshold spec {spec!r}") from exc
    if not values:
        raise InvalidValueError(f"threshold spec {spec!r} expands to nothing")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise InvalidValueError(f"thresholds must lie in [0, 1]: {spec!r}")
    if sorted(values) != values or len(set(values)) != len(values):
        raise InvalidValueError(f"thresholds must be strictly ascending: {spec!r}")
    return tuple(values)


@dataclass(frozen=True)
class ImageStats:
    """Per-image facts a sweep needs, independent of any threshold."""

    filename: str
    coarse_confidence: float
    coarse_class: int
    fine_class: int


@dataclass(frozen=True)
class SweepRow:
    """One threshold's dataset-level outcome."""

    eta: float
    exit_count: int
    fine_count: int
    expected_flops: float
    mean_confidence_coarse: float
    correct_coarse: int | None = None
    correct_fine: int | None = None


def collect_image_stats(
    files: list[Path],
    cfg: ModelConfig,
    weights: ModelWeights,
    workers: int = 1,
    use_reuse: bool = True,
) -> list[ImageStats]:
    """Run the two-stage pipeline once per image (threshold 1.0, so the fine
    stage always runs) and return stats sorted by filename. The result is
    identical for any worker count because aggregation happens after sorting.
    """
    if not files:
        raise InvalidValueError("no input images found")
    if workers < 1:
        raise InvalidValueError(f"worker count must be >= 1, got {workers}")

    def one(path: Path) -> ImageStats:
        image = load_image(path)
        result = run_inference(image, cfg, weights, eta=1.0, use_reuse=use_reuse)
        return ImageStats(
            filename=path.name,
            coarse_confidence=result.coarse.confidence,
            coarse_class=result.coarse.predicted_class,
            fine_class=result.fine.predicted_class,
        )

    if workers == 1:
        stats = [one(p) for p in files]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(one, files))
    return sorted(stats, key=lambda s: s.filename)


def sweep_rows(
    stats: list[ImageStats],
    etas: tuple[float, ...],
    cfg: ModelConfig,
    labels: dict[str, int] | None = None,
) -> list[SweepRow]:
    """Evaluate every threshold against the per-image stats."""
    if not stats:
        raise InvalidValueError("sweep needs at least one image")
    total = len(stats)
    mean_conf = sum(s.coarse_confidence for s in stats) / total
    rows = []
    for eta in etas:
        exited = [s for s in stats if should_exit(s.coarse_confidence, eta)]
        exit_count = len(exited)
        row = SweepRow(
            eta=eta,
            exit_count=exit_count,
            fine_count=total - exit_count,
            expected_flops=expected_flops(cfg, exit_count / total),
            mean_confidence_coarse=mean_conf,
        )
        if labels is not None:
            staying = [s for s in stats if not should_exit(s.coarse_confidence, eta)]
            row = replace(
                row,
                correct_coarse=sum(
                    1 for s in exited if labels.get(s.filename) == s.coarse_class
                ),
                correct_fine=sum(
                    1 for s in staying if labels.get(s.filename) == s.fine_class
                ),
            )
        rows.append(row)
    return rows


def rows_to_csv(rows: list[SweepRow]) -> str:
    """Render rows to the versioned CSV text (schema comment on line one)."""
    with_labels = rows and rows[0].correct_coarse is not None
    out = io.StringIO()
    out.write(f"# schema={CSV_SCHEMA}\n")
    header = "eta,exit_count,fine_count,expected_flops,mean_confidence_coarse"
    if with_labels:
        header += ",correct_coarse,correct_fine"
    out.write(header + "\n")
    for r in rows:
        cells = [repr(r.eta), str(r.exit_count), str(r.fine_count),
                 repr(r.expected_flops), repr(r.mean_confidence_coarse)]
        if with_labels:
            cells += [str(r.correct_coarse), str(r.correct_fine)]
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def parse_sweep_csv(text: str) -> list[SweepRow]:
    """Inverse of rows_to_csv, used by the report renderer."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"# schema={CSV_SCHEMA}":
        raise CftError(f"sweep CSV must start with '# schema={CSV_SCHEMA}'")
    header = lines[1].split(",")
    rows = []
    for ln in lines[2:]:
        cells = ln.split(",")
        if len(cells) != len(header):
            raise CftError(f"sweep CSV row has {len(cells)} cells, header {len(header)}")
        named = dict(zip(header, cells))
        rows.append(SweepRow(
            eta=float(named["eta"]),
            exit_count=int(named["exit_count"]),
            fine_count=int(named["fine_count"]),
            expected_flops=float(named["expected_flops"]),
            mean_confidence_coarse=float(named["mean_confidence_coarse"]),
            correct_coarse=(int(named["correct_coarse"])
                            if "correct_coarse" in named else None),
            correct_fine=(int(named["correct_fine"])
                          if "correct_fine" in named else None),
        ))
    return rows


def read_labels(path: str | Path) -> dict[str, int]:
    """Parse a labels file of "filename,class" lines ('#' comments allowed)."""
    labels: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.rpartition(",")
        if not name:
            raise CftError(f"labels line {lineno}: expected 'filename,class'")
        try:
            labels[name.strip()] = int(value)
        except ValueError as exc:
            raise CftError(f"labels line {lineno}: class must be an integer") from exc
    return labels
