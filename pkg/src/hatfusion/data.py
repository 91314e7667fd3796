"""Synthetic paired glyph data: stroke sequences, their rasterisations and
the on-disk dataset format (JSON Lines manifest plus binary PGM images)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
DEFAULT_SIDE = 56
DEFAULT_LINE_WIDTH = 2.0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphTemplate:
    label: int
    polylines: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self):
        if not self.polylines or any(len(p) == 0 for p in self.polylines):
            raise ValueError(f"template {self.label} needs at least one non-empty polyline")
        pts = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 2) for p in self.polylines])
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ValueError(f"template {self.label} has control points outside the unit square")


@dataclass(frozen=True)
class JitterParams:
    """Bounds of the random per-sample perturbation."""

    max_rotation_deg: float = 15.0
    min_scale: float = 0.8
    max_scale: float = 1.2
    max_translation: float = 0.1
    noise_sigma: float = 0.01
    n_points: int = 32
    length_jitter: float = 0.25

    @classmethod
    def none(cls, n_points: int = 32) -> JitterParams:
        return cls(0.0, 1.0, 1.0, 0.0, 0.0, n_points, 0.0)


@dataclass
class Sample:
    label: int
    strokes: np.ndarray | None  # (T, 3): x, y, pen
    image: np.ndarray | None    # (side, side) in [0, 1]
    writer_seed: int = 0
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.label == other.label
            and self.writer_seed == other.writer_seed
            and self.split == other.split
            and _array_equal(self.strokes, other.strokes)
            and _array_equal(self.image, other.image)
        )


def _array_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


def _ellipse(cx, cy, rx, ry, n=14):
    ang = np.linspace(-math.pi / 2, 1.5 * math.pi, n + 1)
    return tuple((round(cx + rx * math.cos(a), 4), round(cy + ry * math.sin(a), 4)) for a in ang)


def digit_templates() -> list[GlyphTemplate]:
    """Ten hand-authored digit-like glyphs (y grows downwards)."""
    raw = {
        0: [_ellipse(0.5, 0.5, 0.18, 0.3)],
        1: [((0.38, 0.32), (0.5, 0.2), (0.5, 0.8))],
        2: [((0.3, 0.32), (0.38, 0.22), (0.5, 0.2), (0.62, 0.24), (0.68, 0.34),
             (0.62, 0.46), (0.3, 0.8), (0.7, 0.8))],
        3: [((0.3, 0.22), (0.6, 0.2), (0.68, 0.32), (0.58, 0.46), (0.45, 0.5),
             (0.6, 0.54), (0.7, 0.66), (0.6, 0.8), (0.3, 0.78))],
        4: [((0.6, 0.2), (0.3, 0.6), (0.72, 0.6)), ((0.6, 0.35), (0.6, 0.8))],
        5: [((0.35, 0.2), (0.32, 0.47), (0.55, 0.45), (0.68, 0.56), (0.66, 0.72),
             (0.5, 0.8), (0.3, 0.75)), ((0.35, 0.2), (0.68, 0.2))],
        6: [((0.62, 0.2), (0.45, 0.32), (0.34, 0.5), (0.33, 0.68), (0.45, 0.8),
             (0.6, 0.78), (0.67, 0.65), (0.6, 0.53), (0.45, 0.52), (0.34, 0.6))],
        7: [((0.3, 0.22), (0.7, 0.2), (0.45, 0.8))],
        8: [((0.5, 0.5), (0.35, 0.4), (0.38, 0.25), (0.5, 0.2), (0.62, 0.25), (0.65, 0.4),
             (0.5, 0.5), (0.33, 0.62), (0.36, 0.77), (0.5, 0.8), (0.64, 0.77), (0.67, 0.62),
             (0.5, 0.5))],
        9: [((0.65, 0.35), (0.55, 0.22), (0.42, 0.22), (0.34, 0.33), (0.4, 0.45),
             (0.55, 0.46), (0.65, 0.35), (0.64, 0.55), (0.58, 0.8))],
    }
    return [GlyphTemplate(k, tuple(tuple(p) for p in v)) for k, v in raw.items()]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) == 1 or n == 1:
        return np.repeat(points[:1], n, axis=0)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0.0:
        return np.repeat(points[:1], n, axis=0)
    targets = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(targets, cum, points[:, 0]), np.interp(targets, cum, points[:, 1])], axis=1)


def _allocate(lengths: Sequence[float], total: int, minimum: Sequence[int]) -> list[int]:
    """Split ``total`` points across polylines proportionally to length (largest remainder)."""
    counts = list(minimum)
    spare = total - sum(counts)
    if spare <= 0:
        return counts
    length_sum = sum(lengths)
    if length_sum == 0.0:
        counts[0] += spare
        return counts
    shares = [spare * l / length_sum for l in lengths]
    floors = [int(math.floor(s)) for s in shares]
    rest = spare - sum(floors)
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - floors[i]), i))
    for i in order[:rest]:
        floors[i] += 1
    return [c + f for c, f in zip(counts, floors)]


def resample_strokes(polylines: Sequence[np.ndarray], n_points: int) -> np.ndarray:
    """Arc-length resample pen-down polylines to about ``n_points`` points.

    One pen-up point (pen = 0) is inserted at the midpoint of each jump
    between consecutive polylines. Returns a (T, 3) array.
    """
    polys = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines]
    lengths = [float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) for p in polys]
    minimum = [1 if len(p) == 1 else 2 for p in polys]
    counts = _allocate(lengths, max(n_points, sum(minimum)), minimum)
    rows = []
    for i, (poly, n) in enumerate(zip(polys, counts)):
        if i > 0:
            mid = 0.5 * (rows[-1][-1, :2] + poly[0])
            rows.append(np.array([[mid[0], mid[1], 0.0]]))
        pts = _resample_polyline(poly, n)
        rows.append(np.column_stack([pts, np.ones(len(pts))]))
    return np.concatenate(rows)


def _perturb(polylines, rng: np.random.Generator, jitter: JitterParams):
    angle = math.radians(rng.uniform(-jitter.max_rotation_deg, jitter.max_rotation_deg))
    scale = rng.uniform(jitter.min_scale, jitter.max_scale)
    shift = rng.uniform(-jitter.max_translation, jitter.max_translation, size=2)
    if angle == 0.0 and scale == 1.0 and not shift.any():
        return [np.asarray(p, dtype=np.float64) for p in polylines]
    c, s = math.cos(angle), math.sin(angle)
    rot = scale * np.array([[c, -s], [s, c]])
    centre = np.array([0.5, 0.5])
    return [(np.asarray(p, dtype=np.float64) - centre) @ rot.T + centre + shift for p in polylines]


def make_sample(template: GlyphTemplate, writer_seed: int, jitter: JitterParams,
                side: int = DEFAULT_SIDE, line_width: float = DEFAULT_LINE_WIDTH) -> Sample:
    """Draw one jittered instance of ``template``; a pure function of its arguments."""
    rng = np.random.default_rng(writer_seed)
    polys = _perturb(template.polylines, rng, jitter)
    n = jitter.n_points
    if jitter.length_jitter > 0.0:
        n = max(2, int(round(n * (1.0 + rng.uniform(-jitter.length_jitter, jitter.length_jitter)))))
    strokes = resample_strokes(polys, n)
    if jitter.noise_sigma > 0.0:
        strokes[:, :2] += rng.normal(0.0, jitter.noise_sigma, size=(len(strokes), 2))
    strokes[:, :2] = np.clip(strokes[:, :2], 0.0, 1.0)
    return Sample(template.label, strokes, rasterize(strokes, side, line_width), writer_seed)


def writer_seed_for(seed: int, label: int, index: int) -> int:
    """Per-sample seed derived from the root seed, class and index."""
    return int(np.random.SeedSequence([seed, label, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def generate(
    templates: Sequence[GlyphTemplate],
    n_per_class: int,
    seed: int,
    jitter: JitterParams | None = None,
    side: int = DEFAULT_SIDE,
    line_width: float = DEFAULT_LINE_WIDTH,
    split_fractions: tuple[float, float, float] | None = (0.8, 0.1, 0.1),
) -> list[Sample]:
    """``n_per_class`` samples per template, class-major order.

    With ``split_fractions`` each class is split train/val/test by a
    seeded shuffle; otherwise every sample is tagged ``train``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not templates:
        raise ValueError("at least one template is required")
    jitter = jitter or JitterParams()
    samples: list[Sample] = []
    for tpl in templates:
        batch = [make_sample(tpl, writer_seed_for(seed, tpl.label, i), jitter, side, line_width)
                 for i in range(n_per_class)]
        if split_fractions is not None:
            for s, tag in zip(batch, _split_tags(n_per_class, split_fractions, seed, tpl.label)):
                s.split = tag
        samples.extend(batch)
    return samples


def _split_tags(n: int, fractions, seed: int, label: int) -> list[str]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = np.random.default_rng([seed, label, 0x5EED]).permutation(n)
    out = [""] * n
    for pos, idx in enumerate(order):
        out[idx] = tags[pos]
    return out


def by_split(samples: Iterable[Sample], split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def rasterize(strokes: np.ndarray, side: int = DEFAULT_SIDE, line_width: float = DEFAULT_LINE_WIDTH) -> np.ndarray:
    """Anti-aliased rendering of the pen-down segments into a side x side image.

    Coverage is ``clip(line_width/2 + 1/2 - distance, 0, 1)`` with distances
    in pixels from pixel centres; values are quantised to multiples of 1/255
    so that an 8-bit PGM stores them exactly.
    """
    if side < 8:
        raise ValueError("image side must be >= 8")
    strokes = np.asarray(strokes, dtype=np.float64).reshape(-1, 3)
    down = strokes[:, 2] == 1.0
    pts = strokes[:, :2] * side
    starts, ends = [], []
    for i in range(len(strokes)):
        if not down[i]:
            continue
        prev_down = i > 0 and down[i - 1]
        next_down = i + 1 < len(strokes) and down[i + 1]
        if next_down:
            starts.append(pts[i])
            ends.append(pts[i + 1])
        elif not prev_down:
            starts.append(pts[i])
            ends.append(pts[i])
    image = np.zeros((side, side))
    if not starts:
        return image
    a = np.array(starts)
    b = np.array(ends)
    centres = np.arange(side) + 0.5
    px = np.broadcast_to(centres[None, :], (side, side)).reshape(-1, 1)
    py = np.broadcast_to(centres[:, None], (side, side)).reshape(-1, 1)
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    safe = np.where(denom > 0.0, denom, 1.0)
    t = ((px - a[:, 0]) * ab[:, 0] + (py - a[:, 1]) * ab[:, 1]) / safe
    t = np.where(denom > 0.0, np.clip(t, 0.0, 1.0), 0.0)
    dx = px - (a[:, 0] + t * ab[:, 0])
    dy = py - (a[:, 1] + t * ab[:, 1])
    dist = np.sqrt(dx * dx + dy * dy).min(axis=1)
    coverage = np.clip(line_width / 2.0 + 0.5 - dist, 0.0, 1.0)
    return (np.round(coverage * 255.0) / 255.0).reshape(side, side)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    levels = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + levels.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    blob = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"truncated PGM header in {path}")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"not a binary PGM (P5) file: {path}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"bad PGM header in {path}") from exc
    if maxval != 255:
        raise DatasetError(f"unsupported PGM maxval {maxval} in {path}")
    payload = blob[pos:]
    if len(payload) != w * h:
        raise DatasetError(f"truncated image data in {path}: expected {w * h} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0


def _format_strokes(strokes: np.ndarray) -> str:
    return "[" + ",".join("[%.17g,%.17g,%d]" % (x, y, int(p)) for x, y, p in strokes) + "]"


def write_dataset(samples: Sequence[Sample], directory) -> Path:
    """Write ``manifest.jsonl`` and ``images/NNNNNN.pgm`` under ``directory``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        parts = [f'"label": {int(s.label)}', f'"split": {json.dumps(s.split)}']
        if s.strokes is not None:
            parts.append(f'"strokes": {_format_strokes(s.strokes)}')
        if s.image is not None:
            rel = f"images/{i:06d}.pgm"
            write_pgm(root / rel, s.image)
            parts.append(f'"image": "{rel}"')
        parts.append(f'"writer_seed": {int(s.writer_seed)}')
        lines.append("{" + ", ".join(parts) + "}\n")
    (root / "manifest.jsonl").write_text("".join(lines))
    return root


def _parse_line(text: str, lineno: int, root: Path) -> Sample:
    def fail(msg):
        raise DatasetError(f"manifest line {lineno}: {msg}")

    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        fail(f"invalid JSON ({exc.msg})")
    if not isinstance(rec, dict):
        fail("expected a JSON object")
    label = rec.get("label")
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        fail(f"label must be a non-negative integer, got {label!r}")
    split = rec.get("split", "train")
    if split not in SPLITS:
        fail(f"split must be one of {SPLITS}, got {split!r}")
    strokes = None
    if rec.get("strokes") is not None:
        try:
            strokes = np.array(rec["strokes"], dtype=np.float64)
        except (TypeError, ValueError):
            fail("strokes must be a list of [x, y, pen] triples")
        if strokes.ndim != 2 or strokes.shape[1] != 3 or len(strokes) == 0:
            fail("strokes must be a non-empty list of [x, y, pen] triples")
        bad = ~np.isin(strokes[:, 2], (0.0, 1.0))
        if bad.any():
            fail(f"pen value {strokes[bad, 2][0]:g} is not 0 or 1")
        if not np.all(np.isfinite(strokes[:, :2])):
            fail("non-finite coordinate")
    image = None
    if rec.get("image") is not None:
        image = read_pgm(root / rec["image"])
    if strokes is None and image is None:
        fail("record has neither strokes nor image")
    return Sample(label, strokes, image, int(rec.get("writer_seed", 0)), split)


def read_dataset(directory) -> list[Sample]:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"missing manifest: {manifest}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if line.strip():
            samples.append(_parse_line(line, lineno, root))
    if not samples:
        raise DatasetError(f"empty manifest: {manifest}")
    return samples


def split_counts(samples: Iterable[Sample]) -> dict[str, int]:
    counts = {k: 0 for k in SPLITS}
    for s in samples:
        counts[s.split] += 1
    return counts
