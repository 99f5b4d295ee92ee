"""Procedural text-image corpus with exact per-character ground-truth masks.

Samples are rendered from a built-in 5x7 bitmap alphabet onto a gray canvas,
one glyph per character, left to right. Ground truth is emitted as a label
map (0 = background, k = k-th character) so masks survive file round trips
exactly. Images are quantized to the 8-bit grid at render time, making the
PGM round trip lossless.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Iterator, Sequence

import numpy as np

from .imaging import ImageBuffer
from .pseudolabel import CharMaskSet

DEFAULT_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

# 5x7 dot-matrix uppercase glyphs; '#' marks stroke pixels. Every glyph is a
# single 8-connected component.
_FONT_ROWS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}

GLYPH_COLS = 5
GLYPH_ROWS = 7

_FONT = {ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
         for ch, rows in _FONT_ROWS.items()}


class DatasetError(ValueError):
    """Raised for unrenderable configurations and corrupt dataset files."""


@dataclasses.dataclass(frozen=True)
class GenConfig:
    """Rendering parameters for the synthetic corpus."""

    height: int = 32
    width: int = 128
    word_length: tuple[int, int] = (2, 6)
    alphabet: str = DEFAULT_ALPHABET
    glyph_scale: int = 3
    gap_range: tuple[int, int] = (2, 5)
    y_jitter: int = 2
    fg_range: tuple[float, float] = (0.75, 0.95)
    bg_range: tuple[float, float] = (0.05, 0.25)
    fg_jitter: float = 0.0  # per-glyph intensity variation around fg
    noise_sigma: float = 0.08
    touching_prob: float = 0.0
    margin: int = 2

    def __post_init__(self):
        if self.word_length[0] < 1 or self.word_length[0] > self.word_length[1]:
            raise DatasetError(f"bad word_length range {self.word_length}")
        if not self.alphabet:
            raise DatasetError("alphabet must not be empty")
        unknown = set(self.alphabet) - set(_FONT)
        if unknown:
            raise DatasetError(f"alphabet contains glyphs without bitmaps: {sorted(unknown)}")
        if self.glyph_scale < 1:
            raise DatasetError("glyph_scale must be >= 1")
        if self.gap_range[0] < 0 or self.gap_range[0] > self.gap_range[1]:
            raise DatasetError(f"bad gap range {self.gap_range}")
        if self.fg_range[0] - self.bg_range[1] < 0.2:
            raise DatasetError("fg and bg intensity ranges must be separated by >= 0.2")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        if not 0.0 <= self.touching_prob <= 1.0:
            raise DatasetError("touching_prob must be in [0, 1]")


@dataclasses.dataclass
class GlyphSample:
    """One rendered word with exact per-character masks and class labels."""

    image: ImageBuffer
    gt_masks: CharMaskSet
    labels: list[int]
    text: str
    seed: int | None = None


def _quantize(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0) / 255.0


def render_sample(rng: np.random.Generator, cfg: GenConfig = GenConfig()) -> GlyphSample:
    """Render one word; a pure function of the rng state and config."""
    length = int(rng.integers(cfg.word_length[0], cfg.word_length[1] + 1))
    glyph_ids = rng.integers(0, len(cfg.alphabet), size=length)
    bg = rng.uniform(*cfg.bg_range)
    fg = rng.uniform(*cfg.fg_range)

    gw = GLYPH_COLS * cfg.glyph_scale
    gh = GLYPH_ROWS * cfg.glyph_scale
    gaps = []
    for _ in range(length - 1):
        touching = rng.random() < cfg.touching_prob
        gap = int(rng.integers(cfg.gap_range[0], cfg.gap_range[1] + 1))
        gaps.append(0 if touching else gap)
    total_w = length * gw + sum(gaps)

    if gh + 2 * cfg.margin > cfg.height or total_w + 2 * cfg.margin > cfg.width:
        raise DatasetError("layout overflow")
    x0 = int(rng.integers(cfg.margin, cfg.width - total_w - cfg.margin + 1))
    y_center = (cfg.height - gh) // 2

    canvas = np.full((cfg.height, cfg.width), bg)
    label_map = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    x = x0
    fg_floor = cfg.bg_range[1] + 0.2
    for k, gid in enumerate(glyph_ids):
        jitter = int(rng.integers(-cfg.y_jitter, cfg.y_jitter + 1)) if cfg.y_jitter else 0
        y = min(max(y_center + jitter, 0), cfg.height - gh)
        fg_k = fg
        if cfg.fg_jitter > 0:
            fg_k = float(np.clip(fg + rng.uniform(-cfg.fg_jitter, cfg.fg_jitter),
                                 fg_floor, 1.0))
        bitmap = _FONT[cfg.alphabet[gid]]
        scaled = np.kron(bitmap, np.ones((cfg.glyph_scale, cfg.glyph_scale), dtype=bool))
        region = label_map[y:y + gh, x:x + gw]
        region[scaled] = k + 1
        canvas[y:y + gh, x:x + gw][scaled] = fg_k
        x += gw + (gaps[k] if k < length - 1 else 0)

    if cfg.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    canvas = _quantize(canvas)

    masks = [(label_map == k + 1).astype(np.uint8) for k in range(length)]
    return GlyphSample(
        image=ImageBuffer(canvas[:, :, None]),
        gt_masks=CharMaskSet(masks),
        labels=[int(g) for g in glyph_ids],
        text="".join(cfg.alphabet[g] for g in glyph_ids),
    )


def make_sample(seed: int, cfg: GenConfig = GenConfig()) -> GlyphSample:
    sample = render_sample(np.random.default_rng(seed), cfg)
    sample.seed = seed
    return sample


def generate_dataset(count: int, seed: int, cfg: GenConfig = GenConfig()) -> list[GlyphSample]:
    """Samples with per-item seeds derived from (seed, index)."""
    out = []
    for i in range(count):
        sample = render_sample(np.random.default_rng([seed, i]), cfg)
        sample.seed = i
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# On-disk format: 8-bit binary PGM images/masks plus a JSON-lines manifest.
# ---------------------------------------------------------------------------

def write_pgm(path: str, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DatasetError(f"PGM writer expects a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        fields: list[bytes] = []
        pos = 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":  # comment line
                pos = raw.index(b"\n", pos) + 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace after maxval
        if fields[0] != b"P5":
            raise DatasetError(f"{path}: not a binary PGM")
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        if maxval != 255:
            raise DatasetError(f"{path}: unsupported maxval {maxval}")
        data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
        if data.size != width * height:
            raise DatasetError(f"{path}: truncated pixel data")
        return data.reshape(height, width).copy()
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: corrupt PGM header") from exc


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    records: list[dict]
    root: str

    def __len__(self) -> int:
        return len(self.records)


def write_dataset(samples: Sequence[GlyphSample], out_dir: str) -> DatasetManifest:
    """Write images, mask label maps, and the manifest; returns the manifest."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    records = []
    for i, sample in enumerate(samples):
        sid = f"{i:06d}"
        img_rel = os.path.join("images", f"{sid}.pgm")
        mask_rel = os.path.join("masks", f"{sid}.pgm")
        img8 = np.round(sample.image.data[:, :, 0] * 255.0).astype(np.uint8)
        label_map = np.zeros(img8.shape, dtype=np.uint8)
        for k, mask in enumerate(sample.gt_masks.masks):
            label_map[mask > 0] = k + 1
        write_pgm(os.path.join(out_dir, img_rel), img8)
        write_pgm(os.path.join(out_dir, mask_rel), label_map)
        records.append({"id": sid, "image": img_rel, "mask": mask_rel, "text": sample.text})

    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return DatasetManifest(records=records, root=out_dir)


def read_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.jsonl")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{line_no}: corrupt manifest line") from exc
            missing = {"id", "image", "mask", "text"} - set(rec)
            if missing:
                raise DatasetError(f"{path}:{line_no}: missing fields {sorted(missing)}")
            records.append(rec)
    return DatasetManifest(records=records, root=root)


def _load_record(root: str, rec: dict, alphabet: str) -> GlyphSample:
    img_path = os.path.join(root, rec["image"])
    mask_path = os.path.join(root, rec["mask"])
    img8 = read_pgm(img_path)
    label_map = read_pgm(mask_path)
    if img8.shape != label_map.shape:
        raise DatasetError(
            f"{mask_path}: mask shape {label_map.shape} does not match image {img8.shape}")
    text = rec["text"]
    if label_map.max(initial=0) > len(text):
        raise DatasetError(
            f"{mask_path}: mask value {int(label_map.max())} exceeds word length {len(text)}")
    labels = []
    for ch in text:
        idx = alphabet.find(ch)
        if idx < 0:
            raise DatasetError(f"{img_path}: character {ch!r} not in alphabet")
        labels.append(idx)
    masks = [(label_map == k + 1).astype(np.uint8) for k in range(len(text))]
    return GlyphSample(
        image=ImageBuffer(img8.astype(np.float64)[:, :, None] / 255.0),
        gt_masks=CharMaskSet(masks),
        labels=labels,
        text=text,
    )


def read_dataset(root: str, alphabet: str = DEFAULT_ALPHABET) -> Iterator[GlyphSample]:
    """Yield samples from a directory written by :func:`write_dataset`."""
    manifest = read_manifest(root)
    for rec in manifest.records:
        yield _load_record(root, rec, alphabet)
