"""Dataset I/O: YOLO labels, PPM/PGM images, letterboxing, splitting,
statistics and a synthetic dataset generator."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .boxes import BBox, GroundTruth
from .tensor import DTYPE

LETTERBOX_FILL = 0.447


class DataError(ValueError):
    pass


class Label(NamedTuple):
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self, width: float, height: float) -> BBox:
        return BBox((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                    (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)


@dataclass
class LabeledImage:
    image_id: int
    path: str
    width: int
    height: int
    labels: list[Label] = field(default_factory=list)

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(lb.to_xyxy(self.width, self.height), lb.class_id, self.image_id)
                for lb in self.labels]


# --- PNM ------------------------------------------------------------------

def _read_pnm_header(fh) -> tuple[str, int, int, int]:
    tokens: list[bytes] = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise DataError("truncated PNM header")
        tokens.extend(line.split(b"#")[0].split())
    magic, w, h, maxval = tokens[0].decode(), int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise DataError(f"unsupported PNM variant {magic} maxval {maxval}")
    return magic, w, h, maxval


def read_pnm_size(path: str | Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        _, w, h, _ = _read_pnm_header(fh)
    return w, h


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM/PPM as a (C, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        magic, w, h, _ = _read_pnm_header(fh)
        c = 3 if magic == "P6" else 1
        buf = fh.read(w * h * c)
    if len(buf) != w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(DTYPE) / DTYPE(255)


def write_pnm(path: str | Path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) uint8 array as PPM/PGM."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels).tobytes())


# --- labels ---------------------------------------------------------------

def parse_label_file(path: str | Path, num_classes: int | None = None) -> list[Label]:
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError("expected 5 fields")
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed label line {line!r} ({exc})") from None
        if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
            raise DataError(f"{path}:{lineno}: coordinate outside [0, 1]")
        if cls < 0 or (num_classes is not None and cls >= num_classes):
            raise DataError(f"{path}:{lineno}: unknown class id {cls}")
        labels.append(Label(cls, cx, cy, w, h))
    return labels


def format_labels(labels: Sequence[Label]) -> str:
    return "".join(f"{lb.class_id} {lb.cx!r} {lb.cy!r} {lb.w!r} {lb.h!r}\n" for lb in labels)


def load_yolo_labels(manifest_path: str | Path, num_classes: int | None = None,
                     exclude_classes: Sequence[int] = ()) -> list[LabeledImage]:
    """Load every ``image_path<TAB>label_path`` entry of a manifest.

    Relative paths resolve against the manifest's directory. Labels of
    ``exclude_classes`` are dropped after validation.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{manifest_path}:{lineno}: expected 'image_path<TAB>label_path'")
        img_path, lbl_path = (base / p.strip() for p in parts)
        width, height = read_pnm_size(img_path)
        labels = [lb for lb in parse_label_file(lbl_path, num_classes) if lb.class_id not in exclude_classes]
        images.append(LabeledImage(len(images), str(img_path), width, height, labels))
    return images


def write_manifest(path: str | Path, entries: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{img}\t{lbl}\n" for img, lbl in entries))


# --- letterbox --------------------------------------------------------------

class LetterboxTransform(NamedTuple):
    scale: float
    pad_x: int
    pad_y: int

    def forward_box(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.x1 * s + self.pad_x, box.y1 * s + self.pad_y,
                    box.x2 * s + self.pad_x, box.y2 * s + self.pad_y)

    def inverse_box(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x1 - self.pad_x) / s, (box.y1 - self.pad_y) / s,
                    (box.x2 - self.pad_x) / s, (box.y2 - self.pad_y) / s)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) array."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(DTYPE)


def letterbox(image: np.ndarray, target: int = 640) -> tuple[np.ndarray, float, int, int]:
    """Scale the long side to ``target`` and pad the short side symmetrically with gray.

    Accepts (C, H, W) or (1, C, H, W); returns a (1, C, target, target) tensor
    plus ``scale, pad_x, pad_y`` (left/top padding in pixels).
    """
    if target % 32:
        raise DataError(f"letterbox target {target} must be divisible by 32")
    img = image[0] if image.ndim == 4 else image
    c, h, w = img.shape
    if h == 0 or w == 0:
        raise DataError("cannot letterbox an empty image")
    scale = target / max(h, w)
    new_h, new_w = min(target, round(h * scale)), min(target, round(w * scale))
    resized = img if (new_h, new_w) == (h, w) else resize_bilinear(img, new_h, new_w)
    pad_y, pad_x = (target - new_h) // 2, (target - new_w) // 2
    out = np.full((1, c, target, target), LETTERBOX_FILL, dtype=DTYPE)
    out[0, :, pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    return out, scale, pad_x, pad_y


# --- split & stats ------------------------------------------------------------

def split_dataset(images: Sequence, ratio: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first ``round(ratio * n)`` items form the train set."""
    if not 0 < ratio < 1:
        raise DataError("ratio must lie in (0, 1)")
    if not images:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(images))
    n_train = round(ratio * len(images))
    return [images[i] for i in order[:n_train]], [images[i] for i in order[n_train:]]


@dataclass
class DatasetStats:
    class_counts: dict[int, int]
    location_points: list[tuple[float, float]]
    size_points: list[tuple[float, float]]

    def write_csvs(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, header, rows in (
            ("class_counts.csv", ("class_id", "count"), sorted(self.class_counts.items())),
            ("locations.csv", ("cx", "cy"), self.location_points),
            ("sizes.csv", ("w", "h"), self.size_points),
        ):
            with open(out / name, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(header)
                wr.writerows(rows)


def dataset_stats(images: Sequence[LabeledImage]) -> DatasetStats:
    counts: Counter = Counter()
    locs, sizes = [], []
    for img in sorted(images, key=lambda im: im.image_id):
        for lb in img.labels:
            counts[lb.class_id] += 1
            locs.append((lb.cx, lb.cy))
            sizes.append((lb.w, lb.h))
    return DatasetStats(dict(sorted(counts.items())), locs, sizes)


def wh_pixels(images: Sequence[LabeledImage], img_size: int = 640) -> np.ndarray:
    """Label sizes in letterboxed pixels, the unit anchors are clustered in."""
    rows = []
    for img in images:
        scale = img_size / max(img.width, img.height)
        rows.extend((lb.w * img.width * scale, lb.h * img.height * scale) for lb in img.labels)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
    return arr[(arr > 0).all(axis=1)]


# --- synthetic fixtures -------------------------------------------------------

SYNTH_MAX_CLASSES = 10
SYNTH_MAX_SHAPES = 8
_NOISE_MAX = 80


def shape_color(class_id: int, instance: int) -> tuple[int, int, int]:
    """Unique color per (class, instance); never produced by the background noise."""
    return 150 + 10 * class_id, 150 + 10 * instance, 255


def synth_fixture_generate(n_images: int, num_classes: int, seed: int, out_dir: str | Path,
                           width: int = 64, height: int = 48, max_shapes: int = 4) -> Path:
    """Render rectangles on noise and write PPM images, YOLO labels and a manifest.

    Each label exactly bounds its rectangle's pixels. Returns the manifest path.
    """
    if n_images < 1:
        raise DataError("n_images must be >= 1")
    if not 1 <= num_classes <= SYNTH_MAX_CLASSES:
        raise DataError(f"num_classes must be in [1, {SYNTH_MAX_CLASSES}]")
    if not 1 <= max_shapes <= SYNTH_MAX_SHAPES:
        raise DataError(f"max_shapes must be in [1, {SYNTH_MAX_SHAPES}]")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        pixels = rng.integers(0, _NOISE_MAX + 1, size=(height, width, 3), dtype=np.uint8)
        occupied = np.zeros((height, width), dtype=bool)
        labels = []
        for _ in range(int(rng.integers(1, max_shapes + 1))):
            for _attempt in range(20):
                bw = int(rng.integers(3, max(4, width // 2)))
                bh = int(rng.integers(3, max(4, height // 2)))
                x0 = int(rng.integers(0, width - bw + 1))
                y0 = int(rng.integers(0, height - bh + 1))
                # one-pixel margin keeps shapes from touching
                if occupied[max(0, y0 - 1):y0 + bh + 1, max(0, x0 - 1):x0 + bw + 1].any():
                    continue
                cls = int(rng.integers(num_classes))
                occupied[y0:y0 + bh, x0:x0 + bw] = True
                pixels[y0:y0 + bh, x0:x0 + bw] = shape_color(cls, len(labels))
                labels.append(Label(cls, (x0 + bw / 2) / width, (y0 + bh / 2) / height, bw / width, bh / height))
                break
        stem = f"{i:06d}"
        write_pnm(out / "images" / f"{stem}.ppm", pixels)
        (out / "labels" / f"{stem}.txt").write_text(format_labels(labels))
        entries.append((f"images/{stem}.ppm", f"labels/{stem}.txt"))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def measure_shapes(pixels: np.ndarray) -> dict[tuple[int, int], BBox]:
    """Recover rectangle extents from a synthetic (H, W, 3) uint8 image, keyed by (class, instance)."""
    found = {}
    mask = pixels[..., 2] == 255
    for r, g in sorted(set(zip(pixels[..., 0][mask].tolist(), pixels[..., 1][mask].tolist()))):
        ys, xs = np.nonzero(mask & (pixels[..., 0] == r) & (pixels[..., 1] == g))
        found[((r - 150) // 10, (g - 150) // 10)] = BBox(float(xs.min()), float(ys.min()),
                                                        float(xs.max() + 1), float(ys.max() + 1))
    return found
