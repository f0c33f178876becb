"""Dataset ingestion, palette class mapping, silo partitioning and synthetic data.

Images are ``uint8`` arrays of shape ``[H, W, C]`` (C = 1 or 3); class maps are
``int64`` arrays ``[H, W]``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .rng import SplitMix64, derive_seed


class DataError(ValueError):
    pass


class PPMError(DataError):
    pass


class UnknownColorError(DataError):
    pass


class CocoError(DataError):
    pass


class DanglingImageError(CocoError):
    pass


class DanglingCategoryError(CocoError):
    pass


class BadBoxError(CocoError):
    pass


# --------------------------------------------------------------------------
# PPM (P6, maxval 255)

_PPM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def load_ppm(data: bytes) -> np.ndarray:
    """Decode a binary P6 pixmap into a ``[H, W, 3]`` uint8 array."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise PPMError("malformed PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PPMError("non-numeric PPM header field") from None
    if width <= 0 or height <= 0:
        raise PPMError("PPM dimensions must be positive")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PPMError("missing whitespace after PPM header")
    pos += 1
    n = width * height * 3
    payload = data[pos : pos + n]
    if len(payload) != n:
        raise PPMError(f"truncated PPM payload: expected {n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise PPMError("write_ppm needs a [H, W, 3] uint8 array")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def read_ppm_file(path: str | Path) -> np.ndarray:
    return load_ppm(Path(path).read_bytes())


def write_ppm_file(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(write_ppm(image))


# --------------------------------------------------------------------------
# palettes


@dataclass(frozen=True, eq=False)
class Palette:
    names: tuple[str, ...]
    colors: np.ndarray  # [K, 3] uint8

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) != len(colors):
            raise DataError("palette names and colors differ in length")
        if len({tuple(c) for c in colors.tolist()}) != len(colors):
            raise DataError("palette colors must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Palette):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.colors, other.colors)

    __hash__ = None  # type: ignore[assignment]

    def to_text(self) -> str:
        return "".join(f"{n} {r} {g} {b}\n" for n, (r, g, b) in zip(self.names, self.colors.tolist()))

    @classmethod
    def from_text(cls, text: str) -> "Palette":
        names, colors = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"palette line {lineno}: expected 'name R G B'")
            rgb = [int(v) for v in parts[1:]]
            if any(not 0 <= v <= 255 for v in rgb):
                raise DataError(f"palette line {lineno}: channel out of range")
            names.append(parts[0])
            colors.append(rgb)
        return cls(tuple(names), np.array(colors, dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "Palette":
        return cls.from_text(Path(path).read_text())


def camvid_palette() -> Palette:
    """The 32-class CamVid palette shipped with the package."""
    return Palette.load(Path(__file__).with_name("palettes") / "camvid.txt")


_SYNTH_COLORS = [
    (0, 0, 0),
    (220, 40, 40),
    (40, 200, 60),
    (50, 80, 230),
    (230, 210, 40),
    (200, 60, 200),
    (40, 200, 200),
    (240, 140, 30),
]


def synthetic_palette(num_classes: int) -> Palette:
    colors = list(_SYNTH_COLORS[:num_classes])
    gen = SplitMix64(0xC0105)
    while len(colors) < num_classes:
        c = tuple(gen.below(256) for _ in range(3))
        if c not in colors:
            colors.append(c)
    names = ["background"] + [f"class{i}" for i in range(1, num_classes)]
    return Palette(tuple(names), np.array(colors, dtype=np.uint8))


# --------------------------------------------------------------------------
# class mapping


def _pack_rgb(pixels: np.ndarray) -> np.ndarray:
    p = pixels.astype(np.uint32)
    return (p[..., 0] << 16) | (p[..., 1] << 8) | p[..., 2]


def rgb_to_class(image: np.ndarray, palette: Palette, nearest: bool = False) -> np.ndarray:
    """Map every pixel's exact RGB to its palette index.

    Colors are packed into 24-bit keys and resolved through a dense 2**24
    lookup table (16 MiB for up to 255 classes). With ``nearest=True``
    unknown colors fall back to the closest palette entry in L2 distance
    instead of raising.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("rgb_to_class needs a 3-channel image")
    table_dtype = np.uint8 if len(palette) < 0xFF else np.uint16
    missing = np.iinfo(table_dtype).max
    table = np.full(1 << 24, missing, dtype=table_dtype)
    table[_pack_rgb(palette.colors)] = np.arange(len(palette), dtype=table_dtype)
    found = table[_pack_rgb(image)]
    hit = found != missing
    out = found.astype(np.int64)
    if not hit.all():
        if not nearest:
            y, x = (int(v) for v in np.argwhere(~hit)[0])
            rgb = tuple(int(v) for v in image[y, x])
            raise UnknownColorError(f"pixel (x={x}, y={y}) has RGB {rgb} not in palette")
        miss = ~hit
        d = ((image[miss][:, None, :].astype(np.int32) - palette.colors[None].astype(np.int32)) ** 2).sum(-1)
        out[miss] = d.argmin(axis=1)
    return out


def rgb_to_class_loop(image: np.ndarray, palette: Palette) -> np.ndarray:
    """Per-pixel reference mapping; slow, used as a test oracle."""
    lookup = {tuple(c): i for i, c in enumerate(palette.colors.tolist())}
    h, w, _ = image.shape
    out = np.zeros((h, w), dtype=np.int64)
    rows = image.tolist()
    for y in range(h):
        for x in range(w):
            key = tuple(rows[y][x])
            if key not in lookup:
                raise UnknownColorError(f"pixel (x={x}, y={y}) has RGB {key} not in palette")
            out[y, x] = lookup[key]
    return out


def class_to_rgb(class_map: np.ndarray, palette: Palette) -> np.ndarray:
    class_map = np.asarray(class_map)
    if class_map.size and (class_map.min() < 0 or class_map.max() >= len(palette)):
        raise DataError("class index outside palette")
    return palette.colors[class_map]


def class_to_onehot(class_map: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """One-hot planes ``[num_classes, H, W]``."""
    class_map = np.asarray(class_map)
    if class_map.size and (class_map.min() < 0 or class_map.max() >= num_classes):
        raise DataError("class index out of range")
    return (np.arange(num_classes)[:, None, None] == class_map[None]).astype(dtype)


# --------------------------------------------------------------------------
# COCO subset


@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CocoAnnotation:
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h
    segmentation: Any = None

    @property
    def corners(self) -> tuple[float, float, float, float]:
        x, y, w, h = self.bbox
        return (x, y, x + w, y + h)


@dataclass
class CocoAnnotationSet:
    images: list[CocoImage]
    annotations: list[CocoAnnotation]
    categories: dict[int, str]

    def image(self, image_id: int) -> CocoImage:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> list[CocoAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]


def parse_coco(raw: bytes | str) -> CocoAnnotationSet:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CocoError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CocoError("top-level JSON value must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise CocoError(f"missing or non-array field {key!r}")
    try:
        images = [
            CocoImage(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]))
            for im in doc["images"]
        ]
        categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CocoError(f"bad image or category entry: {exc}") from exc
    image_ids = {im.id for im in images}
    annotations = []
    for i, ann in enumerate(doc["annotations"]):
        try:
            image_id, category_id = int(ann["image_id"]), int(ann["category_id"])
            bbox = tuple(float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoError(f"annotation {i}: {exc}") from exc
        if image_id not in image_ids:
            raise DanglingImageError(f"annotation {i} references missing image id {image_id}")
        if category_id not in categories:
            raise DanglingCategoryError(f"annotation {i} references missing category id {category_id}")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise BadBoxError(f"annotation {i} has non-positive bbox size {bbox}")
        annotations.append(CocoAnnotation(image_id, category_id, bbox, ann.get("segmentation")))
    return CocoAnnotationSet(images, annotations, categories)


def rasterize_boxes(coco: CocoAnnotationSet, image_id: int) -> np.ndarray:
    """Box-filled class map for one image; class 0 is background, categories follow in id order."""
    im = coco.image(image_id)
    index = {cid: i + 1 for i, cid in enumerate(sorted(coco.categories))}
    out = np.zeros((im.height, im.width), dtype=np.int64)
    for ann in coco.annotations_for(image_id):
        x0, y0, x1, y1 = ann.corners
        xs = slice(max(0, int(np.floor(x0))), min(im.width, int(np.ceil(x1))))
        ys = slice(max(0, int(np.floor(y0))), min(im.height, int(np.ceil(y1))))
        out[ys, xs] = index[ann.category_id]
    return out


# --------------------------------------------------------------------------
# samples, silos, batches


@dataclass(frozen=True, eq=False)
class SegSample:
    image: np.ndarray  # [H, W, 3] uint8
    target: np.ndarray  # [H, W] int64

    def __post_init__(self):
        if self.image.shape[:2] != self.target.shape:
            raise DataError(f"image {self.image.shape[:2]} and target {self.target.shape} differ")


@dataclass(eq=False)
class Silo:
    id: int
    samples: list[SegSample]
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self, num_classes: int, dtype="float32") -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(images [N,3,H,W] scaled to [-1, 1], one-hot targets [N,K,H,W])``."""
        key = (num_classes, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = to_tensors(self.samples, num_classes, dtype)
        return self._cache[key]


def to_tensors(samples: Sequence[SegSample], num_classes: int, dtype="float32"):
    dtype = np.dtype(dtype)
    if not samples:
        raise DataError("no samples")
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).astype(dtype) / dtype.type(127.5) - dtype.type(1)
    targets = np.stack([class_to_onehot(s.target, num_classes, dtype) for s in samples])
    return np.ascontiguousarray(images), targets


def partition(samples: Sequence, n_silos: int, seed: int) -> list[Silo]:
    """Seeded shuffle followed by round-robin assignment to ``n_silos`` silos."""
    if n_silos < 1:
        raise ValueError("n_silos must be >= 1")
    order = list(range(len(samples)))
    SplitMix64(seed).shuffle(order)
    return [Silo(k, [samples[i] for i in order[k::n_silos]]) for k in range(n_silos)]


def batch_order(n: int, batch_size: int, epoch_seed: int) -> list[list[int]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(n))
    SplitMix64(epoch_seed).shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(silo: Silo, batch_size: int, epoch_seed: int) -> Iterator[list[SegSample]]:
    for idx in batch_order(len(silo), batch_size, epoch_seed):
        yield [silo.samples[i] for i in idx]


# --------------------------------------------------------------------------
# synthetic data


def generate_synthetic(n: int, width: int = 32, height: int = 32, num_classes: int = 4,
                       seed: int = 0, noise: int = 24) -> list[SegSample]:
    """Background plus 1-3 rectangles/discs of distinct foreground classes per sample."""
    palette = synthetic_palette(num_classes)
    yy, xx = np.mgrid[0:height, 0:width]
    out = []
    for i in range(n):
        gen = SplitMix64(derive_seed(seed, i))
        target = np.zeros((height, width), dtype=np.int64)
        fg = list(range(1, num_classes))
        gen.shuffle(fg)
        for cls in fg[: 1 + gen.below(min(3, len(fg)))]:
            if gen.below(2) == 0:
                w = max(1, width // 8 + gen.below(max(1, width // 2 - width // 8)))
                h = max(1, height // 8 + gen.below(max(1, height // 2 - height // 8)))
                x0, y0 = gen.below(width - w + 1), gen.below(height - h + 1)
                target[y0 : y0 + h, x0 : x0 + w] = cls
            else:
                lo = max(1, min(width, height) // 10)
                r = lo + gen.below(max(1, min(width, height) // 4 - lo + 1))
                cx, cy = gen.below(width), gen.below(height)
                target[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = cls
        jitter = np.floor(gen.random_array(height * width * 3) * (2 * noise + 1)).astype(np.int64) - noise
        pixels = palette.colors[target].astype(np.int64) + jitter.reshape(height, width, 3)
        out.append(SegSample(np.clip(pixels, 0, 255).astype(np.uint8), target))
    return out


def write_dataset(samples: Sequence[SegSample], directory: str | Path, palette: Palette) -> None:
    """Write ``img_0001.ppm`` / ``lbl_0001.ppm`` pairs plus ``palette.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "palette.txt").write_text(palette.to_text())
    for i, s in enumerate(samples, 1):
        write_ppm_file(d / f"img_{i:04d}.ppm", s.image)
        write_ppm_file(d / f"lbl_{i:04d}.ppm", class_to_rgb(s.target, palette))


def load_dataset(directory: str | Path, palette: Palette | None = None,
                 nearest: bool = False) -> tuple[list[SegSample], Palette]:
    """Read image/label PPM pairs; labels are palette-colored masks."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    if palette is None:
        pal_file = d / "palette.txt"
        palette = Palette.load(pal_file) if pal_file.exists() else camvid_palette()
    samples = []
    for img_path in sorted(d.glob("img_*.ppm")):
        lbl_path = d / ("lbl_" + img_path.name[4:])
        if not lbl_path.exists():
            raise DataError(f"missing label file for {img_path.name}")
        image = read_ppm_file(img_path)
        target = rgb_to_class(read_ppm_file(lbl_path), palette, nearest=nearest)
        samples.append(SegSample(image, target))
    if not samples:
        raise DataError(f"no img_*.ppm files in {d}")
    return samples, palette


def load_coco_dataset(json_path: str | Path) -> tuple[list[SegSample], Palette]:
    """COCO subset with PPM images next to the JSON; boxes become class regions."""
    json_path = Path(json_path)
    if not json_path.is_file():
        raise DataError(f"annotation file {json_path} does not exist")
    coco = parse_coco(json_path.read_bytes())
    samples = []
    for im in coco.images:
        image = read_ppm_file(json_path.parent / im.file_name)
        if image.shape[:2] != (im.height, im.width):
            raise DataError(f"{im.file_name}: size differs from annotation")
        samples.append(SegSample(image, rasterize_boxes(coco, im.id)))
    names = ["background"] + [coco.categories[c] for c in sorted(coco.categories)]
    base = synthetic_palette(len(names))
    return samples, Palette(tuple(names), base.colors)
