"""Dataset ingestion and on-disk formats.

Dataset layout (MVTec style)::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png            # "good" holds normal test images
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png

Binary formats are little-endian with a versioned 8-byte magic.

Float map (``.fmap``)::

    b"CVADFMAP" | u32 version | u32 rank | u32 dims[rank] | f32 data (row-major)

Cost volume (``.cvol``)::

    b"CVADCVOL" | u32 version | u32 DN | u32 L | u32 H | u32 W | u32 trimmed | u32 K
    | f32 data, shape (K if trimmed else DN, L, H, W), row-major

``scores.csv`` columns: image_id, category, raw_score, fused_score,
normalized_score, label (empty when unknown).
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ShapeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
FMAP_MAGIC = b"CVADFMAP"
CVOL_MAGIC = b"CVADCVOL"
FORMAT_VERSION = 1
SCORE_COLUMNS = ["image_id", "category", "raw_score", "fused_score", "normalized_score", "label"]


# --- images -----------------------------------------------------------------------------


def load_image(path, target_size: tuple[int, int] | None = (256, 256)) -> np.ndarray:
    """RGB image as a ``(3, H, W)`` float array in [0, 1], bilinearly resized."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if target_size is not None and im.size != (target_size[1], target_size[0]):
                im = im.resize((target_size[1], target_size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def load_mask(path, target_size: tuple[int, int] | None = (256, 256)) -> np.ndarray:
    """Binary ``(H, W)`` uint8 mask; nearest-neighbour resize, threshold 0.5."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if target_size is not None and im.size != (target_size[1], target_size[0]):
                im = im.resize((target_size[1], target_size[0]), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 0.5).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Write a ``(3, H, W)`` or ``(H, W)`` array in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def save_heatmap(path, anomaly_map: np.ndarray) -> None:
    """8-bit false-colour rendering of a map in [0, 1]."""
    from matplotlib import colormaps

    rgba = colormaps["jet"](np.clip(anomaly_map, 0.0, 1.0))
    save_image(path, rgba[..., :3].transpose(2, 0, 1))


# --- dataset index ----------------------------------------------------------------------


@dataclass
class TestImage:
    path: Path
    defect: str
    mask_path: Path | None

    @property
    def is_anomalous(self) -> bool:
        return self.defect != "good"

    @property
    def image_id(self) -> str:
        return f"{self.defect}/{self.path.stem}"


@dataclass
class CategoryIndex:
    name: str
    train: list[Path] = field(default_factory=list)
    test: list[TestImage] = field(default_factory=list)
    missing_masks: list[Path] = field(default_factory=list)

    @property
    def num_anomalous(self) -> int:
        return sum(t.is_anomalous for t in self.test)


@dataclass
class DatasetIndex:
    root: Path
    categories: dict[str, CategoryIndex] = field(default_factory=dict)
    image_size: tuple[int, int] = (256, 256)

    @property
    def category_names(self) -> list[str]:
        return list(self.categories)

    def label_of(self, category: str) -> int:
        return self.category_names.index(category)

    def validation_report(self) -> list[str]:
        return [f"{c.name}: missing mask for {p}" for c in self.categories.values() for p in c.missing_masks]


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root, image_size: tuple[int, int] = (256, 256)) -> DatasetIndex:
    """Index an MVTec-style directory tree. Missing masks are reported, not fatal."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    index = DatasetIndex(root, image_size=tuple(image_size))
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cat = CategoryIndex(cat_dir.name, train=_images_in(cat_dir / "train" / "good"))
        test_root = cat_dir / "test"
        if test_root.is_dir():
            for defect_dir in sorted(p for p in test_root.iterdir() if p.is_dir()):
                for img in _images_in(defect_dir):
                    mask = None
                    if defect_dir.name != "good":
                        gt_dir = cat_dir / "ground_truth" / defect_dir.name
                        hits = [p for p in _images_in(gt_dir) if p.stem == f"{img.stem}_mask"]
                        mask = hits[0] if hits else None
                        if mask is None:
                            cat.missing_masks.append(img)
                    cat.test.append(TestImage(img, defect_dir.name, mask))
        if not cat.train and not cat.test:
            continue
        index.categories[cat.name] = cat
    if not index.categories:
        log.warning("scan_dataset: no categories found under %s", root)
    for line in index.validation_report():
        log.warning(line)
    return index


# --- binary formats ---------------------------------------------------------------------


def write_float_map(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_float_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != FMAP_MAGIC:
            raise ValueError(f"{path} is not a float-map file")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported float-map version {version}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ShapeError(f"{path}: payload holds {data.size} values, header says {dims}")
    return data.reshape(dims).astype(np.float32)


def write_volume(path, volume) -> None:
    vals = np.ascontiguousarray(volume.values, dtype="<f4")
    _, L, H, W = vals.shape
    DN = volume.D * volume.N
    K = volume.K if volume.trimmed else DN
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CVOL_MAGIC)
        fh.write(struct.pack("<7I", FORMAT_VERSION, DN, L, H, W, int(volume.trimmed), K))
        fh.write(vals.tobytes())


def read_volume(path):
    from .costvol import AnomalyCostVolume

    with open(path, "rb") as fh:
        if fh.read(8) != CVOL_MAGIC:
            raise ValueError(f"{path} is not a cost-volume file")
        version, DN, L, H, W, trimmed, K = struct.unpack("<7I", fh.read(28))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported cost-volume version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    M = K if trimmed else DN
    if data.size != M * L * H * W:
        raise ShapeError(f"{path}: payload size {data.size} does not match header")
    D = H * W
    return AnomalyCostVolume(data.reshape(M, L, H, W).astype(np.float32), D=D, N=DN // D,
                             trimmed=bool(trimmed), K=K if trimmed else None)


# --- scores.csv -------------------------------------------------------------------------


def write_scores(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = {k: row.get(k, "") for k in SCORE_COLUMNS}
            if out["label"] is None:
                out["label"] = ""
            writer.writerow(out)


def read_scores(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            for key in ("raw_score", "fused_score", "normalized_score"):
                row[key] = float(row[key]) if row[key] != "" else float("nan")
            row["label"] = int(row["label"]) if row["label"] != "" else None
            rows.append(row)
    return rows
