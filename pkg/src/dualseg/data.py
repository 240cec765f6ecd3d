"""Synthetic volumetric cases, their on-disk format, cropping and splits.

Every case draws from its own Philox stream keyed by ``(seed, case_index)`` so
serial and parallel generation produce identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import IGNORE, LabelMask, Volume

FORMAT_VERSION = 1
STYLES = ("smooth-blob", "multi-lobe")
FG_MIN, FG_MAX = 0.005, 0.40
MAX_RESAMPLES = 100


class FormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    num_cases: int = 40
    volume_shape: tuple = (64, 64, 48)
    organ_style: str = "multi-lobe"
    noise_sigma: float = 0.6
    blur_sigma: float = 1.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.num_cases < 1:
            raise ValueError("num_cases must be >= 1")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 16:
            raise ValueError(f"volume_shape must be 3 axes each >= 16, got {self.volume_shape}")
        if self.organ_style not in STYLES:
            raise ValueError(f"organ_style must be one of {STYLES}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")


@dataclass
class Case:
    id: str
    volume: Volume
    label: LabelMask

    def __eq__(self, other):
        return (
            isinstance(other, Case)
            and self.id == other.id
            and self.volume.spacing == other.volume.spacing
            and np.array_equal(self.volume.data, other.volume.data)
            and self.volume.data.dtype == other.volume.data.dtype
            and np.array_equal(self.label.data, other.label.data)
        )

    @property
    def foreground_fraction(self) -> float:
        return float(np.mean(self.label.data == 1))


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])))


def _ellipsoid(grid, center, radii, rot):
    # grid: (3, H, W, D) voxel coords
    d = np.tensordot(rot.T, grid - center[:, None, None, None], axes=1)
    return np.sum((d / radii[:, None, None, None]) ** 2, axis=0)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ]
    )


def _draw_label(rng, shape, style):
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    shape_arr = np.array(shape, dtype=np.float64)
    center = shape_arr * rng.uniform(0.35, 0.65, size=3)
    if style == "smooth-blob":
        radii = shape_arr * rng.uniform(0.15, 0.28, size=3)
        return _ellipsoid(grid, center, radii, _random_rotation(rng)) <= 1.0
    mask = np.zeros(shape, dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        c = center + shape_arr * rng.uniform(-0.15, 0.15, size=3)
        radii = shape_arr * rng.uniform(0.10, 0.20, size=3)
        mask |= _ellipsoid(grid, c, radii, _random_rotation(rng)) <= 1.0
    # ragged boundary: perturb with smoothed noise then re-threshold
    wobble = ndimage.gaussian_filter(rng.normal(size=shape), 2.0)
    wobble /= wobble.std() + 1e-12
    dist_in = ndimage.distance_transform_edt(mask)
    dist_out = ndimage.distance_transform_edt(~mask)
    signed = dist_in - dist_out
    return signed + 1.2 * wobble > 0


def generate_case(spec: DatasetSpec, index: int) -> Case:
    rng = case_rng(spec.seed, index)
    for _ in range(MAX_RESAMPLES):
        label = _draw_label(rng, spec.volume_shape, spec.organ_style)
        frac = label.mean()
        if FG_MIN <= frac <= FG_MAX:
            break
    else:
        raise GenerationError(
            f"case {index}: foreground fraction outside [{FG_MIN}, {FG_MAX}] after {MAX_RESAMPLES} resamples"
        )
    img = label.astype(np.float64)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma)
    img = (img - img.mean()) / (img.std() + 1e-12)
    return Case(
        id=f"case_{index:03d}",
        volume=Volume(img.astype(np.float32), spec.spacing),
        label=LabelMask(label.astype(np.uint8), num_classes=2),
    )


def generate_dataset(spec: DatasetSpec) -> list[Case]:
    return [generate_case(spec, i) for i in range(spec.num_cases)]


def save_case(case: Case, root) -> Path:
    """Write ``<id>.json`` header plus raw ``.vol`` (f32-le) and ``.lbl`` (uint8) payloads."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vol = np.ascontiguousarray(case.volume.data, dtype="<f4")
    header = {
        "format_version": FORMAT_VERSION,
        "id": case.id,
        "shape": list(vol.shape),
        "spacing": list(case.volume.spacing),
        "dtype": "f32-le",
        "has_label": case.label is not None,
        "num_classes": case.label.num_classes if case.label is not None else None,
    }
    (root / f"{case.id}.vol").write_bytes(vol.tobytes())
    if case.label is not None:
        (root / f"{case.id}.lbl").write_bytes(np.ascontiguousarray(case.label.data, dtype=np.uint8).tobytes())
    path = root / f"{case.id}.json"
    path.write_text(json.dumps(header, indent=1) + "\n")
    return path


def load_case(path) -> Case:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    for key in ("format_version", "shape", "spacing", "dtype", "has_label"):
        if key not in header:
            raise FormatError(f"{path}: header missing field {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header['format_version']}")
    if header["dtype"] != "f32-le":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n > 0 for n in shape)):
        raise FormatError(f"{path}: field 'shape' must be three positive ints, got {shape!r}")
    spacing = header["spacing"]
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"{path}: field 'spacing' must have three entries")
    n = math.prod(shape)
    case_id = header.get("id", path.stem)
    raw = (path.parent / f"{path.stem}.vol").read_bytes()
    if len(raw) != 4 * n:
        kind = "truncated" if len(raw) < 4 * n else "oversized"
        raise FormatError(f"{path}: volume payload {kind}: expected {4 * n} bytes for shape {shape}, got {len(raw)}")
    vol = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    label = None
    if header["has_label"]:
        lraw = (path.parent / f"{path.stem}.lbl").read_bytes()
        if len(lraw) != n:
            kind = "truncated" if len(lraw) < n else "oversized"
            raise FormatError(f"{path}: label payload {kind}: expected {n} bytes for shape {shape}, got {len(lraw)}")
        ldata = np.frombuffer(lraw, dtype=np.uint8).reshape(shape).copy()
        label = LabelMask(ldata, num_classes=header.get("num_classes") or 2)
    return Case(id=case_id, volume=Volume(vol, tuple(spacing)), label=label)


def save_dataset(cases, root, spec: DatasetSpec | None = None) -> Path:
    root = Path(root)
    for c in cases:
        save_case(c, root)
    index = {"case_ids": [c.id for c in cases]}
    if spec is not None:
        index["spec"] = asdict(spec)
    (root / "dataset.json").write_text(json.dumps(index, indent=1) + "\n")
    return root


def load_dataset(root) -> list[Case]:
    root = Path(root)
    index_path = root / "dataset.json"
    if index_path.exists():
        ids = json.loads(index_path.read_text())["case_ids"]
    else:
        ids = sorted(p.stem for p in root.glob("*.json"))
    return [load_case(root / f"{i}.json") for i in ids]


def crop_offset(shape, crop_shape, rng: np.random.Generator) -> tuple:
    for axis, (n, c) in enumerate(zip(shape, crop_shape)):
        if c > n:
            raise ValueError(f"crop {tuple(crop_shape)} larger than volume {tuple(shape)} on axis {axis}")
    return tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(shape, crop_shape))


def crop_at(case: Case, offset, crop_shape) -> Case:
    sl = tuple(slice(o, o + c) for o, c in zip(offset, crop_shape))
    label = None
    if case.label is not None:
        label = LabelMask(case.label.data[sl].copy(), case.label.num_classes)
    return Case(case.id, Volume(case.volume.data[sl].copy(), case.volume.spacing), label)


def random_crop(case: Case, crop_shape, rng: np.random.Generator) -> Case:
    crop_shape = tuple(int(c) for c in crop_shape)
    return crop_at(case, crop_offset(case.volume.shape, crop_shape, rng), crop_shape)


@dataclass
class SplitManifest:
    labeled_ids: list
    unlabeled_ids: list
    labeled_ratio: float
    test_ids: list = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "SplitManifest":
        return cls(**d)


def make_split(ids, labeled_ratio: float, seed: int) -> SplitManifest:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0 < labeled_ratio <= 1:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 1]))).permutation(len(ids))
    # small epsilon so 0.1 * 80 lands on 8 rather than 7.999...
    n_lab = math.floor(labeled_ratio * len(ids) + 1e-9)
    shuffled = [ids[i] for i in order]
    return SplitManifest(sorted(shuffled[:n_lab]), sorted(shuffled[n_lab:]), float(labeled_ratio))


def make_train_test_split(ids, labeled_ratio: float, test_fraction: float, seed: int) -> SplitManifest:
    """Hold out ``test_fraction`` of the cases, then split the rest labeled/unlabeled."""
    ids = list(ids)
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0]))).permutation(len(ids))
    n_test = math.floor(test_fraction * len(ids) + 1e-9)
    test = sorted(ids[i] for i in order[:n_test])
    train = [ids[i] for i in sorted(order[n_test:])]
    split = make_split(train, labeled_ratio, seed)
    split.test_ids = test
    return split

