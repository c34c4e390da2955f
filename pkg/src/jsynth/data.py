"""Phantom cohort synthesis, slice preprocessing, fold planning and volume files."""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VOLUME_MAGIC = b"MVOL"
_VOL_HEADER = struct.Struct("<4sIII")
MAX_VOXELS = 1 << 31
MODALITY_FILES = {"t1": "t1.mvol", "flair": "flair.mvol", "label": "label.mvol"}


class Modality(str, enum.Enum):
    T1 = "T1"
    FLAIR = "FLAIR"
    LABEL = "LABEL"
    SYNTH_FLAIR = "SYNTH_FLAIR"


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class DataValidationError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    modality: Modality = Modality.T1

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-D with every dim >= 1, got shape {self.voxels.shape}")
        if self.modality == Modality.LABEL and not np.all((self.voxels == 0) | (self.voxels == 1)):
            raise DataValidationError("LABEL volume holds values other than 0 and 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class Subject:
    id: str
    t1: Volume
    flair: Volume
    label: Volume

    def __post_init__(self):
        if not (self.t1.dims == self.flair.dims == self.label.dims):
            raise DataValidationError(
                f"subject {self.id}: dims differ (t1 {self.t1.dims}, flair {self.flair.dims}, "
                f"label {self.label.dims})"
            )


# ---------------------------------------------------------------- phantom


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_subjects: int = 12
    slices: int = 2
    size: tuple[int, int] = (64, 64)
    lesion_count: tuple[int, int] = (3, 7)
    lesion_radius: tuple[float, float] = (1.5, 4.0)
    faint_fraction: float = 0.4
    noise_sigma: float = 0.05
    flair_contrast: float = 0.6
    t1_contrast: float = 0.35
    mimic_count: tuple[int, int] = (0, 0)  # unlabeled spots: lesion-dark in T1, CSF-dark in FLAIR

    def validate(self, divisor: int = 1):
        if self.n_subjects < 1 or self.slices < 1:
            raise ValueError("n_subjects and slices must be >= 1")
        if self.size[0] % divisor or self.size[1] % divisor:
            raise ValueError(f"slice size {self.size} is not divisible by {divisor}")
        if not 0.0 <= self.faint_fraction <= 1.0:
            raise ValueError(f"faint_fraction must lie in [0, 1], got {self.faint_fraction}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count range {self.lesion_count}")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ValueError(f"bad lesion_radius range {self.lesion_radius}")
        if self.mimic_count[0] < 0 or self.mimic_count[1] < self.mimic_count[0]:
            raise ValueError(f"bad mimic_count range {self.mimic_count}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# raw intensities per tissue: (T1, FLAIR)
_WM = (1.0, 0.55)
_GM = (0.65, 0.75)
_CSF = (0.25, 0.15)
_FLOOR = 0.01
_PLACEMENT_TRIES = 60


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return np.sqrt(u * u + v * v)


def _phantom_slice(spec: PhantomSpec, rng: np.random.Generator, gain: tuple[float, float]):
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    cx = w / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    ry, rx = rng.uniform(0.40, 0.45) * h, rng.uniform(0.33, 0.40) * w
    theta = np.arctan2(yy - cy, xx - cx)
    folds = 1.0 + 0.06 * np.sin(rng.integers(5, 9) * theta + rng.uniform(0, 2 * np.pi))
    r = _ellipse(yy, xx, cy, cx, ry, rx) * folds
    brain = r <= 1.0
    wm = r <= rng.uniform(0.72, 0.80)
    vent = _ellipse(yy, xx, cy + rng.uniform(-1, 1), cx, rng.uniform(0.16, 0.24) * ry,
                    rng.uniform(0.10, 0.16) * rx) <= 1.0

    t1 = np.zeros((h, w))
    fl = np.zeros((h, w))
    for mask, (a, b) in ((brain, _GM), (wm, _WM), (vent, _CSF)):
        t1[mask], fl[mask] = a, b

    label = np.zeros((h, w), dtype=bool)
    allowed = wm & ~vent
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        faint = rng.random() < spec.faint_fraction
        for _attempt in range(_PLACEMENT_TRIES):
            ly, lx = rng.uniform(0, h), rng.uniform(0, w)
            lr = rng.uniform(*spec.lesion_radius, size=2)
            les = _ellipse(yy, xx, ly, lx, lr[0], lr[1], rng.uniform(0, np.pi)) <= 1.0
            if les.any() and not (les & ~allowed).any():
                break
        else:
            log.debug("lesion placement failed after %d tries; skipped", _PLACEMENT_TRIES)
            continue
        t1[les] -= spec.t1_contrast / (10.0 if faint else 1.0)
        fl[les] += spec.flair_contrast
        label |= les

    if spec.mimic_count[1] > 0:
        for _ in range(int(rng.integers(spec.mimic_count[0], spec.mimic_count[1] + 1))):
            for _attempt in range(_PLACEMENT_TRIES):
                my, mx = rng.uniform(0, h), rng.uniform(0, w)
                mr = rng.uniform(1.0, 2.0)
                spot = _ellipse(yy, xx, my, mx, mr, mr) <= 1.0
                if spot.any() and not (spot & ~allowed).any() and not (spot & label).any():
                    t1[spot], fl[spot] = _WM[0] - spec.t1_contrast, _CSF[1]
                    break

    t1[brain] += rng.normal(0.0, spec.noise_sigma, size=brain.sum())
    fl[brain] += rng.normal(0.0, spec.noise_sigma, size=brain.sum())
    t1[brain] = np.maximum(t1[brain] * gain[0], _FLOOR)
    fl[brain] = np.maximum(fl[brain] * gain[1], _FLOOR)
    return t1, fl, label.astype(np.float64)


def generate_phantom(spec: PhantomSpec) -> list[Subject]:
    """Deterministic synthetic cohort.

    Each axial slice holds an elliptical brain with a grey-matter rim, white
    matter core and a dark central ventricle. White-matter lesions are bright
    in FLAIR and dark in T1; a ``faint_fraction`` of them get only a tenth of
    the T1 contrast. Optional unlabeled mimics are small round white-matter
    spots as dark in T1 as a lesion but dark in FLAIR too, like lacunes. Gaussian noise is
    added inside the brain only, so the background stays exactly zero.
    """
    spec.validate()
    root = np.random.default_rng(spec.seed)
    subjects = []
    for k in range(spec.n_subjects):
        rng = np.random.default_rng(root.integers(2 ** 63))
        gain = tuple(rng.uniform(0.9, 1.1, size=2))
        vols = [_phantom_slice(spec, rng, gain) for _ in range(spec.slices)]
        t1, fl, lab = (np.stack(v) for v in zip(*vols))
        subjects.append(Subject(
            id=f"sub{k:03d}",
            t1=Volume(t1, Modality.T1),
            flair=Volume(fl, Modality.FLAIR),
            label=Volume(lab, Modality.LABEL),
        ))
    return subjects


# ---------------------------------------------------------------- preprocessing


@dataclass(frozen=True)
class CropPadPlan:
    """Where an original slice sits inside the target frame.

    ``offset`` is the target coordinate of original row/col 0 along each axis
    (negative when the original was cropped).
    """

    original: tuple[int, int]
    target: tuple[int, int]
    offset: tuple[int, int]

    def _spans(self):
        spans = []
        for n, t, o in zip(self.original, self.target, self.offset):
            lo_t, hi_t = max(o, 0), min(o + n, t)
            spans.append((slice(lo_t, hi_t), slice(lo_t - o, hi_t - o)))
        return spans

    def apply(self, arr: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.target, fill, dtype=np.float64)
        (ty, oy), (tx, ox) = self._spans()
        out[ty, tx] = arr[oy, ox]
        return out

    def invert(self, arr: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.original, fill, dtype=np.float64)
        (ty, oy), (tx, ox) = self._spans()
        out[oy, ox] = arr[ty, tx]
        return out


def crop_pad_plan(shape: tuple[int, int], target: tuple[int, int]) -> CropPadPlan:
    if min(target) < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    # symmetric: the odd extra row/col lands bottom/right for both pad and crop
    offset = tuple((t - n) // 2 if t >= n else -((n - t) // 2) for n, t in zip(shape, target))
    return CropPadPlan(tuple(shape), tuple(target), offset)


def crop_or_pad(arr: np.ndarray, target: tuple[int, int]) -> tuple[np.ndarray, CropPadPlan]:
    """Center-crop or zero-pad a 2-D slice to ``target``; returns the slice and its plan."""
    arr = np.asarray(arr, dtype=np.float64)
    plan = crop_pad_plan(arr.shape, target)
    return plan.apply(arr), plan


def gaussian_normalize(volume: Volume) -> Volume:
    """z-score the nonzero (brain) voxels; background zeros stay zero.

    Uses the population standard deviation.
    """
    if volume.modality == Modality.LABEL:
        raise ValueError("label volumes are never normalized")
    v = volume.voxels
    support = v != 0
    vals = v[support]
    if vals.size < 2 or np.ptp(vals) == 0:
        raise DataValidationError("cannot normalize a volume whose brain support is constant")
    mu, sd = vals.mean(), vals.std()
    out = np.zeros_like(v)
    out[support] = (vals - mu) / sd
    return Volume(out, volume.modality)


def preprocess_subject(subject: Subject) -> Subject:
    return Subject(subject.id, gaussian_normalize(subject.t1), gaussian_normalize(subject.flair), subject.label)


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    fold: int
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def check(self, cohort) -> None:
        tr, va, te = set(self.train), set(self.val), set(self.test)
        if tr & va or tr & te or va & te:
            raise DataValidationError(f"fold {self.fold}: train/val/test overlap")
        if tr | va | te != set(cohort):
            raise DataValidationError(f"fold {self.fold}: sets do not cover the cohort")


def plan_folds(ids, n_folds: int, n_test: int, n_val: int, seed: int = 0) -> list[FoldPlan]:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if n_folds < 1 or n_test < 1 or n_folds * n_test != len(ids):
        raise ValueError(f"n_folds * n_test must equal the cohort size: {n_folds} * {n_test} != {len(ids)}")
    if not 0 <= n_val < len(ids) - n_test:
        raise ValueError(f"n_val={n_val} leaves no training subjects")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    plans = []
    for k in range(n_folds):
        test = order[k * n_test:(k + 1) * n_test]
        rest = order[:k * n_test] + order[(k + 1) * n_test:]
        pick = set(rng.choice(len(rest), size=n_val, replace=False).tolist())
        val = [rest[i] for i in sorted(pick)]
        train = [s for i, s in enumerate(rest) if i not in pick]
        plans.append(FoldPlan(k, train, val, test))
    for p in plans:
        p.check(ids)
    return plans


def write_fold_plans(plans, path) -> None:
    lines = [f"{p.fold},{role},{sid}" for p in plans
             for role, ids in (("train", p.train), ("val", p.val), ("test", p.test)) for sid in ids]
    Path(path).write_text("\n".join(lines) + "\n")


def read_fold_plans(path) -> list[FoldPlan]:
    plans: dict[int, FoldPlan] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        fold, role, sid = line.strip().split(",")
        if role not in ("train", "val", "test"):
            raise DataValidationError(f"unknown fold role {role!r}")
        getattr(plans.setdefault(int(fold), FoldPlan(int(fold))), role).append(sid)
    return [plans[k] for k in sorted(plans)]


# ---------------------------------------------------------------- volume files


def volume_bytes(volume: Volume) -> bytes:
    d, h, w = volume.dims
    return _VOL_HEADER.pack(VOLUME_MAGIC, d, h, w) + np.ascontiguousarray(volume.voxels, dtype="<f8").tobytes()


def parse_volume(blob: bytes, modality: Modality = Modality.T1) -> Volume:
    if len(blob) < _VOL_HEADER.size:
        raise TruncatedVolumeError(f"file holds {len(blob)} bytes, header needs {_VOL_HEADER.size}")
    magic, d, h, w = _VOL_HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    n = d * h * w
    if min(d, h, w) < 1 or n > MAX_VOXELS:
        raise DimensionOverflowError(f"unsupported dims {d}x{h}x{w}")
    need = _VOL_HEADER.size + 8 * n
    if len(blob) < need:
        raise TruncatedVolumeError(f"file holds {len(blob)} bytes, dims {d}x{h}x{w} need {need}")
    if len(blob) > need:
        raise VolumeFormatError(f"{len(blob) - need} trailing bytes after voxel data")
    vox = np.frombuffer(blob, dtype="<f8", offset=_VOL_HEADER.size).reshape(d, h, w).astype(np.float64)
    return Volume(vox, modality)


def write_volume(volume: Volume, path) -> None:
    Path(path).write_bytes(volume_bytes(volume))


def read_volume(path, modality: Modality = Modality.T1) -> Volume:
    return parse_volume(Path(path).read_bytes(), modality)


def write_dataset(subjects, root) -> None:
    root = Path(root)
    for s in subjects:
        d = root / s.id
        d.mkdir(parents=True, exist_ok=True)
        write_volume(s.t1, d / MODALITY_FILES["t1"])
        write_volume(s.flair, d / MODALITY_FILES["flair"])
        write_volume(s.label, d / MODALITY_FILES["label"])


def read_dataset(root) -> list[Subject]:
    root = Path(root)
    if not root.is_dir():
        raise DataValidationError(f"dataset root {root} does not exist")
    subjects = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [f for f in MODALITY_FILES.values() if not (d / f).is_file()]
        if missing:
            raise DataValidationError(f"subject {d.name}: missing {', '.join(missing)}")
        subjects.append(Subject(
            d.name,
            read_volume(d / MODALITY_FILES["t1"], Modality.T1),
            read_volume(d / MODALITY_FILES["flair"], Modality.FLAIR),
            read_volume(d / MODALITY_FILES["label"], Modality.LABEL),
        ))
    if not subjects:
        raise DataValidationError(f"dataset root {root} holds no subjects")
    return subjects
