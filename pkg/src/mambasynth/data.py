"""Dataset representation, the raw tensor file format, and phantom fixtures.

Dataset layout on disk::

    root/
      manifest.txt                      key = value lines (see below)
      train/<subject>/<modality>_<index>.raw
      val/...
      test/...

Raw tensor files (byte-exact layout in docs/formats.md)::

    bytes 0..7   magic b"RAWTNSR1"
    u32          version (1), little-endian
    u32          dtype code: 1 = float32, 2 = float64
    u32          ndim
    u64 * ndim   extents
    payload      little-endian row-major elements

Images are stored in their native intensity range; the manifest records each
modality's (lo, hi) range and loading normalizes to [-1, 1].
"""

from __future__ import annotations

import hashlib
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "RAW_MAGIC",
    "write_raw_tensor",
    "read_raw_tensor",
    "TaskSpec",
    "parse_task",
    "DatasetManifest",
    "PairedSample",
    "normalize",
    "denormalize",
    "load_dataset",
    "dataset_content_hash",
    "generate_phantoms",
    "write_phantom_dataset",
    "sample_arrays",
]

RAW_MAGIC = b"RAWTNSR1"
RAW_VERSION = 1
_DTYPE_TO_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


# -- raw tensor files -----------------------------------------------------------


def write_raw_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}; use float32/float64")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<II", RAW_VERSION, code))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_raw_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != RAW_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:8]!r}")
    version, code = struct.unpack_from("<II", blob, 8)
    if version != RAW_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise DataError(f"{path}: unknown dtype code {code}")
    (ndim,) = struct.unpack_from("<I", blob, 16)
    extents = struct.unpack_from(f"<{ndim}Q", blob, 20)
    offset = 20 + 8 * ndim
    count = int(np.prod(extents)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"{path}: payload length {len(blob) - offset}, expected {expected - offset}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(extents).copy()


# -- tasks and manifests ----------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    sources: tuple[str, ...]
    target: str

    def __post_init__(self):
        if not self.sources:
            raise DataError("task needs at least one source modality")
        if self.target in self.sources:
            raise DataError(f"target '{self.target}' cannot also be a source")

    def modalities(self) -> tuple[str, ...]:
        return self.sources + (self.target,)

    def __str__(self) -> str:
        return ",".join(self.sources) + "->" + self.target


def parse_task(text: str) -> TaskSpec:
    m = re.fullmatch(r"([\w,]+)->(\w+)", text.strip())
    if not m:
        raise DataError(f"cannot parse task '{text}'; expected like 'T1,T2->PD'")
    sources = tuple(s for s in m.group(1).split(",") if s)
    return TaskSpec(sources=sources, target=m.group(2))


@dataclass
class DatasetManifest:
    modalities: list[str]
    ranges: dict[str, tuple[float, float]]
    counts: dict[str, int] = field(default_factory=dict)
    content_hash: str = ""

    def write(self, path) -> None:
        lines = [f"modalities = {','.join(self.modalities)}"]
        for mod in self.modalities:
            lo, hi = self.ranges[mod]
            lines.append(f"range.{mod} = {lo!r},{hi!r}")
        for split, count in sorted(self.counts.items()):
            lines.append(f"count.{split} = {count}")
        if self.content_hash:
            lines.append(f"hash = {self.content_hash}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def read(path) -> "DatasetManifest":
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        if "modalities" not in kv:
            raise DataError(f"{path}: manifest missing 'modalities'")
        modalities = kv["modalities"].split(",")
        ranges = {}
        for mod in modalities:
            raw = kv.get(f"range.{mod}")
            if raw is None:
                raise DataError(f"{path}: manifest missing range for '{mod}'")
            lo, hi = (float(v) for v in raw.split(","))
            if hi <= lo:
                raise DataError(f"{path}: empty range for '{mod}'")
            ranges[mod] = (lo, hi)
        counts = {
            key.split(".", 1)[1]: int(val)
            for key, val in kv.items()
            if key.startswith("count.")
        }
        return DatasetManifest(modalities, ranges, counts, kv.get("hash", ""))


def normalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (2.0 * (x - lo) / (hi - lo) - 1.0).astype(np.float32)


def denormalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo


@dataclass
class PairedSample:
    subject: str
    index: int
    images: dict[str, np.ndarray]  # modality -> (H, W), normalized to [-1, 1]


def sample_arrays(sample: PairedSample, task: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """(sources stacked (I, H, W), target (1, H, W)) in normalized intensities."""
    x = np.stack([sample.images[m] for m in task.sources], axis=0)
    y = sample.images[task.target][None]
    return x, y


_FILE_RE = re.compile(r"(?P<mod>\w+?)_(?P<idx>\d+)\.raw$")


def load_dataset(root, task: TaskSpec, split: str) -> tuple[list[PairedSample], DatasetManifest]:
    """Deterministically ordered (subject, slice-index) sample list.

    Every task modality must be present for every sample; intensities are
    normalized to [-1, 1] using the manifest ranges.
    """
    root = Path(root)
    if split not in _SPLITS:
        raise DataError(f"split must be one of {_SPLITS}, got '{split}'")
    manifest = DatasetManifest.read(root / "manifest.txt")
    for mod in task.modalities():
        if mod not in manifest.ranges:
            raise DataError(f"task modality '{mod}' not in dataset manifest")
    split_dir = root / split
    if not split_dir.is_dir() or not any(split_dir.iterdir()):
        warnings.warn(f"split directory {split_dir} is empty", stacklevel=2)
        return [], manifest
    samples = []
    problems = []
    for subject_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        by_index: dict[int, dict[str, Path]] = {}
        for f in subject_dir.iterdir():
            m = _FILE_RE.fullmatch(f.name)
            if m:
                by_index.setdefault(int(m.group("idx")), {})[m.group("mod")] = f
        for idx in sorted(by_index):
            files = by_index[idx]
            missing = [m for m in task.modalities() if m not in files]
            if missing:
                problems.append(f"{subject_dir.name}/{idx}: missing {','.join(missing)}")
                continue
            images = {}
            shapes = {}
            for mod in task.modalities():
                arr = read_raw_tensor(files[mod])
                if arr.ndim != 2:
                    problems.append(f"{subject_dir.name}/{idx}/{mod}: not 2-D")
                    break
                lo, hi = manifest.ranges[mod]
                images[mod] = normalize(arr, lo, hi)
                shapes[mod] = arr.shape
            else:
                if len(set(shapes.values())) != 1:
                    problems.append(f"{subject_dir.name}/{idx}: extents differ {shapes}")
                    continue
                samples.append(PairedSample(subject_dir.name, idx, images))
    if problems:
        raise DataError("dataset problems:\n  " + "\n  ".join(problems))
    return samples, manifest


def dataset_content_hash(root, splits=_SPLITS) -> str:
    root = Path(root)
    digest = hashlib.sha256()
    for split in splits:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for f in sorted(split_dir.rglob("*.raw")):
            digest.update(str(f.relative_to(root)).encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


# -- phantom fixtures ---------------------------------------------------------------

# per-class intensity palettes: the target is a fixed nonlinear remap of the
# tissue classes, so source -> target is deterministic and learnable
_SRC_LEVELS = np.array([0.0, 0.20, 0.40, 0.60, 0.80, 1.00])
_TGT_LEVELS = np.array([0.0, 0.85, 0.30, 1.00, 0.55, 0.12])
PHANTOM_RANGE = (0.0, 1.0)
PHANTOM_SOURCE = "A"
PHANTOM_TARGET = "B"


_SUPERSAMPLE = 4  # ellipse masks rendered at 4x and box-filtered: band-limited edges


def _phantom_pair(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = _SUPERSAMPLE
    hh, ww = h * s, w * s
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    yy = (yy + 0.5) / s
    xx = (xx + 0.5) / s
    tissue = np.zeros((hh, ww), dtype=np.int64)
    for _ in range(int(rng.integers(5, 9))):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        ry = rng.uniform(0.10, 0.32) * h
        rx = rng.uniform(0.10, 0.32) * w
        theta = rng.uniform(0, np.pi)
        cls = int(rng.integers(1, 6))
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        tissue[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = cls

    def pool(img):
        return img.reshape(h, s, w, s).mean(axis=(1, 3))

    source_hi = _SRC_LEVELS[tissue]
    target_hi = _TGT_LEVELS[tissue]
    mask = pool((tissue > 0).astype(np.float64)) > 0
    src = pool(source_hi)
    tgt = pool(target_hi)
    cy, cx = np.mgrid[0:h, 0:w].astype(np.float64)
    fy, fx = rng.uniform(0.5, 1.5, 2)
    py, px = rng.uniform(0, np.pi, 2)
    bias = 1.0 + 0.08 * np.cos(np.pi * fy * cy / h + py) * np.cos(np.pi * fx * cx / w + px)
    noise = rng.normal(0.0, 0.01, (h, w))
    source = np.where(mask, np.clip(src * bias + noise, 0.004, 1.0), 0.0)
    target = np.where(mask, tgt, 0.0)
    return source.astype(np.float32), target.astype(np.float32)


def generate_phantoms(n: int, size: tuple[int, int], seed: int,
                      start_index: int = 0) -> list[PairedSample]:
    """Deterministic paired phantoms, already normalized to [-1, 1].

    Sample ``i`` depends only on (seed, start_index + i), so splits drawn
    with disjoint index ranges never overlap.
    """
    h, w = size
    if h % 4 or w % 4:
        raise DataError(f"phantom extents {size} must be divisible by 4")
    lo, hi = PHANTOM_RANGE
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, start_index + i]))
        src, tgt = _phantom_pair(h, w, rng)
        samples.append(
            PairedSample(
                subject=f"phantom{(start_index + i):03d}",
                index=0,
                images={
                    PHANTOM_SOURCE: normalize(src, lo, hi),
                    PHANTOM_TARGET: normalize(tgt, lo, hi),
                },
            )
        )
    return samples


def write_phantom_dataset(root, counts: dict[str, int], size: tuple[int, int],
                          seed: int) -> DatasetManifest:
    """Write a phantom dataset tree in the documented layout with a manifest."""
    root = Path(root)
    lo, hi = PHANTOM_RANGE
    start = 0
    for split in _SPLITS:
        n = counts.get(split, 0)
        for sample in generate_phantoms(n, size, seed, start_index=start):
            subj_dir = root / split / sample.subject
            for mod, img in sample.images.items():
                # store native intensities, not the normalized view
                write_raw_tensor(subj_dir / f"{mod}_0000.raw",
                                 denormalize(img, lo, hi).astype(np.float32))
        start += n
    manifest = DatasetManifest(
        modalities=[PHANTOM_SOURCE, PHANTOM_TARGET],
        ranges={PHANTOM_SOURCE: PHANTOM_RANGE, PHANTOM_TARGET: PHANTOM_RANGE},
        counts={s: counts.get(s, 0) for s in _SPLITS if counts.get(s, 0)},
    )
    manifest.content_hash = dataset_content_hash(root)
    manifest.write(root / "manifest.txt")
    return manifest
