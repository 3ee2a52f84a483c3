"""Synthetic cases, preprocessing, slice streams, and on-disk containers.

Two slice families are generated: "tubes" (smooth bright curves, a vessel
stand-in) and "blobs" (jittered ellipses, a lesion stand-in). Foreground
sits +1.0 over a zero background before additive Gaussian noise, and the
stored mask is the clean rasterisation.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, ParameterError

TENSOR_MAGIC = b"MMTENS01"
SPLIT_NAMES = ("labelled_train", "unlabelled_train", "validation", "test")
KINDS = ("tubes", "blobs")


@dataclass
class Case:
    case_id: str
    image: np.ndarray   # (S, C, H, W) float
    mask: np.ndarray    # (S, 1, H, W) float in {0, 1}
    labelled: bool


@dataclass
class CaseSet:
    cases: list[Case]
    split: dict[str, list[int]] = field(default_factory=dict)

    def validate(self) -> "CaseSet":
        seen: set[int] = set()
        for name, idxs in self.split.items():
            if name not in SPLIT_NAMES:
                raise ConfigError(f"unknown split {name!r}")
            for i in idxs:
                if not 0 <= i < len(self.cases):
                    raise ConfigError(f"split {name} references case {i}")
                if i in seen:
                    raise ConfigError(f"case {i} appears in two splits")
                seen.add(i)
        return self

    def cases_in(self, split_name: str) -> list[Case]:
        if split_name not in self.split:
            raise ConfigError(f"case set has no split {split_name!r}; have "
                              f"{sorted(self.split)}")
        return [self.cases[i] for i in self.split[split_name]]


# ---------------------------------------------------------------------------
# synthetic slices

def _tube_slice(rng, size: int) -> np.ndarray:
    """1-3 smooth curves (quadratic Bezier) stamped with radius 1-3 px."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        p0 = rng.uniform(0, size - 1, 2)
        p2 = rng.uniform(0, size - 1, 2)
        while np.hypot(*(p2 - p0)) < size / 2:
            p2 = rng.uniform(0, size - 1, 2)
        p1 = rng.uniform(0, size - 1, 2)
        radius = rng.uniform(1.0, 3.0)
        t = np.linspace(0.0, 1.0, 4 * size)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2
        d2 = ((yy[..., None] - pts[:, 0]) ** 2
              + (xx[..., None] - pts[:, 1]) ** 2)
        mask |= d2.min(axis=-1) <= radius * radius
    return mask


def _blob_slice(rng, size: int) -> np.ndarray:
    """1-2 ellipses with low-frequency radial boundary jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        ay, ax = rng.uniform(size / 8, size / 4, 2)
        theta = rng.uniform(0, math.pi)
        coeffs = rng.normal(0.0, 0.08, 3)
        phases = rng.uniform(0, 2 * math.pi, 3)
        ct, st = math.cos(theta), math.sin(theta)
        u = ((yy - cy) * ct + (xx - cx) * st) / ay
        v = (-(yy - cy) * st + (xx - cx) * ct) / ax
        rad = np.hypot(u, v)
        ang = np.arctan2(v, u)
        jitter = 1.0
        for k, (c, ph) in enumerate(zip(coeffs, phases), start=1):
            jitter = jitter + c * np.cos(k * ang + ph)
        mask |= rad <= jitter
    return mask


def gen_synthetic_case(seed, kind: str, slices: int, size: int,
                       noise_sigma: float, case_id: str = "case",
                       labelled: bool = False) -> Case:
    """Deterministic synthetic case.

    Foreground is +1.0 over zero background; Gaussian noise of the given
    sigma is added on top, so with noise_sigma=0 the image equals the mask.
    Slices are redrawn until the mask is non-empty.
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown kind {kind!r}; expected one of {KINDS}")
    if size % 4:
        raise ParameterError(f"size must be divisible by 4, got {size}")
    if slices < 1:
        raise ParameterError("slices must be >= 1")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    draw = _tube_slice if kind == "tubes" else _blob_slice
    images = np.empty((slices, 1, size, size), dtype=np.float64)
    masks = np.empty((slices, 1, size, size), dtype=np.float64)
    for s in range(slices):
        for _ in range(100):
            m = draw(rng, size)
            if m.any():
                break
        else:
            raise ConfigError("failed to draw a non-empty mask in 100 tries")
        img = m.astype(np.float64)
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, (size, size))
        images[s, 0] = img
        masks[s, 0] = m
    return Case(case_id=case_id, image=images, mask=masks, labelled=labelled)


# ---------------------------------------------------------------------------
# preprocessing

def casewise_normalize(case: Case) -> Case:
    """Zero-mean/unit-std per channel over the whole case; the std is
    floored at 1e-8 so constant channels map to zeros."""
    img = case.image
    out = np.empty_like(img)
    for c in range(img.shape[1]):
        chan = img[:, c]
        std = chan.std()
        out[:, c] = (chan - chan.mean()) / max(std, 1e-8)
    return Case(case.case_id, out, case.mask, case.labelled)


def crop_corners(slice_chw: np.ndarray, crop: int) -> list[np.ndarray]:
    """The four crop x crop corner patches of a (C, H, W) slice."""
    if slice_chw.ndim != 3:
        raise DimensionError("crop_corners expects a CHW slice")
    h, w = slice_chw.shape[1], slice_chw.shape[2]
    if not 0 < crop <= min(h, w):
        raise ParameterError(f"crop {crop} outside (0, {min(h, w)}]")
    return [
        slice_chw[:, :crop, :crop].copy(),
        slice_chw[:, :crop, w - crop:].copy(),
        slice_chw[:, h - crop:, :crop].copy(),
        slice_chw[:, h - crop:, w - crop:].copy(),
    ]


def filter_foreground(case: Case, min_pixels: int) -> list[int]:
    """Slice indices whose mask has strictly more than min_pixels set."""
    return [s for s in range(case.mask.shape[0])
            if case.mask[s].sum() > min_pixels]


# ---------------------------------------------------------------------------
# streams

@dataclass
class AugmentConfig:
    flip: bool = False          # horizontal flip, applied jointly to image+mask
    noise_sigma: float = 0.0    # additive Gaussian noise on the image only


class SliceStream:
    """Deterministic batched iterator over a fixed slice pool.

    The pool order is reshuffled from the stream's own generator at every
    wrap, so an epoch's worth of batches covers each slice exactly once
    and independent streams never share randomness.
    """

    def __init__(self, items: list[tuple[np.ndarray, np.ndarray | None]],
                 batch_size: int, rng, augment: AugmentConfig | None = None,
                 dtype=np.float32):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self._items = items
        self._batch = batch_size
        self._rng = rng
        self._augment = augment
        self._dtype = dtype
        self._order: list[int] = []
        self._pos = 0

    @property
    def epoch_len(self) -> int:
        if not self._items:
            return 0
        return -(-len(self._items) // self._batch)

    def _next_index(self) -> int:
        if self._pos >= len(self._order):
            self._order = list(self._rng.permutation(len(self._items)))
            self._pos = 0
        i = self._order[self._pos]
        self._pos += 1
        return i

    def next_batch(self):
        if not self._items:
            raise ConfigError("stream has no slices")
        imgs, masks = [], []
        has_mask = self._items[0][1] is not None
        for _ in range(self._batch):
            img, msk = self._items[self._next_index()]
            img = img.astype(self._dtype)
            msk = None if msk is None else msk.astype(self._dtype)
            if self._augment is not None:
                img, msk = self._apply_augment(img, msk)
            imgs.append(img)
            if has_mask:
                masks.append(msk)
        xb = np.stack(imgs)
        return xb, (np.stack(masks) if has_mask else None)

    def _apply_augment(self, img, msk):
        if self._augment.flip and self._rng.random() < 0.5:
            img = img[:, :, ::-1].copy()
            if msk is not None:
                msk = msk[:, :, ::-1].copy()
        if self._augment.noise_sigma > 0:
            img = img + self._rng.normal(
                0.0, self._augment.noise_sigma, img.shape).astype(self._dtype)
        return img, msk


def make_streams(caseset: CaseSet, labelled_slices: int, seed: int,
                 batch_size: int = 1,
                 labelled_augment: AugmentConfig | None = None,
                 unlabelled_augment: AugmentConfig | None = None,
                 dtype=np.float32):
    """Build the labelled and unlabelled training streams.

    The labelled pool is a fixed budget of labelled_slices foreground
    slices drawn deterministically (without replacement) from the
    labelled_train cases; masks of unlabelled_train cases are never read.
    Returns (labelled_stream, unlabelled_stream); the unlabelled stream is
    None when the split is absent or empty.
    """
    if labelled_slices < 1:
        raise ConfigError("labelled_slices must be >= 1")
    pool: list[tuple[np.ndarray, np.ndarray]] = []
    for case in caseset.cases_in("labelled_train"):
        for s in filter_foreground(case, 0):
            pool.append((case.image[s], case.mask[s]))
    if labelled_slices > len(pool):
        raise ConfigError(f"labelled budget {labelled_slices} exceeds the "
                          f"{len(pool)} available foreground slices")
    pick = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    chosen = pick.choice(len(pool), size=labelled_slices, replace=False)
    labelled_items = [pool[i] for i in chosen]
    labelled = SliceStream(labelled_items, batch_size,
                           np.random.default_rng(np.random.SeedSequence([seed, 1])),
                           augment=labelled_augment, dtype=dtype)

    unlabelled = None
    if "unlabelled_train" in caseset.split and caseset.split["unlabelled_train"]:
        items = [(case.image[s], None)
                 for case in caseset.cases_in("unlabelled_train")
                 for s in range(case.image.shape[0])]
        unlabelled = SliceStream(items, batch_size,
                                 np.random.default_rng(np.random.SeedSequence([seed, 2])),
                                 augment=unlabelled_augment, dtype=dtype)
    return labelled, unlabelled


# ---------------------------------------------------------------------------
# tensor container

def write_tensor(path, arr: np.ndarray) -> None:
    """Binary layout: magic "MMTENS01" | u32 rank | u32 dims... | float32
    little-endian payload. File size is 8 + 4 + 4*rank + 4*numel."""
    arr = np.asarray(arr)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8 or buf[:8] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic in {path}", 0)
    if len(buf) < 12:
        raise FormatError("tensor header truncated before rank", 8)
    (rank,) = struct.unpack_from("<I", buf, 8)
    hdr_end = 12 + 4 * rank
    if len(buf) < hdr_end:
        raise FormatError("tensor header truncated in dims", 12)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    numel = int(np.prod(dims)) if rank else 1
    expected = hdr_end + 4 * numel
    if len(buf) != expected:
        raise FormatError(f"tensor payload is {len(buf) - hdr_end} bytes, "
                          f"expected {4 * numel}", hdr_end)
    return np.frombuffer(buf, dtype="<f4", count=numel,
                         offset=hdr_end).reshape(dims).copy()


# ---------------------------------------------------------------------------
# case-set on disk

def _image_path(case_id: str) -> str:
    return f"{case_id}.image.mmt"


def _mask_path(case_id: str) -> str:
    return f"{case_id}.mask.mmt"


def save_caseset(directory, caseset: CaseSet) -> str:
    """Write every case as an image/mask tensor pair plus a manifest.

    Manifest lines are "path labelled split", one per case, paths relative
    to the manifest. The mask path is the image path with ".image."
    replaced by ".mask.". Returns the manifest path.
    """
    caseset.validate()
    os.makedirs(directory, exist_ok=True)
    index_to_split = {}
    for name, idxs in caseset.split.items():
        for i in idxs:
            index_to_split[i] = name
    lines = []
    for i, case in enumerate(caseset.cases):
        split = index_to_split.get(i)
        if split is None:
            raise ConfigError(f"case {i} ({case.case_id}) is in no split")
        write_tensor(os.path.join(directory, _image_path(case.case_id)),
                     case.image)
        write_tensor(os.path.join(directory, _mask_path(case.case_id)),
                     case.mask)
        lines.append(f"{_image_path(case.case_id)} "
                     f"{1 if case.labelled else 0} {split}")
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def load_caseset(manifest_path) -> CaseSet:
    if not os.path.exists(manifest_path):
        raise ConfigError(f"manifest not found: {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    cases: list[Case] = []
    split: dict[str, list[int]] = {}
    with open(manifest_path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"manifest line {ln} needs 'path labelled "
                                  f"split', got {line!r}")
            path, labelled, split_name = parts
            if labelled not in ("0", "1"):
                raise FormatError(f"manifest line {ln}: labelled flag must "
                                  f"be 0 or 1")
            if split_name not in SPLIT_NAMES:
                raise FormatError(f"manifest line {ln}: unknown split "
                                  f"{split_name!r}")
            image = read_tensor(os.path.join(base, path))
            mask = read_tensor(os.path.join(base,
                                            path.replace(".image.", ".mask.")))
            if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
                raise FormatError(f"manifest line {ln}: image {image.shape} "
                                  f"and mask {mask.shape} disagree")
            case_id = path[:-len(".image.mmt")] if path.endswith(".image.mmt") else path
            split.setdefault(split_name, []).append(len(cases))
            cases.append(Case(case_id, image.astype(np.float64),
                              mask.astype(np.float64), labelled == "1"))
    return CaseSet(cases=cases, split=split).validate()


def split_counts(n_cases: int) -> dict[str, int]:
    """Case counts per split at the 1/3/1/5 ratio, every split non-empty."""
    if n_cases < 4:
        raise ConfigError(f"need at least 4 cases to cover all splits, got "
                          f"{n_cases}")
    lab = max(1, n_cases // 10)
    val = max(1, n_cases // 10)
    unlab = max(1, (3 * n_cases) // 10)
    test = n_cases - lab - val - unlab
    if test < 1:
        lab = val = unlab = 1
        test = n_cases - 3
    return {"labelled_train": lab, "unlabelled_train": unlab,
            "validation": val, "test": test}


def gen_caseset(seed: int, kind: str, n_cases: int, slices: int, size: int,
                noise_sigma: float) -> CaseSet:
    """Generate a full case set split 1/3/1/5 in generation order."""
    counts = split_counts(n_cases)
    ss = np.random.SeedSequence(seed).spawn(n_cases)
    order = (["labelled_train"] * counts["labelled_train"]
             + ["unlabelled_train"] * counts["unlabelled_train"]
             + ["validation"] * counts["validation"]
             + ["test"] * counts["test"])
    cases, split = [], {name: [] for name in SPLIT_NAMES}
    for i, (child, split_name) in enumerate(zip(ss, order)):
        case = gen_synthetic_case(child, kind, slices, size, noise_sigma,
                                  case_id=f"case_{i:04d}",
                                  labelled=split_name == "labelled_train")
        split[split_name].append(i)
        cases.append(case)
    return CaseSet(cases=cases, split=split).validate()
