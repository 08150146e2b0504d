"""Synthetic feature bags standing in for preprocessed slides.

A slide is ``N`` patches. At low resolution each patch is one ``d``-vector
(``Z``); zooming in gives ``k`` sub-patch vectors (``U``). Sub-patch features are
drawn around per-tissue prototypes, tumor sub-patches around a shifted
prototype. Patches come in contiguous runs sharing a correlated offset, so
cosine-similar neighbourhoods exist in both ``Z`` and ``U``. Benign "mimic"
clusters look like tumor at low resolution and only zooming tells them apart.

On disk a dataset is ``manifest.txt`` plus ``slides/<id>.bag``.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol

import numpy as np

BAG_MAGIC = b"PZBAG\x00"
BAG_VERSION = 1
MANIFEST_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<6sHIIIBB")   # magic, version, N, k, d, dtype code, label


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class BagFormatError(ValueError):
    """Corrupt, truncated or wrong-version bag file."""


class ManifestError(ValueError):
    """Manifest inconsistent with the stored slides."""


@dataclass
class SyntheticConfig:
    N_range: tuple[int, int] = (48, 96)          # patches per slide, inclusive
    k: int = 16                                   # sub-patches per patch
    d: int = 32                                   # feature dimension
    tumor_fraction_range: tuple[float, float] = (0.03, 0.08)   # fraction of tumor patches on positive slides
    sub_tumor_fraction_range: tuple[float, float] = (0.25, 0.5)  # tumor sub-patches within a tumor patch
    class_separation: float = 12.0                # tumor vs normal prototype distance in U (texture direction)
    low_res_blur: float = 0.1                     # noise added to the sub-patch mean to form Z
    noise_sigma: float = 1.0                      # per sub-patch noise
    run_sigma: float = 1.0                        # scale of the offset shared by a contiguous run
    mean_run_length: float = 6.0
    max_tumor_clusters: int = 2
    mimic_fraction_range: tuple[float, float] = (0.2, 0.35)    # benign look-alike patches, both classes
    max_mimic_clusters: int = 4
    appearance_shift: float = 2.0                 # coarse-scale shift shared by tumor and mimic patches
    balanced_texture: bool = True                 # texture shift alternates sign over a patch's tumor sub-patches
    standardize: bool = True                      # row-standardize sub-patch features, like an encoder's final norm
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.N_range = tuple(int(v) for v in self.N_range)
        self.tumor_fraction_range = tuple(float(v) for v in self.tumor_fraction_range)
        self.sub_tumor_fraction_range = tuple(float(v) for v in self.sub_tumor_fraction_range)
        self.mimic_fraction_range = tuple(float(v) for v in self.mimic_fraction_range)
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k: must be >= 1, got {self.k}")
        if self.d < 2:
            raise ConfigError(f"d: must be >= 2, got {self.d}")
        lo, hi = self.N_range
        if lo > hi:
            raise ConfigError(f"N_range: lower bound {lo} exceeds upper bound {hi}")
        if lo < self.k:
            raise ConfigError(f"N_range: lower bound {lo} must be >= k={self.k}")
        for name in ("tumor_fraction_range", "sub_tumor_fraction_range"):
            a, b = getattr(self, name)
            if not (0.0 < a <= b <= 1.0):
                raise ConfigError(f"{name}: must satisfy 0 < lo <= hi <= 1, got ({a}, {b})")
        a, b = self.mimic_fraction_range
        if not (0.0 <= a <= b < 1.0):
            raise ConfigError(f"mimic_fraction_range: must satisfy 0 <= lo <= hi < 1, got ({a}, {b})")
        if self.tumor_fraction_range[1] + b > 1.0:
            raise ConfigError("mimic_fraction_range: tumor and mimic fractions together exceed 1")
        for name in ("class_separation", "low_res_blur", "noise_sigma", "run_sigma", "appearance_shift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be nonnegative")
        if self.mean_run_length < 1:
            raise ConfigError("mean_run_length: must be >= 1")
        if self.max_tumor_clusters < 1:
            raise ConfigError("max_tumor_clusters: must be >= 1")
        if self.max_mimic_clusters < 1:
            raise ConfigError("max_mimic_clusters: must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown generator field")
        return cls(**data)


@dataclass(eq=False)
class FeatureBag:
    slide_id: str
    Z: np.ndarray              # (N, d) low resolution
    U: np.ndarray              # (N, k, d) high resolution
    y: int
    sub_tumor_mask: np.ndarray  # (N, k) bool

    @property
    def tumor_mask(self) -> np.ndarray:
        return self.sub_tumor_mask.any(axis=1)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.y == other.y
            and self.Z.dtype == other.Z.dtype
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.U, other.U)
            and np.array_equal(self.sub_tumor_mask, other.sub_tumor_mask)
        )

    def check(self) -> None:
        if self.Z.shape != (self.N, self.d) or self.U.shape != (self.N, self.U.shape[1], self.d):
            raise BagFormatError(f"{self.slide_id}: inconsistent Z/U shapes {self.Z.shape} {self.U.shape}")
        if self.sub_tumor_mask.shape != self.U.shape[:2]:
            raise BagFormatError(f"{self.slide_id}: sub_tumor_mask shape {self.sub_tumor_mask.shape}")
        if not (np.isfinite(self.Z).all() and np.isfinite(self.U).all()):
            raise BagFormatError(f"{self.slide_id}: non-finite features")
        if bool(self.tumor_mask.any()) != bool(self.y):
            raise BagFormatError(f"{self.slide_id}: label {self.y} disagrees with tumor mask")


def directions(config: SyntheticConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normal tissue prototypes ``(2, d)`` and the orthonormal appearance and texture directions."""
    rng = np.random.default_rng([config.seed, 0x9E3779B9])
    normal = rng.standard_normal((2, config.d))
    basis, _ = np.linalg.qr(rng.standard_normal((config.d, 2)))
    appearance, texture = basis[:, 0], basis[:, 1]
    # Tissue type carries neither signal.
    normal -= (normal @ basis) @ basis.T
    return normal, appearance, texture


def prototypes(config: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Normal and tumor sub-patch prototypes, two tissue types each, fixed by ``config.seed``."""
    normal, _, texture = directions(config)
    return normal, normal + config.class_separation * texture


def _split_runs(start: int, stop: int, mean_len: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    runs = []
    i = start
    while i < stop:
        length = int(rng.geometric(1.0 / mean_len))
        j = min(stop, i + max(1, length))
        runs.append((i, j))
        i = j
    return runs


def _cluster_sizes(total: int, max_clusters: int, rng: np.random.Generator) -> list[int]:
    if total == 0:
        return []
    n = int(rng.integers(1, min(max_clusters, total) + 1))
    sizes = np.full(n, total // n)
    sizes[: total % n] += 1
    return sizes.tolist()


def _layout(N: int, tumor: list[int], mimic: list[int], rng: np.random.Generator):
    """Place tumor and mimic clusters as disjoint index runs separated by normal tissue."""
    blocks = [("tumor", n) for n in tumor] + [("mimic", n) for n in mimic]
    order = rng.permutation(len(blocks))
    free = N - sum(n for _, n in blocks)
    gaps = rng.multinomial(free, np.full(len(blocks) + 1, 1.0 / (len(blocks) + 1))) if blocks else [free]
    placed, pos = [], 0
    for g, b in zip(gaps, [blocks[o] for o in order] + [None]):
        if g:
            placed.append(("normal", pos, pos + int(g)))
            pos += int(g)
        if b is not None:
            placed.append((b[0], pos, pos + b[1]))
            pos += b[1]
    return placed


def generate_slide(config: SyntheticConfig, label: int, rng_seed, slide_id: str = "slide") -> FeatureBag:
    """Draw one synthetic slide.

    Sub-patch features are a tissue prototype plus an offset shared by a
    contiguous run of patches plus noise. Tumor and mimic patches share a
    coarse appearance shift, so both stand out at low resolution. Only tumor
    sub-patches carry the texture shift; with ``balanced_texture`` its sign
    alternates within a patch, so it cancels in ``Z = mean(U) + blur`` and
    tumor and mimic patches look alike until zoomed into.
    """
    config.validate()
    if label not in (0, 1):
        raise ConfigError(f"label: must be 0 or 1, got {label}")
    rng = np.random.default_rng(rng_seed)
    normal, appearance, texture = directions(config)
    k, d = config.k, config.d
    N = int(rng.integers(config.N_range[0], config.N_range[1] + 1))

    n_tumor = 0
    if label == 1:
        frac = rng.uniform(*config.tumor_fraction_range)
        n_tumor = min(N, max(1, int(round(frac * N))))
    n_mimic = min(N - n_tumor, int(round(rng.uniform(*config.mimic_fraction_range) * N)))
    layout = _layout(
        N,
        _cluster_sizes(n_tumor, config.max_tumor_clusters, rng),
        _cluster_sizes(n_mimic, config.max_mimic_clusters, rng),
        rng,
    )

    tissue = np.empty(N, dtype=np.int64)
    offset = np.empty((N, d))
    kind = np.zeros(N, dtype=np.int64)          # 0 normal, 1 tumor, 2 mimic
    for name, a, b in layout:
        runs = _split_runs(a, b, config.mean_run_length, rng) if name == "normal" else [(a, b)]
        for ra, rb in runs:
            tissue[ra:rb] = rng.integers(0, 2)
            offset[ra:rb] = config.run_sigma * rng.standard_normal(d)
        kind[a:b] = {"normal": 0, "tumor": 1, "mimic": 2}[name]

    sub_mask = np.zeros((N, k), dtype=bool)
    sign = np.zeros((N, k))
    for i in np.flatnonzero(kind == 1):
        frac = rng.uniform(*config.sub_tumor_fraction_range)
        m = min(k, max(1, int(round(frac * k))))
        if config.balanced_texture and k > 1:
            # an even count with alternating signs cancels exactly in the patch mean
            m = min(k - k % 2, max(2, m + m % 2))
        pick = rng.choice(k, size=m, replace=False)
        sub_mask[i, pick] = True
        sign[i, pick] = np.where(np.arange(m) % 2 == 0, 1.0, -1.0) if config.balanced_texture else 1.0

    # Run offsets, like tissue types, carry neither the appearance nor the texture signal.
    basis = np.stack([appearance, texture], axis=1)
    offset -= (offset @ basis) @ basis.T
    U = normal[tissue][:, None, :] + offset[:, None, :] + config.noise_sigma * rng.standard_normal((N, k, d))
    U = U + (kind > 0)[:, None, None] * config.appearance_shift * appearance
    U = U + sign[..., None] * config.class_separation * texture
    if config.standardize:
        U = (U - U.mean(axis=-1, keepdims=True)) / np.maximum(U.std(axis=-1, keepdims=True), 1e-12)
    Z = U.mean(axis=1) + config.low_res_blur * rng.standard_normal((N, d))
    dtype = np.dtype(config.dtype)
    return FeatureBag(slide_id, Z.astype(dtype), U.astype(dtype), int(label), sub_mask)


# --- bag file format -------------------------------------------------------

def save_bag(bag: FeatureBag, path) -> None:
    code = {v: k for k, v in _DTYPE_CODES.items()}.get(np.dtype(bag.Z.dtype).newbyteorder("<"))
    if code is None:
        raise BagFormatError(f"unsupported dtype {bag.Z.dtype}")
    dt = _DTYPE_CODES[code]
    sid = bag.slide_id.encode("utf-8")
    parts = [
        _HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.N, bag.k, bag.d, code, bag.y),
        struct.pack("<H", len(sid)),
        sid,
        np.ascontiguousarray(bag.Z, dtype=dt).tobytes(),
        np.ascontiguousarray(bag.U, dtype=dt).tobytes(),
        np.packbits(bag.sub_tumor_mask.reshape(-1), bitorder="little").tobytes(),
    ]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_bag(path, expected_N: int | None = None) -> FeatureBag:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise BagFormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size + 2:
        raise BagFormatError(f"{path}: header: file truncated")
    magic, version, N, k, d, code, label = _HEADER.unpack_from(raw, 0)
    if magic != BAG_MAGIC:
        raise BagFormatError(f"{path}: magic: not a bag file")
    if version != BAG_VERSION:
        raise BagFormatError(f"{path}: version: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise BagFormatError(f"{path}: dtype: unknown code {code}")
    if label not in (0, 1):
        raise BagFormatError(f"{path}: label: invalid value {label}")
    pos = _HEADER.size
    (sid_len,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    dt = _DTYPE_CODES[code]
    sizes = {
        "slide_id": sid_len,
        "Z": N * d * dt.itemsize,
        "U": N * k * d * dt.itemsize,
        "sub_tumor_mask": (N * k + 7) // 8,
    }
    chunks = {}
    for name, size in sizes.items():
        if pos + size > len(raw):
            raise BagFormatError(f"{path}: {name}: file truncated")
        chunks[name] = raw[pos : pos + size]
        pos += size
    if pos != len(raw):
        raise BagFormatError(f"{path}: trailing bytes after payload")
    Z = np.frombuffer(chunks["Z"], dtype=dt).reshape(N, d).astype(dt.newbyteorder("="))
    U = np.frombuffer(chunks["U"], dtype=dt).reshape(N, k, d).astype(dt.newbyteorder("="))
    bits = np.unpackbits(np.frombuffer(chunks["sub_tumor_mask"], dtype=np.uint8), bitorder="little")
    mask = bits[: N * k].astype(bool).reshape(N, k)
    bag = FeatureBag(chunks["slide_id"].decode("utf-8"), Z, U, int(label), mask)
    bag.check()
    if expected_N is not None and expected_N != N:
        raise ManifestError(f"{path}: N: manifest says {expected_N}, file stores {N}")
    return bag


# --- datasets ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    y: int
    N: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    config: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    @property
    def split(self) -> dict[str, str]:
        return {e.slide_id: e.split for e in self.entries}

    def ids(self, split: str) -> list[str]:
        return [e.slide_id for e in self.entries if e.split == split]

    def to_text(self) -> str:
        lines = [f"patchzoom-manifest {self.version}"]
        for key in sorted(self.config):
            lines.append(f"config.{key}={_fmt(self.config[key])}")
        lines.append("#slide_id\tpath\ty\tN\tsplit")
        for e in self.entries:
            lines.append(f"{e.slide_id}\t{e.path}\t{e.y}\t{e.N}\t{e.split}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("patchzoom-manifest "):
            raise ManifestError("manifest: missing header line")
        version = int(lines[0].split()[1])
        if version != MANIFEST_VERSION:
            raise ManifestError(f"manifest: unsupported version {version}")
        config, entries = {}, []
        for line in lines[1:]:
            if not line or line.startswith("#"):
                continue
            if line.startswith("config."):
                key, _, value = line[len("config."):].partition("=")
                config[key] = _parse(value)
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(f"manifest: malformed entry {line!r}")
            sid, path, y, n, split = parts
            entries.append(ManifestEntry(sid, path, int(y), int(n), split))
        ids = [e.slide_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("manifest: duplicate slide ids")
        return cls(entries, config, version, root)

    def load(self, slide_id: str) -> FeatureBag:
        entry = next((e for e in self.entries if e.slide_id == slide_id), None)
        if entry is None:
            raise KeyError(slide_id)
        bag = load_bag(Path(self.root or ".") / entry.path, expected_N=entry.N)
        if bag.y != entry.y:
            raise ManifestError(f"{slide_id}: y: manifest says {entry.y}, file stores {bag.y}")
        return bag

    def bags(self, split: str) -> list[FeatureBag]:
        return [self.load(sid) for sid in self.ids(split)]


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str):
    if "," in text:
        return tuple(_parse(t) for t in text.split(","))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def slide_seed(seed: int, slide_id: str) -> np.random.SeedSequence:
    digest = int.from_bytes(hashlib.sha256(slide_id.encode()).digest()[:8], "little")
    return np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, digest])


def stratified_counts(n: int, fracs: tuple[float, ...]) -> list[int]:
    """Per-split counts for one class; rounding remainder goes to the first split."""
    counts = [int(math.floor(f * n + 1e-9)) for f in fracs]
    counts[0] += n - sum(counts)
    return counts


SPLIT_NAMES = ("train", "val", "test")


def plan_dataset(n_pos: int, n_neg: int, split_fracs=(0.6, 0.2, 0.2), seed: int = 0) -> list[tuple[str, int, str]]:
    """(slide_id, label, split) for every slide; pure function of the inputs."""
    if n_pos < 1 or n_neg < 1:
        raise ConfigError("n_pos/n_neg: need at least one slide of each class")
    fracs = tuple(float(f) for f in split_fracs)
    if len(fracs) != len(SPLIT_NAMES) or abs(sum(fracs) - 1.0) > 1e-9 or min(fracs) < 0:
        raise ConfigError(f"split_fracs: must be three nonnegative fractions summing to 1, got {fracs}")
    width = max(4, len(str(n_pos + n_neg)))
    labels = [1] * n_pos + [0] * n_neg
    ids = [f"s{i:0{width}d}" for i in range(len(labels))]
    rng = np.random.default_rng([int(seed) & 0xFFFF_FFFF, 17])
    split_of: dict[str, str] = {}
    for cls in (1, 0):
        members = [sid for sid, y in zip(ids, labels) if y == cls]
        order = rng.permutation(len(members))
        counts = stratified_counts(len(members), fracs)
        pos = 0
        for name, c in zip(SPLIT_NAMES, counts):
            for j in order[pos : pos + c]:
                split_of[members[j]] = name
            pos += c
    for name in SPLIT_NAMES:
        if not any(s == name for s in split_of.values()):
            raise ConfigError(f"split_fracs: split {name!r} would be empty")
    return [(sid, y, split_of[sid]) for sid, y in zip(ids, labels)]


def generate_dataset(
    config: SyntheticConfig,
    n_pos: int,
    n_neg: int,
    split_fracs=(0.6, 0.2, 0.2),
    seed: int | None = None,
    out_dir=None,
) -> DatasetManifest:
    """Generate and write a dataset; ``seed`` defaults to ``config.seed``."""
    seed = config.seed if seed is None else seed
    plan = plan_dataset(n_pos, n_neg, split_fracs, seed)
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        try:
            (root / "slides").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries = []
    for sid, y, split in plan:
        bag = generate_slide(config, y, slide_seed(seed, sid), slide_id=sid)
        rel = f"slides/{sid}.bag"
        if root is not None:
            save_bag(bag, root / rel)
        entries.append(ManifestEntry(sid, rel, y, bag.N, split))
    echo = dict(config.to_dict(), dataset_seed=seed, n_pos=n_pos, n_neg=n_neg, split_fracs=tuple(split_fracs))
    manifest = DatasetManifest(entries, echo, root=root)
    if root is not None:
        (root / "manifest.txt").write_text(manifest.to_text())
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise ManifestError(f"{path}: no manifest")
    return DatasetManifest.from_text(path.read_text(), root=root)


def generate_bags(config: SyntheticConfig, n_pos: int, n_neg: int, split_fracs=(0.6, 0.2, 0.2),
                  seed: int | None = None) -> dict[str, list[FeatureBag]]:
    """In-memory variant of :func:`generate_dataset` returning bags per split."""
    seed = config.seed if seed is None else seed
    out: dict[str, list[FeatureBag]] = {name: [] for name in SPLIT_NAMES}
    for sid, y, split in plan_dataset(n_pos, n_neg, split_fracs, seed):
        out[split].append(generate_slide(config, y, slide_seed(seed, sid), slide_id=sid))
    return out


class FeatureSource(Protocol):
    """Anything that can hand out bags per split (synthetic or real extracted features)."""

    def bags(self, split: str) -> list[FeatureBag]: ...


class DirectorySource:
    def __init__(self, root):
        self.manifest = load_manifest(root)

    def bags(self, split: str) -> list[FeatureBag]:
        return self.manifest.bags(split)


def separation(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between class means divided by the pooled per-dimension std."""
    diff = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
    pooled = math.sqrt(0.5 * (a.var(axis=0).mean() + b.var(axis=0).mean()))
    return float(diff / pooled)



def texture_separation(bag: FeatureBag, config: SyntheticConfig) -> tuple[float, float]:
    """Tumor vs normal :func:`separation` along the texture direction, in U and in Z.

    Projections are taken in absolute value so the alternating texture signs
    count as evidence rather than cancelling. Requires a positive slide.
    """
    texture = directions(config)[2]
    pu = np.abs(bag.U.astype(np.float64) @ texture)[..., None]
    pz = np.abs(bag.Z.astype(np.float64) @ texture)[:, None]
    normal = ~bag.tumor_mask
    if not bag.tumor_mask.any() or not normal.any():
        raise ValueError(f"{bag.slide_id}: needs both tumor and normal patches")
    in_u = separation(pu[bag.sub_tumor_mask], pu[normal].reshape(-1, 1))
    in_z = separation(pz[bag.tumor_mask], pz[normal])
    return in_u, in_z
