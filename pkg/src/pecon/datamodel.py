"""Patient samples, on-disk formats, EHR scaling, batching and a synthetic generator.

On-disk layout of a dataset directory::

    manifest.csv          patient_id,label,pe_type,split,ct_path,ehr_path
    ct/<patient_id>.pecn  one binary matrix per patient (subvolumes x width)
    ehr_<split>.csv       patient_id,f0,f1,...

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DuplicatePatientError,
    EmptyInputError,
    FormatError,
    ManifestError,
    MissingFileError,
    ShapeError,
    WidthMismatchError,
)

PE_TYPES = ("none", "central", "segmental", "subsegmental")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["patient_id", "label", "pe_type", "split", "ct_path", "ehr_path"]

MATRIX_MAGIC = b"PECN"
MATRIX_VERSION = 1
_MATRIX_HEADER = struct.Struct("<4sBII")

# Independent random streams; the integer is mixed into the seed sequence.
_PURPOSES = {"data": 0, "shuffle": 1, "init": 2}


def make_rng(seed, purpose, *keys):
    """Return a PCG64 generator for ``(seed, purpose, *keys)``.

    Streams for different purposes or keys are statistically independent,
    so adding a shuffle never perturbs weight initialisation and vice versa.
    """
    entropy = [int(seed), _PURPOSES[purpose], *[int(k) for k in keys]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass
class PatientSample:
    patient_id: str
    ct_subvolumes: np.ndarray  # (N, d)
    ehr_features: np.ndarray  # (D_e,)
    label: int
    pe_type: str
    split: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.pe_type not in PE_TYPES:
            raise ValueError(f"unknown pe_type {self.pe_type!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if (self.label == 0) != (self.pe_type == "none"):
            raise ValueError(
                f"{self.patient_id}: label {self.label} inconsistent with pe_type {self.pe_type!r}"
            )
        if self.ct_subvolumes.ndim != 2 or self.ct_subvolumes.shape[0] < 1:
            raise ValueError(f"{self.patient_id}: ct_subvolumes must be a non-empty N x d matrix")
        if self.ehr_features.ndim != 1:
            raise ValueError(f"{self.patient_id}: ehr_features must be a vector")

    @property
    def ct_embedding(self):
        return average_subvolumes(self.ct_subvolumes)


@dataclass
class Dataset:
    samples: list[PatientSample]
    d: int
    D_e: int

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.patient_id in seen:
                raise DuplicatePatientError(f"duplicate patient_id {s.patient_id!r}")
            seen.add(s.patient_id)
            if s.ct_subvolumes.shape[1] != self.d or s.ehr_features.shape[0] != self.D_e:
                raise WidthMismatchError(
                    f"{s.patient_id}: widths ({s.ct_subvolumes.shape[1]}, {s.ehr_features.shape[0]})"
                    f" differ from dataset ({self.d}, {self.D_e})"
                )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, samples):
        return Dataset(list(samples), self.d, self.D_e)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.subset(s for s in self.samples if s.split == name)

    @property
    def patient_ids(self):
        return [s.patient_id for s in self.samples]

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def ct_matrix(self):
        """Averaged CT embeddings, one row per patient, in 64-bit."""
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([s.ct_embedding for s in self.samples])

    def ehr_matrix(self):
        if not self.samples:
            return np.zeros((0, self.D_e))
        return np.stack([np.asarray(s.ehr_features, dtype=np.float64) for s in self.samples])


def average_subvolumes(ct_subvolumes):
    """Column mean of an ``N x d`` matrix of subvolume embeddings."""
    x = np.asarray(ct_subvolumes, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an N x d matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("cannot average zero subvolumes")
    return x.mean(axis=0)


# ---------------------------------------------------------------------------
# EHR scaling


@dataclass(frozen=True)
class EhrStats:
    minimum: np.ndarray
    maximum: np.ndarray


def fit_ehr_stats(dataset):
    """Per-feature min/max of ``dataset``; pass the training split only."""
    if len(dataset) == 0:
        raise EmptyInputError("cannot fit EHR statistics on an empty dataset")
    x = dataset.ehr_matrix()
    return EhrStats(x.min(axis=0), x.max(axis=0))


def normalize_ehr(raw, stats):
    """Min-max scale into [0, 1].

    Constant features map to 0 and values outside the fitted range are clamped.
    Works on a single vector or on a matrix of row vectors.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = stats.minimum, stats.maximum
    if raw.shape[-1] != lo.shape[0]:
        raise ShapeError(f"EHR width {raw.shape[-1]} does not match statistics width {lo.shape[0]}")
    span = hi - lo
    degenerate = span == 0
    scaled = (raw - lo) / np.where(degenerate, 1.0, span)
    scaled = np.where(degenerate, 0.0, scaled)
    return np.clip(scaled, 0.0, 1.0)


def normalize_dataset(dataset, stats):
    return dataset.subset(
        replace(s, ehr_features=normalize_ehr(s.ehr_features, stats)) for s in dataset.samples
    )


def filter_subsegmental(dataset):
    return dataset.subset(s for s in dataset.samples if s.pe_type != "subsegmental")


def make_batches(dataset, batch_size, seed=0, shuffle=True, drop_last=False, epoch=0):
    """Split patient indices into batches.

    With ``shuffle`` the permutation depends only on ``(seed, epoch)``.
    ``drop_last`` discards a trailing incomplete batch (used for pretraining).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = make_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# ---------------------------------------------------------------------------
# File formats


def write_matrix(path, matrix):
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_matrix(path):
    data = Path(path).read_bytes()
    if len(data) < _MATRIX_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _MATRIX_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_MATRIX_HEADER.size)
    return values.reshape(rows, cols).astype(np.float32)


def write_ehr_csv(path, patient_ids, features):
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + [f"f{j}" for j in range(features.shape[1])])
        for pid, row in zip(patient_ids, features):
            w.writerow([pid] + [repr(float(v)) for v in row])


def read_ehr_csv(path):
    """Return ``{patient_id: vector}`` preserving float64 values exactly."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "patient_id":
            raise FormatError(f"{path}: header must start with 'patient_id'")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                out[row[0]] = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def load_manifest(path):
    """Materialise every manifest row into a :class:`Dataset`, preserving order.

    Errors carry the 1-based data row number (header excluded).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    root = path.parent
    ehr_cache = {}
    samples = []
    seen = {}
    d = D_e = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", row_no)
            pid, label, pe_type, split, ct_path, ehr_path = row
            if pid in seen:
                raise DuplicatePatientError(
                    f"duplicate patient_id {pid!r} (first seen at row {seen[pid]})", row_no
                )
            seen[pid] = row_no
            if label not in ("0", "1"):
                raise ManifestError(f"label must be 0 or 1, got {label!r}", row_no)
            if pe_type not in PE_TYPES:
                raise ManifestError(f"unknown pe_type {pe_type!r}", row_no)
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}", row_no)
            if (label == "0") != (pe_type == "none"):
                raise ManifestError(f"label {label} inconsistent with pe_type {pe_type!r}", row_no)

            ct_file = root / ct_path
            if not ct_file.is_file():
                raise MissingFileError(f"CT embedding file not found: {ct_file}", row_no)
            try:
                ct = read_matrix(ct_file)
            except FormatError as exc:
                raise ManifestError(str(exc), row_no) from None
            if ct.shape[0] < 1:
                raise ManifestError(f"{ct_file} holds zero subvolumes", row_no)

            ehr_file = root / ehr_path
            if ehr_file not in ehr_cache:
                if not ehr_file.is_file():
                    raise MissingFileError(f"EHR file not found: {ehr_file}", row_no)
                try:
                    ehr_cache[ehr_file] = read_ehr_csv(ehr_file)
                except FormatError as exc:
                    raise ManifestError(str(exc), row_no) from None
            if pid not in ehr_cache[ehr_file]:
                raise ManifestError(f"patient {pid!r} missing from {ehr_file}", row_no)
            ehr = ehr_cache[ehr_file][pid]

            if d is None:
                d, D_e = ct.shape[1], ehr.shape[0]
            elif ct.shape[1] != d:
                raise WidthMismatchError(f"CT width {ct.shape[1]} differs from {d}", row_no)
            elif ehr.shape[0] != D_e:
                raise WidthMismatchError(f"EHR width {ehr.shape[0]} differs from {D_e}", row_no)
            samples.append(PatientSample(pid, ct, ehr, int(label), pe_type, split))
    return Dataset(samples, d or 0, D_e or 0)


def save_dataset(dataset, out_dir):
    """Write ``dataset`` in the manifest layout; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "ct").mkdir(parents=True, exist_ok=True)
    by_split = {sp: [s for s in dataset.samples if s.split == sp] for sp in SPLITS}
    for sp, rows in by_split.items():
        if rows:
            write_ehr_csv(
                out_dir / f"ehr_{sp}.csv",
                [s.patient_id for s in rows],
                np.stack([s.ehr_features for s in rows]),
            )
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in dataset.samples:
            ct_rel = f"ct/{s.patient_id}.pecn"
            write_matrix(out_dir / ct_rel, s.ct_subvolumes)
            w.writerow([s.patient_id, s.label, s.pe_type, s.split, ct_rel, f"ehr_{s.split}.csv"])
    return manifest


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticConfig:
    """Shared-latent generator settings.

    The defaults are the reference configuration used by the acceptance suite.
    ``positive_fraction`` and ``subsegmental_fraction`` mimic a typical
    CT pulmonary angiography cohort (roughly 40% positive, 7.5% of positives
    subsegmental).
    """

    num_train: int = 800
    num_val: int = 100
    num_test: int = 100
    d: int = 64
    D_e: int = 32
    latent_dim: int = 8
    class_separation: float = 2.0
    noise_scale: float = 1.0
    subvolumes_per_patient: tuple[int, int] = (2, 6)
    positive_fraction: float = 0.4
    subsegmental_fraction: float = 0.075
    seed: int = 0

    def __post_init__(self):
        self.subvolumes_per_patient = tuple(int(v) for v in self.subvolumes_per_patient)
        for name in ("num_train", "num_val", "num_test", "d", "D_e", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.subvolumes_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("subvolumes_per_patient must be a range (lo, hi) with 1 <= lo <= hi")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if not 0 <= self.subsegmental_fraction < 1:
            raise ValueError("subsegmental_fraction must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def synthesize(cfg):
    """Draw an in-memory :class:`Dataset` from the shared-latent model.

    Each patient has a latent ``u ~ N(+-sep/2 * e, I)`` along a fixed unit
    direction ``e``. CT subvolumes are ``W_c u + noise`` and the EHR vector is
    ``sigmoid(W_e u + noise)``, so both modalities see the same patient state
    through independent noise. Projection entries have variance ``1/width``,
    making each projection close to an isometry of the latent space; noise and
    separation are therefore on the same scale for both modalities. CT values are rounded to float32, the storage
    precision of the binary matrix format.
    """
    params = make_rng(cfg.seed, "data", 0)
    direction = params.standard_normal(cfg.latent_dim)
    direction /= np.linalg.norm(direction)
    w_c = params.standard_normal((cfg.d, cfg.latent_dim)) / np.sqrt(cfg.d)
    w_e = params.standard_normal((cfg.D_e, cfg.latent_dim)) / np.sqrt(cfg.D_e)

    rng = make_rng(cfg.seed, "data", 1)
    lo, hi = cfg.subvolumes_per_patient
    samples = []
    counts = (("train", cfg.num_train), ("val", cfg.num_val), ("test", cfg.num_test))
    idx = 0
    for split, count in counts:
        for _ in range(count):
            label = int(rng.random() < cfg.positive_fraction)
            u = (label - 0.5) * cfg.class_separation * direction + rng.standard_normal(cfg.latent_dim)
            n_sub = int(rng.integers(lo, hi + 1))
            ct = u @ w_c.T + cfg.noise_scale * rng.standard_normal((n_sub, cfg.d))
            ehr_logit = w_e @ u + cfg.noise_scale * rng.standard_normal(cfg.D_e)
            ehr = 1.0 / (1.0 + np.exp(-ehr_logit))
            if label == 0:
                pe_type = "none"
            elif rng.random() < cfg.subsegmental_fraction:
                pe_type = "subsegmental"
            else:
                pe_type = ("central", "segmental")[int(rng.integers(2))]
            samples.append(
                PatientSample(f"p{idx:05d}", ct.astype(np.float32), ehr, label, pe_type, split)
            )
            idx += 1
    return Dataset(samples, cfg.d, cfg.D_e)


def generate_synthetic(cfg, out_dir):
    """Write a synthetic dataset to ``out_dir`` and return the manifest path."""
    return save_dataset(synthesize(cfg), out_dir)
