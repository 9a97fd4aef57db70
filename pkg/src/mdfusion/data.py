"""Embedding datasets: on-disk format, synthetic generation, patient-level folds.

A dataset directory holds ``manifest.json`` and one ``EMB1`` matrix per
modality. EMB1 layout (all little-endian)::

    b"EMB1" | dtype u8 (0=f32, 1=f64) | rows u32 | cols u32 | row-major payload
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, InputError
from .rng import Xoshiro256pp, derive_seed

EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MODALITIES = ("image", "tabular")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    patient_id: str
    label: int


@dataclass
class Dataset:
    """Manifest rows plus one embedding matrix per modality (row i = sample i)."""

    samples: list[Sample]
    embeddings: dict[str, np.ndarray]
    dtypes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ConsistencyError("duplicate sample_id in manifest")
        for s in self.samples:
            if s.label not in (0, 1):
                raise ConsistencyError(f"sample {s.sample_id}: label must be 0 or 1, got {s.label!r}")
        for name in MODALITIES:
            if name not in self.embeddings:
                raise ConsistencyError(f"missing modality '{name}'")
            mat = self.embeddings[name]
            if mat.ndim != 2 or mat.shape[0] != len(self.samples):
                raise ConsistencyError(
                    f"modality '{name}' has {mat.shape[0] if mat.ndim else 0} rows, "
                    f"manifest has {len(self.samples)} samples")
        self._index = {sid: i for i, sid in enumerate(ids)}

    @property
    def dim_c(self) -> int:
        return self.embeddings["image"].shape[1]

    @property
    def dim_t(self) -> int:
        return self.embeddings["tabular"].shape[1]

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def patients(self) -> list[str]:
        """Distinct patient ids in first-appearance order."""
        return list(dict.fromkeys(s.patient_id for s in self.samples))

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ConsistencyError(f"unknown sample id {exc.args[0]!r}") from None

    def take(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(X_image, X_tabular, y)`` for the given sample ids."""
        idx = self.rows(ids)
        return (self.embeddings["image"][idx], self.embeddings["tabular"][idx],
                self.labels[idx])

    def truncate(self, top_k: int) -> Dataset:
        """Keep only the first ``top_k`` tabular columns (pre-ranked attributes)."""
        emb = dict(self.embeddings)
        emb["tabular"] = emb["tabular"][:, :top_k].copy()
        return Dataset(list(self.samples), emb, dict(self.dtypes))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.samples == other.samples
                and all(np.array_equal(self.embeddings[m], other.embeddings[m]) for m in MODALITIES))


# --------------------------------------------------------------------------
# EMB1 files
# --------------------------------------------------------------------------

def write_emb(path: Path, mat: np.ndarray, dtype: int = 1) -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    mat = np.asarray(mat)
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, dtype, rows, cols))
        fh.write(np.ascontiguousarray(mat, dtype=_DTYPES[dtype]).tobytes())


def read_emb(path: Path) -> tuple[np.ndarray, int]:
    """Read an EMB1 file; values are returned as native float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError(f"{path}: file too short for EMB1 header")
    magic, dtype, rows, cols = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {dtype}")
    dt = _DTYPES[dtype]
    expected = rows * cols * dt.itemsize
    payload = raw[_EMB_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, "
                          f"expected {expected} for {rows}x{cols} {dt}")
    mat = np.frombuffer(payload, dtype=dt).reshape(rows, cols).astype(np.float64)
    return mat, dtype


def write_dataset(ds: Dataset, directory: str | Path, dtype: int | None = None) -> None:
    """Write manifest + EMB1 files; ``dtype`` overrides the per-modality codes (default f64)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    modalities = []
    for name in MODALITIES:
        fname = f"{name}.emb"
        code = dtype if dtype is not None else ds.dtypes.get(name, 1)
        write_emb(directory / fname, ds.embeddings[name], code)
        modalities.append({"name": name, "dim": int(ds.embeddings[name].shape[1]), "file": fname})
    manifest = {
        "samples": [{"sample_id": s.sample_id, "patient_id": s.patient_id, "label": s.label}
                    for s in ds.samples],
        "modalities": modalities,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from None
    try:
        samples = [Sample(str(s["sample_id"]), str(s["patient_id"]), s["label"])
                   for s in manifest["samples"]]
        mods = manifest["modalities"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc!r})") from None

    embeddings, dtypes = {}, {}
    for m in mods:
        name = m["name"]
        if name not in MODALITIES:
            raise FormatError(f"{mpath}: unknown modality '{name}'")
        fpath = directory / m["file"]
        mat, code = read_emb(fpath)
        if mat.shape[1] != m["dim"]:
            raise FormatError(f"{fpath}: manifest declares dim {m['dim']}, "
                              f"file has {mat.shape[1]} columns ({mat.shape[0]}x{mat.shape[1]})")
        if mat.shape[0] != len(samples):
            raise ConsistencyError(f"{fpath}: {mat.shape[0]} rows for {len(samples)} manifest samples")
        embeddings[name] = mat
        dtypes[name] = code
    return Dataset(samples, embeddings, dtypes)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    samples_per_patient: int = 1
    latent_dim: int = 8
    dim_c: int = 32
    dim_t: int = 16
    sigma_c: float = 2.0
    sigma_t: float = 1.0
    label_noise: float = 0.0
    seed: int = 42

    def validate(self) -> None:
        for name in ("n_patients", "samples_per_patient", "latent_dim", "dim_c", "dim_t"):
            if getattr(self, name) < 1:
                raise InputError(f"SynthConfig.{name} must be >= 1")
        if self.sigma_c < 0 or self.sigma_t < 0:
            raise InputError("noise standard deviations must be >= 0")
        if not 0.0 <= self.label_noise < 0.5:
            raise InputError("label_noise must lie in [0, 0.5)")


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Two noisy linear views of a shared per-patient latent.

    Draw order from one xoshiro256++ stream seeded with ``cfg.seed``:
    image projection (dim_c x k), tabular projection (dim_t x k), then per
    patient: latent (k), label-flip uniform, and per sample image noise
    (dim_c) followed by tabular noise (dim_t). Projection entries are
    unscaled N(0, 1), so each clean coordinate has variance k.
    """
    cfg.validate()
    rng = Xoshiro256pp(cfg.seed)
    k = cfg.latent_dim
    proj_c = rng.normals(cfg.dim_c, k)
    proj_t = rng.normals(cfg.dim_t, k)

    samples, xs_c, xs_t = [], [], []
    width = len(str(cfg.n_patients - 1))
    for p in range(cfg.n_patients):
        u = rng.normals(k)
        label = 1 if u[0] > 0 else 0
        if rng.uniform() < cfg.label_noise:
            label = 1 - label
        pid = f"P{p:0{width}d}"
        for s in range(cfg.samples_per_patient):
            noise_c = rng.normals(cfg.dim_c)
            noise_t = rng.normals(cfg.dim_t)
            xs_c.append(proj_c @ u + cfg.sigma_c * noise_c)
            xs_t.append(proj_t @ u + cfg.sigma_t * noise_t)
            samples.append(Sample(f"{pid}-S{s}", pid, label))
    emb = {"image": np.array(xs_c), "tabular": np.array(xs_t)}
    return Dataset(samples, emb, {"image": 1, "tabular": 1})


# --------------------------------------------------------------------------
# folds and batches
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int


def split_folds(ds: Dataset, n_folds: int = 4, val_frac: float = 0.10, seed: int = 0) -> list[FoldSplit]:
    """Patient-level K-fold split with a patient-level validation holdout.

    Patients are shuffled and dealt round-robin into folds. For fold f the
    test set is fold f; the first ceil(val_frac * remaining) remaining
    patients (in shuffled order) form validation, the rest train.
    """
    patients = ds.patients()
    if len(patients) < n_folds:
        raise InputError(f"fewer patients than folds: {len(patients)} patients for {n_folds} folds")
    order = [patients[i] for i in Xoshiro256pp(seed).permutation(len(patients))]
    fold_of = {pid: i % n_folds for i, pid in enumerate(order)}

    by_patient: dict[str, list[str]] = {}
    for s in ds.samples:
        by_patient.setdefault(s.patient_id, []).append(s.sample_id)

    splits = []
    for f in range(n_folds):
        test_p = [p for p in order if fold_of[p] == f]
        rest = [p for p in order if fold_of[p] != f]
        n_val = math.ceil(val_frac * len(rest))
        val_p, train_p = rest[:n_val], rest[n_val:]
        expand = lambda ps: [sid for p in ps for sid in by_patient[p]]  # noqa: E731
        splits.append(FoldSplit(f, expand(train_p), expand(val_p), expand(test_p), seed))
    return splits


def batch_iter(ds: Dataset, ids: Sequence[str], batch_size: int, shuffle_seed: int,
               epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(X_image, X_tabular, y)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    idx = ds.rows(ids)
    perm = Xoshiro256pp(derive_seed(shuffle_seed, epoch)).permutation(len(idx))
    idx = idx[perm] if len(idx) else idx
    x_c, x_t, y = ds.embeddings["image"], ds.embeddings["tabular"], ds.labels
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        yield x_c[b], x_t[b], y[b]


def epoch_order(ds: Dataset, ids: Sequence[str], shuffle_seed: int, epoch: int) -> list[str]:
    """The sample-id order ``batch_iter`` uses for one epoch."""
    perm = Xoshiro256pp(derive_seed(shuffle_seed, epoch)).permutation(len(ids))
    return [ids[i] for i in perm]
