"""Datasets: UCR-style text ingestion, normalization, splits and a synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from fei.errors import ConfigError, DataError


TASKS = ("classification", "regression")


@dataclass
class Dataset:
    """``values`` is ``(N, C, L)``; ``labels`` holds class indices or regression targets."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    task: str = "classification"
    num_classes: Optional[int] = None
    name: str = ""
    sampling_rate: Optional[float] = None
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, None, :]
        if self.values.ndim != 3:
            raise DataError(f"dataset values must be (N, C, L), got shape {self.values.shape}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if len(self.values) and self.length < 2:
            raise DataError(f"series length must be >= 2, got {self.length}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.values):
                raise DataError(f"{len(self.labels)} labels for {len(self.values)} samples")
            if self.task == "classification":
                self.labels = self.labels.astype(np.int64)
                if self.num_classes is None:
                    self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
                if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                    raise DataError(f"class labels must lie in [0, {self.num_classes})")
            else:
                self.labels = self.labels.astype(np.float64)
                if not np.all(np.isfinite(self.labels)):
                    raise DataError("regression targets must be finite")

    def __len__(self):
        return len(self.values)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, values=self.values[idx], labels=labels)


def _parse_row(line: str, delim: Optional[str]) -> list[str]:
    if delim is None:
        return line.split()
    return [tok.strip() for tok in line.split(delim)]


def load_ucr_tsv(path, length: Optional[int] = None, task: str = "classification") -> Dataset:
    """Load a UCR-style file: one sample per row, label first, then the values.

    The delimiter (tab, comma or whitespace) is detected from the first row.
    Class labels are remapped to ``0..K-1`` in sorted order of the raw labels.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"dataset file is empty: {path}")
    first = lines[0]
    delim = "\t" if "\t" in first else ("," if "," in first else None)

    raw_labels, rows = [], []
    for lineno, line in enumerate(lines, start=1):
        toks = _parse_row(line, delim)
        try:
            nums = [float(t) for t in toks]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric field in row") from None
        if len(nums) < 3:
            raise DataError(f"{path}:{lineno}: expected a label and at least 2 values, got {len(nums)} fields")
        if rows and len(nums) - 1 != len(rows[0]):
            raise DataError(f"{path}:{lineno}: row has {len(nums) - 1} values, expected {len(rows[0])}")
        if not np.all(np.isfinite(nums)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        raw_labels.append(nums[0])
        rows.append(nums[1:])

    values = np.asarray(rows, dtype=np.float64)[:, None, :]
    if length is not None and values.shape[-1] != length:
        raise DataError(f"{path}: series length {values.shape[-1]} does not match configured length {length}")
    raw = np.asarray(raw_labels)
    if task == "classification":
        classes, labels = np.unique(raw, return_inverse=True)
        return Dataset(values, labels, task, len(classes), name=path.stem, class_names=classes.tolist())
    return Dataset(values, raw, task, name=path.stem)


def save_ucr_tsv(ds: Dataset, path, delimiter: str = "\t") -> None:
    """Write a univariate dataset in the format read by :func:`load_ucr_tsv`."""
    if ds.channels != 1:
        raise DataError("UCR text format holds univariate series only")
    labels = ds.labels if ds.labels is not None else np.zeros(len(ds))
    with open(path, "w") as fh:
        for y, x in zip(labels, ds.values[:, 0, :]):
            head = str(int(y)) if ds.task == "classification" else repr(float(y))
            fh.write(delimiter.join([head, *(repr(float(v)) for v in x)]) + "\n")


def normalize_per_sample(ds: Dataset, eps: float = 1e-8) -> Dataset:
    """Z-score every channel of every sample; constant channels become zeros."""
    x = ds.values
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    centered = x - mean
    out = np.where(std > eps, centered / np.where(std > eps, std, 1.0), 0.0)
    return replace(ds, values=out)


def class_frequencies(num_classes: int, length: int, min_bin: int = 2, spacing: int = 3,
                      freq_shift: int = 0) -> np.ndarray:
    """``(K, 2)`` frequency bins per class on an evenly spaced ladder.

    Class ``c`` owns rungs ``c`` and ``c + K`` so the two tones of a class are
    far apart while neighbouring classes differ by ``spacing`` bins.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if spacing < 1:
        raise ConfigError(f"class frequencies must be distinct bins, got spacing {spacing}")
    rungs = min_bin + freq_shift + spacing * np.arange(2 * num_classes)
    if rungs[0] < 1 or rungs[-1] > length // 2 - 1:
        raise ConfigError(
            f"{num_classes} classes with spacing {spacing} from bin {min_bin + freq_shift} "
            f"need bins up to {rungs[-1]}, but length {length} allows at most {length // 2 - 1}"
        )
    return np.stack([rungs[:num_classes], rungs[num_classes:]], axis=1)


def make_synthetic_freq_dataset(num_classes: int = 4, per_class: int = 500, length: int = 128,
                                noise_std: float = 0.1, seed: int = 0, min_bin: int = 2,
                                spacing: int = 3, freq_shift: int = 0) -> Dataset:
    """Two-tone sinusoid classes separable by their spectra.

    Each sample of class ``c`` is ``a sin(2 pi f_c t / L + p) + a' sin(2 pi f'_c t / L + p')``
    plus Gaussian noise, with amplitudes in ``[0.5, 1.5]`` and uniform phases.
    ``freq_shift`` moves every class frequency up by that many bins.
    """
    freqs = class_frequencies(num_classes, length, min_bin, spacing, freq_shift)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = len(labels)
    t = np.arange(length)
    amps = rng.uniform(0.5, 1.5, size=(n, 2))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n, 2))
    f = freqs[labels]
    waves = amps[:, :, None] * np.sin(2 * np.pi * f[:, :, None] * t / length + phases[:, :, None])
    x = waves.sum(axis=1) + rng.normal(0.0, noise_std, size=(n, length))
    return Dataset(x[:, None, :], labels, "classification", num_classes, name="synthetic")


@dataclass
class SplitSpec:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    indices: Optional[tuple] = None


def _fraction_counts(total: int, fractions) -> list[int]:
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    counts = np.floor(fr * total).astype(int)
    # hand leftovers to the largest remainders
    rem = fr * total - counts
    for i in np.argsort(-rem, kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_indices(ds: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if spec.indices is not None:
        parts = [np.asarray(p, dtype=np.int64) for p in spec.indices]
        allidx = np.concatenate(parts)
        if len(np.unique(allidx)) != len(allidx):
            raise ConfigError("explicit split index lists overlap")
        if len(allidx) != len(ds) or set(allidx.tolist()) != set(range(len(ds))):
            raise ConfigError("explicit split index lists must cover every sample exactly once")
        return tuple(parts)

    rng = np.random.default_rng(spec.seed)
    if ds.task == "classification" and ds.labels is not None:
        parts = [[], [], []]
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.permutation(len(idx))]
            bounds = np.cumsum(_fraction_counts(len(idx), spec.fractions))
            for p, chunk in zip(parts, np.split(idx, bounds[:-1])):
                p.extend(chunk.tolist())
        out = []
        for p in parts:
            p = np.asarray(p, dtype=np.int64)
            out.append(p[rng.permutation(len(p))])
        return tuple(out)

    perm = rng.permutation(len(ds))
    bounds = np.cumsum(_fraction_counts(len(ds), spec.fractions))
    return tuple(np.split(perm, bounds[:-1]))


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded train/val/test split, stratified by class for classification data."""
    return tuple(ds.subset(idx) for idx in split_indices(ds, spec))


def sliding_windows(series: np.ndarray, window_len: int, stride: int,
                    label_fn: Optional[Callable[[int, int], float]] = None,
                    task: str = "regression", name: str = "windows") -> Dataset:
    """Cut a long ``(C, T)`` or ``(T,)`` recording into windows.

    ``label_fn(start, end)`` supplies the target of each window, e.g. the
    remaining-useful-life ratio at its end.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    total = x.shape[-1]
    if window_len < 2 or window_len > total:
        raise DataError(f"window length {window_len} does not fit a series of length {total}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    starts = range(0, total - window_len + 1, stride)
    windows = np.stack([x[:, s:s + window_len] for s in starts])
    labels = None
    if label_fn is not None:
        labels = np.asarray([label_fn(s, s + window_len) for s in starts])
    return Dataset(windows, labels, task, name=name)
