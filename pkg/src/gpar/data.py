"""Multi-output datasets: masks, orderings, CSV files, benchmark splits.

A dataset holds inputs ``x`` (n, d) and outputs ``y`` (n, m) with a
boolean observation mask; unobserved cells are stored as NaN. The
chained model requires *closed downwards* data under an output
ordering: whenever an output is observed at a location, every
earlier-ordered output is observed there too (each row's observed set
is a prefix). This module checks and optionally repairs that pattern.

CSV format: header row required, comma separated, UTF-8, decimal point,
no thousands separators; an empty cell in an output column means
"unobserved". Floats are written with ``repr`` so a save/load round
trip is bit exact.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ProtocolError


@dataclass(frozen=True)
class OutputOrdering:
    """A permutation of output columns; position 0 is modelled first."""

    perm: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise DataError(f"not a permutation: {self.perm}")

    @classmethod
    def identity(cls, m: int) -> "OutputOrdering":
        return cls(tuple(range(m)))

    def __len__(self):
        return len(self.perm)

    def __iter__(self):
        return iter(self.perm)


@dataclass(frozen=True)
class Violation:
    """First cell breaking the closed-downwards property."""

    row: int
    output: int
    output_name: str


@dataclass
class MultiOutputDataset:
    x: np.ndarray          # (n, d)
    y: np.ndarray          # (n, m); NaN where unobserved
    mask: np.ndarray       # (n, m) bool; True = observed
    output_names: tuple[str, ...]
    input_names: tuple[str, ...]

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float)).copy()
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        self.output_names = tuple(self.output_names)
        self.input_names = tuple(self.input_names)
        n, d = self.x.shape
        if self.y.shape[0] != n or self.mask.shape != self.y.shape:
            raise DataError(
                f"inconsistent shapes: x {self.x.shape}, y {self.y.shape}, "
                f"mask {self.mask.shape}")
        if len(self.output_names) != self.y.shape[1]:
            raise DataError("output_names length does not match y columns")
        if len(self.input_names) != d:
            raise DataError("input_names length does not match x columns")
        if not np.all(np.isfinite(self.x)):
            raise DataError("inputs contain non-finite values")
        if not np.all(np.isfinite(self.y[self.mask])):
            raise DataError("observed output cells contain non-finite values")
        self.y[~self.mask] = np.nan

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def n_inputs(self):
        return self.x.shape[1]

    @property
    def n_outputs(self):
        return self.y.shape[1]

    @classmethod
    def from_arrays(cls, x, y, mask=None, output_names=None, input_names=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if mask is None:
            mask = np.isfinite(y)
        if output_names is None:
            output_names = tuple(f"y{i + 1}" for i in range(y.shape[1]))
        if input_names is None:
            input_names = tuple(f"x{i + 1}" for i in range(x.shape[1]))
        return cls(x, y, np.asarray(mask, dtype=bool), output_names,
                   input_names)

    def fingerprint(self) -> str:
        """Content hash covering values, masks, and column names."""
        h = hashlib.sha256()
        h.update(",".join(self.input_names).encode())
        h.update(",".join(self.output_names).encode())
        h.update(np.ascontiguousarray(self.x).tobytes())
        y = self.y.copy()
        y[~self.mask] = np.nan  # canonical NaN for unobserved cells
        h.update(np.ascontiguousarray(y).tobytes())
        h.update(np.ascontiguousarray(self.mask).tobytes())
        return h.hexdigest()


def load_csv(path, input_cols, output_cols,
             require_observed: bool = True) -> MultiOutputDataset:
    """Read a dataset, mapping empty output cells to unobserved.

    ``input_cols`` and ``output_cols`` name header columns; other
    columns are ignored. With ``require_observed`` (the default), a row
    with no observed output at all is a :class:`DataError`; prediction
    inputs can disable this.
    """
    input_cols = list(input_cols)
    output_cols = list(output_cols)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        idx = {}
        for name in input_cols + output_cols:
            matches = [i for i, h in enumerate(header) if h == name]
            if not matches:
                raise DataError(f"{path}: column '{name}' not in header")
            if len(matches) > 1:
                raise DataError(f"{path}: column '{name}' appears twice")
            idx[name] = matches[0]

        xs, ys, masks = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, "
                                f"expected {len(header)}")
            xrow = []
            for name in input_cols:
                cell = row[idx[name]].strip()
                try:
                    xrow.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}, column '{name}': cannot "
                        f"parse {cell!r} as a number") from None
            yrow, mrow = [], []
            for name in output_cols:
                cell = row[idx[name]].strip()
                if cell == "":
                    yrow.append(np.nan)
                    mrow.append(False)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}, column '{name}': cannot "
                        f"parse {cell!r} as a number") from None
                yrow.append(value)
                mrow.append(True)
            if output_cols and require_observed and not any(mrow):
                raise DataError(f"{path}: row {row_no} has no observed "
                                f"output; rows must observe at least one")
            xs.append(xrow)
            ys.append(yrow)
            masks.append(mrow)

    if not xs:
        raise DataError(f"{path}: no data rows")
    n = len(xs)
    y = np.array(ys, dtype=float) if output_cols else np.zeros((n, 0))
    mask = np.array(masks, dtype=bool) if output_cols else np.zeros((n, 0),
                                                                    bool)
    return MultiOutputDataset(np.array(xs, dtype=float), y, mask,
                              tuple(output_cols), tuple(input_cols))


def save_csv(ds: MultiOutputDataset, path) -> None:
    """Write a dataset; inverse of :func:`load_csv` including masks."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ds.input_names) + list(ds.output_names))
        for r in range(ds.n):
            row = [repr(float(v)) for v in ds.x[r]]
            for c in range(ds.n_outputs):
                row.append(repr(float(ds.y[r, c])) if ds.mask[r, c] else "")
            writer.writerow(row)


def is_closed_downwards(ds: MultiOutputDataset, ordering: OutputOrdering):
    """Check the prefix property; returns ``(ok, first_violation)``.

    The violation names the earliest row (scanning top to bottom) whose
    observed set is not a prefix under the ordering, together with the
    first missing output that has a later observed one.
    """
    if len(ordering) != ds.n_outputs:
        raise DataError(f"ordering covers {len(ordering)} outputs, dataset "
                        f"has {ds.n_outputs}")
    m = ds.mask[:, list(ordering.perm)]
    if m.shape[1] <= 1:
        return True, None
    bad_rows = np.flatnonzero(np.any(~m[:, :-1] & m[:, 1:], axis=1))
    if bad_rows.size == 0:
        return True, None
    row = int(bad_rows[0])
    pos = int(np.flatnonzero(~m[row])[0])
    output = ordering.perm[pos]
    return False, Violation(row, output, ds.output_names[output])


def restrict_to_closed_downwards(ds: MultiOutputDataset,
                                 ordering: OutputOrdering):
    """Repair by keeping each row's longest observed prefix.

    Later observed cells are unflagged (their values dropped). Returns
    the repaired dataset and the number of cells dropped. Idempotent.
    """
    if len(ordering) != ds.n_outputs:
        raise DataError(f"ordering covers {len(ordering)} outputs, dataset "
                        f"has {ds.n_outputs}")
    perm = list(ordering.perm)
    m = ds.mask[:, perm]
    keep = np.cumprod(m, axis=1).astype(bool)  # prefix of observed cells
    new_mask = np.zeros_like(ds.mask)
    new_mask[:, perm] = keep
    dropped = int(ds.mask.sum() - new_mask.sum())
    y = ds.y.copy()
    y[~new_mask] = np.nan
    return replace(ds, y=y, mask=new_mask), dropped


def checksum_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Benchmark protocols.
#
# Canonical CSV layouts (one file per task, fully observed; the split
# functions mask cells into train/test):
#
# eeg.csv       256 rows: time,F3,F4,F5,F6,FZ,F1,F2
#               (voltage traces; fully observed electrodes first)
# jura.csv      359 rows: x,y,nickel,zinc,cadmium
#               (259 survey points followed by the 100 extra points)
# exchange.csv  251 rows: day,EUR,GBP,CHF,HKD,NZD,KRW,MXN,gold,silver,
#               platinum,CAD,JPY,AUD (trading days 1..251 of 2007,
#               rates/prices in USD)
#
# The modelling order equals the column order: fully observed outputs
# first, which the closed-downwards requirement forces.


@dataclass(frozen=True)
class BenchmarkLayout:
    filename: str
    input_cols: tuple[str, ...]
    output_cols: tuple[str, ...]
    n_rows: int
    source: str  # where the raw data can be obtained


BENCHMARKS = {
    "eeg": BenchmarkLayout(
        filename="eeg.csv",
        input_cols=("time",),
        output_cols=("F3", "F4", "F5", "F6", "FZ", "F1", "F2"),
        n_rows=256,
        source="UCI EEG database, control subject 337, trial 1 "
               "(https://archive.ics.uci.edu/ml/datasets/eeg+database)",
    ),
    "jura": BenchmarkLayout(
        filename="jura.csv",
        input_cols=("x", "y"),
        output_cols=("nickel", "zinc", "cadmium"),
        n_rows=359,
        source="Jura topsoil metal concentrations (Goovaerts), "
               "sampling + validation sets "
               "(https://sites.google.com/site/goovaertspierre/)",
    ),
    "exchange": BenchmarkLayout(
        filename="exchange.csv",
        input_cols=("day",),
        output_cols=("EUR", "GBP", "CHF", "HKD", "NZD", "KRW", "MXN",
                     "gold", "silver", "platinum", "CAD", "JPY", "AUD"),
        n_rows=251,
        source="2007 daily exchange rates w.r.t. USD "
               "(http://fx.sauder.ubc.ca)",
    ),
}

# (output, 0-based row ranges) observed in training, per benchmark;
# ranges are half-open. Everything not listed is fully observed.
_EEG_TRAIN = {name: [(0, 156)] for name in ("FZ", "F1", "F2")}
_EEG_TEST = {name: [(156, 256)] for name in ("FZ", "F1", "F2")}

_JURA_TRAIN = {"cadmium": [(0, 259)]}
_JURA_TEST = {"cadmium": [(259, 359)]}

# trading days are 1-based: day d lives in row d-1
_EX_TRAIN = {
    "CAD": [(0, 49), (100, 251)],   # observed days 1-49 and 101-251
    "JPY": [(0, 49), (150, 251)],   # observed days 1-49 and 151-251
    "AUD": [(0, 49), (200, 251)],   # observed days 1-49 and 201-251
}
_EX_TEST = {
    "CAD": [(49, 100)],             # predict days 50-100
    "JPY": [(99, 150)],             # predict days 100-150
    "AUD": [(149, 200)],            # predict days 150-200
}

_PROTOCOLS = {
    "eeg": (_EEG_TRAIN, _EEG_TEST),
    "jura": (_JURA_TRAIN, _JURA_TEST),
    "exchange": (_EX_TRAIN, _EX_TEST),
}


def _ranges_to_mask(n, ranges):
    out = np.zeros(n, dtype=bool)
    for lo, hi in ranges:
        out[lo:hi] = True
    return out


def benchmark_masks(name: str):
    """The (train_mask, test_mask) pair for a benchmark's canonical file."""
    if name not in BENCHMARKS:
        raise ProtocolError(f"unknown benchmark {name!r}; expected one of "
                            f"{sorted(BENCHMARKS)}")
    layout = BENCHMARKS[name]
    n, m = layout.n_rows, len(layout.output_cols)
    train_ranges, test_ranges = _PROTOCOLS[name]
    train_mask = np.ones((n, m), dtype=bool)
    test_mask = np.zeros((n, m), dtype=bool)
    for col, name_ in enumerate(layout.output_cols):
        if name_ in train_ranges:
            train_mask[:, col] = _ranges_to_mask(n, train_ranges[name_])
        if name_ in test_ranges:
            test_mask[:, col] = _ranges_to_mask(n, test_ranges[name_])
    return train_mask, test_mask


def benchmark_split(name: str, ds: MultiOutputDataset):
    """Apply a benchmark's documented train/test masking.

    The dataset must match the canonical layout for ``name`` and be
    fully observed (the held-out cells are the ground truth). Returns
    ``(train, test)``; the train set is closed downwards under the
    canonical column order, the test set keeps only the rows containing
    held-out cells, observed exactly at those cells.
    """
    if name not in BENCHMARKS:
        raise ProtocolError(f"unknown benchmark {name!r}; expected one of "
                            f"{sorted(BENCHMARKS)}")
    layout = BENCHMARKS[name]
    if ds.output_names != layout.output_cols:
        raise ProtocolError(
            f"{name}: output columns {list(ds.output_names)} do not match "
            f"the canonical layout {list(layout.output_cols)}")
    if ds.input_names != layout.input_cols:
        raise ProtocolError(
            f"{name}: input columns {list(ds.input_names)} do not match "
            f"the canonical layout {list(layout.input_cols)}")
    if ds.n != layout.n_rows:
        raise ProtocolError(f"{name}: expected {layout.n_rows} rows, "
                            f"got {ds.n}")
    if not ds.mask.all():
        raise ProtocolError(f"{name}: the canonical file must be fully "
                            f"observed; the split masks the held-out cells")

    train_mask, test_mask = benchmark_masks(name)
    train = replace(ds, y=ds.y.copy(), mask=train_mask)
    test_rows = np.flatnonzero(test_mask.any(axis=1))
    test = MultiOutputDataset(ds.x[test_rows], ds.y[test_rows],
                              test_mask[test_rows], ds.output_names,
                              ds.input_names)
    return train, test


def benchmark_ordering(name: str) -> OutputOrdering:
    """The documented modelling order for a benchmark (column order)."""
    if name not in BENCHMARKS:
        raise ProtocolError(f"unknown benchmark {name!r}")
    return OutputOrdering.identity(len(BENCHMARKS[name].output_cols))
