"""Tabular ingestion, filtering, normalization and design construction.

File conventions (all tab-separated with a header row):

  counts table    first column gene ids, remaining columns one per sample,
                  integer entries.
  sample sheet    one row per sample; a 'sample' column is required and
                  must match the counts columns one-to-one.  Column types
                  are inferred (numeric vs categorical) unless an optional
                  leading comment line '#types col=num col=cat ...' or an
                  explicit override pins them.
  offsets table   columns 'sample' and 'offset'.

Normalization follows the trimmed-mean-of-log-ratios recipe: gene-wise
log2 ratios against a reference sample are doubly trimmed (30% on the
ratio, 5% on the average abundance), combined by precision-weighted mean,
and the resulting factors are centered to geometric mean 1.  Offsets are
log(library size x factor).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .glmm import DataError, LongitudinalDataset
from .inference import HypothesisSpec

__all__ = [
    "CountsTable",
    "SampleSheet",
    "read_counts",
    "write_counts",
    "read_sample_sheet",
    "read_offsets",
    "write_offsets",
    "cpm_filter",
    "tmm_offsets",
    "build_design",
    "build_dataset",
    "parse_hypothesis",
    "format_float",
]


def format_float(x) -> str:
    """Shortest decimal that round-trips to the same float."""
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return repr(float(x))


@dataclass
class CountsTable:
    """Gene-by-sample matrix of nonnegative integer counts."""

    genes: list
    samples: list
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (len(self.genes), len(self.samples)):
            raise DataError("counts shape must be (genes, samples)")
        if len(set(self.genes)) != len(self.genes):
            raise DataError("gene ids must be unique")
        if len(set(self.samples)) != len(self.samples):
            raise DataError("sample ids must be unique")
        if np.any(self.counts < 0):
            raise DataError("counts must be nonnegative")
        self.counts = self.counts.astype(np.int64)

    def library_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def row(self, gene: str) -> np.ndarray:
        return self.counts[self.genes.index(gene)]


@dataclass
class SampleSheet:
    """Per-sample covariates with light column typing."""

    samples: list
    columns: dict
    types: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.samples)) != len(self.samples):
            raise DataError("sample ids must be unique")
        for name, col in self.columns.items():
            if len(col) != len(self.samples):
                raise DataError(f"column {name!r} length mismatch")

    def reorder(self, sample_order) -> "SampleSheet":
        idx = [self.samples.index(s) for s in sample_order]
        return SampleSheet(
            samples=[self.samples[i] for i in idx],
            columns={k: np.asarray(v)[idx] for k, v in self.columns.items()},
            types=dict(self.types),
        )


def _read_rows(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        types = {}
        if first.startswith("#types"):
            for tok in first.split()[1:]:
                col, kind = tok.split("=")
                types[col] = kind
            first = fh.readline()
        header = first.rstrip("\n").split("\t")
        rows = [r for r in csv.reader(fh, delimiter="\t") if r]
    return header, rows, types


def read_counts(path) -> CountsTable:
    header, rows, _ = _read_rows(path)
    if len(header) < 2:
        raise DataError("counts table needs a gene-id column and at least one sample")
    samples = header[1:]
    genes, data = [], []
    for r in rows:
        if len(r) != len(header):
            raise DataError(f"ragged counts row for gene {r[0]!r}")
        genes.append(r[0])
        try:
            data.append([int(x) for x in r[1:]])
        except ValueError as e:
            raise DataError(f"non-integer count in gene {r[0]!r}: {e}") from None
    return CountsTable(genes=genes, samples=samples, counts=np.array(data, dtype=np.int64))


def write_counts(table: CountsTable, path, gene_col: str = "gene_id"):
    with open(path, "w", newline="") as fh:
        fh.write("\t".join([gene_col] + list(table.samples)) + "\n")
        for g, row in zip(table.genes, table.counts):
            fh.write("\t".join([g] + [str(int(x)) for x in row]) + "\n")


def _infer_type(values) -> str:
    try:
        [float(v) for v in values]
        return "num"
    except ValueError:
        return "cat"


def read_sample_sheet(path, type_overrides: dict | None = None) -> SampleSheet:
    header, rows, types = _read_rows(path)
    if "sample" not in header:
        raise DataError("sample sheet must have a 'sample' column")
    types.update(type_overrides or {})
    cols = {h: [r[i] for r in rows] for i, h in enumerate(header)}
    samples = cols.pop("sample")
    out = {}
    out_types = {}
    for name, vals in cols.items():
        kind = types.get(name) or _infer_type(vals)
        out_types[name] = kind
        if kind == "num":
            try:
                out[name] = np.array([float(v) for v in vals])
            except ValueError as e:
                raise DataError(f"column {name!r} declared numeric: {e}") from None
        else:
            out[name] = np.array(vals, dtype=object)
    return SampleSheet(samples=samples, columns=out, types=out_types)


def read_offsets(path) -> dict:
    header, rows, _ = _read_rows(path)
    if header[:2] != ["sample", "offset"]:
        raise DataError("offsets table must have columns 'sample' and 'offset'")
    return {r[0]: float(r[1]) for r in rows}


def write_offsets(offsets: dict, path):
    with open(path, "w", newline="") as fh:
        fh.write("sample\toffset\n")
        for s, o in offsets.items():
            fh.write(f"{s}\t{format_float(o)}\n")


# --------------------------------------------------------------------------
# filtering and normalization
# --------------------------------------------------------------------------


def cpm_filter(table: CountsTable, threshold_cpm: float = 1.0,
               min_fraction: float = 0.5) -> CountsTable:
    """Keep genes with CPM >= threshold in >= min_fraction of samples.

    Both comparisons are inclusive.  An empty result is returned (with a
    warning) rather than raised.
    """
    lib = table.library_sizes().astype(float)
    if np.any(lib <= 0):
        raise DataError("library sizes must be positive for CPM filtering")
    cpm = table.counts / lib[None, :] * 1e6
    frac = (cpm >= threshold_cpm).mean(axis=1)
    keep = frac >= min_fraction
    if not np.any(keep):
        import warnings

        warnings.warn("CPM filter removed every gene", RuntimeWarning)
    return CountsTable(
        genes=[g for g, k in zip(table.genes, keep) if k],
        samples=list(table.samples),
        counts=table.counts[keep],
    )


def _choose_reference(counts: np.ndarray, lib: np.ndarray) -> int:
    """Sample whose upper-quartile CPM is closest to the mean of those."""
    cpm = counts / lib[None, :] * 1e6
    q = np.quantile(cpm, 0.75, axis=0)
    return int(np.argmin(np.abs(q - q.mean())))


def tmm_offsets(table: CountsTable, trim_m: float = 0.30, trim_a: float = 0.05,
                ref_sample: str | None = None) -> dict:
    """Per-sample log effective library sizes by trimmed mean of M-values.

    Returns {sample: log(library size x normalization factor)}; the
    factors are centered so their geometric mean is exactly 1.

    Raises:
        DataError: fewer than two samples, or a sample sharing no
            expressed gene with the reference.
    """
    counts = table.counts.astype(float)
    n_samples = counts.shape[1]
    if n_samples < 2:
        raise DataError("normalization needs at least two samples")
    lib = counts.sum(axis=0)
    if np.any(lib <= 0):
        raise DataError("library sizes must be positive")
    ref = table.samples.index(ref_sample) if ref_sample is not None \
        else _choose_reference(counts, lib)
    log2 = np.log2
    factors = np.ones(n_samples)
    yr = counts[:, ref]
    for s in range(n_samples):
        if s == ref:
            continue
        ys = counts[:, s]
        both = (ys > 0) & (yr > 0)
        if not np.any(both):
            raise DataError(
                f"sample {table.samples[s]!r} shares no expressed genes with the reference"
            )
        ps = ys[both] / lib[s]
        pr = yr[both] / lib[ref]
        M = log2(ps / pr)
        A = 0.5 * log2(ps * pr)
        # inverse asymptotic variance of M
        w = 1.0 / ((lib[s] - ys[both]) / (lib[s] * ys[both])
                   + (lib[ref] - yr[both]) / (lib[ref] * yr[both]))
        n = M.size
        lo_m, hi_m = np.quantile(M, (trim_m, 1.0 - trim_m))
        lo_a, hi_a = np.quantile(A, (trim_a, 1.0 - trim_a))
        keep = (M >= lo_m) & (M <= hi_m) & (A >= lo_a) & (A <= hi_a)
        if not np.any(keep):
            keep = np.ones(n, dtype=bool)
        mbar = float(np.sum(M[keep] * w[keep]) / np.sum(w[keep]))
        factors[s] = 2.0 ** mbar
    factors /= np.exp(np.mean(np.log(factors)))
    return {
        s: float(np.log(lib[i] * factors[i]))
        for i, s in enumerate(table.samples)
    }


# --------------------------------------------------------------------------
# design construction
# --------------------------------------------------------------------------


def _term_column(term: str, sheet: SampleSheet):
    """Columns and names contributed by one formula term."""
    if ":" in term:
        parts = term.split(":")
        cols, names = [], []
        sub = [_term_column(p, sheet) for p in parts]
        # cartesian product of the factor columns
        def prod(acc_cols, acc_names, rest):
            if not rest:
                cols.append(acc_cols)
                names.append(acc_names)
                return
            for c, nm in zip(*rest[0]):
                prod(acc_cols * c, f"{acc_names}:{nm}" if acc_names else nm, rest[1:])
        first_cols, first_names = sub[0]
        for c, nm in zip(first_cols, first_names):
            prod(c, nm, sub[1:])
        return cols, names
    if term not in sheet.columns:
        raise DataError(f"unknown covariate {term!r} in the fixed-effect specification")
    col = sheet.columns[term]
    if sheet.types.get(term, "num") == "num":
        return [np.asarray(col, dtype=float)], [term]
    levels = sorted(set(col.tolist()))
    if len(levels) < 2:
        raise DataError(f"categorical covariate {term!r} has a single level")
    cols, names = [], []
    for lev in levels[1:]:  # first level is the baseline
        cols.append((col == lev).astype(float))
        names.append(f"{term}[{lev}]")
    return cols, names


def build_design(sheet: SampleSheet, formula: str):
    """(X, coef_names) from a '+'-separated fixed-effect specification.

    Terms are sample-sheet columns; 'a:b' denotes an interaction.  An
    intercept is always included as the first column.
    """
    terms = [t.strip() for t in formula.split("+") if t.strip()]
    n = len(sheet.samples)
    cols = [np.ones(n)]
    names = ["(intercept)"]
    for term in terms:
        tcols, tnames = _term_column(term, sheet)
        cols.extend(tcols)
        names.extend(tnames)
    return np.column_stack(cols), names


def build_dataset(y, sheet: SampleSheet, formula: str, subject_col: str = "subject",
                  time_col: str | None = "time", offsets: dict | None = None) -> LongitudinalDataset:
    """Long-format dataset for one gene from counts plus the sample sheet."""
    if subject_col not in sheet.columns:
        raise DataError(f"sample sheet has no {subject_col!r} column")
    X, names = build_design(sheet, formula)
    raw_subj = sheet.columns[subject_col]
    _, subject = np.unique(np.asarray(raw_subj, dtype=object), return_inverse=True)
    if offsets is None:
        offset = None
    else:
        missing = [s for s in sheet.samples if s not in offsets]
        if missing:
            raise DataError(f"offsets missing for samples {missing[:3]}...")
        offset = np.array([offsets[s] for s in sheet.samples])
    time = None
    if time_col and time_col in sheet.columns and sheet.types.get(time_col) == "num":
        time = np.asarray(sheet.columns[time_col], dtype=float)
    return LongitudinalDataset(
        y=np.asarray(y), X=X, subject=subject, offset=offset,
        coef_names=names, time=time,
    )


def parse_hypothesis(spec: str, coef_names) -> HypothesisSpec:
    """Hypothesis from a comma-separated coefficient list or '@matrix.tsv'.

    '@file' loads an explicit restriction matrix (one row per restriction,
    one tab-separated column per coefficient, optional last column 'b0='
    omitted -> zeros).
    """
    spec = spec.strip()
    if spec.startswith("@"):
        rows = []
        with open(spec[1:]) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                rows.append([float(x) for x in line.split("\t")])
        K = np.array(rows)
        if K.shape[1] == len(coef_names) + 1:
            return HypothesisSpec(K=K[:, :-1], b0=K[:, -1], name=spec)
        if K.shape[1] != len(coef_names):
            raise DataError(
                f"restriction matrix has {K.shape[1]} columns, expected {len(coef_names)}"
            )
        return HypothesisSpec(K=K, name=spec)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    return HypothesisSpec.for_coefficients(names, list(coef_names), name=spec)
