"""Longitudinal panel ingestion, validation, and design expansion.

A long-format CSV (one row per subject-occasion) is parsed into a
:class:`PanelDataset`, checked by :func:`validate`, and expanded by
:func:`expand_design` into the stacked matrices every estimation module
consumes. Subject-level covariates ``z`` are replicated per row in files
but stored once per subject; the latent confounder is never stored.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np


class SchemaError(ValueError):
    """A required column is missing or the schema mapping is malformed."""


class DataValidationError(ValueError):
    """Input rows violate the panel contract (bad treatment code, drifting z, ...)."""


@dataclass(frozen=True)
class SchemaConfig:
    """Column naming for long-format panel CSV files."""

    outcome: str
    treatment: str
    z_cols: tuple[str, ...]
    x_cols: tuple[str, ...]
    id_col: str = "id"

    def __post_init__(self):
        object.__setattr__(self, "z_cols", tuple(self.z_cols))
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        names = [self.id_col, self.outcome, self.treatment, *self.z_cols, *self.x_cols]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema names a column twice: {names}")

    @classmethod
    def generic(cls, p1: int, p2: int) -> "SchemaConfig":
        """Default names for simulated data: y, d, z1..zp1, x1..xp2."""
        return cls(
            outcome="y",
            treatment="d",
            z_cols=tuple(f"z{k + 1}" for k in range(p1)),
            x_cols=tuple(f"x{k + 1}" for k in range(p2)),
            id_col="id",
        )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "SchemaConfig":
        """Build from a key=value mapping; list values are comma separated."""
        def split(key):
            raw = mapping.get(key, "")
            return tuple(s.strip() for s in str(raw).split(",") if s.strip())

        for key in ("outcome", "treatment"):
            if not str(mapping.get(key, "")).strip():
                raise SchemaError(f"schema config is missing required key '{key}'")
        return cls(
            outcome=str(mapping["outcome"]).strip(),
            treatment=str(mapping["treatment"]).strip(),
            z_cols=split("z_cols"),
            x_cols=split("x_cols"),
            id_col=str(mapping.get("id_col", "id")).strip() or "id",
        )


@dataclass(frozen=True)
class PanelRecord:
    """One subject-occasion row: outcome, binary treatment, time-varying covariates."""

    subject_id: str
    y: float
    d: int
    x: np.ndarray
    j: int  # 1-based occasion index, file order within subject

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


@dataclass(frozen=True)
class Subject:
    subject_id: str
    z: np.ndarray
    records: tuple[PanelRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class PanelDataset:
    """Ordered subjects, each holding its z vector and ordered records."""

    subjects: tuple[Subject, ...]
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        p1 = len(self.subjects[0].z) if self.subjects else len(self.z_names)
        p2 = len(self.subjects[0].records[0].x) if self.subjects and self.subjects[0].records else len(self.x_names)
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{k + 1}" for k in range(p1)))
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{k + 1}" for k in range(p2)))

    @property
    def m(self) -> int:
        return len(self.subjects)

    @property
    def N(self) -> int:
        return sum(len(s.records) for s in self.subjects)

    @property
    def p1(self) -> int:
        return len(self.z_names)

    @property
    def p2(self) -> int:
        return len(self.x_names)


@dataclass(frozen=True)
class ExpandedDesign:
    """Stacked design structures.

    Row blocks are contiguous per subject, in dataset order. ``x_star`` rows
    are (1, z_i, x_ij); ``x_tilde`` rows are (x_star, d_ij * x_star).
    Immutable after construction; safe to share across parallel workers.
    """

    x_star: np.ndarray       # (N, p), p = p1 + p2 + 1
    x_tilde: np.ndarray      # (N, 2p)
    d: np.ndarray            # (N,) float 0/1
    y: np.ndarray            # (N,)
    subject_index: np.ndarray  # (N,) int, 0..m-1
    offsets: np.ndarray      # (m+1,) row offsets per subject
    subject_ids: tuple[str, ...]
    feature_names: tuple[str, ...]  # length p, first is the intercept

    @property
    def m(self) -> int:
        return len(self.subject_ids)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x_star.shape[1]

    @property
    def n_per_subject(self) -> np.ndarray:
        return np.diff(self.offsets)

    def subject(self, i: int) -> "ExpandedDesign":
        """Single-subject view (index 0..m-1); arrays are slices, not copies."""
        lo, hi = int(self.offsets[i]), int(self.offsets[i + 1])
        return ExpandedDesign(
            x_star=self.x_star[lo:hi],
            x_tilde=self.x_tilde[lo:hi],
            d=self.d[lo:hi],
            y=self.y[lo:hi],
            subject_index=np.zeros(hi - lo, dtype=np.intp),
            offsets=np.array([0, hi - lo], dtype=np.intp),
            subject_ids=(self.subject_ids[i],),
            feature_names=self.feature_names,
        )


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    reason: str
    subject_id: str | None = None
    row: int | None = None  # 1-based occasion within the subject

    def __str__(self):
        where = ""
        if self.subject_id is not None:
            where = f" [subject {self.subject_id}" + (f", record {self.row}]" if self.row else "]")
        return f"{self.severity}: {self.reason}{where}"


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def from_columns(columns: Mapping[str, Sequence], schema: SchemaConfig,
                 row_labels: Sequence[str] | None = None) -> PanelDataset:
    """Assemble a PanelDataset from parallel column arrays.

    Records are grouped by id preserving input order within each subject;
    subjects are ordered by first appearance. ``row_labels`` customizes how
    rows are cited in error messages (the CSV loader passes file line numbers).
    """
    for name in (schema.id_col, schema.outcome, schema.treatment, *schema.z_cols, *schema.x_cols):
        if name not in columns:
            raise SchemaError(f"missing required column '{name}'")
    ids = [str(v) for v in columns[schema.id_col]]
    n_rows = len(ids)
    if n_rows == 0:
        raise DataValidationError("no data rows")
    labels = [str(r + 1) for r in range(n_rows)] if row_labels is None else [str(v) for v in row_labels]

    def col(name):
        vals = columns[name]
        if len(vals) != n_rows:
            raise SchemaError(f"column '{name}' has {len(vals)} rows, expected {n_rows}")
        out = np.empty(n_rows, dtype=float)
        for r, v in enumerate(vals):
            try:
                out[r] = float(v)
            except (TypeError, ValueError):
                raise DataValidationError(
                    f"column '{name}' has non-numeric value {v!r} on row {labels[r]}") from None
        return out

    y = col(schema.outcome)
    d_raw = col(schema.treatment)
    z_block = np.column_stack([col(c) for c in schema.z_cols]) if schema.z_cols else np.empty((n_rows, 0))
    x_block = np.column_stack([col(c) for c in schema.x_cols]) if schema.x_cols else np.empty((n_rows, 0))

    bad = [r for r in range(n_rows) if d_raw[r] not in (0.0, 1.0)]
    if bad:
        r = bad[0]
        raise DataValidationError(
            f"treatment column '{schema.treatment}' must be 0 or 1; got {d_raw[r]!r} on row {labels[r]}")

    order: dict[str, int] = {}
    rows_of: list[list[int]] = []
    for r, sid in enumerate(ids):
        if sid not in order:
            order[sid] = len(rows_of)
            rows_of.append([])
        rows_of[order[sid]].append(r)

    subjects = []
    for sid, pos in order.items():
        rows = rows_of[pos]
        z = z_block[rows[0]]
        for r in rows[1:]:
            if not np.array_equal(z_block[r], z, equal_nan=True):
                raise DataValidationError(
                    f"subject-level columns vary within subject {sid!r}: "
                    f"row {labels[rows[0]]} has {z.tolist()} but row {labels[r]} has {z_block[r].tolist()}")
        records = tuple(
            PanelRecord(subject_id=sid, y=float(y[r]), d=int(d_raw[r]), x=x_block[r], j=k + 1)
            for k, r in enumerate(rows)
        )
        subjects.append(Subject(subject_id=sid, z=z, records=records))
    return PanelDataset(subjects=tuple(subjects), z_names=schema.z_cols, x_names=schema.x_cols)


def load_csv(path, schema: SchemaConfig) -> PanelDataset:
    """Parse a long-format panel CSV.

    Blank lines and lines starting with '#' are skipped (emitted artifacts
    embed their config that way), so error messages cite 1-based file line
    numbers as seen in an editor.
    """
    lines: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, 1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            lines.append((lineno, raw))
    if not lines:
        raise DataValidationError(f"{path}: file has no content rows")

    def parse(line):
        return next(csv.reader([line]))

    header = [h.strip() for h in parse(lines[0][1])]
    data_lines = lines[1:]
    if not data_lines:
        raise DataValidationError(f"{path}: no data rows")
    index = {name: k for k, name in enumerate(header)}
    needed = (schema.id_col, schema.outcome, schema.treatment, *schema.z_cols, *schema.x_cols)
    for name in needed:
        if name not in index:
            raise SchemaError(f"{path}: missing required column '{name}'")

    columns: dict[str, list] = {name: [] for name in needed}
    labels = []
    for lineno, raw in data_lines:
        fields = parse(raw)
        if len(fields) != len(header):
            raise DataValidationError(
                f"{path}: row {lineno} has {len(fields)} fields, header has {len(header)}")
        for name in needed:
            columns[name].append(fields[index[name]].strip())
        labels.append(str(lineno))
    try:
        return from_columns(columns, schema, row_labels=labels)
    except (DataValidationError, SchemaError) as exc:
        raise type(exc)(f"{path}: {exc}") from None


def write_csv(ds: PanelDataset, path, schema: SchemaConfig | None = None,
              header_comments: Iterable[str] = ()) -> None:
    """Emit a dataset as long-format CSV that round-trips through load_csv."""
    schema = schema or SchemaConfig.generic(ds.p1, ds.p2)
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    cols = [schema.id_col, schema.outcome, schema.treatment, *schema.z_cols, *schema.x_cols]
    buf.write(",".join(cols) + "\n")
    for subj in ds.subjects:
        z_text = [repr(float(v)) for v in subj.z]
        for rec in subj.records:
            row = [subj.subject_id, repr(float(rec.y)), str(int(rec.d)), *z_text,
                   *(repr(float(v)) for v in rec.x)]
            buf.write(",".join(row) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def drop_columns(ds: PanelDataset, names: Sequence[str]) -> PanelDataset:
    """Dataset with the named z/x covariates removed (sensitivity refits)."""
    names = set(names)
    unknown = names - set(ds.z_names) - set(ds.x_names)
    if unknown:
        raise SchemaError(f"cannot drop unknown columns: {sorted(unknown)}")
    keep_z = [k for k, n in enumerate(ds.z_names) if n not in names]
    keep_x = [k for k, n in enumerate(ds.x_names) if n not in names]
    subjects = tuple(
        Subject(
            subject_id=s.subject_id,
            z=s.z[keep_z],
            records=tuple(replace(r, x=r.x[keep_x]) for r in s.records),
        )
        for s in ds.subjects
    )
    return PanelDataset(
        subjects=subjects,
        z_names=tuple(ds.z_names[k] for k in keep_z),
        x_names=tuple(ds.x_names[k] for k in keep_x),
    )


# --------------------------------------------------------------------------
# expansion and validation
# --------------------------------------------------------------------------

def expand_design(ds: PanelDataset) -> ExpandedDesign:
    """Stack per-subject design matrices; pure and deterministic."""
    n_per = [len(s.records) for s in ds.subjects]
    N = sum(n_per)
    p = 1 + ds.p1 + ds.p2
    x_star = np.empty((N, p))
    d = np.empty(N)
    y = np.empty(N)
    subject_index = np.empty(N, dtype=np.intp)
    offsets = np.zeros(len(ds.subjects) + 1, dtype=np.intp)
    row = 0
    for i, subj in enumerate(ds.subjects):
        for rec in subj.records:
            x_star[row, 0] = 1.0
            x_star[row, 1:1 + ds.p1] = subj.z
            x_star[row, 1 + ds.p1:] = rec.x
            d[row] = float(rec.d)
            y[row] = rec.y
            subject_index[row] = i
            row += 1
        offsets[i + 1] = row
    x_tilde = np.hstack([x_star, d[:, None] * x_star])
    feature_names = ("(intercept)", *ds.z_names, *ds.x_names)
    return ExpandedDesign(
        x_star=x_star, x_tilde=x_tilde, d=d, y=y,
        subject_index=subject_index, offsets=offsets,
        subject_ids=tuple(s.subject_id for s in ds.subjects),
        feature_names=feature_names,
    )


def design_column_names(design: ExpandedDesign) -> tuple[str, ...]:
    """Names of the 2p stacked x_tilde columns (interaction block prefixed d:)."""
    return tuple(design.feature_names) + tuple(f"d:{n}" for n in design.feature_names)


def subset_design(design: ExpandedDesign, subject_indices: Sequence[int]) -> ExpandedDesign:
    """Design restricted to the given subjects, in the given order.

    Repeated indices are allowed; each occurrence becomes a distinct subject
    with a fresh id (cluster bootstrap semantics).
    """
    subject_indices = np.asarray(subject_indices, dtype=np.intp)
    n_per = design.n_per_subject[subject_indices]
    offsets = np.zeros(len(subject_indices) + 1, dtype=np.intp)
    np.cumsum(n_per, out=offsets[1:])
    rows = np.concatenate([
        np.arange(design.offsets[i], design.offsets[i + 1]) for i in subject_indices
    ]) if len(subject_indices) else np.empty(0, dtype=np.intp)
    subject_index = np.repeat(np.arange(len(subject_indices), dtype=np.intp), n_per)
    return ExpandedDesign(
        x_star=design.x_star[rows],
        x_tilde=design.x_tilde[rows],
        d=design.d[rows],
        y=design.y[rows],
        subject_index=subject_index,
        offsets=offsets,
        subject_ids=tuple(f"b{k}" for k in range(len(subject_indices))),
        feature_names=design.feature_names,
    )


def validate(ds: PanelDataset) -> list[Diagnostic]:
    """Structural diagnostics; empty iff all dataset invariants hold.

    Invariant violations carry severity "error". A constant column in the
    stacked x_tilde (rank-deficiency risk, e.g. when no record is treated)
    is reported as a non-fatal "warning"; the intercept column is exempt.
    """
    out: list[Diagnostic] = []
    if ds.m == 0:
        return [Diagnostic("error", "dataset has no subjects")]
    seen: set[str] = set()
    p1, p2 = ds.p1, ds.p2
    for subj in ds.subjects:
        if subj.subject_id in seen:
            out.append(Diagnostic("error", "duplicate subject id", subj.subject_id))
        seen.add(subj.subject_id)
        if len(subj.records) == 0:
            out.append(Diagnostic("error", "subject has no records", subj.subject_id))
        if len(subj.z) != p1:
            out.append(Diagnostic("error", f"z has length {len(subj.z)}, expected {p1}", subj.subject_id))
        elif not np.all(np.isfinite(subj.z)):
            out.append(Diagnostic("error", "non-finite z entry", subj.subject_id))
        for rec in subj.records:
            if rec.d not in (0, 1):
                out.append(Diagnostic("error", f"treatment {rec.d!r} not in {{0, 1}}",
                                      subj.subject_id, rec.j))
            if not np.isfinite(rec.y):
                out.append(Diagnostic("error", "non-finite outcome", subj.subject_id, rec.j))
            if len(rec.x) != p2:
                out.append(Diagnostic("error", f"x has length {len(rec.x)}, expected {p2}",
                                      subj.subject_id, rec.j))
            elif not np.all(np.isfinite(rec.x)):
                out.append(Diagnostic("error", "non-finite x entry", subj.subject_id, rec.j))
    if any(diag.severity == "error" for diag in out):
        return out

    design = expand_design(ds)
    names = design_column_names(design)
    for col in range(1, design.x_tilde.shape[1]):  # column 0 is the intercept
        values = design.x_tilde[:, col]
        if values.size and float(values.max()) == float(values.min()):
            out.append(Diagnostic(
                "warning",
                f"design column '{names[col]}' is constant over all records (rank deficiency risk)",
            ))
    return out
