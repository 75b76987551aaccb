"""Cohort loading, phenotype encoding, synthetic cohorts, and fold planning."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .kernels import pearson_upper


# ---- schema and cohort types -------------------------------------------


@dataclass(frozen=True)
class AttributeSpec:
    """One non-imaging attribute: categorical with a vocabulary, or
    continuous with a match tolerance (used by the affinity tables)."""

    name: str
    kind: str  # "categorical" | "continuous"
    vocabulary: tuple = ()
    tolerance: float = 0.0

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValidationError(f"attribute {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.vocabulary:
                raise ValidationError(f"attribute {self.name}: empty vocabulary")
            object.__setattr__(self, "vocabulary",
                               tuple(sorted(set(str(v) for v in self.vocabulary))))
        elif self.tolerance <= 0:
            raise ValidationError(
                f"attribute {self.name}: continuous attributes need a positive tolerance")

    def encode(self, value, subject_id: str) -> float:
        if value is None or (isinstance(value, str) and not value.strip()):
            raise ValidationError(
                f"subject {subject_id}: missing value for attribute {self.name!r}")
        if self.kind == "categorical":
            key = str(value).strip()
            try:
                return float(self.vocabulary.index(key))
            except ValueError:
                raise ValidationError(
                    f"subject {subject_id}: value {key!r} not in vocabulary of "
                    f"attribute {self.name!r}") from None
        out = float(value)
        if not np.isfinite(out):
            raise ValidationError(
                f"subject {subject_id}: non-finite value for attribute {self.name!r}")
        return out


@dataclass(frozen=True)
class CohortSchema:
    attributes: tuple
    label_map: dict = field(default_factory=lambda: {"0": 0, "1": 1})

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def match_tolerances(self) -> np.ndarray:
        # tolerance 0 means exact ordinal equality
        return np.array([a.tolerance if a.kind == "continuous" else 0.0
                         for a in self.attributes], dtype=np.float64)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    imaging_raw: np.ndarray  # flattened strict upper triangle of the FC matrix
    phenotypes: np.ndarray   # encoded attribute values, length v
    label: int


@dataclass
class Cohort:
    records: list
    schema: CohortSchema
    n_roi: int

    def __post_init__(self):
        n = len(self.records)
        if n < 2:
            raise ValidationError("cohort needs at least 2 subjects with both labels")
        d1 = self.n_roi * (self.n_roi - 1) // 2
        v = self.schema.n_attributes
        labels = set()
        for r in self.records:
            if r.imaging_raw.shape != (d1,):
                raise ValidationError(
                    f"subject {r.subject_id}: imaging vector length {r.imaging_raw.shape} "
                    f"!= expected {d1}")
            if r.phenotypes.shape != (v,):
                raise ValidationError(
                    f"subject {r.subject_id}: expected {v} phenotype values")
            if r.label not in (0, 1):
                raise ValidationError(f"subject {r.subject_id}: label must be 0 or 1")
            labels.add(r.label)
        if labels != {0, 1}:
            raise ValidationError("both labels required in the cohort")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_subjects(self) -> int:
        return len(self.records)

    def imaging_matrix(self) -> np.ndarray:
        return np.stack([r.imaging_raw for r in self.records])

    def phenotype_matrix(self) -> np.ndarray:
        return np.stack([r.phenotypes for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subject_ids(self) -> list:
        return [r.subject_id for r in self.records]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # of (train_idx, val_idx, test_idx) int arrays
    n_folds: int
    seed: int

    def split_codes(self, fold: int) -> np.ndarray:
        """Per-subject split code for one fold: 0 train, 1 val, 2 test."""
        train_idx, val_idx, test_idx = self.folds[fold]
        n = len(train_idx) + len(val_idx) + len(test_idx)
        codes = np.zeros(n, dtype=np.int64)
        codes[val_idx] = 1
        codes[test_idx] = 2
        return codes


# ---- functional connectivity features ----------------------------------


def compute_fc_vector(timeseries: np.ndarray) -> np.ndarray:
    """Flatten the strict upper triangle of the ROI-pairwise Pearson matrix
    (row-major order). Constant ROI rows correlate as 0."""
    ts = np.asarray(timeseries, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[0] < 2:
        raise ValidationError("time series must be a matrix with at least 2 ROI rows")
    if ts.shape[1] < 3:
        raise ValidationError("time series needs at least 3 samples per ROI")
    if not np.all(np.isfinite(ts)):
        raise ValidationError("time series contains non-finite values")
    return pearson_upper(ts)


def fc_vector_from_matrix(fc: np.ndarray) -> np.ndarray:
    fc = np.asarray(fc, dtype=np.float64)
    iu = np.triu_indices(fc.shape[0], k=1)
    return fc[iu].copy()


def roi_count_for_length(d1: int) -> int:
    n = (1 + math.isqrt(1 + 8 * d1)) // 2
    if n * (n - 1) // 2 != d1:
        raise ValidationError(f"feature length {d1} is not a valid upper-triangle size")
    return n


# ---- phenotype encoding -------------------------------------------------


def encode_phenotypes(subject_ids, raw_rows, schema: CohortSchema) -> np.ndarray:
    """Encode raw attribute values to the numeric N x v matrix.

    Categorical values become ordinal codes in sorted-vocabulary order;
    continuous values pass through as floats. Row order is preserved.
    """
    encoded = np.empty((len(raw_rows), schema.n_attributes), dtype=np.float64)
    for i, (sid, row) in enumerate(zip(subject_ids, raw_rows)):
        for j, attr in enumerate(schema.attributes):
            value = row.get(attr.name) if isinstance(row, dict) else row[j]
            encoded[i, j] = attr.encode(value, sid)
    return encoded


def _encode_label(raw, label_map, subject_id):
    key = str(raw).strip()
    if key in label_map:
        return int(label_map[key])
    raise ValidationError(
        f"subject {subject_id}: label {key!r} not covered by the label map "
        f"{sorted(label_map)}")


# ---- file loading -------------------------------------------------------


def _sniff_delimiter(header: str) -> str:
    for delim in ("\t", ",", ";"):
        if delim in header:
            return delim
    return None  # whitespace


def read_phenotype_table(path) -> tuple:
    """Parse the delimiter-separated phenotype table; returns
    (subject_ids, label_strings, rows-as-dicts, column names)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"phenotype table not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"phenotype table is empty: {path}")
    delim = _sniff_delimiter(lines[0])
    header = [c.strip() for c in (lines[0].split(delim) if delim else lines[0].split())]
    if "subject_id" not in header or "label" not in header:
        raise ValidationError("phenotype table needs 'subject_id' and 'label' columns")
    sid_col = header.index("subject_id")
    label_col = header.index("label")
    ids, labels, rows = [], [], []
    for ln in lines[1:]:
        parts = [c.strip() for c in (ln.split(delim) if delim else ln.split())]
        if len(parts) != len(header):
            raise ValidationError(f"malformed phenotype row: {ln!r}")
        ids.append(parts[sid_col])
        labels.append(parts[label_col])
        rows.append({h: p for h, p in zip(header, parts)})
    return ids, labels, rows, header


def _load_matrix_file(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    return np.atleast_2d(np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None))


def _imaging_vector_from_file(path: Path) -> tuple:
    """Load one subject's imaging file; FC matrices are detected as square
    symmetric matrices, anything else is treated as an ROI x T time series."""
    mat = _load_matrix_file(path)
    if mat.ndim != 2:
        raise ValidationError(f"{path}: expected a 2-D matrix")
    r, c = mat.shape
    if r == c and r >= 2 and np.allclose(mat, mat.T, atol=1e-8):
        return fc_vector_from_matrix(mat), r
    vec = compute_fc_vector(mat)
    return vec, r


def _collect_imaging(imaging_source, imaging_index=None) -> dict:
    """Map subject_id -> (fc_vector, n_roi) from either a per-subject file
    directory or a stacked N x d1 matrix plus an index file."""
    src = Path(imaging_source)
    out = {}
    if src.is_dir():
        for p in sorted(src.iterdir()):
            if p.suffix.lower() not in (".npy", ".txt", ".csv", ".tsv", ".1d"):
                continue
            out[p.stem] = _imaging_vector_from_file(p)
        if not out:
            raise ValidationError(f"no imaging files found under {src}")
        return out
    if not src.exists():
        raise ValidationError(f"imaging source not found: {src}")
    index_path = Path(imaging_index) if imaging_index else src.with_suffix(src.suffix + ".index")
    if not index_path.exists():
        raise ValidationError(f"stacked imaging matrix needs an index file ({index_path})")
    ids = [ln.strip() for ln in index_path.read_text().splitlines() if ln.strip()]
    stacked = _load_matrix_file(src)
    if stacked.shape[0] != len(ids):
        raise ValidationError(
            f"stacked matrix has {stacked.shape[0]} rows but index lists {len(ids)} subjects")
    n_roi = roi_count_for_length(stacked.shape[1])
    for sid, row in zip(ids, stacked):
        out[sid] = (row.astype(np.float64), n_roi)
    return out


def load_cohort(imaging_source, phenotype_source, schema: CohortSchema, *,
                drop_missing: bool = False, imaging_index=None) -> Cohort:
    """Join imaging features and phenotype rows on subject_id into a Cohort."""
    ids, raw_labels, rows, _ = read_phenotype_table(phenotype_source)
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate subject_id in phenotype table")
    imaging = _collect_imaging(imaging_source, imaging_index)

    missing = [sid for sid in ids if sid not in imaging]
    if missing:
        if not drop_missing:
            raise ValidationError(
                f"{len(missing)} subjects lack imaging data (e.g. {missing[:3]}); "
                "pass drop_missing to skip them")
        warnings.warn(f"dropping {len(missing)} subjects without imaging data")
        keep = [i for i, sid in enumerate(ids) if sid not in set(missing)]
        ids = [ids[i] for i in keep]
        raw_labels = [raw_labels[i] for i in keep]
        rows = [rows[i] for i in keep]

    encoded = encode_phenotypes(ids, rows, schema)
    n_rois = {imaging[sid][1] for sid in ids}
    if len(n_rois) != 1:
        raise ValidationError(f"inconsistent ROI counts across subjects: {sorted(n_rois)}")
    n_roi = n_rois.pop()

    records = []
    for i, sid in enumerate(ids):
        label = _encode_label(raw_labels[i], schema.label_map, sid)
        records.append(SubjectRecord(subject_id=sid, imaging_raw=imaging[sid][0],
                                     phenotypes=encoded[i], label=label))
    return Cohort(records=records, schema=schema, n_roi=n_roi)


# ---- synthetic cohorts ---------------------------------------------------


def generate_synthetic_cohort(n_subjects: int, n_roi: int, attribute_spec,
                              informativeness, seed: int, *,
                              n_informative_features: int = 8,
                              effect_size: float = 0.35,
                              noise_scale: float = 0.25) -> Cohort:
    """Deterministic synthetic cohort: class-conditional mean shift on a
    random feature subset, and attributes that agree with the label with
    probability 0.5 + informativeness/2.
    """
    if n_subjects < 4:
        raise ValidationError("synthetic cohort needs at least 4 subjects")
    informativeness = np.asarray(informativeness, dtype=np.float64)
    if len(informativeness) != len(attribute_spec):
        raise ValidationError("one informativeness value per attribute required")
    if np.any((informativeness < 0) | (informativeness > 1)):
        raise ValidationError("informativeness values must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    labels = np.zeros(n_subjects, dtype=np.int64)
    labels[n_subjects // 2:] = 1
    rng.shuffle(labels)

    d1 = n_roi * (n_roi - 1) // 2
    k = min(n_informative_features, d1)
    informative_idx = rng.choice(d1, size=k, replace=False)
    imaging = rng.normal(0.0, noise_scale, size=(n_subjects, d1))
    imaging[:, informative_idx] += effect_size * (2.0 * labels - 1.0)[:, None]
    np.clip(imaging, -0.999, 0.999, out=imaging)

    v = len(attribute_spec)
    phenotypes = np.zeros((n_subjects, v), dtype=np.float64)
    for u, attr in enumerate(attribute_spec):
        agree = rng.random(n_subjects) < 0.5 + informativeness[u] / 2.0
        if attr.kind == "categorical":
            size = len(attr.vocabulary)
            target = labels % size
            other = np.array([rng.choice([c for c in range(size) if c != t])
                              for t in target], dtype=np.float64)
            phenotypes[:, u] = np.where(agree, target.astype(np.float64), other)
        else:
            centers = np.array([0.0, 3.0 * attr.tolerance])
            chosen = np.where(agree, labels, 1 - labels)
            jitter = rng.uniform(-0.45, 0.45, n_subjects) * attr.tolerance
            phenotypes[:, u] = centers[chosen] + jitter

    records = [SubjectRecord(subject_id=f"syn{i:05d}", imaging_raw=imaging[i],
                             phenotypes=phenotypes[i], label=int(labels[i]))
               for i in range(n_subjects)]
    schema = CohortSchema(attributes=tuple(attribute_spec))
    return Cohort(records=records, schema=schema, n_roi=n_roi)


def synthetic_attribute_agreement(cohort: Cohort, attr_index: int) -> float:
    """Fraction of subjects whose synthetic attribute value designates their
    own label (the generator's agreement event)."""
    attr = cohort.schema.attributes[attr_index]
    values = cohort.phenotype_matrix()[:, attr_index]
    labels = cohort.labels()
    if attr.kind == "categorical":
        target = (labels % len(attr.vocabulary)).astype(np.float64)
        return float(np.mean(values == target))
    centers = np.array([0.0, 3.0 * attr.tolerance])
    return float(np.mean(np.abs(values - centers[labels]) <= attr.tolerance / 2.0))


# ---- stratified fold planning --------------------------------------------


def _fold_test_sizes(class_counts, n_folds):
    """Per-fold test allocation per class: every class and every fold total
    stays within +-1 of the exact proportion, classes partition exactly."""
    total = sum(class_counts)
    placed = [0 for _ in class_counts]
    tot_lo = max(1, math.ceil(total / n_folds - 1))
    tot_hi = math.floor(total / n_folds + 1)
    ranges = [range(max(0, math.ceil(nc / n_folds - 1)),
                    math.floor(nc / n_folds + 1) + 1) for nc in class_counts]
    plan = []
    for k in range(n_folds):
        rem = n_folds - k - 1
        best = None
        for t0 in ranges[0]:
            for t1 in ranges[1]:
                if abs(t0 + t1 - total / n_folds) > 1 + 1e-9:
                    continue
                feasible = True
                for c, t in ((0, t0), (1, t1)):
                    left = class_counts[c] - placed[c] - t
                    lo = max(0, math.ceil(class_counts[c] / n_folds - 1))
                    hi = math.floor(class_counts[c] / n_folds + 1)
                    if left < lo * rem or left > hi * rem:
                        feasible = False
                        break
                left_tot = total - sum(placed) - t0 - t1
                if left_tot < tot_lo * rem or left_tot > tot_hi * rem:
                    feasible = False
                if not feasible:
                    continue
                err = ((t0 - class_counts[0] / n_folds) ** 2
                       + (t1 - class_counts[1] / n_folds) ** 2
                       + (t0 + t1 - total / n_folds) ** 2)
                key = (err, t0, t1)
                if best is None or key < best:
                    best = key
        if best is None:  # pragma: no cover - excluded by the preconditions
            raise ValidationError("no feasible stratified allocation for this fold count")
        _, t0, t1 = best
        placed[0] += t0
        placed[1] += t1
        plan.append((t0, t1))
    return plan


def _fold_val_sizes(test_sizes, class_counts, n_folds):
    """Validation sizes per fold/class keeping val and train within +-1 of
    their 1/n and (n-2)/n proportions, per class and in total."""
    total = sum(class_counts)
    out = []
    for t0, t1 in test_sizes:
        best = None
        for v0 in range(max(0, math.ceil(class_counts[0] / n_folds - 1)),
                        math.floor(class_counts[0] / n_folds + 1) + 1):
            for v1 in range(max(0, math.ceil(class_counts[1] / n_folds - 1)),
                            math.floor(class_counts[1] / n_folds + 1) + 1):
                if abs(v0 + v1 - total / n_folds) > 1 + 1e-9:
                    continue
                if abs(t0 + v0 - 2 * class_counts[0] / n_folds) > 1 + 1e-9:
                    continue
                if abs(t1 + v1 - 2 * class_counts[1] / n_folds) > 1 + 1e-9:
                    continue
                if abs(t0 + t1 + v0 + v1 - 2 * total / n_folds) > 1 + 1e-9:
                    continue
                if v0 > class_counts[0] - t0 or v1 > class_counts[1] - t1:
                    continue
                err = ((v0 - class_counts[0] / n_folds) ** 2
                       + (v1 - class_counts[1] / n_folds) ** 2)
                key = (err, v0, v1)
                if best is None or key < best:
                    best = key
        if best is None:  # pragma: no cover
            raise ValidationError("no feasible validation allocation for this fold count")
        out.append((best[1], best[2]))
    return out


def make_fold_plan(labels, n_folds: int, seed: int) -> FoldPlan:
    """Stratified rotation plan: each subject is tested exactly once, and
    train/val/test per fold stay within +-1 of the (n-2):1:1 proportions
    (8:1:1 at ten folds), overall and per class."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_folds < 2:
        raise ValidationError("need at least 2 folds")
    class_idx = [np.flatnonzero(labels == c) for c in (0, 1)]
    counts = [len(ix) for ix in class_idx]
    if min(counts) < n_folds:
        raise ValidationError(
            f"class counts {counts} too small to stratify into {n_folds} folds")

    rng = np.random.default_rng(seed)
    order = [rng.permutation(ix) for ix in class_idx]
    test_sizes = _fold_test_sizes(counts, n_folds)
    val_sizes = _fold_val_sizes(test_sizes, counts, n_folds)

    starts = [0, 0]
    folds = []
    for k in range(n_folds):
        test_parts, val_parts = [], []
        for c in (0, 1):
            nc = counts[c]
            t, v = test_sizes[k][c], val_sizes[k][c]
            pos = np.arange(starts[c], starts[c] + t) % nc
            test_parts.append(order[c][pos])
            vpos = np.arange(starts[c] + t, starts[c] + t + v) % nc
            val_parts.append(order[c][vpos])
            starts[c] += t
        test_idx = np.sort(np.concatenate(test_parts))
        val_idx = np.sort(np.concatenate(val_parts))
        held = np.zeros(len(labels), dtype=bool)
        held[test_idx] = True
        held[val_idx] = True
        train_idx = np.flatnonzero(~held)
        folds.append((train_idx, val_idx, test_idx))
    return FoldPlan(folds=tuple(folds), n_folds=n_folds, seed=seed)


def stratified_subsample(labels, ratio: float, seed: int) -> np.ndarray:
    """Indices of a stratified subsample of exactly ceil(ratio * N) subjects
    (per-class counts proportional, both classes kept nonempty)."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 < ratio <= 1:
        raise ValidationError("sampling ratio must lie in (0, 1]")
    if ratio == 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    target = math.ceil(ratio * len(labels))
    counts = [int((labels == c).sum()) for c in (0, 1)]
    take = [min(counts[c], max(1, round(ratio * counts[c]))) for c in (0, 1)]
    while sum(take) > max(target, 2):
        c = int(np.argmax([take[c] - ratio * counts[c] for c in (0, 1)]))
        take[c] = max(1, take[c] - 1)
    while sum(take) < target:
        c = int(np.argmin([take[c] / counts[c] if counts[c] else 2 for c in (0, 1)]))
        if take[c] >= counts[c]:
            c = 1 - c
        take[c] += 1
    picks = [rng.choice(np.flatnonzero(labels == c), size=take[c], replace=False)
             for c in (0, 1)]
    return np.sort(np.concatenate(picks))
