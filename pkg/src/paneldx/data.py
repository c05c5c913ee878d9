"""Patient records, panel schemes, synthetic generation, masking and splits.

A patient is a feature vector plus a binary label; features are grouped
into priced test panels, with an optional always-visible set observed for
free.  Empty CSV cells mark values missing at the source, which is a
different notion from "hidden by the policy": only policy-hidden cells
ever have a ground truth to supervise the imputer with.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ContractError, ParseError, SchemaError, StratificationError

LABEL_COLUMN = "y"


@dataclass(frozen=True)
class Panel:
    name: str
    cost: float
    features: tuple[int, ...]


@dataclass(frozen=True)
class PanelScheme:
    """Partition of the d features into priced panels plus free visibles."""

    feature_names: tuple[str, ...]
    panels: tuple[Panel, ...]
    visible: tuple[int, ...] = ()

    def __post_init__(self):
        d = len(self.feature_names)
        covered: set[int] = set(self.visible)
        if len(covered) != len(self.visible):
            raise SchemaError("duplicate indices in visible set")
        for panel in self.panels:
            if panel.cost < 0:
                raise SchemaError(f"panel {panel.name!r} has negative cost")
            for idx in panel.features:
                if idx in covered:
                    raise SchemaError(
                        f"feature index {idx} assigned twice (panel {panel.name!r})")
                covered.add(idx)
        if covered != set(range(d)):
            raise SchemaError("panels plus visible set must cover all features")

    @property
    def d(self) -> int:
        return len(self.feature_names)

    @property
    def n_panels(self) -> int:
        return len(self.panels)

    @property
    def costs(self) -> np.ndarray:
        return np.array([p.cost for p in self.panels], dtype=np.float64)

    def initial_mask(self) -> np.ndarray:
        """Observation mask at episode start: visible features only."""
        m = np.zeros(self.d, dtype=np.uint8)
        m[list(self.visible)] = 1
        return m

    def mask_from_panel_bits(self, bits) -> np.ndarray:
        """Panel-atomic mask: visible on, plus whole panels flagged in bits."""
        m = self.initial_mask()
        for k, on in enumerate(bits):
            if on:
                m[list(self.panels[k].features)] = 1
        return m

    def is_panel_atomic(self, mask: np.ndarray) -> bool:
        if not all(mask[i] == 1 for i in self.visible):
            return False
        for panel in self.panels:
            vals = {int(mask[i]) for i in panel.features}
            if len(vals) > 1:
                return False
        return True


def save_scheme(scheme: PanelScheme, path: str) -> None:
    doc = {
        "features": list(scheme.feature_names),
        "panels": [
            {"name": p.name, "cost": float(p.cost),
             "features": [scheme.feature_names[i] for i in p.features]}
            for p in scheme.panels
        ],
        "visible": [scheme.feature_names[i] for i in scheme.visible],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_scheme(path: str) -> PanelScheme:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    try:
        names = tuple(doc["features"])
        index = {n: i for i, n in enumerate(names)}
        panels = tuple(
            Panel(p["name"], float(p["cost"]),
                  tuple(index[f] for f in p["features"]))
            for p in doc["panels"])
        visible = tuple(index[f] for f in doc.get("visible", []))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed scheme document ({exc})") from exc
    return PanelScheme(names, panels, visible)


@dataclass
class PatientRecord:
    features: np.ndarray          # length d, float64; NaN where source-missing
    label: int                    # 0 = N, 1 = P
    id: str
    known: np.ndarray = field(default=None)  # ground truth available per feature

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.known is None:
            self.known = np.isfinite(self.features).astype(np.uint8)
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


def records_matrix(records: list[PatientRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (features, labels, known) arrays."""
    x = np.stack([r.features for r in records])
    y = np.array([r.label for r in records], dtype=np.int64)
    known = np.stack([r.known for r in records])
    return x, y, known


# -- CSV I/O -------------------------------------------------------------------


def load_csv(path: str, scheme: PanelScheme) -> list[PatientRecord]:
    """Parse a dataset file; empty cells become source-missing values."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1)
        expected = list(scheme.feature_names) + [LABEL_COLUMN]
        if header != expected:
            raise SchemaError(
                f"{path}: header {header} does not match scheme columns {expected}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} cells, got {len(row)}",
                                 line=lineno)
            feats = np.empty(scheme.d)
            for j, cell in enumerate(row[:-1]):
                if cell.strip() == "":
                    feats[j] = np.nan
                else:
                    try:
                        feats[j] = float(cell)
                    except ValueError:
                        raise ParseError(f"bad number {cell!r} in column "
                                         f"{scheme.feature_names[j]!r}", line=lineno)
            if row[-1].strip() not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {row[-1]!r}", line=lineno)
            records.append(PatientRecord(feats, int(row[-1]), id=f"row{lineno}"))
    return records


def save_csv(records: list[PatientRecord], scheme: PanelScheme, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(scheme.feature_names) + [LABEL_COLUMN])
        for r in records:
            cells = ["" if not np.isfinite(v) else f"{v:.17g}" for v in r.features]
            writer.writerow(cells + [str(r.label)])


# -- synthetic generation --------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Two-class Gaussian population over a panel layout."""

    scheme: PanelScheme
    n: int
    pos_fraction: float
    mean_neg: np.ndarray
    mean_pos: np.ndarray
    cov_neg: np.ndarray
    cov_pos: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.pos_fraction < 1.0:
            raise ContractError("pos_fraction must lie in (0, 1)")
        d = self.scheme.d
        self.mean_neg = np.asarray(self.mean_neg, dtype=np.float64).reshape(d)
        self.mean_pos = np.asarray(self.mean_pos, dtype=np.float64).reshape(d)
        for name in ("cov_neg", "cov_pos"):
            cov = np.asarray(getattr(self, name), dtype=np.float64).reshape(d, d)
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ContractError(f"{name} is not positive definite")
            setattr(self, name, cov)


def cheap_informative_panel_spec(n: int = 20000, pos_fraction: float = 0.1,
                                 shift: float = 1.5) -> SyntheticSpec:
    """Canonical 4-feature task: one cheap informative panel, one dear noise panel."""
    scheme = PanelScheme(
        feature_names=("a1", "a2", "b1", "b2"),
        panels=(Panel("A", 10.0, (0, 1)), Panel("B", 100.0, (2, 3))),
    )
    d = scheme.d
    mean_pos = np.zeros(d)
    mean_pos[:2] = shift
    return SyntheticSpec(scheme, n, pos_fraction,
                         mean_neg=np.zeros(d), mean_pos=mean_pos,
                         cov_neg=np.eye(d), cov_pos=np.eye(d))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[list[PatientRecord], PanelScheme]:
    rng = np.random.default_rng(seed)
    labels = (rng.random(spec.n) < spec.pos_fraction).astype(np.int64)
    chol = {0: np.linalg.cholesky(spec.cov_neg), 1: np.linalg.cholesky(spec.cov_pos)}
    mean = {0: spec.mean_neg, 1: spec.mean_pos}
    noise = rng.standard_normal((spec.n, spec.scheme.d))
    records = []
    for i in range(spec.n):
        y = int(labels[i])
        feats = mean[y] + chol[y] @ noise[i]
        records.append(PatientRecord(feats, y, id=f"syn{i}"))
    return records, spec.scheme


# -- masking augmentation ---------------------------------------------------------


def random_mask_augment(records: list[PatientRecord], per_record_copies: int,
                        seed: int, scheme: PanelScheme) -> list[tuple[np.ndarray, np.ndarray]]:
    """Independent panel-atomic masks: each panel observed with probability 1/2.

    Visible features are always forced observed.  Each copy draws its own
    mask, giving full support over panel subsets.
    """
    if per_record_copies < 1:
        raise ContractError("per_record_copies must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        for _ in range(per_record_copies):
            bits = rng.random(scheme.n_panels) < 0.5
            out.append((r.features, scheme.mask_from_panel_bits(bits)))
    return out


# -- splitting --------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Five-way fractions: encoder-pretrain, rl-train, encoder-val, rl-val, test."""

    fractions: tuple[float, float, float, float, float]
    seed: int

    def __post_init__(self):
        if any(f < 0 for f in self.fractions):
            raise ContractError("split fractions must be nonnegative")
        if abs(sum(self.fractions) - 1.0) > 1e-12:
            raise ContractError("split fractions must sum to 1")


def _apportion(total: int, fractions) -> list[int]:
    """Largest-remainder rounding of total * fractions to integers."""
    raw = [total * f for f in fractions]
    base = [int(np.floor(v)) for v in raw]
    short = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split(records: list[PatientRecord], spec: SplitSpec) -> list[list[PatientRecord]]:
    """Stratified partition; each part's positive count is proportional +/- 1."""
    rng = np.random.default_rng(spec.seed)
    idx_pos = [i for i, r in enumerate(records) if r.label == 1]
    idx_neg = [i for i, r in enumerate(records) if r.label == 0]
    rng.shuffle(idx_pos)
    rng.shuffle(idx_neg)

    sizes = _apportion(len(records), spec.fractions)
    pos_share = len(idx_pos) / len(records) if records else 0.0
    pos_sizes = _apportion(len(idx_pos), [s / len(records) for s in sizes]) \
        if records else [0] * 5
    for k, (size, npos) in enumerate(zip(sizes, pos_sizes)):
        if size > 0 and npos == 0 and len(idx_pos) > 0:
            raise StratificationError(
                f"part {k} (size {size}) would receive no positive records")
        if abs(npos - size * pos_share) > 1.0 + 1e-9:
            raise StratificationError(
                f"part {k}: positive count {npos} too far from proportional")

    parts: list[list[PatientRecord]] = []
    p_at = n_at = 0
    for size, npos in zip(sizes, pos_sizes):
        nneg = size - npos
        chosen = idx_pos[p_at:p_at + npos] + idx_neg[n_at:n_at + nneg]
        p_at += npos
        n_at += nneg
        parts.append([records[i] for i in sorted(chosen)])
    return parts


# -- standardization ---------------------------------------------------------------


@dataclass
class Standardizer:
    """Per-feature z-scoring transform with statistics frozen at fit time."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, records: list[PatientRecord]) -> "Standardizer":
        x, _, known = records_matrix(records)
        masked = np.where(known > 0, x, np.nan)
        mean = np.nanmean(masked, axis=0)
        std = np.nanstd(masked, axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, records: list[PatientRecord]) -> list[PatientRecord]:
        out = []
        for r in records:
            feats = (r.features - self.mean) / self.std
            out.append(PatientRecord(feats, r.label, r.id, known=r.known.copy()))
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"standardizer.mean": self.mean, "standardizer.std": self.std}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Standardizer":
        return cls(mean=arrays["standardizer.mean"], std=arrays["standardizer.std"])
