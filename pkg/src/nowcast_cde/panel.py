"""Mixed-frequency indicator panels on a monthly grid.

Cells that were not observed hold NaN and are flagged False in ``mask``;
nothing downstream reads them as data. Quarterly series live at quarter-end
months only.
"""
import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MONTHLY = "monthly"
QUARTERLY = "quarterly"


class PanelError(ValueError):
    pass


def parse_month(text):
    """'YYYY-MM' (an ISO date with a day part is accepted) -> month ordinal."""
    parts = text.strip().split("-")
    if len(parts) < 2:
        raise ValueError(f"bad month {text!r}")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise ValueError(f"bad month {text!r}")
    return year * 12 + month - 1


def format_month(ordinal):
    ordinal = int(ordinal)
    return f"{ordinal // 12:04d}-{ordinal % 12 + 1:02d}"


def is_quarter_end(ordinal):
    return int(ordinal) % 12 % 3 == 2


def quarter_end(ordinal):
    ordinal = int(ordinal)
    return ordinal + (2 - ordinal % 12 % 3)


@dataclass(frozen=True)
class IndicatorMeta:
    id: str
    frequency: str = MONTHLY
    group_tags: tuple = ()

    def __post_init__(self):
        if self.frequency not in (MONTHLY, QUARTERLY):
            raise PanelError(f"{self.id}: unknown frequency {self.frequency!r}")
        if not self.group_tags:
            raise PanelError(f"{self.id}: at least one group tag is required")


@dataclass(frozen=True)
class Panel:
    times: np.ndarray  # (T,) month ordinals, consecutive
    values: np.ndarray  # (T, D), NaN where not observed
    mask: np.ndarray  # (T, D) bool
    metas: tuple
    target_id: str
    means: np.ndarray = None  # per-column centre applied by standardize
    scales: np.ndarray = None

    def __post_init__(self):
        t, d = self.values.shape
        if self.mask.shape != (t, d) or len(self.times) != t or len(self.metas) != d:
            raise PanelError("panel arrays have inconsistent shapes")
        ids = [m.id for m in self.metas]
        if len(set(ids)) != len(ids):
            raise PanelError("indicator ids must be unique")
        if self.target_id not in ids:
            raise PanelError(f"target {self.target_id!r} is not a panel column")
        if np.isfinite(self.values[~self.mask]).any():
            raise PanelError("masked cells must hold NaN")
        if not np.isfinite(self.values[self.mask]).all():
            raise PanelError("observed cells must be finite")

    @property
    def ids(self):
        return [m.id for m in self.metas]

    @property
    def n_times(self):
        return self.values.shape[0]

    @property
    def n_series(self):
        return self.values.shape[1]

    @property
    def target_index(self):
        return self.ids.index(self.target_id)

    def column(self, indicator_id):
        return self.ids.index(indicator_id)

    def groups(self):
        """Group names in first-seen order."""
        seen = []
        for m in self.metas:
            for g in m.group_tags:
                if g not in seen:
                    seen.append(g)
        return seen

    def group_columns(self, group, include_target=False):
        cols = [j for j, m in enumerate(self.metas) if group in m.group_tags]
        if not include_target:
            cols = [j for j in cols if self.metas[j].id != self.target_id]
        return cols

    def to_raw(self, values, column):
        """Undo standardization for values of one column."""
        if self.means is None:
            return np.asarray(values, dtype=float)
        return np.asarray(values, dtype=float) * self.scales[column] + self.means[column]

    def raw_values(self):
        if self.means is None:
            return self.values.copy()
        return self.values * self.scales + self.means


def _empty_grid(t, d):
    return np.full((t, d), np.nan), np.zeros((t, d), dtype=bool)


def read_meta(meta_path):
    """Meta JSON: either {"target": id, "indicators": [...]} or a bare array
    whose entries may carry "target": true."""
    with open(meta_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    target = None
    if isinstance(doc, dict):
        entries = doc.get("indicators")
        target = doc.get("target")
        if entries is None:
            raise PanelError(f"{meta_path}: missing 'indicators' array")
    elif isinstance(doc, list):
        entries = doc
    else:
        raise PanelError(f"{meta_path}: expected a JSON object or array")
    metas = []
    for i, e in enumerate(entries):
        try:
            meta = IndicatorMeta(str(e["id"]), e.get("frequency", MONTHLY), tuple(e.get("groups", ())))
        except KeyError as exc:
            raise PanelError(f"{meta_path}: entry {i} lacks {exc}") from None
        if e.get("target"):
            target = meta.id
        metas.append(meta)
    if target is None:
        raise PanelError(f"{meta_path}: no target indicator declared")
    return metas, target


def load_panel(csv_path, meta_path):
    metas, target = read_meta(meta_path)
    index = {m.id: j for j, m in enumerate(metas)}
    if len(index) != len(metas):
        raise PanelError(f"{meta_path}: duplicate indicator ids")
    records = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "indicator_id", "value"]:
            raise PanelError(f"{csv_path}: header must be date,indicator_id,value")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise PanelError(f"{csv_path}:{row_no}: expected 3 fields, got {len(row)}")
            date_s, ind, val_s = (c.strip() for c in row)
            if ind not in index:
                raise PanelError(f"{csv_path}:{row_no}: unknown indicator id {ind!r}")
            try:
                month = parse_month(date_s)
            except ValueError:
                raise PanelError(f"{csv_path}:{row_no}: bad date {date_s!r}") from None
            try:
                value = float(val_s)
            except ValueError:
                raise PanelError(f"{csv_path}:{row_no}: non-numeric value {val_s!r}") from None
            if not math.isfinite(value):
                raise PanelError(f"{csv_path}:{row_no}: non-finite value {val_s!r}")
            if metas[index[ind]].frequency == QUARTERLY:
                month = quarter_end(month)
            key = (month, ind)
            if key in records:
                raise PanelError(f"{csv_path}:{row_no}: duplicate observation ({format_month(month)}, {ind})")
            records[key] = value
    if not records:
        raise PanelError(f"{csv_path}: no observations")
    months = [k[0] for k in records]
    t0, t1 = min(months), max(months)
    times = np.arange(t0, t1 + 1)
    values, mask = _empty_grid(len(times), len(metas))
    for (month, ind), value in records.items():
        values[month - t0, index[ind]] = value
        mask[month - t0, index[ind]] = True
    return Panel(times, values, mask, tuple(metas), target)


def write_panel(panel, csv_path, meta_path=None):
    """Write observed cells (original scale) back to the long CSV format."""
    raw = panel.raw_values()
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "indicator_id", "value"])
        for i, month in enumerate(panel.times):
            for j, meta in enumerate(panel.metas):
                if panel.mask[i, j]:
                    w.writerow([format_month(month), meta.id, repr(float(raw[i, j]))])
    if meta_path is not None:
        doc = {
            "target": panel.target_id,
            "indicators": [
                {"id": m.id, "frequency": m.frequency, "groups": list(m.group_tags)} for m in panel.metas
            ],
        }
        Path(meta_path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def standardize(panel):
    """Z-score every column over its observed cells (population sd)."""
    values = panel.values.copy()
    d = panel.n_series
    means = np.zeros(d)
    scales = np.ones(d)
    for j, meta in enumerate(panel.metas):
        obs = values[panel.mask[:, j], j]
        if obs.size < 2:
            raise PanelError(f"column {meta.id!r} has fewer than 2 observations")
        mu = obs.mean()
        sd = obs.std()
        if not sd > 1e-12 * max(1.0, abs(mu)):
            raise PanelError(f"column {meta.id!r} is constant")
        means[j], scales[j] = mu, sd
        values[panel.mask[:, j], j] = (obs - mu) / sd
    if panel.means is not None:
        means = panel.means + panel.scales * means
        scales = panel.scales * scales
    return replace(panel, values=values, means=means, scales=scales)


def apply_missing(panel, rate, rng):
    """Mask floor(rate * n) extra observed non-target cells, chosen uniformly."""
    if not 0.0 <= rate < 1.0:
        raise PanelError(f"missing rate must lie in [0, 1), got {rate}")
    eligible = panel.mask.copy()
    eligible[:, panel.target_index] = False
    cells = np.flatnonzero(eligible)
    n_drop = int(math.floor(rate * cells.size))
    if n_drop == 0:
        return panel
    drop = rng.choice(cells, size=n_drop, replace=False)
    mask = panel.mask.copy().ravel()
    values = panel.values.copy().ravel()
    mask[drop] = False
    values[drop] = np.nan
    shape = panel.mask.shape
    return replace(panel, values=values.reshape(shape), mask=mask.reshape(shape))


@dataclass(frozen=True)
class Window:
    start: int  # first input row
    target_row: int  # input rows are start .. target_row - 1
    y: float  # target on the panel's (possibly standardized) scale
    target_time: int

    @property
    def rows(self):
        return slice(self.start, self.target_row)


@dataclass
class WindowSet:
    n: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def all(self):
        return self.train + self.val + self.test


def make_windows(panel, n=15, split_fractions=(0.7, 0.15, 0.15)):
    """One window per observed quarter-end target with n full months before it."""
    if n < 1:
        raise PanelError("window length must be >= 1")
    fr = np.asarray(split_fractions, dtype=float)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise PanelError(f"split fractions must be three non-negative numbers summing to 1, got {split_fractions}")
    if panel.n_times < n + 1:
        raise PanelError(f"insufficient history: need at least {n + 1} months, panel has {panel.n_times}")
    j = panel.target_index
    windows = []
    for row in range(n, panel.n_times):
        if panel.mask[row, j] and is_quarter_end(panel.times[row]):
            windows.append(Window(row - n, row, float(panel.values[row, j]), int(panel.times[row])))
    if len(windows) < 3:
        raise PanelError(
            f"insufficient history: {len(windows)} targets have {n} prior months "
            f"(need >= 3 windows, i.e. about {n + 9} months; panel has {panel.n_times})"
        )
    total = len(windows)
    n_train = int(round(fr[0] * total))
    n_val = int(round(fr[1] * total))
    n_train = min(max(n_train, 1), total - 2)
    n_val = min(max(n_val, 1), total - n_train - 1)
    return WindowSet(n, windows[:n_train], windows[n_train : n_train + n_val], windows[n_train + n_val :])
