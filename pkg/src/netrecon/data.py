"""Ingestion and preparation of parcellated recordings.

Recordings are UTF-8 CSV files with a metadata header line:

    # subject=<id> session=<int> label=<CN|MCI|AD|UNLABELED> age=<real|NA>

followed by T_total rows of C comma-separated floats (time x parcels).
The atlas is a TSV with columns `parcel_id<TAB>network_id<TAB>network_name`,
every parcel_id 0..C-1 appearing exactly once. A manifest lists one
recording path per line (relative paths resolve against the manifest).

Parcels are reordered network-contiguously and zero-padded at the end of
each network block so every block is a whole number of spatial patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("CN", "MCI", "AD", "UNLABELED")


class LoadError(ValueError):
    """Malformed recording, atlas, or manifest file."""


@dataclass
class ParcelTimeSeries:
    """One recording: (T_total x C) matrix plus subject metadata."""

    subject_id: str
    session_index: int
    label: str
    age_years: float | None
    values: np.ndarray

    def __post_init__(self):
        if self.label not in LABELS:
            raise LoadError(f"unknown label {self.label!r}, expected one of {LABELS}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise LoadError("recording values must be a 2-d time x parcels matrix")


@dataclass
class SegmentSpec:
    """Segment and patch geometry."""

    T: int = 64
    P_t: int = 16
    P_c: int = 16
    segments_per_recording: int = 10

    def __post_init__(self):
        if self.T % self.P_t != 0:
            raise ValueError(f"segment length {self.T} not a multiple of temporal patch {self.P_t}")


class NetworkAtlas:
    """Parcel -> network assignment with the derived contiguous layout.

    Attributes
    ----------
    parcel_count : int
        C, number of parcels in the original ordering.
    network_count : int
        N, number of networks (ids 0..N-1, each nonempty).
    membership : (C,) int array
        network id per original parcel.
    permutation : (C,) int array
        permutation[k] is the original parcel placed at non-pad slot k
        of the reordered layout (network-contiguous, parcel-id order
        within each network).
    pad_per_network : (N,) int array
        zero columns appended to each network block so its width is a
        multiple of the spatial patch size.
    """

    def __init__(self, membership: np.ndarray, spatial_patch: int = 16,
                 names: dict[int, str] | None = None):
        membership = np.asarray(membership, dtype=np.int64)
        if membership.ndim != 1 or membership.size == 0:
            raise LoadError("atlas membership must be a nonempty 1-d array")
        if membership.min() < 0:
            raise LoadError("network ids must be nonnegative")
        self.parcel_count = int(membership.size)
        self.network_count = int(membership.max()) + 1
        present = np.unique(membership)
        if present.size != self.network_count:
            missing = sorted(set(range(self.network_count)) - set(present.tolist()))
            raise LoadError(f"network ids not contiguous; missing {missing}")
        self.membership = membership
        self.spatial_patch = int(spatial_patch)
        self.names = dict(names) if names else {i: f"net{i}" for i in range(self.network_count)}

        order = []
        pads = []
        col_net = []
        pad_mask = []
        for net in range(self.network_count):
            parcels = np.flatnonzero(membership == net)
            pad = (-parcels.size) % self.spatial_patch
            order.append(parcels)
            pads.append(pad)
            width = parcels.size + pad
            col_net.extend([net] * (width // self.spatial_patch))
            pad_mask.extend([False] * parcels.size + [True] * pad)
        self.permutation = np.concatenate(order)
        self.pad_per_network = np.asarray(pads, dtype=np.int64)
        self.padded_count = self.parcel_count + int(self.pad_per_network.sum())
        self.column_network = np.asarray(col_net, dtype=np.int64)
        self.pad_mask = np.asarray(pad_mask, dtype=bool)
        # aligned position of each original parcel, for the inverse map
        self._slot_of_parcel = np.empty(self.parcel_count, dtype=np.int64)
        nonpad_slots = np.flatnonzero(~self.pad_mask)
        self._slot_of_parcel[self.permutation] = nonpad_slots

    @property
    def network_sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.network_count)

    def columns_of_network(self, net: int) -> np.ndarray:
        return np.flatnonzero(self.column_network == net)

    def token_pad_mask(self, spec: SegmentSpec) -> np.ndarray:
        """(columns, token_dim) bool: True for non-pad token elements.

        Token elements are laid out time-major, so a column's parcel pad
        flags repeat once per timestep of the patch.
        """
        n_cols = self.padded_count // self.spatial_patch
        mask = np.empty((n_cols, spec.P_t * self.spatial_patch), dtype=bool)
        for c in range(n_cols):
            flags = ~self.pad_mask[c * self.spatial_patch:(c + 1) * self.spatial_patch]
            mask[c] = np.tile(flags, spec.P_t)
        return mask


def load_atlas(path, spatial_patch: int = 16) -> NetworkAtlas:
    """Parse a parcel->network TSV into a NetworkAtlas."""
    path = Path(path)
    seen: dict[int, int] = {}
    names: dict[int, str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LoadError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            try:
                parcel = int(parts[0])
                net = int(parts[1])
            except ValueError as exc:
                raise LoadError(f"{path}: line {lineno}: non-integer id") from exc
            if parcel in seen:
                raise LoadError(f"{path}: duplicate parcel id {parcel} (line {lineno})")
            seen[parcel] = net
            names.setdefault(net, parts[2])
    if not seen:
        raise LoadError(f"{path}: empty atlas")
    count = len(seen)
    if sorted(seen) != list(range(count)):
        raise LoadError(f"{path}: parcel ids must cover 0..{count - 1} exactly once")
    membership = np.asarray([seen[i] for i in range(count)], dtype=np.int64)
    return NetworkAtlas(membership, spatial_patch=spatial_patch, names=names)


def write_atlas(path, atlas: NetworkAtlas) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for parcel in range(atlas.parcel_count):
            net = int(atlas.membership[parcel])
            fh.write(f"{parcel}\t{net}\t{atlas.names[net]}\n")


def _parse_header(line: str, path: Path) -> tuple[str, int, str, float | None]:
    if not line.startswith("#"):
        raise LoadError(f"{path}: missing metadata header line")
    fields: dict[str, str] = {}
    for tok in line[1:].split():
        if "=" not in tok:
            raise LoadError(f"{path}: malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        fields[key] = val
    for key in ("subject", "session", "label", "age"):
        if key not in fields:
            raise LoadError(f"{path}: header missing '{key}'")
    try:
        session = int(fields["session"])
    except ValueError as exc:
        raise LoadError(f"{path}: non-integer session {fields['session']!r}") from exc
    age = None if fields["age"] == "NA" else float(fields["age"])
    return fields["subject"], session, fields["label"], age


def load_recording(path, expected_parcels: int | None = None) -> ParcelTimeSeries:
    """Load and validate one recording CSV.

    NaN cells and column-count mismatches are load errors that name the
    offending row/column (0-based data coordinates).
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        subject, session, label, age = _parse_header(header, path)
        rows = []
        width = None
        for r, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise LoadError(f"{path}: row {r}: expected {width} columns, got {len(parts)}")
            try:
                vals = np.asarray([float(p) for p in parts], dtype=np.float64)
            except ValueError as exc:
                raise LoadError(f"{path}: row {r}: unparseable numeric field") from exc
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    values = np.vstack(rows)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise LoadError(f"{path}: non-finite value at row {r}, column {c}")
    if expected_parcels is not None and values.shape[1] != expected_parcels:
        raise LoadError(f"{path}: recording has {values.shape[1]} parcels, "
                        f"atlas expects {expected_parcels}")
    return ParcelTimeSeries(subject, session, label, age, values)


def write_recording(path, series: ParcelTimeSeries) -> None:
    age = "NA" if series.age_years is None else repr(float(series.age_years))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# subject={series.subject_id} session={series.session_index} "
                 f"label={series.label} age={age}\n")
        for row in series.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_manifest(path) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else base / p)
    if not out:
        raise LoadError(f"{path}: empty manifest")
    return out


def align_to_networks(values: np.ndarray, atlas: NetworkAtlas) -> np.ndarray:
    """Reorder columns network-contiguously and insert zero pad columns."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != atlas.parcel_count:
        raise LoadError(f"matrix has {values.shape[1]} parcels, atlas expects "
                        f"{atlas.parcel_count}")
    aligned = np.zeros((values.shape[0], atlas.padded_count), dtype=values.dtype)
    aligned[:, ~atlas.pad_mask] = values[:, atlas.permutation]
    return aligned


def invert_alignment(aligned: np.ndarray, atlas: NetworkAtlas) -> np.ndarray:
    """Drop pad columns and restore the original parcel order."""
    if aligned.shape[1] != atlas.padded_count:
        raise LoadError(f"aligned matrix has {aligned.shape[1]} columns, expected "
                        f"{atlas.padded_count}")
    return aligned[:, atlas._slot_of_parcel]


def zscore_segment(segment: np.ndarray) -> np.ndarray:
    """Per-parcel z-score; constant columns map to zero."""
    mu = segment.mean(axis=0)
    sd = segment.std(axis=0)
    out = segment - mu
    nz = sd > 0
    out[:, nz] /= sd[nz]
    out[:, ~nz] = 0.0
    return out


def sample_segments(aligned: np.ndarray, spec: SegmentSpec,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Draw z-scored (T x C') segments at random start offsets.

    Offsets are drawn without replacement when enough distinct offsets
    exist, with replacement otherwise (segment count stays fixed). A
    too-short recording is skipped with a warning (empty return).
    """
    t_total = aligned.shape[0]
    n = spec.segments_per_recording
    if t_total < spec.T:
        log.warning("recording of length %d shorter than segment %d; skipped",
                    t_total, spec.T)
        return []
    n_offsets = t_total - spec.T + 1
    if n_offsets >= n:
        offsets = rng.choice(n_offsets, size=n, replace=False)
    else:
        offsets = rng.integers(0, n_offsets, size=n)
    return [zscore_segment(aligned[o:o + spec.T].copy()) for o in offsets]


@dataclass
class TokenGrid:
    """Patched segment: (temporal rows x spatial columns) token lattice."""

    tokens: np.ndarray           # (rows, cols, P_t*P_c), time-major per token
    column_network: np.ndarray   # (cols,) network id per spatial column

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def cols(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]

    def flat(self) -> np.ndarray:
        """(token_count, token_dim) in row-major lattice order."""
        return self.tokens.reshape(self.token_count, self.token_dim)


def tokenize(segment: np.ndarray, spec: SegmentSpec, atlas: NetworkAtlas) -> TokenGrid:
    """Cut a (T x C') segment into non-overlapping (P_t x P_c) patches.

    Token (r, c) holds rows [r*P_t, (r+1)*P_t) x columns [c*P_c, (c+1)*P_c),
    flattened row-major (time-major).
    """
    t, c_pad = segment.shape
    if t % spec.P_t != 0:
        raise ValueError(f"segment length {t} not a multiple of P_t={spec.P_t}")
    if c_pad != atlas.padded_count or c_pad % spec.P_c != 0:
        raise ValueError(f"segment width {c_pad} misaligned with atlas "
                         f"(padded width {atlas.padded_count}, P_c={spec.P_c})")
    rows = t // spec.P_t
    cols = c_pad // spec.P_c
    tokens = (segment.reshape(rows, spec.P_t, cols, spec.P_c)
              .transpose(0, 2, 1, 3)
              .reshape(rows, cols, spec.P_t * spec.P_c))
    return TokenGrid(np.ascontiguousarray(tokens), atlas.column_network.copy())


def untokenize(grid: TokenGrid, spec: SegmentSpec) -> np.ndarray:
    """Reassemble the (T x C') segment from its token lattice."""
    rows, cols, _ = grid.tokens.shape
    return (grid.tokens.reshape(rows, cols, spec.P_t, spec.P_c)
            .transpose(0, 2, 1, 3)
            .reshape(rows * spec.P_t, cols * spec.P_c))


@dataclass
class MaskPlan:
    """Masked/unmasked token index sets for one reconstruction target."""

    target_network: int | None
    masked_indices: np.ndarray
    unmasked_indices: np.ndarray
    total: int

    @property
    def n_masked(self) -> int:
        return int(self.masked_indices.size)

    @property
    def n_unmasked(self) -> int:
        return int(self.unmasked_indices.size)


def make_mask_plan(atlas: NetworkAtlas, grid: TokenGrid, target_network: int) -> MaskPlan:
    """Mask every token of one network (all temporal rows of its columns)."""
    if not 0 <= target_network < atlas.network_count:
        raise ValueError(f"unknown network id {target_network} "
                         f"(atlas has {atlas.network_count})")
    col_is_target = grid.column_network == target_network
    flat = np.arange(grid.token_count).reshape(grid.rows, grid.cols)
    masked = flat[:, col_is_target].ravel()
    unmasked = flat[:, ~col_is_target].ravel()
    return MaskPlan(target_network, np.sort(masked), np.sort(unmasked), grid.token_count)


def make_random_mask_plan(grid: TokenGrid, count: int, rng: np.random.Generator) -> MaskPlan:
    """Mask a uniformly random token subset of fixed size (ablation mode)."""
    total = grid.token_count
    if not 0 < count < total:
        raise ValueError(f"mask count {count} outside (0, {total})")
    masked = np.sort(rng.choice(total, size=count, replace=False))
    unmasked = np.setdiff1d(np.arange(total), masked, assume_unique=True)
    return MaskPlan(None, masked, unmasked, total)


def empty_mask_plan(grid: TokenGrid) -> MaskPlan:
    """All tokens visible (inference-time plan)."""
    idx = np.arange(grid.token_count)
    return MaskPlan(None, np.empty(0, dtype=np.int64), idx, grid.token_count)


@dataclass
class CohortSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0

    def of(self, subject_id: str) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        raise KeyError(subject_id)


def split_subjects(recordings: list[ParcelTimeSeries],
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> CohortSplit:
    """Subject-level shuffle-and-partition; sessions follow their subject."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    subjects = sorted({r.subject_id for r in recordings})
    if len(subjects) < 3:
        raise ValueError(f"need >= 3 distinct subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(subjects)
    cut1 = int(round(ratios[0] * n))
    cut2 = int(round((ratios[0] + ratios[1]) * n))
    cut1 = min(max(cut1, 1), n - 2)
    cut2 = min(max(cut2, cut1 + 1), n - 1)
    return CohortSplit(order[:cut1], order[cut1:cut2], order[cut2:], seed=seed)
