"""Multi-resolution datasets, cross-resolution correspondence, synthetic grids, CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UNLABELED = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    id: int
    location: tuple[float, ...]
    features: tuple[float, ...]
    label: int  # 0, 1 or UNLABELED


def _as_rows(values, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[0] == n:
        return arr.copy()
    if n == 0:
        return arr.reshape(0, 0)
    return arr.reshape(n, -1)


@dataclass(frozen=True, eq=False)
class InstanceSet:
    """Column-oriented storage for instances of one layer and one split.

    ``truth`` optionally carries ground-truth labels for instances whose
    ``labels`` entry is ``UNLABELED``; it is never serialized.
    """

    ids: np.ndarray
    locations: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = ids.size
        locs = _as_rows(self.locations, n)
        feats = _as_rows(self.features, n)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size != n:
            raise DataError(f"{labels.size} labels for {n} instances")
        if not np.isin(labels, (UNLABELED, 0, 1)).all():
            raise DataError("labels must be -1, 0 or 1")
        if np.unique(ids).size != n:
            raise DataError("instance ids are not unique")
        for name, arr in (("ids", ids), ("locations", locs), ("features", feats), ("labels", labels)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=np.int64).reshape(-1)
            truth.flags.writeable = False
            object.__setattr__(self, "truth", truth)

    @classmethod
    def empty(cls, location_dim: int, feature_dim: int) -> "InstanceSet":
        return cls(
            np.zeros(0, np.int64),
            np.zeros((0, location_dim)),
            np.zeros((0, feature_dim)),
            np.zeros(0, np.int64),
        )

    def __len__(self) -> int:
        return int(self.ids.size)

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Instance:
        return Instance(
            int(self.ids[i]),
            tuple(self.locations[i].tolist()),
            tuple(self.features[i].tolist()),
            int(self.labels[i]),
        )

    @property
    def location_dim(self) -> int:
        return self.locations.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "InstanceSet":
        rows = np.asarray(rows, dtype=np.intp)
        truth = None if self.truth is None else self.truth[rows]
        return InstanceSet(self.ids[rows], self.locations[rows], self.features[rows], self.labels[rows], truth)

    def relabel(self, labels) -> "InstanceSet":
        return InstanceSet(self.ids, self.locations, self.features, labels, self.truth)

    def concat(self, other: "InstanceSet") -> "InstanceSet":
        truth = None
        if self.truth is not None and other.truth is not None:
            truth = np.concatenate([self.truth, other.truth])
        return InstanceSet(
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.locations, other.locations]),
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            truth,
        )

    def row_of(self) -> dict[int, int]:
        return {int(i): r for r, i in enumerate(self.ids)}


@dataclass(frozen=True, eq=False)
class ResolutionLayer:
    resolution_id: int
    feature_dim: int
    labeled: InstanceSet
    unlabeled: InstanceSet

    def __post_init__(self):
        for part, name in ((self.labeled, "labeled"), (self.unlabeled, "unlabeled")):
            if len(part) and part.feature_dim != self.feature_dim:
                raise DataError(
                    f"layer {self.resolution_id}: {name} features have length "
                    f"{part.feature_dim}, expected {self.feature_dim}"
                )
        if len(self.labeled) and (self.labeled.labels == UNLABELED).any():
            raise DataError(f"layer {self.resolution_id}: labeled split contains unlabeled rows")
        if np.intersect1d(self.labeled.ids, self.unlabeled.ids).size:
            raise DataError(f"layer {self.resolution_id}: labeled and unlabeled ids overlap")

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)


@dataclass(frozen=True, eq=False)
class MultiResDataset:
    fine: ResolutionLayer
    coarse: tuple[ResolutionLayer, ...]
    location_dim: int
    test: InstanceSet | None = None

    def __post_init__(self):
        object.__setattr__(self, "coarse", tuple(self.coarse))
        if self.fine.resolution_id != 0:
            raise DataError("fine layer must have resolution_id 0")
        ids = [c.resolution_id for c in self.coarse]
        if 0 in ids or len(set(ids)) != len(ids):
            raise DataError(f"coarse resolution ids must be distinct and nonzero, got {ids}")
        for layer in (self.fine, *self.coarse):
            for part in (layer.labeled, layer.unlabeled):
                if len(part) and part.location_dim != self.location_dim:
                    raise DataError(
                        f"layer {layer.resolution_id}: location length {part.location_dim}, "
                        f"expected {self.location_dim}"
                    )

    @property
    def K(self) -> int:
        return len(self.coarse)

    def coarse_layer(self, k: int) -> ResolutionLayer:
        for layer in self.coarse:
            if layer.resolution_id == k:
                return layer
        raise KeyError(k)

    def with_fine_labeled(self, labeled: InstanceSet) -> "MultiResDataset":
        fine = ResolutionLayer(0, self.fine.feature_dim, labeled, self.fine.unlabeled)
        return MultiResDataset(fine, self.coarse, self.location_dim, self.test)

    def with_layers(self, fine: ResolutionLayer, coarse: Sequence[ResolutionLayer]) -> "MultiResDataset":
        return MultiResDataset(fine, tuple(coarse), self.location_dim, self.test)

    def fine_only(self) -> "MultiResDataset":
        return MultiResDataset(self.fine, (), self.location_dim, self.test)


# -- correspondence ----------------------------------------------------------


@dataclass(frozen=True)
class CorrespondenceMap:
    """Assignment of fine instance ids to the coarse instance they fall under."""

    coarse_id: int
    fine_id: int
    groups: dict[int, tuple[int, ...]]

    def group_of(self) -> dict[int, int]:
        return {f: c for c, members in self.groups.items() for f in members}

    def sizes(self) -> dict[int, int]:
        return {c: len(m) for c, m in self.groups.items()}


def assign_nearest(coarse_locations: np.ndarray, fine_locations: np.ndarray) -> np.ndarray:
    """Row index of the nearest coarse location for each fine location.

    Ties go to the lowest row; callers order rows by id to get the lowest-id rule.
    """
    coarse_locations = np.asarray(coarse_locations, dtype=np.float64)
    fine_locations = np.asarray(fine_locations, dtype=np.float64)
    out = np.empty(len(fine_locations), dtype=np.intp)
    # chunked to bound memory at (chunk x n_coarse)
    for start in range(0, len(fine_locations), 4096):
        block = fine_locations[start:start + 4096]
        d2 = ((block[:, None, :] - coarse_locations[None, :, :]) ** 2).sum(axis=2)
        out[start:start + 4096] = np.argmin(d2, axis=1)
    return out


def build_correspondence(coarse: ResolutionLayer, fine: ResolutionLayer) -> CorrespondenceMap:
    """Assign every fine instance (labeled and unlabeled) to its nearest coarse instance."""
    c_all = coarse.labeled.concat(coarse.unlabeled) if len(coarse.labeled) else coarse.unlabeled
    f_all = fine.labeled.concat(fine.unlabeled) if len(fine.labeled) else fine.unlabeled
    return correspond_sets(c_all, f_all, coarse.resolution_id, fine.resolution_id)


def correspond_sets(
    coarse: InstanceSet, fine: InstanceSet, coarse_id: int = 1, fine_id: int = 0
) -> CorrespondenceMap:
    if len(coarse) == 0:
        raise DataError("cannot build a correspondence from an empty coarse layer")
    if len(fine) and coarse.location_dim != fine.location_dim:
        raise DataError(
            f"location dimensionality differs: coarse {coarse.location_dim}, fine {fine.location_dim}"
        )
    order = np.argsort(coarse.ids, kind="stable")
    nearest = assign_nearest(coarse.locations[order], fine.locations)
    groups: dict[int, list[int]] = {int(c): [] for c in coarse.ids[order]}
    for fid, row in zip(fine.ids.tolist(), nearest.tolist()):
        groups[int(coarse.ids[order[row]])].append(fid)
    return CorrespondenceMap(coarse_id, fine_id, {c: tuple(m) for c, m in groups.items()})


def grid_correspondence(coarse_shape: tuple[int, int], ratio: int) -> CorrespondenceMap:
    """Correspondence between a coarse ``H x W`` grid and its ``rH x rW`` refinement.

    Ids are row-major pixel indices on each grid.
    """
    h, w = coarse_shape
    if ratio < 1:
        raise DataError(f"ratio must be >= 1, got {ratio}")
    groups: dict[int, list[int]] = {i: [] for i in range(h * w)}
    fw = w * ratio
    for i in range(h * ratio):
        for j in range(fw):
            groups[(i // ratio) * w + j // ratio].append(i * fw + j)
    return CorrespondenceMap(1, 0, {c: tuple(m) for c, m in groups.items()})


def grid_cell_of(fine_shape: tuple[int, int], ratio: int) -> np.ndarray:
    """Coarse pixel ``(i // r, j // r)`` of every fine pixel; errors when ``r`` does not divide."""
    fh, fw = fine_shape
    if ratio < 1:
        raise DataError(f"ratio must be >= 1, got {ratio}")
    if fh % ratio or fw % ratio:
        raise DataError(f"fine grid {fh}x{fw} is not divisible by ratio {ratio}")
    ii, jj = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    return np.stack([ii // ratio, jj // ratio], axis=-1)


# -- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    coarse_side: int = 10
    ratio: int = 3
    fine_dim: int = 30
    coarse_dim: int = 31
    separation: float = 3.0
    noise: float = 1.0
    label_noise: float = 0.05
    empty_fraction: float = 0.3
    min_fraction: float = 0.1
    fraction_skew: float = 1.5
    n_coarse_labeled: int = 200
    n_fine_labeled: int = 20
    unlabeled_side: int | None = None
    fine_pool_side: int | None = None

    def __post_init__(self):
        if self.coarse_side < 1 or self.ratio < 1:
            raise DataError("coarse_side and ratio must be positive")
        if self.coarse_dim <= self.fine_dim:
            raise DataError("coarse_dim must exceed fine_dim: the extra channels carry the coarse label signal")
        if not 0 < self.min_fraction <= 1:
            raise DataError("min_fraction must lie in (0, 1]")


@dataclass
class _Region:
    fine_labels: np.ndarray  # (rS, rS)
    fine_features: np.ndarray  # (rS, rS, D0)
    coarse_labels: np.ndarray  # (S, S)
    coarse_features: np.ndarray  # (S, S, D1)
    fractions: np.ndarray  # (S, S)


def _blob(rng: np.random.Generator, r: int, count: int) -> np.ndarray:
    """Boolean r x r mask of ``count`` cells grown around a random seed cell."""
    mask = np.zeros((r, r), dtype=bool)
    if count == 0:
        return mask
    si, sj = rng.integers(r), rng.integers(r)
    ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    dist = (ii - si) ** 2 + (jj - sj) ** 2 + rng.random((r, r)) * 0.5
    order = np.argsort(dist, axis=None, kind="stable")[:count]
    mask.flat[order] = True
    return mask


def _make_region(cfg: SynthConfig, side: int, mu1: np.ndarray, rng: np.random.Generator) -> _Region:
    r = cfg.ratio
    fine_labels = np.zeros((side * r, side * r), dtype=np.int64)
    fractions = np.zeros((side, side))
    for ci in range(side):
        for cj in range(side):
            if rng.random() < cfg.empty_fraction:
                continue
            rho = cfg.min_fraction + (1.0 - cfg.min_fraction) * rng.random() ** cfg.fraction_skew
            fractions[ci, cj] = rho
            count = math.ceil(rho * r * r)
            fine_labels[ci * r:(ci + 1) * r, cj * r:(cj + 1) * r] = _blob(rng, r, count)
    noise = rng.normal(0.0, cfg.noise, size=fine_labels.shape + (cfg.fine_dim,))
    fine_features = noise + fine_labels[..., None] * mu1
    blocks = fine_features.reshape(side, r, side, r, cfg.fine_dim)
    coarse_mean = blocks.mean(axis=(1, 3))
    coarse_labels = fine_labels.reshape(side, r, side, r).max(axis=(1, 3))
    extra = cfg.coarse_dim - cfg.fine_dim
    channel = coarse_labels[..., None] + rng.normal(0.0, cfg.label_noise, size=(side, side, extra))
    coarse_features = np.concatenate([coarse_mean, channel], axis=-1)
    return _Region(fine_labels, fine_features, coarse_labels, coarse_features, fractions)


def _fine_set(region: _Region, r: int, side: int, origin: float, id_base: int, labeled: bool) -> InstanceSet:
    n = side * r
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    locs = np.stack([ii.ravel() + 0.5 + origin, jj.ravel() + 0.5], axis=1)
    truth = region.fine_labels.ravel()
    labels = truth if labeled else np.full(truth.size, UNLABELED)
    return InstanceSet(
        id_base + np.arange(n * n), locs, region.fine_features.reshape(n * n, -1), labels, truth
    )


def _coarse_set(region: _Region, r: int, side: int, origin: float, id_base: int, labeled: bool) -> InstanceSet:
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    locs = np.stack([ii.ravel() * r + r / 2 + origin, jj.ravel() * r + r / 2], axis=1)
    truth = region.coarse_labels.ravel()
    labels = truth if labeled else np.full(truth.size, UNLABELED)
    return InstanceSet(
        id_base + np.arange(side * side), locs, region.coarse_features.reshape(side * side, -1), labels, truth
    )


def generate_synthetic(cfg: SynthConfig, seed: int) -> MultiResDataset:
    """Seeded two-resolution benchmark on square grids.

    Four independent regions are drawn: the shared unlabeled region, a
    region the coarse labeled sample comes from, a fine labeled pool, and
    a fine test region the size of the unlabeled region. Regions are laid
    out side by side along the first location axis so correspondence never
    crosses region boundaries.
    """
    rng = np.random.default_rng(seed)
    r = cfg.ratio
    side = cfg.unlabeled_side or cfg.coarse_side
    coarse_side = max(cfg.coarse_side, math.ceil(math.sqrt(cfg.n_coarse_labeled)))
    pool_side = cfg.fine_pool_side or max(
        cfg.coarse_side, math.ceil(math.sqrt(cfg.n_fine_labeled / (r * r)))
    )
    if cfg.n_coarse_labeled > coarse_side**2 or cfg.n_coarse_labeled < 0:
        raise DataError(f"coarse label budget {cfg.n_coarse_labeled} exceeds {coarse_side**2} cells")
    if cfg.n_fine_labeled > (pool_side * r) ** 2 or cfg.n_fine_labeled < 0:
        raise DataError(f"fine label budget {cfg.n_fine_labeled} exceeds pool of {(pool_side * r) ** 2}")

    direction = rng.normal(size=cfg.fine_dim)
    mu1 = cfg.separation * direction / np.linalg.norm(direction)

    unl = _make_region(cfg, side, mu1, rng)
    lab_c = _make_region(cfg, coarse_side, mu1, rng)
    lab_f = _make_region(cfg, pool_side, mu1, rng)
    test = _make_region(cfg, side, mu1, rng)

    # regions sit at increasing offsets along axis 0, ids in disjoint blocks
    gap = 10.0 * r
    o_unl, o_lc = 0.0, side * r + gap
    o_lf = o_lc + coarse_side * r + gap
    o_test = o_lf + pool_side * r + gap
    block = 10 ** (len(str(max(side, coarse_side, pool_side) ** 2 * r * r)) + 1)

    coarse_unl = _coarse_set(unl, r, side, o_unl, 0, labeled=False)
    coarse_pool = _coarse_set(lab_c, r, coarse_side, o_lc, block, labeled=True)
    coarse_lab = coarse_pool.subset(np.sort(rng.choice(len(coarse_pool), cfg.n_coarse_labeled, replace=False)))

    fine_unl = _fine_set(unl, r, side, o_unl, 0, labeled=False)
    fine_pool = _fine_set(lab_f, r, pool_side, o_lf, 2 * block, labeled=True)
    fine_lab = fine_pool.subset(nested_sample(len(fine_pool), [cfg.n_fine_labeled], rng)[0])

    fine_test = _fine_set(test, r, side, o_test, 3 * block, labeled=True)

    fine = ResolutionLayer(0, cfg.fine_dim, fine_lab, fine_unl)
    coarse = ResolutionLayer(1, cfg.coarse_dim, coarse_lab, coarse_unl)
    return MultiResDataset(fine, (coarse,), 2, fine_test)


def unlabeled_fractions(ds: MultiResDataset) -> np.ndarray:
    """Fraction of truly positive fine instances inside each positive unlabeled coarse instance."""
    coarse = ds.coarse[0].unlabeled
    fine = ds.fine.unlabeled
    corr = correspond_sets(coarse, fine)
    truth = dict(zip(fine.ids.tolist(), fine.truth.tolist()))
    out = []
    for members in corr.groups.values():
        vals = [truth[m] for m in members]
        if max(vals) == 1:
            out.append(sum(vals) / len(vals))
    return np.array(out)


def nested_sample(n: int, sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Row subsets of sizes ``sizes``; each smaller subset is contained in every larger one."""
    perm = rng.permutation(n)
    out = []
    for size in sizes:
        if size > n:
            raise DataError(f"sample size {size} exceeds the {n} available instances")
        out.append(np.sort(perm[:size]))
    return out


# -- folds -------------------------------------------------------------------


def split_folds(labeled: InstanceSet, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded ``(train_rows, validation_rows)`` pairs partitioning the labeled rows."""
    n = len(labeled)
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise DataError(f"{n} labeled instances cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    out = []
    for i, val in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        out.append((np.sort(train), np.sort(val)))
    return out


# -- CSV ---------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(instances: InstanceSet, path) -> None:
    path = Path(path)
    L, D = instances.location_dim, instances.feature_dim
    header = ["id", *(f"loc{i}" for i in range(L)), "label", *(f"f{i}" for i in range(D))]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(instances)):
            w.writerow(
                [str(int(instances.ids[i]))]
                + [_fmt(v) for v in instances.locations[i]]
                + [str(int(instances.labels[i]))]
                + [_fmt(v) for v in instances.features[i]]
            )


def _parse_header(header: list[str], path: Path) -> tuple[int, int]:
    if not header or header[0] != "id" or "label" not in header:
        raise DataError(f"{path}:1: malformed header, expected id,loc0..,label,f0..")
    li = header.index("label")
    locs, feats = header[1:li], header[li + 1:]
    if locs != [f"loc{i}" for i in range(len(locs))] or feats != [f"f{i}" for i in range(len(feats))]:
        raise DataError(f"{path}:1: malformed header, expected id,loc0..,label,f0..")
    if not locs:
        raise DataError(f"{path}:1: header has no location columns")
    return len(locs), len(feats)


def load_csv(path, location_dim: int | None = None, feature_dim: int | None = None) -> InstanceSet:
    """Read one layer split; errors cite the offending line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing data file: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        L, D = _parse_header(header or [], path)
        if location_dim is not None and L != location_dim:
            raise DataError(f"{path}:1: {L} location columns, expected {location_dim}")
        if feature_dim is not None and D != feature_dim:
            raise DataError(f"{path}:1: {D} feature columns, expected {feature_dim}")
        ids, locs, labels, feats = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 2 + L + D:
                raise DataError(f"{path}:{line}: expected {2 + L + D} fields, got {len(row)}")
            try:
                ident = int(row[0])
                label = int(row[1 + L])
                vals = [float(v) for v in row[1:1 + L] + row[2 + L:]]
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric field") from None
            if label not in (UNLABELED, 0, 1):
                raise DataError(f"{path}:{line}: label {label} not in {{-1, 0, 1}}")
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{line}: non-finite value")
            ids.append(ident)
            labels.append(label)
            locs.append(vals[:L])
            feats.append(vals[L:])
    if not ids:
        return InstanceSet.empty(L, D)
    try:
        return InstanceSet(np.array(ids), np.array(locs), np.array(feats).reshape(len(ids), D), np.array(labels))
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


# -- data directories --------------------------------------------------------

FINE_FILES = ("fine-labeled.csv", "fine-unlabeled.csv", "fine-test.csv")


def write_dataset(ds: MultiResDataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer in ds.coarse:
        for split, part in (("labeled", layer.labeled), ("unlabeled", layer.unlabeled)):
            p = out / f"coarse{layer.resolution_id}-{split}.csv"
            save_csv(part, p)
            written.append(p)
    for name, part in zip(FINE_FILES, (ds.fine.labeled, ds.fine.unlabeled, ds.test)):
        if part is None:
            continue
        save_csv(part, out / name)
        written.append(out / name)
    return written


def read_dataset(data_dir) -> MultiResDataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"missing data directory: {d}")
    fine_lab = load_csv(d / "fine-labeled.csv")
    L = fine_lab.location_dim
    fine_unl = load_csv(d / "fine-unlabeled.csv", L, fine_lab.feature_dim)
    test_path = d / "fine-test.csv"
    test = load_csv(test_path, L, fine_lab.feature_dim) if test_path.exists() else None
    coarse = []
    ks = sorted(int(p.name[6:].split("-")[0]) for p in d.glob("coarse*-labeled.csv"))
    for k in ks:
        lab = load_csv(d / f"coarse{k}-labeled.csv", L)
        unl = load_csv(d / f"coarse{k}-unlabeled.csv", L, lab.feature_dim)
        coarse.append(ResolutionLayer(k, lab.feature_dim, lab, unl))
    fine = ResolutionLayer(0, fine_lab.feature_dim, fine_lab, fine_unl)
    return MultiResDataset(fine, tuple(coarse), L, test)
