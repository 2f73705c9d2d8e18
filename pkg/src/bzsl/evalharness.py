"""GZSL evaluation, hyperparameter search, ablations and a synthetic data
generator that samples the model's own hierarchy."""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import invwishart

from . import core
from .core import Hyperparams
from .datastore import LabelVector, SplitSpec, child_rng
from .dnaside import SideInfoTable
from .errors import DegenerateSplit, EmptyGrid, InvalidSpec, LengthMismatch


def per_class_accuracy(truth, predicted, class_set) -> dict:
    """Fraction of each class's samples predicted correctly.

    Classes in ``class_set`` with no samples in ``truth`` are left out.
    """
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    if truth.shape != predicted.shape:
        raise LengthMismatch(f"{len(truth)} truth labels but {len(predicted)} predictions")
    acc = {}
    for c in sorted(class_set):
        mask = truth == c
        if mask.any():
            acc[int(c)] = float(np.mean(predicted[mask] == c))
    return acc


def harmonic_mean(us: float, s: float) -> float:
    """``2 * us * s / (us + s)``, defined as 0 when both are 0."""
    total = us + s
    return 2.0 * us * s / total if total > 0 else 0.0


@dataclass
class GzslReport:
    per_class_acc: dict
    seen_acc: float
    unseen_acc: float
    harmonic_mean: float
    config_echo: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, per_class_acc, seen_classes, unseen_classes, config_echo=None):
        seen = [per_class_acc[c] for c in seen_classes if c in per_class_acc]
        unseen = [per_class_acc[c] for c in unseen_classes if c in per_class_acc]
        s = float(np.mean(seen)) if seen else 0.0
        us = float(np.mean(unseen)) if unseen else 0.0
        return cls(per_class_acc, s, us, harmonic_mean(us, s), dict(config_echo or {}))

    def row(self) -> dict:
        out = dict(self.config_echo)
        out.update(S=self.seen_acc, US=self.unseen_acc, H=self.harmonic_mean)
        return out

    def summary(self) -> str:
        lines = [
            f"seen accuracy (S):   {self.seen_acc:.4f}",
            f"unseen accuracy (US): {self.unseen_acc:.4f}",
            f"harmonic mean (H):   {self.harmonic_mean:.4f}",
        ]
        lines += [f"{k} = {v}" for k, v in self.config_echo.items()]
        return "\n".join(lines) + "\n"


def _phi_tables(phi: SideInfoTable, split: SplitSpec, train_classes):
    seen = phi.subset(sorted(int(c) for c in train_classes))
    unseen_ids = sorted(int(c) for c in split.unseen_classes)
    unseen = phi.subset(unseen_ids)
    return seen, unseen


def run_gzsl(x, y, split: SplitSpec, phi: SideInfoTable, hyper: Hyperparams, seed: int = 0,
             threads: int = 1, return_predictions: bool = False):
    """Fit on ``train_seen`` and score ``test_seen`` plus ``test_unseen``.

    Accuracy is averaged per class: S over seen classes present in
    ``test_seen``, US over unseen classes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    train_classes = np.unique(y[split.train_seen])
    phi_seen, phi_unseen = _phi_tables(phi, split, train_classes)
    model = core.fit(x[split.train_seen], y[split.train_seen], phi_seen, phi_unseen, hyper, threads)

    test = np.concatenate([split.test_seen, split.test_unseen]).astype(np.int64)
    echo = dict(hyper.to_dict(), seed=seed, pca_dim_used=model.pca.out_dim if model.pca else None)
    if len(test) == 0:
        report = GzslReport({}, 0.0, 0.0, 0.0, echo)
        return (report, model, test, np.array([]), np.array([])) if return_predictions else report
    pred, top = core.predict_batch(model, x[test], "gzsl")
    acc = per_class_accuracy(y[test], pred, set(y[test].tolist()))
    seen_eval = sorted(set(y[split.test_seen].tolist()))
    report = GzslReport.from_accuracies(acc, seen_eval, sorted(split.unseen_classes.tolist()), echo)
    if return_predictions:
        return report, model, test, pred, top
    return report


def _pool_map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# --------------------------------------------------------------------------
# tuning


def make_validation_split(y, split: SplitSpec, unseen_frac: float = 0.1,
                          seen_test_frac: float = 0.2, seed: int = 0) -> SplitSpec:
    """Carve a validation split out of ``split.train_seen``: a fraction of the
    seen classes become pseudo-unseen, the rest are split per class."""
    from .datastore import make_split

    y = np.asarray(y)
    idx = split.train_seen
    inner = make_split(y[idx], unseen_frac, seen_test_frac, seed=seed)
    return SplitSpec(
        idx[inner.train_seen], idx[inner.test_seen], idx[inner.test_unseen],
        inner.seen_classes, inner.unseen_classes,
    ).validate(y)


def expand_grid(grid: dict, base: Hyperparams | None = None) -> list:
    """Cartesian product of per-field value lists, in lexicographic order of
    the field names and the order values were given."""
    base = base or Hyperparams()
    keys = sorted(grid)
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise EmptyGrid("hyperparameter grid is empty")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def select_best(configs, reports):
    """Highest H; ties go to higher US, then to the earlier config."""
    if not configs:
        raise EmptyGrid("no configurations evaluated")
    best = 0
    for i in range(1, len(reports)):
        a, b = reports[i], reports[best]
        if (a.harmonic_mean, a.unseen_acc) > (b.harmonic_mean, b.unseen_acc):
            best = i
    return configs[best]


def tune_grid(x, y, val_split: SplitSpec, phi: SideInfoTable, grid: dict,
              base: Hyperparams | None = None, seed: int = 0, threads: int = 1):
    """Exhaustive grid search on a validation split; returns
    ``(best_hyperparams, configs, reports)``."""
    configs = expand_grid(grid, base)
    reports = _pool_map(lambda h: run_gzsl(x, y, val_split, phi, h, seed), configs, threads)
    return select_best(configs, reports), configs, reports


# --------------------------------------------------------------------------
# ablations


@dataclass
class AblationResult:
    axis_name: str
    axis_values: list
    runs: list            # per axis value, list of GzslReport over repeats
    repeats: int

    def aggregate(self) -> list:
        rows = []
        for value, runs in zip(self.axis_values, self.runs):
            row = {self.axis_name: value, "repeats": len(runs)}
            for key, attr in (("S", "seen_acc"), ("US", "unseen_acc"), ("H", "harmonic_mean")):
                vals = np.array([getattr(r, attr) for r in runs])
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append(row)
        return rows

    def long_rows(self) -> list:
        rows = []
        for value, runs in zip(self.axis_values, self.runs):
            for r, rep in enumerate(runs):
                rows.append({self.axis_name: value, "repeat": r, "seed": rep.config_echo.get("seed"),
                             "S": rep.seen_acc, "US": rep.unseen_acc, "H": rep.harmonic_mean})
        return rows


def subsample_seen(y, split: SplitSpec, fraction: float, rng, min_classes: int = 2) -> SplitSpec:
    """Keep a random ``fraction`` of the seen classes; unseen data untouched."""
    y = np.asarray(y)
    seen = np.asarray(split.seen_classes)
    n_keep = max(int(round(fraction * len(seen))), min_classes)
    if n_keep > len(seen):
        raise DegenerateSplit(f"cannot keep {n_keep} of {len(seen)} seen classes")
    keep = seen if n_keep == len(seen) else np.sort(rng.choice(seen, size=n_keep, replace=False))
    return SplitSpec(
        split.train_seen[np.isin(y[split.train_seen], keep)],
        split.test_seen[np.isin(y[split.test_seen], keep)],
        split.test_unseen, keep, split.unseen_classes,
    ).validate(y)


def ablate_seen_count(x, y, split: SplitSpec, phi: SideInfoTable, hyper: Hyperparams,
                      fractions, repeats: int = 5, seed: int = 0, threads: int = 1) -> AblationResult:
    """Re-run GZSL with growing subsets of seen classes.

    Repeat ``r`` draws its subsample from seed ``seed + r``; the unseen class
    set is identical in every run.
    """
    fractions = list(fractions)
    if any(not 0 < f <= 1 for f in fractions):
        raise DegenerateSplit("fractions must lie in (0, 1]")
    min_classes = max(2, hyper.k_neighbors)
    cells = []
    for f in fractions:
        for r in range(repeats):
            sub = subsample_seen(y, split, f, child_rng(seed + r, f"subsample:{f!r}"), min_classes)
            assert np.array_equal(sub.unseen_classes, split.unseen_classes)
            cells.append((sub, seed + r))
    reports = _pool_map(lambda c: run_gzsl(x, y, c[0], phi, hyper, c[1]), cells, threads)
    runs = [reports[i * repeats:(i + 1) * repeats] for i in range(len(fractions))]
    return AblationResult("seen_fraction", fractions, runs, repeats)


def sweep_kappas(x, y, split: SplitSpec, phi: SideInfoTable, hyper_base: Hyperparams,
                 kappa0_list, kappa1_list, seed: int = 0, threads: int = 1) -> AblationResult:
    """Full factorial sweep over kappa0 x kappa1, other settings fixed."""
    cells = [(k0, k1) for k0 in kappa0_list for k1 in kappa1_list]
    reports = _pool_map(
        lambda c: run_gzsl(x, y, split, phi, replace(hyper_base, kappa0=c[0], kappa1=c[1]), seed),
        cells, threads,
    )
    return AblationResult("kappa0,kappa1", cells, [[r] for r in reports], 1)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_local_priors: int = 10
    classes_per_prior: int = 3
    samples_per_class: int = 50
    dim: int = 10
    kappa0: float = 0.1
    kappa1: float = 1.0
    m_gen: int | None = None
    sideinfo_noise: float = 0.0
    seen_test_frac: float = 0.2
    seed: int = 0

    @property
    def m(self) -> int:
        return self.m_gen if self.m_gen is not None else 2 * (self.dim + 2)

    def validate(self):
        counts = (self.n_local_priors, self.classes_per_prior, self.samples_per_class, self.dim)
        if any(int(c) < 1 for c in counts):
            raise InvalidSpec("all counts must be at least 1")
        if self.m < self.dim + 2:
            raise InvalidSpec(f"m_gen={self.m} is below the minimum feasible value D+2={self.dim + 2}")
        if not self.kappa0 > 0 or not self.kappa1 > 0:
            raise InvalidSpec("kappa0 and kappa1 must be positive")
        if self.sideinfo_noise < 0:
            raise InvalidSpec("sideinfo_noise must be non-negative")
        if not 0 <= self.seen_test_frac < 1:
            raise InvalidSpec("seen_test_frac must lie in [0, 1)")
        return self

    def true_hyperparams(self, **overrides) -> Hyperparams:
        """Model settings matching the generator: the same kappas and m, s chosen
        so the estimated Sigma_0 matches the inverse-Wishart scale, and K equal
        to the number of seen co-members of each unseen class."""
        d = self.dim
        h = Hyperparams(
            kappa0=self.kappa0,
            kappa1=self.kappa1,
            m_mult=self.m / (d + 2),
            s_scale=float(self.m - d - 1),
            k_neighbors=max(self.classes_per_prior - 1, 1),
            pca_dim=None,
        )
        return replace(h, **overrides)


@dataclass
class SyntheticData:
    x: np.ndarray
    labels: LabelVector
    phi: SideInfoTable
    split: SplitSpec
    class_means: np.ndarray
    prior_means: np.ndarray
    covariances: np.ndarray
    prior_of_class: np.ndarray


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Sample features, labels, side information and a split from the
    hierarchy.

    Local prior covariances come from an inverse Wishart with scale
    ``(m - D - 1) I`` so their expectation is the identity. Class ``(j, i)``
    has id ``j * classes_per_prior + i``; its side information is ``mu_j``
    plus isotropic noise of scale ``sideinfo_noise``. One class per local
    prior, drawn at random, is unseen.
    """
    spec.validate()
    rng = child_rng(spec.seed, "synth")
    g, c, n, d, m = spec.n_local_priors, spec.classes_per_prior, spec.samples_per_class, spec.dim, spec.m
    iw = invwishart(df=m, scale=np.eye(d) * (m - d - 1))

    covs = np.empty((g, d, d))
    prior_means = np.empty((g, d))
    class_means = np.empty((g * c, d))
    phi = np.empty((g * c, d))
    x = np.empty((g * c * n, d))
    for j in range(g):
        sigma = np.atleast_2d(iw.rvs(random_state=rng))
        sigma = 0.5 * (sigma + sigma.T)
        covs[j] = sigma
        prior_means[j] = rng.multivariate_normal(np.zeros(d), sigma / spec.kappa0, method="cholesky")
        for i in range(c):
            cls = j * c + i
            class_means[cls] = rng.multivariate_normal(prior_means[j], sigma / spec.kappa1, method="cholesky")
            x[cls * n:(cls + 1) * n] = rng.multivariate_normal(class_means[cls], sigma, size=n, method="cholesky")
            phi[cls] = prior_means[j] + spec.sideinfo_noise * rng.standard_normal(d)

    names = [f"p{j}_c{i}" for j in range(g) for i in range(c)]
    y = np.repeat(np.arange(g * c), n)
    labels = LabelVector(y, names, [f"s{k}" for k in range(len(y))])
    unseen = np.sort(np.array([j * c + rng.integers(c) for j in range(g)], dtype=np.int64))
    seen = np.setdiff1d(np.arange(g * c), unseen)
    train, test = [], []
    for cls in seen:
        members = np.arange(cls * n, (cls + 1) * n)
        n_test = int(round(spec.seen_test_frac * n))
        n_test = min(n_test, n - 1)
        chosen = np.sort(rng.choice(members, size=n_test, replace=False)) if n_test else np.array([], int)
        test.extend(chosen.tolist())
        train.extend(np.setdiff1d(members, chosen).tolist())
    test_unseen = np.flatnonzero(np.isin(y, unseen))
    split = SplitSpec(np.array(train, np.int64), np.array(test, np.int64), test_unseen.astype(np.int64),
                      seen, unseen).validate(y)
    table = SideInfoTable(list(range(g * c)), phi, "dna_external", names)
    return SyntheticData(x, labels, table, split, class_means, prior_means, covs,
                         np.repeat(np.arange(g), c))


# --------------------------------------------------------------------------
# report files


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return "" if v is None else str(v)


def write_rows(path, rows):
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("")
        return
    fields = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in fields])
