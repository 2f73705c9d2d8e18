"""Hierarchical Bayesian zero-shot classifier.

Image features are modelled as

    x_jik ~ N(mu_ji, Sigma_j)
    mu_ji ~ N(mu_j, Sigma_j / kappa1)
    mu_j  ~ N(mu_0, Sigma_j / kappa0)
    Sigma_j ~ InvWishart(Sigma_0, m)

where j indexes local priors, i classes and k samples. Seen classes get a
Student-t posterior predictive built from their own data and the global
prior. Each unseen class gets a surrogate: the predictive implied by the
local prior that its K nearest seen classes (in side-information space)
share.
"""

from __future__ import annotations

import io
import itertools
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datastore import PcaModel, compute_class_stats, encode_bmat, pca_apply, pca_fit
from .dnaside import SideInfoTable
from .errors import (
    DimensionMismatch,
    FormatError,
    InsufficientClasses,
    KTooLarge,
    NonPositiveDof,
    NotPositiveDefinite,
    UniquenessExhausted,
)
from .numkernel import CholeskyFactor, StudentTParams, as_sym, make_student_t, student_t_logpdf

MODEL_MAGIC = b"BZSLMDL1"
MODES = ("gzsl", "zsl_only", "seen_only")
AUTO_PCA_THRESHOLD = 500

DEFAULT_GRID = {
    "kappa0": [0.01, 0.1, 1.0, 10.0],
    "kappa1": [0.1, 1.0, 10.0, 25.0],
    "m_mult": [1.0, 5.0, 25.0, 100.0],
    "s_scale": [0.1, 0.5, 1.0, 5.0],
    "k_neighbors": [1, 2, 3, 5],
}


@dataclass(frozen=True)
class Hyperparams:
    """Model hyperparameters.

    ``m`` is given as a multiple of its minimum feasible value ``D + 2``.
    ``pca_dim=None`` reduces features to 500 dimensions only when ``D > 500``;
    an explicit value reduces whenever it is below ``D``.
    """

    kappa0: float = 0.1
    kappa1: float = 1.0
    m_mult: float = 5.0
    s_scale: float = 1.0
    k_neighbors: int = 2
    pca_dim: int | None = None

    def __post_init__(self):
        if not self.kappa0 > 0 or not self.kappa1 > 0:
            raise ValueError("kappa0 and kappa1 must be positive")
        if not self.m_mult >= 1:
            raise ValueError("m_mult must be at least 1")
        if not self.s_scale > 0:
            raise ValueError("s_scale must be positive")
        if int(self.k_neighbors) < 1:
            raise ValueError("k_neighbors must be at least 1")
        if self.pca_dim is not None and int(self.pca_dim) < 1:
            raise ValueError("pca_dim must be positive")

    def m(self, dim: int) -> int:
        return max(int(round(self.m_mult * (dim + 2))), dim + 2)

    def pca_target(self, dim: int) -> int | None:
        if self.pca_dim is None:
            return AUTO_PCA_THRESHOLD if dim > AUTO_PCA_THRESHOLD else None
        return int(self.pca_dim) if int(self.pca_dim) < dim else None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GlobalPrior:
    mu0: np.ndarray
    sigma0: np.ndarray
    m: int

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]


@dataclass(frozen=True)
class SurrogateAssignment:
    unseen_class: int
    members: tuple
    distances: tuple


@dataclass(frozen=True)
class ClassPredictiveModel:
    class_id: int
    kind: str
    ppd: StudentTParams


@dataclass
class FittedModel:
    global_prior: GlobalPrior
    seen_models: list
    surrogate_models: list
    hyper: Hyperparams
    pca: PcaModel | None = None
    assignments: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.global_prior.dim

    def candidates(self, mode: str = "gzsl") -> list:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        pool = {
            "gzsl": self.seen_models + self.surrogate_models,
            "zsl_only": self.surrogate_models,
            "seen_only": self.seen_models,
        }[mode]
        return sorted(pool, key=lambda cm: cm.class_id)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return pca_apply(self.pca, x) if self.pca is not None else x


# --------------------------------------------------------------------------
# priors and predictive distributions


def estimate_global_prior(stats, hyper: Hyperparams) -> GlobalPrior:
    """mu_0 is the unweighted mean of class means; Sigma_0 is ``s`` times the
    average sample covariance over classes with at least two samples."""
    if len(stats) < 2:
        raise InsufficientClasses(f"need at least 2 seen classes, got {len(stats)}")
    dim = stats[0].mean.shape[0]
    mu0 = np.mean([st.mean for st in stats], axis=0)
    covs = [st.covariance for st in stats if st.count >= 2]
    if not covs:
        raise InsufficientClasses("no seen class has two or more samples to estimate Sigma_0")
    sigma0 = as_sym(hyper.s_scale * np.mean(covs, axis=0))
    return GlobalPrior(mu0=mu0, sigma0=sigma0, m=hyper.m(dim))


def _check_dof(dof: float, what: str) -> float:
    if not dof > 0:
        raise NonPositiveDof(f"{what}: degrees of freedom {dof} is not positive")
    return float(dof)


def seen_ppd(stats, gp: GlobalPrior, hyper: Hyperparams) -> StudentTParams:
    """Student-t predictive of a seen class from its data and the global prior."""
    n, dim = stats.count, gp.dim
    k_eff = hyper.kappa0 * hyper.kappa1 / (hyper.kappa0 + hyper.kappa1)
    mean = (n * stats.mean + k_eff * gp.mu0) / (n + k_eff)
    dof = _check_dof(n + gp.m - dim + 1, f"seen class {stats.class_id}")
    dev = stats.mean - gp.mu0
    s_mu = (n * k_eff / (n + k_eff)) * np.outer(dev, dev)
    scale = (gp.sigma0 + stats.scatter + s_mu) * ((n + k_eff + 1) / ((n + k_eff) * dof))
    try:
        return make_student_t(mean, as_sym(scale), dof)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(str(exc), class_id=stats.class_id) from exc


def unseen_ppd(members, gp: GlobalPrior, hyper: Hyperparams, class_id=None) -> StudentTParams:
    """Surrogate Student-t predictive from member seen classes' statistics.

    Each member contributes its mean with weight ``w = n*kappa1/(n+kappa1)``.
    The scale inflation uses ``k_tilde = kappa1*(kappa0 + sum(w)) /
    (kappa1 + kappa0 + sum(w))``: the local prior mean is known with
    precision ``kappa0 + sum(w)`` and a new class mean scatters around it
    with precision ``kappa1``.
    """
    if not members:
        raise InsufficientClasses("surrogate needs at least one member class")
    dim = gp.dim
    counts = np.array([st.count for st in members], dtype=np.float64)
    w = counts * hyper.kappa1 / (counts + hyper.kappa1)
    means = np.stack([st.mean for st in members])
    mean = (w @ means + hyper.kappa0 * gp.mu0) / (w.sum() + hyper.kappa0)
    dof = _check_dof(np.sum(counts - 1) + gp.m - dim + 1, f"surrogate {class_id}")
    k_tilde = hyper.kappa1 * (hyper.kappa0 + w.sum()) / (hyper.kappa1 + hyper.kappa0 + w.sum())
    scatter = gp.sigma0 + sum(st.scatter for st in members)
    scale = scatter * ((k_tilde + 1) / (k_tilde * dof))
    try:
        return make_student_t(mean, as_sym(scale), dof)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(str(exc), class_id=class_id) from exc


# --------------------------------------------------------------------------
# surrogates


def build_surrogates(phi_seen: SideInfoTable, phi_unseen: SideInfoTable, k: int) -> list:
    """Assign each unseen class its ``k`` nearest seen classes in ``phi`` space.

    Unseen classes are handled in ascending id order. Distance ties go to
    the smaller seen id. When an unseen class would reuse a member set that
    an earlier unseen class already holds, its least similar member is
    swapped for the next candidate down its ranking until the set is new.
    If every such swap is taken, the search continues through the remaining
    K-subsets of the ranking in lexicographic order of rank positions.
    """
    k = int(k)
    n_seen = len(phi_seen)
    if k > n_seen:
        raise KTooLarge(f"K={k} exceeds the {n_seen} available seen classes")
    seen_ids = np.asarray(phi_seen.class_ids)
    taken = set()
    out = []
    for u in np.argsort(np.asarray(phi_unseen.class_ids), kind="stable"):
        diff = phi_seen.vectors - phi_unseen.vectors[u]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        ranking = np.lexsort((seen_ids, dist))
        # rank positions in lexicographic order: (0..K-1), (0..K-2, K), ...
        for positions in itertools.combinations(range(n_seen), k):
            chosen = ranking[list(positions)]
            if frozenset(seen_ids[chosen].tolist()) not in taken:
                break
        else:
            raise UniquenessExhausted(
                f"no unique set of {k} seen classes left for unseen class {phi_unseen.class_ids[u]}"
            )
        taken.add(frozenset(seen_ids[chosen].tolist()))
        out.append(
            SurrogateAssignment(
                unseen_class=int(phi_unseen.class_ids[u]),
                members=tuple(int(seen_ids[r]) for r in chosen),
                distances=tuple(float(dist[r]) for r in chosen),
            )
        )
    return out


# --------------------------------------------------------------------------
# fitting and prediction


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def fit(x_train, y_train, phi_seen, phi_unseen, hyper: Hyperparams, threads: int = 1) -> FittedModel:
    """Fit seen-class and surrogate predictive distributions.

    ``phi_seen`` must cover every class present in ``y_train``; rows for
    seen classes without training samples are ignored. An empty
    ``phi_unseen`` yields a seen-only classifier.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    if x_train.ndim != 2 or x_train.shape[0] != len(y_train):
        raise DimensionMismatch(f"features {x_train.shape} do not match {len(y_train)} labels")

    pca = None
    target = hyper.pca_target(x_train.shape[1])
    if target is not None:
        pca = pca_fit(x_train, min(target, x_train.shape[0]))
        x_train = pca_apply(pca, x_train)

    seen_ids = sorted(set(y_train.tolist()))
    stats = compute_class_stats(x_train, y_train, seen_ids)
    by_id = {st.class_id: st for st in stats}
    gp = estimate_global_prior(stats, hyper)

    seen_models = _map(
        lambda st: ClassPredictiveModel(st.class_id, "seen", seen_ppd(st, gp, hyper)), stats, threads
    )

    assignments = []
    surrogate_models = []
    if phi_unseen is not None and len(phi_unseen) > 0:
        overlap = set(phi_unseen.class_ids) & set(seen_ids)
        if overlap:
            raise FormatError(f"classes {sorted(overlap)} are both seen and unseen")
        table = phi_seen.subset(seen_ids)
        assignments = build_surrogates(table, phi_unseen, hyper.k_neighbors)
        surrogate_models = _map(
            lambda a: ClassPredictiveModel(
                a.unseen_class,
                "surrogate",
                unseen_ppd([by_id[c] for c in a.members], gp, hyper, a.unseen_class),
            ),
            assignments,
            threads,
        )
    return FittedModel(gp, seen_models, surrogate_models, hyper, pca, assignments)


def score_batch(model: FittedModel, x, mode: str = "gzsl"):
    """Log predictive density of every row of ``x`` under every candidate.

    Returns ``(class_ids, scores)`` with ``scores`` of shape ``(N, C)`` and
    candidates in ascending class id order.
    """
    cands = model.candidates(mode)
    if not cands:
        raise ValueError(f"model has no candidates for mode {mode!r}")
    x = model.transform(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"expected {model.dim} features, got {x.shape[1]}")
    scores = np.column_stack([student_t_logpdf(x, cm.ppd) for cm in cands])
    return np.array([cm.class_id for cm in cands], dtype=np.int64), scores


def predict_batch(model: FittedModel, x, mode: str = "gzsl"):
    """Arg-max class per row; ties resolve to the smallest class id."""
    ids, scores = score_batch(model, x, mode)
    best = np.argmax(scores, axis=1)
    return ids[best], scores[np.arange(len(best)), best]


def predict(model: FittedModel, x, mode: str = "gzsl"):
    """Classify one sample; returns ``(class_id, {class_id: log_score})``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict takes a single feature vector")
    ids, scores = score_batch(model, x[None, :], mode)
    row = scores[0]
    return int(ids[int(np.argmax(row))]), {int(c): float(s) for c, s in zip(ids, row)}


# --------------------------------------------------------------------------
# serialization


def _block(buf, arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    buf.write(encode_bmat(arr)[8:])


def dumps_model(model: FittedModel) -> bytes:
    """Serialize to the ``BZSLMDL1`` format.

    Layout: magic, uint64 length of a UTF-8 JSON header, the header, then
    float64 blocks each written as ``rows, cols, values`` (little-endian,
    row-major) in the order the header lists them.
    """
    gp = model.global_prior
    header = {
        "hyper": model.hyper.to_dict(),
        "dim": gp.dim,
        "m": gp.m,
        "pca": model.pca is not None,
        "classes": [
            {"class_id": cm.class_id, "kind": cm.kind, "dof": cm.ppd.dof, "jitter": cm.ppd.scale_chol.jitter}
            for cm in model.seen_models + model.surrogate_models
        ],
        "assignments": [
            {"unseen_class": a.unseen_class, "members": list(a.members), "distances": list(a.distances)}
            for a in model.assignments
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    _block(buf, gp.mu0)
    _block(buf, gp.sigma0)
    if model.pca is not None:
        _block(buf, model.pca.mean)
        _block(buf, model.pca.basis)
    for cm in model.seen_models + model.surrogate_models:
        _block(buf, cm.ppd.mean)
        _block(buf, cm.ppd.scale_chol.lower)
        _block(buf, [[cm.ppd.scale_chol.log_det, cm.ppd.log_norm_const]])
    return buf.getvalue()


def loads_model(raw: bytes) -> FittedModel:
    if raw[:8] != MODEL_MAGIC:
        raise FormatError("bad model magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    pos = 16 + hlen

    def block():
        nonlocal pos
        rows, cols = struct.unpack("<QQ", raw[pos : pos + 16])
        pos += 16
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64)
        pos += 8 * rows * cols
        return arr.reshape(rows, cols)

    mu0 = block()[0]
    sigma0 = block()
    gp = GlobalPrior(mu0, sigma0, int(header["m"]))
    pca = PcaModel(block()[0], block()) if header["pca"] else None
    seen, surrogate = [], []
    for entry in header["classes"]:
        mean = block()[0]
        lower = block()
        log_det, lnc = block()[0]
        chol = CholeskyFactor(lower, float(log_det), float(entry["jitter"]))
        ppd = StudentTParams(mean, chol, float(entry["dof"]), float(lnc))
        cm = ClassPredictiveModel(int(entry["class_id"]), entry["kind"], ppd)
        (seen if cm.kind == "seen" else surrogate).append(cm)
    assignments = [
        SurrogateAssignment(a["unseen_class"], tuple(a["members"]), tuple(a["distances"]))
        for a in header["assignments"]
    ]
    return FittedModel(gp, seen, surrogate, Hyperparams(**header["hyper"]), pca, assignments)


def save_model(path, model: FittedModel):
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> FittedModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
