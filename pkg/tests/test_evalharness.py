import numpy as np
import pytest

from bzsl import core
from bzsl.core import Hyperparams, build_surrogates
from bzsl.datastore import SplitSpec
from bzsl.dnaside import SideInfoTable
from bzsl.errors import EmptyGrid, InvalidSpec, LengthMismatch
from bzsl.evalharness import (
    GzslReport, SyntheticSpec, ablate_seen_count, expand_grid, generate_synthetic, harmonic_mean,
    make_validation_split, per_class_accuracy, run_gzsl, select_best, sweep_kappas, tune_grid,
)


# ---------------------------------------------------------------- metrics

def test_per_class_accuracy_examples():
    assert per_class_accuracy([0, 0, 1], [0, 0, 1], {0, 1}) == {0: 1.0, 1: 1.0}
    assert per_class_accuracy([0, 0], [0, 1], {0, 1}) == {0: 0.5}
    assert 7 not in per_class_accuracy([0, 1], [0, 1], {0, 1, 7})
    with pytest.raises(LengthMismatch):
        per_class_accuracy([0, 1], [0], {0, 1})


def test_per_class_is_macro_average():
    # class 0: 9/10 correct, class 1: 0/1 correct -> macro 0.45, micro would be 0.82
    truth = [0] * 10 + [1]
    pred = [0] * 9 + [1, 0]
    rep = GzslReport.from_accuracies(per_class_accuracy(truth, pred, {0, 1}), [0, 1], [])
    assert rep.seen_acc == pytest.approx(0.45)


@pytest.mark.parametrize("us, s, h", [(0.2083, 0.3830, 0.2699), (0.2746, 0.4814, 0.3497)])
def test_harmonic_mean_reported_rows(us, s, h):
    assert abs(harmonic_mean(us, s) - h) <= 0.0005


def test_harmonic_mean_identities():
    for x in np.linspace(0, 1, 11):
        assert harmonic_mean(x, x) == pytest.approx(x)
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.7) == 0.0


# ---------------------------------------------------------------- run_gzsl

def separable(rng, n=30):
    centers = {0: [-100.0, 0.0], 1: [100.0, 0.0], 2: [0.0, 0.0]}
    x = np.vstack([rng.standard_normal((n, 2)) + centers[c] for c in (0, 1, 2)])
    y = np.repeat([0, 1, 2], n)
    train = np.concatenate([np.arange(0, 20), np.arange(n, n + 20)])
    test_seen = np.concatenate([np.arange(20, n), np.arange(n + 20, 2 * n)])
    split = SplitSpec(train, test_seen, np.arange(2 * n, 3 * n), np.array([0, 1]), np.array([2])).validate(y)
    phi = SideInfoTable([0, 1, 2], [[-1.0], [1.0], [0.0]])
    return x, y, split, phi


def test_run_gzsl_separable(rng):
    x, y, split, phi = separable(rng)
    rep = run_gzsl(x, y, split, phi, Hyperparams(k_neighbors=2))
    assert rep.seen_acc >= 0.99 and rep.unseen_acc >= 0.99
    assert rep.harmonic_mean == 2 * rep.seen_acc * rep.unseen_acc / (rep.seen_acc + rep.unseen_acc)


def test_run_gzsl_without_unseen(rng):
    x, y, split, phi = separable(rng)
    keep = np.isin(y, [0, 1])
    no_unseen = SplitSpec(split.train_seen, split.test_seen, np.array([], np.int64),
                          split.seen_classes, np.array([], np.int64))
    rep = run_gzsl(x[keep], y[keep], no_unseen, phi.subset([0, 1]), Hyperparams())
    assert rep.unseen_acc == 0.0 and rep.harmonic_mean == 0.0
    assert rep.seen_acc >= 0.99


def test_run_gzsl_deterministic():
    data = generate_synthetic(SyntheticSpec(n_local_priors=4, samples_per_class=20, dim=4, seed=3))
    h = SyntheticSpec(dim=4).true_hyperparams()
    a = run_gzsl(data.x, data.labels.labels, data.split, data.phi, h, seed=3)
    b = run_gzsl(data.x, data.labels.labels, data.split, data.phi, h, seed=3, threads=4)
    assert a == b


def test_report_internal_consistency():
    data = generate_synthetic(SyntheticSpec(n_local_priors=5, samples_per_class=20, dim=5, seed=1))
    rep = run_gzsl(data.x, data.labels.labels, data.split, data.phi, SyntheticSpec(dim=5).true_hyperparams())
    assert 0 <= rep.seen_acc <= 1 and 0 <= rep.unseen_acc <= 1
    assert abs(harmonic_mean(rep.unseen_acc, rep.seen_acc) - rep.harmonic_mean) <= 1e-12
    assert set(rep.per_class_acc) == set(range(15))


def test_seen_predictions_ignore_surrogates():
    data = generate_synthetic(SyntheticSpec(n_local_priors=4, samples_per_class=20, dim=4, seed=5))
    x, y, split = data.x, data.labels.labels, data.split
    tr = split.train_seen
    phi_seen = data.phi.subset(split.seen_classes.tolist())
    h = SyntheticSpec(dim=4).true_hyperparams()
    with_sur = core.fit(x[tr], y[tr], phi_seen, data.phi.subset(split.unseen_classes.tolist()), h)
    without = core.fit(x[tr], y[tr], phi_seen, SideInfoTable([], np.zeros((0, 4))), h)
    a = core.predict_batch(with_sur, x[split.test_seen], "seen_only")
    b = core.predict_batch(without, x[split.test_seen], "seen_only")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ---------------------------------------------------------------- tuning

def _rep(h, us):
    return GzslReport({}, 0.5, us, h)


def test_select_best_rules():
    assert select_best(["a", "b"], [_rep(0.3, 0.2), _rep(0.4, 0.2)]) == "b"
    assert select_best(["a", "b"], [_rep(0.4, 0.30), _rep(0.4, 0.35)]) == "b"
    assert select_best(["a", "b"], [_rep(0.4, 0.35), _rep(0.4, 0.35)]) == "a"
    with pytest.raises(EmptyGrid):
        select_best([], [])


def test_expand_grid_order_and_errors():
    configs = expand_grid({"kappa1": [1.0, 10.0], "kappa0": [0.1, 1.0]})
    assert [(c.kappa0, c.kappa1) for c in configs] == [(0.1, 1.0), (0.1, 10.0), (1.0, 1.0), (1.0, 10.0)]
    with pytest.raises(EmptyGrid):
        expand_grid({})
    with pytest.raises(EmptyGrid):
        expand_grid({"kappa0": []})


def test_tune_singleton_grid():
    data = generate_synthetic(SyntheticSpec(n_local_priors=6, samples_per_class=20, dim=4, seed=2))
    y = data.labels.labels
    val = make_validation_split(y, data.split, unseen_frac=0.2, seed=2)
    assert not set(val.unseen_classes) & set(data.split.unseen_classes)
    base = SyntheticSpec(dim=4).true_hyperparams()
    best, configs, reports = tune_grid(data.x, y, val, data.phi, {"kappa1": [2.0]}, base)
    assert best == configs[0] and best.kappa1 == 2.0 and len(reports) == 1


# ---------------------------------------------------------------- ablations

@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic(SyntheticSpec(n_local_priors=6, samples_per_class=20, dim=4, seed=11))


def test_ablation_full_fraction_is_constant(small_synth):
    d = small_synth
    h = SyntheticSpec(dim=4).true_hyperparams()
    res = ablate_seen_count(d.x, d.labels.labels, d.split, d.phi, h, [1.0], repeats=3)
    (row,) = res.aggregate()
    assert row["repeats"] == 3 and row["US_sd"] == 0.0 and row["S_sd"] == 0.0
    full = run_gzsl(d.x, d.labels.labels, d.split, d.phi, h)
    assert row["US_mean"] == full.unseen_acc


def test_ablation_bookkeeping(small_synth):
    d = small_synth
    res = ablate_seen_count(d.x, d.labels.labels, d.split, d.phi, SyntheticSpec(dim=4).true_hyperparams(),
                            [0.5, 1.0], repeats=5, threads=3)
    assert [len(r) for r in res.runs] == [5, 5]
    assert len(res.long_rows()) == 10 and len(res.aggregate()) == 2


def test_sweep_singleton_and_order(small_synth):
    d = small_synth
    h = SyntheticSpec(dim=4).true_hyperparams()
    one = sweep_kappas(d.x, d.labels.labels, d.split, d.phi, h, [0.1], [1.0])
    assert one.runs[0][0] == run_gzsl(d.x, d.labels.labels, d.split, d.phi, h.__class__(**{**h.to_dict(), "kappa0": 0.1, "kappa1": 1.0}))
    fwd = sweep_kappas(d.x, d.labels.labels, d.split, d.phi, h, [0.1, 1.0], [1.0, 10.0], threads=4)
    rev = sweep_kappas(d.x, d.labels.labels, d.split, d.phi, h, [1.0, 0.1], [10.0, 1.0])
    a = {c: r[0].harmonic_mean for c, r in zip(fwd.axis_values, fwd.runs)}
    b = {c: r[0].harmonic_mean for c, r in zip(rev.axis_values, rev.runs)}
    assert a == b and len(a) == 4


# ---------------------------------------------------------------- generator

def test_synth_counts():
    d = generate_synthetic(SyntheticSpec())
    assert d.x.shape == (1500, 10)
    assert d.labels.n_classes == 30 and len(d.split.unseen_classes) == 10
    assert sorted(d.split.unseen_classes // 3) == list(range(10))


def test_synth_noiseless_side_info_recovers_co_members():
    spec = SyntheticSpec(n_local_priors=8, classes_per_prior=4, samples_per_class=5, dim=6, seed=4)
    d = generate_synthetic(spec)
    seen, unseen = d.split.seen_classes.tolist(), d.split.unseen_classes.tolist()
    for a in build_surrogates(d.phi.subset(seen), d.phi.subset(unseen), spec.classes_per_prior - 1):
        co = {c for c in seen if c // 4 == a.unseen_class // 4}
        assert set(a.members) == co


def test_synth_single_prior():
    d = generate_synthetic(SyntheticSpec(n_local_priors=1, classes_per_prior=4, dim=3))
    assert d.covariances.shape == (1, 3, 3) and set(d.prior_of_class) == {0}


def test_synth_class_means_converge():
    spec = SyntheticSpec(n_local_priors=3, samples_per_class=2000, dim=4, seed=9)
    d = generate_synthetic(spec)
    n = spec.samples_per_class
    for c in range(d.labels.n_classes):
        xbar = d.x[d.labels.labels == c].mean(axis=0)
        sd = np.sqrt(np.diag(d.covariances[d.prior_of_class[c]]) / n)
        assert np.all(np.abs(xbar - d.class_means[c]) <= 3 * sd)


def test_synth_pooled_covariance_converges():
    spec = SyntheticSpec(n_local_priors=4, samples_per_class=200, dim=5, seed=13)
    d = generate_synthetic(spec)
    y = d.labels.labels
    for j in range(spec.n_local_priors):
        resid = [d.x[y == c] - d.x[y == c].mean(axis=0) for c in np.flatnonzero(d.prior_of_class == j)]
        resid = np.vstack(resid)
        emp = resid.T @ resid / (len(resid) - spec.classes_per_prior)
        err = np.linalg.norm(emp - d.covariances[j]) / np.linalg.norm(d.covariances[j])
        assert err < 0.15


def test_synth_deterministic_and_invalid():
    a, b = generate_synthetic(SyntheticSpec(seed=5)), generate_synthetic(SyntheticSpec(seed=5))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.split.test_seen, b.split.test_seen)
    with pytest.raises(InvalidSpec):
        generate_synthetic(SyntheticSpec(dim=10, m_gen=11))
    with pytest.raises(InvalidSpec):
        generate_synthetic(SyntheticSpec(samples_per_class=0))
