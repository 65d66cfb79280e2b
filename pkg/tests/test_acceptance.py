"""End-to-end checks: reports against brute force, bound and gradient sweeps,
and the regularization trends on the default synthetic dataset."""

import itertools
import math

import numpy as np
import pytest

from consistent_evidence.core import autodiff as ad
from consistent_evidence.core.losses import (
    TASK_LABEL,
    Batch,
    LossConfig,
    RegMode,
    reg_r1_hard,
    reg_r1_soft,
    reg_r2_hard,
    reg_r2_soft,
    total_objective,
)
from consistent_evidence.core.metrics import (
    PredictionRecord,
    dataset_report,
    exact_inconsistency_probability,
    min_bound,
    union_bound,
)
from consistent_evidence.core.model import PARAM_NAMES, PosteriorGraph, init
from consistent_evidence.core.synthdata import GenConfig, generate
from consistent_evidence.core.trainer import TrainConfig, evaluate, train
from consistent_evidence.harness import sweep

# findings of the edema spec by index, written out independently of the derivation rule
INCOMPATIBLE = {0: {0, 1, 2, 3, 4, 5, 6}, 1: {3, 4, 5, 6}, 2: {5, 6}, 3: set()}
DIRECT = {0: set(), 1: {0, 1, 2}, 2: {3, 4}, 3: {5, 6}}

FIXTURE = [
    (0, []),
    (0, [0, 5]),
    (1, [1]),
    (1, [0, 3, 6]),
    (1, [4]),
    (2, [3]),
    (2, [0, 1]),
    (2, [4, 5, 6]),
    (3, []),
    (3, [5]),
    (3, [0, 1, 2, 3, 4]),
    (1, [0, 1, 2, 3, 4, 5, 6]),
]


def as_vector(present):
    return np.array([1 if k in present else -1 for k in range(7)], dtype=np.int8)


def test_report_matches_enumeration(edema):
    records = [PredictionRecord(y, as_vector(present)) for y, present in FIXTURE]
    result = dataset_report(edema, records)

    r1 = [0] * 4
    r2 = [0] * 4
    for y, present in FIXTURE:
        r1[y] += sum(1 for k in range(7) if k in INCOMPATIBLE[y] and k in present)
        if DIRECT[y] and not any(k in present for k in DIRECT[y]):
            r2[y] += 1

    n = len(FIXTURE)
    assert round(result.r1_total * n) == sum(r1) == 11
    assert round(result.r2_total * n) == sum(r2) == 4
    assert [round(v * n) for v in result.r1_by_class] == r1
    assert [round(v * n) for v in result.r2_by_class] == r2
    assert result.r1_by_class[3] == 0.0


def brute_force_probabilities(y, probs):
    p_incompatible = p_insufficient = 0.0
    for bits in itertools.product((False, True), repeat=7):
        weight = math.prod(p if bit else 1 - p for bit, p in zip(bits, probs))
        if any(bits[k] for k in INCOMPATIBLE[y]):
            p_incompatible += weight
        if not any(bits[k] for k in DIRECT[y]):
            p_insufficient += weight
    return p_incompatible, p_insufficient


def test_exact_probabilities_match_enumeration(edema, rng):
    for _ in range(20):
        probs = rng.random(7)
        for y in range(4):
            expected = brute_force_probabilities(y, probs)
            assert exact_inconsistency_probability(edema, y, probs) == pytest.approx(expected, abs=1e-12)


def test_bounds_hold_for_random_distributions(edema, rng):
    violations = 0
    for _ in range(1000):
        probs = rng.random(7)
        for y in range(4):
            p_incompatible, p_insufficient = exact_inconsistency_probability(edema, y, probs)
            violations += union_bound(edema, y, probs) < p_incompatible - 1e-12
            violations += min_bound(edema, y, probs) < p_insufficient - 1e-12
    assert violations == 0


@pytest.mark.parametrize("mode", list(RegMode))
def test_objective_gradients(edema, rng, mode):
    config = LossConfig(1.0, 1.0, mode)
    for i in range(50):
        params = init(i, 3, 4, edema).arrays()
        params = {name: a + rng.normal(scale=0.5, size=a.shape) for name, a in params.items()}
        x = rng.normal(size=(4, 3))
        # every hidden pre-activation stays clear of the ReLU kink
        while np.abs(x @ params["w1"].T + params["b1"]).min() < 1e-3:
            x = rng.normal(size=(4, 3))
        if i % 2:
            batch = Batch(x, TASK_LABEL, rng.integers(4, size=4))
        else:
            batch = Batch(x, int(rng.integers(7)), rng.choice([-1, 1], size=4))

        def objective(leaves):
            return total_objective(edema, dict(zip(PARAM_NAMES, leaves)), batch, config)

        assert ad.grad_check(objective, [params[name] for name in PARAM_NAMES]) < 1e-4


def test_generated_truth_is_consistent(edema):
    config = GenConfig(n_train=100_000, n_validation=0, n_test=0, dim=1, p_evidence_label=0.0, seed=11)
    train_split = generate(config, edema).train
    present = train_split.z == 1
    incompatible = edema.incompatible_matrix().astype(bool)[train_split.y]
    support = edema.support_matrix().astype(bool)[train_split.y]

    assert not np.any(present & incompatible)
    exempt = ~support.any(axis=1)
    assert np.all(exempt | (present & support).any(axis=1))


def test_highest_class_has_no_incompatible_findings(edema, small_dataset, quick_train_config):
    for omega in (0.0, 3.0):
        config = quick_train_config.with_loss(omega1=omega, omega2=omega)
        checkpoint = train(small_dataset.train.pairs, small_dataset.validation, edema, config, 0).checkpoint
        assert evaluate(checkpoint, small_dataset.test, edema).report.r1_by_class[3] == 0.0


def test_soft_regularizers_reduce_to_hard(edema, rng):
    for _ in range(100):
        n = int(rng.integers(1, 4))
        task = np.eye(4)[rng.integers(4, size=n)]
        graph = PosteriorGraph.from_probabilities(task, rng.uniform(0.001, 0.999, size=(n, 7)))
        assert abs(reg_r1_soft(edema, graph).item() - reg_r1_hard(edema, graph).item()) <= 1e-12
        assert abs(reg_r2_soft(edema, graph).item() - reg_r2_hard(edema, graph).item()) <= 1e-12


@pytest.fixture(scope="module")
def trend_sweep(tmp_path_factory):
    """Default dataset and training settings over the points the trend checks need"""
    grid = sweep.SweepGrid(
        points=[(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)],
        modes=[RegMode.HARD.value, RegMode.SOFT.value],
        seeds=(0, 1, 2),
        gen=GenConfig(),
        train=TrainConfig(),
    )
    result = sweep.run_sweep(grid, str(tmp_path_factory.mktemp("trend")), workers=3)
    assert result.ok
    return {(a["omega1"], a["omega2"], a["mode"]): a for a in result.aggregates}


def pooled_std(a, b, metric):
    return math.sqrt((a[f"{metric}_std"] ** 2 + b[f"{metric}_std"] ** 2) / 2)


@pytest.mark.slow
def test_regularizers_reduce_incompatibility(trend_sweep):
    baseline, regularized = trend_sweep[(0.0, 0.0, "hard")], trend_sweep[(10.0, 10.0, "hard")]
    assert regularized["r1_mean"] <= 0.4 * baseline["r1_mean"]
    assert regularized["r2_mean"] <= baseline["r2_mean"]


@pytest.mark.slow
def test_one_regularizer_does_not_lower_the_other_measure(trend_sweep):
    baseline = trend_sweep[(0.0, 0.0, "hard")]
    only_r1 = trend_sweep[(10.0, 0.0, "hard")]
    only_r2 = trend_sweep[(0.0, 10.0, "hard")]
    assert only_r1["r2_mean"] >= baseline["r2_mean"] - pooled_std(baseline, only_r1, "r2")
    assert only_r2["r1_mean"] >= baseline["r1_mean"] - pooled_std(baseline, only_r2, "r1")


@pytest.mark.slow
def test_regularizers_keep_task_accuracy(trend_sweep):
    baseline, regularized = trend_sweep[(0.0, 0.0, "hard")], trend_sweep[(10.0, 10.0, "hard")]
    assert abs(regularized["acc_y_mean"] - baseline["acc_y_mean"]) <= 0.05


@pytest.mark.slow
def test_soft_regularizers_reduce_incompatibility(trend_sweep):
    baseline, regularized = trend_sweep[(0.0, 0.0, "soft")], trend_sweep[(10.0, 10.0, "soft")]
    assert regularized["r1_mean"] <= 0.6 * baseline["r1_mean"]
