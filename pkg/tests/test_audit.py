
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from multiaccuracy.audit import (AuditorConfig, AuditSample, Condition, LinearHypothesis,
                                 SetHypothesis, TreeHypothesis, TreeNode, ZeroHypothesis,
                                 evaluate_hypothesis, fit_auditor, fit_gradient_auditor,
                                 fit_ridge, fit_set_collection, fit_tree, gradient_audit_stats,
                                 gradient_targets, hypothesis_from_dict)
from multiaccuracy.errors import FormatError, InvalidInput

sklearn_linear = pytest.importorskip("sklearn.linear_model")
sklearn_tree = pytest.importorskip("sklearn.tree")


# ---- ridge ---------------------------------------------------------------


def test_ridge_exact_interpolation():
    h = fit_ridge(AuditSample([[1.0], [2.0], [3.0]], [1.0, 2.0, 3.0]),
                  AuditorConfig(ridge_lambda=0.0))
    assert h.w[0] == pytest.approx(1.0, abs=1e-12)
    assert h.b == pytest.approx(0.0, abs=1e-12)


def test_ridge_zero_targets():
    h = fit_ridge(AuditSample(np.arange(6.0).reshape(3, 2), np.zeros(3)))
    assert np.all(h.w == 0) and h.b == 0


def test_ridge_large_lambda_limit():
    # w -> 0 and b -> mean of the restricted targets: (1 + 0 + 5) / 3 = 2
    X = [[0.0], [1.0], [4.0]]
    sample = AuditSample(X, [1.0, 2.0, 5.0], [True, False, True])
    h = fit_ridge(sample, AuditorConfig(ridge_lambda=1e12))
    assert abs(h.w[0]) < 1e-9
    assert h.b == pytest.approx(2.0, abs=1e-9)


def test_ridge_rank_deficient_min_norm():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    h = fit_ridge(AuditSample(X, [1.0, 2.0, 3.0]), AuditorConfig(ridge_lambda=0.0))
    assert h.w == pytest.approx([0.5, 0.5], abs=1e-12)


@given(hnp.arrays(float, (12, 3), elements=st.floats(-3, 3)),
       hnp.arrays(float, 12, elements=st.floats(-1, 1)),
       st.floats(0.01, 50))
def test_ridge_matches_reference_solver(X, t, lam):
    ours = fit_ridge(AuditSample(X, t), AuditorConfig(ridge_lambda=lam, B=1e9))
    ref = sklearn_linear.Ridge(alpha=lam, fit_intercept=True, solver="cholesky").fit(X, t)
    assert ours.w == pytest.approx(ref.coef_, abs=1e-7)
    assert ours.b == pytest.approx(ref.intercept_, abs=1e-7)


@given(st.integers(0, 10_000), st.sampled_from(["ridge", "tree"]))
def test_restriction_equals_zeroed_targets(seed, kind):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((10, 3))
    t = rng.standard_normal(10)
    m = rng.random(10) < 0.5
    cfg = AuditorConfig(kind=kind)
    masked = fit_auditor(cfg, X, t, m)
    zeroed = fit_auditor(cfg, X, t * m, np.ones(10, bool))
    assert masked.to_dict() == zeroed.to_dict()


# ---- tree ----------------------------------------------------------------


def test_tree_constant_target_single_leaf():
    h = fit_tree(AuditSample(np.random.default_rng(0).standard_normal((20, 2)), np.full(20, 0.3)))
    assert h.root.is_leaf and h.root.value == pytest.approx(0.3)


def test_tree_sign_split():
    x = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0])
    t = np.where(x < 0, -1.0, 1.0)
    h = fit_tree(AuditSample(x[:, None], t), AuditorConfig(kind="tree", tree_max_depth=3))
    assert h.depth == 1
    assert -0.5 <= h.root.threshold < 0.0
    assert sorted(set(h.evaluate(x[:, None]))) == [-1.0, 1.0]


def _check_binary(node):
    if node.is_leaf:
        assert node.right is None
        return
    assert node.left is not None and node.right is not None
    _check_binary(node.left)
    _check_binary(node.right)


@pytest.mark.parametrize("depth", [1, 2, 5])
def test_tree_structure_bounds(depth):
    rng = np.random.default_rng(depth)
    X = rng.standard_normal((100, 4))
    h = fit_tree(AuditSample(X, rng.standard_normal(100)),
                 AuditorConfig(kind="tree", tree_max_depth=depth))
    assert h.depth <= depth
    assert h.root.leaves() <= 2 ** depth
    _check_binary(h.root)


def test_tree_tie_break_lowest_feature():
    # both columns separate the targets equally well
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    h = fit_tree(AuditSample(X, [0.0, 0.0, 1.0, 1.0]), AuditorConfig(kind="tree", tree_max_depth=1))
    assert h.root.feature == 0 and h.root.threshold == 0.5


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_tree_matches_reference_on_untied_data(seed, depth):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    t = np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.1 * rng.standard_normal(60)
    ours = fit_tree(AuditSample(X, t), AuditorConfig(kind="tree", tree_max_depth=depth, B=1e9))
    ref = sklearn_tree.DecisionTreeRegressor(max_depth=depth, random_state=0).fit(X, t)
    assert ours.evaluate(X) == pytest.approx(ref.predict(X), abs=1e-9)


def test_tree_determinism():
    rng = np.random.default_rng(7)
    X = rng.integers(0, 3, size=(80, 4)).astype(float)
    t = rng.standard_normal(80)
    cfg = AuditorConfig(kind="tree", tree_max_depth=5, seed=3)
    assert fit_tree(AuditSample(X, t), cfg).to_dict() == fit_tree(AuditSample(X, t), cfg).to_dict()


# ---- gradient targets ----------------------------------------------------


def test_gradient_target_examples():
    g = gradient_targets([0.5, 0.5, 0.99, 0.95], [0, 1, 1, 0], 10.0)
    assert g[0] == 2.0
    assert g[1] == -2.0
    assert g[2] == pytest.approx(1.0 / (1.0 - 0.99 - 1.0), abs=1e-12)
    assert g[2] == pytest.approx(-1.0101, abs=1e-4)
    assert g[3] == pytest.approx(2 * 10 - 100 * 0.05, abs=1e-9)
    assert g[3] == pytest.approx(15.0, abs=1e-9)


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0, 1]), st.floats(1.5, 50))
def test_gradient_targets_odd_and_bounded(f, y, tau):
    g = gradient_targets([f], [y], tau)[0]
    g_flip = gradient_targets([1 - f], [1 - y], tau)[0]
    assert g_flip == pytest.approx(-g, rel=1e-6, abs=1e-6)
    assert abs(g) <= 2 * tau + 1e-9
    assert np.sign(g) == np.sign(1 - f - y)


@pytest.mark.parametrize("tau", [2.0, 10.0, 37.0])
def test_gradient_targets_c1_at_threshold(tau):
    u0 = 1.0 / tau
    d = u0 * 1e-6
    lo, at, hi = gradient_targets([1 - (u0 - d), 1 - u0, 1 - (u0 + d)], [0, 0, 0], tau)
    assert at == pytest.approx(tau)
    assert lo == pytest.approx(tau, rel=1e-4) and hi == pytest.approx(tau, rel=1e-4)
    # both one-sided slopes equal d(1/u)/du = -tau^2
    assert (at - lo) / d == pytest.approx(-tau * tau, rel=1e-3)
    assert (hi - at) / d == pytest.approx(-tau * tau, rel=1e-3)


# ---- gradient auditor ----------------------------------------------------


def test_gradient_auditor_perfect_fit_returns_zero():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    f = np.clip(y, 1e-4, 1 - 1e-4)
    h = fit_gradient_auditor(AuditSample(np.eye(4), f - y), f, y,
                             AuditorConfig(kind="gradient", alpha=0.01))
    assert isinstance(h, ZeroHypothesis)


def test_gradient_auditor_reproduces_linear_targets():
    # targets 1/(1 - f - y) placed exactly on the line g = 2x + 1
    x = np.array([0.5, 1.0, 2.0, -1.5, -2.0, -3.0])
    g = 2 * x + 1
    y = (g < 0).astype(float)
    f = np.where(y == 0, 1 - 1 / g, -1 / g)
    cfg = AuditorConfig(kind="gradient", ridge_lambda=0.0, L=1e6, alpha=1e-6)
    sample = AuditSample(x[:, None], f - y)
    h = fit_gradient_auditor(sample, f, y, cfg)
    assert isinstance(h, LinearHypothesis)
    assert h.evaluate(x[:, None]) == pytest.approx(g, abs=1e-9)
    stats = gradient_audit_stats(h, sample, f, y, cfg)
    assert stats["fit_error"] < 1e-18


def test_gradient_auditor_rejects_orthogonal_targets():
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    f = np.full(4, 0.5)
    cfg = AuditorConfig(kind="gradient", ridge_lambda=0.0, alpha=0.01)
    sample = AuditSample(x, f - y)
    # targets (2, 2, -2, -2) are orthogonal to span{1, x}: the best fit is 0
    fit = fit_ridge(AuditSample(x, gradient_targets(f, y)), cfg)
    stats = gradient_audit_stats(fit, sample, f, y, cfg)
    assert stats["fit_error"] == pytest.approx(4.0)
    assert stats["epsilon"] == pytest.approx(1.0)
    assert stats["fit_error"] > 0.5 * stats["epsilon"] * stats["grad_norm2"]  # 4 > 2
    assert isinstance(fit_gradient_auditor(sample, f, y, cfg), ZeroHypothesis)


@given(st.integers(0, 10_000), st.floats(0.5, 20))
def test_gradient_auditor_soundness_and_budget(seed, L):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 2))
    y = (X[:, 0] + 0.5 * rng.standard_normal(30) > 0).astype(float)
    f = np.clip(1 / (1 + np.exp(-rng.standard_normal(30))), 1e-4, 1 - 1e-4)
    m = rng.random(30) < 0.7
    cfg = AuditorConfig(kind="gradient", L=L, alpha=0.01)
    sample = AuditSample(X, f - y, m)
    h = fit_gradient_auditor(sample, f, y, cfg)
    stats = gradient_audit_stats(h, sample, f, y, cfg)
    assert stats["h_norm2"] <= L * stats["loss"] * (1 + 1e-12)
    if not isinstance(h, ZeroHypothesis):
        assert stats["fit_error"] <= 0.5 * stats["epsilon"] * stats["grad_norm2"]
    assert np.all(np.abs(h.evaluate(X)) <= cfg.bound)


# ---- set collection ------------------------------------------------------


def eight_rows():
    X = np.arange(8.0)[:, None]
    S = SetHypothesis.single(0, "le", 3.0)
    return X, S


def test_set_collection_zero_residual():
    X, S = eight_rows()
    _, corr = fit_set_collection(AuditSample(X, np.zeros(8)), [S])
    assert corr == 0.0


def test_set_collection_hand_example():
    X, S = eight_rows()
    r = np.where(X[:, 0] <= 3, 0.5, 0.0)
    h, corr = fit_set_collection(AuditSample(X, r), [S])
    assert corr == pytest.approx(0.25) and not h.negated
    h, corr = fit_set_collection(AuditSample(X, -r), [S])
    assert corr == pytest.approx(0.25) and h.negated


def test_set_collection_empty():
    X, _ = eight_rows()
    with pytest.raises(InvalidInput):
        fit_set_collection(AuditSample(X, np.zeros(8)), [])


def test_set_collection_respects_mask():
    X, S = eight_rows()
    r = np.full(8, 0.5)
    _, corr = fit_set_collection(AuditSample(X, r, X[:, 0] >= 2), [S])
    assert corr == pytest.approx(2 * 0.5 / 8)


# ---- evaluation and payloads --------------------------------------------


def test_evaluate_examples():
    assert evaluate_hypothesis(ZeroHypothesis(), [1.0, 2.0]) == 0.0
    assert evaluate_hypothesis(LinearHypothesis([1.0], 0.0, bound=2.0), [3.0]) == 2.0
    S = SetHypothesis([Condition(0, "eq", 1.0), Condition(1, "gt", 0.0)])
    assert evaluate_hypothesis(S, [1.0, 5.0]) == 1.0
    assert evaluate_hypothesis(S, [0.0, 5.0]) == 0.0
    with pytest.raises(InvalidInput):
        evaluate_hypothesis(LinearHypothesis([1.0, 2.0], 0.0), [1.0])


@given(hnp.arrays(float, (7, 2), elements=st.floats(-1e3, 1e3)), st.floats(0.1, 5))
def test_range_bound(X, B):
    hyps = [LinearHypothesis([3.0, -7.0], 1.0, B),
            TreeHypothesis(TreeNode(feature=0, threshold=0.0, left=TreeNode(value=-9.0),
                                    right=TreeNode(value=9.0)), B)]
    for h in hyps:
        assert np.all(np.abs(h.evaluate(X)) <= B)


def test_payload_round_trip():
    hyps = [ZeroHypothesis(), LinearHypothesis([1.5, -2.0, 0.5], 0.25, 3.0),
            TreeHypothesis(TreeNode(feature=1, threshold=0.5, left=TreeNode(value=0.1),
                                    right=TreeNode(value=-0.2))),
            SetHypothesis.single(2, "eq", 1.0, negated=True),
            SetHypothesis([Condition(0, "le", 1.0), Condition(1, "gt", 2.0)])]
    X = np.random.default_rng(0).standard_normal((10, 3))
    for h in hyps:
        h2 = hypothesis_from_dict(h.to_dict())
        assert h2.to_dict() == h.to_dict()
        assert np.array_equal(h2.evaluate(X), h.evaluate(X))
    assert SetHypothesis.single(2, "eq", 1.0).to_dict() == {
        "kind": "set", "column": 2, "op": "eq", "value": 1.0, "negated": False}


@pytest.mark.parametrize("payload", [{"kind": "forest"}, {"w": [1]}, {"kind": "linear"},
                                     {"kind": "tree", "root": {"feature": 0}},
                                     {"kind": "set", "column": 0, "op": "lt", "value": 1}])
def test_payload_errors(payload):
    with pytest.raises(FormatError):
        hypothesis_from_dict(payload)


@pytest.mark.parametrize("kwargs", [dict(ridge_lambda=-1), dict(tree_max_depth=0),
                                    dict(smoothing_threshold=0), dict(L=0), dict(B=0),
                                    dict(alpha=0), dict(kind="neural"),
                                    dict(kind="set-collection")])
def test_config_validation(kwargs):
    with pytest.raises(InvalidInput):
        AuditorConfig(**kwargs)


def test_default_bounds():
    assert AuditorConfig().bound == 1.0
    assert AuditorConfig(kind="gradient").bound == 20.0
    assert AuditorConfig(kind="gradient", smoothing_threshold=3).bound == 6.0
