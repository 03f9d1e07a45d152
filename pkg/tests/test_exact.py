import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from treeguide.exact import (dump_marginals, exact_backward_with_evidence, exact_kernels, exact_marginals,
                             linear_sde_to_kernel, loss_lower_bound)
from treeguide.filtering import backward_sweep
from treeguide.models import PAPER_OU, LinearKernelSpec, LinearSdeSpec, ObservationModel, brownian_aux, ou_sde
from treeguide.tree import EdgeDynamics, balanced_tree, build_tree, random_tree

D = EdgeDynamics.discrete()


def test_sde_to_kernel_brownian():
    k = linear_sde_to_kernel(brownian_aux(np.eye(2)), 1.0, 10)
    np.testing.assert_allclose(k.B, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(k.beta, 0.0, atol=1e-15)
    np.testing.assert_allclose(k.Sigma_tilde, np.eye(2), rtol=1e-14)


def test_sde_to_kernel_scalar_ou():
    a, s, T = 1.7, 0.6, 0.9
    k = linear_sde_to_kernel(LinearSdeSpec.constant([[-a]], [0.0], [[s]]), T, 50)
    assert k.B[0, 0] == pytest.approx(np.exp(-a * T), rel=1e-10)
    assert k.Sigma_tilde[0, 0] == pytest.approx(s * s * (1 - np.exp(-2 * a * T)) / (2 * a), rel=1e-10)


def test_sde_to_kernel_zero_duration():
    k = linear_sde_to_kernel(ou_sde(**PAPER_OU).linear, 0.0, 10)
    np.testing.assert_array_equal(k.B, np.eye(2))
    np.testing.assert_array_equal(k.beta, 0.0)
    np.testing.assert_array_equal(k.Sigma_tilde, 0.0)


def test_sde_to_kernel_matches_matrix_exponential():
    from scipy.linalg import expm
    lin = ou_sde(**PAPER_OU).linear
    k = linear_sde_to_kernel(lin, 0.7, 200)
    A = -np.array(PAPER_OU["alpha_mat"])
    np.testing.assert_allclose(k.B, expm(0.7 * A), rtol=1e-10)
    # Van Loan block exponential for the covariance
    S = np.array(PAPER_OU["sigma_mat"]) @ np.array(PAPER_OU["sigma_mat"]).T
    M = np.block([[A, S], [np.zeros((2, 2)), -A.T]])
    E = expm(0.7 * M)
    np.testing.assert_allclose(k.Sigma_tilde, E[:2, 2:] @ E[:2, :2].T, rtol=1e-9)


def test_evidence_single_edge():
    eps, y, x0 = 0.05, 1.3, 0.2
    t = build_tree([(0, 1, D)], [x0], {1: [y]})
    kern = {1: LinearKernelSpec([[1.0]], [0.0], [[1.0]])}
    J = loss_lower_bound(t, kern, ObservationModel.isotropic(eps, 1))
    assert -J == pytest.approx(norm(x0, np.sqrt(1 + eps)).logpdf(y), rel=1e-13)


def test_evidence_is_additive_over_independent_leaves():
    obs = ObservationModel.isotropic(0.3, 1)
    k1 = LinearKernelSpec([[0.7]], [0.1], [[0.5]])
    k2 = LinearKernelSpec([[1.2]], [-0.3], [[0.2]])
    both = build_tree([(0, 1, D), (0, 2, D)], [0.4], {1: [1.0], 2: [-0.5]})
    J = loss_lower_bound(both, {1: k1, 2: k2}, obs)
    J1 = loss_lower_bound(build_tree([(0, 1, D)], [0.4], {1: [1.0]}), {1: k1}, obs)
    J2 = loss_lower_bound(build_tree([(0, 1, D)], [0.4], {1: [-0.5]}), {1: k2}, obs)
    assert J == pytest.approx(J1 + J2, rel=1e-13)


def test_evidence_matches_importance_sampling():
    rng = np.random.default_rng(0)
    t = balanced_tree(2, 2, D, np.array([0.2]))
    y = {3: [0.5], 4: [0.9], 5: [-0.4], 6: [-0.1]}
    t = t.with_observations(y)
    kern = LinearKernelSpec([[0.8]], [0.05], [[0.6]])
    obs = ObservationModel.isotropic(0.5, 1)
    logZ = -loss_lower_bound(t, exact_kernels(t, kern), obs)
    n = 10 ** 6
    X = {0: np.full(n, 0.2)}
    for v in t.pre_order()[1:]:
        X[v] = 0.8 * X[t.parent[v]] + 0.05 + np.sqrt(0.6) * rng.standard_normal(n)
    logw = sum(norm(X[l], np.sqrt(0.5)).logpdf(y[l][0]) for l in t.leaves)
    est = logsumexp(logw) - np.log(n)
    w = np.exp(logw - logw.max())
    se = np.std(w) / np.sqrt(n) / np.mean(w)        # delta method on log of the mean
    assert abs(est - logZ) < 3 * se


def test_marginals_without_information_are_prior():
    t = balanced_tree(2, 2, D, np.array([1.0, -1.0]))
    t = t.with_observations({l: np.full(2, 50.0) for l in t.leaves})
    kern = LinearKernelSpec(np.array([[0.9, 0.1], [0.0, 0.8]]), [0.1, 0.0], np.diag([0.3, 0.4]))
    post = exact_marginals(t, exact_kernels(t, kern), ObservationModel.isotropic(1e14, 2))
    m, C = t.root_value, np.zeros((2, 2))
    for v in (1, 3):
        m = kern.B @ m + kern.beta
        C = kern.B @ C @ kern.B.T + kern.Sigma_tilde
        np.testing.assert_allclose(post.marginal[v].mean, m, atol=1e-9)
        np.testing.assert_allclose(post.marginal[v].cov, C, atol=1e-9)


def test_marginals_chain_of_two():
    y = 1.2
    t = build_tree([(0, 1, D), (1, 2, D)], [0.0], {2: [y]})
    unit = LinearKernelSpec([[1.0]], [0.0], [[1.0]])
    post = exact_marginals(t, {1: unit, 2: unit}, ObservationModel.isotropic(1.0, 1))
    assert post.marginal[1].mean[0] == pytest.approx(y / 3, rel=1e-13)
    assert post.marginal[1].cov[0, 0] == pytest.approx(2 / 3, rel=1e-13)
    assert post.marginal[2].mean[0] == pytest.approx(2 * y / 3, rel=1e-13)
    assert post.marginal[2].cov[0, 0] == pytest.approx(2 / 3, rel=1e-13)


def test_symmetric_tree_zero_means():
    t = balanced_tree(3, 2, D, np.zeros(2))
    t = t.with_observations({l: np.zeros(2) for l in t.leaves})
    post = exact_marginals(t, exact_kernels(t, LinearKernelSpec(0.8 * np.eye(2), np.zeros(2), 0.3 * np.eye(2))),
                           ObservationModel.isotropic(0.1, 2))
    for v in range(t.size):
        np.testing.assert_allclose(post.marginal[v].mean, 0.0, atol=1e-15)


def test_sampling_exact_transitions_reproduces_marginals(linear22):
    tree, kernel, obs = linear22
    post = exact_marginals(tree, exact_kernels(tree, kernel), obs)
    rng = np.random.default_rng(5)
    n = 10 ** 5
    X = {0: np.broadcast_to(tree.root_value, (n, 2))}
    for v in tree.pre_order()[1:]:
        A, a, S = post.transition[v]
        X[v] = X[tree.parent[v]] @ A.T + a + rng.standard_normal((n, 2)) @ np.linalg.cholesky(S).T
    for v in tree.nonroot:
        m = post.marginal[v]
        se = np.sqrt(np.diag(m.cov) / n)
        assert np.all(np.abs(X[v].mean(0) - m.mean) < 3 * se)
        np.testing.assert_allclose(np.var(X[v], axis=0), np.diag(m.cov), rtol=0.05)


def test_evidence_invariant_to_child_order():
    rng = np.random.default_rng(2)
    y = {"a": rng.standard_normal(2), "b": rng.standard_normal(2), "c": rng.standard_normal(2)}
    kern = LinearKernelSpec(np.array([[0.7, 0.2], [-0.1, 0.9]]), [0.1, 0.2], [[0.5, 0.1], [0.1, 0.4]])
    obs = ObservationModel.isotropic(0.2, 2)
    J = []
    for order in (("a", "b", "c"), ("c", "a", "b"), ("b", "c", "a")):
        t = build_tree([("r", k, D) for k in order], np.zeros(2), y)
        J.append(loss_lower_bound(t, exact_kernels(t, kern), obs))
    assert max(J) - min(J) < 1e-10


def test_ou_discretized_smoother_equals_continuous_messages():
    sde = ou_sde(**PAPER_OU)
    t = random_tree(15, 0.5, 3, dim=2, num_steps=50)
    rng = np.random.default_rng(1)
    t = t.with_observations({l: rng.standard_normal(2) for l in t.leaves})
    obs = ObservationModel.isotropic(1e-2, 2)
    cont = backward_sweep(t, sde.linear, obs)
    disc = exact_backward_with_evidence(t, exact_kernels(t, sde), obs)
    for v in range(t.size):
        scale = np.abs(disc.vertex_msg[v].H).max()
        np.testing.assert_allclose(cont.vertex_msg[v].H, disc.vertex_msg[v].H, rtol=1e-6, atol=1e-6 * scale)
        np.testing.assert_allclose(cont.vertex_msg[v].eta, disc.vertex_msg[v].eta, rtol=1e-6,
                                   atol=1e-6 * np.abs(disc.vertex_msg[v].eta).max())


def test_nonlinear_model_rejected():
    from treeguide.models import double_well_sde
    t = build_tree([(0, 1, EdgeDynamics.continuous(1.0, 10))], [0.0], {1: [1.0]})
    with pytest.raises(TypeError):
        exact_kernels(t, double_well_sde(3.0, 0.5))


def test_dump_marginals_format(linear22):
    tree, kernel, obs = linear22
    text = dump_marginals(exact_marginals(tree, exact_kernels(tree, kernel), obs))
    lines = text.strip().split("\n")
    assert lines[0] == "vertex,mean_0,mean_1,cov_0_0,cov_0_1,cov_1_1"
    assert len(lines) == 1 + tree.size
    # 17 significant digits round-trip exactly
    post = exact_marginals(tree, exact_kernels(tree, kernel), obs)
    assert float(lines[2].split(",")[1]) == post.marginal[1].mean[0]
