import numpy as np
import pytest

from treeguide.exact import exact_kernels, loss_lower_bound
from treeguide.filtering import backward_sweep
from treeguide.mcmc import (dump_chain_states, dump_chain_summary, init_chain, mode_occupancy, path_log_weight,
                            pcn_step, run_chain)
from treeguide.models import PAPER_OU, ObservationModel, brownian_aux, double_well_sde, ou_sde
from treeguide.tree import EdgeDynamics, build_tree


def _increments(tree, rng):
    out = {}
    for v in tree.pre_order()[1:]:
        dyn = tree.edge[v]
        out[v] = rng.standard_normal((dyn.num_steps, tree.dim) if dyn.is_continuous else (tree.dim,))
    return out


def test_discrete_exact_aux_weight_is_constant_evidence(linear22):
    tree, kernel, obs = linear22
    filt = backward_sweep(tree, kernel.linear, obs)
    log_z = -loss_lower_bound(tree, exact_kernels(tree, kernel), obs)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert path_log_weight(tree, filt, kernel, obs, _increments(tree, rng)) == pytest.approx(log_z, abs=1e-10)


def test_uninformative_weight_constant():
    lin = brownian_aux(np.eye(1))
    tree = build_tree([(0, 1, EdgeDynamics.continuous(1.0, 20))], [0.0], {1: [0.3]})
    obs = ObservationModel.isotropic(1e14, 1)
    filt = backward_sweep(tree, lin, obs)
    rng = np.random.default_rng(1)
    w = [path_log_weight(tree, filt, lin.as_sde(), obs, _increments(tree, rng)) for _ in range(10)]
    assert np.ptp(w) < 1e-10


def test_rho_zero_keeps_increments(linear22):
    tree, kernel, obs = linear22
    filt = backward_sweep(tree, kernel.linear, obs)
    rng = np.random.default_rng(2)
    st = init_chain(tree, filt, kernel, obs, rng)
    new = pcn_step(st, 0.0, tree, filt, kernel, obs, rng)
    assert new.accepted_count == 1 and new.proposed_count == 1
    for v in st.increments:
        np.testing.assert_array_equal(new.increments[v], st.increments[v])


def test_rho_one_is_independence_proposal(linear22):
    tree, kernel, obs = linear22
    filt = backward_sweep(tree, kernel.linear, obs)
    st = init_chain(tree, filt, kernel, obs, 3)
    rng = np.random.default_rng(4)
    twin = np.random.default_rng(4)
    fresh = {v: twin.standard_normal(w.shape) for v, w in st.increments.items()}
    new = pcn_step(st, 1.0, tree, filt, kernel, obs, rng)
    assert new.accepted_count == 1          # constant weight under the exact auxiliary
    for v in fresh:
        np.testing.assert_array_equal(new.increments[v], fresh[v])
    with pytest.raises(ValueError):
        pcn_step(st, 1.5, tree, filt, kernel, obs, rng)


def test_exact_aux_continuous_acceptance():
    sde = ou_sde(**PAPER_OU)
    e = EdgeDynamics.continuous(0.5, 200)
    tree = build_tree([(0, 1, e), (1, 2, e), (1, 3, e)], np.zeros(2), {2: [1.0, -2.0], 3: [1.5, -2.5]})
    obs = ObservationModel.isotropic(1e-2, 2)
    filt = backward_sweep(tree, sde.linear, obs)
    res = run_chain(tree, filt, sde, obs, 200, rho=0.1, seed=0)
    assert res.acceptance_rate >= 0.99


def test_brownian_bridge_mid_time_marginal():
    """Misspecified auxiliary (sigma 1.5) corrected by the chain towards the true bridge marginal."""
    y, eps, n = 0.8, 0.1, 50
    tree = build_tree([(0, 1, EdgeDynamics.continuous(1.0, n))], [0.0], {1: [y]})
    obs = ObservationModel.isotropic(eps, 1)
    filt = backward_sweep(tree, brownian_aux(1.5 * np.eye(1)), obs)
    sde = brownian_aux(np.eye(1)).as_sde()
    res = run_chain(tree, filt, sde, obs, 20000, rho=0.5, seed=5, burn_in=1000, keep_paths=True)
    assert 0.0 < res.acceptance_rate < 1.0
    mid = np.array([s.edge_path[1].states[n // 2, 0] for s in res.samples])
    mean = 0.5 * y / (1 + eps)
    var = 0.5 - 0.25 / (1 + eps)
    # batch means account for chain autocorrelation
    batches = mid[: len(mid) // 20 * 20].reshape(20, -1).mean(1)
    se = batches.std(ddof=1) / np.sqrt(20)
    assert abs(mid.mean() - mean) < 3 * se
    assert mid.var() == pytest.approx(var, rel=0.1)


def test_double_well_weights_finite():
    sde = double_well_sde(3.0, 0.5)
    e = EdgeDynamics.continuous(0.5, 50)
    tree = build_tree([(0, 1, e), (0, 2, e), (1, 3, e), (1, 4, e), (2, 5, e), (2, 6, e)], [0.0],
                      {3: [-1.0], 4: [-1.0], 5: [1.0], 6: [1.0]})
    obs = ObservationModel.isotropic(0.05, 1)
    filt = backward_sweep(tree, brownian_aux(0.5 * np.eye(1)), obs)
    res = run_chain(tree, filt, sde, obs, 300, rho=0.1, seed=1, thin=10)
    assert np.all(np.isfinite(res.log_weights))
    assert 0.0 < res.acceptance_rate < 1.0
    assert res.states.shape == (30, 7, 1)
    text = dump_chain_states(res)
    assert text.count("\n") == 1 + 30 * 7
    summary = dump_chain_summary([res, res]).strip().split("\n")
    assert summary[0] == "chain,acceptance_rate,kept_samples" and len(summary) == 3


def test_mode_occupancy():
    assert mode_occupancy(np.array([-1.0, 0.5, 2.0, -0.1])) == 0.5
    assert np.isnan(mode_occupancy(np.array([])))
