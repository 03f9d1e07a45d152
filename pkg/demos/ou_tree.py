"""OU process on a random irregular tree with a Brownian auxiliary.

The raw guided proposal is biased because the auxiliary drops the drift;
the learned residual should pull the samples back towards the exact
smoothing marginals.

    python demos/ou_tree.py [iterations]
"""
import sys

import numpy as np

from treeguide import build_experiment, default_config

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = default_config("ou_tree", params={"budget": 10},
                     train={"iterations": iterations, "mc_samples": 10, "window": 50})
exp = build_experiment(cfg)
post = exp.exact_posterior()
vt = exp.variational

result = vt.train(exp.train_config())
raw, _ = vt.sample(vt.init_params(cfg.seed), 1, 300, use_residual=False)
trained, _ = vt.sample(result.params, 1, 300)


def worst_mean_error(states):
    return max(np.linalg.norm(states[:, v].mean(0) - post.marginal[v].mean) for v in exp.tree.pre_order()[1:])


print(f"{exp.tree.size} vertices, J* = {exp.lower_bound():.3f}, trained J = {result.final_average(50):.3f}")
print(f"worst vertex mean error: raw {worst_mean_error(raw):.3f}, trained {worst_mean_error(trained):.3f}")
