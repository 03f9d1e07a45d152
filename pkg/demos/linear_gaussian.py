"""Linear-Gaussian tree: train briefly and compare the loss to its exact floor.

    python demos/linear_gaussian.py [iterations]
"""
import sys

from treeguide import build_experiment, default_config

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = default_config("linear_gaussian", params={"dim": 2, "depth": 3, "branch": 2},
                     train={"iterations": iterations, "mc_samples": 20, "window": 50})
exp = build_experiment(cfg)
print(f"tree with {exp.tree.size} vertices, dimension {exp.tree.dim}")

# The optimum of the variational loss is minus the log evidence.
J_star = exp.lower_bound()
result = exp.variational.train(exp.train_config())
J_bar = result.final_average(cfg.train.window)
print(f"exact floor J* = {J_star:.4f}")
print(f"trained J      = {J_bar:.4f}  (relative gap {(J_bar - J_star) / abs(J_star):.3%})")

post = exp.exact_posterior()
states, _ = exp.variational.sample(result.params, cfg.seed, 2000)
for v in exp.tree.pre_order()[1:4]:
    print(f"vertex {v}: sample mean {states[:, v].mean(0).round(3)}, exact {post.marginal[v].mean.round(3)}")
