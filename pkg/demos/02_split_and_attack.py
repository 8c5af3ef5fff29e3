"""Split an MNIST classifier and attack its input and its latent.

The classifier is trained once and cached under ``~/.cache/advlatent``.
The first run downloads MNIST and trains for a few minutes on a CPU.
"""

import torch

from advlatent.attacks import AttackConfig
from advlatent.evalcli import attack_split, compute_asr, dataset_for, resplit, select_eval_set, trained_model
from advlatent.evalcli.experiments import MNIST_CNN, train_spec

torch.set_num_threads(1)
base, manifest = trained_model(train_spec(MNIST_CNN))
print(f"clean test accuracy {manifest['accuracy']:.4f}")

# Cut after the second convolution: the mobile half emits a 64x14x14 latent.
split = resplit(base, 2)
data = dataset_for("mnist", base.input_shape)
eval_set = select_eval_set(split, data, n=200, seed=0)
with torch.no_grad():
    print("latent shape:", tuple(split.forward_mobile(eval_set.x[:1]).shape))

# The same l_inf budget, applied elementwise, in both spaces.
for eps in (0.02, 0.05, 0.10):
    row = []
    for space in ("input", "latent"):
        config = AttackConfig("PGD", "linf", eps, space, steps=40, seed=0)
        row.append(compute_asr(attack_split(split, config, eval_set)))
    print(f"eps {eps:.2f}: PGD success input {row[0]:.2f}, latent {row[1]:.2f}")

# Black-box attacks only see predictions or scores of the edge half.
for algo, norm in (("SQUARE", "linf"), ("SIGNOPT", "l2")):
    for space in ("input", "latent"):
        config = AttackConfig(algo, norm, 0.05 if norm == "linf" else 0.005, space, query_budget=500, seed=0)
        results = attack_split(split, config, eval_set)
        mean_q = sum(r.queries_used for r in results) / len(results)
        print(f"{algo} {space}: success {compute_asr(results):.2f}, mean queries {mean_q:.0f}")
