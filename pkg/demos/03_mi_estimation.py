"""Neural estimates of I(Y;T), first on data with a known answer, then under attack."""

import math

import torch

from advlatent.evalcli import dataset_for, resplit, select_eval_set, trained_model
from advlatent.evalcli.experiments import MNIST_CNN, train_spec
from advlatent.mi_estimators import BOUND_DIRECTION, KINDS, Schedule, estimate, mi_under_attack

torch.set_num_threads(1)
schedule = Schedule(steps=500)

# Correlated Gaussians: I = -0.5 log(1 - rho^2).
rho = 0.8
z = torch.randn(4000, 2, generator=torch.Generator().manual_seed(0))
a, b = z[:, :1], rho * z[:, :1] + math.sqrt(1 - rho**2) * z[:, 1:]
print(f"Gaussian pair, exact {-0.5 * math.log(1 - rho**2):.3f} nats")
for kind in KINDS:
    print(f"  {kind:5s} ({BOUND_DIRECTION[kind]}) {estimate(kind, a, b, seeds=(0,), schedule=schedule).value:.3f}")

# Latents of an MNIST split under PGD: the attacked input drags the latent
# away from its class, so the estimated I(Y;T) falls with eps.
base, _ = trained_model(train_spec(MNIST_CNN))
split = resplit(base, 2)
ev = select_eval_set(split, dataset_for("mnist", base.input_shape), n=1000, seed=0)
rows = mi_under_attack(split, ev.x, ev.labels, [0.02, 0.06, 0.10], kinds=("CLUB",), seeds=(0,), schedule=schedule)
for r in rows:
    print(f"eps {r['eps']:.2f}: I(Y;T) input attack {r['input_value']:.3f}, latent attack {r['latent_value']:.3f}, acc {r['input_acc']:.2f} / {r['latent_acc']:.2f}")
