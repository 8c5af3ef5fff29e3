"""Mobile, edge and interceptor endpoints talking over localhost TCP.

The mobile half sends LatentFrames to the edge. A man in the middle sits
between them and perturbs each frame with a decision-based attack that
only sees the labels the edge returns. Latents are much larger than
pixels, so the same MSE-style budget buys far less relative distortion;
eps 0.3 here is needed before the attack bites.
"""

import threading

import torch

from advlatent.attacks import AttackConfig
from advlatent.evalcli import dataset_for, resplit, trained_model
from advlatent.evalcli.experiments import MNIST_CNN, train_spec
from advlatent.harness import decode_frame, encode_frame, listen, run_edge_endpoint, run_interceptor, run_mobile_endpoint

torch.set_num_threads(1)
base, _ = trained_model(train_spec(MNIST_CNN))
split = resplit(base, 2)
data = dataset_for("mnist", base.input_shape)
x, y = data.test_x[:20], data.test_y[:20]

frame = encode_frame(split.forward_mobile(x[:1])[0].detach())
print(f"one latent frame: {len(frame)} bytes, header {frame[:7].hex()}")
assert torch.equal(decode_frame(frame), split.forward_mobile(x[:1])[0].detach())


def session(config):
    edge, mitm = listen(), listen()
    threading.Thread(target=run_edge_endpoint, args=(split, edge), kwargs={"decision_only": True}, daemon=True).start()
    stats = {}
    t = threading.Thread(target=lambda: stats.setdefault("s", run_interceptor(mitm, edge.getsockname(), config)), daemon=True)
    t.start()
    result = run_mobile_endpoint(split, x, mitm.getsockname())
    t.join()
    return result, stats["s"]


for config in (None, AttackConfig("TRIANGLE", "l2", 0.3, "latent", query_budget=300, seed=0)):
    result, stats = session(config)
    acc = sum(int(p == int(t)) for p, t in zip(result.predictions, y)) / len(y)
    name = "relay only" if config is None else f"{config.algorithm} eps={config.epsilon}"
    print(f"{name}: end-to-end accuracy {acc:.2f}, frames {stats.frames}, attack successes {stats.successes}")
