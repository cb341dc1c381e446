"""
Where the image enters, and what padding does
=============================================

Builds one model per variant at the canonical sizes, prints how the sentence
length shrinks through the stack, and shows that windows made only of padding
produce exact zeros.
"""
import numpy as np

from mcnn.data import PAD, Vocabulary
from mcnn.model import VARIANTS, ArchitectureConfig, build_model, forward_joint, shape_plan

# the length plan is shared; only the width of one filter bank changes
for v in VARIANTS:
    plan = shape_plan(ArchitectureConfig(v))
    lengths = [n for _, n, _ in plan.layers]
    print(f"{v:>3}: lengths {lengths}  filters {plan.conv_filter_shapes}  joint {plan.jr_length}")

# a five-word sentence padded to 30 slots
vocab = Vocabulary("a dog runs on grass".split())
cfg = ArchitectureConfig.toy("wd", feature_dim=16)
model = build_model(cfg, vocab, seed=0)
for p in model.params:
    if p.name.endswith(".b"):
        p.value[...] = 1.0  # a large bias would leak into padding without the gate

sentence = np.full((1, cfg.max_len), PAD)
sentence[0, :5] = [vocab.index(w) for w in "a dog runs on grass".split()]
trace = []
forward_joint(model, np.ones((1, 16)), sentence, trace=trace)
conv1 = trace[1]
print("conv1 live windows:", int(conv1.live.sum()), "of", conv1.positions)
print("largest output over padding-only windows:", np.abs(conv1.values[0, ~conv1.live[0]]).max())
