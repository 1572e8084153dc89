"""
Multi-reference attention
=========================

Queries come from the target feature map; keys and values from the target
concatenated with every reference map.
"""

# %%
import itertools

import torch

from mmtryon.attention import AttentionParams, multi_reference_attention, self_attention

torch.manual_seed(0)
torch.set_grad_enabled(False)
p = AttentionParams(16, heads=4).double()
target = torch.randn(1, 9, 16, dtype=torch.float64)
refs = [torch.randn(1, n, 16, dtype=torch.float64) for n in (4, 6, 3)]

# %%
# With no references the operator is ordinary self-attention.
print("zero refs:", float((multi_reference_attention(target, [], p) - self_attention(target, p)).abs().max()))

# %%
# The key set is a concatenation, so reference order does not matter.
base = multi_reference_attention(target, refs, p)
worst = max(float((multi_reference_attention(target, list(o), p) - base).abs().max())
            for o in itertools.permutations(refs))
print("max change over orderings:", worst)

# %%
# A masked reference slot behaves as if the reference were absent.
masked = multi_reference_attention(target, refs, p, ref_mask=torch.tensor([[True, False, True]]))
print("masked == dropped:", torch.allclose(masked, multi_reference_attention(target, [refs[0], refs[2]], p)))
