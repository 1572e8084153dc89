"""
The procedural try-on dataset
=============================

Render a handful of samples, check the stored masks and look at one
person/reference/target triple.
"""

# %%
# Build a small dataset. Every sample carries the person image, one reference
# per replaced garment and the target with exact per-garment masks.
from pathlib import Path

import torch

from mmtryon.datagen import build_dataset, load_dataset, verify_dataset
from mmtryon.evaluate import contact_sheet
from mmtryon.training import TryonTensors

out = Path("notebook_data")
records = build_dataset(16, seed=0, out_dir=out)
print(len(records), "samples;", sum(r["kind"] == "multi" for r in records), "multi-reference")
print("problems:", verify_dataset(out))

# %%
# Instructions name each garment and put a placeholder where its reference goes.
for s in load_dataset(out)[:4]:
    print(s.kind, "|", s.instruction.rendered)

# %%
# Person, first reference, target and the target's union mask, eight rows.
data = TryonTensors.from_dir(out, 64)
idx = list(range(8))
refs = torch.stack([data.refs[i][0][0][0] for i in idx])
masks = torch.stack([torch.stack(data.masks[i]).amax(0) for i in idx])[:, None].expand(-1, 3, -1, -1)
contact_sheet([data.person[idx], refs, data.target[idx], masks], out / "sheet.png")
print("wrote", out / "sheet.png")
