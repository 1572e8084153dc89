"""
Three-stage training and the ablation table
===========================================

A minutes-scale run of base -> encoder pretraining -> joint fine-tuning, plus
the w/o MRA variant, scored on a held-out set.  The numbers are only a smoke
signal at this size; the acceptance suite uses longer runs.
"""

# %%
import tempfile
from pathlib import Path

from mmtryon.datagen import build_dataset
from mmtryon.evaluate import ablation_report, ablation_table
from mmtryon.training import ModelConfig, TrainConfig, TryonTensors, train_stage

root = Path(tempfile.mkdtemp(prefix="mmtryon_nb03_"))
build_dataset(64, seed=1, out_dir=root / "train")
build_dataset(16, seed=2, out_dir=root / "heldout")
model = ModelConfig(image_size=32, base_channels=8, channel_mult=(1, 2), attn_levels=(16,), heads=2,
                    context_dim=32, n_queries=2)
data = TryonTensors.from_dir(root / "train", 32)


def run(name, **kw):
    cfg = TrainConfig(batch_size=8, lr=1e-3, steps=60, checkpoint_every=0, model=model,
                      out_dir=str(root / name), **kw)
    result = train_stage(cfg, data)
    print(f"{name:>8}: l_dm {result.log[0]['l_dm']:.3f} -> {result.log[-1]['l_dm']:.3f}")
    return result.checkpoint


# %%
base = run("base", stage="base")
enc = run("encoder", stage="encoder", init_checkpoint=str(base))
full = run("full", stage="joint", init_checkpoint=str(enc))
no_mra = run("no_mra", stage="joint", init_checkpoint=str(base), no_multi_ref_attention=True)

# %%
result = ablation_report({"full": full, "w/o MRA": no_mra}, root / "heldout", out_dir=root / "ablation", steps=20)
print(ablation_table(result))
