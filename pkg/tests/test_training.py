import json

import pytest
import torch

from mmtryon import training
from mmtryon.checkpoint import load_checkpoint, save_checkpoint
from mmtryon.datagen.pipeline import DatagenConfig, build_dataset
from mmtryon.errors import CheckpointFormatError, ConfigurationError, NumericalFailure
from mmtryon.garment_encoder import parameter_hash
from mmtryon.training import (TrainConfig, TryonModel, config_hash, draw_indices, load_model, make_archive,
                              TryonTensors, model_from_archive, read_log, smoothed, train_stage)

from conftest import tiny_model_config, tiny_train_config


def strip(log):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in log]


@pytest.fixture(scope="module")
def base_ckpt(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    res = train_stage(tiny_train_config("base", steps=30, out_dir=str(out)), tiny_data)
    return res.checkpoint


def test_config_round_trip_and_validation():
    cfg = tiny_train_config("encoder", no_text_query_loss=True)
    assert cfg.stage == "encoder_pretrain"
    d = json.loads(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_dict(d)
    assert back.to_dict() == cfg.to_dict() and config_hash(back.to_dict()) == config_hash(cfg.to_dict())
    assert back.ablations() == ["no_text_query_loss"]
    with pytest.raises(ConfigurationError):
        TrainConfig(stage="finetune")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"stage": "base", "learning_rate": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig(multi_fraction=1.5)


def test_missing_prerequisites(tiny_data):
    with pytest.raises(ConfigurationError, match="base checkpoint"):
        train_stage(tiny_train_config("encoder_pretrain"), tiny_data)
    with pytest.raises(ConfigurationError):
        train_stage(tiny_train_config("joint"), tiny_data)
    with pytest.raises(ConfigurationError):
        train_stage(tiny_train_config("base", dataset="/nonexistent/ds"))
    with pytest.raises(ConfigurationError):
        train_stage(tiny_train_config("joint", no_pretrain=True, init_checkpoint="x.ckpt"), tiny_data)


def test_base_stage_outputs(base_ckpt):
    out = base_ckpt.parent
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["stage"] == "base"
    log = read_log(out / "metrics.jsonl")
    assert [r["step"] for r in log] == list(range(30))
    assert set(log[0]) == {"step", "l_dm", "l_query", "l_enc", "lr", "seconds"}
    assert all(r["l_query"] == 0 and r["l_enc"] == r["l_dm"] for r in log)
    assert not (out / "last_good.ckpt").exists()
    arch = load_checkpoint(base_ckpt)
    assert arch.meta["stage"] == "base" and arch.meta["step"] == 30
    assert arch.meta["config_hash"] == config_hash(arch.meta["config"])


def test_checkpoint_round_trip_of_trained_model(base_ckpt, tmp_path):
    arch = load_checkpoint(base_ckpt)
    model = model_from_archive(arch)
    again = load_checkpoint(save_checkpoint(tmp_path / "again.ckpt",
                                            make_archive(model, TrainConfig.from_dict(arch.meta["config"]),
                                                         "base", 30)))
    for k, v in model.state_dict().items():
        assert torch.equal(again.tensors[f"model/{k}"], v)
    raw = base_ckpt.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointFormatError):
        load_model(tmp_path / "cut.ckpt")


def test_every_parameter_named_once(base_ckpt):
    arch = load_checkpoint(base_ckpt)
    names = [k for k in arch.tensors if k.startswith("model/")]
    assert len(names) == len(set(names)) == len(TryonModel(tiny_model_config()).state_dict())


def test_encoder_stage_freezes_denoiser(base_ckpt, tiny_data):
    hashes = []
    cfg = tiny_train_config("encoder_pretrain", steps=5, init_checkpoint=str(base_ckpt))
    res = train_stage(cfg, tiny_data, callback=lambda s, r, m: hashes.append(parameter_hash(m.denoiser)))
    base = model_from_archive(load_checkpoint(base_ckpt))
    assert set(hashes) == {parameter_hash(base.denoiser)}
    assert parameter_hash(res.model.garment_encoder) != parameter_hash(base.garment_encoder)
    assert all(r["l_enc"] - (r["l_dm"] + r["l_query"]) == 0 for r in res.log)
    assert all(r["l_query"] > 0 for r in res.log)


def test_no_text_query_loss_logs_zero(base_ckpt, tiny_data):
    cfg = tiny_train_config("encoder_pretrain", steps=4, init_checkpoint=str(base_ckpt), no_text_query_loss=True)
    log = train_stage(cfg, tiny_data).log
    assert all(r["l_query"] == 0 and r["l_enc"] == r["l_dm"] for r in log)


def test_joint_no_mra_routes_refs_through_instruction_only(base_ckpt, tiny_data):
    seen = []
    orig = training.TryonModel.condition

    def spy(self, *a, **kw):
        cond = orig(self, *a, **kw)
        seen.append(cond)
        return cond

    training.TryonModel.condition = spy
    try:
        cfg = tiny_train_config("joint", steps=3, init_checkpoint=str(base_ckpt), no_multi_ref_attention=True)
        res = train_stage(cfg, tiny_data)
    finally:
        training.TryonModel.condition = orig
    assert set(res.model.denoiser.block_types().values()) == {"self"}
    assert seen and all(c.garment_features is None for c in seen)
    text_len = [len([i for i in res.model.instruction.tokenizer.tokenize(p.rendered) if i != 0])
                for p in tiny_data.prompts]
    assert max(c.instruction.shape[1] for c in seen) > min(text_len)
    assert all(r["l_query"] == 0 for r in res.log)


def test_ablation_variants_structurally(base_ckpt, tiny_data, tmp_path):
    enc = train_stage(tiny_train_config("encoder_pretrain", steps=2, init_checkpoint=str(base_ckpt),
                                        out_dir=str(tmp_path / "enc")), tiny_data).checkpoint
    full = train_stage(tiny_train_config("joint", steps=2, init_checkpoint=str(enc)), tiny_data)
    no_pr = train_stage(tiny_train_config("joint", steps=2, no_pretrain=True), tiny_data)
    no_mra = train_stage(tiny_train_config("joint", steps=2, init_checkpoint=str(base_ckpt),
                                           no_multi_ref_attention=True), tiny_data)
    assert set(full.model.denoiser.block_types().values()) == {"multi_reference"}
    assert set(no_pr.model.denoiser.block_types().values()) == {"multi_reference"}
    assert set(no_mra.model.denoiser.block_types().values()) == {"self"}
    assert all(r["l_query"] > 0 for r in full.log)
    assert no_pr.archive.meta["config"]["no_pretrain"] and no_pr.archive.meta["config"]["init_checkpoint"] is None
    no_tql = train_stage(tiny_train_config("joint", steps=2, init_checkpoint=str(enc), no_text_query_loss=True),
                         tiny_data)
    assert all(r["l_query"] == 0 for r in no_tql.log)


def test_resume_matches_unbroken_run(tiny_data, tmp_path):
    full = train_stage(tiny_train_config("base", steps=12, deterministic=True, out_dir=str(tmp_path / "a")),
                       tiny_data)
    part = train_stage(tiny_train_config("base", steps=6, deterministic=True, out_dir=str(tmp_path / "b")),
                       tiny_data)
    resumed = train_stage(tiny_train_config("base", steps=12, deterministic=True, resume=str(part.checkpoint),
                                            out_dir=str(tmp_path / "b")), tiny_data)
    assert strip(read_log(tmp_path / "b" / "metrics.jsonl")) == strip(full.log)
    assert strip(part.log + resumed.log) == strip(full.log)
    for k, v in full.model.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[k], v)


def test_determinism(tiny_data):
    a = train_stage(tiny_train_config("base", steps=5, deterministic=True), tiny_data)
    b = train_stage(tiny_train_config("base", steps=5, deterministic=True), tiny_data)
    assert strip(a.log) == strip(b.log)


def test_resume_rejects_other_stage(base_ckpt, tiny_data):
    with pytest.raises(ConfigurationError):
        train_stage(tiny_train_config("joint", resume=str(base_ckpt)), tiny_data)


def test_nan_loss_aborts_and_keeps_last_good(tiny_data, tmp_path, monkeypatch):
    real = training.STEP_FNS["base"]
    calls = {"n": 0}

    def flaky(model, batch, cfg, opt, gen):
        calls["n"] += 1
        if calls["n"] == 5:
            return float("nan"), 0.0, float("nan")
        return real(model, batch, cfg, opt, gen)

    monkeypatch.setitem(training.STEP_FNS, "base", flaky)
    out = tmp_path / "run"
    with pytest.raises(NumericalFailure) as info:
        train_stage(tiny_train_config("base", steps=10, checkpoint_every=2, out_dir=str(out)), tiny_data)
    assert info.value.step == 4
    good = load_checkpoint(out / "last_good.ckpt")
    assert good.meta["step"] == 4
    assert not (out / "checkpoint.ckpt").exists()


def test_stage2_sampling_mix(tiny_data):
    gen = torch.Generator().manual_seed(0)
    idx = [i for _ in range(200) for i in draw_indices(tiny_data, "joint", 16, 0.7, gen)]
    multi = sum(tiny_data.kinds[i] == "multi" for i in idx) / len(idx)
    assert 0.65 < multi < 0.75


def test_batch_contents(tiny_data):
    b = tiny_data.batch([0, 1, 2])
    n = b["refs"].shape[1]
    for bi, i in enumerate([0, 1, 2]):
        k = len(tiny_data.refs[i])
        assert b["ref_mask"][bi].sum() == k and not b["ref_mask"][bi, k:].any()
        assert torch.all(b["refs"][bi, k:] == 0)
    assert b["target"].shape == (3, 3, 32, 32) and b["prior_masks"].shape == (3, n, 32, 32)


def test_conv4x_latent_codec(tiny_data):
    mc = tiny_model_config(image_size=32, latent="conv4x", attn_levels=(8,), channel_mult=(1, 2))
    res = train_stage(tiny_train_config("base", steps=2, autoencoder_steps=3, model=mc), tiny_data)
    m = res.model
    assert m.denoiser.config.image_size == 8 and m.denoiser.config.in_channels == 4
    b = tiny_data.batch([0])
    out = m.generate(b["prompts"], b["refs"], b["ref_mask"], b["person"], steps=2)
    assert out.shape == (1, 3, 32, 32) and torch.isfinite(out).all()


def test_smoothed():
    assert smoothed([1.0, 2.0, 3.0], window=5).tolist() == [1.0, 2.0, 3.0]
    assert smoothed([1.0, 3.0, 5.0], window=2).tolist() == [2.0, 4.0]


@pytest.mark.slow
def test_encoder_pretraining_reduces_loss(tmp_path):
    """200 encoder steps on a 64-sample toy set: smoothed L_enc falls by at least 30 %."""
    build_dataset(64, 3, out_dir=tmp_path / "d", config=DatagenConfig(size=32))
    data = TryonTensors.from_dir(tmp_path / "d", 32)
    base = train_stage(tiny_train_config("base", steps=150, out_dir=str(tmp_path / "b")), data)
    res = train_stage(tiny_train_config("encoder_pretrain", steps=200, init_checkpoint=str(base.checkpoint)),
                      data)
    s = smoothed([r["l_enc"] for r in res.log])
    assert s[-1] < 0.7 * s[0]
