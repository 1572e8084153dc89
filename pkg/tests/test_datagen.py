import json

import numpy as np
import pytest

from mmtryon.datagen.backends import (BackendRequest, ProceduralDetector, ProceduralInpainter,
                                      ProceduralSegmenter, caption_scene, parse_caption, png_array,
                                      procedural_backends, VARIATIONS)
from mmtryon.datagen.pipeline import (DatagenConfig, GarmentRef, build_dataset, garment_histogram,
                                      generate_sample, histogram_l1, leakage_filter, load_dataset, ncc,
                                      read_manifest, sample_scene, synthesize_reference, verify_dataset)
from mmtryon.datagen.render import (Body, Garment, ProceduralScene, Texture, rasterize, render_scene)
from mmtryon.errors import BackendError, InvalidArgument
from mmtryon.instruction import build_prompt, derive_query_span, parse_instruction

from oracles import iou, rasterize_oracle, visible_masks_oracle

RED_STRIPES = Texture("stripes", "red", "white")
BLUE = Texture("solid", "blue", "white")


def scene(*garments, archetype=0, shift=0, size=64):
    return ProceduralScene(Body(archetype, shift), tuple(garments), size)


def test_render_is_deterministic():
    s = scene(Garment("top", "tucked in", RED_STRIPES), Garment("pants", None, BLUE))
    a, b = render_scene(s, seed=3), render_scene(s, seed=3)
    assert np.array_equal(a.image, b.image) and all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))


def test_tucked_out_top_is_larger():
    inn = render_scene(scene(Garment("top", "tucked in", RED_STRIPES))).masks[0].sum()
    out = render_scene(scene(Garment("top", "tucked out", RED_STRIPES))).masks[0].sum()
    assert out > inn


def test_tucked_in_top_goes_under_pants():
    r = render_scene(scene(Garment("top", "tucked in", RED_STRIPES), Garment("pants", None, BLUE)))
    r_out = render_scene(scene(Garment("top", "tucked out", RED_STRIPES), Garment("pants", None, BLUE)))
    assert r.masks[1].sum() > r_out.masks[1].sum()
    assert not (r.masks[0] & r.masks[1]).any()


def test_unzipped_shows_body_down_the_middle():
    r = render_scene(scene(Garment("top", "unzipped", RED_STRIPES)))
    col = r.masks[0][:, 32]
    assert not col[20:30].any()
    assert r.masks[0][20:30, 28].all() and r.masks[0][20:30, 34].all()


def test_zero_garments_is_body_only():
    r = render_scene(scene())
    assert r.masks == [] and r.boxes == []
    assert (r.labels == 1).sum() > 0


@pytest.mark.parametrize("archetype,shift,size", [(0, 0, 64), (1, -3, 64), (2, 2, 32)])
def test_rasterizer_matches_exact_oracle(archetype, shift, size):
    rng = np.random.default_rng(archetype)
    s = sample_scene(rng, DatagenConfig(size=size, p_shoes=1.0, p_hat=1.0))
    s = ProceduralScene(Body(archetype, shift), s.garments, size)
    r = render_scene(s)
    for got, want in zip(r.masks, visible_masks_oracle(s)):
        assert iou(got, want) == 1.0


def test_rasterize_unit_square():
    m = rasterize(np.array([(1, 1), (3, 1), (3, 3), (1, 3)]), 5)
    assert m.sum() == 4 and m[1:3, 1:3].all()
    tri = [(0, 0), (7, 0), (0, 7)]
    assert np.array_equal(rasterize(np.array(tri), 8), rasterize_oracle(tri, 8))


def test_caption_examples():
    s = scene(Garment("top", "tucked in", RED_STRIPES), Garment("pants", None, BLUE))
    req = BackendRequest(scene=s)
    resp = procedural_backends().captioner(req)
    assert resp.text == "a person wearing a red striped top, tucked in, and blue pants"
    assert [(x.category, x.style) for x in resp.subjects] == [("top", "tucked in"), ("pants", None)]
    assert caption_scene(scene()) == "a person"
    assert parse_caption("a person") == []
    with pytest.raises(BackendError):
        procedural_backends().captioner(BackendRequest())


def test_caption_round_trips_through_prompt():
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = sample_scene(rng, DatagenConfig(p_shoes=0.5, p_hat=0.5))
        truth = [(g.category, g.style) for g in s.garments]
        subjects = parse_caption(caption_scene(s))
        assert [(x.category, x.style) for x in subjects] == truth
        p = build_prompt(subjects)
        parsed = parse_instruction(p.rendered)
        assert [(x.category, x.style) for x in parsed.subjects] == truth
        for i, (cat, style) in enumerate(truth):
            span = derive_query_span(p, i)
            assert span.split(",")[0].split()[-1] == cat
            assert (span.split(", ", 1)[1] if "," in span else None) == style


def test_detector_and_segmenter():
    s = scene(Garment("top", None, RED_STRIPES), Garment("pants", None, BLUE))
    r = render_scene(s)
    boxes = ProceduralDetector()(BackendRequest(scene=s, query="blue pants")).boxes
    assert boxes == [r.boxes[1]]
    mask = png_array(ProceduralSegmenter()(BackendRequest(scene=s, box=r.boxes[1])).mask) > 127
    assert np.array_equal(mask, r.masks[1])
    with pytest.raises(BackendError):
        ProceduralSegmenter()(BackendRequest(scene=s, box=[0, 0, 1, 1]))


def _garment(seed=0, index=0, archetype=1):
    s = ProceduralScene(Body(archetype, 1), (Garment("top", "tucked out", RED_STRIPES),
                                              Garment("pants", "rolled up", BLUE)))
    r = render_scene(s)
    return GarmentRef("top" if index == 0 else "pants", r.masks[index], r.image, s, index), r


@pytest.mark.parametrize("index", [0, 1])
def test_synthesize_reference_contract(index):
    g, r = _garment(index=index)
    cands = synthesize_reference(g, 3, seed=11)
    assert len(cands) == 3
    poses = [c[3] for c in cands]
    assert len(set(poses)) == 3 and g.scene.body.pose_id not in poses
    src_hist = garment_histogram(r.image, r.masks[index])
    for img, mask, sc, pose in cands:
        assert sc.garments[index] == g.scene.garments[index]
        assert histogram_l1(garment_histogram(img, mask), src_hist) <= 0.02
    again = synthesize_reference(g, 3, seed=11)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(cands, again))


def test_synthesize_reference_excludes_poses_and_rejects_empty_mask():
    g, _ = _garment()
    banned = {"0:-1", "0:-2", "0:-3"}
    assert not banned & {c[3] for c in synthesize_reference(g, 4, seed=2, exclude_poses=banned)}
    g.mask = np.zeros_like(g.mask)
    with pytest.raises(InvalidArgument):
        synthesize_reference(g, 3, seed=0)
    assert len(VARIATIONS) == 7


def test_inpainter_is_deterministic():
    g, _ = _garment()
    a = ProceduralInpainter().candidates(g.scene, 0, 3, seed=5)
    b = ProceduralInpainter().candidates(g.scene, 0, 3, seed=5)
    assert a == b


def test_leakage_filter_examples():
    g, r = _garment()
    cands = [c[0] for c in synthesize_reference(g, 3, seed=1)]
    res = leakage_filter(r.image, [r.image.copy()] + cands)
    assert 0 not in res.kept and res.scores[0] == pytest.approx(1.0)
    assert res.kept == [1, 2, 3]
    assert leakage_filter(r.image, [r.image.copy()], 1.0).kept == [0]
    none = leakage_filter(r.image, [r.image.copy()])
    assert none.kept == [] and none.skip_reason
    with pytest.raises(InvalidArgument):
        leakage_filter(r.image, cands, 0.0)


def test_ncc_distribution_over_procedural_pairs():
    """Different pose, same garment: NCC measured over 100 pairs stays clear of 0.95."""
    rng = np.random.default_rng(42)
    scores = []
    for i in range(100):
        s = sample_scene(rng, DatagenConfig())
        r = render_scene(s)
        gi = int(rng.integers(len(s.garments)))
        g = GarmentRef(s.garments[gi].category, r.masks[gi], r.image, s, gi)
        scores += [ncc(r.image, c[0]) for c in synthesize_reference(g, 1, seed=i)]
    assert max(scores) < 0.93
    assert np.mean(scores) < 0.8


def test_ncc_properties():
    a = np.random.default_rng(0).integers(0, 255, (8, 8, 3), dtype=np.uint8)
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 255 - a) == pytest.approx(-1.0)
    assert ncc(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(InvalidArgument):
        ncc(a, a[:4])


def test_histogram_oracle():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 0)
    mask = np.array([[True, True], [False, False]])
    h = garment_histogram(img, mask)
    assert h.sum() == pytest.approx(1.0)
    assert h[15 * 256] == 0.5 and h[0] == 0.5


def test_generate_sample_invariants():
    cfg = DatagenConfig(size=32)
    kinds = set()
    for i in range(12):
        sample, rec = generate_sample(i, 3, cfg)
        assert rec["skip_reason"] is None
        kinds.add(sample.kind)
        assert len(sample.subjects) == len(sample.refs) == len(sample.masks) == len(sample.ref_masks)
        assert rec["poses"]["target"] not in [p for ps in rec["poses"]["refs"] for p in ps]
        for a in range(len(sample.masks)):
            assert sample.masks[a].any()
            for b in range(a):
                assert not (sample.masks[a] & sample.masks[b]).any()
        if sample.kind == "single":
            assert len(sample.refs) == 1
    assert kinds == {"multi", "single"}


def test_build_dataset_determinism_and_verification(tmp_path):
    a = build_dataset(30, 9, out_dir=tmp_path / "a", config=DatagenConfig(size=32))
    b = build_dataset(30, 9, out_dir=tmp_path / "b", config=DatagenConfig(size=32))
    ma = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert a == b and len(a) == 30
    assert verify_dataset(tmp_path / "a") == []
    rec = json.loads(ma.splitlines()[0])
    for key in ("id", "caption", "subjects", "files", "seeds", "backends", "skip_reason"):
        assert key in rec
    assert rec["files"]["target"] == f"images/{rec['id']}_target.png"
    samples = load_dataset(tmp_path / "a")
    assert len(samples) == 30
    for s, r in zip(samples, read_manifest(tmp_path / "a")):
        assert s.instruction.rendered == r["instruction"]


def test_stored_masks_match_rasterization_oracle(tmp_path):
    build_dataset(6, 1, out_dir=tmp_path / "d", config=DatagenConfig(size=32))
    from mmtryon.datagen.render import ProceduralScene as PS
    for s, rec in zip(load_dataset(tmp_path / "d"), read_manifest(tmp_path / "d")):
        oracle = visible_masks_oracle(PS.from_dict(rec["scenes"]["target"]))
        for m, gi in zip(s.masks, rec["garment_indices"]):
            assert iou(m, oracle[gi]) == 1.0


def test_parallel_build_matches_serial(tmp_path):
    cfg = DatagenConfig(size=32, workers=2)
    build_dataset(10, 4, out_dir=tmp_path / "p", config=cfg)
    build_dataset(10, 4, out_dir=tmp_path / "s", config=DatagenConfig(size=32))
    assert (tmp_path / "p" / "manifest.jsonl").read_bytes() == (tmp_path / "s" / "manifest.jsonl").read_bytes()


def test_empty_dataset(tmp_path):
    assert build_dataset(0, 1, out_dir=tmp_path / "e") == []
    assert (tmp_path / "e" / "manifest.jsonl").read_text() == ""
    assert load_dataset(tmp_path / "e") == [] and verify_dataset(tmp_path / "e") == []


def test_bad_output_paths_leave_nothing(tmp_path):
    with pytest.raises(InvalidArgument):
        build_dataset(2, 1, out_dir=tmp_path / "missing" / "x")
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "notes.txt").write_text("keep")
    with pytest.raises(InvalidArgument):
        build_dataset(2, 1, out_dir=tmp_path / "busy")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["busy"]
    with pytest.raises(InvalidArgument):
        build_dataset(-1, 1, out_dir=tmp_path / "neg")


def test_failure_midway_cleans_up(tmp_path):
    backends = procedural_backends()

    class Broken:
        backend_id = "broken"
        calls = 0

        def __call__(self, req):
            Broken.calls += 1
            if Broken.calls > 3:
                raise OSError("disk went away")
            return procedural_backends().captioner(req)

    backends.captioner = Broken()
    with pytest.raises(OSError):
        build_dataset(6, 1, backends, out_dir=tmp_path / "out")
    assert list(tmp_path.iterdir()) == []


def test_verify_detects_tampering(tmp_path):
    build_dataset(3, 2, out_dir=tmp_path / "d", config=DatagenConfig(size=32))
    rec = read_manifest(tmp_path / "d")[0]
    path = tmp_path / "d" / rec["files"]["masks"][0]
    from PIL import Image
    Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(path)
    problems = verify_dataset(tmp_path / "d")
    assert any("digest" in p for p in problems) and any("empty" in p for p in problems)
