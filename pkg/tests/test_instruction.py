import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmtryon.errors import InvalidArgument
from mmtryon.instruction import (MAX_REFS, SPECIAL_TOKENS, GarmentSubject, ImageTokenEncoder,
                                 InstructionEncoder, PerceiverResampler, TextEncoder, build_prompt,
                                 default_tokenizer, derive_query_span, fuse, load_vocab,
                                 parse_instruction, prompt_from_text, resample)

TOK = default_tokenizer()
EXAMPLE = [GarmentSubject("top", "tucked in", 1), GarmentSubject("pants", None, 2),
           GarmentSubject("shoes", None, 3)]


def test_build_prompt_reference_example():
    p = build_prompt(EXAMPLE)
    assert p.rendered == "a person wearing a top, tucked in, [REF#1], pants [REF#2] and shoes [REF#3]"
    assert p.n_placeholders == 3 and p.placeholder_refs == [1, 2, 3]


def test_build_prompt_small_cases():
    assert build_prompt([GarmentSubject("top")]).rendered == "a person wearing a top [REF#1]"
    p = build_prompt([GarmentSubject("hat", "backwards", 1), GarmentSubject("top", None, 2)])
    assert p.rendered == "a person wearing a hat, backwards, [REF#1] and top [REF#2]"


def test_build_prompt_errors():
    with pytest.raises(InvalidArgument):
        build_prompt([GarmentSubject("top", None, 1), GarmentSubject("pants", None, 1)])
    with pytest.raises(InvalidArgument):
        build_prompt([])
    with pytest.raises(InvalidArgument):
        build_prompt([GarmentSubject("top", None, i + 1) for i in range(MAX_REFS + 1)])
    with pytest.raises(InvalidArgument):
        GarmentSubject("")


def test_placeholder_positions_point_at_ref_ids():
    p = build_prompt(EXAMPLE)
    ids = TOK.tokenize(p.rendered)
    for pos, k in zip(p.placeholder_positions, p.placeholder_refs):
        assert ids[pos] == TOK.ref_id(k)
    assert sum(TOK.ref_number(i) is not None for i in ids) == 3


def test_tokenize_empty_and_single_template():
    ids = TOK.tokenize("")
    assert ids[:2] == [TOK.bos_id, TOK.eos_id] and len(ids) == 32
    assert set(ids[2:]) == {TOK.pad_id}
    p = build_prompt([GarmentSubject("top")])
    ids = TOK.tokenize(p.rendered)
    assert ids.count(TOK.ref_id(1)) == 1 and ids.index(TOK.ref_id(1)) == p.placeholder_positions[0]


def test_vocab_layout():
    vocab = load_vocab()
    assert vocab[: len(SPECIAL_TOKENS)] == SPECIAL_TOKENS
    assert len(vocab) == len(set(vocab))
    assert TOK.tokenize("zebra")[1] == TOK.unk_id


WORDS = [w for w in load_vocab() if w not in ("[PAD]", "[BOS]", "[EOS]", "[UNK]")]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=0, max_size=30))
def test_tokenize_detokenize_round_trip(words):
    ids = [TOK.bos_id] + [TOK.index[w.lower()] for w in words] + [TOK.eos_id]
    ids += [TOK.pad_id] * (32 - len(ids))
    assert TOK.tokenize(TOK.detokenize(ids)) == ids


def test_round_trip_covers_whole_vocabulary():
    for start in range(4, len(TOK), 30):
        chunk = list(range(start, min(start + 30, len(TOK))))
        ids = [TOK.bos_id] + chunk + [TOK.eos_id]
        ids += [TOK.pad_id] * (32 - len(ids))
        assert TOK.tokenize(TOK.detokenize(ids)) == ids


def test_text_encoder_shape_determinism_and_order_sensitivity():
    torch.manual_seed(0)
    enc = TextEncoder(len(TOK)).eval()
    ids = torch.tensor(TOK.tokenize("a person wearing a red top"))
    out = enc(ids)
    assert out.shape == (32, 128)
    assert torch.equal(out, enc(ids))
    swapped = torch.tensor(TOK.tokenize("a person wearing a top red"))
    assert (enc(swapped) - out).abs().max() > 0


def test_image_token_encoder():
    torch.manual_seed(0)
    enc = ImageTokenEncoder(64, 8).eval()
    toks = enc(torch.zeros(3, 64, 64))
    assert toks.tokens.shape == (64, 128) and torch.isfinite(toks.tokens).all()
    a = torch.rand(3, 64, 64)
    b = a.clone()
    b[:, :8, :8] = 1 - b[:, :8, :8]
    assert (enc(a).tokens - enc(b).tokens).abs().max() > 0
    with pytest.raises(InvalidArgument):
        enc(torch.zeros(3, 32, 32))


def test_image_tokens_are_penultimate_layer():
    torch.manual_seed(0)
    enc = ImageTokenEncoder(16, 8).eval()
    img = torch.rand(1, 3, 16, 16)
    x = enc.embed(enc.patchify(img)) + enc.pos
    expected = enc.layers[0](x)
    assert torch.allclose(enc(img).tokens, expected, atol=1e-6)


@pytest.mark.parametrize("p", [1, 5, 64])
def test_resampler_shape(p):
    torch.manual_seed(0)
    r = PerceiverResampler(32, 48, 4).eval()
    assert resample(torch.randn(p, 32), r, 4).shape == (4, 48)


def test_resampler_single_token_weights_are_one():
    torch.manual_seed(0)
    r = PerceiverResampler(32, 32, 4).eval()
    out, weights = r(torch.randn(1, 32), return_weights=True)
    assert torch.isfinite(out).all()
    for w in weights:
        assert torch.allclose(w, torch.ones_like(w))


def test_resampler_not_invariant_to_duplicates():
    torch.manual_seed(0)
    r = PerceiverResampler(32, 32, 4).eval()
    toks = torch.randn(5, 32)
    dup = torch.cat([toks, toks[:1]])
    assert (r(toks) - r(dup)).abs().max() > 0
    with pytest.raises(InvalidArgument):
        resample(toks, r, 3)


def test_fuse_length_law_and_locality():
    p = build_prompt(EXAMPLE)
    L = 12
    text = torch.randn(L, 8)
    p.placeholder_positions = [2, 6, 9]
    p.token_spans = [(1, 2), (3, 6), (7, 9)]
    garments = [torch.randn(4, 8) for _ in range(3)]
    out = fuse(p, text, garments)
    assert out.tokens.shape == (12 - 3 + 12, 8)
    keep = [i for i in range(L) if i not in (2, 6, 9)]
    fused_rows = []
    j = 0
    for i in range(L):
        if i in (2, 6, 9):
            j += 4
        else:
            fused_rows.append(j)
            j += 1
    assert torch.equal(out.tokens[fused_rows], text[keep])
    assert torch.equal(out.tokens[2:6], garments[0])
    assert out.span_map == [(1, 2), (6, 9), (13, 15)]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), nq=st.integers(1, 6), seed=st.integers(0, 1000))
def test_fuse_length_law_property(n, nq, seed):
    subjects = [GarmentSubject("top" if i == 0 else "hat", None, i + 1) for i in range(n)]
    p = build_prompt(subjects)
    L = len([i for i in TOK.tokenize(p.rendered) if i != TOK.pad_id])
    text = torch.randn(L, 4, generator=torch.Generator().manual_seed(seed))
    out = fuse(p, text, [torch.randn(nq, 4) for _ in range(n)])
    assert out.tokens.shape[0] == L - n + n * nq


def test_fuse_identity_and_errors():
    p = prompt_from_text("a person wearing a red top")
    text = torch.randn(10, 8)
    assert torch.equal(fuse(p, text, []).tokens, text)
    with pytest.raises(InvalidArgument):
        fuse(build_prompt(EXAMPLE), torch.randn(32, 8), [torch.randn(4, 8)] * 2)


def test_derive_query_span():
    p = build_prompt(EXAMPLE)
    assert derive_query_span(p, 0) == "a top, tucked in"
    assert derive_query_span(p, 1) == "pants"
    with pytest.raises(InvalidArgument):
        derive_query_span(p, 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["top", "pants", "shoes", "hat", "dress", "jacket"]),
                          st.sampled_from([None, "tucked in", "tucked out", "unzipped", "backwards"])),
                min_size=1, max_size=3))
def test_spans_plus_scaffolding_reassemble_prompt(items):
    subjects = [GarmentSubject(c, s, i + 1) for i, (c, s) in enumerate(items)]
    p = build_prompt(subjects)
    pieces, prev = [], 0
    for i, (a, b) in enumerate(p.spans):
        pieces += [p.rendered[prev:a], derive_query_span(p, i)]
        prev = b
    pieces.append(p.rendered[prev:])
    assert "".join(pieces) == p.rendered
    parsed = parse_instruction(p.rendered)
    assert [(s.category, s.style) for s in parsed.subjects] == [(c, s) for c, s in items]
    assert parsed.spans == p.spans


def test_instruction_encoder_batch():
    torch.manual_seed(0)
    enc = InstructionEncoder(image_size=32, patch=8, dim=32, image_dim=32, n_queries=4).eval()
    prompts = [build_prompt(EXAMPLE[:2]), prompt_from_text("a person wearing a red top")]
    refs = torch.rand(2, 2, 3, 32, 32)
    ctx, mask, embs = enc(prompts, refs, [2, 0])
    n0 = len([i for i in TOK.tokenize(prompts[0].rendered) if i != TOK.pad_id])
    assert mask[0].sum() == n0 - 2 + 8
    assert ctx.shape[0] == 2 and torch.isfinite(ctx).all()
    with pytest.raises(InvalidArgument):
        enc(prompts[:1], refs[:1], [1])
