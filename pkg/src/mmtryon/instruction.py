"""Multi-modal instructions: prompt template, tokenizer, toy text/image encoders,
perceiver resampler and placeholder fusion.

A prompt such as ``"a person wearing a top, tucked in, [REF#1] and pants [REF#2]"``
is tokenized over a closed vocabulary, embedded by :class:`TextEncoder`, and each
``[REF#i]`` row is spliced out and replaced by ``N_q`` tokens resampled from the
i-th reference image.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import InvalidArgument
from .layers import FeedForward, sinusoidal_embedding
from .attention import AttentionParams, _attend_explicit

MAX_REFS = 6
SEQ_LEN = 32
EMBED_DIM = 128
N_QUERIES = 4

SPECIAL_TOKENS = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"] + [f"[REF#{i}]" for i in range(1, MAX_REFS + 1)]
PLURAL_CATEGORIES = frozenset(
    "pants trousers jeans shorts leggings shoes sneakers boots sandals heels glasses sunglasses "
    "socks gloves overalls loafers slippers earrings mittens".split())

_TOKEN_RE = re.compile(r"\[ref#\d+\]|[a-z0-9]+|[^\sa-z0-9]")
_REF_RE = re.compile(r"\[ref#(\d+)\]", re.IGNORECASE)


# --------------------------------------------------------------------------- templates

@dataclass(frozen=True)
class GarmentSubject:
    category: str
    style: Optional[str] = None
    ref_index: int = 1

    def __post_init__(self):
        if not self.category or not self.category.strip():
            raise InvalidArgument("garment category must be non-empty")
        if self.ref_index < 1:
            raise InvalidArgument(f"ref_index must be positive, got {self.ref_index}")


@dataclass
class InstructionPrompt:
    """A rendered instruction plus bookkeeping for placeholders and query spans.

    ``spans[i]`` is the character range of subject i's ``"<garment>[, <style>]"``
    text; ``token_spans[i]`` the matching token range; ``placeholder_positions``
    the token index of every ``[REF#k]`` in order of appearance and
    ``placeholder_refs`` the ``k`` of each.
    """

    subjects: list
    rendered: str
    placeholder_positions: list = field(default_factory=list)
    placeholder_refs: list = field(default_factory=list)
    spans: list = field(default_factory=list)
    token_spans: list = field(default_factory=list)

    @property
    def n_placeholders(self):
        return len(self.placeholder_positions)


def _article(category):
    if category in PLURAL_CATEGORIES:
        return ""
    return "an " if category[0] in "aeiou" else "a "


def build_prompt(subjects: Sequence[GarmentSubject], tokenizer: Optional["Tokenizer"] = None,
                 max_refs: int = MAX_REFS) -> InstructionPrompt:
    """Render ``"a person wearing <garment>[, <style>,] [REF#i], ... and <garment> [REF#n]"``.

    Only the first garment gets an article (and only when singular), matching
    ``"a person wearing a top, tucked in, [REF#1], pants [REF#2] and shoes [REF#3]"``.
    """
    subjects = list(subjects)
    if not 1 <= len(subjects) <= max_refs:
        raise InvalidArgument(f"need between 1 and {max_refs} subjects, got {len(subjects)}")
    refs = [s.ref_index for s in subjects]
    if len(set(refs)) != len(refs):
        raise InvalidArgument(f"duplicate ref_index in {refs}")
    if max(refs) > max_refs:
        raise InvalidArgument(f"ref_index {max(refs)} exceeds max_refs {max_refs}")

    text = "a person wearing "
    spans = []
    for j, s in enumerate(subjects):
        if j > 0:
            text += " and " if j == len(subjects) - 1 else ", "
        cat = s.category.strip().lower()
        span = (_article(cat) if j == 0 else "") + cat
        if s.style:
            span += ", " + s.style.strip().lower()
        spans.append((len(text), len(text) + len(span)))
        text += span + (", " if s.style else " ") + f"[REF#{s.ref_index}]"
    prompt = InstructionPrompt(subjects, text, spans=spans)
    return annotate(prompt, tokenizer or default_tokenizer())


def annotate(prompt: InstructionPrompt, tokenizer: "Tokenizer") -> InstructionPrompt:
    """Fill in token-level placeholder positions and span ranges."""
    ids, offsets = tokenizer.encode_with_offsets(prompt.rendered)
    n_refs_text = len(_REF_RE.findall(prompt.rendered))
    positions, refs = [], []
    for pos, tid in enumerate(ids):
        k = tokenizer.ref_number(tid)
        if k is not None:
            positions.append(pos)
            refs.append(k)
    if len(positions) != n_refs_text:
        raise InvalidArgument(f"prompt does not fit in {tokenizer.max_len} tokens: {prompt.rendered!r}")
    token_spans = []
    for a, b in prompt.spans:
        covered = [p for p, off in enumerate(offsets) if off is not None and off[0] >= a and off[1] <= b]
        token_spans.append((covered[0], covered[-1] + 1) if covered else (0, 0))
    prompt.placeholder_positions, prompt.placeholder_refs = positions, refs
    prompt.token_spans = token_spans
    return prompt


def prompt_from_text(text: str, tokenizer: Optional["Tokenizer"] = None) -> InstructionPrompt:
    """Wrap free-form text (a caption or a user instruction) as a prompt without subjects."""
    return annotate(InstructionPrompt([], text), tokenizer or default_tokenizer())


_LEAD_RE = re.compile(r"^(?:\s*(?:a person wearing|and|,))*\s*", re.IGNORECASE)


def parse_instruction(text: str, tokenizer: Optional["Tokenizer"] = None) -> InstructionPrompt:
    """Recover one subject per ``[REF#k]`` from free-form template-like text.

    The subject of a placeholder is the text since the previous placeholder,
    minus leading ``"a person wearing"``/``"and"``/commas and trailing commas;
    its category is the last word before the first comma, its style the rest.
    """
    subjects, spans, prev = [], [], 0
    for m in _REF_RE.finditer(text):
        seg = text[prev:m.start()]
        lead = _LEAD_RE.match(seg).end()
        body = seg[lead:].rstrip(" ,")
        if not body:
            raise InvalidArgument(f"no garment words before {m.group()} in {text!r}")
        head, _, style = body.partition(",")
        words = head.split()
        category = words[-1].lower()
        subjects.append(GarmentSubject(category, style.strip().lower() or None, int(m.group(1))))
        start = prev + lead
        spans.append((start, start + len(body)))
        prev = m.end()
    return annotate(InstructionPrompt(subjects, text, spans=spans), tokenizer or default_tokenizer())


def derive_query_span(prompt: InstructionPrompt, subject_index: int) -> str:
    """The ``"<garment>[, <style>]"`` text of one subject, used to query the garment encoder."""
    if not 0 <= subject_index < len(prompt.spans):
        raise InvalidArgument(f"subject index {subject_index} out of range for {len(prompt.spans)} subjects")
    a, b = prompt.spans[subject_index]
    return prompt.rendered[a:b]


# --------------------------------------------------------------------------- tokenizer

def load_vocab(path=None) -> list[str]:
    if path is None:
        text = resources.files("mmtryon").joinpath("data/vocab.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    words = [w for w in text.splitlines() if w]
    if words[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
        raise InvalidArgument("vocabulary must start with the special tokens in fixed order")
    return words


class Tokenizer:
    """Lowercasing word/punctuation tokenizer over a closed vocabulary, fixed length output."""

    def __init__(self, vocab: Optional[list[str]] = None, max_len: int = SEQ_LEN):
        self.vocab = load_vocab() if vocab is None else list(vocab)
        self.index = {w.lower(): i for i, w in enumerate(self.vocab)}
        self.max_len = max_len
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = 0, 1, 2, 3
        self._ref_ids = {self.index[f"[ref#{i}]"]: i for i in range(1, MAX_REFS + 1)}

    def __len__(self):
        return len(self.vocab)

    def ref_id(self, k: int) -> int:
        return self.index[f"[ref#{k}]"]

    def ref_number(self, token_id: int) -> Optional[int]:
        return self._ref_ids.get(token_id)

    def encode_with_offsets(self, text: str):
        lowered = text.lower()
        ids, offsets = [self.bos_id], [None]
        for m in _TOKEN_RE.finditer(lowered):
            if len(ids) >= self.max_len - 1:
                break
            ids.append(self.index.get(m.group(), self.unk_id))
            offsets.append((m.start(), m.end()))
        ids.append(self.eos_id)
        offsets.append(None)
        while len(ids) < self.max_len:
            ids.append(self.pad_id)
            offsets.append(None)
        return ids, offsets

    def tokenize(self, text: str) -> list[int]:
        return self.encode_with_offsets(text)[0]

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (self.pad_id, self.bos_id):
                continue
            if i == self.eos_id:
                break
            w = self.vocab[i]
            if w in (",", ".") and words:
                words[-1] += w
            else:
                words.append(w)
        return " ".join(words)


_DEFAULT_TOKENIZER = None


def default_tokenizer() -> Tokenizer:
    global _DEFAULT_TOKENIZER
    if _DEFAULT_TOKENIZER is None:
        _DEFAULT_TOKENIZER = Tokenizer()
    return _DEFAULT_TOKENIZER


# --------------------------------------------------------------------------- encoders

def _encoder_layer(dim, heads):
    return nn.TransformerEncoderLayer(dim, heads, dim * 4, dropout=0.0, activation="gelu",
                                      batch_first=True, norm_first=True)


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + 2 bidirectional transformer layers."""

    def __init__(self, vocab_size: int, dim: int = EMBED_DIM, layers: int = 2, heads: int = 4,
                 max_len: int = SEQ_LEN, pad_id: int = 0):
        super().__init__()
        self.pad_id = pad_id
        self.embed = nn.Embedding(vocab_size, dim)
        self.register_buffer("pos", sinusoidal_embedding(torch.arange(max_len), dim), persistent=False)
        self.layers = nn.ModuleList(_encoder_layer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        x = self.embed(ids) + self.pos[: ids.shape[1]].to(self.embed.weight.dtype)
        pad = ids == self.pad_id
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad)
        x = self.norm(x)
        return x[0] if squeeze else x


@dataclass
class ImageTokenSet:
    tokens: torch.Tensor
    cls: Optional[torch.Tensor] = None


class ImageTokenEncoder(nn.Module):
    """Patchify -> linear embed -> 2 transformer layers.

    The token set handed to the resampler is the output of the penultimate layer;
    the final layer only produces the pooled ``cls`` summary.
    """

    def __init__(self, image_size: int = 64, patch: int = 8, dim: int = EMBED_DIM,
                 layers: int = 2, heads: int = 4, in_ch: int = 3):
        super().__init__()
        if image_size % patch:
            raise InvalidArgument(f"image size {image_size} not divisible by patch {patch}")
        self.image_size, self.patch = image_size, patch
        self.num_patches = (image_size // patch) ** 2
        self.embed = nn.Linear(in_ch * patch * patch, dim)
        self.pos = nn.Parameter(torch.randn(self.num_patches, dim) * 0.02)
        self.layers = nn.ModuleList(_encoder_layer(dim, heads) for _ in range(layers))

    def patchify(self, img):
        b, c, h, w = img.shape
        p = self.patch
        x = img.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, img: torch.Tensor) -> ImageTokenSet:
        squeeze = img.ndim == 3
        if squeeze:
            img = img[None]
        if img.shape[-2:] != (self.image_size, self.image_size):
            raise InvalidArgument(f"expected {self.image_size}x{self.image_size} image, "
                                  f"got {tuple(img.shape[-2:])}")
        x = self.embed(self.patchify(img)) + self.pos
        hidden = [x]
        for layer in self.layers:
            x = layer(x)
            hidden.append(x)
        tokens, cls = hidden[-2], hidden[-1].mean(dim=1)
        if squeeze:
            tokens, cls = tokens[0], cls[0]
        return ImageTokenSet(tokens, cls)


class PerceiverResampler(nn.Module):
    """``N_q`` learned queries cross-attend over image tokens (2 layers + FF), then project to ``D``."""

    def __init__(self, in_dim: int = EMBED_DIM, out_dim: int = EMBED_DIM, n_queries: int = N_QUERIES,
                 layers: int = 2, heads: int = 4):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(n_queries, in_dim) * 0.02)
        self.attn = nn.ModuleList(AttentionParams(in_dim, heads) for _ in range(layers))
        self.norm_q = nn.ModuleList(nn.LayerNorm(in_dim) for _ in range(layers))
        self.norm_kv = nn.ModuleList(nn.LayerNorm(in_dim) for _ in range(layers))
        self.norm_ff = nn.ModuleList(nn.LayerNorm(in_dim) for _ in range(layers))
        self.ff = nn.ModuleList(FeedForward(in_dim) for _ in range(layers))
        self.proj = nn.Linear(in_dim, out_dim)
        self.norm_out = nn.LayerNorm(out_dim)

    @property
    def n_queries(self):
        return self.latents.shape[0]

    def forward(self, tokens, return_weights=False):
        if isinstance(tokens, ImageTokenSet):
            tokens = tokens.tokens
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        x = self.latents.expand(tokens.shape[0], -1, -1)
        weights = []
        for attn, nq, nkv, nff, ff in zip(self.attn, self.norm_q, self.norm_kv, self.norm_ff, self.ff):
            kv = nkv(tokens)
            out, w = _attend_explicit(attn.to_q(nq(x)), attn.to_k(kv), attn.to_v(kv), attn.heads,
                             return_weights=True)
            weights.append(w)
            x = x + attn.to_out(out)
            x = x + ff(nff(x))
        out = self.norm_out(self.proj(x))
        if squeeze:
            out = out[0]
            weights = [w[0] for w in weights]
        return (out, weights) if return_weights else out


def resample(tokens, resampler: PerceiverResampler, n_queries: Optional[int] = None):
    if n_queries is not None and n_queries != resampler.n_queries:
        raise InvalidArgument(f"resampler has {resampler.n_queries} queries, asked for {n_queries}")
    if n_queries is not None and n_queries < 1:
        raise InvalidArgument("n_queries must be >= 1")
    return resampler(tokens)


# --------------------------------------------------------------------------- fusion

@dataclass
class MultiModalEmbedding:
    tokens: torch.Tensor
    span_map: list = field(default_factory=list)


def fuse(prompt: InstructionPrompt, text_emb: torch.Tensor,
         garment_tokens: Sequence[torch.Tensor]) -> MultiModalEmbedding:
    """Splice each placeholder row out of ``text_emb`` and insert its resampled tokens.

    ``garment_tokens[k]`` belongs to the k-th smallest reference number present in
    the prompt (``[REF#1]`` first).  Non-placeholder rows are copied unchanged.
    """
    n = prompt.n_placeholders
    if len(garment_tokens) != n:
        raise InvalidArgument(f"{len(garment_tokens)} garment token sets for {n} placeholders")
    if n == 0:
        return MultiModalEmbedding(text_emb, list(prompt.token_spans))
    order = {r: k for k, r in enumerate(sorted(set(prompt.placeholder_refs)))}
    pieces, prev = [], 0
    shift_at = []
    for pos, r in zip(prompt.placeholder_positions, prompt.placeholder_refs):
        g = garment_tokens[order[r]]
        pieces += [text_emb[prev:pos], g.to(text_emb.dtype)]
        shift_at.append((pos, g.shape[0] - 1))
        prev = pos + 1
    pieces.append(text_emb[prev:])

    def moved(i):
        return i + sum(s for p, s in shift_at if p < i)

    span_map = [(moved(a), moved(b - 1) + 1) if b > a else (a, b) for a, b in prompt.token_spans]
    return MultiModalEmbedding(torch.cat(pieces, dim=0), span_map)


class InstructionEncoder(nn.Module):
    """Bundles text encoder, image-token encoder and resampler; produces padded batch contexts."""

    def __init__(self, image_size=64, patch=8, dim=EMBED_DIM, image_dim=EMBED_DIM,
                 n_queries=N_QUERIES, seq_len=SEQ_LEN, tokenizer: Optional[Tokenizer] = None):
        super().__init__()
        self.tokenizer = tokenizer or default_tokenizer()
        self.dim = dim
        self.text = TextEncoder(len(self.tokenizer), dim, max_len=seq_len)
        self.image = ImageTokenEncoder(image_size, patch, image_dim)
        self.resampler = PerceiverResampler(image_dim, dim, n_queries)

    def token_ids(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.tokenizer.tokenize(t) for t in texts], dtype=torch.long,
                            device=self.text.embed.weight.device)

    def encode_text(self, texts: Sequence[str], return_mask: bool = False):
        """``[B, L, D]`` embeddings (and the non-padding mask ``[B, L]`` when asked)."""
        ids = self.token_ids(texts)
        emb = self.text(ids)
        return (emb, ids != self.tokenizer.pad_id) if return_mask else emb

    @staticmethod
    def slot_order(prompt: InstructionPrompt) -> list[int]:
        """Reference slot feeding each placeholder, by ascending ref number.

        Slots follow subject order (slot j holds subject j's garment); prompts
        without subjects use slot k for the k-th smallest ref number.
        """
        refs = sorted(set(prompt.placeholder_refs))
        if len(prompt.subjects) == len(refs):
            by_ref = {s.ref_index: j for j, s in enumerate(prompt.subjects)}
            if set(by_ref) == set(refs):
                return [by_ref[r] for r in refs]
        return list(range(len(refs)))

    def forward(self, prompts: Sequence[InstructionPrompt], ref_images: Optional[torch.Tensor] = None,
                ref_counts: Optional[Sequence[int]] = None):
        """Return ``(context [B, L', D], mask [B, L'], embeddings)`` for a batch.

        ``ref_images`` is ``[B, n_max, 3, H, W]``; sample ``b`` uses the first
        ``ref_counts[b]`` entries.  Prompts without placeholders skip fusion.
        """
        text_emb, valid = self.encode_text([p.rendered for p in prompts], return_mask=True)
        lengths = valid.sum(1).tolist()
        resampled = None
        if ref_images is not None and ref_images.shape[1] > 0:
            b, n_max = ref_images.shape[:2]
            flat = ref_images.flatten(0, 1)
            resampled = self.resampler(self.image(flat)).reshape(b, n_max, -1, self.dim)
        embeddings = []
        for b, p in enumerate(prompts):
            n = p.n_placeholders
            if n and resampled is None:
                raise InvalidArgument("prompt has placeholders but no reference images were given")
            if ref_counts is not None and n and ref_counts[b] != n:
                raise InvalidArgument(f"sample {b}: {ref_counts[b]} refs for {n} placeholders")
            toks = [resampled[b, k] for k in self.slot_order(p)] if n else []
            embeddings.append(fuse(p, text_emb[b, : lengths[b]], toks))
        return pad_contexts([e.tokens for e in embeddings]) + (embeddings,)


def pad_contexts(rows: Sequence[torch.Tensor]):
    """Stack variable-length ``[L_i, D]`` sequences into ``([B, L_max, D], mask [B, L_max])``."""
    l_max = max(r.shape[0] for r in rows)
    d = rows[0].shape[1]
    out = rows[0].new_zeros(len(rows), l_max, d)
    mask = torch.zeros(len(rows), l_max, dtype=torch.bool, device=rows[0].device)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
        mask[i, : r.shape[0]] = True
    return out, mask
