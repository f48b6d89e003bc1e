import pytest
from hypothesis import given
from hypothesis import strategies as st

from valence_patching.metric import AnchorSet, MetricError
from valence_patching.text import (
    SYSTEM_PROMPT,
    ChatTemplate,
    pad_pair,
    render_and_tokenize,
    resolve_anchors,
    tokenize_pair,
)
from valence_patching.tokenization import ToyTokenizer, TokenizationError


def test_raw_template_is_byte_identity(toy32):
    tok = toy32.tokenizer
    assert render_and_tokenize(toy32, ChatTemplate("raw"), "ab") == [tok.token_to_id("a"), tok.token_to_id("b")]


def test_rendering_is_deterministic(toy32):
    t = ChatTemplate("chatml")
    assert render_and_tokenize(toy32, t, "I passed.") == render_and_tokenize(toy32, t, "I passed.")


def _hand_ids(tok, pieces):
    """Token ids written out piece by piece: specials whole, text one symbol at a time."""
    out = []
    for kind, text in pieces:
        if kind == "special":
            out.append(tok.token_to_id(text))
            continue
        for ch in text:
            tid = tok.token_to_id(ch)
            out.append(tid if tid is not None else tok.token_to_id(ch.lower()))
    return out


def test_chatml_empty_user_matches_hand_built_sequence(toy32):
    tok = toy32.tokenizer
    want = _hand_ids(
        tok,
        [
            ("special", "<|im_start|>"), ("text", "system\n" + SYSTEM_PROMPT), ("special", "<|im_end|>"),
            ("text", "\n"), ("special", "<|im_start|>"), ("text", "user\n"), ("special", "<|im_end|>"),
            ("text", "\n"), ("special", "<|im_start|>"), ("text", "assistant\n"),
        ],
    )
    got = render_and_tokenize(toy32, ChatTemplate("chatml"), "")
    assert got == want
    assert None not in want


def test_llama3_template_shape(toy32):
    ids = render_and_tokenize(toy32, ChatTemplate("llama3_instruct"), "hi")
    tok = toy32.tokenizer
    assert ids[0] == tok.token_to_id("<|begin_of_text|>")
    assert ids.count(tok.token_to_id("<|eot_id|>")) == 2
    assert ids[-2:] == [tok.token_to_id("\n")] * 2


def test_unmappable_symbol_raises(toy32):
    with pytest.raises(TokenizationError, match="unmappable"):
        render_and_tokenize(toy32, ChatTemplate("raw"), "café")


def test_template_is_pure_function():
    t = ChatTemplate("chatml", "sys")
    assert t.render("x") == t.render("x")
    assert "sys" in t.render("x") and t.render("x").endswith("<|im_start|>assistant\n")
    with pytest.raises(ValueError):
        ChatTemplate("alpaca")


def test_pad_pair_examples():
    p = pad_pair([5, 6, 7], [5, 6, 7, 8], 0)
    assert p.clean_tokens == (0, 5, 6, 7)
    assert p.clean_mask == (False, True, True, True)
    assert p.corrupted_mask == (True,) * 4
    q = pad_pair([1, 2], [3, 4], 0)
    assert q.clean_tokens == (1, 2) and q.clean_mask == (True, True) and q.corrupted_tokens == (3, 4)
    r = pad_pair([1], [2, 3], 9)
    assert r.clean_tokens == (9, 1) and r.shared_prefix_len == 0
    with pytest.raises(ValueError):
        pad_pair([], [1], 0)


seqs = st.lists(st.integers(0, 20), min_size=1, max_size=12)


@given(seqs, seqs, st.integers(0, 20))
def test_pad_pair_properties(a, b, pad):
    p = pad_pair(a, b, pad)
    n = max(len(a), len(b))
    assert len(p.clean_tokens) == len(p.corrupted_tokens) == n
    assert list(p.clean_tokens[n - len(a):]) == a and list(p.corrupted_tokens[n - len(b):]) == b
    assert p.clean_mask[-1] and p.corrupted_mask[-1]
    assert sum(p.clean_mask) == len(a) and sum(p.corrupted_mask) == len(b)
    k = 0
    while k < n and p.clean_tokens[k] == p.corrupted_tokens[k]:
        k += 1
    assert p.shared_prefix_len == k


def test_tokenize_pair_uses_pad_id(toy32):
    p = tokenize_pair(toy32, ChatTemplate("raw"), "ab", "abcd")
    assert p.clean_tokens[:2] == (toy32.tokenizer.pad_id,) * 2
    assert p.shared_prefix_len == 0


def test_resolve_single_symbols(toy32):
    r = resolve_anchors(toy32, AnchorSet("custom", ("a",), ("b",)))
    assert r.valid_counts == (1, 1)
    assert r.positive_ids == (toy32.tokenizer.token_to_id("a"),)


def test_multi_token_anchor_dropped(toy32):
    r = resolve_anchors(toy32, AnchorSet("custom", ("a", "zzzz"), ("b",)))
    assert r.positive_words == ("a",)


def test_empty_side_after_resolution_errors(toy32):
    with pytest.raises(MetricError, match="negative"):
        resolve_anchors(toy32, AnchorSet("custom", ("a",), ("zzzz",)))


def test_variant_order_prefers_leading_space():
    class Spy(ToyTokenizer):
        def encode(self, text):
            return [40] if text == " w" else [41] if text in ("w", "x") else [1, 2]

    class B:
        tokenizer = Spy(64)

    r = resolve_anchors(B(), AnchorSet("custom", ("w",), ("x",)))
    assert r.positive_ids == (40,)


words = st.lists(st.sampled_from(list("abcdefg") + ["zz", "qq", "abc"]), min_size=1, max_size=6, unique=True)


@given(words, st.data())
def test_resolution_is_monotone(toy32, pos, data):
    neg = ("h",)
    full = resolve_anchors(toy32, AnchorSet("custom", tuple(pos), neg)) if any(len(w) == 1 for w in pos) else None
    if full is None:
        return
    drop = data.draw(st.sampled_from(pos))
    rest = tuple(w for w in pos if w != drop)
    if not any(len(w) == 1 for w in rest):
        return
    sub = resolve_anchors(toy32, AnchorSet("custom", rest, neg))
    assert set(sub.positive_words) <= set(full.positive_words)
