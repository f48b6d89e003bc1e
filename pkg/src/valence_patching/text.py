"""Chat templating, left-padding of prompt pairs and anchor resolution."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .metric import AnchorSet, MetricError, ResolvedAnchors

log = logging.getLogger(__name__)

SYSTEM_PROMPT = "You are a concise assistant. Respond in one or two sentences."

TEMPLATES = {
    "raw": "{user}",
    "chatml": (
        "<|im_start|>system\n{system}<|im_end|>\n"
        "<|im_start|>user\n{user}<|im_end|>\n"
        "<|im_start|>assistant\n"
    ),
    "llama3_instruct": (
        "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\n{system}<|eot_id|>"
        "<|start_header_id|>user<|end_header_id|>\n\n{user}<|eot_id|>"
        "<|start_header_id|>assistant<|end_header_id|>\n\n"
    ),
}


@dataclass(frozen=True)
class ChatTemplate:
    template_id: str = "chatml"
    system_prompt: str = SYSTEM_PROMPT

    def __post_init__(self):
        if self.template_id not in TEMPLATES:
            raise ValueError(f"unknown chat template {self.template_id!r}")

    def render(self, user_text: str) -> str:
        return TEMPLATES[self.template_id].format(system=self.system_prompt, user=user_text)


def default_template(bundle, system_prompt: str = SYSTEM_PROMPT) -> ChatTemplate:
    return ChatTemplate(bundle.chat_template_id, system_prompt)


def render_and_tokenize(bundle, template: ChatTemplate, user_text: str) -> list[int]:
    """Token ids ending where the assistant's first token would be predicted."""
    return list(bundle.tokenizer.encode(template.render(user_text)))


@dataclass(frozen=True)
class TokenizedPair:
    clean_tokens: tuple[int, ...]
    corrupted_tokens: tuple[int, ...]
    clean_mask: tuple[bool, ...]
    corrupted_mask: tuple[bool, ...]
    shared_prefix_len: int

    def __len__(self):
        return len(self.clean_tokens)


def pad_pair(clean: Sequence[int], corrupted: Sequence[int], pad_id: int) -> TokenizedPair:
    if not clean or not corrupted:
        raise ValueError("both sequences must be non-empty")
    n = max(len(clean), len(corrupted))

    def left_pad(seq):
        k = n - len(seq)
        return tuple([pad_id] * k + list(seq)), tuple([False] * k + [True] * len(seq))

    ct, cm = left_pad(clean)
    rt, rm = left_pad(corrupted)
    shared = 0
    while shared < n and ct[shared] == rt[shared]:
        shared += 1
    return TokenizedPair(ct, rt, cm, rm, shared)


def tokenize_pair(bundle, template: ChatTemplate, clean_text: str, corrupted_text: str) -> TokenizedPair:
    return pad_pair(
        render_and_tokenize(bundle, template, clean_text),
        render_and_tokenize(bundle, template, corrupted_text),
        bundle.tokenizer.pad_id,
    )


def surface_variants(word: str) -> tuple[str, ...]:
    return (" " + word, word, " " + word[:1].upper() + word[1:])


def _single_token(tokenizer, text: str) -> int | None:
    try:
        ids = tokenizer.encode(text)
    except ValueError:
        return None
    if len(ids) != 1 or ids[0] == getattr(tokenizer, "unk_id", None):
        return None
    return ids[0]


def resolve_anchors(bundle, anchor_set: AnchorSet) -> ResolvedAnchors:
    """Keep the anchor words that have a single-token surface form.

    For each word, the first single-token variant wins. The order tried is
    leading space, then bare, then capitalized with a leading space.
    """
    sides = []
    for words in (anchor_set.positive, anchor_set.negative):
        ids, kept = [], []
        for w in words:
            for variant in surface_variants(w):
                tid = _single_token(bundle.tokenizer, variant)
                if tid is not None:
                    ids.append(tid)
                    kept.append(w)
                    break
        sides.append((tuple(ids), tuple(kept)))
    (pos_ids, pos_words), (neg_ids, neg_words) = sides
    if not pos_ids or not neg_ids:
        side = "positive" if not pos_ids else "negative"
        raise MetricError(f"anchor set {anchor_set.name!r} has no single-token {side} anchors for this tokenizer")
    log.info("anchor set %s: %d positive / %d negative valid anchors", anchor_set.name, len(pos_ids), len(neg_ids))
    return ResolvedAnchors(pos_ids, neg_ids, anchor_set.name, pos_words, neg_words)
