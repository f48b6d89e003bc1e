"""Tokenizers: a byte-level toy tokenizer and a wrapper around ``tokenizer.json`` files."""

from __future__ import annotations

import json
from pathlib import Path

from tokenizers import Tokenizer


class TokenizationError(ValueError):
    pass


SPECIAL_TOKENS = (
    "<pad>",
    "<|endoftext|>",
    "<|im_start|>",
    "<|im_end|>",
    "<|begin_of_text|>",
    "<|start_header_id|>",
    "<|end_header_id|>",
    "<|eot_id|>",
)

# Symbols in id order. A toy vocabulary keeps the first vocab_size - len(SPECIAL_TOKENS).
ALPHABET = (
    " \netaoinsrhldcumfpgwybvkxjqz.,'!?-"
    "0123456789"
    "IATSMWHBCDEFGJKLNOPQRUVXYZ"
    "\"():;/&%$#@*+=<>[]_~`^{}|\\\t"
)


class ToyTokenizer:
    """One id per symbol with no merges.

    Special tokens are matched greedily. An uppercase letter that falls
    outside a small vocabulary is folded to lowercase. Any other symbol
    outside the vocabulary raises ``TokenizationError``.
    """

    name = "toy"

    def __init__(self, vocab_size: int):
        n_chars = vocab_size - len(SPECIAL_TOKENS)
        if n_chars < 1:
            raise TokenizationError("vocab_size too small for the toy tokenizer")
        self.vocab_size = vocab_size
        self.tokens = list(SPECIAL_TOKENS) + list(ALPHABET[:n_chars])
        # vocab ids past the alphabet are unused but valid
        self.tokens += [f"<unused{i}>" for i in range(vocab_size - len(self.tokens))]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self._specials = sorted(SPECIAL_TOKENS, key=len, reverse=True)
        self.pad_id = self._ids["<pad>"]
        self.eos_id = self._ids["<|endoftext|>"]

    def __eq__(self, other):
        return isinstance(other, ToyTokenizer) and other.vocab_size == self.vocab_size

    def __hash__(self):
        return hash(("toy", self.vocab_size))

    def encode(self, text: str) -> list[int]:
        out, i = [], 0
        while i < len(text):
            for sp in self._specials:
                if text.startswith(sp, i):
                    out.append(self._ids[sp])
                    i += len(sp)
                    break
            else:
                ch = text[i]
                tid = self._ids.get(ch, self._ids.get(ch.lower()))
                if tid is None or tid < len(SPECIAL_TOKENS):
                    raise TokenizationError(f"unmappable symbol {ch!r} for toy tokenizer of size {self.vocab_size}")
                out.append(tid)
                i += 1
        return out

    def token_to_id(self, token: str) -> int | None:
        return self._ids.get(token)

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids)

    def id_to_token(self, tid: int) -> str:
        return self.tokens[tid]


def _token_name(value) -> str | None:
    if isinstance(value, dict):
        return value.get("content")
    return value


class HFTokenizer:
    """Model tokenizer read from ``tokenizer.json``.

    Specials are never added implicitly. The chat template writes them out.
    """

    name = "hf"

    def __init__(self, tokenizer: Tokenizer, pad_id: int | None, eos_id: int | None):
        self._tok = tokenizer
        self.vocab_size = tokenizer.get_vocab_size(with_added_tokens=True)
        self.eos_id = eos_id
        self.pad_id = pad_id if pad_id is not None else eos_id
        if self.pad_id is None:
            raise TokenizationError("tokenizer declares neither a pad nor an EOS token")
        unk = getattr(tokenizer.model, "unk_token", None)
        self.unk_id = tokenizer.token_to_id(unk) if unk else None

    @classmethod
    def from_dir(cls, path: str | Path) -> "HFTokenizer":
        path = Path(path)
        tfile = path / "tokenizer.json"
        if not tfile.is_file():
            raise TokenizationError(f"missing tokenizer definition {tfile}")
        tok = Tokenizer.from_file(str(tfile))
        meta = {}
        if (path / "tokenizer_config.json").is_file():
            meta = json.loads((path / "tokenizer_config.json").read_text())
        cfg = json.loads((path / "config.json").read_text()) if (path / "config.json").is_file() else {}

        def lookup(key):
            name = _token_name(meta.get(key))
            if name is not None and tok.token_to_id(name) is not None:
                return tok.token_to_id(name)
            tid = cfg.get(f"{key}_id")
            if isinstance(tid, list):
                tid = tid[0] if tid else None
            return tid

        return cls(tok, pad_id=lookup("pad_token"), eos_id=lookup("eos_token"))

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False).ids

    def token_to_id(self, token: str) -> int | None:
        return self._tok.token_to_id(token)

    def decode(self, ids) -> str:
        return self._tok.decode(list(ids), skip_special_tokens=False)

    def id_to_token(self, tid: int) -> str:
        return self._tok.id_to_token(tid)
