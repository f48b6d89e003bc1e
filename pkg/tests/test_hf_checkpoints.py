"""Load tiny random Llama / Qwen2 checkpoints written by transformers and compare logits."""

import json

import pytest
import torch

transformers = pytest.importorskip("transformers")
from tokenizers import Tokenizer, models, pre_tokenizers  # noqa: E402

from valence_patching.metric import AnchorSet  # noqa: E402
from valence_patching.model import forward, load_model  # noqa: E402
from valence_patching.text import ChatTemplate, render_and_tokenize, resolve_anchors  # noqa: E402

WORDS = ["happy", "sorry", "fine", "glad", "okay", "the", "news", "I", "got", "it"]
SPECIALS = ["<|endoftext|>", "<|im_start|>", "<|im_end|>", "<|begin_of_text|>", "<|start_header_id|>",
            "<|end_header_id|>", "<|eot_id|>"]


def _write_tokenizer(path, vocab_size):
    vocab = {t: i for i, t in enumerate(SPECIALS + ["[UNK]"] + WORDS)}
    for i in range(len(vocab), vocab_size):
        vocab[f"w{i}"] = i
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    tok.add_special_tokens(SPECIALS)
    tok.save(str(path / "tokenizer.json"))
    (path / "tokenizer_config.json").write_text(json.dumps({"eos_token": "<|endoftext|>"}))


def _make(kind, path, **extra):
    common = dict(vocab_size=40, hidden_size=32, intermediate_size=64, num_hidden_layers=3,
                  num_attention_heads=4, num_key_value_heads=2, max_position_embeddings=128)
    common.update(extra)
    if kind == "llama":
        cfg = transformers.LlamaConfig(rms_norm_eps=1e-5, rope_theta=10000.0, **common)
        model = transformers.LlamaForCausalLM(cfg)
    else:
        cfg = transformers.Qwen2Config(rms_norm_eps=1e-6, rope_theta=1000000.0, **common)
        model = transformers.Qwen2ForCausalLM(cfg)
    torch.manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, 0.2)
    model.eval()
    model.save_pretrained(path, safe_serialization=True)
    _write_tokenizer(path, common["vocab_size"])
    return model


@pytest.mark.parametrize(
    "kind,extra",
    [
        ("llama", {}),
        ("llama", {"rope_scaling": {"rope_type": "llama3", "factor": 8.0, "low_freq_factor": 1.0,
                                    "high_freq_factor": 4.0, "original_max_position_embeddings": 16}}),
        ("llama", {"tie_word_embeddings": True}),
        ("qwen2", {}),
    ],
)
def test_logits_match_transformers(tmp_path, kind, extra):
    model = _make(kind, tmp_path, **extra)
    bundle = load_model(tmp_path, family_hint=kind)
    assert bundle.config.family == kind
    toks = [3, 9, 10, 11, 12, 13, 14, 15, 16, 20, 30, 39, 8]
    with torch.no_grad():
        ref = model(torch.tensor([toks])).logits[0, -1]
    got = forward(bundle, toks).logits
    assert torch.allclose(got, ref, atol=2e-5, rtol=1e-5), (got - ref).abs().max()

    # left padding with an attention mask
    padded = [0, 0] + toks
    mask = [False, False] + [True] * len(toks)
    with torch.no_grad():
        ref_pad = model(torch.tensor([padded]), attention_mask=torch.tensor([mask]).long()).logits[0, -1]
    assert torch.allclose(forward(bundle, padded, mask).logits, ref_pad, atol=2e-5, rtol=1e-5)


def test_family_hint_mismatch(tmp_path):
    _make("qwen2", tmp_path)
    with pytest.raises(ValueError, match="family hint"):
        load_model(tmp_path, family_hint="llama")


def test_hf_tokenizer_templates_and_anchor_resolution(tmp_path):
    _make("qwen2", tmp_path)
    bundle = load_model(tmp_path)
    assert bundle.chat_template_id == "chatml"
    assert bundle.tokenizer.pad_id == bundle.tokenizer.eos_id == 0
    ids = render_and_tokenize(bundle, ChatTemplate("raw"), "I got the news")
    assert ids == [bundle.tokenizer.token_to_id(w) for w in ("I", "got", "the", "news")]
    anchors = resolve_anchors(bundle, AnchorSet("t", ("happy", "thrilled", "glad"), ("sorry", "fine")))
    assert anchors.positive_words == ("happy", "glad")
    assert anchors.valid_counts == (2, 2)


def test_sharded_checkpoint(tmp_path):
    model = _make("llama", tmp_path / "full")
    model.save_pretrained(tmp_path / "shard", safe_serialization=True, max_shard_size="20KB")
    _write_tokenizer(tmp_path / "shard", 40)
    assert (tmp_path / "shard" / "model.safetensors.index.json").exists()
    a = load_model(tmp_path / "full")
    b = load_model(tmp_path / "shard")
    assert torch.equal(forward(a, [5, 6, 7]).logits, forward(b, [5, 6, 7]).logits)
