"""Minimal pre-norm decoder-only transformer with ``resid_pre`` hook points.

The forward pass runs one token sequence at a time and exposes the residual
stream entering every block. Activations can be captured at any
(layer, position) cell, and edits can replace or add to them. Weights use the
HuggingFace tensor naming, so toy models and the Llama / Qwen2 checkpoints
share a single loader.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence, Union

import torch
import torch.nn.functional as F
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .tokenization import HFTokenizer, ToyTokenizer

log = logging.getLogger(__name__)

# precision mode -> (storage dtype, compute dtype)
PRECISIONS = {
    "float64": (torch.float64, torch.float64),
    "float32": (torch.float32, torch.float32),
    "float16": (torch.float16, torch.float32),
}

POSITION_ENCODINGS = ("rotary", "learned")
NORM_KINDS = ("rmsnorm", "layernorm")
MLP_KINDS = ("gated_silu", "gelu")
ATTENTION_KINDS = ("auto", "mha", "gqa")
CHAT_TEMPLATES = ("llama3_instruct", "chatml", "raw")

FAMILY_TEMPLATES = {"llama": "llama3_instruct", "qwen2": "chatml", "toy": "chatml"}


class ModelError(ValueError):
    """Invalid configuration, bad weight file, or bad forward arguments."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_mlp: int
    vocab_size: int
    position_encoding: str = "rotary"
    norm_kind: str = "rmsnorm"
    mlp_kind: str = "gated_silu"
    max_seq_len: int = 512
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    rope_scaling: Mapping[str, Any] | None = None
    attn_bias: bool = False
    tie_embeddings: bool = False
    # "auto" picks the grouped path only when n_kv_heads < n_heads
    attention_kind: str = "auto"
    family: str = "toy"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_mlp", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ModelError(f"{name} must be a positive integer, got {value!r}")
        if not self.norm_eps > 0:
            raise ModelError("norm_eps must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ModelError("n_kv_heads must divide n_heads")
        if self.d_model % self.n_heads:
            raise ModelError("n_heads must divide d_model")
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ModelError(f"unsupported position_encoding {self.position_encoding!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ModelError(f"unsupported norm_kind {self.norm_kind!r}")
        if self.mlp_kind not in MLP_KINDS:
            raise ModelError(f"unsupported mlp_kind {self.mlp_kind!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ModelError(f"unsupported attention_kind {self.attention_kind!r}")
        if self.attention_kind == "mha" and self.n_kv_heads != self.n_heads:
            raise ModelError("attention_kind 'mha' requires n_kv_heads == n_heads")
        if self.position_encoding == "rotary" and self.d_head % 2:
            raise ModelError("rotary position encoding needs an even head dimension")
        if self.rope_scaling is not None:
            kind = self.rope_scaling.get("rope_type", self.rope_scaling.get("type"))
            if kind not in ("default", "llama3"):
                raise ModelError(f"unsupported rope_scaling type {kind!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def grouped(self) -> bool:
        if self.attention_kind == "auto":
            return self.n_kv_heads != self.n_heads
        return self.attention_kind == "gqa"

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.rope_scaling is not None:
            d["rope_scaling"] = dict(self.rope_scaling)
        return d


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor a bundle with this config must carry, in creation order."""
    d, hd = cfg.d_model, cfg.d_head
    shapes: dict[str, tuple[int, ...]] = {"model.embed_tokens.weight": (cfg.vocab_size, d)}
    if cfg.position_encoding == "learned":
        shapes["model.embed_positions.weight"] = (cfg.max_seq_len, d)

    def norm(prefix):
        shapes[f"{prefix}.weight"] = (d,)
        if cfg.norm_kind == "layernorm":
            shapes[f"{prefix}.bias"] = (d,)

    for i in range(cfg.n_layers):
        p = f"model.layers.{i}"
        norm(f"{p}.input_layernorm")
        for proj, heads in (("q", cfg.n_heads), ("k", cfg.n_kv_heads), ("v", cfg.n_kv_heads)):
            shapes[f"{p}.self_attn.{proj}_proj.weight"] = (heads * hd, d)
            if cfg.attn_bias:
                shapes[f"{p}.self_attn.{proj}_proj.bias"] = (heads * hd,)
        shapes[f"{p}.self_attn.o_proj.weight"] = (d, cfg.n_heads * hd)
        norm(f"{p}.post_attention_layernorm")
        if cfg.mlp_kind == "gated_silu":
            shapes[f"{p}.mlp.gate_proj.weight"] = (cfg.d_mlp, d)
            shapes[f"{p}.mlp.up_proj.weight"] = (cfg.d_mlp, d)
            shapes[f"{p}.mlp.down_proj.weight"] = (d, cfg.d_mlp)
        else:
            shapes[f"{p}.mlp.up_proj.weight"] = (cfg.d_mlp, d)
            shapes[f"{p}.mlp.up_proj.bias"] = (cfg.d_mlp,)
            shapes[f"{p}.mlp.down_proj.weight"] = (d, cfg.d_mlp)
            shapes[f"{p}.mlp.down_proj.bias"] = (d,)
    norm("model.norm")
    if not cfg.tie_embeddings:
        shapes["lm_head.weight"] = (cfg.vocab_size, d)
    return shapes


@dataclass(frozen=True)
class ModelBundle:
    """Config, weights, tokenizer and chat template for one model.

    Weights are held in the storage dtype of ``precision``. The ``w`` accessor
    hands them out in the compute dtype.
    """

    config: ModelConfig
    weights: Mapping[str, torch.Tensor]
    tokenizer: Any
    chat_template_id: str = "chatml"
    precision: str = "float32"
    device: str = "cpu"
    source: str = ""

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ModelError(f"unknown precision mode {self.precision!r}")
        if self.chat_template_id not in CHAT_TEMPLATES:
            raise ModelError(f"unknown chat template {self.chat_template_id!r}")
        check_weights(self.config, self.weights)
        object.__setattr__(self, "weights", MappingProxyType(dict(self.weights)))

    @property
    def compute_dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision][1]

    def w(self, name: str) -> torch.Tensor:
        t = self.weights[name]
        return t if t.dtype == self.compute_dtype else t.to(self.compute_dtype)

    def maybe(self, name: str) -> torch.Tensor | None:
        return self.w(name) if name in self.weights else None

    @property
    def unembed(self) -> torch.Tensor:
        if self.config.tie_embeddings:
            return self.w("model.embed_tokens.weight")
        return self.w("lm_head.weight")


def check_weights(cfg: ModelConfig, weights: Mapping[str, torch.Tensor]) -> None:
    for name, shape in expected_shapes(cfg).items():
        if name not in weights:
            raise ModelError(f"missing tensor {name}")
        got = tuple(weights[name].shape)
        if got != shape:
            raise ModelError(f"shape mismatch for tensor {name}: expected {shape}, found {got}")


# ---------------------------------------------------------------------------
# hooks and edits


Positions = Union[str, int, Sequence[int]]


@dataclass(frozen=True)
class HookPoint:
    layer: int
    positions: Positions = "all"
    kind: str = "resid_pre"

    def resolve(self, seq_len: int) -> tuple[int, ...]:
        if self.positions == "all":
            return tuple(range(seq_len))
        raw = (self.positions,) if isinstance(self.positions, int) else tuple(self.positions)
        out = []
        for p in raw:
            if not -seq_len <= p < seq_len:
                raise ModelError(f"position {p} out of range for sequence length {seq_len}")
            out.append(p % seq_len)
        return tuple(out)


@dataclass(frozen=True)
class Edit:
    hook: HookPoint
    vector: torch.Tensor
    mode: str = "replace"


@dataclass
class ForwardRecord:
    logits: torch.Tensor
    cached_activations: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)


def _as_edit(e) -> Edit:
    if isinstance(e, Edit):
        return e
    hook, vec, *rest = e
    return Edit(hook, vec, rest[0] if rest else "replace")


def _prepare_edits(bundle: ModelBundle, edits: Iterable, seq_len: int) -> dict[int, list]:
    cfg = bundle.config
    by_layer: dict[int, list] = {}
    for e in edits:
        e = _as_edit(e)
        if e.hook.kind != "resid_pre":
            raise ModelError(f"unsupported hook kind {e.hook.kind!r}")
        if not 0 <= e.hook.layer < cfg.n_layers:
            raise ModelError(f"edit layer {e.hook.layer} out of range [0, {cfg.n_layers})")
        if e.mode not in ("replace", "add"):
            raise ModelError(f"unknown edit mode {e.mode!r}")
        vec = torch.as_tensor(e.vector)
        if vec.shape != (cfg.d_model,):
            raise ModelError(f"edit vector must have shape ({cfg.d_model},), got {tuple(vec.shape)}")
        if not torch.isfinite(vec).all():
            raise ModelError("edit vector contains non-finite values")
        vec = vec.to(device=bundle.device, dtype=bundle.compute_dtype)
        by_layer.setdefault(e.hook.layer, []).append((e.hook.resolve(seq_len), vec, e.mode))
    return by_layer


def _prepare_capture(bundle: ModelBundle, capture: Iterable[HookPoint], seq_len: int) -> dict[int, set]:
    by_layer: dict[int, set] = {}
    for hp in capture:
        if not 0 <= hp.layer < bundle.config.n_layers:
            raise ModelError(f"capture layer {hp.layer} out of range [0, {bundle.config.n_layers})")
        by_layer.setdefault(hp.layer, set()).update(hp.resolve(seq_len))
    return by_layer


# ---------------------------------------------------------------------------
# forward pass


def _inputs(bundle: ModelBundle, tokens, attention_mask) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.as_tensor(list(tokens) if not torch.is_tensor(tokens) else tokens, dtype=torch.long)
    if ids.ndim != 1 or ids.numel() == 0:
        raise ModelError("tokens must be a non-empty 1-D sequence")
    if (ids < 0).any() or (ids >= bundle.config.vocab_size).any():
        raise ModelError(f"token id out of range [0, {bundle.config.vocab_size})")
    if attention_mask is None:
        mask = torch.ones(ids.numel(), dtype=torch.bool)
    else:
        mask = torch.as_tensor(
            list(attention_mask) if not torch.is_tensor(attention_mask) else attention_mask, dtype=torch.bool
        )
        if mask.shape != ids.shape:
            raise ModelError("attention mask length must equal token length")
    if ids.numel() > bundle.config.max_seq_len:
        raise ModelError(f"sequence length {ids.numel()} exceeds max_seq_len {bundle.config.max_seq_len}")
    return ids.to(bundle.device), mask.to(bundle.device)


def position_ids(mask: torch.Tensor) -> torch.Tensor:
    # left padding must not shift the positions of real tokens
    return (mask.long().cumsum(0) - 1).clamp(min=0)


def _allowed(mask: torch.Tensor) -> torch.Tensor:
    n = mask.numel()
    causal = torch.ones(n, n, dtype=torch.bool, device=mask.device).tril()
    eye = torch.eye(n, dtype=torch.bool, device=mask.device)
    # pad queries see only themselves so their softmax row stays finite
    return causal & (mask.unsqueeze(0) | eye)


def rotary_inv_freq(cfg: ModelConfig) -> torch.Tensor:
    hd = cfg.d_head
    inv = 1.0 / (cfg.rope_theta ** (torch.arange(0, hd, 2, dtype=torch.float64) / hd))
    rs = cfg.rope_scaling
    if rs is not None and rs.get("rope_type", rs.get("type")) == "llama3":
        factor = rs["factor"]
        low, high = rs["low_freq_factor"], rs["high_freq_factor"]
        old_len = rs["original_max_position_embeddings"]
        wavelen = 2 * math.pi / inv
        scaled = torch.where(wavelen > old_len / low, inv / factor, inv)
        smooth = (old_len / wavelen - low) / (high - low)
        smoothed = (1 - smooth) * scaled / factor + smooth * scaled
        medium = (wavelen >= old_len / high) & (wavelen <= old_len / low)
        inv = torch.where(medium, smoothed, scaled)
    return inv


def _rotary_tables(bundle: ModelBundle, positions: torch.Tensor):
    inv = rotary_inv_freq(bundle.config).to(positions.device)
    angles = positions.to(torch.float64).unsqueeze(1) * inv.unsqueeze(0)
    angles = torch.cat([angles, angles], dim=-1)
    return angles.cos().to(bundle.compute_dtype), angles.sin().to(bundle.compute_dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos + rotated * sin


def _norm(bundle: ModelBundle, prefix: str, x: torch.Tensor) -> torch.Tensor:
    cfg = bundle.config
    w = bundle.w(f"{prefix}.weight")
    if cfg.norm_kind == "layernorm":
        return F.layer_norm(x, (cfg.d_model,), w, bundle.w(f"{prefix}.bias"), cfg.norm_eps)
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + cfg.norm_eps) * w


def _linear(bundle: ModelBundle, prefix: str, x: torch.Tensor) -> torch.Tensor:
    return F.linear(x, bundle.w(f"{prefix}.weight"), bundle.maybe(f"{prefix}.bias"))


def _attention(bundle: ModelBundle, layer: int, x: torch.Tensor, rope, allowed: torch.Tensor) -> torch.Tensor:
    cfg = bundle.config
    T, hd = x.shape[0], cfg.d_head
    p = f"model.layers.{layer}.self_attn"
    q = _linear(bundle, f"{p}.q_proj", x).view(T, cfg.n_heads, hd).transpose(0, 1)
    k = _linear(bundle, f"{p}.k_proj", x).view(T, cfg.n_kv_heads, hd).transpose(0, 1)
    v = _linear(bundle, f"{p}.v_proj", x).view(T, cfg.n_kv_heads, hd).transpose(0, 1)
    if rope is not None:
        q, k = _rotate(q, *rope), _rotate(k, *rope)
    scale = 1.0 / math.sqrt(hd)
    if cfg.grouped:
        rep = cfg.n_heads // cfg.n_kv_heads
        qg = q.reshape(cfg.n_kv_heads, rep, T, hd)
        scores = torch.matmul(qg, k.unsqueeze(1).transpose(-1, -2)) * scale
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = torch.matmul(torch.softmax(scores, dim=-1), v.unsqueeze(1)).reshape(cfg.n_heads, T, hd)
    else:
        scores = torch.matmul(q, k.transpose(-1, -2)) * scale
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = torch.matmul(torch.softmax(scores, dim=-1), v)
    out = out.transpose(0, 1).reshape(T, cfg.n_heads * hd)
    return _linear(bundle, f"{p}.o_proj", out)


def _mlp(bundle: ModelBundle, layer: int, x: torch.Tensor) -> torch.Tensor:
    p = f"model.layers.{layer}.mlp"
    if bundle.config.mlp_kind == "gated_silu":
        h = F.silu(_linear(bundle, f"{p}.gate_proj", x)) * _linear(bundle, f"{p}.up_proj", x)
    else:
        h = F.gelu(_linear(bundle, f"{p}.up_proj", x))
    return _linear(bundle, f"{p}.down_proj", h)


def _block(bundle: ModelBundle, layer: int, resid: torch.Tensor, rope, allowed) -> torch.Tensor:
    p = f"model.layers.{layer}"
    resid = resid + _attention(bundle, layer, _norm(bundle, f"{p}.input_layernorm", resid), rope, allowed)
    return resid + _mlp(bundle, layer, _norm(bundle, f"{p}.post_attention_layernorm", resid))


def embed(bundle: ModelBundle, ids: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    resid = bundle.w("model.embed_tokens.weight")[ids]
    if bundle.config.position_encoding == "learned":
        resid = resid + bundle.w("model.embed_positions.weight")[positions]
    return resid


# Sequences are padded internally to a multiple of this many rows. Every
# matmul and softmax then reduces over a block-aligned length, so the values
# at a prefix do not depend on how many tokens follow it.
ROW_BLOCK = 16


def _run(bundle, resid, start, mask, edits, capture, trace=None) -> ForwardRecord:
    cfg = bundle.config
    T = resid.shape[0]
    extra = -T % ROW_BLOCK
    if extra:
        # trailing rows sit causally after every real token and never reach them
        resid = torch.cat([resid, resid.new_zeros(extra, cfg.d_model)])
        mask = torch.cat([mask, mask.new_zeros(extra)])
    positions = position_ids(mask)
    rope = _rotary_tables(bundle, positions) if cfg.position_encoding == "rotary" else None
    allowed = _allowed(mask)
    cached: dict[tuple[int, int], torch.Tensor] = {}
    for layer in range(start, cfg.n_layers):
        if layer in edits:
            resid = resid.clone()
            for pos, vec, mode in edits[layer]:
                for p in pos:
                    resid[p] = vec if mode == "replace" else resid[p] + vec
        if trace is not None:
            trace.append(resid[:T])
        for p in sorted(capture.get(layer, ())):
            cached[(layer, p)] = resid[p].clone()
        resid = _block(bundle, layer, resid, rope, allowed)
    final = _norm(bundle, "model.norm", resid[T - 1 : T])
    logits = F.linear(final, bundle.unembed)[0]
    return ForwardRecord(logits=logits, cached_activations=cached)


@torch.no_grad()
def forward(
    bundle: ModelBundle,
    tokens: Sequence[int] | torch.Tensor,
    attention_mask: Sequence[bool] | torch.Tensor | None = None,
    capture: Iterable[HookPoint] = (),
    edits: Iterable = (),
) -> ForwardRecord:
    """Run one sequence and return final-position next-token logits.

    ``capture`` records resid_pre vectors at the requested cells. An edit at
    the same hook is applied before the capture. ``edits`` are ``Edit``
    objects or ``(HookPoint, vector, mode)`` tuples. They apply in list order,
    and ``mode`` is ``"replace"`` or ``"add"``.
    """
    ids, mask = _inputs(bundle, tokens, attention_mask)
    T = ids.numel()
    e = _prepare_edits(bundle, edits, T)
    c = _prepare_capture(bundle, capture, T)
    resid = embed(bundle, ids, position_ids(mask))
    return _run(bundle, resid, 0, mask, e, c)


@torch.no_grad()
def forward_from(
    bundle: ModelBundle,
    layer: int,
    resid: torch.Tensor,
    attention_mask: Sequence[bool] | torch.Tensor | None = None,
    edits: Iterable = (),
    capture: Iterable[HookPoint] = (),
) -> ForwardRecord:
    """Resume a forward pass from ``resid``, the residual stream entering ``layer``."""
    cfg = bundle.config
    if not 0 <= layer < cfg.n_layers:
        raise ModelError(f"layer {layer} out of range [0, {cfg.n_layers})")
    if resid.ndim != 2 or resid.shape[1] != cfg.d_model:
        raise ModelError(f"residual must have shape (seq_len, {cfg.d_model})")
    T = resid.shape[0]
    ids = torch.zeros(T, dtype=torch.long)
    _, mask = _inputs(bundle, ids, attention_mask)
    e = _prepare_edits(bundle, edits, T)
    for l in e:
        if l < layer:
            raise ModelError(f"edit at layer {l} precedes resume layer {layer}")
    c = _prepare_capture(bundle, capture, T)
    return _run(bundle, resid.to(device=bundle.device, dtype=bundle.compute_dtype), layer, mask, e, c)


@torch.no_grad()
def resid_trace(bundle: ModelBundle, tokens, attention_mask=None, edits: Iterable = ()) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (resid_pre stack of shape [n_layers, seq_len, d_model], final logits)."""
    ids, mask = _inputs(bundle, tokens, attention_mask)
    trace: list[torch.Tensor] = []
    e = _prepare_edits(bundle, edits, ids.numel())
    rec = _run(bundle, embed(bundle, ids, position_ids(mask)), 0, mask, e, {}, trace)
    return torch.stack(trace), rec.logits


# ---------------------------------------------------------------------------
# toy models and weight files


def make_toy_model(
    seed: int,
    config: ModelConfig,
    precision: str = "float32",
    chat_template_id: str = "chatml",
) -> ModelBundle:
    """Seeded random model with a byte-level toy tokenizer.

    Weights are drawn in float64 and then cast. A given seed therefore yields
    the same values, up to rounding, in every precision mode.
    """
    if config.vocab_size < 32:
        raise ModelError("toy models need vocab_size >= 32")
    gen = torch.Generator().manual_seed(int(seed))
    weights = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm.weight") or name.endswith("layernorm.weight"):
            t = 1.0 + 0.1 * torch.randn(shape, generator=gen, dtype=torch.float64)
        elif name.endswith(".bias"):
            t = 0.02 * torch.randn(shape, generator=gen, dtype=torch.float64)
        elif name == "model.embed_tokens.weight":
            t = torch.randn(shape, generator=gen, dtype=torch.float64)
        elif name == "model.embed_positions.weight":
            t = 0.3 * torch.randn(shape, generator=gen, dtype=torch.float64)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(shape[1])
        weights[name] = t.to(PRECISIONS[precision][0])
    return ModelBundle(
        config=config,
        weights=weights,
        tokenizer=ToyTokenizer(config.vocab_size),
        chat_template_id=chat_template_id,
        precision=precision,
        source=f"toy:seed={seed}",
    )


def save_model(bundle: ModelBundle, path: str | Path) -> Path:
    """Write ``config.json`` and ``model.safetensors`` in the toy sidecar format."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_type": "toy",
        "valence_config": bundle.config.to_dict(),
        "tokenizer": "toy" if isinstance(bundle.tokenizer, ToyTokenizer) else "tokenizer.json",
        "chat_template": bundle.chat_template_id,
    }
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    tensors = {k: v.detach().cpu().contiguous() for k, v in sorted(bundle.weights.items())}
    save_file(tensors, str(path / "model.safetensors"), metadata={"format": "pt"})
    return path


def _config_from_hf(raw: dict, family: str) -> ModelConfig:
    act = raw.get("hidden_act", "silu")
    if act != "silu":
        raise ModelError(f"unsupported architecture feature: hidden_act={act!r}")
    if raw.get("mlp_bias"):
        raise ModelError("unsupported architecture feature: mlp_bias")
    if family == "llama" and raw.get("attention_bias"):
        raise ModelError("unsupported architecture feature: attention_bias")
    if raw.get("use_sliding_window"):
        raise ModelError("unsupported architecture feature: use_sliding_window")
    # newer configs fold theta and scaling into one "rope_parameters" block
    rope = dict(raw.get("rope_parameters") or {})
    theta = float(rope.pop("rope_theta", raw.get("rope_theta", 10000.0)))
    scaling = raw.get("rope_scaling") or (rope if rope.get("rope_type", "default") != "default" else None)
    n_heads = raw["num_attention_heads"]
    d_model = raw["hidden_size"]
    if raw.get("head_dim") not in (None, d_model // n_heads):
        raise ModelError("unsupported architecture feature: head_dim != hidden_size / num_attention_heads")
    return ModelConfig(
        n_layers=raw["num_hidden_layers"],
        d_model=d_model,
        n_heads=n_heads,
        n_kv_heads=raw.get("num_key_value_heads") or n_heads,
        d_mlp=raw["intermediate_size"],
        vocab_size=raw["vocab_size"],
        position_encoding="rotary",
        norm_kind="rmsnorm",
        mlp_kind="gated_silu",
        max_seq_len=raw.get("max_position_embeddings", 4096),
        norm_eps=raw.get("rms_norm_eps", 1e-6),
        rope_theta=theta,
        rope_scaling=scaling,
        attn_bias=family == "qwen2",
        tie_embeddings=bool(raw.get("tie_word_embeddings", False)),
        family=family,
    )


def _weight_files(path: Path) -> list[Path]:
    index = path / "model.safetensors.index.json"
    if index.exists():
        shards = sorted(set(json.loads(index.read_text())["weight_map"].values()))
        return [path / s for s in shards]
    single = path / "model.safetensors"
    if single.exists():
        return [single]
    raise ModelError(f"no safetensors weight file in {path}")


def load_model(
    path: str | Path,
    family_hint: str | None = None,
    precision: str = "float32",
    device: str = "cpu",
) -> ModelBundle:
    """Load a toy, Llama or Qwen2 checkpoint directory and validate every tensor."""
    path = Path(path)
    if precision not in PRECISIONS:
        raise ModelError(f"unknown precision mode {precision!r}")
    cfg_file = path / "config.json"
    if not cfg_file.is_file():
        raise ModelError(f"missing config descriptor {cfg_file}")
    try:
        raw = json.loads(cfg_file.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"unreadable config descriptor {cfg_file}: {exc}") from exc
    family = raw.get("model_type")
    if family_hint is not None and family_hint != family:
        raise ModelError(f"family hint {family_hint!r} does not match model_type {family!r}")
    if family == "toy":
        config = ModelConfig(**raw["valence_config"])
        template = raw.get("chat_template", "chatml")
    elif family in ("llama", "qwen2"):
        config = _config_from_hf(raw, family)
        template = FAMILY_TEMPLATES[family]
    else:
        raise ModelError(f"unsupported architecture: model_type={family!r}")

    if family == "toy" and raw.get("tokenizer", "toy") == "toy":
        tokenizer = ToyTokenizer(config.vocab_size)
    else:
        tokenizer = HFTokenizer.from_dir(path)

    storage = PRECISIONS[precision][0]
    wanted = expected_shapes(config)
    weights: dict[str, torch.Tensor] = {}
    for f in _weight_files(path):
        try:
            with safe_open(str(f), framework="pt") as fh:
                for name in fh.keys():
                    if name in wanted:
                        weights[name] = fh.get_tensor(name).to(device=device, dtype=storage)
        except (OSError, RuntimeError, ValueError, SafetensorError) as exc:
            raise ModelError(f"cannot read weight file {f}: {exc}") from exc
    bundle = ModelBundle(
        config=config,
        weights=weights,
        tokenizer=tokenizer,
        chat_template_id=template,
        precision=precision,
        device=device,
        source=str(path),
    )
    log.info("loaded %s model from %s (%d layers)", family, path, config.n_layers)
    return bundle
