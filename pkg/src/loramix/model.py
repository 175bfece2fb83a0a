"""Byte-level toy causal LM with frozen base weights and adapted FFNs.

Architecture: token + positional embeddings, then pre-norm blocks of
causal self-attention and a feed-forward layer, a final norm and an
unembedding projection. Every base tensor is write-protected after
construction; the only way the model changes is through the adapter
factors and router weights inside its FFN layers.

The backward pass is written by hand. It propagates activation gradients
through the whole stack but accumulates parameter gradients only for the
trainable adapter tensors, which keeps the update surface identical to
the documented training contract and lets finite differences audit every
trainable scalar.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import seeding
from .adapter import MixtureFfn, build_mixture
from .baseline import SingleLoraFfn, build_single_lora
from .errors import ConfigError, ShapeError
from .numerics import softmax_rows

Array = np.ndarray

VOCAB_BYTES = 256
NEWLINE = 10  # byte value used as the decode stop symbol


def encode_text(text: str) -> list[int]:
    """UTF-8 bytes of the text as token ids in [0, 256)."""
    return list(text.encode("utf-8"))


def decode_tokens(tokens: list[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


@dataclass
class ToyModelConfig:
    vocab_size: int = VOCAB_BYTES
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                     "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass(frozen=True)
class AdapterSpec:
    """Routed expert mixture on every FFN."""

    n_experts: int = 8
    top_k: int = 2
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.n_experts < 1 or self.rank < 1:
            raise ConfigError("n_experts and rank must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k={self.top_k} must lie in [1, {self.n_experts}]"
            )


@dataclass(frozen=True)
class SingleLoraSpec:
    """One plain low-rank adapter on every FFN (comparison baseline)."""

    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")


class FrozenFfn:
    """Undecorated frozen FFN; same arithmetic as the adapted layers at init."""

    def __init__(self, w1: Array, w2: Array):
        w1 = np.array(w1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        w1.setflags(write=False)
        w2.setflags(write=False)
        self.w1 = w1
        self.w2 = w2

    def forward_rows(self, x_rows: Array) -> tuple[Array, dict]:
        hidden = x_rows @ self.w1.T
        act = hidden / (1.0 + np.exp(-hidden))
        return act @ self.w2.T, {"x": x_rows, "hidden": hidden}

    def backward_rows(self, cache: dict, upstream_rows: Array
                      ) -> tuple[Array, dict[str, Array]]:
        hidden = cache["hidden"]
        sig = 1.0 / (1.0 + np.exp(-hidden))
        d_act = upstream_rows @ self.w2
        d_hidden = d_act * (sig * (1.0 + hidden * (1.0 - sig)))
        return d_hidden @ self.w1, {}

    def trainable(self) -> dict[str, Array]:
        return {}

    def apply_updates(self, updates: dict[str, Array]) -> None:
        if updates:
            raise ShapeError("frozen FFN has no trainable tensors")


def _rms_forward(x: Array, gain: Array, eps: float = 1e-6
                 ) -> tuple[Array, Array]:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * gain, rms


def _rms_backward(x: Array, gain: Array, rms: Array, d_out: Array) -> Array:
    # y_i = g_i x_i / r with r = sqrt(mean(x^2) + eps)
    gd = d_out * gain
    inner = np.sum(gd * x, axis=-1, keepdims=True)
    d = x.shape[-1]
    return gd / rms - x * inner / (d * rms**3)


class Block:
    def __init__(self, g_attn: Array, wq: Array, wk: Array, wv: Array,
                 wo: Array, g_ffn: Array, ffn):
        for arr in (g_attn, wq, wk, wv, wo, g_ffn):
            arr.setflags(write=False)
        self.g_attn = g_attn
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.g_ffn = g_ffn
        self.ffn = ffn


class ToyCausalLm:
    """Small frozen transformer whose FFN layers carry the trainable adapters."""

    def __init__(self, cfg: ToyModelConfig,
                 adapters: AdapterSpec | SingleLoraSpec | None = AdapterSpec(),
                 base_weights: dict[str, Array] | None = None):
        self.cfg = cfg
        self.adapters = adapters
        base = base_weights if base_weights is not None else _derive_base(cfg)
        self.wte = _frozen(base["wte"], (cfg.vocab_size, cfg.d_model))
        self.wpe = _frozen(base["wpe"], (cfg.max_seq_len, cfg.d_model))
        self.g_final = _frozen(base["final.gain"], (cfg.d_model,))
        self.w_unembed = _frozen(base["unembed.w"], (cfg.vocab_size, cfg.d_model))
        self.blocks: list[Block] = []
        for layer in range(cfg.n_layers):
            p = f"block{layer}."
            w1 = base[p + "ffn.w1"]
            w2 = base[p + "ffn.w2"]
            if adapters is None:
                ffn = FrozenFfn(w1, w2)
            elif isinstance(adapters, SingleLoraSpec):
                ffn = build_single_lora(cfg.d_model, cfg.d_ff, w1, w2,
                                        adapters.rank, adapters.alpha,
                                        cfg.seed, layer)
            else:
                ffn = build_mixture(cfg.d_model, cfg.d_ff, w1, w2,
                                    adapters.n_experts, adapters.top_k,
                                    adapters.rank, adapters.alpha,
                                    cfg.seed, layer)
            self.blocks.append(Block(
                g_attn=_frozen(base[p + "attn.gain"], (cfg.d_model,)),
                wq=_frozen(base[p + "attn.wq"], (cfg.d_model, cfg.d_model)),
                wk=_frozen(base[p + "attn.wk"], (cfg.d_model, cfg.d_model)),
                wv=_frozen(base[p + "attn.wv"], (cfg.d_model, cfg.d_model)),
                wo=_frozen(base[p + "attn.wo"], (cfg.d_model, cfg.d_model)),
                g_ffn=_frozen(base[p + "ffn.gain"], (cfg.d_model,)),
                ffn=ffn,
            ))

    # -- base weight bookkeeping ---------------------------------------------

    def base_arrays(self) -> dict[str, Array]:
        out = {"wte": self.wte, "wpe": self.wpe, "final.gain": self.g_final,
               "unembed.w": self.w_unembed}
        for layer, b in enumerate(self.blocks):
            p = f"block{layer}."
            out[p + "attn.gain"] = b.g_attn
            out[p + "attn.wq"] = b.wq
            out[p + "attn.wk"] = b.wk
            out[p + "attn.wv"] = b.wv
            out[p + "attn.wo"] = b.wo
            out[p + "ffn.gain"] = b.g_ffn
            out[p + "ffn.w1"] = b.ffn.w1
            out[p + "ffn.w2"] = b.ffn.w2
        return out

    def base_weight_sha256(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base_arrays()):
            arr = self.base_arrays()[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def trainable_params(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer, b in enumerate(self.blocks):
            for name, arr in b.ffn.trainable().items():
                out[f"block{layer}.{name}"] = arr
        return out

    def apply_updates(self, updates: dict[str, Array]) -> None:
        per_layer: dict[int, dict[str, Array]] = {}
        for name, value in updates.items():
            prefix, rest = name.split(".", 1)
            layer = int(prefix.removeprefix("block"))
            per_layer.setdefault(layer, {})[rest] = value
        for layer, sub in per_layer.items():
            self.blocks[layer].ffn.apply_updates(sub)

    # -- forward / backward ---------------------------------------------------

    def _check_tokens(self, tokens: list[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("token sequence must be a non-empty 1-D list")
        if arr.size > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {arr.size} exceeds max_seq_len "
                f"{self.cfg.max_seq_len}"
            )
        if arr.min() < 0 or arr.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range for vocab "
                             f"{self.cfg.vocab_size}")
        return arr

    def forward(self, tokens: list[int], with_cache: bool = False):
        """Logits (seq_len, vocab) for one sequence; optionally keep caches."""
        ids = self._check_tokens(tokens)
        t = ids.size
        d = self.cfg.d_model
        n_heads = self.cfg.n_heads
        dh = d // n_heads
        inv_sqrt = 1.0 / np.sqrt(dh)
        mask = np.triu(np.full((t, t), -np.inf), k=1)

        x = self.wte[ids] + self.wpe[:t]
        caches = []
        for b in self.blocks:
            a, r1 = _rms_forward(x, b.g_attn)
            q_all = a @ b.wq.T
            k_all = a @ b.wk.T
            v_all = a @ b.wv.T
            heads = []
            o = np.empty_like(a)
            for h in range(n_heads):
                sl = slice(h * dh, (h + 1) * dh)
                scores = q_all[:, sl] @ k_all[:, sl].T * inv_sqrt + mask
                probs = softmax_rows(scores)
                o[:, sl] = probs @ v_all[:, sl]
                heads.append(probs)
            x_attn = x + o @ b.wo.T
            ff_in, r2 = _rms_forward(x_attn, b.g_ffn)
            ff_out, ff_cache = b.ffn.forward_rows(ff_in)
            x_next = x_attn + ff_out
            if with_cache:
                caches.append({
                    "x": x, "a": a, "r1": r1, "q": q_all, "k": k_all,
                    "v": v_all, "heads": heads, "x_attn": x_attn,
                    "ff_in": ff_in, "r2": r2, "ff_cache": ff_cache,
                })
            x = x_next
        x_final, r_final = _rms_forward(x, self.g_final)
        logits = x_final @ self.w_unembed.T
        if with_cache:
            return logits, {"ids": ids, "blocks": caches, "x_last": x,
                            "r_final": r_final, "inv_sqrt": inv_sqrt}
        return logits

    def backward(self, cache: dict, d_logits: Array) -> dict[str, Array]:
        """Adapter-parameter gradients given the loss gradient at the logits."""
        n_heads = self.cfg.n_heads
        dh = self.cfg.d_model // n_heads
        inv_sqrt = cache["inv_sqrt"]

        d_x_final = d_logits @ self.w_unembed
        d_x = _rms_backward(cache["x_last"], self.g_final, cache["r_final"],
                            d_x_final)
        grads: dict[str, Array] = {}
        for layer in reversed(range(len(self.blocks))):
            b = self.blocks[layer]
            c = cache["blocks"][layer]
            d_ff_in, ffn_grads = b.ffn.backward_rows(c["ff_cache"], d_x)
            for name, g in ffn_grads.items():
                grads[f"block{layer}.{name}"] = g
            d_x_attn = d_x + _rms_backward(c["x_attn"], b.g_ffn, c["r2"],
                                           d_ff_in)
            d_o = d_x_attn @ b.wo
            d_q = np.empty_like(c["q"])
            d_k = np.empty_like(c["k"])
            d_v = np.empty_like(c["v"])
            for h in range(n_heads):
                sl = slice(h * dh, (h + 1) * dh)
                probs = c["heads"][h]
                d_probs = d_o[:, sl] @ c["v"][:, sl].T
                d_v[:, sl] = probs.T @ d_o[:, sl]
                d_scores = probs * (d_probs
                                    - np.sum(d_probs * probs, axis=-1,
                                             keepdims=True))
                d_q[:, sl] = d_scores @ c["k"][:, sl] * inv_sqrt
                d_k[:, sl] = d_scores.T @ c["q"][:, sl] * inv_sqrt
            d_a = d_q @ b.wq + d_k @ b.wk + d_v @ b.wv
            d_x = d_x_attn + _rms_backward(c["x"], b.g_attn, c["r1"], d_a)
        return grads

    # -- decoding -------------------------------------------------------------

    def generate(self, prompt_tokens: list[int], max_new_tokens: int = 48,
                 stop_token: int | None = NEWLINE) -> list[int]:
        """Greedy continuation; stops at the stop token or the budget.

        If the prompt is longer than the context window leaves room for,
        only its trailing window is kept.
        """
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        window = self.cfg.max_seq_len
        tokens = list(prompt_tokens)
        out: list[int] = []
        for _ in range(max_new_tokens):
            ctx = tokens[-window:]
            logits = self.forward(ctx)
            nxt = int(np.argmax(logits[-1]))
            if stop_token is not None and nxt == stop_token:
                break
            out.append(nxt)
            tokens.append(nxt)
        return out

    def generate_text(self, prompt: str, max_new_tokens: int = 48) -> str:
        """Greedy byte decoding from a text prompt, stopping at newline."""
        return decode_tokens(self.generate(encode_text(prompt),
                                           max_new_tokens=max_new_tokens))


def _frozen(arr: Array, shape: tuple[int, ...]) -> Array:
    arr = np.array(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"base weight has shape {arr.shape}, expected {shape}")
    arr.setflags(write=False)
    return arr


def _derive_base(cfg: ToyModelConfig) -> dict[str, Array]:
    d = cfg.d_model
    base: dict[str, Array] = {}
    base["wte"] = seeding.rng_for(cfg.seed, seeding.EMBEDDING).normal(
        0.0, 0.1, size=(cfg.vocab_size, d))
    base["wpe"] = seeding.rng_for(cfg.seed, seeding.POSITIONAL).normal(
        0.0, 0.1, size=(cfg.max_seq_len, d))
    for layer in range(cfg.n_layers):
        p = f"block{layer}."
        attn_std = 1.0 / np.sqrt(d)
        for idx, name in enumerate(("wq", "wk", "wv", "wo")):
            rng = seeding.rng_for(cfg.seed, seeding.ATTENTION, layer, idx)
            base[p + "attn." + name] = rng.normal(0.0, attn_std, size=(d, d))
        base[p + "attn.gain"] = np.ones(d)
        base[p + "ffn.gain"] = np.ones(d)
        base[p + "ffn.w1"] = seeding.rng_for(
            cfg.seed, seeding.FFN_BASE, layer, 0).normal(
            0.0, attn_std, size=(cfg.d_ff, d))
        base[p + "ffn.w2"] = seeding.rng_for(
            cfg.seed, seeding.FFN_BASE, layer, 1).normal(
            0.0, 1.0 / np.sqrt(cfg.d_ff), size=(d, cfg.d_ff))
    base["final.gain"] = np.ones(d)
    base["unembed.w"] = seeding.rng_for(cfg.seed, seeding.UNEMBED).normal(
        0.0, 1.0 / np.sqrt(d), size=(cfg.vocab_size, d))
    return base


def build_frozen_model(cfg: ToyModelConfig,
                       adapters: AdapterSpec | SingleLoraSpec | None = AdapterSpec()
                       ) -> ToyCausalLm:
    """Seed-deterministic frozen model with adapters attached to every FFN."""
    return ToyCausalLm(cfg, adapters=adapters)
