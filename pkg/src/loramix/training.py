"""Adapter training on the frozen toy LM: loss, loop, audit, checkpoints.

The loss is next-token cross-entropy restricted to answer tokens. A
training example is a (prompt, answer) text pair; the model sees
prompt + answer + newline and only positions whose target falls inside
answer + newline count toward the loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .errors import ConfigError, FormatError, StateError
from .model import (AdapterSpec, NEWLINE, SingleLoraSpec, ToyCausalLm,
                    ToyModelConfig, encode_text)
from .numerics import AdamState, adam_step

Array = np.ndarray

QA_PROMPT_TEMPLATE = "Q: {q}\nA: "

CHECKPOINT_MAGIC = b"LORAMIX-BASEW\x00\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainExample:
    prompt: str
    answer: str


def format_qa(question: str, answer: str) -> TrainExample:
    """Standard question/answer templating used by the training command."""
    return TrainExample(prompt=QA_PROMPT_TEMPLATE.format(q=question),
                        answer=answer)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 2
    n_experts: int = 8
    top_k: int = 2
    rank: int = 8
    alpha: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_experts < 1 or self.rank < 1:
            raise ConfigError("n_experts and rank must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k={self.top_k} must lie in [1, {self.n_experts}]"
            )

    def adapter_spec(self) -> AdapterSpec:
        return AdapterSpec(n_experts=self.n_experts, top_k=self.top_k,
                           rank=self.rank, alpha=self.alpha)


@dataclass
class TrainResult:
    loss_trace: list[float]
    steps: int


def encode_example(example: TrainExample, max_seq_len: int
                   ) -> tuple[list[int], np.ndarray]:
    """Token ids plus a boolean mask marking the answer span (incl. newline).

    Sequences longer than the context window keep only their trailing
    window, so the answer span always survives.
    """
    prompt_ids = encode_text(example.prompt)
    answer_ids = encode_text(example.answer) + [NEWLINE]
    ids = prompt_ids + answer_ids
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prompt_ids):] = True
    if len(ids) > max_seq_len:
        ids = ids[-max_seq_len:]
        mask = mask[-max_seq_len:]
    return ids, mask


def batch_loss(model: ToyCausalLm, batch: list[tuple[list[int], np.ndarray]]
               ) -> float:
    """Mean masked cross-entropy over the batch, forward only."""
    total_count = sum(int(mask[1:].sum()) for _, mask in batch)
    if total_count == 0:
        raise ValueError("batch contains no supervised positions")
    loss = 0.0
    for ids, mask in batch:
        logits = model.forward(ids)
        t = len(ids)
        targets = np.asarray(ids[1:], dtype=np.int64)
        counted = mask[1:]
        shifted = logits[:-1] - logits[:-1].max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1))
        log_probs = shifted[np.arange(t - 1), targets] - log_z
        loss += -float(np.sum(log_probs[counted])) / total_count
    return loss


def loss_and_grads(model: ToyCausalLm, batch: list[tuple[list[int], np.ndarray]]
                   ) -> tuple[float, dict[str, Array]]:
    """Mean masked cross-entropy over the batch plus adapter gradients.

    Positions are counted once across the whole batch, so the gradient is
    the exact gradient of the returned scalar.
    """
    total_count = sum(int(mask[1:].sum()) for _, mask in batch)
    if total_count == 0:
        raise ValueError("batch contains no supervised positions")
    inv = 1.0 / total_count
    loss = 0.0
    grads: dict[str, Array] = {}
    for ids, mask in batch:
        logits, cache = model.forward(ids, with_cache=True)
        t = len(ids)
        targets = np.asarray(ids[1:], dtype=np.int64)
        counted = mask[1:]
        shifted = logits[:-1] - logits[:-1].max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1))
        log_probs = shifted[np.arange(t - 1), targets] - log_z
        loss += -float(np.sum(log_probs[counted])) * inv

        probs = np.exp(shifted) / np.sum(np.exp(shifted), axis=1, keepdims=True)
        d_logits = np.zeros_like(logits)
        sel = probs[counted]
        sel[np.arange(sel.shape[0]), targets[counted]] -= 1.0
        d_logits[:-1][counted] = sel * inv
        seq_grads = model.backward(cache, d_logits)
        for name, g in seq_grads.items():
            if name in grads:
                grads[name] += g
            else:
                grads[name] = g
    return loss, grads


def train(model: ToyCausalLm, examples: list[TrainExample], cfg: TrainConfig
          ) -> TrainResult:
    """Seeded mini-batch Adam over the adapter parameters.

    Each epoch visits a fresh seeded permutation of the examples in
    contiguous batches (the trailing partial batch included). Zero epochs
    mean zero steps and untouched parameters.
    """
    if not examples:
        raise ValueError("training set must be non-empty")
    encoded = [encode_example(ex, model.cfg.max_seq_len) for ex in examples]
    params = model.trainable_params()
    states = {name: AdamState.for_param(arr, lr=cfg.lr)
              for name, arr in params.items()}
    trace: list[float] = []
    n = len(encoded)
    for epoch in range(cfg.epochs):
        perm = seeding.rng_for(cfg.seed, seeding.SHUFFLE, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [encoded[i] for i in perm[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(model, batch)
            updates = {}
            for name, arr in model.trainable_params().items():
                g = grads.get(name)
                if g is None:
                    g = np.zeros_like(arr)
                updates[name] = adam_step(arr, g, states[name])
            model.apply_updates(updates)
            trace.append(loss)
    return TrainResult(loss_trace=trace, steps=len(trace))


# -- finite-difference audit --------------------------------------------------

MAX_CHECKABLE_PARAMS = 5000


def gradient_check(model: ToyCausalLm, example: TrainExample,
                   epsilon: float = 1e-5, jitter: float = 0.1,
                   denom_floor: float = 1e-4) -> float:
    """Max relative error of analytic vs central-difference loss gradients.

    Every trainable scalar is perturbed by +-epsilon. The model's
    trainable tensors are first jittered (seeded) away from the zero-up
    initialization so all gradient paths are live, and the gating margins
    are verified wide enough that the finite differences cannot flip an
    expert selection. Models with more than MAX_CHECKABLE_PARAMS
    trainable scalars are refused.

    The relative error divides by max(|analytic|, |numeric|, denom_floor),
    so for gradients below the floor this is a scaled absolute error.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    params = model.trainable_params()
    n_scalar = sum(arr.size for arr in params.values())
    if n_scalar > MAX_CHECKABLE_PARAMS:
        raise ConfigError(
            f"model has {n_scalar} trainable scalars; the exhaustive check "
            f"is limited to {MAX_CHECKABLE_PARAMS}"
        )
    if jitter > 0:
        rng = seeding.rng_for(model.cfg.seed, seeding.JITTER)
        model.apply_updates({
            name: arr + rng.uniform(-jitter, jitter, size=arr.shape)
            for name, arr in params.items()
        })
    batch = [encode_example(example, model.cfg.max_seq_len)]
    _assert_gating_margins(model, batch[0][0], epsilon)

    _, analytic = loss_and_grads(model, batch)

    def loss_at() -> float:
        return batch_loss(model, batch)

    worst = 0.0
    for name, arr in model.trainable_params().items():
        a_grad = analytic.get(name, np.zeros_like(arr))
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_at()
            flat[j] = orig - epsilon
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(a_grad.reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, rel)
    return worst


def _assert_gating_margins(model: ToyCausalLm, ids: list[int],
                           epsilon: float) -> None:
    """Refuse the audit when a top-k boundary sits too close to flip."""
    logits_margin = 50.0 * epsilon
    _, cache = model.forward(ids, with_cache=True)
    for block, layer_cache in zip(model.blocks, cache["blocks"]):
        ff_cache = layer_cache["ff_cache"]
        if "full" not in ff_cache:
            continue
        scores = np.sort(ff_cache["full"], axis=1)[:, ::-1]
        k = block.ffn.top_k
        if scores.shape[1] > k:
            margin = scores[:, k - 1] - scores[:, k]
            if float(margin.min()) < logits_margin:
                raise StateError(
                    "gating margin too small for a finite-difference audit; "
                    "use a different seed or sample"
                )


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory: str | Path, model: ToyCausalLm) -> None:
    """Write config JSON, adapter JSON and the base-weight array file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = model.adapters
    if isinstance(spec, AdapterSpec):
        kind = "mixture"
        spec_dict = {"n_experts": spec.n_experts, "top_k": spec.top_k,
                     "rank": spec.rank, "alpha": spec.alpha}
    elif spec is None:
        kind = "none"
        spec_dict = {}
    else:
        raise ConfigError("only mixture-adapted or undecorated models are "
                          "checkpointable")
    cfg_payload = {
        "model": {
            "vocab_size": model.cfg.vocab_size, "d_model": model.cfg.d_model,
            "n_layers": model.cfg.n_layers, "n_heads": model.cfg.n_heads,
            "d_ff": model.cfg.d_ff, "max_seq_len": model.cfg.max_seq_len,
            "seed": model.cfg.seed,
        },
        "adapter_kind": kind,
        "adapter": spec_dict,
    }
    (directory / "model_config.json").write_text(
        json.dumps(cfg_payload, sort_keys=True, indent=2) + "\n")
    adapters = []
    if kind == "mixture":
        adapters = [b.ffn.to_payload() for b in model.blocks]
    (directory / "adapters.json").write_text(
        json.dumps(adapters, sort_keys=True) + "\n")
    _write_base_weights(directory / "base_weights.bin", model.base_arrays())


def load_checkpoint(directory: str | Path) -> ToyCausalLm:
    directory = Path(directory)
    try:
        cfg_payload = json.loads((directory / "model_config.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable model config: {exc}") from exc
    cfg = ToyModelConfig(**cfg_payload["model"])
    kind = cfg_payload["adapter_kind"]
    if kind == "mixture":
        spec = AdapterSpec(**cfg_payload["adapter"])
    elif kind == "none":
        spec = None
    else:
        raise FormatError(f"unknown adapter kind {kind!r}")
    base = _read_base_weights(directory / "base_weights.bin")
    model = ToyCausalLm(cfg, adapters=spec, base_weights=base)
    if kind == "mixture":
        payloads = json.loads((directory / "adapters.json").read_text())
        if len(payloads) != len(model.blocks):
            raise FormatError("adapter payload count does not match layers")
        for block, payload in zip(model.blocks, payloads):
            block.ffn.load_payload(payload)
    return model


def _write_base_weights(path: Path, arrays: dict[str, Array]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        names = sorted(arrays)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def _read_base_weights(path: Path) -> dict[str, Array]:
    blob = Path(path).read_bytes()
    if blob[:16] != CHECKPOINT_MAGIC:
        raise FormatError("base-weight file has a bad magic header")
    if blob[16] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported base-weight version {blob[16]}")
    off = 17
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        ndim = blob[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape)
        off += size
        out[name] = arr.copy()
    return out


def write_loss_csv(path: str | Path, trace: list[float]) -> None:
    lines = ["step,loss"]
    lines += [f"{i},{loss!r}" for i, loss in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")
