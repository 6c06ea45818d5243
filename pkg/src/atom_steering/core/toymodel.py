"""
Toy decoder-only transformer with residual-stream access.

A pre-LN transformer with learned positional embeddings and a weight-tied
unembedding, trained from scratch on synthetic corpora. Every forward pass
returns a ForwardTrace holding the post-block residual stream of each layer,
per-head attention weights, and logits. Steering is injected explicitly in
the block loop, so a shared model can serve concurrent steered and unsteered
passes without module-level hook state.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import structlog
import torch
from torch import nn

from atom_steering.config import EOS, PAD, ToyModelConfig
from atom_steering.core.numerics import DTYPE, layer_norm, matmul, softmax
from atom_steering.errors import DimensionError, InputError, ParameterError

logger = structlog.get_logger()

INIT_STD = 0.02


# =============================================================================
# Types
# =============================================================================


@dataclass(frozen=True)
class SteerHook:
    """Add ``multiplier * vector`` to every position's residual state after ``layer``."""

    layer: int
    vector: torch.Tensor
    multiplier: float = 1.0


@dataclass
class ForwardTrace:
    """Everything one forward pass exposes."""

    hidden: list[torch.Tensor]  # per layer, [T, d_model], post-block (post-injection)
    attention: list[torch.Tensor]  # per layer, [n_heads, T, T]
    logits: torch.Tensor  # [T, vocab_size]

    @property
    def n_tokens(self) -> int:
        return int(self.logits.shape[0])


@dataclass
class TrainingReport:
    """Loss trajectory of a training run."""

    losses: list[float] = field(default_factory=list)
    steps: int = 0
    lr: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "losses": self.losses,
        }


# =============================================================================
# Modules
# =============================================================================


def _gaussian(shape: tuple[int, ...], generator: torch.Generator) -> nn.Parameter:
    return nn.Parameter(torch.randn(shape, generator=generator, dtype=DTYPE) * INIT_STD)


def _ones(n: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(n, dtype=DTYPE))


def _zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(shape, dtype=DTYPE))


class Block(nn.Module):
    """Pre-LN attention + MLP block."""

    def __init__(self, config: ToyModelConfig, generator: torch.Generator):
        super().__init__()
        d, m = config.d_model, config.mlp_width
        self.n_heads = config.n_heads
        self.eps = config.ln_eps
        self.ln1_g, self.ln1_b = _ones(d), _zeros(d)
        self.w_qkv = _gaussian((d, 3 * d), generator)
        self.b_qkv = _zeros(3 * d)
        self.w_o = _gaussian((d, d), generator)
        self.b_o = _zeros(d)
        self.ln2_g, self.ln2_b = _ones(d), _zeros(d)
        self.w_in = _gaussian((d, m), generator)
        self.b_in = _zeros(m)
        self.w_out = _gaussian((m, d), generator)
        self.b_out = _zeros(d)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: [B, T, d] -> (x', attention [B, H, T, T])."""
        b, t, d = x.shape
        hd = d // self.n_heads

        qkv = matmul(layer_norm(x, self.ln1_g, self.ln1_b, self.eps), self.w_qkv) + self.b_qkv
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(b, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hd).transpose(1, 2)

        scores = (q @ k.transpose(-2, -1)) / (hd**0.5)
        causal = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = softmax(scores)

        mixed = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + matmul(mixed, self.w_o) + self.b_o

        h = matmul(layer_norm(x, self.ln2_g, self.ln2_b, self.eps), self.w_in) + self.b_in
        x = x + matmul(torch.nn.functional.gelu(h), self.w_out) + self.b_out
        return x, attn


class ToyTransformer(nn.Module):
    """Decoder-only transformer over a synthetic integer vocabulary."""

    def __init__(self, config: ToyModelConfig):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        self.tok_embed = _gaussian((config.vocab_size, config.d_model), generator)
        self.pos_embed = _gaussian((config.max_seq, config.d_model), generator)
        self.blocks = nn.ModuleList(Block(config, generator) for _ in range(config.n_layers))
        self.lnf_g, self.lnf_b = _ones(config.d_model), _zeros(config.d_model)

    def forward(
        self,
        tokens: torch.Tensor,
        hook: SteerHook | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
        """tokens: [B, T] -> (logits [B, T, V], hidden per layer, attention per layer)."""
        t = tokens.shape[1]
        x = self.tok_embed[tokens] + self.pos_embed[:t]
        hidden: list[torch.Tensor] = []
        attention: list[torch.Tensor] = []
        for index, block in enumerate(self.blocks):
            x, attn = block(x)
            if hook is not None and hook.layer == index:
                x = x + hook.multiplier * hook.vector
            hidden.append(x)
            attention.append(attn)
        x = layer_norm(x, self.lnf_g, self.lnf_b, self.config.ln_eps)
        logits = matmul(x, self.tok_embed.T)
        return logits, hidden, attention


# =============================================================================
# Operations
# =============================================================================


def init_model(config: ToyModelConfig) -> ToyTransformer:
    """
    Build a model with seeded Gaussian weights (std 0.02).

    Layer-norm gains start at one and biases at zero. The same config
    (seed included) always yields bit-identical weights.
    """
    model = ToyTransformer(config)
    model.eval()
    logger.debug(
        "model_initialized",
        seed=config.seed,
        n_params=sum(p.numel() for p in model.parameters()),
    )
    return model


def weight_checksum(model: ToyTransformer) -> str:
    """SHA-256 over the raw bytes of every parameter, in registration order."""
    hasher = hashlib.sha256()
    for name, param in model.named_parameters():
        hasher.update(name.encode())
        hasher.update(param.detach().contiguous().numpy().tobytes())
    return hasher.hexdigest()


def validate_tokens(model: ToyTransformer, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """
    Check a single token sequence against the model and return it as a LongTensor.

    Raises:
        InputError: If the sequence is empty, overlong, or out of vocabulary
    """
    ids = torch.as_tensor(tokens, dtype=torch.long).reshape(-1)
    n = ids.numel()
    if n < 1:
        raise InputError("Token sequence is empty")
    if n > model.config.max_seq:
        raise InputError(
            f"Sequence of {n} tokens exceeds max_seq {model.config.max_seq}",
            length=n,
            max_seq=model.config.max_seq,
        )
    if int(ids.min()) < 0 or int(ids.max()) >= model.config.vocab_size:
        raise InputError(
            f"Token ids must lie in [0, {model.config.vocab_size})",
            min_id=int(ids.min()),
            max_id=int(ids.max()),
        )
    return ids


def validate_hook(model: ToyTransformer, hook: SteerHook) -> None:
    """
    Check a steering hook against the model.

    Raises:
        ParameterError: If the layer is out of range
        DimensionError: If the vector length differs from d_model
    """
    if not 0 <= hook.layer < model.config.n_layers:
        raise ParameterError(
            "layer", f"{hook.layer} out of range for {model.config.n_layers} layers"
        )
    if tuple(hook.vector.shape) != (model.config.d_model,):
        raise DimensionError("steer_hook", tuple(hook.vector.shape), (model.config.d_model,))


@torch.no_grad()
def forward(model: ToyTransformer, tokens: Sequence[int] | torch.Tensor) -> ForwardTrace:
    """Run one sequence and return its trace."""
    ids = validate_tokens(model, tokens)
    logits, hidden, attention = model(ids.unsqueeze(0))
    return ForwardTrace(
        hidden=[h[0] for h in hidden],
        attention=[a[0] for a in attention],
        logits=logits[0],
    )


@torch.no_grad()
def forward_steered(
    model: ToyTransformer,
    tokens: Sequence[int] | torch.Tensor,
    hook: SteerHook,
) -> ForwardTrace:
    """Run one sequence with ``h + multiplier * vector`` injected after ``hook.layer``."""
    ids = validate_tokens(model, tokens)
    validate_hook(model, hook)
    vector = hook.vector.to(DTYPE)
    logits, hidden, attention = model(
        ids.unsqueeze(0), SteerHook(hook.layer, vector, float(hook.multiplier))
    )
    return ForwardTrace(
        hidden=[h[0] for h in hidden],
        attention=[a[0] for a in attention],
        logits=logits[0],
    )


def run(
    model: ToyTransformer,
    tokens: Sequence[int] | torch.Tensor,
    hook: SteerHook | None = None,
) -> ForwardTrace:
    """Dispatch to forward or forward_steered."""
    if hook is None:
        return forward(model, tokens)
    return forward_steered(model, tokens, hook)


def _pad_batch(sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(s) for s in sequences)
    batch = torch.full((len(sequences), width), PAD, dtype=torch.long)
    for row, seq in enumerate(sequences):
        batch[row, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return batch


def _lm_loss(model: ToyTransformer, batch: torch.Tensor) -> torch.Tensor:
    logits, _, _ = model(batch[:, :-1])
    targets = batch[:, 1:]
    return torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=PAD,
    )


def train_toy(
    model: ToyTransformer,
    corpus: Sequence[Sequence[int]],
    steps: int,
    lr: float,
    weight_decay: float = 0.0,
    log_every: int = 50,
) -> TrainingReport:
    """
    Next-token training on ground-truth prefixes, full batch, Adam.

    The whole corpus is one batch in its given order, so the run is fully
    determined by the initial weights and the corpus. PAD targets are ignored.

    Raises:
        InputError: If the corpus is empty or has no trainable targets
        ParameterError: If steps < 1 or lr < 0
    """
    if not corpus:
        raise InputError("Training corpus is empty")
    if steps < 1:
        raise ParameterError("steps", f"must be >= 1, got {steps}")
    if lr < 0:
        raise ParameterError("lr", f"must be >= 0, got {lr}")
    for seq in corpus:
        validate_tokens(model, seq)
    if all(len(seq) < 2 for seq in corpus):
        raise InputError("Training corpus has no next-token targets")

    batch = _pad_batch(corpus)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    report = TrainingReport(steps=steps, lr=lr)

    model.train()
    for step in range(steps):
        optimizer.zero_grad(set_to_none=True)
        loss = _lm_loss(model, batch)
        loss.backward()
        optimizer.step()
        report.losses.append(float(loss.detach()))
        if step % log_every == 0 or step == steps - 1:
            logger.info("toy_train_step", step=step, loss=round(report.losses[-1], 6))
    model.eval()
    return report


def attention_to_span(trace: ForwardTrace, span: range | tuple[int, int]) -> list[float]:
    """
    Per-layer attention mass on a token span.

    For each layer: mean over heads and over query positions after the span
    of the total attention weight the query assigns to span positions. When
    the span reaches the end of the sequence the final position is the query.

    Raises:
        ParameterError: If the span is empty or outside the sequence
    """
    start, stop = (span.start, span.stop) if isinstance(span, range) else span
    if stop <= start:
        raise ParameterError("span", f"empty span [{start}, {stop})")
    n = trace.n_tokens
    if start < 0 or stop > n:
        raise ParameterError("span", f"[{start}, {stop}) outside sequence of {n} tokens")
    queries = slice(stop, n) if stop < n else slice(n - 1, n)
    scores = []
    for attn in trace.attention:
        mass = attn[:, queries, start:stop].sum(dim=-1)
        scores.append(float(mass.mean()))
    return scores


@torch.no_grad()
def generate(
    model: ToyTransformer,
    prompt: Sequence[int],
    max_new: int,
    temperature: float = 0.0,
    hook: SteerHook | None = None,
    seed: int = 0,
) -> list[int]:
    """
    Autoregressive generation; greedy when temperature is 0.

    Stops at EOS (not included in the result), after ``max_new`` tokens, or
    when the context reaches ``max_seq``. The hook, when given, is applied at
    every step to every position.

    Raises:
        ParameterError: If max_new < 1 or temperature < 0
        InputError: If the prompt is invalid
    """
    if max_new < 1:
        raise ParameterError("max_new", f"must be >= 1, got {max_new}")
    if temperature < 0:
        raise ParameterError("temperature", f"must be >= 0, got {temperature}")
    context = validate_tokens(model, prompt).tolist()
    if hook is not None:
        validate_hook(model, hook)
    generator = torch.Generator().manual_seed(seed)

    produced: list[int] = []
    while len(produced) < max_new and len(context) < model.config.max_seq:
        logits = run(model, context, hook).logits[-1]
        if temperature == 0:
            token = int(torch.argmax(logits))
        else:
            probs = softmax(logits, temperature)
            token = int(torch.multinomial(probs, 1, generator=generator))
        if token == EOS:
            break
        produced.append(token)
        context.append(token)
    return produced


@torch.no_grad()
def residual_activations(
    model: ToyTransformer,
    sequences: Sequence[Sequence[int]],
    layer: int,
    batch_size: int = 256,
) -> torch.Tensor:
    """
    Residual states at ``layer`` for every real (non-padding) token, ``[N, d_model]``.

    Rows follow sequence order then position order.

    Raises:
        InputError: If there are no sequences or one is invalid
        ParameterError: If the layer does not exist
    """
    if not sequences:
        raise InputError("No sequences to collect activations from")
    if not 0 <= layer < model.config.n_layers:
        raise ParameterError("layer", f"{layer} out of range for {model.config.n_layers} layers")
    for seq in sequences:
        validate_tokens(model, seq)
    rows = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        _, hidden, _ = model(_pad_batch(chunk))
        for row, seq in enumerate(chunk):
            rows.append(hidden[layer][row, : len(seq)])
    return torch.cat(rows, dim=0)
