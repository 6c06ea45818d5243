"""
Synthetic two-behavior corpora.

A behavior item is a question with a positive and a negative answer. Model
inputs are framed as ``BOS question SPACE answer``; evaluation prompts stop
after SPACE so the next-token distribution is the model's choice of answer
lexicon. The language-model corpus mixes behavior sequences (half positive,
half negative, plus a prompt-prefixed share that always answers positively)
with reasoning sequences whose answers are either long or short, drawn from
separate lexicons.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog

from atom_steering.config import BOS, EOS, PAD, SPACE, CorpusConfig
from atom_steering.errors import ConfigurationError, InputError, LexiconOverlapError

logger = structlog.get_logger()

Tokens = tuple[int, ...]


# =============================================================================
# Types
# =============================================================================


@dataclass(frozen=True)
class BehaviorItem:
    """One (question, positive answer, negative answer) triple."""

    question: Tokens
    pos: Tokens
    neg: Tokens

    def framed(self, answer: Sequence[int]) -> tuple[list[int], range]:
        """``BOS question SPACE answer`` and the positions of the answer tokens."""
        tokens = [BOS, *self.question, SPACE, *answer]
        start = len(self.question) + 2
        return tokens, range(start, start + len(answer))

    def to_dict(self) -> dict:
        return {"question": list(self.question), "pos": list(self.pos), "neg": list(self.neg)}

    @classmethod
    def from_dict(cls, data: dict) -> BehaviorItem:
        return cls(
            question=tuple(int(t) for t in data["question"]),
            pos=tuple(int(t) for t in data["pos"]),
            neg=tuple(int(t) for t in data["neg"]),
        )


@dataclass
class BehaviorCorpus:
    """Contrast triples for one behavior."""

    items: list[BehaviorItem]
    behavior_name: str = "behavior"

    def __len__(self) -> int:
        return len(self.items)

    def head(self, n: int) -> BehaviorCorpus:
        """The first ``n`` items as a new corpus."""
        return BehaviorCorpus(self.items[:n], self.behavior_name)

    def validate(self, max_seq: int, vocab_size: int | None = None) -> None:
        """
        Check the corpus can be run through a model.

        Raises:
            InputError: If the corpus is empty, an answer is empty, a framed
                sequence exceeds max_seq, or a token is out of vocabulary
        """
        if not self.items:
            raise InputError("Behavior corpus is empty", behavior=self.behavior_name)
        for index, item in enumerate(self.items):
            if not item.pos or not item.neg:
                raise InputError("Behavior item has an empty answer", item=index)
            for answer in (item.pos, item.neg):
                tokens, _ = item.framed(answer)
                if len(tokens) > max_seq:
                    raise InputError(
                        f"Item {index} frames to {len(tokens)} tokens, max_seq is {max_seq}",
                        item=index,
                    )
                if vocab_size is not None and max(tokens) >= vocab_size:
                    raise InputError(f"Item {index} uses a token outside the vocabulary", item=index)


@dataclass(frozen=True)
class BehaviorLexicon:
    """Token sets that mark the positive and the negative behavior."""

    positive_tokens: frozenset[int]
    negative_tokens: frozenset[int]

    def __post_init__(self) -> None:
        if not self.positive_tokens or not self.negative_tokens:
            raise InputError("Both lexicons must be non-empty")
        overlap = self.positive_tokens & self.negative_tokens
        if overlap:
            raise LexiconOverlapError(sorted(overlap))

    def check_vocab(self, vocab_size: int) -> None:
        """Raises ConfigurationError if a lexicon token is outside the vocabulary."""
        largest = max(self.positive_tokens | self.negative_tokens)
        smallest = min(self.positive_tokens | self.negative_tokens)
        if largest >= vocab_size or smallest < 0:
            raise ConfigurationError(
                f"Lexicon token {largest} outside vocabulary of {vocab_size}",
                vocab_size=vocab_size,
            )

    def to_dict(self) -> dict:
        return {
            "positive_tokens": sorted(self.positive_tokens),
            "negative_tokens": sorted(self.negative_tokens),
        }

    @classmethod
    def from_dict(cls, data: dict) -> BehaviorLexicon:
        return cls(
            positive_tokens=frozenset(int(t) for t in data["positive_tokens"]),
            negative_tokens=frozenset(int(t) for t in data["negative_tokens"]),
        )

    @classmethod
    def from_config(cls, config: CorpusConfig) -> BehaviorLexicon:
        return cls(
            positive_tokens=frozenset(range(*config.positive_tokens)),
            negative_tokens=frozenset(range(*config.negative_tokens)),
        )


@dataclass
class SyntheticData:
    """Everything the grammar produces for one seed."""

    corpus: BehaviorCorpus
    lexicon: BehaviorLexicon
    lm_sequences: list[list[int]]
    eval_prompts: list[list[int]]
    prompt: list[int]
    length_pair: BehaviorItem
    length_probes: list[list[int]] = field(default_factory=list)


# =============================================================================
# Grammar
# =============================================================================


class _Grammar:
    def __init__(self, config: CorpusConfig, seed: int):
        self.config = config
        self.rng = np.random.default_rng(seed)

    def draw(self, token_range: tuple[int, int], length_range: tuple[int, int]) -> Tokens:
        low, high = length_range
        n = int(self.rng.integers(low, high + 1))
        return tuple(int(t) for t in self.rng.integers(token_range[0], token_range[1], size=n))

    def question(self) -> Tokens:
        return self.draw(self.config.question_tokens, self.config.question_length)

    def reasoning_question(self) -> Tokens:
        return self.draw(self.config.reasoning_question_tokens, self.config.question_length)

    def item(self) -> BehaviorItem:
        return BehaviorItem(
            question=self.question(),
            pos=self.draw(self.config.positive_tokens, self.config.answer_length),
            neg=self.draw(self.config.negative_tokens, self.config.answer_length),
        )

    def reasoning(self, long: bool) -> Tokens:
        if long:
            return self.draw(self.config.long_tokens, self.config.long_length)
        return self.draw(self.config.short_tokens, self.config.short_length)

    def coin(self, p: float) -> bool:
        return bool(self.rng.random() < p)


def safety_prompt(config: CorpusConfig) -> list[int]:
    """The behavior's system prompt: every prompt token in order."""
    return list(range(*config.prompt_tokens))


def synthesize(config: CorpusConfig, seed: int) -> SyntheticData:
    """
    Generate the behavior corpus, lexicon, LM training sequences, evaluation
    prompts and the long/short reasoning pair. Deterministic given the seed.
    """
    grammar = _Grammar(config, seed)
    prompt = safety_prompt(config)
    corpus = BehaviorCorpus([grammar.item() for _ in range(config.n_items)], config.behavior_name)

    sequences: list[list[int]] = []
    for _ in range(config.n_train_sequences):
        if grammar.coin(config.reasoning_fraction):
            answer = grammar.reasoning(long=grammar.coin(0.5))
            sequences.append([BOS, *grammar.reasoning_question(), SPACE, *answer, EOS])
            continue
        item = grammar.item()
        if grammar.coin(config.prompt_fraction):
            sequences.append([BOS, *prompt, *item.question, SPACE, *item.pos, EOS])
        else:
            answer = item.pos if grammar.coin(0.5) else item.neg
            sequences.append([BOS, *item.question, SPACE, *answer, EOS])

    eval_prompts = [[BOS, *grammar.question(), SPACE] for _ in range(config.n_eval_prompts)]
    length_question = grammar.reasoning_question()
    length_pair = BehaviorItem(
        question=length_question,
        pos=grammar.reasoning(long=True),
        neg=grammar.reasoning(long=False),
    )
    length_probes = [[BOS, *grammar.reasoning_question(), SPACE] for _ in range(config.n_eval_prompts)]

    logger.info(
        "corpus_synthesized",
        seed=seed,
        n_items=len(corpus),
        n_sequences=len(sequences),
        n_eval_prompts=len(eval_prompts),
    )
    return SyntheticData(
        corpus=corpus,
        lexicon=BehaviorLexicon.from_config(config),
        lm_sequences=sequences,
        eval_prompts=eval_prompts,
        prompt=prompt,
        length_pair=length_pair,
        length_probes=length_probes,
    )


def demonstration_prefix(items: Iterable[BehaviorItem], positive: bool) -> list[int]:
    """Few-shot block ``q SPACE answer EOS`` per item, without the leading BOS."""
    tokens: list[int] = []
    for item in items:
        tokens.extend([*item.question, SPACE, *(item.pos if positive else item.neg), EOS])
    return tokens


# =============================================================================
# Serialization
# =============================================================================


def dumps_corpus(corpus: BehaviorCorpus) -> str:
    """JSONL, one triple per line."""
    return "".join(json.dumps(item.to_dict()) + "\n" for item in corpus.items)


def loads_corpus(text: str, behavior_name: str = "behavior") -> BehaviorCorpus:
    """
    Parse a JSONL corpus.

    Raises:
        InputError: If a line is not a valid triple
    """
    items = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(BehaviorItem.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise InputError(f"Malformed corpus line {number}: {e}", line=number) from e
    return BehaviorCorpus(items, behavior_name)


def dumps_sequences(sequences: Iterable[Sequence[int]]) -> str:
    """JSONL, one token-id array per line."""
    return "".join(json.dumps(list(seq)) + "\n" for seq in sequences)


def loads_sequences(text: str) -> list[list[int]]:
    """Parse a JSONL file of token-id arrays."""
    sequences = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            value = json.loads(line)
        except json.JSONDecodeError as e:
            raise InputError(f"Malformed sequence line {number}: {e}", line=number) from e
        if not isinstance(value, list):
            raise InputError(f"Sequence line {number} is not an array", line=number)
        sequences.append([int(t) for t in value])
    return sequences


# =============================================================================
# Rendering
# =============================================================================

_RESERVED_LABELS = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SPACE: "_"}


def render_tokens(tokens: Iterable[int], config: CorpusConfig | None = None) -> str:
    """Readable labels such as ``<bos> q3 q7 _ pos2`` for CLI output."""
    config = config or CorpusConfig()
    families = (
        ("q", config.question_tokens),
        ("pos", config.positive_tokens),
        ("neg", config.negative_tokens),
        ("p", config.prompt_tokens),
        ("r", config.reasoning_question_tokens),
        ("long", config.long_tokens),
        ("short", config.short_tokens),
    )
    labels = []
    for token in tokens:
        token = int(token)
        if token in _RESERVED_LABELS:
            labels.append(_RESERVED_LABELS[token])
            continue
        for prefix, (start, stop) in families:
            if start <= token < stop:
                labels.append(f"{prefix}{token - start}")
                break
        else:
            labels.append(f"t{token}")
    return " ".join(labels)
