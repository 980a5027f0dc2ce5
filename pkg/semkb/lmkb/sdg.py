"""
Source-data generation: prompt construction, word-level tokenization,
autoregressive temperature sampling against a generation backend, and
output parsing
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import EmptyGenerationError, InvalidConfigError, InvalidInputError
from .core import BOS, EOS, SEP, TokenSeq, Vocab, sample_with_temperature

logger = logging.getLogger(__name__)

PROMPT_SEPARATOR = ": \n"
DEFAULT_INSTRUCTION = "Rewrite the caption"


@dataclass(frozen=True)
class Prompt:
    source_text: str
    instruction: str
    rendered: str


@dataclass(frozen=True)
class GeneratedSource:
    text: str
    token_ids: TokenSeq
    backend_tag: str
    temperature: float


def build_prompt(source: str, instruction: str = DEFAULT_INSTRUCTION) -> Prompt:
    if not source or not source.strip():
        raise InvalidInputError("prompt source text is empty")
    if not instruction or not instruction.strip():
        raise InvalidInputError("prompt instruction is empty")
    return Prompt(source_text=source, instruction=instruction, rendered=f"{instruction}{PROMPT_SEPARATOR}{source}")


def split_rendered(rendered: str) -> Prompt:
    """Recover the prompt from its rendered form (used by the generation server)"""
    instruction, sep, source = rendered.partition(PROMPT_SEPARATOR)
    if not sep:
        raise InvalidInputError("rendered prompt has no instruction separator")
    return build_prompt(source, instruction)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    """Whitespace split; out-of-vocabulary words map to <unk>"""
    return [vocab.id_of(word) for word in text.split()]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.token(int(i)) for i in ids)


def prompt_tokens(prompt: Prompt, vocab: Vocab) -> TokenSeq:
    """instruction ++ <sep> ++ source"""
    return tokenize(prompt.instruction, vocab) + [SEP] + tokenize(prompt.source_text, vocab)


def parse_output(seq: Sequence[int], vocab: Vocab, prompt: Optional[Prompt] = None) -> str:
    """
    Turn generated ids into source text

    Cuts at the first <eos>, strips a leading echo of the prompt (the full
    prompt layout, or anything up to the last <sep>) and drops special tokens.
    """
    ids = [int(i) for i in seq]
    if EOS in ids:
        ids = ids[: ids.index(EOS)]
    if prompt is not None:
        echo = prompt_tokens(prompt, vocab)
        if ids[: len(echo)] == echo:
            ids = ids[len(echo):]
    if SEP in ids:
        ids = ids[len(ids) - ids[::-1].index(SEP):]
    words = [vocab.token(i) for i in ids if not vocab.is_special(i)]
    if not words:
        raise EmptyGenerationError("generation produced no content tokens")
    return " ".join(words)


def generate(
    prompt: Prompt,
    tau: float,
    max_len: int,
    backend,
    seed: int,
) -> GeneratedSource:
    """
    Sample one candidate from ``backend``

    Token backends are driven step by step: the context is the prompt layout
    followed by <bos> and the tokens generated so far, and each step samples
    with ``sample_with_temperature`` until <eos> or ``max_len`` tokens.
    Text-only backends (remote) return the completion in one call.
    """
    if max_len < 1:
        raise InvalidConfigError(f"max_len must be >= 1, got {max_len}")
    vocab: Vocab = backend.vocab
    rng = np.random.default_rng(seed)
    if getattr(backend, "text_only", False):
        raw = backend.complete(prompt.rendered, tau, max_len, seed)
        generated = tokenize(raw, vocab)[:max_len]
    else:
        context = prompt_tokens(prompt, vocab) + [BOS]
        generated = []
        for _ in range(max_len):
            token = sample_with_temperature(backend.next_logits(context + generated, rng), tau, rng)
            generated.append(token)
            if token == EOS:
                break
    text = parse_output(generated, vocab, prompt)
    logger.debug("generated %d tokens with %s backend: %s", len(generated), backend.tag, text)
    return GeneratedSource(text=text, token_ids=tokenize(text, vocab), backend_tag=backend.tag, temperature=tau)
