"""
Generation backends used by source-data generation

``MockBackend`` and ``ToyBackend`` expose next-token logits and are driven by
``sdg.generate``; ``RemoteBackend`` speaks the JSON wire protocol of the
generation server and returns whole completions.
"""

import logging
import threading
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import requests

from ..errors import BackendUnavailableError, InvalidConfigError
from ..lmkb.core import BOS, EOS, SEP, ToyTransformer, Vocab

logger = logging.getLogger(__name__)

# Logit for tokens the mock never emits; softmax maps it to exactly zero
BLOCKED = -1e9

# One in-flight limiter per server URL, shared by every RemoteBackend in the process
_SLOTS: Dict[str, Tuple[int, threading.BoundedSemaphore]] = {}
_SLOTS_LOCK = threading.Lock()


def request_slots(url: str, max_inflight: int) -> threading.BoundedSemaphore:
    """Limiter for ``url``; the first caller fixes its size"""
    with _SLOTS_LOCK:
        if url not in _SLOTS:
            _SLOTS[url] = (max_inflight, threading.BoundedSemaphore(max_inflight))
        limit, slots = _SLOTS[url]
    if limit != max_inflight:
        logger.warning("%s already limited to %d in-flight requests, ignoring %d", url, limit, max_inflight)
    return slots


class MockBackend:
    """
    Deterministic paraphraser

    Re-emits the prompt source word by word; every word with a thesaurus
    group may be replaced by any member of the group (the sampler picks, so
    the paraphrase depends only on prompt and seed). ``reorder`` swaps the
    two clauses around the first ","; ``hallucination_rate`` is the chance
    that a call emits distractor words unrelated to the source instead.
    """

    tag = "mock"
    text_only = False

    def __init__(
        self,
        vocab: Vocab,
        thesaurus: Iterable[Sequence[str]] = (),
        distractors: Iterable[str] = (),
        hallucination_rate: float = 0.0,
        reorder: bool = False,
    ):
        if not 0.0 <= hallucination_rate <= 1.0:
            raise InvalidConfigError(f"hallucination_rate must be in [0, 1], got {hallucination_rate}")
        self.vocab = vocab
        self.hallucination_rate = hallucination_rate
        self.reorder = reorder
        self._synonyms: Dict[int, List[int]] = {}
        for group in thesaurus:
            ids = sorted({vocab.index[w] for w in group if w in vocab})
            for token_id in ids:
                self._synonyms[token_id] = ids
        self._distractors = np.array(sorted({vocab.index[w] for w in distractors if w in vocab}), dtype=np.int64)
        self._comma = vocab.index.get(",")

    def _plan(self, source: List[int]) -> List[int]:
        if self.reorder and self._comma is not None and self._comma in source:
            cut = source.index(self._comma)
            return source[cut + 1:] + [self._comma] + source[:cut]
        return source

    def next_logits(self, context: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        ctx = list(context)
        sep = ctx.index(SEP)
        bos = len(ctx) - 1 - ctx[::-1].index(BOS)
        source = self._plan(ctx[sep + 1:bos])
        generated = ctx[bos + 1:]
        step = len(generated)

        if step == 0:
            hallucinating = bool(rng.random() < self.hallucination_rate) and self._distractors.size > 0
        else:
            hallucinating = generated[0] in set(self._distractors.tolist())

        logits = np.full(self.vocab.size, BLOCKED)
        if step >= len(source):
            logits[EOS] = 0.0
        elif hallucinating:
            logits[self._distractors] = 0.0
        else:
            logits[self._synonyms.get(source[step], [source[step]])] = 0.0
        return logits


class ToyBackend:
    """Text generation from the pretrained toy transformer"""

    tag = "toy"
    text_only = False

    def __init__(self, model: ToyTransformer, vocab: Vocab):
        if model.cfg.vocab_size != vocab.size:
            raise InvalidConfigError(
                f"model vocabulary ({model.cfg.vocab_size}) and tokenizer vocabulary ({vocab.size}) differ"
            )
        self.model = model
        self.vocab = vocab

    def next_logits(self, context: Sequence[int], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return self.model.next_logits(context)


class RemoteBackend:
    """
    Client for the generation server

    POSTs {"prompt", "temperature", "max_tokens", "seed"} and expects
    {"text"}. At most ``max_inflight`` requests to one URL run concurrently
    across all instances in the process.
    """

    tag = "remote"
    text_only = True

    def __init__(self, url: str, vocab: Vocab, timeout: float = 10.0, max_inflight: int = 4):
        if not url:
            raise InvalidConfigError("remote backend needs SEMKB_REMOTE_URL")
        if max_inflight < 1:
            raise InvalidConfigError("max_inflight must be >= 1")
        self.url = url
        self.vocab = vocab
        self.timeout = timeout
        self._slots = request_slots(url, max_inflight)

    @classmethod
    def from_settings(cls, settings, vocab: Vocab) -> "RemoteBackend":
        return cls(settings.remote_url, vocab, timeout=settings.remote_timeout, max_inflight=settings.max_inflight)

    def complete(self, rendered: str, temperature: float, max_tokens: int, seed: int) -> str:
        payload = {"prompt": rendered, "temperature": temperature, "max_tokens": max_tokens, "seed": int(seed)}
        with self._slots:
            try:
                response = requests.post(self.url, json=payload, timeout=self.timeout)
            except requests.RequestException as e:
                raise BackendUnavailableError(f"generation request to {self.url} failed: {e}") from e
        if response.status_code != 200:
            raise BackendUnavailableError(f"generation server answered {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
        except ValueError as e:
            raise BackendUnavailableError("generation server returned invalid JSON") from e
        text = body.get("text") if isinstance(body, Mapping) else None
        if not isinstance(text, str):
            raise BackendUnavailableError("generation server response has no 'text' field")
        return text


def create_backend(
    kind: str,
    vocab: Vocab,
    *,
    model: Optional[ToyTransformer] = None,
    settings=None,
    thesaurus: Iterable[Sequence[str]] = (),
    distractors: Iterable[str] = (),
    hallucination_rate: float = 0.0,
    reorder: bool = False,
):
    if kind == "mock":
        return MockBackend(vocab, thesaurus, distractors, hallucination_rate, reorder)
    if kind == "toy":
        if model is None:
            raise InvalidConfigError("toy backend needs a trained ToyTransformer")
        return ToyBackend(model, vocab)
    if kind == "remote":
        if settings is None:
            raise InvalidConfigError("remote backend needs process settings")
        return RemoteBackend.from_settings(settings, vocab)
    raise InvalidConfigError(f"unknown generation backend '{kind}'")
