"""
Synthetic text-to-gallery retrieval corpus
"""

import itertools
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from ..errors import InvalidConfigError
from ..lmkb.core import BOS, EOS, TokenSeq, Vocab
from ..lmkb.sdg import DEFAULT_INSTRUCTION, build_prompt, prompt_tokens, tokenize
from .rng import STREAM_CORPUS, stream_rng

COLORS = ("red", "blue", "green", "black", "white", "yellow", "gray", "purple")
GARMENTS = ("jacket", "shirt", "coat", "dress")
ACTIONS = ("walking", "running", "standing", "cycling")
MAX_CLASSES = len(COLORS) * len(GARMENTS) * len(ACTIONS)

# Interchangeable filler words; class-defining words never appear here
THESAURUS: Tuple[Tuple[str, ...], ...] = (
    ("person", "pedestrian", "individual", "figure"),
    ("wearing", "sporting", "donning"),
    ("near", "beside", "by"),
    ("street", "road", "avenue", "square"),
)

TEMPLATES = (
    "a {person} {wearing} a {color} {garment} , {action} {near} the {place}",
    "the {person} is {action} {near} the {place} , {wearing} a {color} {garment}",
    "{action} {near} the {place} , a {person} in a {color} {garment}",
    "a {color} {garment} on the {person} , {action} {near} a {place}",
)

DISTRACTORS = ("banana", "rocket", "violin", "glacier", "tractor", "orchid", "kettle", "lantern")

GALLERY_VIEW_NOISE = 0.3


@dataclass(frozen=True)
class Caption:
    text: str
    label: int


@dataclass(frozen=True, eq=False)
class RetrievalCorpus:
    vocab: Vocab
    train: List[Caption]
    test: List[Caption]
    gallery: np.ndarray  # [n_classes * gallery_per_class, d_gallery]
    gallery_labels: np.ndarray
    class_words: Dict[int, Tuple[str, str, str]]
    active_ids: List[int]
    thesaurus: Tuple[Tuple[str, ...], ...] = THESAURUS
    distractors: Tuple[str, ...] = DISTRACTORS
    instruction: str = DEFAULT_INSTRUCTION
    n_classes: int = 0

    def prototype_index(self, label: int) -> int:
        """Gallery row of a class's clean prototype (its first view)"""
        return int(np.flatnonzero(self.gallery_labels == label)[0])

    def relevant(self, label: int) -> frozenset:
        return frozenset(np.flatnonzero(self.gallery_labels == label).tolist())

    def tokens(self, caption: Caption) -> TokenSeq:
        return tokenize(caption.text, self.vocab)

    def pretraining_sequences(self) -> List[TokenSeq]:
        """Training captions in the generation layout: prompt ++ <bos> ++ caption ++ <eos>"""
        return [
            prompt_tokens(build_prompt(c.text, self.instruction), self.vocab) + [BOS] + self.tokens(c) + [EOS]
            for c in self.train
        ]


def _lexicon() -> List[str]:
    words: List[str] = []
    for template in TEMPLATES:
        words += [w for w in template.split() if not w.startswith("{")]
    words += list(COLORS) + list(GARMENTS) + list(ACTIONS)
    for group in THESAURUS:
        words += list(group)
    return list(dict.fromkeys(words))


def _split(captions: List[Caption]) -> Tuple[List[Caption], List[Caption]]:
    if len(captions) == 1:
        return captions, captions
    n_test = max(1, int(round(0.2 * len(captions))))
    return captions[:-n_test], captions[-n_test:]


def synth_dataset(cfg, seed: int, instruction: str = DEFAULT_INSTRUCTION) -> RetrievalCorpus:
    """
    Build a seeded corpus from a dataset config section

    Each class is a (color, garment, action) triple; its captions are
    templated with random filler synonyms and its gallery holds one clean
    prototype feature plus ``gallery_per_class - 1`` noisy views. Captions
    are split 80/20 per class; a class with a single caption uses it for
    both sides.
    """
    n_classes = cfg.n_classes
    if not 2 <= n_classes <= MAX_CLASSES:
        raise InvalidConfigError(f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")

    lexicon = _lexicon()
    extra = [w for w in instruction.split() if w not in lexicon]
    words = lexicon + extra + list(DISTRACTORS)
    n_specials = len(Vocab([]))
    if n_specials + len(words) > cfg.vocab_size:
        raise InvalidConfigError(
            f"vocab_size={cfg.vocab_size} is too small for the caption templates (need {n_specials + len(words)})"
        )
    words += [f"tok{i}" for i in range(cfg.vocab_size - n_specials - len(words))]
    vocab = Vocab(words)

    rng = stream_rng(seed, STREAM_CORPUS)
    combos = list(itertools.product(COLORS, GARMENTS, ACTIONS))
    picked = rng.permutation(len(combos))[:n_classes]
    class_words = {label: combos[int(i)] for label, i in enumerate(picked)}

    train: List[Caption] = []
    test: List[Caption] = []
    for label, (color, garment, action) in class_words.items():
        captions = []
        for _ in range(cfg.captions_per_class):
            template = TEMPLATES[rng.integers(len(TEMPLATES))]
            fillers = {key: group[rng.integers(len(group))] for key, group in zip(("person", "wearing", "near", "place"), THESAURUS)}
            captions.append(Caption(template.format(color=color, garment=garment, action=action, **fillers), label))
        tr, te = _split(captions)
        train += tr
        test += te

    prototypes = rng.standard_normal((n_classes, cfg.d_gallery))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    views = [prototypes]
    for _ in range(cfg.gallery_per_class - 1):
        noisy = prototypes + GALLERY_VIEW_NOISE * rng.standard_normal(prototypes.shape) / np.sqrt(cfg.d_gallery)
        views.append(noisy / np.linalg.norm(noisy, axis=1, keepdims=True))
    # class-major rows: all views of class 0, then class 1, ...
    gallery = np.stack(views, axis=1).reshape(-1, cfg.d_gallery)
    gallery_labels = np.repeat(np.arange(n_classes), cfg.gallery_per_class)

    return RetrievalCorpus(
        vocab=vocab,
        train=train,
        test=test,
        gallery=gallery,
        gallery_labels=gallery_labels,
        class_words=class_words,
        active_ids=sorted(vocab.index[w] for w in lexicon),
        instruction=instruction,
        n_classes=n_classes,
    )
