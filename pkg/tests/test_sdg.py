'''
Unit tests for source-data generation and the generation backends.
'''

import numpy as np
import pytest

from semkb.errors import EmptyGenerationError, InvalidConfigError, InvalidInputError
from semkb.lmkb.core import BOS, EOS, SEP, UNK, BackboneConfig, ToyTransformer, Vocab
from semkb.lmkb.sdg import (
    PROMPT_SEPARATOR,
    build_prompt,
    detokenize,
    generate,
    parse_output,
    prompt_tokens,
    split_rendered,
    tokenize,
)
from semkb.services.backends import MockBackend, ToyBackend, create_backend

SOURCE = 'a person wearing a red coat , walking near the street'

# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------

@pytest.fixture
def vocab():
    '''Vocabulary covering SOURCE, its synonyms and two distractors.'''
    words = SOURCE.split() + ['Rewrite', 'the', 'caption', 'pedestrian', 'figure', 'beside', 'road',
                              'banana', 'rocket']
    return Vocab(words)

@pytest.fixture
def thesaurus():
    '''Two synonym groups.'''
    return [('person', 'pedestrian', 'figure'), ('near', 'beside')]

@pytest.fixture
def prompt():
    '''Prompt for SOURCE with the default instruction.'''
    return build_prompt(SOURCE)

# -------------------------------------------------------------------------------------------------
# Prompt Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestPrompt:
    '''Test suite for prompt construction and parsing.'''

    def test_rendered_layout(self, prompt):
        '''Test instruction ++ separator ++ source.'''
        assert prompt.rendered == f'Rewrite the caption{PROMPT_SEPARATOR}{SOURCE}'
        assert split_rendered(prompt.rendered) == prompt

    def test_empty_parts(self):
        '''Test that empty source or instruction is rejected.'''
        with pytest.raises(InvalidInputError):
            build_prompt('   ')
        with pytest.raises(InvalidInputError):
            build_prompt(SOURCE, '')
        with pytest.raises(InvalidInputError):
            split_rendered('no separator here')

    def test_tokenize_unknown_words(self, vocab):
        '''Test that out-of-vocabulary words map to <unk>.'''
        ids = tokenize('red zeppelin', vocab)

        assert ids == [vocab.id_of('red'), UNK]
        assert detokenize(ids, vocab) == 'red <unk>'

    def test_prompt_tokens(self, prompt, vocab):
        '''Test the token layout instruction ++ <sep> ++ source.'''
        ids = prompt_tokens(prompt, vocab)

        assert ids[3] == SEP
        assert ids[4:] == tokenize(SOURCE, vocab)

    def test_parse_output_strips_echo_and_specials(self, prompt, vocab):
        '''Test cutting at <eos> and dropping an echoed prompt.'''
        body = tokenize('a red coat', vocab)
        seq = prompt_tokens(prompt, vocab) + [BOS] + body + [EOS] + tokenize('walking', vocab)

        assert parse_output(seq, vocab, prompt) == 'a red coat'
        assert parse_output([SEP] + body, vocab) == 'a red coat'

    def test_parse_output_empty(self, vocab):
        '''Test that an output without content tokens raises.'''
        with pytest.raises(EmptyGenerationError):
            parse_output([BOS, UNK, EOS], vocab)

# -------------------------------------------------------------------------------------------------
# Mock Backend Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestMockBackend:
    '''Test suite for generation with the mock paraphraser.'''

    def test_without_thesaurus_echoes_source(self, prompt, vocab):
        '''Test that the mock repeats the source when nothing is replaceable.'''
        result = generate(prompt, 1.0, 32, MockBackend(vocab), seed=0)

        assert result.text == SOURCE
        assert result.backend_tag == 'mock'
        assert result.token_ids == tokenize(SOURCE, vocab)

    def test_paraphrase_uses_synonyms_only(self, prompt, vocab, thesaurus):
        '''Test word-by-word replacement within synonym groups.'''
        backend = MockBackend(vocab, thesaurus)
        groups = {w: set(g) for g in thesaurus for w in g}

        for seed in range(10):
            words = generate(prompt, 1.0, 32, backend, seed).text.split()
            assert len(words) == len(SOURCE.split())
            for original, new in zip(SOURCE.split(), words):
                assert new in groups.get(original, {original})

    def test_deterministic_per_seed(self, prompt, vocab, thesaurus):
        '''Test that the same seed gives the same paraphrase.'''
        backend = MockBackend(vocab, thesaurus)
        texts = {generate(prompt, 1.0, 32, backend, 5).text for _ in range(3)}
        assert len(texts) == 1

    def test_greedy_picks_lowest_synonym(self, prompt, vocab, thesaurus):
        '''Test that tau = 0 resolves each group to its lowest id.'''
        text = generate(prompt, 0.0, 32, MockBackend(vocab, thesaurus), seed=0).text
        assert text.split()[1] == 'person'

    def test_reorder_swaps_clauses(self, prompt, vocab):
        '''Test clause reordering around the first comma.'''
        text = generate(prompt, 1.0, 32, MockBackend(vocab, reorder=True), seed=0).text
        assert text == 'walking near the street , a person wearing a red coat'

    def test_hallucination(self, prompt, vocab):
        '''Test that a certain hallucination emits distractors only.'''
        backend = MockBackend(vocab, distractors=['banana', 'rocket'], hallucination_rate=1.0)

        words = generate(prompt, 1.0, 32, backend, seed=1).text.split()

        assert set(words) <= {'banana', 'rocket'}
        assert len(words) == len(SOURCE.split())

    def test_max_len_truncates(self, prompt, vocab):
        '''Test that generation stops after max_len tokens.'''
        assert generate(prompt, 1.0, 3, MockBackend(vocab), seed=0).text == 'a person wearing'

    def test_unknown_source_is_empty(self, vocab):
        '''Test that a source of unknown words yields an empty generation.'''
        with pytest.raises(EmptyGenerationError):
            generate(build_prompt('zzz qqq'), 1.0, 8, MockBackend(vocab), seed=0)

    def test_invalid_settings(self, prompt, vocab):
        '''Test hallucination rate and max_len checks.'''
        with pytest.raises(InvalidConfigError):
            MockBackend(vocab, hallucination_rate=1.5)
        with pytest.raises(InvalidConfigError):
            generate(prompt, 1.0, 0, MockBackend(vocab), seed=0)

# -------------------------------------------------------------------------------------------------
# Backend Factory Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestCreateBackend:
    '''Test suite for create_backend and the toy backend.'''

    def test_toy_backend_generates(self, prompt, vocab):
        '''Test that the toy backend produces vocabulary words.'''
        model = ToyTransformer(BackboneConfig(vocab_size=vocab.size, l_depth=1, d_llm=8, heads=2, max_seq=32))
        backend = create_backend('toy', vocab, model=model)

        try:
            text = generate(prompt, 1.0, 6, backend, seed=0).text
        except EmptyGenerationError:
            return
        assert all(word in vocab for word in text.split())

    def test_toy_vocab_mismatch(self, vocab):
        '''Test that model and tokenizer vocabularies must agree.'''
        model = ToyTransformer(BackboneConfig(vocab_size=vocab.size + 1, l_depth=0, d_llm=4, heads=2))
        with pytest.raises(InvalidConfigError):
            ToyBackend(model, vocab)

    def test_missing_requirements(self, vocab):
        '''Test factory errors for missing model, settings and unknown kinds.'''
        with pytest.raises(InvalidConfigError):
            create_backend('toy', vocab)
        with pytest.raises(InvalidConfigError):
            create_backend('remote', vocab)
        with pytest.raises(InvalidConfigError):
            create_backend('oracle', vocab)

    def test_mock_logits_are_blocked_outside_candidates(self, vocab, thesaurus):
        '''Test that the mock only opens the current word's group.'''
        backend = MockBackend(vocab, thesaurus)
        context = prompt_tokens(build_prompt('person near'), vocab) + [BOS]

        logits = backend.next_logits(context, np.random.default_rng(0))

        open_ids = set(np.flatnonzero(logits == 0.0).tolist())
        assert open_ids == {vocab.id_of(w) for w in ('person', 'pedestrian', 'figure')}
