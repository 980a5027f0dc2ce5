'''
Shared fixtures: tiny links, corpora, backbones and experiment configs.
'''

import numpy as np
import pytest

from semkb.channel.mimo import generate_trace
from semkb.config import parse_config
from semkb.lmkb.core import BackboneConfig, DeterministicMock, EmbeddingTable, ToyTransformer
from semkb.models import ChannelModelParams, ModelTag
from semkb.utils.corpus import synth_dataset

# Small enough for sub-second seeds: 2x2 links, 4 classes, 8-wide embeddings
TINY_CONFIG = {
    'channel': {'n_r': 2, 'n_t': 2, 'n_users': 2, 'n_paths': 4, 'doppler_hz': 50.0},
    'mimo': {'d': 2},
    'cdg': {'t_his': 8, 't_pre': 2, 'l_patch': 4, 'stride': 2, 'd_e': 8, 'epochs': 2, 'lr': 0.01},
    'sdg': {'backend': 'mock', 'max_len': 16},
    'cdfc': {'n_feat': 8, 'd_emb': 8, 'd_hidden': 8, 'epochs': 2, 'batch_size': 4, 'max_retries': 2},
    'sweep': {'snr_grid_db': [0.0, 10.0], 'seeds': [0], 'feedback_grid': [16, 0], 'feedback_snr_db': 10.0},
    'dataset': {'n_classes': 4, 'captions_per_class': 3, 'vocab_size': 64, 'd_gallery': 8},
    'lmkb': {'backbone': 'mock', 'l_depth': 1, 'd_llm': 8, 'heads': 2, 'max_seq': 48, 'pretrain_epochs': 1},
}


def merged(base: dict, **sections) -> dict:
    '''Copy of ``base`` with the given sections updated key by key.'''
    out = {name: dict(values) for name, values in base.items()}
    for name, values in sections.items():
        out.setdefault(name, {}).update(values)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    '''Norm-relative difference used by the gradient checks.'''
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def toml_text(data: dict) -> str:
    '''Render a two-level config dict as TOML.'''
    def value(v):
        if isinstance(v, bool):
            return 'true' if v else 'false'
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, list):
            return '[' + ', '.join(value(x) for x in v) + ']'
        return repr(v)

    lines = []
    for section, values in data.items():
        lines.append(f'[{section}]')
        lines += [f'{key} = {value(v)}' for key, v in values.items()]
        lines.append('')
    return '\n'.join(lines)

# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------

@pytest.fixture
def rng():
    '''Seeded generator for test data.'''
    return np.random.default_rng(1234)

@pytest.fixture
def nlos_trace():
    '''Twelve-sample 2x2 NLOS trace.'''
    params = ChannelModelParams(n_r=2, n_t=2, n_paths=4, doppler_hz=50.0, model_tag=ModelTag.NLOS_LIKE)
    return generate_trace(params, seed=7, length=12)

@pytest.fixture
def siso_trace():
    '''Ten-sample 1x1 NLOS trace for the small CDG instances.'''
    params = ChannelModelParams(n_r=1, n_t=1, n_paths=4, doppler_hz=80.0, model_tag=ModelTag.NLOS_LIKE)
    return generate_trace(params, seed=3, length=10)

@pytest.fixture
def tiny_toy():
    '''One-block toy transformer with d_llm = 4 over an 8-token vocabulary.'''
    return ToyTransformer(BackboneConfig(vocab_size=8, l_depth=1, d_llm=4, heads=2, max_seq=16, seed=5))

@pytest.fixture
def mock_backbone():
    '''Fixed orthogonal backbone with d = 4.'''
    return DeterministicMock(d_model=4, max_seq=16, seed=2)

@pytest.fixture
def small_table(rng):
    '''Random 8 x 4 word-embedding table.'''
    return EmbeddingTable(rng.standard_normal((8, 4)))

@pytest.fixture
def tiny_config_data():
    '''Raw tiny experiment config.'''
    return merged(TINY_CONFIG)

@pytest.fixture
def tiny_config(tiny_config_data):
    '''Validated tiny experiment config.'''
    return parse_config(tiny_config_data)

@pytest.fixture
def corpus(tiny_config):
    '''Tiny retrieval corpus for seed 0.'''
    return synth_dataset(tiny_config.dataset, seed=0)

@pytest.fixture
def config_file(tmp_path, tiny_config_data):
    '''Tiny config written to a TOML file.'''
    path = tmp_path / 'tiny.toml'
    path.write_text(toml_text(tiny_config_data), encoding='utf-8')
    return path
