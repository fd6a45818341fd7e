import numpy as np
import pytest

from specpipe.kvcache import KVCache
from specpipe.model import Batch, BatchToken, ModelConfig, PREFILL, build_model


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=64, embed_dim=32, n_layers=6, seed=7,
                       max_context=256)


@pytest.fixture(scope="session")
def small_model(small_config):
    return build_model(small_config)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(vocab_size=16, embed_dim=16, n_layers=2, seed=3,
                       max_context=128)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config)


def fresh_cache(config: ModelConfig, n_seq_ids: int = 8) -> KVCache:
    return KVCache(embed_dim=config.embed_dim, layers=range(config.n_layers),
                   max_context=config.max_context, n_seq_ids=n_seq_ids)


def chain_batch(tokens, start_pos=0, seq=0, kind=PREFILL, run_id=-1,
                flag_all=True):
    toks = tuple(
        BatchToken(t, start_pos + i, frozenset([seq]),
                   flag_all or i == len(tokens) - 1)
        for i, t in enumerate(tokens)
    )
    return Batch(tokens=toks, kind=kind, run_id=run_id)


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))
