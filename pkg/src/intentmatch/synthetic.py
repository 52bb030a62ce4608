"""Synthetic labeled-query generator.

Stands in for click-log data: every category owns a disjoint set of core
characters, queries are mostly drawn from their category's core set (plus
optional noise characters that belong to no category), category sizes
follow a power law to emulate long-tail traffic, and a configurable
fraction of queries carries two labels.  Everything is a pure function of
the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .textdata import (
    CategorySet,
    LabeledQuery,
    Vocab,
    make_category_record,
    tokenize,
)

# character pool: latin letters, digits, then CJK ideographs
_BASE_POOL = [chr(c) for c in range(ord("a"), ord("z") + 1)] + [
    chr(c) for c in range(ord("0"), ord("9") + 1)
]


def _char_pool(size):
    pool = list(_BASE_POOL)
    cp = 0x4E00
    while len(pool) < size:
        pool.append(chr(cp))
        cp += 1
    return pool[:size]


@dataclass
class SyntheticConfig:
    num_categories: int = 8
    vocab_size: int = 48
    queries_per_category: int = 300
    tail_exponent: float = 0.5
    seed: int = 42
    multi_label_fraction: float = 0.15
    noise: float = 0.05
    test_fraction: float = 1.0 / 6.0
    query_len_min: int = 4
    query_len_max: int = 10
    core_tokens_per_category: int = 4
    query_l_max: int = 16


@dataclass
class SyntheticDataset:
    vocab: Vocab
    categories: CategorySet
    train: list[LabeledQuery]
    test: list[LabeledQuery]


def _category_counts(cfg):
    """Power-law category sizes via largest-remainder rounding."""
    total = cfg.num_categories * cfg.queries_per_category
    weights = np.array(
        [(r + 1.0) ** -cfg.tail_exponent for r in range(cfg.num_categories)]
    )
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    for i in np.argsort(-remainder)[: total - counts.sum()]:
        counts[i] += 1
    return counts


def generate_synthetic(cfg):
    """Build (vocab, categories, train, test) deterministically from cfg."""
    if cfg.num_categories < 2:
        raise ConfigError(f"need at least 2 categories, got {cfg.num_categories}")
    core_size = min(cfg.core_tokens_per_category, cfg.vocab_size // cfg.num_categories)
    if core_size < 2:
        raise ConfigError(
            f"vocab of {cfg.vocab_size} cannot give {cfg.num_categories} categories "
            f">= 2 disjoint core tokens each"
        )
    rng = np.random.default_rng(cfg.seed)
    pool = _char_pool(cfg.vocab_size)
    vocab = Vocab(pool)

    order = rng.permutation(cfg.vocab_size)
    cores = [
        [pool[order[c * core_size + k]] for k in range(core_size)]
        for c in range(cfg.num_categories)
    ]
    noise_pool = [pool[i] for i in order[cfg.num_categories * core_size :]]

    records = []
    for cid, core in enumerate(cores):
        name = "".join(core[:3])
        words = ["".join(core[i : i + 2]) for i in range(3, len(core), 2)]
        records.append(make_category_record(vocab, cid, name, words))
    categories = CategorySet(records)

    counts = _category_counts(cfg)
    queries = []
    for cid, n in enumerate(counts):
        for _ in range(n):
            length = int(rng.integers(cfg.query_len_min, cfg.query_len_max + 1))
            labels = np.zeros(cfg.num_categories)
            labels[cid] = 1.0
            second = None
            if cfg.multi_label_fraction > 0 and rng.random() < cfg.multi_label_fraction:
                second = int(rng.integers(cfg.num_categories - 1))
                if second >= cid:
                    second += 1
                labels[second] = 1.0
            chars = []
            split = (length + 1) // 2
            for pos in range(length):
                if noise_pool and rng.random() < cfg.noise:
                    chars.append(noise_pool[rng.integers(len(noise_pool))])
                    continue
                source = cores[cid] if (second is None or pos < split) else cores[second]
                chars.append(source[rng.integers(len(source))])
            text = "".join(chars)
            queries.append(LabeledQuery(tokenize(text, vocab, cfg.query_l_max), labels, text))

    perm = rng.permutation(len(queries))
    n_test = int(round(len(queries) * cfg.test_fraction))
    test = [queries[i] for i in perm[:n_test]]
    train = [queries[i] for i in perm[n_test:]]
    return SyntheticDataset(vocab, categories, train, test)
