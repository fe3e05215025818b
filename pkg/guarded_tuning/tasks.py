"""
synthetic fine-tuning tasks over integer token alphabets

Every sample is one sequence of ``seq_len`` tokens whose last token is the
answer. Models are trained as causal language models: inputs are
``tokens[:-1]``, targets ``tokens[1:]``, and exact-match accuracy looks at the
last target only.

* keyed-lookup: seven key/value pairs from a fixed 32-entry table, then a
  query key; the answer is the query's value
* pattern-completion: a motif of 2-5 tokens repeated; the answer continues it
* parity-of-window: bits; the answer is the parity of the last four bits
"""
import logging
import os
from dataclasses import dataclass

import numpy as np

from guarded_tuning.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

KEYED_LOOKUP, PATTERN_COMPLETION, PARITY_OF_WINDOW = 'keyed-lookup', 'pattern-completion', 'parity-of-window'
TASKS = (KEYED_LOOKUP, PATTERN_COMPLETION, PARITY_OF_WINDOW)

BOS = 1
N_KEYS = 32
KEY_BASE = 16
VALUE_BASE = 64
TABLE_SEED = 1021
BIT_ZERO, BIT_ONE, EVEN, ODD = 2, 3, 4, 5
PARITY_WINDOW = 4
MOTIF_BASE = 16

# stream ids, so train/eval, aux corpus and batch order never share random draws
_DATA_STREAM, _AUX_STREAM, _ORDER_STREAM = 0, 1, 2


@dataclass(frozen=True)
class TaskConfig:
    name: str = KEYED_LOOKUP
    n_train: int = 2000
    n_eval: int = 200

    def validate(self):
        errors = []
        if self.name not in TASKS:
            errors.append(f'task.name: unknown task {self.name!r}, expected one of {", ".join(TASKS)}')
        if not isinstance(self.n_train, int) or self.n_train < 1:
            errors.append('task.n_train: must be a positive integer')
        if not isinstance(self.n_eval, int) or self.n_eval < 1:
            errors.append('task.n_eval: must be a positive integer')
        if errors:
            raise ConfigError(errors)
        return self


class ToyDataset:
    """ a fixed set of token sequences

    Args:
        name (str): the task name
        tokens (np.ndarray): n x seq_len int64, the answer is the last column
    """

    def __init__(self, name, tokens):
        self.name = name
        self.tokens = np.asarray(tokens, dtype=np.int64)

    def __len__(self):
        return len(self.tokens)

    def __repr__(self):
        return f'<ToyDataset({self.name}, {len(self)} x {self.tokens.shape[1]})>'

    @property
    def inputs(self):
        return self.tokens[:, :-1]

    @property
    def targets(self):
        return self.tokens[:, 1:]

    @property
    def answers(self):
        return self.tokens[:, -1]

    def batch(self, indices):
        """ (inputs, targets) for the given rows """
        rows = self.tokens[np.asarray(indices)]
        return rows[:, :-1], rows[:, 1:]

    def eval_batches(self, batch_size):
        """ consecutive disjoint batches covering the whole set, the last one may be short """
        return [np.arange(start, min(start + batch_size, len(self))) for start in range(0, len(self), batch_size)]

    def rows(self):
        return {row.tobytes() for row in self.tokens}

    def save(self, path):
        np.save(path, self.tokens)

    @classmethod
    def load(cls, path, name=None):
        return cls(name or os.path.splitext(os.path.basename(path))[0], np.load(path))


def key_table(vocab_size):
    """ the fixed key => value table of keyed-lookup """
    rng = np.random.default_rng(TABLE_SEED)
    return rng.integers(VALUE_BASE, vocab_size, size=N_KEYS)


def _keyed_lookup(rng, seq_len, vocab_size, table):
    n_pairs = (seq_len - 2) // 2
    prefix = [BOS] * (seq_len - 2 - 2 * n_pairs)
    keys = rng.choice(N_KEYS, size=n_pairs, replace=False)
    query = keys[rng.integers(n_pairs)]
    pairs = np.stack([keys + KEY_BASE, table[keys]], axis=1).reshape(-1)
    return np.concatenate([prefix, pairs, [query + KEY_BASE, table[query]]])


def _pattern_completion(rng, seq_len, vocab_size, table):
    motif = rng.integers(MOTIF_BASE, vocab_size, size=int(rng.integers(2, 6)))
    return np.resize(motif, seq_len)


def _parity_of_window(rng, seq_len, vocab_size, table):
    bits = rng.integers(0, 2, size=seq_len - 1)
    answer = ODD if bits[-PARITY_WINDOW:].sum() % 2 else EVEN
    return np.concatenate([bits + BIT_ZERO, [answer]])


_GENERATORS = {
    KEYED_LOOKUP: _keyed_lookup,
    PATTERN_COMPLETION: _pattern_completion,
    PARITY_OF_WINDOW: _parity_of_window,
}


def _check_task(name, seq_len, vocab_size):
    if name not in _GENERATORS:
        raise ConfigError(f'task.name: unknown task {name!r}, expected one of {", ".join(TASKS)}')
    if name == KEYED_LOOKUP and (vocab_size <= VALUE_BASE or seq_len < 4):
        raise ConfigError(f'{name} needs vocab_size > {VALUE_BASE} and seq_len >= 4')
    if name == PARITY_OF_WINDOW and seq_len <= PARITY_WINDOW:
        raise ConfigError(f'{name} needs seq_len > {PARITY_WINDOW}')
    if name == PATTERN_COMPLETION and vocab_size <= MOTIF_BASE:
        raise ConfigError(f'{name} needs vocab_size > {MOTIF_BASE}')


def _sample_unique(name, rng, count, seq_len, vocab_size, exclude=()):
    generate = _GENERATORS[name]
    table = key_table(vocab_size) if name == KEYED_LOOKUP else None
    seen = set(exclude)
    rows = []
    attempts = 0
    while len(rows) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ConfigError(f'{name} cannot produce {count} distinct sequences of length {seq_len}')
        row = np.asarray(generate(rng, seq_len, vocab_size, table), dtype=np.int64)
        key = row.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(row)
    return np.stack(rows) if rows else np.zeros((0, seq_len), dtype=np.int64)


def generate_toy_task(spec, seed, vocab_size=256, seq_len=16):
    """ deterministic, disjoint train and eval sets for a task

    Args:
        spec (TaskConfig): task name and sizes
        seed (int): the run seed
        vocab_size (int): the model vocabulary
        seq_len (int): tokens per sequence, answer included

    Returns:
        (train ToyDataset, eval ToyDataset)
    """
    _check_task(spec.name, seq_len, vocab_size)
    rng = np.random.default_rng([seed, TASKS.index(spec.name), _DATA_STREAM])
    tokens = _sample_unique(spec.name, rng, spec.n_train + spec.n_eval, seq_len, vocab_size)
    logger.debug('%s: %d train, %d eval sequences', spec.name, spec.n_train, spec.n_eval)
    return ToyDataset(spec.name, tokens[:spec.n_train]), ToyDataset(spec.name, tokens[spec.n_train:])


def aux_corpus(name, seed, count, vocab_size=256, seq_len=16, exclude=None):
    """ attacker data from the task distribution, disjoint from the client's sequences """
    _check_task(name, seq_len, vocab_size)
    if count < 1:
        raise ConfigError('attack.aux_size: the auxiliary corpus must not be empty')
    rng = np.random.default_rng([seed, TASKS.index(name), _AUX_STREAM])
    excluded = set()
    for dataset in exclude or ():
        excluded |= dataset.rows()
    return ToyDataset(name, _sample_unique(name, rng, count, seq_len, vocab_size, exclude=excluded))


def train_step_count(n_train, batch_size, steps=None, epochs=1):
    """ steps if given, else full batches per epoch times epochs """
    if steps:
        return int(steps)
    return max(1, n_train // batch_size) * int(epochs)


def batch_schedule(n_train, batch_size, n_steps, seed):
    """ row indices of every training batch, reshuffling at each epoch boundary """
    if batch_size > n_train:
        raise ConfigError(f'training.batch_size: {batch_size} exceeds the {n_train} training samples')
    rng = np.random.default_rng([seed, _ORDER_STREAM])
    per_epoch = n_train // batch_size
    schedule, order = [], None
    for step in range(n_steps):
        position = step % per_epoch
        if position == 0:
            order = rng.permutation(n_train)
        schedule.append(order[position * batch_size:(position + 1) * batch_size])
    return schedule


def exact_match_accuracy(logits, targets):
    """ fraction of sequences whose last target is the argmax prediction """
    logits = logits.data if hasattr(logits, 'data') else np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f'logits {logits.shape} do not match targets {targets.shape}')
    if targets.size == 0:
        return 0.0
    return float(np.mean(logits[:, -1].argmax(axis=-1) == targets[:, -1]))


def write_task(train, evaluation, directory):
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for split, dataset in (('train', train), ('eval', evaluation)):
        paths[split] = os.path.join(directory, f'{dataset.name}-{split}.npy')
        dataset.save(paths[split])
    return paths
