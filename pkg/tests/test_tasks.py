import os
import tempfile
from unittest import TestCase

import numpy as np

from guarded_tuning.errors import ConfigError, DimensionError
from guarded_tuning.tasks import BIT_ZERO, EVEN, KEY_BASE, KEYED_LOOKUP, ODD, PARITY_OF_WINDOW, \
    PATTERN_COMPLETION, TaskConfig, ToyDataset, aux_corpus, batch_schedule, exact_match_accuracy, \
    generate_toy_task, key_table, train_step_count, write_task


def task(name, n_train=100, n_eval=20, seed=0, vocab_size=256, seq_len=16):
    return generate_toy_task(TaskConfig(name, n_train, n_eval), seed, vocab_size, seq_len)


class ToyTaskTests(TestCase):
    def test_keyed_lookup(self):
        train, _ = task(KEYED_LOOKUP)
        table = key_table(256)
        self.assertEqual(train.tokens.shape, (100, 16))
        for row in train.tokens:
            keys = row[0:14:2] - KEY_BASE
            query = row[-2] - KEY_BASE
            self.assertIn(query, keys)
            self.assertEqual(len(set(keys)), 7)
            np.testing.assert_array_equal(row[1:14:2], table[keys])
            self.assertEqual(row[-1], table[query])

    def test_keyed_lookup_short_sequences(self):
        train, _ = task(KEYED_LOOKUP, vocab_size=80, seq_len=8)
        self.assertEqual(train.tokens.shape, (100, 8))
        table = key_table(80)
        for row in train.tokens:
            self.assertEqual(row[-1], table[row[-2] - KEY_BASE])

    def test_pattern_completion(self):
        train, _ = task(PATTERN_COMPLETION)
        for row in train.tokens:
            periods = [p for p in range(2, 6) if np.array_equal(row[p:], row[:-p])]
            self.assertTrue(periods, row)

    def test_parity_of_window(self):
        train, _ = task(PARITY_OF_WINDOW)
        for row in train.tokens:
            bits = row[:-1] - BIT_ZERO
            self.assertTrue(set(bits) <= {0, 1})
            self.assertEqual(row[-1], ODD if bits[-4:].sum() % 2 else EVEN)

    def test_deterministic_and_disjoint(self):
        train, evaluation = task(KEYED_LOOKUP, seed=3)
        again, _ = task(KEYED_LOOKUP, seed=3)
        other, _ = task(KEYED_LOOKUP, seed=4)
        np.testing.assert_array_equal(train.tokens, again.tokens)
        self.assertFalse(np.array_equal(train.tokens, other.tokens))
        self.assertFalse(train.rows() & evaluation.rows())
        self.assertEqual(len(train.rows()), len(train))

    def test_key_table_is_fixed(self):
        np.testing.assert_array_equal(key_table(256), key_table(256))
        self.assertTrue(np.all(key_table(256) >= 64))

    def test_rejects_impossible_tasks(self):
        with self.assertRaises(ConfigError):
            task(KEYED_LOOKUP, vocab_size=64)
        with self.assertRaises(ConfigError):
            task(PARITY_OF_WINDOW, seq_len=4)
        # only 2 ** 5 parity sequences of length 6 exist
        with self.assertRaises(ConfigError):
            task(PARITY_OF_WINDOW, n_train=40, n_eval=0, seq_len=6)
        with self.assertRaises(ConfigError):
            generate_toy_task(TaskConfig('sorting'), 0)

    def test_config(self):
        with self.assertRaises(ConfigError) as cm:
            TaskConfig('sorting', 0, 1).validate()
        self.assertEqual(len(cm.exception.messages), 2)

    def test_aux_corpus(self):
        train, evaluation = task(PATTERN_COMPLETION)
        aux = aux_corpus(PATTERN_COMPLETION, 0, 50, exclude=[train, evaluation])
        self.assertEqual(len(aux), 50)
        self.assertFalse(aux.rows() & (train.rows() | evaluation.rows()))
        with self.assertRaises(ConfigError):
            aux_corpus(PATTERN_COMPLETION, 0, 0)


class DatasetTests(TestCase):
    def test_batches(self):
        dataset = ToyDataset('t', np.arange(30).reshape(10, 3))
        ids, targets = dataset.batch([0, 2])
        np.testing.assert_array_equal(ids, [[0, 1], [6, 7]])
        np.testing.assert_array_equal(targets, [[1, 2], [7, 8]])
        self.assertEqual([len(b) for b in dataset.eval_batches(4)], [4, 4, 2])
        np.testing.assert_array_equal(dataset.answers, np.arange(2, 30, 3))

    def test_save_load(self):
        train, evaluation = task(PARITY_OF_WINDOW, n_train=10, n_eval=5)
        with tempfile.TemporaryDirectory() as tmpdir:
            paths = write_task(train, evaluation, os.path.join(tmpdir, 'data'))
            self.assertEqual(os.path.basename(paths['eval']), 'parity-of-window-eval.npy')
            loaded = ToyDataset.load(paths['train'], name=PARITY_OF_WINDOW)
            np.testing.assert_array_equal(loaded.tokens, train.tokens)

    def test_schedule(self):
        schedule = batch_schedule(10, 3, 7, seed=1)
        self.assertEqual(len(schedule), 7)
        first_epoch = np.concatenate(schedule[:3])
        self.assertEqual(len(set(first_epoch)), 9)
        self.assertFalse(np.array_equal(schedule[0], schedule[3]))
        np.testing.assert_array_equal(np.concatenate(batch_schedule(10, 3, 7, seed=1)), np.concatenate(schedule))
        with self.assertRaises(ConfigError):
            batch_schedule(2, 3, 1, seed=0)

    def test_step_count(self):
        self.assertEqual(train_step_count(100, 16, steps=7), 7)
        self.assertEqual(train_step_count(100, 16, steps=0, epochs=2), 12)
        self.assertEqual(train_step_count(5, 16, epochs=1), 1)

    def test_exact_match(self):
        logits = np.zeros((2, 3, 4))
        logits[0, -1, 1] = 1.0
        logits[1, -1, 2] = 1.0
        self.assertEqual(exact_match_accuracy(logits, np.array([[0, 0, 1], [0, 0, 3]])), 0.5)
        with self.assertRaises(DimensionError):
            exact_match_accuracy(logits, np.zeros((2, 2)))
