from unittest import TestCase

import numpy as np

from guarded_tuning.codec import RAW_MAGIC, TensorCodec, decode_bytes, decode_raw, dequantize, encode_bytes, \
    encode_raw, frame_size, nearest_rank_percentile, pack_codes, quantize, raw_frame_size, unpack_codes
from guarded_tuning.errors import ContractError, DecodeError


def activations(shape=(4, 16, 64), seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape).astype(np.float32)
    # a few large activations, as transformers produce them
    data.reshape(-1)[rng.choice(data.size, data.size // 200, replace=False)] *= 40
    return data


class PercentileTests(TestCase):
    def test_nearest_rank(self):
        values = np.arange(1, 101, dtype=np.float32)
        self.assertEqual(nearest_rank_percentile(values, 99), 99)
        self.assertEqual(nearest_rank_percentile(values, 100), 100)
        self.assertEqual(nearest_rank_percentile(values, 1), 1)
        self.assertEqual(nearest_rank_percentile(np.arange(10, dtype=np.float32)[::-1], 95), 9)
        with self.assertRaises(ContractError):
            nearest_rank_percentile(np.zeros(0), 50)

    def test_worked_values(self):
        self.assertEqual(nearest_rank_percentile(np.arange(1000, dtype=np.float32), 99), 989.0)
        self.assertEqual(nearest_rank_percentile(np.array([0, 1, 2, 3, 100], dtype=np.float32), 80), 3.0)


class QuantizeTests(TestCase):
    def test_error_bound_and_exact_outliers(self):
        data = activations()
        frame = quantize(data, 8, 99)
        restored = dequantize(frame).data
        self.assertEqual(restored.shape, data.shape)
        flat, out = data.reshape(-1), restored.reshape(-1)
        outliers = frame.outlier_positions
        self.assertEqual(frame.outlier_count, data.size - int(np.ceil(0.99 * data.size)))
        np.testing.assert_array_equal(out[outliers], flat[outliers])
        self.assertTrue(np.all(flat[outliers] > frame.threshold))
        inlier = np.ones(flat.size, dtype=bool)
        inlier[outliers] = False
        slack = 1e-6 * np.abs(flat).max()
        self.assertLessEqual(np.abs(out[inlier] - flat[inlier]).max(), frame.scale / 2 + slack)

    def test_more_bits_less_error(self):
        data = activations(seed=1)
        errors = [np.abs(dequantize(quantize(data, bits, 99)).data - data).mean() for bits in (2, 4, 8)]
        self.assertGreater(errors[0], errors[1])
        self.assertGreater(errors[1], errors[2])

    def test_constant_tensor(self):
        data = np.full((3, 5), 1.25, dtype=np.float32)
        frame = quantize(data, 4, 90)
        self.assertEqual(frame.scale, 0.0)
        self.assertEqual(frame.outlier_count, 0)
        np.testing.assert_array_equal(dequantize(frame).data, data)

    def test_no_outliers_at_100(self):
        frame = quantize(activations(), 8, 100)
        self.assertEqual(frame.outlier_count, 0)
        self.assertEqual(frame.threshold, activations().max())

    def test_one_bit(self):
        data = np.array([0.0, 0.2, 0.9, 1.0, 5.0], dtype=np.float32)
        frame = quantize(data, 1, 80)
        np.testing.assert_array_equal(frame.codes, [0, 0, 1, 1])
        np.testing.assert_array_equal(dequantize(frame).data, [0.0, 0.0, 1.0, 1.0, 5.0])

    def test_outlier_kept_raw(self):
        data = np.array([0, 1, 2, 3, 100], dtype=np.float32)
        frame = quantize(data, 2, 80)
        self.assertEqual(frame.scale, 1.0)
        self.assertEqual(frame.threshold, 3.0)
        np.testing.assert_array_equal(frame.codes, [0, 1, 2, 3])
        np.testing.assert_array_equal(frame.outlier_positions, [4])
        np.testing.assert_array_equal(frame.outlier_values, [100.0])
        np.testing.assert_array_equal(dequantize(frame).data, data)

    def test_one_bit_rounds_to_nearest_level(self):
        data = np.array([0.0, 0.3, 0.6, 0.9], dtype=np.float32)
        frame = quantize(data, 1, 100)
        self.assertEqual(frame.outlier_count, 0)
        np.testing.assert_array_equal(frame.codes, [0, 0, 1, 1])
        restored = dequantize(frame).data
        np.testing.assert_allclose(restored, np.array([0.0, 0.0, 0.9, 0.9], dtype=np.float32))
        self.assertLessEqual(np.abs(restored - data).max(), frame.scale / 2 + 1e-6)

    def test_random_tensors(self):
        rng = np.random.default_rng(1234)
        shapes = [(1,), (7,), (3, 5), (2, 4, 8), (4, 16, 16), (513,)]
        for trial in range(1000):
            shape = shapes[trial % len(shapes)]
            data = (rng.standard_normal(shape) * rng.uniform(0.01, 100.0)).astype(np.float32)
            if data.size > 1:
                spikes = rng.choice(data.size, max(1, data.size // 100), replace=False)
                data.reshape(-1)[spikes] *= rng.uniform(5.0, 50.0)
            flat = data.reshape(-1)
            slack = 4e-6 * float(np.abs(flat).max())
            for bits in (1, 2, 4, 8):
                for percentile in (80, 90, 99):
                    frame = decode_bytes(encode_bytes(quantize(data, bits, percentile)))
                    out = dequantize(frame).data.reshape(-1)
                    positions = frame.outlier_positions
                    rank = -(-percentile * flat.size // 100)
                    label = f'trial={trial} bits={bits} p={percentile}'
                    self.assertLessEqual(frame.outlier_count, flat.size - rank, label)
                    self.assertTrue(np.all(flat[positions] > frame.threshold), label)
                    np.testing.assert_array_equal(out[positions], flat[positions], err_msg=label)
                    inlier = np.ones(flat.size, dtype=bool)
                    inlier[positions] = False
                    self.assertTrue(np.all(flat[inlier] <= frame.threshold), label)
                    error = np.abs(out[inlier].astype(np.float64) - flat[inlier]).max()
                    self.assertLessEqual(error, float(frame.scale) / 2 + slack, label)

    def test_bad_params(self):
        with self.assertRaises(ContractError):
            quantize(np.ones(4), 0, 99)
        with self.assertRaises(ContractError):
            quantize(np.ones(4), 8, 101)
        with self.assertRaises(ContractError):
            quantize(np.ones(0), 8, 99)
        with self.assertRaises(ContractError):
            TensorCodec(bits=17)


class BitPackingTests(TestCase):
    def test_lsb_first(self):
        self.assertEqual(pack_codes([1, 2, 3], 2), b'\x39')
        self.assertEqual(pack_codes([0x1ff], 9), b'\xff\x01')
        np.testing.assert_array_equal(unpack_codes(b'\x39', 2, 3), [1, 2, 3])

    def test_rejects_overflow_and_padding(self):
        with self.assertRaises(ContractError):
            pack_codes([4], 2)
        with self.assertRaises(ValueError):
            unpack_codes(b'\xf9', 2, 3)


class FrameTests(TestCase):
    def test_frame_size_and_decode(self):
        frame = quantize(activations(), 8, 99, tensor_id=7)
        data = encode_bytes(frame)
        self.assertEqual(len(data), frame_size(frame.shape, 8, frame.inlier_count, frame.outlier_count))
        self.assertEqual(decode_bytes(data), frame)
        self.assertEqual(encode_bytes(decode_bytes(data)), data)

    def test_compression(self):
        shape = (16, 16, 64)
        frame = quantize(activations(shape), 8, 99)
        ratio = len(encode_bytes(frame)) / raw_frame_size(shape)
        self.assertLess(ratio, 0.3)
        self.assertEqual(len(encode_raw(activations(shape))), raw_frame_size(shape))

    def test_compression_at_scale(self):
        data = np.random.default_rng(5).standard_normal(100000).astype(np.float32)
        frame = quantize(data, 8, 99)
        self.assertLessEqual(frame.outlier_count, 1000)
        ratio = len(encode_bytes(frame)) / raw_frame_size(data.shape)
        self.assertGreaterEqual(ratio, 0.25)
        self.assertLessEqual(ratio, 0.30)

    def test_corrupt_frames(self):
        data = bytearray(encode_bytes(quantize(activations(), 8, 99)))
        flipped = bytes(data[:20]) + bytes([data[20] ^ 0xff]) + bytes(data[21:])
        with self.assertRaises(DecodeError):
            decode_bytes(flipped)
        with self.assertRaises(DecodeError):
            decode_bytes(bytes(data[:-10]))
        with self.assertRaises(DecodeError):
            decode_bytes(b'GT')
        with self.assertRaises(DecodeError):
            decode_bytes(encode_raw(np.ones(3)))
        with self.assertRaises(DecodeError):
            decode_raw(bytes(data))

    def test_outlier_below_threshold(self):
        frame = quantize(activations(), 8, 99)
        frame.outlier_values = frame.outlier_values.copy()
        frame.outlier_values[0] = frame.threshold
        with self.assertRaises(DecodeError):
            decode_bytes(encode_bytes(frame))


class TensorCodecTests(TestCase):
    def test_raw_is_exact(self):
        codec = TensorCodec(enabled=False)
        data = activations()
        encoded = codec.encode(data, tensor_id=3)
        self.assertEqual(encoded[:4], RAW_MAGIC)
        np.testing.assert_array_equal(codec.decode(encoded), data)
        self.assertEqual(decode_raw(encoded).tensor_id, 3)

    def test_decode_dispatches_on_magic(self):
        data = activations()
        quantized = TensorCodec(bits=8).encode(data)
        raw = TensorCodec(enabled=False).encode(data)
        receiver = TensorCodec(enabled=False)
        self.assertEqual(receiver.decode(quantized).shape, data.shape)
        self.assertEqual(receiver.decode(raw, dtype=np.float64).dtype, np.float64)
        with self.assertRaises(DecodeError):
            receiver.decode(b'XXXX' + raw[4:])
