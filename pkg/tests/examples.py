import numpy as np

from guarded_tuning.codec import TensorCodec
from guarded_tuning.config import resolve
from guarded_tuning.decorrelation import DecorrelationConfig
from guarded_tuning.model import ModelConfig, build_emulator, build_model
from guarded_tuning.protocol import Architecture, ClientEndpoint, EndpointFlags, OptimizerConfig, ServerEndpoint, \
    open_session, setup
from guarded_tuning.tensor import Tape, backward

# small enough for finite differences and sub-second protocol runs
TINY_MODEL = ModelConfig(vocab_size=80, d_model=16, n_heads=2, n_layers_total=4, max_seq_len=8, split=(1, 2, 1))

OPTIMIZER = OptimizerConfig(lr=1e-2)

TINY_RUN = {
    'model.vocab_size': 80,
    'model.d_model': 16,
    'model.n_heads': 2,
    'model.n_layers_total': 4,
    'model.max_seq_len': 8,
    'model.split': [1, 2, 1],
    'task.n_train': 64,
    'task.n_eval': 16,
    'training.steps': 6,
    'training.batch_size': 4,
    'attack.steps': 2,
    'attack.cadence': 3,
    'attack.inverter_steps': 20,
    'attack.inverter_hidden': 16,
    'attack.aux_size': 32,
    'attack.n_batches': 2,
    'attack.top_k': 2,
}


def tiny_config(**overrides):
    """ an ExperimentConfig for the tiny model, dotted keys as arguments with '__' for '.' """
    values = dict(TINY_RUN)
    values.update({k.replace('__', '.'): v for k, v in overrides.items()})
    return resolve(None, values)


def tiny_partition(seed=0, dtype=np.float32, config=TINY_MODEL):
    return build_model(config, seed, dtype=dtype)


def toy_batch(seed=0, batch=4, seq_len=7, vocab_size=80):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab_size, size=(batch, seq_len + 1))
    return tokens[:, :-1], tokens[:, 1:]


def batches(n, batch=4):
    return [toy_batch(seed=i, batch=batch) for i in range(n)]


def pretrained(arch, seed=0, dtype=np.float64):
    """ a tiny partition, with an emulator when the architecture ships one """
    partition = tiny_partition(seed, dtype)
    if Architecture(arch).ships_emulator:
        partition.emulator = build_emulator(partition.backbone, 2)
    return partition


def endpoints(arch, partition, quantize=False, lam=0.0, dtype=np.float64, transport=None):
    """ a client and server over a fresh session, after the transfer phase """
    flags = EndpointFlags(quantize_enabled=quantize, decorrelation=DecorrelationConfig(lam=lam))
    codec = TensorCodec(enabled=quantize)
    session = open_session(arch, transport=transport)
    client = ClientEndpoint(arch, flags, codec, OPTIMIZER, dtype=dtype)
    server = ServerEndpoint(partition, arch, flags, codec, OPTIMIZER)
    setup(client, server, session)
    return client, server, session


def analytic_grad(fn, *params):
    """ gradients of the scalar fn() with respect to params, via the tape """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = fn()
    backward(loss)
    return [p.grad for p in params]


def numeric_grad(fn, param, h=1e-6):
    """ central differences of the scalar fn() in every element of param """
    grad = np.zeros_like(param.data)
    for index in np.ndindex(param.shape):
        original = param.data[index]
        param.data[index] = original + h
        plus = fn().item()
        param.data[index] = original - h
        minus = fn().item()
        param.data[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-4)))
