"""
guarded_tuning.model implements a desk-scale decoder-only transformer and its
partition into the segments the two parties hold:

* input adapter  - token + position embeddings and the bottom layers (client)
* backbone       - the middle layers (server)
* output adapter - the top layers, final layer norm and LM head (client)

An Emulator is a frozen copy of a uniform subset of the backbone layers that
the server may ship to the client for fully local fine-tuning.

Parameters are named by their global layer index (``layer.3.attn.wq``), so the
same name denotes the same weights in every segment, checkpoint and emulator.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from guarded_tuning import tensor as T
from guarded_tuning.errors import ConfigError, ContractError, DimensionError
from guarded_tuning.tensor import Tensor

INPUT, BACKBONE, OUTPUT, EMULATOR = 'input_adapter', 'backbone', 'output_adapter', 'emulator'
_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers_total: int = 6
    max_seq_len: int = 16
    split: tuple = (1, 4, 1)
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, 'split', tuple(self.split))

    def validate(self):
        errors = []
        for name in ('vocab_size', 'd_model', 'n_heads', 'n_layers_total', 'max_seq_len'):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                errors.append(f'model.{name}: must be a positive integer')
        if not errors and self.d_model % self.n_heads:
            errors.append(f'model.d_model: {self.d_model} is not divisible by n_heads={self.n_heads}')
        if len(self.split) != 3 or any(not isinstance(n, int) or n < 1 for n in self.split):
            errors.append(f'model.split: need three positive layer counts, got {list(self.split)}')
        elif sum(self.split) != self.n_layers_total:
            errors.append(f'model.split: {"-".join(map(str, self.split))} does not sum to '
                          f'n_layers_total={self.n_layers_total}')
        if self.init_std <= 0:
            errors.append('model.init_std: must be > 0')
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def n_in_adapter(self):
        return self.split[0]

    @property
    def n_backbone(self):
        return self.split[1]

    def layer_indices(self):
        """ return the global layer indices of (input adapter, backbone, output adapter) """
        n_in, n_bb, _ = self.split
        return (tuple(range(0, n_in)),
                tuple(range(n_in, n_in + n_bb)),
                tuple(range(n_in + n_bb, self.n_layers_total)))

    def to_dict(self):
        values = asdict(self)
        values['split'] = list(self.split)
        return values


def _layer_of(name):
    # 'layer.3.attn.wq' => 3, None for embeddings/head
    return int(name.split('.')[1]) if name.startswith('layer.') else None


def _causal_mask(seq_len, dtype):
    mask = np.triu(np.ones((seq_len, seq_len), dtype=dtype), k=1) * _MASK_VALUE
    return Tensor(mask.astype(dtype))


def _attention(params, prefix, x, n_heads, mask):
    batch, seq, d_model = x.shape
    head_dim = d_model // n_heads

    def heads(t):
        return T.transpose(T.reshape(t, (batch, seq, n_heads, head_dim)), (0, 2, 1, 3))

    q = heads(T.matmul(x, params[prefix + 'wq']))
    k = heads(T.matmul(x, params[prefix + 'wk']))
    v = heads(T.matmul(x, params[prefix + 'wv']))
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(head_dim))
    weights = T.softmax(T.add(scores, mask), axis=-1)
    out = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    out = T.reshape(out, (batch, seq, d_model))
    return T.add(T.matmul(out, params[prefix + 'wo']), params[prefix + 'bo'])


def block_forward(params, index, x, n_heads):
    """ one pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)) """
    p = f'layer.{index}.'
    mask = _causal_mask(x.shape[1], x.dtype)
    h = T.layer_norm(x, params[p + 'ln1.gamma'], params[p + 'ln1.beta'])
    x = T.add(x, _attention(params, p + 'attn.', h, n_heads, mask))
    h = T.layer_norm(x, params[p + 'ln2.gamma'], params[p + 'ln2.beta'])
    h = T.gelu(T.add(T.matmul(h, params[p + 'mlp.w1']), params[p + 'mlp.b1']))
    h = T.add(T.matmul(h, params[p + 'mlp.w2']), params[p + 'mlp.b2'])
    return T.add(x, h)


class Segment:
    """ a contiguous run of transformer layers, held by one party

    Args:
        kind (str): one of INPUT, BACKBONE, OUTPUT, EMULATOR
        layer_indices (tuple): global layer indices, in forward order
        params (OrderedDict): name => Tensor
        config (ModelConfig): the model this segment was cut from
    """

    def __init__(self, kind, layer_indices, params, config):
        self.kind = kind
        self.layer_indices = tuple(layer_indices)
        self.params = OrderedDict(params)
        self.config = config

    def __repr__(self):
        return f'<Segment({self.kind}, layers={list(self.layer_indices)})>'

    def parameters(self):
        return list(self.params.values())

    def trainable(self):
        return [p for p in self.params.values() if p.requires_grad]

    def state_dict(self):
        return OrderedDict(self.params)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self, requires_grad=None):
        """ a deep copy, never sharing memory with this segment """
        params = OrderedDict((name, p.copy(requires_grad=requires_grad)) for name, p in self.params.items())
        return self.__class__(self.kind, self.layer_indices, params, self.config)

    @classmethod
    def from_state(cls, kind, state, config, requires_grad=True, dtype=np.float32):
        """ rebuild a segment from name => array, e.g. a decoded checkpoint """
        params = OrderedDict((name, Tensor(np.array(value, dtype=dtype), requires_grad=requires_grad, name=name))
                             for name, value in state.items())
        layers = sorted({_layer_of(name) for name in params if _layer_of(name) is not None})
        return cls(kind, layers, params, config)

    def forward(self, x):
        """ forward_segment: run this segment on token ids (input adapter) or activations """
        if self.kind == INPUT:
            return self.forward_embeddings(embed_only(self, x))
        _check_activations(x, self.config)
        h = self.layers_forward(x)
        if self.kind == OUTPUT:
            h = T.layer_norm(h, self.params['ln_f.gamma'], self.params['ln_f.beta'])
            h = T.add(T.matmul(h, self.params['head.w']), self.params['head.b'])
        return h

    def forward_embeddings(self, h):
        """ run the layers of an input adapter on already embedded inputs """
        if self.kind != INPUT:
            raise ContractError(f'forward_embeddings is for the input adapter, not {self.kind}')
        _check_activations(h, self.config)
        return self.layers_forward(h)

    def layers_forward(self, h):
        for index in self.layer_indices:
            h = block_forward(self.params, index, h, self.config.n_heads)
        return h

    __call__ = forward


class Emulator(Segment):
    """ a frozen, uniformly layer-dropped copy of the backbone

    The kept list holds positions relative to the backbone (0 is the first
    backbone layer), layer_indices holds the matching global indices.
    """

    def __init__(self, kind, layer_indices, params, config, kept=None):
        super().__init__(kind, layer_indices, params, config)
        offset = config.n_in_adapter
        self.kept = tuple(kept) if kept is not None else tuple(i - offset for i in self.layer_indices)

    def copy(self, requires_grad=None):
        params = OrderedDict((name, p.copy(requires_grad=requires_grad)) for name, p in self.params.items())
        return Emulator(self.kind, self.layer_indices, params, self.config, kept=self.kept)


def _check_activations(x, config):
    if not isinstance(x, Tensor):
        raise ContractError('token ids are only accepted by the input adapter')
    if x.ndim != 3 or x.shape[-1] != config.d_model:
        raise DimensionError(f'expected activations batch x seq x {config.d_model}, got {x.shape}')
    if x.shape[1] > config.max_seq_len:
        raise DimensionError(f'sequence length {x.shape[1]} exceeds max_seq_len={config.max_seq_len}')


def _check_ids(ids, config):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f'expected token ids batch x seq, got shape {ids.shape}')
    if ids.shape[1] > config.max_seq_len:
        raise DimensionError(f'sequence length {ids.shape[1]} exceeds max_seq_len={config.max_seq_len}')
    return ids


def embed_only(input_adapter, ids):
    """ emb(x): token embedding plus learned position embedding, before any layer """
    if isinstance(ids, Tensor):
        raise ContractError('embed_only takes integer token ids, not a Tensor')
    ids = _check_ids(ids, input_adapter.config)
    tokens = T.embedding(input_adapter.params['tok_emb'], ids)
    positions = T.embedding(input_adapter.params['pos_emb'], np.arange(ids.shape[1]))
    return T.add(tokens, positions)


def embed_soft(input_adapter, probs):
    """ embeddings of token distributions (batch x seq x vocab), used by the attacker """
    tokens = T.matmul(probs, input_adapter.params['tok_emb'])
    positions = T.embedding(input_adapter.params['pos_emb'], np.arange(probs.shape[1]))
    return T.add(tokens, positions)


def forward_segment(segment, x):
    return segment.forward(x)


@dataclass
class ModelPartition:
    """ the three segments of one model, plus an optional emulator """
    config: ModelConfig
    input_adapter: Segment
    backbone: Segment
    output_adapter: Segment
    emulator: Emulator = field(default=None)

    def segments(self):
        return [self.input_adapter, self.backbone, self.output_adapter]

    def forward(self, ids):
        """ chain the three segments (no codec in the path) """
        return self.output_adapter(self.backbone(self.input_adapter(ids)))

    def state_dict(self):
        state = OrderedDict()
        for segment in self.segments():
            state.update(segment.params)
        return state

    def copy(self, requires_grad=None):
        return ModelPartition(self.config,
                              self.input_adapter.copy(requires_grad),
                              self.backbone.copy(requires_grad),
                              self.output_adapter.copy(requires_grad),
                              self.emulator.copy() if self.emulator is not None else None)

    def manifest(self):
        """ the partition sidecar: segment => global layer indices """
        segments = {segment.kind: list(segment.layer_indices) for segment in self.segments()}
        if self.emulator is not None:
            segments[EMULATOR] = list(self.emulator.layer_indices)
        return {
            'version': 1,
            'model': self.config.to_dict(),
            'segments': segments,
        }


def _init_params(config, seed, dtype):
    rng = np.random.default_rng(seed)
    d, hidden = config.d_model, 4 * config.d_model
    std = config.init_std
    proj_std = std / math.sqrt(2 * config.n_layers_total)

    def normal(shape, scale):
        return rng.standard_normal(shape, dtype=dtype) * dtype(scale)

    params = OrderedDict()
    params['tok_emb'] = normal((config.vocab_size, d), std)
    params['pos_emb'] = normal((config.max_seq_len, d), std)
    for i in range(config.n_layers_total):
        p = f'layer.{i}.'
        params[p + 'ln1.gamma'] = np.ones(d, dtype=dtype)
        params[p + 'ln1.beta'] = np.zeros(d, dtype=dtype)
        params[p + 'attn.wq'] = normal((d, d), std)
        params[p + 'attn.wk'] = normal((d, d), std)
        params[p + 'attn.wv'] = normal((d, d), std)
        params[p + 'attn.wo'] = normal((d, d), proj_std)
        params[p + 'attn.bo'] = np.zeros(d, dtype=dtype)
        params[p + 'ln2.gamma'] = np.ones(d, dtype=dtype)
        params[p + 'ln2.beta'] = np.zeros(d, dtype=dtype)
        params[p + 'mlp.w1'] = normal((d, hidden), std)
        params[p + 'mlp.b1'] = np.zeros(hidden, dtype=dtype)
        params[p + 'mlp.w2'] = normal((hidden, d), proj_std)
        params[p + 'mlp.b2'] = np.zeros(d, dtype=dtype)
    params['ln_f.gamma'] = np.ones(d, dtype=dtype)
    params['ln_f.beta'] = np.zeros(d, dtype=dtype)
    params['head.w'] = normal((d, config.vocab_size), std)
    params['head.b'] = np.zeros(config.vocab_size, dtype=dtype)
    return params


def build_model(config, seed, dtype=np.float32):
    """ initialize a model deterministically from seed and partition it per config.split

    Weights are drawn in global layer order, so the values do not depend on
    the split.
    """
    config.validate()
    dtype = np.dtype(dtype).type
    arrays = _init_params(config, seed, dtype)
    in_idx, bb_idx, out_idx = config.layer_indices()
    buckets = {INPUT: OrderedDict(), BACKBONE: OrderedDict(), OUTPUT: OrderedDict()}
    for name, value in arrays.items():
        layer = _layer_of(name)
        if layer is None:
            kind = INPUT if name in ('tok_emb', 'pos_emb') else OUTPUT
        elif layer in in_idx:
            kind = INPUT
        elif layer in bb_idx:
            kind = BACKBONE
        else:
            kind = OUTPUT
        buckets[kind][name] = Tensor(value, requires_grad=True, name=name)
    return ModelPartition(config,
                          Segment(INPUT, in_idx, buckets[INPUT], config),
                          Segment(BACKBONE, bb_idx, buckets[BACKBONE], config),
                          Segment(OUTPUT, out_idx, buckets[OUTPUT], config))


def emulator_indices(n_backbone, emulator_size):
    """ round(i * (n - 1) / (size - 1)), half away from zero, for i in 0..size-1 """
    if not 2 <= emulator_size <= n_backbone:
        raise ConfigError(f'emulator_size: must be in [2, {n_backbone}], got {emulator_size}')
    span, steps = n_backbone - 1, emulator_size - 1
    return [(2 * i * span + steps) // (2 * steps) for i in range(emulator_size)]


def build_emulator(backbone, emulator_size):
    """ drop backbone layers uniformly, always keeping the first and last one """
    kept = emulator_indices(len(backbone.layer_indices), emulator_size)
    layers = [backbone.layer_indices[i] for i in kept]
    prefixes = tuple(f'layer.{i}.' for i in layers)
    params = OrderedDict((name, p.copy(requires_grad=False))
                         for name, p in backbone.params.items() if name.startswith(prefixes))
    return Emulator(EMULATOR, layers, params, backbone.config, kept=kept)


def unsplit_forward(params, config, ids):
    """ the monolithic model over a flat name => Tensor mapping, layer 0 to L-1 """
    return stack_forward(params, config, range(config.n_layers_total), ids)


def stack_forward(params, config, layers, ids):
    """ embeddings, the given layers in order, final norm and head, in one pass """
    ids = _check_ids(ids, config)
    h = T.add(T.embedding(params['tok_emb'], ids),
              T.embedding(params['pos_emb'], np.arange(ids.shape[1])))
    for index in layers:
        h = block_forward(params, index, h, config.n_heads)
    h = T.layer_norm(h, params['ln_f.gamma'], params['ln_f.beta'])
    return T.add(T.matmul(h, params['head.w']), params['head.b'])
