"""
guarded_tuning.tensor implements dense tensors with reverse-mode automatic
differentiation, sufficient for a small GPT-style transformer and the
decorrelation loss.

Primitives are recorded on the active Tape whenever any of their inputs
requires a gradient:

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape():
        loss = mean(matmul(x, w))
    backward(loss)
    w.grad

Values are 32-bit by default. Every primitive preserves the dtype of its
inputs, so a model built from 64-bit parameters runs in 64-bit throughout.

Broadcasting is limited to leading batch dimensions: in add, sub, mul and div
one operand's shape must equal, or be a suffix of, the other's. Anything else
needs an explicit reshape.

The tape is a plain ordered list. Backward replays it in reverse, each entry
exactly once, accumulating gradients by tensor identity, and then clears it.
A tape may be seeded with gradients of any of its tensors (see Tape.backward),
which is how the split protocols resume backpropagation at a cut point.
"""
import contextvars
import math

import numpy as np

from guarded_tuning.errors import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE = contextvars.ContextVar('guarded_tuning_tape', default=None)


class Tensor:
    """ a dense array with an optional gradient slot

    Args:
        data (array-like): the values, row-major
        requires_grad (bool): if True, operations on an active tape record
            this tensor and backward() populates .grad
        dtype (np.dtype): defaults to the dtype of a floating ndarray, else
            DEFAULT_DTYPE
        name (str): optional name, used by checkpoints and error messages
    """
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_tape')

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and data.dtype.kind == 'f'
            dtype = data.dtype if is_float else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.size != 1:
            raise ContractError(f'item() needs a single value, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        """ a new tensor with the same values, cut from any tape """
        return Tensor(self.data, dtype=self.dtype, name=self.name)

    def copy(self, requires_grad=None):
        requires_grad = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=requires_grad, dtype=self.dtype, name=self.name)

    def zero_grad(self):
        self.grad = None

    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        name = f' name={self.name}' if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{name}, requires_grad={self.requires_grad})'


class _Entry:
    __slots__ = ('op', 'inputs', 'output', 'backward')

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """ AutodiffTape, the ordered record of primitive applications

    Usage::

        with Tape() as tape:
            loss = ...
        tape.backward([(loss, np.ones_like(loss.data))])   # or backward(loss)

    A tape can be entered repeatedly. Tapes nest: the innermost one records.
    Tensors produced on another tape are leaves of this one.
    """

    def __init__(self):
        self.entries = []
        self._produced = set()
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward_fn):
        self.entries.append(_Entry(op, inputs, output, backward_fn))
        self._produced.add(id(output))
        output._tape = self

    def backward(self, seeds):
        """ replay the tape in reverse and populate gradients

        Args:
            seeds (list): pairs (tensor, gradient) to start from. The same
              tensor may appear more than once, gradients are summed.

        Leaf tensors (not produced on this tape) accumulate into .grad,
        tensors produced here get their total gradient assigned to .grad.
        The tape is empty afterwards.
        """
        grads = {}
        tensors = {}
        for tensor, grad in seeds:
            grad = np.asarray(grad, dtype=tensor.dtype)
            if grad.shape != tensor.shape:
                raise DimensionError(f'seed gradient has shape {grad.shape}, tensor has {tensor.shape}')
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            tensors[key] = tensor
        for entry in reversed(self.entries):
            grad = grads.get(id(entry.output))
            if grad is None:
                continue
            for inp, inp_grad in zip(entry.inputs, entry.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                _check_finite(entry.op, inp_grad, 'backward')
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + inp_grad
                else:
                    grads[key] = inp_grad
                    tensors[key] = inp
        for key, grad in grads.items():
            tensor = tensors[key]
            if not tensor.requires_grad:
                continue
            if key in self._produced or tensor.grad is None:
                tensor.grad = grad
            else:
                tensor.grad = tensor.grad + grad
        self.entries = []
        self._produced = set()


def backward(loss):
    """ backpropagate from a scalar loss over the tape that produced it """
    if loss.size != 1:
        raise ContractError(f'backward() needs a scalar loss, got shape {loss.shape}')
    if loss._tape is None:
        raise ContractError('loss was not produced under an active tape')
    loss._tape.backward([(loss, np.ones_like(loss.data))])


def apply(op, inputs, data, backward_fn):
    """ create the output of a primitive and record it when needed

    Args:
        op (str): the primitive name
        inputs (tuple): the input Tensors
        data (np.ndarray): the computed output values
        backward_fn (callable): maps the output gradient to a tuple of
            input gradients (None for inputs without a gradient)

    Returns:
        Tensor
    """
    _check_finite(op, data, 'forward')
    tape = _ACTIVE_TAPE.get()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
    if requires_grad:
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def _check_finite(op, data, where):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f'{op} produced non-finite values in {where} pass')


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# elementwise
def _broadcast_check(op, a, b):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} differ beyond leading batch dimensions')


def _reduce_to(grad, shape):
    # sum a gradient over the leading dimensions that were broadcast
    if grad.shape == shape:
        return grad
    summed = grad.reshape((-1,) + tuple(shape)).sum(axis=0)
    return np.asarray(summed, dtype=grad.dtype)


def add(a, b):
    _broadcast_check('add', a, b)

    def _backward(grad):
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)

    return apply('add', (a, b), a.data + b.data, _backward)


def sub(a, b):
    _broadcast_check('sub', a, b)

    def _backward(grad):
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)

    return apply('sub', (a, b), a.data - b.data, _backward)


def mul(a, b):
    _broadcast_check('mul', a, b)

    def _backward(grad):
        return _reduce_to(grad * b.data, a.shape), _reduce_to(grad * a.data, b.shape)

    return apply('mul', (a, b), a.data * b.data, _backward)


def div(a, b):
    _broadcast_check('div', a, b)

    def _backward(grad):
        return (_reduce_to(grad / b.data, a.shape),
                _reduce_to(-grad * a.data / (b.data * b.data), b.shape))

    return apply('div', (a, b), a.data / b.data, _backward)


def scale(a, factor):
    factor = float(factor)
    return apply('scale', (a,), a.data * factor, lambda grad: (grad * factor,))


def add_scalar(a, value):
    value = float(value)
    return apply('add_scalar', (a,), a.data + value, lambda grad: (grad,))


def neg(a):
    return apply('neg', (a,), -a.data, lambda grad: (-grad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return apply('sqrt', (a,), out, lambda grad: (grad * 0.5 / out,))


def clamp_min(a, low):
    low = float(low)
    mask = a.data > low
    return apply('clamp_min', (a,), np.maximum(a.data, low), lambda grad: (grad * mask,))


def gelu(x):
    """ GELU, tanh approximation """
    c = math.sqrt(2.0 / math.pi)
    x3 = x.data * x.data * x.data
    t = np.tanh(c * (x.data + 0.044715 * x3))
    out = 0.5 * x.data * (1.0 + t)

    def _backward(grad):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x.data * x.data)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return apply('gelu', (x,), out, _backward)


# shape
def matmul(a, b):
    """ matrix product over the last two axes

    b is either a matrix (weights, shared across a's leading dims) or has the
    same leading dims as a.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f'matmul needs rank >= 2, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul inner dimensions differ: {a.shape} x {b.shape}')
    if b.ndim == 2:
        k, n = b.shape

        def _backward(grad):
            grad_a = grad @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ grad.reshape(-1, n)
            return grad_a, grad_b
    elif a.shape[:-2] == b.shape[:-2]:
        def _backward(grad):
            return grad @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ grad
    else:
        raise DimensionError(f'matmul batch dimensions differ: {a.shape} x {b.shape}')
    return apply('matmul', (a, b), np.matmul(a.data, b.data), _backward)


def transpose(a, axes=None):
    """ permute axes, by default swap the last two """
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f'transpose needs rank >= 2, got {a.shape}')
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f'transpose axes {axes} do not match rank {a.ndim}')
    inverse = tuple(np.argsort(axes))
    return apply('transpose', (a,), np.ascontiguousarray(np.transpose(a.data, axes)),
                 lambda grad: (np.transpose(grad, inverse),))


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f'cannot reshape {a.shape} to {shape}') from e
    return apply('reshape', (a,), out, lambda grad: (grad.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f'cannot concat shapes {[t.shape for t in tensors]}') from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply('concat', tensors, out, lambda grad: tuple(np.split(grad, bounds, axis=axis)))


# reductions
def _expand_back(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.ascontiguousarray(np.broadcast_to(grad, shape))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return apply('sum', (a,), out, lambda grad: (_expand_back(grad, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    count = a.size // max(out.size, 1)
    return apply('mean', (a,), out,
                 lambda grad: (_expand_back(grad / count, a.shape, axis, keepdims),))


# neural network primitives
def embedding(weight, ids):
    """ gather rows of weight (V x d) by integer ids of any shape """
    ids = np.asarray(ids)
    if ids.dtype.kind not in 'iu':
        raise ContractError(f'embedding ids must be integers, got {ids.dtype}')
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f'token id out of range [0, {weight.shape[0]})')

    def _backward(grad):
        grad_w = np.zeros_like(weight.data)
        np.add.at(grad_w, ids.reshape(-1), grad.reshape(-1, weight.shape[1]))
        return (grad_w,)

    return apply('embedding', (weight,), weight.data[ids], _backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """ normalize over the last axis """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def _backward(grad):
        grad_xhat = grad * gamma.data
        grad_x = rstd * (grad_xhat
                         - grad_xhat.mean(axis=-1, keepdims=True)
                         - xhat * (grad_xhat * xhat).mean(axis=-1, keepdims=True))
        return grad_x, _reduce_to(grad * xhat, gamma.shape), _reduce_to(grad, beta.shape)

    return apply('layer_norm', (x, gamma, beta), out, _backward)


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f'softmax axis {axis} invalid for rank {x.ndim}')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(grad):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)

    return apply('softmax', (x,), out, _backward)


def cross_entropy_loss(logits, targets, ignore_index=-1, reduction='mean'):
    """ negative log-softmax probability of the targets

    Args:
        logits (Tensor): shape (..., V)
        targets (array-like): integer class indices, shape (...)
        ignore_index (int): targets with this value do not contribute
        reduction (str): 'mean' over contributing positions, or 'sum'

    Returns:
        scalar Tensor
    """
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise DimensionError(f'{targets.shape[0]} targets for {flat.shape[0]} logit rows')
    valid = targets != ignore_index
    picked = targets[valid]
    if picked.size and (picked.min() < 0 or picked.max() >= vocab):
        raise IndexError(f'target out of range [0, {vocab})')
    count = int(valid.sum())
    if count == 0:
        raise ContractError('cross_entropy_loss needs at least one target')
    rows = np.nonzero(valid)[0]
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    total = -log_probs[rows, picked].sum()
    divisor = count if reduction == 'mean' else 1
    out = np.asarray(total / divisor, dtype=logits.dtype)

    def _backward(grad):
        probs = np.exp(log_probs)
        probs[rows, picked] -= 1.0
        probs[~valid] = 0.0
        return ((probs * (float(grad) / divisor)).reshape(logits.shape),)

    return apply('cross_entropy', (logits,), out, _backward)
