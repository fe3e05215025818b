"""
distance correlation between the token embeddings and the input adapter
output, and the regularized fine-tuning loss

    loss = cross_entropy(logits, targets) + lambda * dCor(emb(x), adapter(x))

Samples are token positions: a batch x seq x d tensor contributes batch*seq
rows. Distances are cosine distances, so the statistic ignores row scale.
"""
import logging
from dataclasses import dataclass

import numpy as np

from guarded_tuning import tensor as T
from guarded_tuning.errors import ConfigError, ContractError, DimensionError
from guarded_tuning.tensor import Tensor

logger = logging.getLogger(__name__)

# squared distance variance below this counts as a constant sample
DVAR_FLOOR = 1e-12


@dataclass(frozen=True)
class DecorrelationConfig:
    lam: float = 5.0
    epsilon: float = 1e-8
    embedding_grad: bool = True

    def validate(self):
        errors = []
        if self.lam < 0:
            errors.append(f'decorrelation.lambda: must be >= 0, got {self.lam}')
        if self.epsilon <= 0:
            errors.append(f'decorrelation.epsilon: must be > 0, got {self.epsilon}')
        if errors:
            raise ConfigError(errors)
        return self


def normalize_rows(x, eps=1e-8):
    """ x_i / max(||x_i||, eps) for every row of a 2-D tensor """
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, x.dtype.type(eps))
    out = x.data / denom
    floored = norms <= eps

    def _backward(grad):
        along = (out * grad).sum(axis=1, keepdims=True)
        grad_x = (grad - np.where(floored, 0.0, along) * out) / denom
        return (grad_x.astype(x.dtype),)

    return T.apply('normalize_rows', (x,), out, _backward)


def _rows(x, what):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (-1, x.shape[-1]))
    if x.ndim != 2:
        raise DimensionError(f'{what}: expected n x d samples, got shape {x.shape}')
    return x


def cosine_distance_matrix(rows, eps=1e-8):
    """ D[i][j] = 1 - cos(r_i, r_j), symmetric with an exact zero diagonal

    Args:
        rows (Tensor): n x d, n >= 2
        eps (float): norm floor for (near) zero rows
    """
    rows = _rows(rows, 'cosine_distance_matrix')
    n = rows.shape[0]
    if n < 2:
        raise ContractError(f'cosine_distance_matrix needs at least 2 rows, got {n}')
    unit = normalize_rows(rows, eps)
    dist = T.add_scalar(T.neg(T.matmul(unit, T.transpose(unit))), 1.0)
    dist = T.scale(T.add(dist, T.transpose(dist)), 0.5)
    off_diagonal = Tensor(1.0 - np.eye(n, dtype=rows.dtype), dtype=rows.dtype)
    return T.mul(dist, off_diagonal)


def double_center(dist):
    """ A = D - row means - column means + grand mean

    The map is linear and self-adjoint, so its backward is itself.
    """
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise DimensionError(f'double_center needs a square matrix, got {dist.shape}')

    def center(m):
        return (m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()).astype(m.dtype)

    return T.apply('double_center', (dist,), center(dist.data), lambda grad: (center(grad),))


def distance_correlation(x, y, eps=1e-8):
    """ sample distance correlation of two paired samples under cosine distance

    Args:
        x (Tensor): n x d1 (or batch x seq x d1)
        y (Tensor): n x d2 (or batch x seq x d2)

    Returns:
        scalar Tensor in [0, 1], exactly 0 when either sample is constant
    """
    x, y = _rows(x, 'distance_correlation'), _rows(y, 'distance_correlation')
    if x.shape[0] != y.shape[0]:
        raise ContractError(f'distance_correlation needs paired samples, got {x.shape[0]} and {y.shape[0]} rows')
    a = double_center(cosine_distance_matrix(x, eps))
    b = double_center(cosine_distance_matrix(y, eps))
    dvar_x = T.mean(T.mul(a, a))
    dvar_y = T.mean(T.mul(b, b))
    if dvar_x.item() < DVAR_FLOOR or dvar_y.item() < DVAR_FLOOR:
        return Tensor(np.zeros((), dtype=x.dtype))
    dcov = T.mean(T.mul(a, b))
    ratio = T.div(dcov, T.sqrt(T.mul(dvar_x, dvar_y)))
    return T.sqrt(T.clamp_min(ratio, DVAR_FLOOR))


def composite_loss(logits, targets, emb_x, theta_x, cfg, ignore_index=-1, parts=False):
    """ task cross entropy plus lambda times dCor(emb(x), theta(x))

    Args:
        logits (Tensor): batch x seq x vocab
        targets (np.ndarray): batch x seq class ids, ignore_index for no target
        emb_x (Tensor): the embeddings fed to the input adapter
        theta_x (Tensor): the input adapter output
        cfg (DecorrelationConfig): weight and norm floor
        parts (bool): also return the task loss and the dCor value

    Returns:
        scalar Tensor, or (loss, task_loss, dcor) with parts=True
    """
    task = T.cross_entropy_loss(logits, targets, ignore_index=ignore_index)
    if cfg.lam == 0:
        zero = Tensor(np.zeros((), dtype=task.dtype))
        return (task, task, zero) if parts else task
    if not cfg.embedding_grad:
        emb_x = emb_x.detach()
    dcor = distance_correlation(emb_x, theta_x, cfg.epsilon)
    loss = T.add(task, T.scale(dcor, cfg.lam))
    logger.debug('task loss %.5f, dcor %.5f, lambda %s', task.item(), dcor.item(), cfg.lam)
    return (loss, task, dcor) if parts else loss
