import numpy as np

from guarded_tuning.errors import DimensionError


class AdamState:
    """ first/second moment buffers and the timestep of one Adam optimizer """

    def __init__(self, params=None):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params or []]
        self.v = [np.zeros_like(p.data) for p in params or []]


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """ one Adam update with bias correction, in place

    Args:
        params (list): Tensors to update
        grads (list): gradients as arrays, None leaves the parameter untouched
        state (AdamState): moment buffers matching params
        lr, beta1, beta2, eps (float): the usual hyper-parameters
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError(f'{len(params)} params, {len(grads)} grads, {len(state.m)} state buffers')
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        if grad is None:
            continue
        if grad.shape != param.shape or m.shape != param.shape:
            raise DimensionError(f'{param.name}: grad {grad.shape} / state {m.shape} vs param {param.shape}')
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """ Adam over a fixed list of parameters

    Usage::

        opt = Adam(segment.parameters(), lr=1e-3)
        ... backward(loss)
        opt.step()
        opt.zero_grad()
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()
