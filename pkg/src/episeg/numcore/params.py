"""Named trainable arrays, gradient evaluation and finite-difference checks."""
import numpy as np

from .autograd import Tensor


class Params:
    """Ordered name -> Tensor mapping with per-array trainable flags."""

    def __init__(self, arrays=None, frozen=()):
        self._tensors = {}
        for name, value in (arrays or {}).items():
            self.add(name, value, trainable=name not in frozen)

    def add(self, name, value, trainable=True):
        self._tensors[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        return self._tensors[name]

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def trainable(self, name):
        return self._tensors[name].requires_grad

    def set_trainable(self, name, flag):
        self._tensors[name].requires_grad = bool(flag)

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def grad(self, name):
        g = self._tensors[name].grad
        return np.zeros_like(self._tensors[name].data) if g is None else g

    def arrays(self):
        return {k: t.data for k, t in self._tensors.items()}

    def copy(self):
        out = Params()
        for k, t in self._tensors.items():
            out.add(k, t.data.copy(), trainable=t.requires_grad)
        return out


def gradients(loss_fn, params):
    """Evaluate ``loss_fn(params)`` and populate every trainable gradient in place."""
    params.zero_grad()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    for name in params:
        t = params[name]
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
    return params


def rel_error(analytic, numeric, floor=1e-2):
    # the floor keeps near-zero gradients from turning FD noise into huge ratios
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn, params, points=20, step=1e-4, seed=0, names=None, floor=1e-2):
    """Compare analytic gradients with central differences.

    ``points`` random entries are probed per trainable array (all entries when the
    array is smaller).  Returns ``{name: max relative error}``.
    """
    gradients(loss_fn, params)
    analytic = {n: params.grad(n).copy() for n in params if params.trainable(n)}
    rng = np.random.default_rng(seed)
    report = {}
    for name in names or list(analytic):
        data = params[name].data
        flat = data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= points else rng.choice(n, size=points, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params).item()
            flat[i] = orig - step
            down = loss_fn(params).item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, rel_error(analytic[name].reshape(-1)[i], numeric, floor))
        report[name] = worst
    return report
