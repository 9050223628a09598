import numpy as np

from msgbart import tensor as T


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*arrays)
            flat[i] = orig - eps
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients from backward() of ``build(*tensors)`` (a scalar Tensor)."""
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def check_op_grad(build, arrays, tol=1e-6):
    """Max relative error between backward() and finite differences for ``build``."""
    value = lambda *xs: build(*(T.Tensor(x) for x in xs)).item()
    num = numeric_grad(value, [a.copy() for a in arrays])
    ana = analytic_grad(build, arrays)
    worst = 0.0
    for n, a in zip(num, ana):
        denom = np.maximum(np.maximum(np.abs(n), np.abs(a)), 1e-8)
        worst = max(worst, float(np.max(np.abs(n - a) / denom)) if n.size else 0.0)
    assert worst < tol, worst
    return worst
