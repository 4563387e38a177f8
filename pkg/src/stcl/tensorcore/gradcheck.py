"""Central finite-difference check of tape gradients."""
import numpy as np

from stcl.tensorcore.tensor import Tape, Tensor, backward, no_grad


def grad_check(f, inputs, h=1e-5):
    """Largest relative disagreement between analytic and numeric gradients.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``inputs`` (a tensor or a list of tensors), and must be deterministic.
    The error for one coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    with Tape():
        loss = f()
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    with no_grad():
        for x in inputs:
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    for x, rg in zip(inputs, saved):
        x.requires_grad = rg
    return worst
