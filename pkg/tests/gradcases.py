"""Finite-difference harness shared by the kernel tests and the acceptance suite."""

import zlib

import numpy as np

from resdenoise import tensor_core as tc
from resdenoise.tensor_core import Parameter, grad_check


def _scalar_probe(gen, shape):
    """Random projection so the checked scalar is not a plain sum."""
    return gen.uniform(-1, 1, shape)


OP_CASES = ["conv1x1", "conv3x3", "conv3x3_s2", "conv_transpose", "maxpool", "bn_train", "bn_infer",
            "relu", "sigmoid", "silu", "add", "concat"]


def op_grad_error(op, step=1e-4):
    """Max relative error between the analytic and numeric gradients of one op."""
    gen = np.random.default_rng(zlib.crc32(op.encode()))
    x = Parameter("x", gen.uniform(-1, 1, (2, 4, 6, 3)))
    params = [x]

    if op.startswith("conv") and op != "conv_transpose":
        k = 1 if op == "conv1x1" else 3
        stride = 2 if op.endswith("s2") else 1
        w = Parameter("w", gen.uniform(-1, 1, (k, k, 3, 2)))
        b = Parameter("b", gen.uniform(-1, 1, 2))
        params += [w, b]
        fwd = lambda: tc.conv2d(x.value, w.value, b.value, stride)

        def bwd(d, c):
            x.grad, w.grad, b.grad = tc.conv2d_backward(d, c)
    elif op == "conv_transpose":
        w = Parameter("w", gen.uniform(-1, 1, (2, 2, 3, 2)))
        b = Parameter("b", gen.uniform(-1, 1, 2))
        params += [w, b]
        fwd = lambda: tc.conv2d_transpose(x.value, w.value, b.value)

        def bwd(d, c):
            x.grad, w.grad, b.grad = tc.conv2d_transpose_backward(d, c)
    elif op == "maxpool":
        fwd = lambda: tc.maxpool2(x.value)

        def bwd(d, c):
            x.grad = tc.maxpool2_backward(d, c)
    elif op.startswith("bn"):
        g = Parameter("gamma", gen.uniform(0.5, 1.5, 3))
        be = Parameter("beta", gen.uniform(-1, 1, 3))
        params += [g, be]
        train = op == "bn_train"
        state = tc.BatchNormState(gen.uniform(-0.5, 0.5, 3), gen.uniform(0.5, 2.0, 3))
        fwd = lambda: tc.batchnorm(x.value, g.value, be.value, state, train)

        def bwd(d, c):
            x.grad, g.grad, be.grad = tc.batchnorm_backward(d, c)
    elif op in ("relu", "sigmoid", "silu"):
        f_, b_ = getattr(tc, op), getattr(tc, op + "_backward")
        fwd = lambda: f_(x.value)

        def bwd(d, c):
            x.grad = b_(d, c)
    elif op == "add":
        y = Parameter("y", gen.uniform(-1, 1, x.shape))
        params.append(y)
        fwd = lambda: (tc.add(x.value, y.value), None)

        def bwd(d, c):
            x.grad, y.grad = d, d.copy()
    else:
        y = Parameter("y", gen.uniform(-1, 1, (2, 4, 6, 2)))
        params.append(y)
        fwd = lambda: tc.concat_channels(x.value, y.value)

        def bwd(d, c):
            x.grad, y.grad = tc.concat_channels_backward(d, c)

    probe = None

    def f():
        nonlocal probe
        out, cache = fwd()
        if probe is None:
            probe = _scalar_probe(gen, out.shape)
        bwd(probe, cache)
        return float(np.sum(out * probe))

    return grad_check(f, params, step=step)
