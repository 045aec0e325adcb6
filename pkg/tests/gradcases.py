"""Random small instances of every differentiable op, for finite-difference checks.

Each builder takes a seed and returns ``(fn, inputs, h)`` where ``fn`` maps
the input tensors to a scalar.  Ops are projected to a scalar with random
weights so every output coordinate contributes.
"""
import numpy as np

from voxelseg import losses, unet3d
from voxelseg.nn import ops
from voxelseg.nn.tensor import Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _project(out, rng):
    return rng.normal(size=out.shape)


def conv_case(seed):
    rng = np.random.default_rng(seed)
    stride = 1 if seed % 3 else 2
    x, w, b = _t(rng.normal(size=(1, 4, 3, 3, 2))), _t(rng.normal(size=(3, 3, 3, 2, 2))), _t(rng.normal(size=2))
    probe = _project(ops.conv3d(x, w, b, stride), rng)
    return (lambda x, w, b: ops.weighted_sum(ops.conv3d(x, w, b, stride), probe)), [x, w, b], 1e-3


def tconv_case(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng.normal(size=(2, 2, 2, 1, 3))), _t(rng.normal(size=(2, 2, 2, 2, 3))), _t(rng.normal(size=2))
    probe = _project(ops.transposed_conv3d(x, w, b), rng)
    return (lambda x, w, b: ops.weighted_sum(ops.transposed_conv3d(x, w, b), probe)), [x, w, b], 1e-3


def maxpool_case(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced far beyond h so no window changes its argmax
    vals = rng.permutation(64 * 2).astype(np.float64) * 0.01
    x = _t(vals.reshape(1, 4, 4, 4, 2))
    probe = rng.normal(size=(1, 2, 2, 2, 2))
    return (lambda x: ops.weighted_sum(ops.maxpool3d(x), probe)), [x], 1e-4


def batchnorm_case(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(2, 3, 2, 2, 3)))
    gamma, beta = _t(rng.uniform(0.5, 1.5, 3)), _t(rng.normal(size=3))
    probe = rng.normal(size=x.shape)

    def fn(x, gamma, beta):
        # fresh running stats per call: the EMA side effect must not leak
        return ops.weighted_sum(ops.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), True), probe)
    return fn, [x, gamma, beta], 1e-5


def batchnorm_infer_case(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(1, 2, 2, 2, 3)))
    gamma, beta = _t(rng.uniform(0.5, 1.5, 3)), _t(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
    probe = rng.normal(size=x.shape)
    return (lambda x, g, b: ops.weighted_sum(ops.batchnorm(x, g, b, rm.copy(), rv.copy(), False), probe)), \
        [x, gamma, beta], 1e-4


def relu_case(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(1, 3, 3, 2, 2))
    v = np.where(np.abs(v) < 0.05, 0.5, v)  # keep clear of the kink
    x = _t(v)
    probe = rng.normal(size=x.shape)
    return (lambda x: ops.weighted_sum(ops.relu(x), probe)), [x], 1e-4


def softmax_case(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(1, 2, 2, 2, 4)))
    probe = rng.normal(size=x.shape)
    return (lambda x: ops.weighted_sum(ops.softmax_channels(x), probe)), [x], 1e-4


def concat_case(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng.normal(size=(1, 2, 2, 2, 2))), _t(rng.normal(size=(1, 2, 2, 2, 3)))
    probe = rng.normal(size=(1, 2, 2, 2, 5))
    return (lambda a, b: ops.weighted_sum(ops.concat_channels(a, b), probe)), [a, b], 1e-3


def _probs_onehot(rng, shape=(1, 3, 2, 2, 4)):
    logits = rng.normal(size=shape)
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    y = np.eye(shape[-1])[rng.integers(0, shape[-1], shape[:-1])]
    return p, y


def tversky_case(seed):
    rng = np.random.default_rng(seed)
    p, y = _probs_onehot(rng)
    alpha = rng.uniform(0.2, 0.8)
    return (lambda p: losses.tversky_loss(p, y, alpha, 1 - alpha, 1e-5)), [_t(p)], 1e-3


def cce_case(seed):
    rng = np.random.default_rng(seed)
    p, y = _probs_onehot(rng)
    return (lambda p: losses.cce_loss(p, y)), [_t(p)], 1e-6


OP_CASES = {
    "conv3d": conv_case,
    "transposed_conv3d": tconv_case,
    "maxpool3d": maxpool_case,
    "batchnorm": batchnorm_case,
    "batchnorm_infer": batchnorm_infer_case,
    "relu": relu_case,
    "softmax": softmax_case,
    "concat": concat_case,
    "tversky": tversky_case,
    "cce": cce_case,
}


def tiny_unet_case(seed, dtype=np.float64):
    """Total loss through a 2-level, 2-filter U-Net on a 4x4x2 patch.

    Returns ``(fn, inputs)`` where the inputs are every parameter tensor
    plus the image, all of ``dtype``.
    """
    cfg = unet3d.UNetConfig(base_filters=2, num_levels=2, convs_per_block=1)
    model = unet3d.build(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    for t in model.params.values():  # perturb zeros so biases/betas are generic
        t.data[...] += rng.normal(scale=0.1, size=t.shape).astype(dtype)
    image = Tensor(rng.normal(size=(2, 4, 4, 2, 1)).astype(dtype), requires_grad=True)
    onehot = np.eye(4)[rng.integers(0, 4, (2, 4, 4, 2))]
    names = list(model.params)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def fn(*tensors):
        m = unet3d.Model(cfg, dict(zip(names, tensors[:-1])), {k: v.copy() for k, v in buffers.items()})
        return losses.total_loss(unet3d.forward(m, tensors[-1], "train"), onehot)

    return fn, [model.params[n] for n in names] + [image]
