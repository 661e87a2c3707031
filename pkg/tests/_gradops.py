"""Scalar-valued test functions covering every differentiable operation.

Each entry builds fresh float64 leaves from a seed and returns
``(fn, leaves)`` suitable for :func:`spinecomplete.train.grad_check`.
Shared by the unit tests and the acceptance suite.
"""
import numpy as np

from spinecomplete import autodiff as ad
from spinecomplete.autodiff import Tensor
from spinecomplete.model import CompletionModel, ModelConfig, cd_loss
from spinecomplete.nn import EdgeConv, GeometryAwareBlock, MultiHeadAttention


def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _weights(rng, shape):
    return rng.normal(size=shape)


def op_cases():
    """name -> builder(rng) -> (fn, leaves)."""

    def binary(op):
        def build(rng):
            a, b = _leaf(rng, 4, 5), _leaf(rng, 5, positive=True)
            w = _weights(rng, (4, 5))
            return (lambda: (op(a, b) * w).sum()), [a, b]
        return build

    def unary(op, positive=False):
        def build(rng):
            a = _leaf(rng, 3, 7, positive=positive)
            w = _weights(rng, (3, 7))
            return (lambda: (op(a) * w).sum()), [a]
        return build

    def reduce_(op):
        def build(rng):
            a = _leaf(rng, 3, 4, 5)
            w = _weights(rng, (3, 5))
            return (lambda: (op(a) * w).sum()), [a]
        return build

    def matmul(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 6)
        w = _weights(rng, (2, 3, 6))
        return (lambda: ((a @ b) * w).sum()), [a, b]

    def softmax(rng):
        a = _leaf(rng, 3, 6)
        w = _weights(rng, (3, 6))
        return (lambda: (ad.softmax(a, -1) * w).sum()), [a]

    def layer_norm(rng):
        a, g, b = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
        w = _weights(rng, (4, 6))
        return (lambda: (ad.layer_norm(a, g, b) * w).sum()), [a, g, b]

    def shape_ops(rng):
        a = _leaf(rng, 2, 3, 4)
        w = _weights(rng, (4, 6))
        return (lambda: (ad.swapaxes(a.transpose(0, 2, 1).reshape(4, 6).reshape(2, 2, 6), 0, 1).reshape(4, 6) * w).sum()), [a]

    def broadcast(rng):
        a = _leaf(rng, 1, 4)
        w = _weights(rng, (3, 4))
        return (lambda: (ad.broadcast_to(a, (3, 4)) * w).sum()), [a]

    def getitem(rng):
        a = _leaf(rng, 5, 4)
        w = _weights(rng, (3, 2))
        return (lambda: (a[[0, 2, 2], 1:3] * w).sum()), [a]

    def concat(rng):
        a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 4)
        w = _weights(rng, (3, 6))
        return (lambda: (ad.concat([a, b], -1) * w).sum()), [a, b]

    def gather(rng):
        a = _leaf(rng, 2, 6, 3)
        idx = rng.integers(0, 6, size=(2, 6, 4))
        w = _weights(rng, (2, 6, 4, 3))
        return (lambda: (ad.gather(a, idx) * w).sum()), [a]

    def edgeconv(rng):
        pts = rng.normal(size=(1, 12, 3))
        conv = EdgeConv(4, 8, 4, rng)
        f = _leaf(rng, 1, 12, 4)
        params = conv.parameters()
        return (lambda: (conv(pts, f) * 1.0).sum()), [f] + params

    def mha(rng):
        att = MultiHeadAttention(8, 2, rng)
        q, kv = _leaf(rng, 1, 4, 8), _leaf(rng, 1, 5, 8)
        w = _weights(rng, (1, 4, 8))
        return (lambda: (att(q, kv) * w).sum()), [q, kv] + att.parameters()

    def geometry_block(rng):
        blk = GeometryAwareBlock(12, 3, 4, rng)
        tok = _leaf(rng, 1, 10, 12)
        xyz = rng.normal(size=(1, 10, 3))
        w = _weights(rng, (1, 10, 12))
        return (lambda: (blk(tok, xyz) * w).sum()), [tok] + blk.parameters()

    def chamfer(rng):
        p = _leaf(rng, 32, 3)
        g = rng.normal(size=(48, 3))
        return (lambda: cd_loss(p, g)), [p]

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "rsub": binary(lambda a, b: 2.0 - a + b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b),
        "neg_pow": unary(lambda a: (-a) ** 3),
        "exp": unary(ad.exp),
        "log": unary(ad.log, positive=True),
        "sqrt": unary(ad.sqrt, positive=True),
        "tanh": unary(ad.tanh),
        "relu": unary(ad.relu),
        "gelu": unary(ad.gelu),
        "sum": reduce_(lambda a: a.sum(axis=1)),
        "mean": reduce_(lambda a: a.mean(axis=1)),
        "max": reduce_(lambda a: a.max(axis=1)),
        "matmul": matmul,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "reshape_transpose": shape_ops,
        "broadcast": broadcast,
        "getitem": getitem,
        "concat": concat,
        "gather": gather,
        "edgeconv": edgeconv,
        "mha": mha,
        "geometry_block": geometry_block,
        "cd_loss": chamfer,
    }


def desk_model_case(seed=0, n_gt=80):
    """Full desk-scale model (float64) with a Chamfer loss on both outputs."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.preset("desk")
    model = CompletionModel(cfg, seed)
    x = rng.normal(size=(1, cfg.n_input, 3)) * 0.3
    gt = rng.normal(size=(1, n_gt, 3)) * 0.3

    def fn():
        coarse, fine = model.forward(x)
        return cd_loss(fine, gt) + cd_loss(coarse, gt)

    return fn, model.parameters(), cfg
