"""Finite-difference gradient suite over every differentiable op and the full pipeline."""
from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor, concat, default_dtype, exp, grad_check, leaky_relu, log, matmul, select, sigmoid, softmax,
)
from .autodiff import functional as F
from .model import ModelConfig, SliceReconstructor
from .resample import sampling_matrix
from .volume import PhantomSpec, SliceSpec, extract_slice, generate_phantom

_MSE_TARGET = np.linspace(-1.0, 1.0, 6).reshape(2, 3)
MINI_CONFIG = dict(image_size=16, c_local=8, c_global=4, h_local=4, w_local=4, h_feat=4, w_feat=4,
                   h_out=8, w_out=8, pe_freqs=2, use_global=True, decoder_channels=(8, 4), norm_groups=2)


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection to a scalar so every output element carries gradient
    return (out * rng.standard_normal(out.shape)).sum()


def op_cases(rng):
    """``(name, f, inputs)`` triples; each ``f`` maps the inputs to a scalar."""
    cases = []
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    p = _t(rng, 3, 4, positive=True)
    wa = rng.standard_normal((3, 4))
    cases += [
        ("add", lambda x, y: ((x + y) * wa).sum(), [a, b]),
        ("sub", lambda x, y: ((x - y) * wa).sum(), [_t(rng, 3, 4), _t(rng, 1, 4)]),
        ("mul", lambda x, y: ((x * y) * wa).sum(), [_t(rng, 3, 4), _t(rng, 3, 1)]),
        ("div", lambda x, y: ((x / y) * wa).sum(), [_t(rng, 3, 4), p]),
        ("pow", lambda x: ((x ** 3) * wa).sum(), [_t(rng, 3, 4)]),
        ("exp", lambda x: (exp(x) * wa).sum(), [_t(rng, 3, 4)]),
        ("log", lambda x: (log(x) * wa).sum(), [_t(rng, 3, 4, positive=True)]),
    ]
    wm = rng.standard_normal((2, 3, 5))
    cases.append(("matmul", lambda x, y: (matmul(x, y) * wm).sum(), [_t(rng, 2, 3, 4), _t(rng, 4, 5)]))
    ws = rng.standard_normal(4)
    cases.append(("sum_mean", lambda x: (x.sum(axis=0) * ws).sum() + x.mean() * 3.0, [_t(rng, 3, 4)]))
    wr = rng.standard_normal((4, 3))
    cases.append(("reshape_transpose", lambda x: (x.reshape(2, 6).transpose().reshape(4, 3) * wr).sum(),
                  [_t(rng, 3, 4)]))
    wc = rng.standard_normal((3, 7))
    cases.append(("concat", lambda x, y: (concat([x, y], axis=1) * wc).sum(), [_t(rng, 3, 4), _t(rng, 3, 3)]))
    wsel = rng.standard_normal((3, 4))
    cases.append(("select", lambda x: (select(x, 1) * wsel).sum(), [_t(rng, 2, 3, 4)]))
    cases.append(("sigmoid", lambda x: (sigmoid(x) * wa).sum(), [_t(rng, 3, 4)]))
    cases.append(("leaky_relu", lambda x: (leaky_relu(x, 0.2) * wa).sum(), [_t(rng, 3, 4)]))
    cases.append(("softmax", lambda x: (softmax(x, axis=-1) * wa).sum(), [_t(rng, 3, 4)]))

    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)):
        x, w, bias = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, k, k), _t(rng, 4)
        out_shape = F.conv2d(x, w, bias, stride, pad).shape
        wo = rng.standard_normal(out_shape)
        cases.append((f"conv2d_k{k}_s{stride}_p{pad}",
                      lambda x, w, b, s=stride, q=pad, wo=wo: (F.conv2d(x, w, b, s, q) * wo).sum(), [x, w, bias]))

    wg = rng.standard_normal((2, 4, 3, 3))
    cases.append(("group_norm", lambda x, g, s: (F.group_norm(x, 2, g, s) * wg).sum(),
                  [_t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)]))
    wu = rng.standard_normal((2, 3, 4, 4))
    cases.append(("nearest_upsample", lambda x: (F.nearest_upsample(x, 2) * wu).sum(), [_t(rng, 2, 3, 2, 2)]))
    wrg = rng.standard_normal((2, 3, 4, 5))
    cases.append(("replicate_global", lambda x: (F.replicate_global(x, 4, 5) * wrg).sum(), [_t(rng, 2, 3)]))
    wsm = rng.standard_normal((2, 3))
    cases.append(("spatial_mean", lambda x: (F.spatial_mean(x) * wsm).sum(), [_t(rng, 2, 3, 4, 4)]))

    ops = [sampling_matrix(rng.uniform(-1.2, 1.2, size=(12, 2)), 4, 4) for _ in range(2)]
    wsf = rng.standard_normal((2, 3, 3, 4))
    cases.append(("sample_features", lambda x: (F.sample_features(x, ops, (3, 4)) * wsf).sum(),
                  [_t(rng, 2, 3, 4, 4)]))

    watt = rng.standard_normal((2, 4, 3, 3))
    # the key bias shifts every logit of a softmax row equally, so its exact
    # gradient is zero and differencing only measures roundoff; it is held
    # fixed here and checked by key_bias_gradient instead
    bk = Tensor(rng.standard_normal(2), dtype=np.float64)
    att_in = [_t(rng, 2, 4, 3, 3), _t(rng, 2, 4, 1, 1), _t(rng, 2), _t(rng, 2, 4, 1, 1),
              _t(rng, 4, 4, 1, 1), _t(rng, 4)]
    cases.append(("self_attention",
                  lambda x, wq, bq, wk, wv, bv: (F.self_attention(x, wq, bq, wk, bk, wv, bv) * watt).sum(),
                  att_in))
    cases.append(("mse", lambda x: F.mse(x, _MSE_TARGET), [_t(rng, 2, 3)]))
    return cases


def key_bias_gradient(seed: int) -> float:
    """Max |dL/d key-bias| of self-attention; exactly zero in exact arithmetic."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        args = [_t(rng, 2, 4, 3, 3), _t(rng, 2, 4, 1, 1), _t(rng, 2), _t(rng, 2, 4, 1, 1), _t(rng, 2),
                _t(rng, 4, 4, 1, 1), _t(rng, 4)]
        _weighted(F.self_attention(*args), rng).backward()
    return float(np.abs(args[4].grad).max())


def pipeline_case(seed: int, lambda_p: float = 1.0):
    """Full encoder, resampler, decoder and composite loss on a miniature config."""
    from .training import PerceptualFeatures, loss_total

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = SliceReconstructor(ModelConfig(seed=seed, **MINI_CONFIG))
        features = PerceptualFeatures(channels=(2, 2, 2), seed=seed)
    vol = generate_phantom(PhantomSpec(seed=seed, n_organs=2), (16, 16, 16))
    spec = SliceSpec(["axial", "coronal", "sagittal"][seed % 3], int(rng.integers(0, 16)), out_res=(8, 8))
    target, grid = extract_slice(vol, spec, model.cfg.feat_res)
    query = model.query(grid)
    pa = rng.random((1, 1, 16, 16))
    lat = rng.random((1, 1, 16, 16))
    params = model.parameters()

    def f(*_):
        pred = model(pa, lat, [query])
        return loss_total(pred, target[None, None], 1.0, lambda_p, features)

    return f, params


def run_suite(seeds=range(20), tol: float = 1e-4, pipeline: bool = True, max_elements: int = 8):
    """Gradient-check every op (and optionally the full pipeline) for each seed.

    Returns ``{name: worst relative error over seeds}``.
    """
    worst = {}
    with default_dtype(np.float64):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for name, f, inputs in op_cases(rng):
                rep = grad_check(f, inputs, tol=tol, max_elements=max_elements, rng=rng)
                worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            if pipeline:
                f, params = pipeline_case(seed)
                rep = grad_check(f, params, tol=tol, max_elements=3, rng=rng)
                worst["pipeline"] = max(worst.get("pipeline", 0.0), rep.max_rel_error)
    return worst
