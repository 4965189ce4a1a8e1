"""Shared test utilities: finite-difference oracle and small model factories."""
import numpy as np

from rdoq import licnet
from rdoq import tensorad as ad

FD_STEP = 1e-6
# Relative error uses max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# near-zero gradients are compared in absolute terms.
REL_FLOOR = 1e-3


def numeric_grad(loss_fn, arrays, which, index):
    """Central difference of ``loss_fn(arrays)`` w.r.t. ``arrays[which][index]``."""
    a = arrays[which]
    orig = a[index]
    a[index] = orig + FD_STEP
    up = loss_fn(arrays)
    a[index] = orig - FD_STEP
    down = loss_fn(arrays)
    a[index] = orig
    return (up - down) / (2 * FD_STEP)


def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def check_op(fn, arrays, rng, samples=None):
    """Max relative error of ``fn``'s gradient over the elements of float64 ``arrays``.

    The scalar loss is ``sum(fn(*tensors) * R)`` with a fixed random ``R``.
    ``samples`` limits the number of checked elements per array.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[ad.Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def loss_value(arrs):
        with ad.no_grad():
            return float(np.sum(fn(*[ad.Tensor(a) for a in arrs]).data * weights))

    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = ad.sum_(fn(*tensors) * ad.Tensor(weights))
    loss.backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        grad = np.zeros_like(arrays[k]) if t.grad is None else t.grad
        idx = list(np.ndindex(arrays[k].shape))
        if samples is not None and len(idx) > samples:
            idx = [idx[i] for i in rng.choice(len(idx), samples, replace=False)]
        for i in idx:
            worst = max(worst, rel_error(grad[i], numeric_grad(loss_value, arrays, k, i)))
    return worst


def model_params64(model):
    return {k: ad.Tensor(v.astype(np.float64), requires_grad=True) for k, v in model.params.items()}


def check_codec_loss(seed: int, hyperprior: bool = False, per_tensor: int = 2) -> float:
    """Finite-difference check of the full R-D loss w.r.t. sampled parameters."""
    rng = np.random.default_rng(seed)
    cfg = licnet.LicConfig(channels=4, latent=6, hyperprior=hyperprior, hyper_channels=3)
    model = licnet.init_model(cfg, lam=float(rng.choice(licnet.DESK_LADDER)), seed=seed)
    for k in model.params:
        if k.endswith(".bias"):  # zero biases would park ReLU inputs on the kink
            model.params[k] = rng.normal(0.0, 0.2, model.params[k].shape).astype(np.float32)
    side = 32 if hyperprior else 16
    x = rng.uniform(0.2, 0.8, (2, 1, side, side))

    def loss_of(params):
        res = licnet.forward_rd(model, ad.Tensor(x), "noise", np.random.default_rng(seed), params)
        return ad.mean(res.j)

    params = model_params64(model)
    loss_of(params).backward()
    arrays = {k: v.data.copy() for k, v in params.items()}
    worst = 0.0
    for name, arr in arrays.items():
        for _ in range(per_tensor):
            i = tuple(int(rng.integers(0, n)) for n in arr.shape)

            def value(_arrs, name=name):
                with ad.no_grad():
                    return loss_of({k: ad.Tensor(v) for k, v in arrays.items()}).item()
            numeric = numeric_grad(value, {name: arr}, name, i)
            worst = max(worst, rel_error(params[name].grad[i], numeric))
    return worst
