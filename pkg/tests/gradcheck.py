"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from diffguard.neural import Mlp, backward, forward, softmax_cross_entropy

FD_STEP = 1e-6


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def random_config(rng, time_conditioned):
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, 6))] + [int(rng.integers(2, 7)) for _ in range(depth)]
    dims.append(dims[0] if time_conditioned else int(rng.integers(2, 5)))
    emb = 4 if time_conditioned else 0
    model = Mlp.init(dims, time_embedding_dim=emb, time_scale=50.0, seed=int(rng.integers(1 << 30)))
    for b in model.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    n = int(rng.integers(1, 5))
    x = rng.uniform(-1, 1, size=(n, dims[0]))
    t = rng.integers(1, 51, size=n) if time_conditioned else None
    return model, x, t


def loss_fn(model, x, t, target):
    """Projection loss for denoisers (target = weights), cross entropy for classifiers (target = labels)."""
    out = forward(model, x, t)
    if t is not None:
        return float(np.sum(out * target)), target
    loss, g = softmax_cross_entropy(out, target)
    return loss, g


def analytic_and_numeric(model, x, t, target):
    out, tape = forward(model, x, t, return_tape=True)
    _, g_out = loss_fn(model, x, t, target)
    grads = backward(model, g_out, tape)
    analytic = []
    numeric = []
    for p, gp in zip(model.parameters(), _flat(grads)):
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p[i]
            p[i] = orig + FD_STEP
            up = loss_fn(model, x, t, target)[0]
            p[i] = orig - FD_STEP
            down = loss_fn(model, x, t, target)[0]
            p[i] = orig
            num[i] = (up - down) / (2 * FD_STEP)
        analytic.append(gp)
        numeric.append(num)
    num_x = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += FD_STEP
        xm[i] -= FD_STEP
        num_x[i] = (loss_fn(model, xp, t, target)[0] - loss_fn(model, xm, t, target)[0]) / (2 * FD_STEP)
    analytic.append(grads.input)
    numeric.append(num_x)
    return analytic, numeric


def _flat(grads):
    out = []
    for gw, gb in zip(grads.weights, grads.biases):
        out.extend([gw, gb])
    return out


def max_gradient_error(num_configs, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(num_configs):
        time_conditioned = bool(k % 2)
        model, x, t = random_config(rng, time_conditioned)
        if time_conditioned:
            target = rng.normal(size=(x.shape[0], model.output_dim))
        else:
            target = rng.integers(0, model.output_dim, size=x.shape[0])
        analytic, numeric = analytic_and_numeric(model, x, t, target)
        worst = max(worst, max(rel_err(a, b) for a, b in zip(analytic, numeric)))
    return worst
