"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from clsr.nn import BatchNorm, Conv1D, Dense, Encoder, GlobalAveragePooling1D, Normalization, ReLU
from clsr.trainer import nt_xent_loss


def rel_err(a, b):
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    # floor: some grads are exactly zero (bias feeding train-mode BN)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr, h=1e-3, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def sample_indices(size, n, rng):
    if size <= n:
        return np.arange(size)
    return np.sort(rng.choice(size, n, replace=False))


def brute_nt_xent(z, tau):
    """Direct per-term evaluation of the NT-Xent batch loss with Python floats."""
    z = [list(map(float, row)) for row in z]
    B = len(z)

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    total = 0.0
    for i in range(B):
        j = i + 1 if i % 2 == 0 else i - 1
        num = math.exp(cos(z[i], z[j]) / tau)
        den = sum(math.exp(cos(z[i], z[k]) / tau) for k in range(B) if k != i)
        total += -math.log(num / den)
    return total / B


def brute_average_precision(relevant, ranked, k=None):
    """AP(k) straight from the definition: (1/|R|) sum_r P(r) * rel(r)."""
    top = list(ranked if k is None else ranked[:k])
    total = 0.0
    for r in range(1, len(top) + 1):
        if top[r - 1] in relevant:
            prec_r = sum(1 for j in range(r) if top[j] in relevant) / r
            total += prec_r
    return total / len(relevant)


def brute_cosine_ranking(query_vec, vectors, ids, exclude=None):
    """Sort all candidates by (-cosine, insertion index) with Python floats."""
    def cos(a, b):
        dot = sum(float(x) * float(y) for x, y in zip(a, b))
        na = math.sqrt(sum(float(x) ** 2 for x in a))
        nb = math.sqrt(sum(float(y) ** 2 for y in b))
        return dot / (na * nb)

    scored = [(-cos(query_vec, v), i) for i, v in enumerate(vectors) if ids[i] != exclude]
    return [ids[i] for _, i in sorted(scored)]


def brute_l2_ranking(query, matrices, ids, exclude=None):
    def dist(a, b):
        return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))))

    scored = [(dist(query, m), i) for i, m in enumerate(matrices) if ids[i] != exclude]
    return [ids[i] for _, i in sorted(scored)]


class FrozenReLUs:
    """Hold each ReLU's on/off pattern fixed at the values from a base forward.

    The frozen network is smooth, and at the base point its derivative equals
    the true one, so central differences stay valid even when a step of h
    would push some pre-activation across zero.
    """

    def __init__(self, model):
        self.relus = [relu for _, _, relu in model.blocks]
        self.masks = None

    def capture(self):
        self.masks = [r._cache.copy() for r in self.relus]

    def __enter__(self):
        for relu, mask in zip(self.relus, self.masks):
            def forward(x, train=False, _mask=mask, _relu=relu):
                _relu._cache = _mask if train else None
                return x * _mask
            relu.forward = forward
        return self

    def __exit__(self, *exc):
        for relu in self.relus:
            del relu.forward

    def crossed(self):
        """True if the current (unfrozen) forward changed any ReLU pattern."""
        return any((r._cache != m).any() for r, m in zip(self.relus, self.masks))


def layer_gradcheck(layer, x, rng, h=1e-3, n_samples=40):
    """Check input and parameter grads of ``sum(layer(x) * R)``."""
    x = x.astype(np.float64)
    out = layer.forward(x, train=True)
    R = rng.normal(size=out.shape)
    dx = layer.backward(R)
    errs = {}

    def f():
        return float((layer.forward(x, train=True) * R).sum())

    idx = sample_indices(x.size, n_samples, rng)
    errs["input"] = rel_err(dx.ravel()[idx], numeric_grad(f, x, h, idx))
    layer.forward(x, train=True)
    layer.backward(R)
    for name, t in layer.params():
        if not t.learned:
            continue
        analytic = t.grad.copy()
        idx = sample_indices(t.data.size, n_samples, rng)
        errs[name] = rel_err(analytic.ravel()[idx], numeric_grad(f, t.data, h, idx))
    return errs


def make_layers(rng):
    f64 = np.float64
    norm = Normalization(3, f64)
    norm.fit(rng.normal(2.0, 3.0, size=(10, 3)))
    bn = BatchNorm(3, dtype=f64)
    bn.gamma.data = rng.normal(1, 0.3, 3)
    bn.beta.data = rng.normal(0, 0.3, 3)
    return {
        "normalization": norm,
        "conv1d": Conv1D(3, 4, 5, rng, f64),
        "conv1d_k3": Conv1D(3, 4, 3, rng, f64),
        "batchnorm": bn,
        "relu": ReLU(),
        "dense": Dense(3, 4, rng, f64),
        "gap": GlobalAveragePooling1D(),
    }


def stack_gradcheck(arch, seed, h=1e-3, n_samples=12):
    """Relative errors per learned tensor for the encoder + NT-Xent loss.

    Returns ``(frozen, plain)``: ``frozen`` compares against central
    differences with ReLU patterns held at the base point; ``plain`` uses the
    unmodified network on the sampled entries whose steps cross no ReLU kink.
    """
    rng = np.random.default_rng(seed)
    model = Encoder(arch, seed=seed, dtype=np.float64)
    x = rng.normal(20, 30, size=(4, arch.T, arch.C))
    x[rng.random(x.shape) < 0.2] = -100.0
    model.fit_normalization(x)
    freeze = FrozenReLUs(model)

    def loss():
        z = model.forward(x, train=True, rng=np.random.default_rng(seed + 100))
        return nt_xent_loss(z, 0.5)[0]

    z = model.forward(x, train=True, rng=np.random.default_rng(seed + 100))
    freeze.capture()
    _, dz = nt_xent_loss(z, 0.5)
    model.backward(dz)
    grads = {n: t.grad.copy() for n, t in model.learned_parameters()}
    frozen, plain = {}, {}
    for name, t in model.learned_parameters():
        idx = sample_indices(t.data.size, n_samples, rng)
        with freeze:
            frozen[name] = rel_err(grads[name].ravel()[idx], numeric_grad(loss, t.data, h, idx))
        smooth = []
        flat = t.data.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up, up_crossed = loss(), freeze.crossed()
            flat[i] = old - h
            down, down_crossed = loss(), freeze.crossed()
            flat[i] = old
            if not (up_crossed or down_crossed):
                smooth.append((grads[name].ravel()[i], (up - down) / (2 * h)))
        if smooth:
            a, n = zip(*smooth)
            plain[name] = rel_err(a, n)
    return frozen, plain
