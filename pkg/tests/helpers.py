"""Independent oracles shared by the test modules."""

import numpy as np

from annealprune.network import layer_backward, layer_forward
from annealprune.tensor import Rng


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, filters, bias, padding):
    """Direct loops over (row, col, filter, tap) on one HWC image."""
    h, w, c = x.shape
    f = filters.shape[0]
    if padding == "same":
        xp = np.zeros((h + 2, w + 2, c))
        xp[1:-1, 1:-1] = x
    else:
        xp = x.astype(float)
    ho, wo = xp.shape[0] - 2, xp.shape[1] - 2
    out = np.zeros((ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            for k in range(f):
                acc = bias[k]
                for dy in range(3):
                    for dx in range(3):
                        for ch in range(c):
                            acc += xp[i + dy, j + dx, ch] * filters[k, dy, dx, ch]
                out[i, j, k] = acc
    return out


def naive_maxpool(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = max(x[2 * i + a, 2 * j + b, ch] for a in range(2) for b in range(2))
    return out


def rel_error(a, b, floor=1e-6):
    """|a - b| relative to the larger magnitude, with an absolute floor for near-zero pairs."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def layer_gradcheck(spec, params, x, probes, seed=0, eps=1e-3, mode="train"):
    """Compare one layer's backward pass with central differences.

    The scalar under test is ``sum(R * layer(x))`` for a fixed random ``R``.
    Dropout masks are held fixed by re-seeding before every forward pass.
    Returns the list of relative errors, one per probe.
    """
    gen = np.random.default_rng(seed)

    def run(x_, params_):
        y, aux = layer_forward(spec, params_, x_, mode, Rng(seed + 1))
        return y, aux

    y, aux = run(x, params)
    R = gen.standard_normal(y.shape)
    gx, gparams = layer_backward(spec, params, x, aux, y, R)

    def loss(x_, params_):
        return float(np.sum(run(x_, params_)[0] * R))

    targets = [("x", x, gx)] + [(name, params[name], gparams[name]) for name in params]
    errors = []
    for p in range(probes):
        name, arr, grad = targets[p % len(targets)]
        idx = tuple(gen.integers(0, s) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        plus = loss(x, params)
        arr[idx] = old - eps
        minus = loss(x, params)
        arr[idx] = old
        numeric = (plus - minus) / (2 * eps)
        errors.append(rel_error(float(grad[idx]), numeric))
    return errors


def _kink_pattern(net, cache):
    """ReLU signs and max-pool winners; a change means the probe crossed a kink."""
    parts = []
    for i, spec in enumerate(net.specs):
        if spec.kind == "relu":
            parts.append(cache.inputs[i] > 0)
        elif spec.kind == "maxpool2x2":
            parts.append(cache.aux[i])
    return parts


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def network_gradcheck(net, batch, labels, probes, seed=0, eps=1e-3):
    """Central differences of the mean cross-entropy w.r.t. registry parameters.

    Probes whose +/-eps perturbation changes a ReLU sign or a max-pool winner
    straddle a non-differentiable point; they are skipped and counted.
    Returns ``(errors, skipped)``.
    """
    from annealprune.network import backward, cross_entropy, forward

    cache, _ = forward(net, batch, "eval")
    base = _kink_pattern(net, cache)
    backward(net, cache, labels)
    grads = {k: g.copy() for k, g in net.grads.items()}
    net.grads = {}
    keys = sorted(net.params)
    gen = np.random.default_rng(seed)
    errors = []
    skipped = 0
    for p in range(probes):
        key = keys[p % len(keys)]
        arr = net.params[key]
        idx = tuple(gen.integers(0, s) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        cache_plus, probs_plus = forward(net, batch, "eval")
        arr[idx] = old - eps
        cache_minus, probs_minus = forward(net, batch, "eval")
        arr[idx] = old
        if not (_same_pattern(base, _kink_pattern(net, cache_plus))
                and _same_pattern(base, _kink_pattern(net, cache_minus))):
            skipped += 1
            continue
        plus = cross_entropy(probs_plus, labels).loss
        minus = cross_entropy(probs_minus, labels).loss
        errors.append(rel_error(float(grads[key][idx]), (plus - minus) / (2 * eps)))
    return errors, skipped


def synth_config(out, **changes):
    """Small synthetic-blob MLP experiment that trains in well under a second."""
    from annealprune.config import ExperimentConfig
    from annealprune.pruning import ApHyperparams

    base = dict(dataset="synth", synth_classes=3, synth_per_class=40, synth_dim=8,
                synth_spread=0.1, model="mlp", hidden=(16,), regularizer="ap",
                ap=ApHyperparams(start=1, post=1), epochs=4, batch_size=8, lr=0.1,
                repeats=2, dtype="float64", out=str(out), plots=False)
    base.update(changes)
    return ExperimentConfig(**base).validate()


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Print and keep one PASS/FAIL line; the terminal summary repeats them."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
