"""Independent oracles shared by the test modules."""

import itertools

import numpy as np

from entmask.data import SyntheticCorpusSpec, generate_synthetic_corpus
from entmask.model import EncoderConfig
from entmask.tensor import Tape, Tensor, backward


def numeric_grad(f, arrays, eps=1e-3):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            hi = f(*arrays)
            a[idx] = old - eps
            lo = f(*arrays)
            a[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients of scalar ``build(*tensors)`` from the tape, with float64 leaves."""
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape():
        out = build(*leaves)
    backward(out)
    return [leaf.grad for leaf in leaves]


def check_grad(build, arrays, eps=1e-3, rtol=1e-2, atol=1e-6):
    """Compare tape gradients to central differences; returns the worst relative error."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def f(*arrs):
        ts = [Tensor(x, dtype=np.float64) for x in arrs]
        return build(*ts).item()

    num = numeric_grad(f, arrays, eps)
    ana = analytic_grad(build, arrays)
    worst = 0.0
    for n, a in zip(num, ana):
        err = np.abs(n - a) / np.maximum(np.maximum(np.abs(n), np.abs(a)), atol / rtol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def entropy_oracle(logits):
    """-sum p ln p from an exp/sum evaluation in float64 (no log-softmax shortcut)."""
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max())
    p = z / z.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def brute_force_select(values, maskable, k, strategy):
    """Enumerate every k-subset of maskable positions and pick by the strategy's rule.

    The target multiset of entropy values comes from a full sort of the
    maskable values; among subsets realising it, the lexicographically
    smallest sorted position tuple wins (lower index first on ties).
    """
    cand = [i for i in range(len(values)) if maskable[i]]
    m = len(cand)
    asc = sorted(values[i] for i in cand)
    if strategy == "high":
        target = asc[m - k:]
    elif strategy == "low":
        target = asc[:k]
    elif strategy == "mid":
        off = (m - k) // 2
        target = asc[off:off + k]
    elif strategy == "marginal":
        top = -(-k // 2)
        target = asc[: k - top] + asc[m - top:]
    else:
        raise ValueError(strategy)
    target = sorted(target)
    best = None
    for combo in itertools.combinations(cand, k):
        if sorted(values[i] for i in combo) == target:
            if best is None or combo < best:
                best = combo
    return best


TINY = EncoderConfig(num_layers=1, hidden_dim=16, num_attention_heads=2, ffn_dim=32,
                     vocab_size=21, max_position=16)


def corpus(n=50, seed=0, p=0.5, vocab=16, lo=4, hi=10):
    spec = SyntheticCorpusSpec(vocab_size=vocab, num_sequences=n, min_length=lo, max_length=hi,
                               predictability=p, seed=seed)
    return generate_synthetic_corpus(spec)
