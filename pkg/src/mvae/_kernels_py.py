"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _philox(blocks, stream, seed):
    c0 = blocks & _MASK32
    c1 = blocks >> _SHIFT32
    c2 = np.full_like(blocks, stream & 0xFFFFFFFF)
    c3 = np.full_like(blocks, stream >> 32)
    k0 = seed & 0xFFFFFFFF
    k1 = seed >> 32
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ np.uint64(k0),
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ np.uint64(k1),
            p0 & _MASK32,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0 | (c1 << _SHIFT32), c2 | (c3 << _SHIFT32)


def _block_range(counter, n_blocks):
    # uint64 wraparound, same as the C kernel
    with np.errstate(over="ignore"):
        return np.uint64(counter) + np.arange(n_blocks, dtype=np.uint64)


def philox_blocks(seed, stream, counter, n_blocks):
    w0, w1 = _philox(_block_range(counter, n_blocks), stream, seed)
    out = np.empty(2 * n_blocks, dtype=np.uint64)
    out[0::2] = w0
    out[1::2] = w1
    return out


def philox_uniform(seed, stream, counter, n):
    words = philox_blocks(seed, stream, counter, (n + 1) // 2)[:n]
    return (words >> _SHIFT11).astype(np.float64) * _INV_2_53


def philox_normal(seed, stream, counter, n):
    w0, w1 = _philox(_block_range(counter, n), stream, seed)
    u1 = (w0 >> _SHIFT11).astype(np.float64) * _INV_2_53
    u2 = (w1 >> _SHIFT11).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(_TWO_PI * u2)


def logsumexp_rows(x):
    mx = x.max(axis=1)
    return mx + np.log(np.exp(x - mx[:, None]).sum(axis=1))


def bernoulli_logit_loglik_rows(logits, x):
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return (x * logits - softplus).sum(axis=1)


def bernoulli_logit_grad(logits, x):
    e = np.exp(-np.abs(logits))
    sig = np.where(logits >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x - sig
