import numpy as np
import pytest

from splitfed import _fallback

try:
    from splitfed import _kernels
except ImportError:  # extension not built
    _kernels = None

BACKENDS = [pytest.param(_fallback, id="python")]
if _kernels is not None:
    BACKENDS.append(pytest.param(_kernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def direct_conv1d(x, w, b, stride, padding):
    """Nested-loop convolution in float64, written independently of the im2col path."""
    n_batch, channels, length = x.shape
    out_ch, _, kernel = w.shape
    if padding == "same":
        out_len = -(-length // stride)
        left = max((out_len - 1) * stride + kernel - length, 0) // 2
    else:
        out_len = (length - kernel) // stride + 1
        left = 0
    y = np.zeros((n_batch, out_ch, out_len))
    for n in range(n_batch):
        for o in range(out_ch):
            for l in range(out_len):
                acc = 0.0 if b is None else float(b[o])
                for c in range(channels):
                    for k in range(kernel):
                        pos = l * stride + k - left
                        if 0 <= pos < length:
                            acc += float(w[o, c, k]) * float(x[n, c, pos])
                y[n, o, l] = acc
    return y


def sort_oracle_topk(values, k):
    """Top-k flat indices by full sort on (-|v|, index), returned ascending."""
    order = sorted(range(len(values)), key=lambda i: (-abs(float(values[i])), i))
    return sorted(order[:k])
