"""Dense building blocks for the mapping networks.

Vectors and matrices are plain numpy arrays. Storage is float32 (the dtype of
exported embeddings), every computation here runs in float64 and returns
float64 so that gradient checks and dot products share one accumulation
precision.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DegenerateVector, DimensionMismatch, EmptyInput

NORM_EPS = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass
class MlpParams:
    """Weights (out x in) and biases of a fully connected network.

    GELU follows every layer except the last one, which stays linear.
    """

    layer_dims: list
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise DimensionMismatch(f"invalid layer dims {self.layer_dims}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise DimensionMismatch(f"expected {n} weight matrices and bias vectors")
        for k in range(n):
            want = (self.layer_dims[k + 1], self.layer_dims[k])
            if self.weights[k].shape != want:
                raise DimensionMismatch(
                    f"layer {k}: weight shape {self.weights[k].shape}, expected {want}"
                )
            if self.biases[k].shape != (want[0],):
                raise DimensionMismatch(
                    f"layer {k}: bias shape {self.biases[k].shape}, expected {(want[0],)}"
                )

    @property
    def num_layers(self):
        return len(self.weights)

    def arrays(self):
        """Weights and biases interleaved per layer: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays):
        return type(self)(self.layer_dims, list(arrays[0::2]), list(arrays[1::2]))

    def astype(self, dtype):
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def num_values(self):
        return sum(a.size for a in self.arrays())

    def same_shape(self, other):
        return self.layer_dims == other.layer_dims and all(
            a.shape == b.shape for a, b in zip(self.arrays(), other.arrays())
        )


class GradientBuffer(MlpParams):
    """Gradients laid out exactly like the parameters they belong to."""


@dataclass
class ForwardCache:
    # layer_inputs[k] feeds layer k; pre_activations[k] is its affine output
    layer_inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)

    @property
    def batch_size(self):
        return self.layer_inputs[0].shape[0]


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"{what} must be 2-D, got shape {x.shape}")
    if x.shape[1] != width:
        raise DimensionMismatch(f"{what} has width {x.shape[1]}, expected {width}")
    return x


def mlp_forward(params, input_batch):
    """Run a batch through the network. Returns ``(output, cache)``."""
    h = _as_batch(input_batch, params.layer_dims[0], "input batch")
    cache = ForwardCache()
    last = params.num_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.layer_inputs.append(h)
        z = h @ w.T.astype(np.float64) + b.astype(np.float64)
        cache.pre_activations.append(z)
        h = z if k == last else gelu(z)
    return h, cache


def mlp_backward(params, cache, output_grad):
    """Reverse-mode gradients of all parameters, summed over the batch."""
    g = _as_batch(output_grad, params.layer_dims[-1], "output gradient")
    if g.shape[0] != cache.batch_size:
        raise DimensionMismatch(
            f"output gradient has {g.shape[0]} rows, forward batch had {cache.batch_size}"
        )
    n = params.num_layers
    grad_w = [None] * n
    grad_b = [None] * n
    for k in reversed(range(n)):
        if k != n - 1:
            g = g * gelu_grad(cache.pre_activations[k])
        grad_w[k] = g.T @ cache.layer_inputs[k]
        grad_b[k] = g.sum(axis=0)
        if k > 0:
            g = g @ params.weights[k].astype(np.float64)
    return GradientBuffer(list(params.layer_dims), grad_w, grad_b)


def _norm(v):
    return float(np.sqrt(np.dot(v, v)))


def _as_vector_pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector dims differ: {a.size} vs {b.size}")
    return a, b


def cosine_similarity(a, b):
    a, b = _as_vector_pair(a, b)
    na, nb = _norm(a), _norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVector("cosine similarity of a (near) zero vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_loss_and_grad(pred, target):
    """``1 - cos(pred, target)`` and its gradient with respect to ``pred``."""
    pred, target = _as_vector_pair(pred, target)
    losses, grad = cosine_loss_batch(pred[None, :], target[None, :])
    return float(losses[0]), grad[0]


def cosine_loss_batch(pred, target):
    """Row-wise cosine loss. Returns per-row losses and d(loss_i)/d(pred_i)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionMismatch(f"shape mismatch: {pred.shape} vs {target.shape}")
    pn = np.sqrt(np.einsum("ij,ij->i", pred, pred))
    tn = np.sqrt(np.einsum("ij,ij->i", target, target))
    if np.any(pn <= NORM_EPS) or np.any(tn <= NORM_EPS):
        raise DegenerateVector("cosine loss on a (near) zero vector")
    p_hat = pred / pn[:, None]
    t_hat = target / tn[:, None]
    cos = np.einsum("ij,ij->i", p_hat, t_hat)
    grad = -(t_hat - cos[:, None] * p_hat) / pn[:, None]
    losses = 1.0 - np.clip(cos, -1.0, 1.0)
    return losses, grad


def mean_rows(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        raise EmptyInput("mean of zero rows")
    return m.mean(axis=0)
