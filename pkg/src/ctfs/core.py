"""Navigator network d_phi and the gradient of the CT objective.

The navigator is a small MLP ``[d_f, 128, 64, 1]`` with LeakyReLU activations
that scores a (query, prototype) pair from their element-wise absolute
difference. Gradients are derived by hand for this fixed graph.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

HIDDEN1 = 128
HIDDEN2 = 64


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up; ``where`` names the stage."""

    def __init__(self, message: str, where: str | None = None, step: int | None = None):
        super().__init__(message)
        self.where = where
        self.step = step


@dataclass(frozen=True)
class NavigatorParams:
    w1: np.ndarray  # (d_f, 128)
    b1: np.ndarray  # (128,)
    w2: np.ndarray  # (128, 64)
    b2: np.ndarray  # (64,)
    w3: np.ndarray  # (64,)
    b3: float
    leaky_slope: float = 0.01

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self) if f.name != "leaky_slope"}

    def astype(self, dtype) -> "NavigatorParams":
        return self.replace(**{k: v.astype(dtype) for k, v in self.arrays().items() if k != "b3"})

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, k)) for k in PARAM_NAMES]).astype(self.w1.dtype, copy=False)

    def unflat(self, vec: np.ndarray) -> "NavigatorParams":
        """Parameters with the same shapes as ``self`` read from a flat vector (views)."""
        out, pos = {}, 0
        for k in PARAM_NAMES:
            ref = np.asarray(getattr(self, k))
            out[k] = vec[pos : pos + ref.size].reshape(ref.shape)
            pos += ref.size
        out["b3"] = float(out["b3"])
        return self.replace(**out)

    def replace(self, **arrays) -> "NavigatorParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(arrays)
        return NavigatorParams(**kw)


# the gradient carries the same fields as the parameters it differentiates
NavigatorGradient = NavigatorParams

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_navigator(d_f: int, rng: np.random.Generator, leaky_slope: float = 0.01) -> NavigatorParams:
    """Fresh navigator: Glorot-uniform weights, zero biases."""
    if d_f < 1:
        raise ShapeError(f"feature dimension must be >= 1, got {d_f}")
    return NavigatorParams(
        w1=_glorot(rng, d_f, HIDDEN1, (d_f, HIDDEN1)),
        b1=np.zeros(HIDDEN1),
        w2=_glorot(rng, HIDDEN1, HIDDEN2, (HIDDEN1, HIDDEN2)),
        b2=np.zeros(HIDDEN2),
        w3=_glorot(rng, HIDDEN2, 1, (HIDDEN2,)),
        b3=0.0,
        leaky_slope=leaky_slope,
    )


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    # max(x, s*x) equals LeakyReLU for 0 <= s <= 1 and avoids np.where, which is slow here
    if 0.0 <= slope <= 1.0:
        return np.maximum(x, slope * x)
    return np.where(x > 0, x, slope * x)


def _mlp_forward(phi: NavigatorParams, z: np.ndarray):
    h1 = z @ phi.w1 + phi.b1
    a1 = _leaky(h1, phi.leaky_slope)
    h2 = a1 @ phi.w2 + phi.b2
    a2 = _leaky(h2, phi.leaky_slope)
    out = a2 @ phi.w3 + phi.b3
    return out, (h1, a1, h2, a2)


def _pair_inputs(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    queries = np.asarray(queries, dtype=float)
    prototypes = np.asarray(prototypes, dtype=float)
    if queries.ndim != 2 or prototypes.ndim != 2:
        raise ShapeError("queries and prototypes must be 2-D")
    if queries.shape[1] != prototypes.shape[1]:
        raise ShapeError(
            f"feature dimension mismatch: queries {queries.shape[1]} vs prototypes {prototypes.shape[1]}"
        )
    m, n = queries.shape[0], prototypes.shape[0]
    diff = queries[:, None, :] - prototypes[None, :, :]
    return np.abs(diff).reshape(m * n, -1)


def navigator_distance(phi: NavigatorParams, x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (phi.dim,) or y.shape != (phi.dim,):
        raise ShapeError(f"expected vectors of length {phi.dim}, got {x.shape} and {y.shape}")
    out, _ = _mlp_forward(phi, np.abs(x - y)[None, :])
    return float(out[0])


def navigator_distance_batch(phi: NavigatorParams, queries, prototypes) -> np.ndarray:
    """Matrix of d_phi(query_r, prototype_i), shape (M, N)."""
    z = _pair_inputs(queries, prototypes)
    if z.shape[1] != phi.dim:
        raise ShapeError(f"navigator expects dimension {phi.dim}, features have {z.shape[1]}")
    out, _ = _mlp_forward(phi, z)
    return out.reshape(len(queries), len(prototypes))


def _row_softmax_neg(d: np.ndarray) -> np.ndarray:
    e = np.exp(-(d - d.min(axis=1, keepdims=True)))
    return e / e.sum(axis=1, keepdims=True)


def _col_softmax_neg(d: np.ndarray) -> np.ndarray:
    e = np.exp(-(d - d.min(axis=0, keepdims=True)))
    return e / e.sum(axis=0, keepdims=True)


class GradientWorkspace:
    """Preallocated buffers for repeated loss/gradient evaluations on one episode.

    Large temporaries are reused across calls; fresh allocations of this size
    cost page faults that dominate the runtime of the small network.
    """

    def __init__(self, queries, prototypes, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.z = _pair_inputs(queries, prototypes).astype(self.dtype, copy=False)
        self.m, self.n = len(queries), len(prototypes)
        p = self.z.shape[0]
        for name, width in (("h1", HIDDEN1), ("a1", HIDDEN1), ("g1", HIDDEN1), ("mask1", HIDDEN1),
                            ("h2", HIDDEN2), ("a2", HIDDEN2), ("g2", HIDDEN2), ("mask2", HIDDEN2)):
            setattr(self, name, np.empty((p, width), dtype=self.dtype))

    def _forward(self, phi: NavigatorParams) -> np.ndarray:
        s = phi.leaky_slope
        np.matmul(self.z, phi.w1, out=self.h1)
        self.h1 += phi.b1
        np.multiply(self.h1, s, out=self.a1)
        _leaky_into(self.h1, self.a1, s)
        np.matmul(self.a1, phi.w2, out=self.h2)
        self.h2 += phi.b2
        np.multiply(self.h2, s, out=self.a2)
        _leaky_into(self.h2, self.a2, s)
        return self.a2 @ phi.w3 + phi.b3

    def distances(self, phi: NavigatorParams) -> np.ndarray:
        return self._forward(phi).reshape(self.m, self.n).astype(np.float64)

    def loss_and_grad(self, phi: NavigatorParams, cost: np.ndarray, rho: float):
        m, n = self.m, self.n
        # softmax and loss in float64 whatever the network's compute type
        d = self._forward(phi).reshape(m, n).astype(np.float64)
        cost = np.asarray(cost, dtype=np.float64)
        if not np.all(np.isfinite(d)):
            raise NumericalError("navigator output is not finite", where="head")

        fwd = _row_softmax_neg(d)
        bwd = _col_softmax_neg(d)
        g_fwd = (rho / m) * cost
        g_bwd = ((1.0 - rho) / n) * cost
        loss = float(np.sum(g_fwd * fwd) + np.sum(g_bwd * bwd))
        if not np.isfinite(loss):
            raise NumericalError("CT loss is not finite", where="loss")

        # softmax(-d): dL/dd = -p * (g - <p, g>) along the normalised axis
        gd = -fwd * (g_fwd - np.sum(fwd * g_fwd, axis=1, keepdims=True))
        gd -= bwd * (g_bwd - np.sum(bwd * g_bwd, axis=0, keepdims=True))
        gout = gd.reshape(-1).astype(self.dtype)

        s = phi.leaky_slope
        gw3 = self.a2.T @ gout
        gb3 = float(gout.sum())
        np.multiply(gout[:, None], phi.w3[None, :], out=self.g2)
        _leaky_grad_into(self.h2, self.mask2, s)
        self.g2 *= self.mask2
        gw2 = self.a1.T @ self.g2
        gb2 = self.g2.sum(axis=0)
        np.matmul(self.g2, phi.w2.T, out=self.g1)
        _leaky_grad_into(self.h1, self.mask1, s)
        self.g1 *= self.mask1
        gw1 = self.z.T @ self.g1
        gb1 = self.g1.sum(axis=0)

        grad = NavigatorParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2, w3=gw3, b3=gb3, leaky_slope=s)
        for name, layer in (("w1", "layer1"), ("b1", "layer1"), ("w2", "layer2"), ("b2", "layer2"),
                            ("w3", "head"), ("b3", "head")):
            if not np.all(np.isfinite(getattr(grad, name))):
                raise NumericalError(f"non-finite gradient in {layer} ({name})", where=layer)
        return loss, grad


def _leaky_into(h: np.ndarray, out: np.ndarray, slope: float) -> None:
    # ``out`` already holds slope*h
    if 0.0 <= slope <= 1.0:
        np.maximum(h, out, out=out)
    else:
        out[h > 0] = h[h > 0]


def _leaky_grad_into(h: np.ndarray, out: np.ndarray, slope: float) -> None:
    np.greater(h, 0, out=out)
    out *= 1.0 - slope
    out += slope


def ct_loss_gradient(phi: NavigatorParams, queries, prototypes, cost, rho: float):
    """CT loss at ``phi`` and its gradient with respect to every parameter.

    ``cost`` is held constant. Returns ``(loss, grad)`` where ``grad`` is a
    :class:`NavigatorParams`-shaped container of partial derivatives.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    cost = np.asarray(cost, dtype=float)
    m, n = len(queries), len(prototypes)
    if cost.shape != (m, n):
        raise ShapeError(f"cost shape {cost.shape} does not match ({m}, {n})")
    ws = GradientWorkspace(queries, prototypes)
    if ws.z.shape[1] != phi.dim:
        raise ShapeError(f"navigator expects dimension {phi.dim}, features have {ws.z.shape[1]}")
    return ws.loss_and_grad(phi, cost, rho)
