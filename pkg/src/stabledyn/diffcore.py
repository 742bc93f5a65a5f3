"""Reverse-mode differentiation core for small dense feedforward networks.

Two evaluation backends share one primitive vocabulary:

* ``NumpyOps`` executes each primitive immediately on float64 arrays.
* ``Tape`` records a Wengert list while computing the same values, so a
  scalar result can later be differentiated with respect to any designated
  leaf arrays in a single reverse sweep.

The operator set is deliberately small: dense affine layers, three C1
activations, and the elementwise/reduction primitives needed to assemble a
stability-projected dynamics model and its regression loss.  Input
gradients of scalar-valued networks are built as explicit layerwise
chain-rule expressions (activation-derivative diagonals times weight
matrices), so losses that contain such input gradients can themselves be
differentiated with ordinary first-order reverse mode.

All values are float64; batches are row-major (batch, dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("smoothed_relu", "tanh", "identity")


class DiffcoreError(RuntimeError):
    """Base error for evaluation/differentiation failures."""


class GradientError(DiffcoreError):
    """Raised when a reverse sweep produces a non-finite adjoint."""


# ---------------------------------------------------------------------------
# Smoothed ReLU and friends
# ---------------------------------------------------------------------------

def _srelu_raw(z, d):
    c = np.minimum(np.maximum(z, 0.0), d)
    return c * c * (0.5 / d) + np.maximum(z - d, 0.0)


def _srelu_grad_raw(z, d):
    return np.minimum(np.maximum(z, 0.0), d) * (1.0 / d)


def smoothed_relu(z, d):
    """C1 ramp: 0 for z<=0, z^2/(2d) for 0<z<d, z-d/2 above.

    The quadratic blend makes the function continuously differentiable at
    both seams, which is what lets gradients of it appear inside a loss.
    """
    if d <= 0:
        raise ValueError(f"smoothing width d must be positive, got {d}")
    out = _srelu_raw(np.asarray(z, dtype=np.float64), d)
    return float(out) if out.ndim == 0 else out


def smoothed_relu_grad(z, d):
    """Derivative of :func:`smoothed_relu`: 0, z/d, 1 on the three branches."""
    if d <= 0:
        raise ValueError(f"smoothing width d must be positive, got {d}")
    out = _srelu_grad_raw(np.asarray(z, dtype=np.float64), d)
    return float(out) if out.ndim == 0 else out


def smoothed_relu_curv(z, d):
    """Second derivative (piecewise constant); seams take the lower branch.

    At z=0 the flat branch value 0 is used, at z=d the quadratic branch
    value 1/d, matching the one-sided convention used in backward passes.
    """
    if d <= 0:
        raise ValueError(f"smoothing width d must be positive, got {d}")
    z = np.asarray(z, dtype=np.float64)
    out = ((z > 0.0) & (z <= d)).astype(np.float64) / d
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Network container
# ---------------------------------------------------------------------------

@dataclass
class Network:
    """Dense feedforward network with explicit parameter storage.

    weights[i] has shape (out_i, in_i), biases[i] shape (out_i,), and
    activations[i] names the nonlinearity applied after layer i.  Layer
    dims must chain.  ``srelu_width`` is the smoothing width used by any
    ``smoothed_relu`` activation in this network.
    """

    weights: list
    biases: list
    activations: list
    srelu_width: float = 0.005

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases, activations must have equal length")
        if not self.weights:
            raise ValueError("network needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: input dim {w.shape[1]} does not chain with "
                    f"previous output {self.weights[i - 1].shape[0]}"
                )
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation tag {act!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
            self.weights[i] = w
            self.biases[i] = b
        if self.srelu_width <= 0:
            raise ValueError("srelu_width must be positive")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def dims(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_network(dims, activation="tanh", seed=0, out_activation="identity",
                 srelu_width=0.005):
    """Deterministically initialize a network of the given layer sizes.

    Weights are uniform in [-s, s] with s = sqrt(1/fan_in); biases start at
    zero.  ``activation`` applies to every hidden layer, ``out_activation``
    to the last one.
    """
    dims = [int(x) for x in dims]
    if len(dims) < 2 or any(x <= 0 for x in dims):
        raise ValueError(f"dims must have >=2 positive entries, got {dims}")
    for act in (activation, out_activation):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation tag {act!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    acts = [activation] * (len(dims) - 2) + [out_activation]
    return Network(weights, biases, acts, srelu_width=srelu_width)


def forward(net, x):
    """Evaluate ``net`` at ``x``; accepts a single vector or a (B, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.in_dim:
        raise ValueError(f"input dim {X.shape[1]} != network input dim {net.in_dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite network input")
    a = X
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ w.T + b
        if act == "tanh":
            a = np.tanh(z)
        elif act == "smoothed_relu":
            a = smoothed_relu(z, net.srelu_width)
        else:
            a = z
    return a[0] if single else a


def input_gradient(net, x):
    """Gradient of a scalar-output network w.r.t. its input.

    Built as the explicit product of weight matrices and activation
    derivative diagonals; valid everywhere because every activation tag is
    C1.
    """
    if net.out_dim != 1:
        raise ValueError("input_gradient requires a scalar-output network")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.in_dim:
        raise ValueError(f"input dim {X.shape[1]} != network input dim {net.in_dim}")
    a = X
    preacts = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ w.T + b
        preacts.append(z)
        if act == "tanh":
            a = np.tanh(z)
        elif act == "smoothed_relu":
            a = smoothed_relu(z, net.srelu_width)
        else:
            a = z
    G = None  # running d(out)/d(layer input), starts as implicit ones (B,1)
    for w, act, z in zip(reversed(net.weights), reversed(net.activations),
                         reversed(preacts)):
        if act == "tanh":
            dphi = 1.0 - np.tanh(z) ** 2
        elif act == "smoothed_relu":
            dphi = smoothed_relu_grad(z, net.srelu_width)
        else:
            dphi = None
        if dphi is not None:
            G = dphi if G is None else G * dphi
        if G is None:
            G = np.ones((X.shape[0], 1))
        G = G @ w
    return G[0] if single else G


# ---------------------------------------------------------------------------
# Flat parameter vector layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamBlock:
    net: str
    layer: int
    kind: str  # "W" or "b"
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape))


class ParamLayout:
    """Bijection between named network parameters and one flat float64 vector.

    Block order follows the insertion order of the network dict, then layer
    index, with each layer's weight before its bias.
    """

    def __init__(self, nets):
        blocks = []
        offset = 0
        for name, net in nets.items():
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                blocks.append(ParamBlock(name, i, "W", w.shape, offset))
                offset += w.size
                blocks.append(ParamBlock(name, i, "b", b.shape, offset))
                offset += b.size
        self.blocks = tuple(blocks)
        self.size = offset

    def flatten(self, nets):
        vec = np.empty(self.size)
        for blk in self.blocks:
            arr = self._slot(nets, blk)
            vec[blk.offset:blk.offset + blk.size] = arr.ravel()
        return vec

    def write(self, nets, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vec.shape}")
        for blk in self.blocks:
            chunk = vec[blk.offset:blk.offset + blk.size].reshape(blk.shape)
            if blk.kind == "W":
                nets[blk.net].weights[blk.layer] = chunk.copy()
            else:
                nets[blk.net].biases[blk.layer] = chunk.copy()

    def locate(self, flat_index):
        """Map a flat index back to (block, index-within-block)."""
        if not 0 <= flat_index < self.size:
            raise IndexError(flat_index)
        for blk in self.blocks:
            if blk.offset <= flat_index < blk.offset + blk.size:
                return blk, flat_index - blk.offset
        raise IndexError(flat_index)  # unreachable

    @staticmethod
    def _slot(nets, blk):
        net = nets[blk.net]
        return net.weights[blk.layer] if blk.kind == "W" else net.biases[blk.layer]


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class NumpyOps:
    """Immediate-execution backend; mirrors the Tape method set on ndarrays."""

    @staticmethod
    def constant(x):
        return np.asarray(x, dtype=np.float64)

    leaf = constant

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def div(a, b):
        return a / b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def matmul_t(a, w):
        # swapaxes rather than .T so stacked (M, out, in) weights also work
        return a @ np.swapaxes(w, -1, -2)

    @staticmethod
    def concat_cols(a, b):
        return np.concatenate((a, b), axis=-1)

    @staticmethod
    def tanh(a):
        return np.tanh(a)

    @staticmethod
    def srelu(a, d):
        return _srelu_raw(a, d)

    @staticmethod
    def srelu_grad(a, d):
        return _srelu_grad_raw(a, d)

    @staticmethod
    def relu(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def exp(a):
        return np.exp(a)

    @staticmethod
    def scale(a, s):
        return a * s

    @staticmethod
    def add_scalar(a, c):
        return a + c

    @staticmethod
    def maximum_scalar(a, c):
        return np.maximum(a, c)

    @staticmethod
    def row_sum(a):
        return a.sum(axis=-1, keepdims=True)

    @staticmethod
    def sum_all(a):
        return a.sum()

    @staticmethod
    def mean_all(a):
        return a.mean()

    @staticmethod
    def reshape(a, shape):
        return a.reshape(shape)

    @staticmethod
    def bmat_vec(A, u):
        return np.einsum("bnm,bm->bn", A, u)

    @staticmethod
    def vec_bmat(g, A):
        return np.einsum("bn,bnm->bm", g, A)

    @staticmethod
    def sign_detached(a):
        return np.sign(a)

    @staticmethod
    def value(a):
        return a


class Node:
    """One recorded primitive: value plus the recipe to replay and reverse it."""

    __slots__ = ("idx", "op", "value", "parents", "fwd", "vjp")

    def __init__(self, idx, op, value, parents, fwd, vjp):
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp


class Tape:
    """Wengert-list recorder with eager values and a single reverse sweep.

    Nodes are created through the same method set as ``NumpyOps`` so model
    code can be written once against either backend.  A tape is single-use
    and single-threaded: record, then call :meth:`gradient`.
    """

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def _record(self, op, value, parents, fwd, vjp):
        node = Node(len(self._nodes), op, value, parents, fwd, vjp)
        self._nodes.append(node)
        return node

    def leaf(self, x):
        """Register a differentiation leaf (parameter or input array)."""
        v = np.asarray(x, dtype=np.float64)
        return self._record("leaf", v, (), None, None)

    def constant(self, x):
        # Constants are leaves never asked for a gradient; kept distinct
        # only for readability of recorded tapes.
        v = np.asarray(x, dtype=np.float64)
        return self._record("const", v, (), None, None)

    @staticmethod
    def value(node):
        return node.value

    # -- primitives ---------------------------------------------------

    def add(self, a, b):
        out = a.value + b.value
        ash, bsh = a.value.shape, b.value.shape
        return self._record(
            "add", out, (a, b), lambda x, y: x + y,
            lambda adj: (_unbroadcast(adj, ash), _unbroadcast(adj, bsh)))

    def sub(self, a, b):
        out = a.value - b.value
        ash, bsh = a.value.shape, b.value.shape
        return self._record(
            "sub", out, (a, b), lambda x, y: x - y,
            lambda adj: (_unbroadcast(adj, ash), _unbroadcast(-adj, bsh)))

    def mul(self, a, b):
        out = a.value * b.value
        av, bv = a.value, b.value
        return self._record(
            "mul", out, (a, b), lambda x, y: x * y,
            lambda adj: (_unbroadcast(adj * bv, av.shape),
                         _unbroadcast(adj * av, bv.shape)))

    def div(self, a, b):
        out = a.value / b.value
        av, bv = a.value, b.value
        return self._record(
            "div", out, (a, b), lambda x, y: x / y,
            lambda adj: (_unbroadcast(adj / bv, av.shape),
                         _unbroadcast(-adj * av / (bv * bv), bv.shape)))

    def neg(self, a):
        return self._record("neg", -a.value, (a,), lambda x: -x,
                            lambda adj: (-adj,))

    def matmul(self, a, b):
        out = a.value @ b.value
        av, bv = a.value, b.value
        return self._record(
            "matmul", out, (a, b), lambda x, y: x @ y,
            lambda adj: (adj @ bv.T, av.T @ adj))

    def matmul_t(self, a, w):
        out = a.value @ w.value.T
        av, wv = a.value, w.value
        return self._record(
            "matmul_t", out, (a, w), lambda x, y: x @ y.T,
            lambda adj: (adj @ wv, adj.T @ av))

    def concat_cols(self, a, b):
        out = np.hstack((a.value, b.value))
        ka = a.value.shape[1]
        return self._record(
            "concat_cols", out, (a, b), lambda x, y: np.hstack((x, y)),
            lambda adj: (adj[:, :ka], adj[:, ka:]))

    def tanh(self, a):
        out = np.tanh(a.value)
        return self._record("tanh", out, (a,), np.tanh,
                            lambda adj: (adj * (1.0 - out * out),))

    def srelu(self, a, d):
        out = _srelu_raw(a.value, d)
        av = a.value
        return self._record(
            "srelu", out, (a,), lambda x: _srelu_raw(x, d),
            lambda adj: (adj * _srelu_grad_raw(av, d),))

    def srelu_grad(self, a, d):
        out = _srelu_grad_raw(a.value, d)
        av = a.value
        return self._record(
            "srelu_grad", out, (a,), lambda x: _srelu_grad_raw(x, d),
            lambda adj: (adj * smoothed_relu_curv(av, d),))

    def relu(self, a):
        out = np.maximum(a.value, 0.0)
        av = a.value
        # subgradient at exactly 0 is taken as 0 (dead at the boundary)
        return self._record(
            "relu", out, (a,), lambda x: np.maximum(x, 0.0),
            lambda adj: (adj * (av > 0.0),))

    def exp(self, a):
        out = np.exp(a.value)
        return self._record("exp", out, (a,), np.exp,
                            lambda adj: (adj * out,))

    def scale(self, a, s):
        s = float(s)
        return self._record("scale", a.value * s, (a,), lambda x: x * s,
                            lambda adj: (adj * s,))

    def add_scalar(self, a, c):
        c = float(c)
        return self._record("add_scalar", a.value + c, (a,), lambda x: x + c,
                            lambda adj: (adj,))

    def maximum_scalar(self, a, c):
        c = float(c)
        out = np.maximum(a.value, c)
        av = a.value
        # ties take the constant branch: no gradient at a == c
        return self._record(
            "maximum_scalar", out, (a,), lambda x: np.maximum(x, c),
            lambda adj: (adj * (av > c),))

    def row_sum(self, a):
        out = a.value.sum(axis=1, keepdims=True)
        shape = a.value.shape
        return self._record(
            "row_sum", out, (a,), lambda x: x.sum(axis=1, keepdims=True),
            lambda adj: (np.broadcast_to(adj, shape),))

    def sum_all(self, a):
        out = a.value.sum()
        shape = a.value.shape
        return self._record(
            "sum_all", out, (a,), lambda x: x.sum(),
            lambda adj: (np.broadcast_to(adj, shape),))

    def mean_all(self, a):
        out = a.value.mean()
        shape = a.value.shape
        n = a.value.size
        return self._record(
            "mean_all", out, (a,), lambda x: x.mean(),
            lambda adj: (np.broadcast_to(adj / n, shape),))

    def reshape(self, a, shape):
        shape = tuple(shape)
        old = a.value.shape
        return self._record(
            "reshape", a.value.reshape(shape), (a,), lambda x: x.reshape(shape),
            lambda adj: (adj.reshape(old),))

    def bmat_vec(self, A, u):
        out = np.einsum("bnm,bm->bn", A.value, u.value)
        Av, uv = A.value, u.value
        return self._record(
            "bmat_vec", out, (A, u), lambda x, y: np.einsum("bnm,bm->bn", x, y),
            lambda adj: (np.einsum("bn,bm->bnm", adj, uv),
                         np.einsum("bn,bnm->bm", adj, Av)))

    def vec_bmat(self, g, A):
        out = np.einsum("bn,bnm->bm", g.value, A.value)
        gv, Av = g.value, A.value
        return self._record(
            "vec_bmat", out, (g, A), lambda x, y: np.einsum("bn,bnm->bm", x, y),
            lambda adj: (np.einsum("bm,bnm->bn", adj, Av),
                         np.einsum("bn,bm->bnm", gv, adj)))

    def sign_detached(self, a):
        # piecewise-constant: carries no gradient by construction
        return self._record("sign_detached", np.sign(a.value), (a,), np.sign,
                            lambda adj: (None,))

    # -- reverse sweep and replay --------------------------------------

    def gradient(self, output, leaves, check_finite=True):
        """Adjoints of ``output`` (a scalar node) w.r.t. each node in ``leaves``.

        Leaves the output does not depend on get exact zero gradients.
        """
        if np.asarray(output.value).size != 1:
            raise GradientError("gradient target must be scalar")
        adjoints = [None] * len(self._nodes)
        adjoints[output.idx] = np.ones_like(output.value)
        for node in reversed(self._nodes[:output.idx + 1]):
            adj = adjoints[node.idx]
            if adj is None or node.vjp is None:
                continue
            if check_finite and not np.all(np.isfinite(adj)):
                raise GradientError(
                    f"non-finite adjoint at node {node.idx} ({node.op})")
            for parent, contrib in zip(node.parents, node.vjp(adj)):
                if contrib is None:
                    continue
                if adjoints[parent.idx] is None:
                    adjoints[parent.idx] = contrib
                else:
                    adjoints[parent.idx] = adjoints[parent.idx] + contrib
        out = []
        for leaf in leaves:
            g = adjoints[leaf.idx]
            if g is None:
                out.append(np.zeros_like(leaf.value))
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise GradientError(
                    f"non-finite adjoint at node {leaf.idx} ({leaf.op})")
            out.append(np.asarray(g))
        return out

    def replay(self):
        """Recompute every node from its parents; True iff all values match bit-for-bit."""
        for node in self._nodes:
            if node.fwd is None:
                continue
            redone = node.fwd(*(p.value for p in node.parents))
            if not np.array_equal(np.asarray(redone), np.asarray(node.value)):
                return False
        return True


def param_gradient(tape, output, leaf_blocks, layout):
    """Flatten per-leaf adjoints into one vector following ``layout``.

    ``leaf_blocks`` must contain one leaf node per layout block, in layout
    order.
    """
    if len(leaf_blocks) != len(layout.blocks):
        raise ValueError("leaf_blocks out of step with layout")
    grads = tape.gradient(output, leaf_blocks)
    vec = np.empty(layout.size)
    for blk, g in zip(layout.blocks, grads):
        vec[blk.offset:blk.offset + blk.size] = g.ravel()
    return vec


# ---------------------------------------------------------------------------
# Backend-generic network application
# ---------------------------------------------------------------------------

def net_apply(ops, handles, activations, srelu_width, x):
    """Apply a network given parameter handles; returns (output, layer cache).

    ``handles`` is a list of (W, b) pairs in the backend's handle type; the
    cache holds (pre-activation, activation) per layer for later use by
    :func:`net_input_gradient`.
    """
    a = x
    cache = []
    for (w, b), act in zip(handles, activations):
        z = ops.add(ops.matmul_t(a, w), b)
        if act == "tanh":
            a = ops.tanh(z)
        elif act == "smoothed_relu":
            a = ops.srelu(z, srelu_width)
        else:
            a = z
        cache.append((z, a))
    return a, cache


def net_input_gradient(ops, handles, activations, srelu_width, cache):
    """Input gradient of a scalar-output network as backend expressions.

    Uses the cached forward pass; the result is itself differentiable when
    ``ops`` is a recording tape.
    """
    G = None  # implicit (B,1) of ones until the first non-identity layer
    for (w, _b), act, (z, a) in zip(reversed(handles), reversed(activations),
                                    reversed(cache)):
        if act == "tanh":
            dphi = ops.add_scalar(ops.neg(ops.mul(a, a)), 1.0)
        elif act == "smoothed_relu":
            dphi = ops.srelu_grad(z, srelu_width)
        else:
            dphi = None
        if dphi is not None:
            G = dphi if G is None else ops.mul(G, dphi)
        if G is None:
            # identity layer at the top of the chain: gradient is the weight
            # row itself, broadcast across the batch
            G = ops.matmul(ops.constant(np.ones((ops.value(z).shape[0], 1))), w)
        else:
            G = ops.matmul(G, w)
    return G
