"""MASR heads on precomputed image features.

Per sample, with feature ``f`` (d), detection scores ``a`` (m) and scene
label ``k``::

    z      = attribute logits, one independent affine branch per attribute
    p      = sigmoid(z)                                   attribute probabilities
    v      = ARL cascade over (a, z)                      re-weighted scores
    logits = scene_head @ concat(f, v) + bias

    L_att  = -(1/m) sum_j [ beta[j,k] * ahat_j * log p_j + (1 - ahat_j) * log(1 - p_j) ]
    L_cls  = cross entropy of logits against k
    L      = L_cls + L_att

Each ARL layer maps ``u -> u * sigmoid(w_c + relu(W_a u + W_at z + b))``;
the first layer takes ``u = a`` and every layer sees the same ``z``.

In ``scene_only`` mode the scene head reads the feature alone (its
``v`` columns are ignored) and ``L_att`` is not part of the objective.

Everything is batched over rows: ``X`` is (n, d), ``A`` and ``Ahat`` are
(n, m), ``y`` is (n,) int.  Batch losses are means over samples.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError, ShapeError
from .numerics import EPS, clamp_probability, log_softmax, relu, sigmoid, softmax

MODES = ("scene_only", "joint")
BETA_MODES = ("positive", "negative")

CHECKPOINT_MAGIC = b"MASRCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelShape:
    d: int
    m: int
    K: int
    depth: int = 2
    attr_hidden: int = 0
    adapter: bool = False

    def __post_init__(self):
        for name in ("d", "m", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.K < 2:
            raise ConfigError("need at least two scene categories")
        if self.depth < 1:
            raise ConfigError("ARL cascade needs at least one layer")
        if self.attr_hidden < 0:
            raise ConfigError("attr_hidden must be non-negative")

    def param_shapes(self):
        """Parameter names and shapes in their fixed declared order."""
        d, m, K, h = self.d, self.m, self.K, self.attr_hidden
        shapes = {}
        if self.adapter:
            shapes["adapter.weight"] = (d, d)
            shapes["adapter.bias"] = (d,)
        shapes["scene.weight"] = (K, d + m)
        shapes["scene.bias"] = (K,)
        if h:
            shapes["attr.hidden_weight"] = (m, h, d)
            shapes["attr.hidden_bias"] = (m, h)
            shapes["attr.weight"] = (m, h)
        else:
            shapes["attr.weight"] = (m, d)
        shapes["attr.bias"] = (m,)
        for t in range(self.depth):
            shapes[f"arl.{t}.w_a"] = (m, m)
            shapes[f"arl.{t}.w_at"] = (m, m)
            shapes[f"arl.{t}.w_c"] = (m,)
            shapes[f"arl.{t}.b"] = (m,)
        return shapes


def param_group(name):
    """``base`` for the shared feature adapter, ``classifier`` for every head."""
    return "base" if name.startswith("adapter.") else "classifier"


class MasrParams:
    """Named float64 arrays in :meth:`ModelShape.param_shapes` order."""

    def __init__(self, shape, arrays):
        self.shape = shape
        expected = shape.param_shapes()
        if list(arrays) != list(expected):
            if set(arrays) != set(expected):
                raise ShapeError(f"parameter names {sorted(arrays)} do not match {sorted(expected)}")
            arrays = {k: arrays[k] for k in expected}
        self.arrays = {}
        for name, shp in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shp:
                raise ShapeError(f"{name}: expected shape {shp}, got {arr.shape}")
            self.arrays[name] = arr

    @classmethod
    def zeros(cls, shape):
        return cls(shape, {k: np.zeros(s) for k, s in shape.param_shapes().items()})

    @classmethod
    def init(cls, shape, rng):
        """Uniform in +-1/sqrt(fan_in); the adapter starts as the identity."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        d, m, h = shape.d, shape.m, shape.attr_hidden
        fan_in = {
            "scene.weight": d + m,
            "scene.bias": d + m,
            "attr.hidden_weight": d,
            "attr.hidden_bias": d,
            "attr.weight": h or d,
            "attr.bias": h or d,
        }
        arrays = {}
        for name, shp in shape.param_shapes().items():
            if name == "adapter.weight":
                arrays[name] = np.eye(d)
            elif name == "adapter.bias":
                arrays[name] = np.zeros(d)
            else:
                bound = 1.0 / np.sqrt(fan_in.get(name, m))
                arrays[name] = rng.uniform(-bound, bound, size=shp)
        return cls(shape, arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return MasrParams(self.shape, {k: v.copy() for k, v in self.arrays.items()})

    def with_array(self, name, value):
        new = dict(self.arrays)
        new[name] = value
        return MasrParams(self.shape, new)

    def arl_layers(self):
        return [
            ArlLayer(self[f"arl.{t}.w_a"], self[f"arl.{t}.w_at"], self[f"arl.{t}.w_c"], self[f"arl.{t}.b"])
            for t in range(self.shape.depth)
        ]

    def __eq__(self, other):
        if not isinstance(other, MasrParams):
            return NotImplemented
        return self.shape == other.shape and all(
            np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items()
        )

    def tobytes(self):
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays.values())


@dataclass(frozen=True)
class ArlLayer:
    w_a: np.ndarray
    w_at: np.ndarray
    w_c: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class RegularizerTable:
    beta: np.ndarray  # (m, K)

    @classmethod
    def ones(cls, m, K):
        return cls(np.ones((m, K)))


# --- regularizer -----------------------------------------------------------


def compute_regularizer(ahat, categories, K):
    """Class-imbalance weights ``beta[j, k]`` from training labels.

    ``beta[j, k]`` is the number of class-``k`` samples positive for
    attribute ``j`` divided by the same count summed over the other
    classes; a zero denominator is replaced by 1.
    """
    if K < 2:
        raise ConfigError("regularizer needs K >= 2 (denominator sums over the other classes)")
    ahat = np.asarray(ahat, dtype=np.float64)
    categories = np.asarray(categories)
    if ahat.ndim != 2 or ahat.shape[0] != categories.shape[0]:
        raise ShapeError(f"labels of shape {ahat.shape} do not match {categories.shape[0]} categories")
    if not np.all((ahat == 0) | (ahat == 1)):
        raise ContractError("attribute labels must be binary")
    if categories.size and (categories.min() < 0 or categories.max() >= K):
        raise ConfigError(f"category index outside 0..{K - 1}")
    counts = np.zeros((ahat.shape[1], K))
    for k in range(K):
        counts[:, k] = ahat[categories == k].sum(axis=0)
    others = counts.sum(axis=1, keepdims=True) - counts
    others[others == 0] = 1.0
    return RegularizerTable(counts / others)


# --- forward pieces --------------------------------------------------------


def _check_features(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != params.shape.d:
        raise ShapeError(f"feature of shape {X.shape} does not match model dim d={params.shape.d}")
    return X


def adapt(params, X):
    if not params.shape.adapter:
        return X
    return X @ params["adapter.weight"].T + params["adapter.bias"]


def attribute_logits(params, F):
    """Per-attribute branch logits; F is (n, d) or (d,)."""
    F = _check_features(params, F)
    if params.shape.attr_hidden:
        pre = np.einsum("...d,mhd->...mh", F, params["attr.hidden_weight"]) + params["attr.hidden_bias"]
        return np.einsum("...mh,mh->...m", relu(pre), params["attr.weight"]) + params["attr.bias"]
    return F @ params["attr.weight"].T + params["attr.bias"]


def attribute_forward(feature, params):
    """Attribute probabilities, one independent branch per attribute."""
    return sigmoid(attribute_logits(params, adapt(params, _check_features(params, feature))))


def _check_arl(a, a_tilde, layer):
    m = layer.b.shape[0]
    if (
        a.shape[-1] != m
        or a_tilde.shape[-1] != m
        or layer.w_a.shape != (m, m)
        or layer.w_at.shape != (m, m)
        or layer.w_c.shape != (m,)
    ):
        raise ShapeError(
            f"ARL shapes disagree: a {a.shape}, a_tilde {a_tilde.shape}, W_a {layer.w_a.shape}, "
            f"W_at {layer.w_at.shape}, w_c {layer.w_c.shape}, b {layer.b.shape}"
        )


def arl_forward(a, a_tilde, layer):
    """One re-weighting layer: ``a * sigmoid(w_c + relu(W_a a + W_at a_tilde + b))``."""
    a = np.asarray(a, dtype=np.float64)
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    _check_arl(a, a_tilde, layer)
    c = relu(a @ layer.w_a.T + a_tilde @ layer.w_at.T + layer.b)
    return a * sigmoid(layer.w_c + c)


def arl_cascade(a, a_tilde, layers):
    if not layers:
        raise ConfigError("ARL cascade needs at least one layer")
    v = np.asarray(a, dtype=np.float64)
    for layer in layers:
        v = arl_forward(v, a_tilde, layer)
    return v


def scene_forward(feature, v, params):
    """Scene logits from ``concat(feature, v)``; ``v=None`` reads the feature only."""
    feature = np.asarray(feature, dtype=np.float64)
    W, b = params["scene.weight"], params["scene.bias"]
    d = params.shape.d
    if feature.shape[-1] != d:
        raise ShapeError(f"feature of shape {feature.shape} does not match scene head {W.shape}")
    if v is None:
        return feature @ W[:, :d].T + b
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.shape.m or v.shape[:-1] != feature.shape[:-1]:
        raise ShapeError(f"v of shape {v.shape} does not match scene head {W.shape}")
    return np.concatenate([feature, v], axis=-1) @ W.T + b


# --- losses ----------------------------------------------------------------


def _loss_weights(ahat, categories, reg, beta_mode):
    beta = reg.beta[:, categories].T  # (n, m)
    if beta_mode == "positive":
        return beta * ahat, 1.0 - ahat
    if beta_mode == "negative":
        return ahat, beta * (1.0 - ahat)
    raise ConfigError(f"beta_mode must be one of {BETA_MODES}, got {beta_mode!r}")


def _check_binary(ahat):
    ahat = np.asarray(ahat, dtype=np.float64)
    if not np.all((ahat == 0) | (ahat == 1)):
        raise ContractError("attribute ground truth must be binary (0/1)")
    return ahat


def attribute_loss_rows(probs, ahat, categories, reg, beta_mode="positive", mean_over_attributes=True):
    """Per-sample regularized attribute loss for a batch."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    ahat = np.atleast_2d(_check_binary(ahat))
    categories = np.atleast_1d(np.asarray(categories, dtype=np.int64))
    if probs.shape != ahat.shape:
        raise ShapeError(f"predictions {probs.shape} and labels {ahat.shape} differ in shape")
    w_pos, w_neg = _loss_weights(ahat, categories, reg, beta_mode)
    q = clamp_probability(probs)
    terms = -(w_pos * np.log(q) + w_neg * np.log1p(-q))
    total = terms.sum(axis=1)
    return total / probs.shape[1] if mean_over_attributes else total


def attribute_loss(a_tilde, ahat, category, reg, beta_mode="positive", mean_over_attributes=True):
    """Regularized multi-label loss of one sample (probabilities ``a_tilde``)."""
    return float(
        attribute_loss_rows(a_tilde, ahat, [category], reg, beta_mode, mean_over_attributes)[0]
    )


def classification_loss_rows(logits, y):
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise IndexError(f"class index outside 0..{logits.shape[1] - 1}")
    nll = -log_softmax(logits)[np.arange(y.shape[0]), y]
    return np.maximum(nll, 0.0)


@dataclass(frozen=True)
class LossTerms:
    total: float
    cls: float
    att: float


@dataclass
class Forward:
    X: np.ndarray
    F: np.ndarray
    Z: np.ndarray
    hidden_pre: np.ndarray
    arl_cache: list
    V: np.ndarray
    logits: np.ndarray


def forward(params, X, A=None, mode="joint"):
    """Batched forward pass; keeps the intermediates needed by :func:`backward`."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    X = np.atleast_2d(_check_features(params, X))
    F = adapt(params, X)
    if mode == "scene_only":
        return Forward(X, F, None, None, [], None, scene_forward(F, None, params))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape != (X.shape[0], params.shape.m):
        raise ShapeError(f"scores of shape {A.shape} do not match ({X.shape[0]}, {params.shape.m})")
    hidden_pre = None
    if params.shape.attr_hidden:
        hidden_pre = np.einsum("nd,mhd->nmh", F, params["attr.hidden_weight"]) + params["attr.hidden_bias"]
        Z = np.einsum("nmh,mh->nm", relu(hidden_pre), params["attr.weight"]) + params["attr.bias"]
    else:
        Z = F @ params["attr.weight"].T + params["attr.bias"]
    # the ARL reads attribute logits, the loss reads probabilities
    cache = []
    u = A
    for layer in params.arl_layers():
        pre = u @ layer.w_a.T + Z @ layer.w_at.T + layer.b
        gate = sigmoid(layer.w_c + relu(pre))
        cache.append((u, pre, gate))
        u = u * gate
    logits = scene_forward(F, u, params)
    return Forward(X, F, Z, hidden_pre, cache, u, logits)


def predict_logits(params, X, A=None, mode="joint"):
    return forward(params, X, A, mode).logits


def batch_loss(params, X, A, Ahat, y, reg, mode="joint", beta_mode="positive", mean_over_attributes=True):
    fw = forward(params, X, A, mode)
    return _losses(fw, Ahat, y, reg, mode, beta_mode, mean_over_attributes)


def _losses(fw, Ahat, y, reg, mode, beta_mode, mean_over_attributes):
    l_cls = float(np.mean(classification_loss_rows(fw.logits, y)))
    if mode == "scene_only":
        return LossTerms(l_cls, l_cls, 0.0)
    l_att = float(
        np.mean(attribute_loss_rows(sigmoid(fw.Z), Ahat, y, reg, beta_mode, mean_over_attributes))
    )
    return LossTerms(l_cls + l_att, l_cls, l_att)


def backward(params, fw, Ahat, y, reg, mode="joint", beta_mode="positive", mean_over_attributes=True):
    """Gradients of the batch-mean objective w.r.t. every parameter.

    Parameters without a path to the objective get exact zeros.
    """
    n = fw.logits.shape[0]
    d, m = params.shape.d, params.shape.m
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dlogits = softmax(fw.logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    W = params["scene.weight"]
    grads["scene.bias"] = dlogits.sum(axis=0)
    if mode == "scene_only":
        grads["scene.weight"][:, :d] = dlogits.T @ fw.F
        dF = dlogits @ W[:, :d]
        _adapter_backward(params, grads, dF, fw)
        return grads

    H = np.concatenate([fw.F, fw.V], axis=1)
    grads["scene.weight"] = dlogits.T @ H
    dH = dlogits @ W
    dF = dH[:, :d].copy()
    du = dH[:, d:]

    dZ = np.zeros_like(fw.Z)
    for t in reversed(range(params.shape.depth)):
        u, pre, gate = fw.arl_cache[t]
        w_a, w_at = params[f"arl.{t}.w_a"], params[f"arl.{t}.w_at"]
        dgate = du * u
        dt = dgate * gate * (1.0 - gate)
        dpre = dt * (pre > 0)
        grads[f"arl.{t}.w_c"] = dt.sum(axis=0)
        grads[f"arl.{t}.b"] = dpre.sum(axis=0)
        grads[f"arl.{t}.w_a"] = dpre.T @ u
        grads[f"arl.{t}.w_at"] = dpre.T @ fw.Z
        dZ += dpre @ w_at
        du = du * gate + dpre @ w_a

    Ahat = np.atleast_2d(_check_binary(Ahat))
    P = sigmoid(fw.Z)
    w_pos, w_neg = _loss_weights(Ahat, y, reg, beta_mode)
    inside = (P > EPS) & (P < 1.0 - EPS)
    scale = n * (m if mean_over_attributes else 1)
    dZ += np.where(inside, -w_pos * (1.0 - P) + w_neg * P, 0.0) / scale

    grads["attr.bias"] = dZ.sum(axis=0)
    if params.shape.attr_hidden:
        hidden = relu(fw.hidden_pre)
        grads["attr.weight"] = np.einsum("nm,nmh->mh", dZ, hidden)
        dpre_h = dZ[:, :, None] * params["attr.weight"][None] * (fw.hidden_pre > 0)
        grads["attr.hidden_bias"] = dpre_h.sum(axis=0)
        grads["attr.hidden_weight"] = np.einsum("nmh,nd->mhd", dpre_h, fw.F)
        dF += np.einsum("nmh,mhd->nd", dpre_h, params["attr.hidden_weight"])
    else:
        grads["attr.weight"] = dZ.T @ fw.F
        dF += dZ @ params["attr.weight"]
    _adapter_backward(params, grads, dF, fw)
    return grads


def _adapter_backward(params, grads, dF, fw):
    if not params.shape.adapter:
        return
    grads["adapter.weight"] = dF.T @ fw.X
    grads["adapter.bias"] = dF.sum(axis=0)


def loss_and_grad(params, X, A, Ahat, y, reg, mode="joint", beta_mode="positive", mean_over_attributes=True):
    fw = forward(params, X, A, mode)
    terms = _losses(fw, Ahat, y, reg, mode, beta_mode, mean_over_attributes)
    grads = backward(params, fw, Ahat, y, reg, mode, beta_mode, mean_over_attributes)
    return terms, grads


def masr_loss(sample, params, reg, mode="joint", beta_mode="positive", mean_over_attributes=True):
    """``(L_MASR, L_cls, L_att)`` for a single sample."""
    terms = batch_loss(
        params, sample.feature[None], sample.scores[None], sample.ahat[None], [sample.category],
        reg, mode, beta_mode, mean_over_attributes,
    )
    return terms.total, terms.cls, terms.att


def masr_backward(sample, params, reg, mode="joint", beta_mode="positive", mean_over_attributes=True):
    _, grads = loss_and_grad(
        params, sample.feature[None], sample.scores[None], sample.ahat[None], [sample.category],
        reg, mode, beta_mode, mean_over_attributes,
    )
    return grads


# --- checkpoints -----------------------------------------------------------


def write_checkpoint(path, params, extra=None):
    """Magic + version line, one JSON header line, then raw little-endian
    float64 arrays in declared parameter order."""
    header = {"shape": asdict(params.shape), "extra": extra or {}}
    blob = params.tobytes()
    header["n_bytes"] = len(blob)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)


def read_checkpoint(path):
    """Return ``(params, extra)`` from a file written by :func:`write_checkpoint`."""
    data = Path(path).read_bytes()
    first, sep, rest = data.partition(b"\n")
    if not sep or not first.startswith(CHECKPOINT_MAGIC + b" "):
        raise ParseError(path, 1, "not a MASR checkpoint (bad magic)")
    try:
        version = int(first[len(CHECKPOINT_MAGIC) + 1:])
    except ValueError:
        raise ParseError(path, 1, "unreadable checkpoint version") from None
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    head, sep, blob = rest.partition(b"\n")
    if not sep:
        raise ParseError(path, 2, "truncated header")
    try:
        header = json.loads(head.decode("utf-8"))
        shape = ModelShape(**header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(path, 2, f"malformed header ({exc})") from None
    shapes = shape.param_shapes()
    expected = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != expected or header.get("n_bytes") != expected:
        raise SchemaError(f"{path}: expected {expected} parameter bytes, found {len(blob)}")
    arrays, offset = {}, 0
    for name, shp in shapes.items():
        size = int(np.prod(shp))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shp)
        offset += 8 * size
    params = MasrParams(shape, arrays)
    if not all(np.all(np.isfinite(a)) for a in params.arrays.values()):
        raise SchemaError(f"{path}: checkpoint holds non-finite parameters")
    return params, header.get("extra", {})
