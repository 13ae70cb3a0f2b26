"""Small fully-connected embedding networks trained with numpy.

A network is a body (ReLU hidden layers followed by a linear embedding
projection) plus an optional linear classification head that reads the
embedding.  The last hidden activation is exposed so a child network can
continue from it.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    embedding_dim: int = 128
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_layers or min(self.hidden_layers) < 1:
            raise ValueError("hidden_layers must be a non-empty list of positive widths")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")

    @property
    def hidden_dim(self) -> int:
        return self.hidden_layers[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_layers"]),
                   int(d["embedding_dim"]), int(d["num_classes"]))


@dataclass(frozen=True)
class CostModel:
    flops: int
    param_bytes: int

    def __add__(self, other: "CostModel") -> "CostModel":
        return CostModel(self.flops + other.flops, self.param_bytes + other.param_bytes)


def cost_of(spec: NetworkSpec) -> CostModel:
    """FLOPs (one multiply-add = 2) and 4-byte parameter footprint."""
    dims = [spec.input_dim, *spec.hidden_layers, spec.embedding_dim]
    pairs = list(zip(dims[:-1], dims[1:]))
    if spec.num_classes:
        pairs.append((spec.embedding_dim, spec.num_classes))
    flops = sum(2 * a * b for a, b in pairs)
    params = sum(a * b + b for a, b in pairs)
    return CostModel(flops, BYTES_PER_PARAM * params)


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Network:
    """Parameters of one node network.

    ``layers`` holds ``(weight, bias)`` pairs for the hidden layers followed by
    the embedding projection; ``head`` is ``None`` when ``num_classes == 0``.
    """

    def __init__(self, spec: NetworkSpec, layers, head=None, body_frozen=False):
        self.spec = spec
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in layers]
        self.head = None if head is None else (
            np.asarray(head[0], dtype=np.float64), np.asarray(head[1], dtype=np.float64))
        self.body_frozen = body_frozen
        self.history: dict[str, list[float]] = {}
        self._check_shapes()

    def _check_shapes(self):
        s = self.spec
        dims = [s.input_dim, *s.hidden_layers, s.embedding_dim]
        if len(self.layers) != len(dims) - 1:
            raise ValueError("layer count does not match spec")
        for (w, b), a, c in zip(self.layers, dims[:-1], dims[1:]):
            if w.shape != (a, c) or b.shape != (c,):
                raise ValueError(f"weight shape {w.shape} does not match spec ({a}, {c})")
        if s.num_classes:
            if self.head is None or self.head[0].shape != (s.embedding_dim, s.num_classes) \
                    or self.head[1].shape != (s.num_classes,):
                raise ValueError("classification head does not match spec")
        elif self.head is not None:
            raise ValueError("spec has no classes but a head was given")

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng) -> "Network":
        rng = np.random.default_rng(rng)
        dims = [spec.input_dim, *spec.hidden_layers, spec.embedding_dim]
        layers = [(glorot(a, c, rng), np.zeros(c)) for a, c in zip(dims[:-1], dims[1:])]
        head = None
        if spec.num_classes:
            head = (glorot(spec.embedding_dim, spec.num_classes, rng),
                    np.zeros(spec.num_classes))
        return cls(spec, layers, head)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "Network":
        dims = [spec.input_dim, *spec.hidden_layers, spec.embedding_dim]
        layers = [(np.zeros((a, c)), np.zeros(c)) for a, c in zip(dims[:-1], dims[1:])]
        head = None
        if spec.num_classes:
            head = (np.zeros((spec.embedding_dim, spec.num_classes)),
                    np.zeros(spec.num_classes))
        return cls(spec, layers, head)

    def copy(self) -> "Network":
        net = Network(self.spec, [(w.copy(), b.copy()) for w, b in self.layers],
                      None if self.head is None else (self.head[0].copy(), self.head[1].copy()),
                      self.body_frozen)
        net.history = {k: list(v) for k, v in self.history.items()}
        return net

    @property
    def cost(self) -> CostModel:
        return cost_of(self.spec)

    def body_hash(self) -> str:
        h = hashlib.sha256()
        for w, b in self.layers:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    def weights_hash(self) -> str:
        h = hashlib.sha256(self.body_hash().encode())
        if self.head is not None:
            h.update(self.head[0].tobytes())
            h.update(self.head[1].tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        def arr(a):
            return a.ravel().tolist()
        return {
            "spec": self.spec.to_dict(),
            "body_frozen": self.body_frozen,
            "layers": [{"weight": arr(w), "bias": arr(b)} for w, b in self.layers],
            "head": None if self.head is None else
            {"weight": arr(self.head[0]), "bias": arr(self.head[1])},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        spec = NetworkSpec.from_dict(d["spec"])
        dims = [spec.input_dim, *spec.hidden_layers, spec.embedding_dim]
        layers = [
            (np.array(l["weight"], dtype=np.float64).reshape(a, c),
             np.array(l["bias"], dtype=np.float64))
            for l, a, c in zip(d["layers"], dims[:-1], dims[1:])
        ]
        head = None
        if d.get("head") is not None:
            head = (np.array(d["head"]["weight"], dtype=np.float64)
                    .reshape(spec.embedding_dim, spec.num_classes),
                    np.array(d["head"]["bias"], dtype=np.float64))
        return cls(spec, layers, head, bool(d.get("body_frozen", False)))


# -- forward / backward -----------------------------------------------------

def _body_forward(net: Network, X: np.ndarray):
    acts = [X]
    h = X
    for w, b in net.layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = net.layers[-1]
    return h @ w + b, acts


def _body_backward(net: Network, acts, d_emb: np.ndarray):
    grads = [None] * len(net.layers)
    w, _ = net.layers[-1]
    grads[-1] = (acts[-1].T @ d_emb, d_emb.sum(axis=0))
    dh = d_emb @ w.T
    for i in range(len(net.layers) - 2, -1, -1):
        dz = dh * (acts[i + 1] > 0)
        grads[i] = (acts[i].T @ dz, dz.sum(axis=0))
        if i:
            dh = dz @ net.layers[i][0].T
    return grads


def forward_batch(net: Network, X) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """Row-wise forward pass: ``(embeddings, logits or None, last hidden)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.spec.input_dim:
        raise ValueError(
            f"dimension mismatch: network expects {net.spec.input_dim}, got {X.shape[-1]}"
        )
    emb, acts = _body_forward(net, X)
    logits = None
    if net.head is not None:
        logits = emb @ net.head[0] + net.head[1]
    return emb, logits, acts[-1]


def forward(net: Network, x) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single feature vector")
    emb, logits, hidden = forward_batch(net, x[None, :])
    return emb[0], None if logits is None else logits[0], hidden[0]


# -- losses -----------------------------------------------------------------

def pairwise_distances(E: np.ndarray) -> np.ndarray:
    diff = E[:, None, :] - E[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass
class BatchHard:
    """Per-anchor hardest positive / negative of one batch."""

    valid: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    d_pos: np.ndarray
    d_neg: np.ndarray

    def hinge(self, margin: float) -> np.ndarray:
        h = np.zeros(len(self.valid))
        h[self.valid] = margin + self.d_pos[self.valid] - self.d_neg[self.valid]
        return h

    def active(self, margin: float) -> np.ndarray:
        return self.valid & (self.hinge(margin) > 0)


def batch_hard(embeddings, labels) -> BatchHard:
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(E)
    if len(np.unique(labels)) < 2:
        raise ValueError("degenerate batch: triplet loss needs at least 2 identities")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise ValueError("degenerate batch: no identity has two samples")
    dist = pairwise_distances(E)
    p = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    q = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    rows = np.arange(n)
    return BatchHard(valid, p, q, dist[rows, p], dist[rows, q])


def triplet_loss_batch_hard(embeddings, identity_labels, margin: float):
    """Batch-hard triplet loss and its gradient w.r.t. ``embeddings``.

    The loss is averaged over anchors that have both a positive and a
    negative in the batch.  At zero distance the (sub)gradient is taken as 0.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    bh = batch_hard(E, identity_labels)
    n_valid = int(bh.valid.sum())
    hinge = bh.hinge(margin)
    loss = float(np.maximum(hinge, 0.0)[bh.valid].sum() / n_valid)

    grad = np.zeros_like(E)
    a = np.flatnonzero(bh.active(margin))
    if len(a):
        p, q = bh.positive[a], bh.negative[a]
        u_ap = E[a] - E[p]
        u_an = E[a] - E[q]
        d_ap = bh.d_pos[a][:, None]
        d_an = bh.d_neg[a][:, None]
        g_ap = np.divide(u_ap, d_ap, out=np.zeros_like(u_ap), where=d_ap > 0) / n_valid
        g_an = np.divide(u_an, d_an, out=np.zeros_like(u_an), where=d_an > 0) / n_valid
        np.add.at(grad, a, g_ap - g_an)
        np.add.at(grad, p, -g_ap)
        np.add.at(grad, q, g_an)
    return loss, grad


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TripletConfig:
    P: int = 8
    K: int = 4
    margin: float = 1.0
    learning_rate: float = 0.01
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 100
    max_epochs: int = 300
    saturation_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("batch-hard mining needs P >= 2 and K >= 2")
        if self.margin <= 0 or self.learning_rate <= 0:
            raise ValueError("margin and learning_rate must be positive")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate schedule")
        if self.max_epochs < 1 or self.saturation_patience < 1:
            raise ValueError("max_epochs and saturation_patience must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate / self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid head training parameters")


SATURATION_TOL = 1e-4


def _identity_groups(identities) -> list[np.ndarray]:
    identities = np.asarray(identities)
    _, inv = np.unique(identities, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.flatnonzero(np.diff(inv[order])) + 1
    return np.split(order, bounds)


def train_embedding(network: Network, train, config: TripletConfig,
                    inputs: Optional[np.ndarray] = None) -> Network:
    """Train the body with batch-hard triplet loss and plain SGD.

    ``train`` is a :class:`~hreid.data.Dataset` (only identities are used);
    ``inputs`` overrides its features row-for-row, e.g. with a parent
    network's hidden activations.  An epoch is ``ceil(n / (P * K))`` P x K
    batches, i.e. roughly one pass over the images.  Identities with fewer
    than K images are sampled with replacement; nodes with fewer than P
    identities put all of them in every batch.
    """
    if network.body_frozen:
        raise ValueError("cannot train the body of a frozen network")
    X = np.asarray(train.features if inputs is None else inputs, dtype=np.float64)
    groups = _identity_groups(train.identity_ids)
    if len(groups) < 2:
        raise ValueError("triplet training needs at least 2 identities "
                         f"(got {len(groups)})")
    if len(X) != len(train):
        raise ValueError("inputs do not align with the training samples")

    net = network.copy()
    rng = np.random.default_rng(config.seed)
    n_ids = len(groups)
    p = min(config.P, n_ids)
    batches = max(1, math.ceil(len(X) / (p * config.K)))
    history = []
    best, stale = math.inf, 0
    for epoch in range(config.max_epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        for _ in range(batches):
            chosen = rng.choice(n_ids, size=p, replace=False)
            rows, labels = [], []
            for c in chosen:
                g = groups[c]
                rows.append(rng.choice(g, size=config.K, replace=len(g) < config.K))
                labels.append(np.full(config.K, c))
            rows = np.concatenate(rows)
            labels = np.concatenate(labels)
            emb, acts = _body_forward(net, X[rows])
            loss, d_emb = triplet_loss_batch_hard(emb, labels, config.margin)
            total += loss
            for (w, b), (gw, gb) in zip(net.layers, _body_backward(net, acts, d_emb)):
                w -= lr * gw
                b -= lr * gb
        epoch_loss = total / batches
        history.append(epoch_loss)
        if epoch_loss < best - SATURATION_TOL:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.saturation_patience:
                break
    net.history["triplet"] = history
    log.debug("triplet training stopped after %d epochs, loss %.4f",
              len(history), history[-1])
    return net


def _sgd_softmax(X, y, W, b, epochs, batch_size, lr, rng):
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, g = cross_entropy(X[idx] @ W + b, y[idx])
            W -= lr * (X[idx].T @ g)
            b -= lr * g.sum(axis=0)
    return W, b


def train_classifier_head(network: Network, train, attribute: str,
                          epochs: int = 100, batch_size: int = 32,
                          learning_rate: float = 0.01, inputs=None,
                          seed: int = 0) -> Network:
    """Cross-entropy training of the head on frozen-body embeddings."""
    attr = train.schema.get(attribute)
    if network.spec.num_classes != len(attr.values):
        raise ValueError(
            f"class-count mismatch: head has {network.spec.num_classes} classes, "
            f"{attribute!r} has {len(attr.values)} values"
        )
    X = np.asarray(train.features if inputs is None else inputs, dtype=np.float64)
    y = train.column(attribute)
    keep = y >= 0
    net = network.copy()
    net.body_frozen = True
    if not keep.any():
        log.warning("no labeled samples for %r; head left untrained", attribute)
        return net
    emb, _, _ = forward_batch(net, X[keep])
    W, b = net.head[0].copy(), net.head[1].copy()
    rng = np.random.default_rng(seed)
    net.head = _sgd_softmax(emb, y[keep], W, b, epochs, batch_size, learning_rate, rng)
    return net


def fit_linear_classifier(X, y, n_classes: int, epochs: int = 200,
                          learning_rate: float = 0.01, batch_size: int = 32,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression trained with minibatch SGD (zero-initialised)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    return _sgd_softmax(X, y, W, b, epochs, batch_size, learning_rate,
                        np.random.default_rng(seed))


def classification_accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((np.argmax(logits, axis=1) == labels).mean())
