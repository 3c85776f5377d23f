"""Policy network over graph observations, written on bare numpy.

Architecture: three graph-convolution layers (symmetric-normalized adjacency
with self-loops, 64 channels, ReLU) produce per-node embeddings; the rows of
the action ring are stacked in ring order and passed through a two-layer
512-wide MLP; a linear actor head emits 3 action logits and a linear critic
head emits the value estimate. Both heads share the backbone.

The backward pass is analytic (hand-derived reverse mode); a ForwardCache
carries every intermediate needed to make it exact. Training batches run the
same math over a block-diagonal sparse adjacency so one matmul covers many
graphs; the dense single-graph route is kept separate and the two are pinned
to each other in tests.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .observation import CLASS_CODES, FEATURE_DIM, GraphObservation
from .seeding import derive_rng


class NeuralError(ValueError):
    pass


HIDDEN_DIM = 64
READOUT_DIM = 512
N_ACTIONS = 3
GCN_LAYERS = 3


@dataclass
class PolicyParameters:
    gcn_w: list[np.ndarray]  # (10,64), (64,64), (64,64)
    gcn_b: list[np.ndarray]  # (64,) each
    readout_w: list[np.ndarray]  # (n_action*64, 512), (512, 512)
    readout_b: list[np.ndarray]  # (512,) each
    actor_w: np.ndarray  # (512, 3)
    actor_b: np.ndarray  # (3,)
    critic_w: np.ndarray  # (512, 1)
    critic_b: np.ndarray  # (1,)

    @property
    def n_action(self) -> int:
        return self.readout_w[0].shape[0] // HIDDEN_DIM

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k in range(GCN_LAYERS):
            out.append((f"gcn_w{k}", self.gcn_w[k]))
            out.append((f"gcn_b{k}", self.gcn_b[k]))
        for k in range(2):
            out.append((f"readout_w{k}", self.readout_w[k]))
            out.append((f"readout_b{k}", self.readout_b[k]))
        out += [
            ("actor_w", self.actor_w),
            ("actor_b", self.actor_b),
            ("critic_w", self.critic_w),
            ("critic_b", self.critic_b),
        ]
        return out


@dataclass
class Gradients:
    gcn_w: list[np.ndarray]
    gcn_b: list[np.ndarray]
    readout_w: list[np.ndarray]
    readout_b: list[np.ndarray]
    actor_w: np.ndarray
    actor_b: np.ndarray
    critic_w: np.ndarray
    critic_b: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return PolicyParameters.named_arrays(self)  # same field layout


def init_parameters(seed: int, n_action: int = 8) -> PolicyParameters:
    """Xavier-uniform weights, zero biases, deterministic in seed."""
    rng = derive_rng(seed, "init")

    def xavier(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    stack = n_action * HIDDEN_DIM
    return PolicyParameters(
        gcn_w=[xavier(FEATURE_DIM, HIDDEN_DIM), xavier(HIDDEN_DIM, HIDDEN_DIM), xavier(HIDDEN_DIM, HIDDEN_DIM)],
        gcn_b=[np.zeros(HIDDEN_DIM) for _ in range(GCN_LAYERS)],
        readout_w=[xavier(stack, READOUT_DIM), xavier(READOUT_DIM, READOUT_DIM)],
        readout_b=[np.zeros(READOUT_DIM) for _ in range(2)],
        actor_w=xavier(READOUT_DIM, N_ACTIONS),
        actor_b=np.zeros(N_ACTIONS),
        critic_w=xavier(READOUT_DIM, 1),
        critic_b=np.zeros(1),
    )


def zeros_like_gradients(params: PolicyParameters) -> Gradients:
    return Gradients(
        gcn_w=[np.zeros_like(w) for w in params.gcn_w],
        gcn_b=[np.zeros_like(b) for b in params.gcn_b],
        readout_w=[np.zeros_like(w) for w in params.readout_w],
        readout_b=[np.zeros_like(b) for b in params.readout_b],
        actor_w=np.zeros_like(params.actor_w),
        actor_b=np.zeros_like(params.actor_b),
        critic_w=np.zeros_like(params.critic_w),
        critic_b=np.zeros_like(params.critic_b),
    )


# ---------------------------------------------------------------------------
# Graph plumbing
# ---------------------------------------------------------------------------


def normalized_adjacency(obs: GraphObservation) -> np.ndarray:
    """Dense D^(-1/2) (A + I) D^(-1/2) for one observation."""
    n = obs.n_nodes
    a_hat = np.eye(n)
    for i, j in obs.edges:
        a_hat[i, j] = 1.0
        a_hat[j, i] = 1.0
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1)) if n else np.zeros(0)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass
class GraphBatch:
    """Several observations packed into one block-diagonal graph."""

    features: np.ndarray  # (N, 10)
    n_mat: sparse.csr_matrix  # (N, N) normalized adjacency, block diagonal
    action_rows: np.ndarray | None  # (B, n_action) row indices, or None
    pool_slices: list[tuple[int, int]] | None  # per-graph node ranges (pooled mode)
    n_graphs: int


def build_batch(observations: list[GraphObservation]) -> GraphBatch:
    feats, rows, cols, vals = [], [], [], []
    action_rows: list[list[int]] = []
    pool_slices: list[tuple[int, int]] = []
    base = 0
    pooled = any(not o.action_order for o in observations)
    if pooled and any(o.action_order for o in observations):
        raise NeuralError("cannot mix action-ring and pooled observations in one batch")
    for obs in observations:
        n = obs.n_nodes
        feats.append(obs.features)
        deg = np.ones(n)
        for i, j in obs.edges:
            deg[i] += 1.0
            deg[j] += 1.0
        inv = 1.0 / np.sqrt(deg) if n else np.zeros(0)
        for i in range(n):
            rows.append(base + i)
            cols.append(base + i)
            vals.append(inv[i] * inv[i])
        for i, j in obs.edges:
            w = inv[i] * inv[j]
            rows += [base + i, base + j]
            cols += [base + j, base + i]
            vals += [w, w]
        if pooled:
            pool_slices.append((base, base + n))
        else:
            action_rows.append([base + k for k in obs.action_order])
        base += n
    features = np.vstack(feats) if feats else np.zeros((0, FEATURE_DIM))
    n_mat = sparse.csr_matrix(
        (np.asarray(vals), (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))),
        shape=(base, base),
    )
    return GraphBatch(
        features=features,
        n_mat=n_mat,
        action_rows=None if pooled else np.asarray(action_rows, dtype=int),
        pool_slices=pool_slices if pooled else None,
        n_graphs=len(observations),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    x: np.ndarray
    n_mat: np.ndarray | sparse.csr_matrix
    msg: list[np.ndarray] = field(default_factory=list)  # N @ H_{k-1} per layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations per layer
    hidden: list[np.ndarray] = field(default_factory=list)  # activations per layer
    z: np.ndarray | None = None  # (B, n_action*64) readout input
    pre1: np.ndarray | None = None
    h1: np.ndarray | None = None
    pre2: np.ndarray | None = None
    y_g: np.ndarray | None = None  # (B, 512)
    action_rows: np.ndarray | None = None
    pool_slices: list[tuple[int, int]] | None = None


def _gcn_stack(params: PolicyParameters, x: np.ndarray, n_mat, cache: ForwardCache) -> np.ndarray:
    h = x
    for w, b in zip(params.gcn_w, params.gcn_b):
        msg = n_mat @ h
        pre = msg @ w + b
        h = np.maximum(pre, 0.0)
        cache.msg.append(msg)
        cache.pre.append(pre)
        cache.hidden.append(h)
    return h


def gcn_forward(params: PolicyParameters, obs: GraphObservation) -> tuple[np.ndarray, ForwardCache]:
    """Per-node embeddings after the three convolution layers (dense route)."""
    x = np.asarray(obs.features, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NeuralError("non-finite input features")
    cache = ForwardCache(x=x, n_mat=normalized_adjacency(obs))
    h3 = _gcn_stack(params, x, cache.n_mat, cache)
    return h3, cache


def _stack_readout_input(
    h3: np.ndarray,
    action_rows: np.ndarray | None,
    pool_slices: list[tuple[int, int]] | None,
    n_action: int,
) -> np.ndarray:
    if action_rows is not None:
        return h3[action_rows.reshape(-1)].reshape(len(action_rows), n_action * HIDDEN_DIM)
    z = np.zeros((len(pool_slices), n_action * HIDDEN_DIM))
    for g, (s, e) in enumerate(pool_slices):
        if e > s:
            z[g] = np.tile(h3[s:e].mean(axis=0), n_action)
    return z


def _readout_mlp(params: PolicyParameters, z: np.ndarray, cache: ForwardCache) -> np.ndarray:
    cache.z = z
    cache.pre1 = z @ params.readout_w[0] + params.readout_b[0]
    cache.h1 = np.maximum(cache.pre1, 0.0)
    cache.pre2 = cache.h1 @ params.readout_w[1] + params.readout_b[1]
    cache.y_g = np.maximum(cache.pre2, 0.0)
    return cache.y_g


def _heads_batch(params: PolicyParameters, y_g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = y_g @ params.actor_w + params.actor_b
    values = (y_g @ params.critic_w)[:, 0] + params.critic_b[0]
    return logits, values


def readout(params: PolicyParameters, h3: np.ndarray, action_order: list[int]) -> np.ndarray:
    """Graph-level vector: stacked action-ring rows through the two-layer
    MLP. With no ring (ablation), the mean over all nodes is tiled to the
    same stacked width."""
    n_action = params.n_action
    if action_order:
        if len(action_order) != n_action:
            raise NeuralError(f"expected {n_action} action rows, got {len(action_order)}")
        rows = np.asarray([action_order], dtype=int)
        z = _stack_readout_input(h3, rows, None, n_action)
    else:
        z = _stack_readout_input(h3, None, [(0, len(h3))], n_action)
    cache = ForwardCache(x=h3, n_mat=np.zeros((0, 0)))
    return _readout_mlp(params, z, cache)[0]


def heads(params: PolicyParameters, y_g: np.ndarray) -> tuple[np.ndarray, float]:
    if not np.all(np.isfinite(y_g)):
        raise NeuralError("non-finite readout vector")
    logits = y_g @ params.actor_w + params.actor_b
    value = float(y_g @ params.critic_w[:, 0] + params.critic_b[0])
    return logits, value


def policy_forward(
    params: PolicyParameters, obs: GraphObservation
) -> tuple[np.ndarray, float, ForwardCache]:
    """Full single-graph pass: (logits, value, cache for backward)."""
    h3, cache = gcn_forward(params, obs)
    if obs.action_order:
        if len(obs.action_order) != params.n_action:
            raise NeuralError(
                f"parameters stack {params.n_action} action rows, "
                f"observation has {len(obs.action_order)}"
            )
        cache.action_rows = np.asarray([obs.action_order], dtype=int)
    else:
        cache.pool_slices = [(0, obs.n_nodes)]
    z = _stack_readout_input(h3, cache.action_rows, cache.pool_slices, params.n_action)
    logits, values = _heads_batch(params, _readout_mlp(params, z, cache))
    return logits[0], float(values[0]), cache


def batch_forward(
    params: PolicyParameters, batch: GraphBatch
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """(logits (B,3), values (B,), cache) over a block-diagonal batch."""
    x = batch.features
    if not np.all(np.isfinite(x)):
        raise NeuralError("non-finite input features")
    cache = ForwardCache(x=x, n_mat=batch.n_mat)
    cache.action_rows = batch.action_rows
    cache.pool_slices = batch.pool_slices
    h3 = _gcn_stack(params, x, batch.n_mat, cache)
    z = _stack_readout_input(h3, batch.action_rows, batch.pool_slices, params.n_action)
    logits, values = _heads_batch(params, _readout_mlp(params, z, cache))
    return logits, values, cache


# ---------------------------------------------------------------------------
# Action sampling
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy_of(logits: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    logp = log_softmax(logits)
    # p == 0 contributes nothing even when its log underflows to -inf
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0.0, p * logp, 0.0)
    return -terms.sum(axis=-1)


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]:
    """Draw from the categorical distribution; returns (action, log_prob,
    entropy)."""
    logits = np.asarray(logits, dtype=float)
    p = softmax(logits)
    action = int(rng.choice(len(p), p=p))
    return action, float(log_softmax(logits)[action]), float(entropy_of(logits))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(
    params: PolicyParameters,
    cache: ForwardCache,
    dlogits: np.ndarray,
    dvalue: np.ndarray | float,
) -> Gradients:
    """Analytic gradients of loss L with dL/dlogits and dL/dvalue given.
    Accepts single-graph ((3,), scalar) or batch ((B,3), (B,)) seeds; batch
    contributions sum."""
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=float))
    dvalue = np.atleast_1d(np.asarray(dvalue, dtype=float))
    b = len(dlogits)
    if cache.y_g is None or len(cache.y_g) != b or len(dvalue) != b:
        raise NeuralError("loss gradient shape does not match cached forward pass")

    g = zeros_like_gradients(params)
    y_g = cache.y_g
    g.actor_w[:] = y_g.T @ dlogits
    g.actor_b[:] = dlogits.sum(axis=0)
    g.critic_w[:] = (y_g.T @ dvalue)[:, None]
    g.critic_b[:] = dvalue.sum()
    dy = dlogits @ params.actor_w.T + dvalue[:, None] * params.critic_w[:, 0][None, :]

    dpre2 = dy * (cache.pre2 > 0)
    g.readout_w[1][:] = cache.h1.T @ dpre2
    g.readout_b[1][:] = dpre2.sum(axis=0)
    dh1 = dpre2 @ params.readout_w[1].T
    dpre1 = dh1 * (cache.pre1 > 0)
    g.readout_w[0][:] = cache.z.T @ dpre1
    g.readout_b[0][:] = dpre1.sum(axis=0)
    dz = dpre1 @ params.readout_w[0].T

    n_total = len(cache.x)
    n_action = params.n_action
    dh = np.zeros((n_total, HIDDEN_DIM))
    if cache.action_rows is not None:
        np.add.at(dh, cache.action_rows.reshape(-1), dz.reshape(b * n_action, HIDDEN_DIM))
    else:
        for gi, (s, e) in enumerate(cache.pool_slices):
            if e > s:
                dmean = dz[gi].reshape(n_action, HIDDEN_DIM).sum(axis=0)
                dh[s:e] += dmean / (e - s)

    for k in range(GCN_LAYERS - 1, -1, -1):
        dpre = dh * (cache.pre[k] > 0)
        g.gcn_w[k][:] = cache.msg[k].T @ dpre
        g.gcn_b[k][:] = dpre.sum(axis=0)
        if k > 0:
            dh = cache.n_mat.T @ (dpre @ params.gcn_w[k].T)
    return g


# ---------------------------------------------------------------------------
# Optimizer steps
# ---------------------------------------------------------------------------


def sgd_step(params: PolicyParameters, grads: Gradients, lr: float) -> None:
    """Plain gradient descent, in place: p <- p - lr * g."""
    for (_, p), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
        p -= lr * g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam(params: PolicyParameters) -> AdamState:
    arrays = [a for _, a in params.named_arrays()]
    return AdamState(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    params: PolicyParameters,
    grads: Gradients,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    t = state.t
    for i, ((_, p), (_, g)) in enumerate(zip(params.named_arrays(), grads.named_arrays())):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1**t)
        v_hat = state.v[i] / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: PolicyParameters, meta: dict | None = None) -> None:
    arrays = {name: a for name, a in params.named_arrays()}
    payload = dict(meta or {})
    payload["class_codes"] = CLASS_CODES
    arrays["__meta__"] = np.frombuffer(json.dumps(payload, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[PolicyParameters, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        params = PolicyParameters(
            gcn_w=[data[f"gcn_w{k}"] for k in range(GCN_LAYERS)],
            gcn_b=[data[f"gcn_b{k}"] for k in range(GCN_LAYERS)],
            readout_w=[data[f"readout_w{k}"] for k in range(2)],
            readout_b=[data[f"readout_b{k}"] for k in range(2)],
            actor_w=data["actor_w"],
            actor_b=data["actor_b"],
            critic_w=data["critic_w"],
            critic_b=data["critic_b"],
        )
    saved_codes = meta.pop("class_codes")
    if saved_codes != CLASS_CODES:
        raise NeuralError("checkpoint class-code vocabulary does not match this build")
    return params, meta
