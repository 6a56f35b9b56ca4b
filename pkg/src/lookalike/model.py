"""Two-tower customer embedding model.

One ReLU MLP maps a feature vector to an embedding; the cosine between the
embeddings of two customers estimates their similarity target. Training
minimizes mean L1 error with Adam using hand-written gradients.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader
from .customer_data import CustomerRecord, DataError
from .features import FeatureContext, FeatureSchema, FeatureStats
from .similarity import LabeledPair

NORM_EPS = 1e-12

MODEL_MAGIC = b"LKEM"
MODEL_VERSION = 1


@dataclass
class MlpParams:
    """``layers[k] = (W, b)`` with ``W`` shaped (out, in)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def __eq__(self, other):
        if not isinstance(other, MlpParams) or len(self.layers) != len(other.layers):
            return NotImplemented if not isinstance(other, MlpParams) else False
        return all(np.array_equal(x, y) for x, y in zip(self.arrays(), other.arrays()))


@dataclass
class TrainConfig:
    embedding_dim: int = 128
    hidden_dims: tuple[int, ...] = (256, 128)
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.embedding_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive; epochs >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    initial_val_mae: float | None = None
    test_mae: float | None = None


def init_params(config: TrainConfig, input_dim: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.rng_seed)
    dims = [input_dim, *config.hidden_dims, config.embedding_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Embedding for one feature vector (1-D) or a batch (rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input width {x.shape[-1]} != model input {params.input_dim}")
    h = x
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cached(params: MlpParams, X: np.ndarray):
    acts = [X]
    pre = []
    h = X
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    return acts, pre


def cosine_rows(EA: np.ndarray, EB: np.ndarray) -> np.ndarray:
    """Rowwise cosine, 0 where either row has (near-)zero norm."""
    na = np.linalg.norm(EA, axis=-1)
    nb = np.linalg.norm(EB, axis=-1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    dots = np.einsum("...i,...i->...", EA, EB)
    cos = np.where(ok, dots / np.where(ok, na * nb, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def predict_similarity(params: MlpParams, x_a, x_b) -> float:
    return float(cosine_rows(forward(params, x_a), forward(params, x_b)))


def predict_batch(params: MlpParams, XA: np.ndarray, XB: np.ndarray) -> np.ndarray:
    return cosine_rows(forward(params, XA), forward(params, XB))


def l1_loss(pred, target):
    """``|pred - target|``, elementwise for arrays."""
    return np.abs(np.asarray(pred) - np.asarray(target))


def loss_and_gradients(
    params: MlpParams, XA: np.ndarray, XB: np.ndarray, targets: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean L1 loss over the batch and its gradient w.r.t. every parameter."""
    n = len(targets)
    if n == 0:
        raise ValueError("empty batch")
    X = np.concatenate([XA, XB], axis=0)
    acts, pre = _forward_cached(params, X)
    E = acts[-1]
    EA, EB = E[:n], E[n:]
    na = np.linalg.norm(EA, axis=1)
    nb = np.linalg.norm(EB, axis=1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)
    cos = np.where(ok, np.einsum("ij,ij->i", EA, EB) / (safe_na * safe_nb), 0.0)
    err = cos - targets
    loss = float(np.abs(err).mean())

    # np.sign(0) == 0 gives the zero subgradient at a perfect prediction.
    g = np.where(ok, np.sign(err), 0.0) / n
    ga = g[:, None] * (EB / (safe_na * safe_nb)[:, None] - (cos / safe_na**2)[:, None] * EA)
    gb = g[:, None] * (EA / (safe_na * safe_nb)[:, None] - (cos / safe_nb**2)[:, None] * EB)
    delta = np.concatenate([ga, gb], axis=0)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k:
            delta = (delta @ W) * (pre[k - 1] > 0)
    return loss, grads


def backward(params: MlpParams, batch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of mean L1 loss for ``batch`` = ``(XA, XB, targets)`` or a list of triples."""
    if isinstance(batch, tuple) and len(batch) == 3 and np.ndim(batch[2]) == 1:
        XA, XB, t = batch
    else:
        XA = np.array([b[0] for b in batch], dtype=np.float64)
        XB = np.array([b[1] for b in batch], dtype=np.float64)
        t = np.array([b[2] for b in batch], dtype=np.float64)
    return loss_and_gradients(
        params, np.atleast_2d(XA), np.atleast_2d(XB), np.asarray(t, dtype=np.float64)
    )[1]


class Adam:
    def __init__(self, params: MlpParams, config: TrainConfig):
        self.lr = config.learning_rate
        self.b1, self.b2, self.eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: MlpParams, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        flat = [g for layer in grads for g in layer]
        for p, g, m, v in zip(params.arrays(), flat, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PairData:
    """Feature matrix plus row indices for a list of labeled pairs."""

    def __init__(self, X: np.ndarray, row_of: dict[int, int], pairs: Sequence[LabeledPair]):
        missing = [
            cid for p in pairs for cid in (p.id_a, p.id_b) if cid not in row_of
        ]
        if missing:
            raise DataError(f"pair references unknown customer_id {missing[0]}")
        self.X = X
        self.ia = np.array([row_of[p.id_a] for p in pairs], dtype=np.int64)
        self.ib = np.array([row_of[p.id_b] for p in pairs], dtype=np.int64)
        self.targets = np.array([p.target for p in pairs], dtype=np.float64)

    def __len__(self):
        return len(self.targets)

    def mae(self, params: MlpParams) -> float:
        E = forward(params, self.X)
        return float(np.abs(cosine_rows(E[self.ia], E[self.ib]) - self.targets).mean())


def train(
    records: Sequence[CustomerRecord],
    pairs: Sequence[LabeledPair],
    context: FeatureContext,
    config: TrainConfig,
    val_pairs: Sequence[LabeledPair] | None = None,
    test_pairs: Sequence[LabeledPair] | None = None,
    init: MlpParams | None = None,
) -> tuple[MlpParams, TrainReport]:
    """Fit the shared tower with Adam over seeded shuffled mini-batches."""
    X = context.matrix(records)
    row_of = {r.customer_id: i for i, r in enumerate(records)}
    data = PairData(X, row_of, pairs)
    val = PairData(X, row_of, val_pairs) if val_pairs else None
    test = PairData(X, row_of, test_pairs) if test_pairs else None

    params = init.copy() if init is not None else init_params(config, context.width)
    report = TrainReport()
    if val is not None:
        report.initial_val_mae = val.mae(params)
    opt = Adam(params, config)
    rng = np.random.default_rng(config.rng_seed + 1)
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss, grads = loss_and_gradients(
                params, X[data.ia[sel]], X[data.ib[sel]], data.targets[sel]
            )
            opt.step(params, grads)
            total += loss * len(sel)
        report.train_loss.append(total / max(len(data), 1))
        if val is not None:
            report.val_mae.append(val.mae(params))
    if test is not None:
        report.test_mae = test.mae(params)
    return params, report


def evaluate_mae(
    params: MlpParams,
    pairs: Sequence[LabeledPair],
    records: Sequence[CustomerRecord],
    context: FeatureContext,
) -> float:
    if not pairs:
        raise ValueError("evaluate_mae needs at least one pair")
    ids = {cid for p in pairs for cid in (p.id_a, p.id_b)}
    subset = [r for r in records if r.customer_id in ids]
    X = context.matrix(subset)
    return PairData(X, {r.customer_id: i for i, r in enumerate(subset)}, pairs).mae(params)


def embed_all(
    params: MlpParams,
    records: Sequence[CustomerRecord],
    context: FeatureContext,
    threads: int = 1,
    chunk: int = 4096,
) -> tuple[np.ndarray, np.ndarray]:
    """``(customer_ids, embeddings)`` in input order.

    Chunks are independent and written to fixed output rows, so any thread
    count gives the same values.
    """
    n = len(records)
    ids = np.array([r.customer_id for r in records], dtype=np.uint64)
    out = np.zeros((n, params.embedding_dim))

    def work(start: int) -> None:
        part = records[start : start + chunk]
        out[start : start + len(part)] = forward(params, context.matrix(part))

    starts = range(0, n, chunk)
    if threads > 1 and n > chunk:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return ids, out


# --- persistence --------------------------------------------------------------


@dataclass
class ModelBundle:
    """Parameters plus the feature metadata that makes a model file self-describing."""

    params: MlpParams
    schema: FeatureSchema
    stats: FeatureStats
    meta: dict = field(default_factory=dict)


def save_model(bundle: ModelBundle, path: str | Path) -> None:
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(bundle.params.layers))]
    for W, b in bundle.params.layers:
        rows, cols = W.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    trailer = json.dumps(
        {"schema": bundle.schema.to_dict(), "stats": bundle.stats.to_dict(), "meta": bundle.meta},
        sort_keys=True,
    ).encode("utf-8")
    parts.append(struct.pack("<Q", len(trailer)))
    parts.append(trailer)
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> ModelBundle:
    r = Reader(Path(path).read_bytes(), f"model file {path}")
    r.header(MODEL_MAGIC, MODEL_VERSION)
    (n_layers,) = r.unpack("<I")
    layers = []
    prev = None
    for _ in range(n_layers):
        at = r.pos
        rows, cols = r.unpack("<II")
        if prev is not None and cols != prev:
            raise DataError(f"model file {path}: layer shapes do not chain at offset {at}")
        W = r.array("<f8", rows * cols).reshape(rows, cols).astype(np.float64)
        b = r.array("<f8", rows).astype(np.float64)
        layers.append((W, b))
        prev = rows
    at = r.pos
    (n_json,) = r.unpack("<Q")
    try:
        trailer = json.loads(r.take(n_json).decode("utf-8"))
        schema = FeatureSchema.from_dict(trailer["schema"])
        stats = FeatureStats.from_dict(trailer["stats"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"model file {path}: bad JSON trailer at offset {at}: {exc}") from None
    r.finish()
    if not layers:
        raise DataError(f"model file {path}: no layers")
    params = MlpParams(layers)
    if params.input_dim != schema.total_width:
        raise DataError(
            f"model file {path}: input width {params.input_dim} != schema width {schema.total_width}"
        )
    return ModelBundle(params, schema, stats, trailer.get("meta", {}))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden_dims"] = list(config.hidden_dims)
    return d
