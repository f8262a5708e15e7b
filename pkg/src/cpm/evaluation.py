"""Downstream protocols: linear probe, fine-tuning, mining precision, embedding export."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import contrastive as cc
from .augment import AugmentationConfig, augment
from .data import DataFormatError, SkeletonSequence, stack_sequences
from .model import Model

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1


@dataclass
class EvalConfig:
    epochs: int = 30
    lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0
    standardize: bool = True
    finetune_lr: float = 0.05


@dataclass
class EvalReport:
    top1: float
    per_class: list[float]
    confusion: list[list[int]]
    config: dict = field(default_factory=dict)
    checkpoint_hash: str = ""
    protocol: str = "linear"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _labels(seqs: Sequence[SkeletonSequence]) -> np.ndarray:
    labels = np.array([-1 if s.label is None else s.label for s in seqs])
    if np.any(labels < 0):
        raise ValueError("evaluation needs labels on every sample")
    return labels


def extract_features(model: Model, seqs: Sequence[SkeletonSequence], batch_size: int = 200) -> np.ndarray:
    """Eval-mode pooled encoder features ``h`` for each clip."""
    feats = []
    with ad.no_grad():
        for i in range(0, len(seqs), batch_size):
            data, _, _ = stack_sequences(seqs[i:i + batch_size])
            feats.append(model.encode(data, train=False).data.astype(np.float64))
    return np.concatenate(feats) if feats else np.zeros((0, model.config.feature_dim))


def build_report(pred: np.ndarray, labels: np.ndarray, num_classes: int, **extra) -> EvalReport:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    per_class = []
    for c in range(num_classes):
        n = confusion[c].sum()
        per_class.append(float(confusion[c, c] / n) if n else float("nan"))
    top1 = float((pred == labels).mean()) if len(labels) else 0.0
    return EvalReport(top1, per_class, confusion.tolist(), **extra)


class LinearClassifier:
    """Fully connected layer followed by softmax, zero-initialised."""

    def __init__(self, in_dim: int, num_classes: int, dtype=np.float64):
        self.weight = ad.Tensor(np.zeros((in_dim, num_classes), dtype), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(num_classes, dtype), requires_grad=True)
        self.mean = np.zeros(in_dim)
        self.scale = np.ones(in_dim)

    def parameters(self):
        return [self.weight, self.bias]

    def logits(self, feats) -> ad.Tensor:
        if not isinstance(feats, ad.Tensor):
            feats = ad.Tensor(np.asarray(feats, dtype=self.weight.dtype))
        return ad.matmul(feats, self.weight) + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.logits((feats - self.mean) / self.scale).data.argmax(axis=1)


def cross_entropy_loss(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    logp = ad.log_softmax_with_temperature(logits, 1.0)
    return ad.multiply(ad.reduce_sum(ad.multiply(ad.Tensor(onehot), logp)), -1.0 / len(labels))


class _SGD:
    def __init__(self, params, momentum, weight_decay):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data = p.data - lr * v
            p.grad = None


def _cosine(base, i, total):
    return base * 0.5 * (1 + math.cos(math.pi * i / max(total, 1)))


def train_linear(train_feats: np.ndarray, train_labels: np.ndarray, num_classes: int,
                 config: EvalConfig) -> LinearClassifier:
    clf = LinearClassifier(train_feats.shape[1], num_classes)
    if config.standardize and len(train_feats):
        clf.mean = train_feats.mean(axis=0)
        clf.scale = np.maximum(train_feats.std(axis=0), 1e-8)
    x = (train_feats - clf.mean) / clf.scale
    rng = np.random.default_rng(config.seed)
    opt = _SGD(clf.parameters(), config.momentum, config.weight_decay)
    n = len(x)
    bs = min(config.batch_size, n)
    per_epoch = max(n // bs, 1)
    total = config.epochs * per_epoch
    it = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            loss = cross_entropy_loss(clf.logits(x[idx]), train_labels[idx])
            ad.backward(loss)
            opt.step(_cosine(config.lr, it, total))
            it += 1
    return clf


def linear_evaluate(model: Model, train: Sequence[SkeletonSequence], test: Sequence[SkeletonSequence],
                    config: EvalConfig | None = None, num_classes: int | None = None) -> EvalReport:
    """Train a linear classifier on frozen eval-mode features and report test top-1."""
    config = config or EvalConfig()
    y_train, y_test = _labels(train), _labels(test)
    num_classes = num_classes or int(max(y_train.max(), y_test.max()) + 1)
    if y_train.max() >= num_classes or y_test.max() >= num_classes:
        raise ValueError(f"labels exceed declared class count {num_classes}")
    before = model.encoder_hash()
    clf = train_linear(extract_features(model, train), y_train, num_classes, config)
    pred = clf.predict(extract_features(model, test))
    after = model.encoder_hash()
    if before != after:
        raise RuntimeError("encoder parameters changed during linear evaluation")
    return build_report(pred, y_test, num_classes, config=asdict(config), checkpoint_hash=before,
                        protocol="linear")


def finetune_evaluate(model: Model, train: Sequence[SkeletonSequence], test: Sequence[SkeletonSequence],
                      config: EvalConfig | None = None, num_classes: int | None = None,
                      augmentation: AugmentationConfig | None = None) -> EvalReport:
    """Train encoder and classifier together with cross-entropy; the input model is left untouched.

    The classifier sees raw (unstandardised) features here because the
    encoder moves under it.
    """
    config = config or EvalConfig()
    y_train, y_test = _labels(train), _labels(test)
    num_classes = num_classes or int(max(y_train.max(), y_test.max()) + 1)
    if y_train.max() >= num_classes or y_test.max() >= num_classes:
        raise ValueError(f"labels exceed declared class count {num_classes}")
    net = model.copy()
    start_hash = net.encoder_hash()
    clf = LinearClassifier(net.config.feature_dim, num_classes, dtype=net.dtype)
    enc_params = list(net.encoder_parameters().values())
    opt = _SGD(enc_params + clf.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(train)
    bs = min(config.batch_size, n)
    per_epoch = max(n // bs, 1)
    total = config.epochs * per_epoch
    it = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            data, labels, _ = stack_sequences([train[i] for i in idx])
            if augmentation is not None:
                data = np.stack([augment(s, rng, augmentation) for s in data])
            h = net.encode(data, train=True)
            loss = cross_entropy_loss(clf.logits(h), labels)
            ad.backward(loss)
            for name, p in net.params.items():
                if not name.startswith("encoder."):
                    p.grad = None
            opt.step(_cosine(config.finetune_lr, it, total))
            it += 1
    pred = clf.predict(extract_features(net, test))
    return build_report(pred, y_test, num_classes, config=asdict(config), checkpoint_hash=start_hash,
                        protocol="finetune")


# ----------------------------------------------------------------------
# mining precision


def replay_mining_precision(
    embed_batch: Callable[[np.ndarray], np.ndarray],
    labels: np.ndarray,
    ids: Sequence[str],
    k: int,
    queue_size: int,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Fill a queue by streaming shuffled batches, then measure one more pass.

    ``embed_batch(indices)`` returns unit target embeddings for those samples.
    Precision of a query is the fraction of its ``k`` mined non-self positives
    that share its label; the result averages over every query in the pass.
    """
    if k > queue_size:
        raise ValueError(f"K={k} exceeds queue size {queue_size}")
    if k < 1:
        raise ValueError("K must be positive to measure precision")
    n = len(labels)
    bs = min(batch_size, n)
    per_epoch = n // bs
    queue = None
    ids = np.asarray([str(i) for i in ids], dtype=object)

    def batches():
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * bs:(b + 1) * bs]

    while queue is None or not queue.full:
        for idx in batches():
            if queue is not None and queue.full:
                break
            emb = embed_batch(idx)
            if queue is None:
                queue = cc.ContextQueue(queue_size, emb.shape[1])
            queue.push(emb, ids[idx], labels[idx])
    hits = []
    for idx in batches():
        entries = queue.entries()
        q_labels = queue.labels()
        emb = embed_batch(idx)
        dots = emb @ entries.T
        exclude = cc.self_mask(ids[idx], queue.ids())
        for row, i in enumerate(idx):
            res = cc.mine_topk(dots[row], k, exclude[row])
            hits.append(np.mean(q_labels[res.indices] == labels[i]) if len(res.indices) else 0.0)
        queue.push(emb, ids[idx], labels[idx])
    return float(np.mean(hits))


def mining_precision(model: Model, seqs: Sequence[SkeletonSequence], k: int, queue_size: int,
                     batch_size: int = 128, augmentation: AugmentationConfig | None = None,
                     seed: int = 0) -> float:
    """Precision of top-``k`` mined positives for a frozen checkpoint.

    Labels are used only to score the mined sets, never to choose them.
    """
    labels = _labels(seqs)
    data, _, ids = stack_sequences(seqs)
    augmentation = augmentation or AugmentationConfig()
    rng = np.random.default_rng(seed)

    def embed(idx):
        views = np.stack([augment(data[i], rng, augmentation) for i in idx])
        with ad.no_grad():
            z = model.embed(views, train=False)
            return cc.center_and_normalize(z, train=len(idx) > 1).data.astype(np.float64)

    return replay_mining_precision(embed, labels, ids, k, queue_size, batch_size, rng)


# ----------------------------------------------------------------------
# embedding export


def write_embeddings(path, ids: Sequence[str], labels: Sequence[int | None], vectors: np.ndarray) -> Path:
    """``EMBD`` | version u16 | count u32 | records of (id u16+bytes, label i32, dim u16, float32s)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = np.asarray(vectors)
    with open(path, "wb") as fh:
        fh.write(EMBD_MAGIC)
        fh.write(struct.pack("<HI", EMBD_VERSION, len(ids)))
        for sid, label, vec in zip(ids, labels, vectors):
            raw = str(sid).encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<iH", -1 if label is None else int(label), vec.shape[0]))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    return path


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != EMBD_MAGIC:
        raise DataFormatError(f"bad magic bytes {buf[:4]!r}, expected {EMBD_MAGIC!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != EMBD_VERSION:
        raise DataFormatError(f"unsupported embedding format version {version}")
    pos = 10
    ids, labels, vecs = [], [], []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            ids.append(buf[pos:pos + n].decode("utf-8"))
            pos += n
            label, dim = struct.unpack_from("<iH", buf, pos)
            pos += 6
            if len(buf) < pos + 4 * dim:
                raise struct.error("short vector")
            vecs.append(np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32))
            labels.append(label)
            pos += 4 * dim
    except struct.error:
        raise DataFormatError(f"record count mismatch: header declares {count}, file holds {len(ids)}") from None
    return ids, np.asarray(labels), np.stack(vecs) if vecs else np.zeros((0, 0), np.float32)


def export_embeddings(model: Model, seqs: Sequence[SkeletonSequence], path) -> Path:
    feats = extract_features(model, seqs)
    return write_embeddings(path, [s.sample_id for s in seqs], [s.label for s in seqs], feats)
