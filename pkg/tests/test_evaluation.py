import numpy as np
import pytest

from cpm.data import (Dataset, DataFormatError, GraphAdjacency, SkeletonSequence, generate_synthetic_dataset,
                      skeleton_edges)
from cpm.evaluation import (EvalConfig, build_report, export_embeddings, extract_features, finetune_evaluate,
                            linear_evaluate, read_embeddings, replay_mining_precision, train_linear,
                            write_embeddings)
from cpm.model import EncoderConfig, Model

SMALL = EncoderConfig(widths=[8, 8], temporal_kernel=3, projector_hidden=8, projector_out=8)


@pytest.fixture(scope="module")
def split():
    seqs, manifest = generate_synthetic_dataset(4, 20, 15, 16, 0.05, 3, amplitude_jitter=0.5,
                                                view_jitter=0.5)
    ds = Dataset(seqs, manifest)
    return ds.split("train"), ds.split("test")


def small_model(seed=0):
    return Model(SMALL, GraphAdjacency(15, skeleton_edges(15)), seed=seed)


# -- linear probe --------------------------------------------------------


def test_one_hot_features_separate_perfectly():
    labels = np.repeat(np.arange(5), 20)
    feats = np.eye(5)[labels] + 0.01 * np.random.default_rng(0).normal(size=(100, 5))
    clf = train_linear(feats, labels, 5, EvalConfig(epochs=20, batch_size=20))
    assert np.array_equal(clf.predict(feats), labels)


def test_report_accuracy_is_confusion_trace():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 6, 300)
    pred = np.where(rng.random(300) < 0.6, labels, rng.integers(0, 6, 300))
    rep = build_report(pred, labels, 6)
    conf = np.array(rep.confusion)
    assert rep.top1 == pytest.approx(np.trace(conf) / conf.sum(), abs=1e-15)
    assert conf.sum(axis=1).tolist() == np.bincount(labels, minlength=6).tolist()


def test_linear_leaves_encoder_untouched(split):
    train, test = split
    m = small_model()
    before = m.encoder_hash()
    rep = linear_evaluate(m, train, test, EvalConfig(epochs=5))
    assert m.encoder_hash() == before == rep.checkpoint_hash
    assert 0.0 <= rep.top1 <= 1.0 and len(rep.per_class) == 4


def test_zero_epoch_finetune_is_chance(split):
    train, test = split
    rep = finetune_evaluate(small_model(), train, test, EvalConfig(epochs=0))
    # a zero classifier predicts class 0 everywhere
    assert rep.top1 == pytest.approx(np.mean([s.label == 0 for s in test]))


def test_finetune_at_least_linear_and_leaves_input(split):
    train, test = split
    m = small_model()
    before = m.encoder_hash()
    lin = linear_evaluate(m, train, test, EvalConfig(epochs=20, batch_size=20))
    ft = finetune_evaluate(m, train, test, EvalConfig(epochs=20, batch_size=20))
    assert m.encoder_hash() == before
    assert ft.top1 >= lin.top1


def test_labels_required(split):
    train, test = split
    unlabeled = [SkeletonSequence(s.data, None, s.sample_id) for s in test]
    with pytest.raises(ValueError):
        linear_evaluate(small_model(), train, unlabeled)


# -- mining precision ------------------------------------------------------


def _fixed(embeddings):
    return lambda idx: embeddings[idx]


def test_random_embeddings_give_chance_precision():
    n, c = 10_000, 10
    rng = np.random.default_rng(0)
    labels = rng.integers(0, c, n)
    emb = rng.normal(size=(n, 16))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    ids = [f"s{i}" for i in range(n)]
    p = replay_mining_precision(_fixed(emb), labels, ids, 16, 4096, 128, np.random.default_rng(1))
    assert abs(p - 1 / c) < 0.02


def test_class_codes_give_perfect_precision():
    n, c = 2000, 10
    labels = np.arange(n) % c
    emb = np.eye(c)[labels]
    ids = [f"s{i}" for i in range(n)]
    p = replay_mining_precision(_fixed(emb), labels, ids, 4, 1000, 100, np.random.default_rng(2))
    assert p == 1.0


def test_precision_excludes_self():
    # each sample's only close neighbour is itself; excluding it leaves chance
    n = 400
    labels = np.arange(n) % 4
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(n, 64))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    p = replay_mining_precision(_fixed(emb), labels, [str(i) for i in range(n)], 1, n, 100,
                                np.random.default_rng(0))
    assert p < 0.5


def test_k_larger_than_queue_rejected():
    with pytest.raises(ValueError):
        replay_mining_precision(_fixed(np.eye(3)), np.arange(3), list("abc"), 5, 3, 1,
                                np.random.default_rng(0))


# -- export ----------------------------------------------------------------


def test_export_round_trip_and_deterministic(split, tmp_path):
    train, test = split
    m = small_model()
    seqs = train + test
    a = export_embeddings(m, seqs, tmp_path / "a.embd")
    b = export_embeddings(m, seqs, tmp_path / "b.embd")
    assert a.read_bytes() == b.read_bytes()
    ids, labels, vecs = read_embeddings(a)
    assert len(ids) == len(seqs) and ids == [s.sample_id for s in seqs]
    assert labels.tolist() == [s.label for s in seqs]
    np.testing.assert_array_equal(vecs, extract_features(m, seqs).astype(np.float32))


def test_export_unlabeled_and_bad_files(tmp_path):
    p = write_embeddings(tmp_path / "x.embd", ["a", "b"], [None, 3], np.ones((2, 4)))
    ids, labels, vecs = read_embeddings(p)
    assert labels.tolist() == [-1, 3] and vecs.shape == (2, 4)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataFormatError, match="record count mismatch"):
        read_embeddings(p)
    p.write_bytes(b"XXXX" + b"\0" * 10)
    with pytest.raises(DataFormatError, match="magic"):
        read_embeddings(p)
