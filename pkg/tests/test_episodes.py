import numpy as np
import pytest

from mzd.episodes import (
    ClassSet,
    EpisodeError,
    NoPositiveClasses,
    SemanticVocab,
    VocabEntry,
    negative_count,
    revise_labels,
    sample_class_set,
)


def _vocab(n_seen=6, n_unseen=2, d=4):
    entries = [
        VocabEntry(id=i, name=f"c{i}", seen=i < n_seen, embedding=np.arange(d, dtype=float) + i)
        for i in range(n_seen + n_unseen)
    ]
    return SemanticVocab(entries)


def test_vocab_split_disjoint_exhaustive():
    v = _vocab()
    assert set(v.seen_ids) | set(v.unseen_ids) == set(v.all_ids)
    assert set(v.seen_ids) & set(v.unseen_ids) == set()
    assert v.d_s == 4


def test_vocab_rejects_ragged_embeddings():
    entries = [
        VocabEntry(id=0, name="a", seen=True, embedding=np.zeros(3)),
        VocabEntry(id=1, name="b", seen=True, embedding=np.zeros(4)),
    ]
    with pytest.raises(EpisodeError):
        SemanticVocab(entries)


def test_vocab_json_round_trip(tmp_path):
    v = _vocab()
    p = tmp_path / "vocab.json"
    v.save(p)
    v2 = SemanticVocab.load(p)
    assert v2.all_ids == v.all_ids
    for cid in v.all_ids:
        assert np.array_equal(v2.embedding(cid), v.embedding(cid))
        assert v2.is_seen(cid) == v.is_seen(cid)


def test_negative_count_rounding():
    assert negative_count(1, 0.5) == 1
    assert negative_count(3, 0.5) == 3
    assert negative_count(2, 1.0) == 0
    assert negative_count(2, 0.4) == 3  # 2*1.5 = 3
    assert negative_count(1, 0.4) == 2  # 1.5 rounds half-up
    with pytest.raises(EpisodeError):
        negative_count(1, 0.0)


def test_sample_single_positive():
    rng = np.random.default_rng(0)
    cs = sample_class_set([3], pool=range(6), lambda_pi=0.5, rng=rng)
    assert cs.positives == (3,)
    assert len(cs.negatives) == 1
    assert 3 not in cs.negatives


def test_sample_three_positives_gives_six_total():
    rng = np.random.default_rng(1)
    cs = sample_class_set([0, 4, 2], pool=range(16), lambda_pi=0.5, rng=rng)
    assert cs.positives == (0, 2, 4)
    assert cs.size == 6
    assert cs.achieved_rate == 0.5


def test_sample_lambda_one_no_negatives():
    cs = sample_class_set([1, 2], pool=range(6), lambda_pi=1.0, rng=np.random.default_rng(2))
    assert cs.negatives == ()
    assert cs.achieved_rate == 1.0


def test_sample_insufficient_negatives_records_rate():
    cs = sample_class_set([0, 1, 2], pool=range(4), lambda_pi=0.5, rng=np.random.default_rng(3))
    assert cs.negatives == (3,)
    assert cs.achieved_rate == pytest.approx(0.75)


def test_sample_empty_scene_signals():
    with pytest.raises(NoPositiveClasses):
        sample_class_set([], pool=range(4), lambda_pi=0.5, rng=np.random.default_rng(4))


def test_sample_seed_reproducible():
    for seed in range(5):
        a = sample_class_set([2, 7], pool=range(20), lambda_pi=0.3, rng=np.random.default_rng(seed))
        b = sample_class_set([2, 7], pool=range(20), lambda_pi=0.3, rng=np.random.default_rng(seed))
        assert a == b


def test_class_set_ordering_canonical():
    # layout order is global id order; positives/negatives keep their roles
    cs = ClassSet(positives=(5, 1), negatives=(9, 0))
    assert cs.ordered == (0, 1, 5, 9)
    assert cs.is_positive(5) and not cs.is_positive(9)


def test_class_set_rejects_duplicates():
    with pytest.raises(EpisodeError):
        ClassSet(positives=(1, 2), negatives=(2,))


def test_revise_labels_hand_case():
    # dog = 0, car = 1
    t = revise_labels(np.array([0, 1]), np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]), 0, 5)
    assert list(t.delta) == [1, 0, 0, 0, 0]
    assert list(t.real) == [True, True, False, False, False]
    assert np.array_equal(t.boxes[0], [0.3, 0.3, 0.2, 0.2])
    assert t.gt_class[1] == 1 and t.gt_class[2] == -1
    assert t.n_positive == 1


def test_revise_labels_negative_class():
    t = revise_labels(np.array([0, 1]), np.zeros((2, 4)), 7, 4)
    assert t.n_positive == 0
    assert list(t.delta) == [0, 0, 0, 0]
    assert list(t.real) == [True, True, False, False]


def test_revise_labels_two_dogs_padding():
    t = revise_labels(np.array([3, 3]), np.ones((2, 4)) * 0.4, 3, 5)
    assert t.n_positive == 2
    assert list(t.delta) == [1, 1, 0, 0, 0]


def test_revise_labels_overflow_raises():
    with pytest.raises(EpisodeError):
        revise_labels(np.array([3, 3, 3]), np.zeros((3, 4)), 3, 2)
    with pytest.raises(EpisodeError):
        revise_labels(np.array([1, 2, 3]), np.zeros((3, 4)), 1, 2)


def test_per_class_positives_cover_every_box_once():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        classes = rng.integers(0, 4, n)
        boxes = rng.uniform(0.2, 0.8, (n, 4))
        cs = sample_class_set(classes, pool=range(8), lambda_pi=0.5, rng=rng)
        counts = np.zeros(n)
        for cid in cs.ordered:
            t = revise_labels(classes, boxes, cid, 8)
            counts += t.delta[:n]
        assert np.all(counts == 1.0)
