from collections import Counter

import numpy as np
import pytest

from kgnorm.kg_store import RelationStore, RelationTriplet, load_concepts, load_relations
from kgnorm.sampler import BatchSampler, check_batch_shape, sample_batch
from kgnorm.tokenizer import TokenCache


@pytest.fixture
def synth(synthetic_files):
    from kgnorm.tokenizer import load_vocab
    d = load_concepts(synthetic_files["concepts"])
    return d, load_relations(synthetic_files["relations"], d), TokenCache(load_vocab(synthetic_files["vocab"]), 32)


def triplet_counts(batch):
    return Counter((t.head, t.relation, t.tail) for t in batch.triplets)


class TestShape:
    def test_k4_m2(self, synth):
        b = sample_batch(*synth, 4, 2, np.random.default_rng(0))
        c = triplet_counts(b)
        assert len(c) == 2 and set(c.values()) == {2}

    def test_k128_m8(self, synth):
        b = sample_batch(*synth, 128, 8, np.random.default_rng(0))
        c = triplet_counts(b)
        assert len(c) == 16 and set(c.values()) == {8}
        assert len(b.concept_ids) == 256 and b.relation_ids.shape == (128,)

    def test_single_triplet_store(self, toy_kg, toy_vocab):
        d, _ = toy_kg
        store = RelationStore([RelationTriplet("C1", "CHD|is_a", "C3")])
        b = sample_batch(d, store, TokenCache(toy_vocab, 16), 4, 2, np.random.default_rng(0))
        assert triplet_counts(b) == {("C1", "CHD|is_a", "C3"): 4}

    @pytest.mark.parametrize("k,m", [(6, 4), (4, 1), (16, 5), (8, 4)])
    def test_bad_shape(self, k, m):
        with pytest.raises(ValueError):
            check_batch_shape(k, m)

    def test_labels_follow_triplets(self, synth):
        d, store, _ = synth
        b = sample_batch(*synth, 32, 4, np.random.default_rng(1))
        assert b.concept_ids == [t.head for t in b.triplets] + [t.tail for t in b.triplets]
        assert [store.labels[r] for r in b.relation_ids] == [t.relation for t in b.triplets]
        for t, s in zip(b.triplets, b.head_surfaces):
            assert s in {x.surface for x in d[t.head].terms}


def test_seeded_stream(synth):
    a = BatchSampler(*synth, 32, 4, np.random.default_rng(5))
    b = BatchSampler(*synth, 32, 4, np.random.default_rng(5))
    for _ in range(3):
        x, y = a.sample(), b.sample()
        assert x.head_surfaces == y.head_surfaces and x.tail_surfaces == y.tail_surfaces
        np.testing.assert_array_equal(x.relation_ids, y.relation_ids)


def test_triplets_roughly_uniform(synth):
    _, store, _ = synth
    s = BatchSampler(*synth, 16, 4, np.random.default_rng(0))
    counts = np.bincount(np.concatenate([s.draw_indices()[::4] for _ in range(2000)]), minlength=len(store))
    # 8000 draws over 400 triplets, 20 expected each
    assert counts.min() > 0
    assert abs(counts.mean() - 20) < 1e-9 and counts.std() < 8
