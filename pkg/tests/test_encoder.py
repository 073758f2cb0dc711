import numpy as np
import pytest

from kgnorm import encoder as enc
from kgnorm.tokenizer import TokenSequence


def small_params(dtype=np.float64, std=0.3, seed=0, R=2):
    dims = enc.EncoderDims(vocab_size=12, d_model=6, d_ff=8, d_out=5, max_len=7, n_relations=R)
    return enc.init_params(dims, np.random.default_rng(seed), dtype=dtype, std=std)


def seq(ids, max_len=7):
    n = len(ids)
    return TokenSequence(tuple(ids) + (0,) * (max_len - n), (1,) * n + (0,) * (max_len - n))


class TestForward:
    def test_zero_params(self):
        p = small_params()
        for name, a in p.items():
            a[...] = 0
        h = enc.forward(p, seq([2, 5, 6, 3]))
        np.testing.assert_array_equal(h.H, 0.0)

    def test_permutation_changes_output(self):
        p = small_params()
        a = enc.forward(p, seq([2, 5, 6, 3])).H
        b = enc.forward(p, seq([2, 6, 5, 3])).H
        assert not np.allclose(a[0], b[0])

    def test_deterministic(self):
        p = small_params()
        s = seq([2, 4, 7, 3])
        np.testing.assert_array_equal(enc.forward(p, s).H, enc.forward(p, s).H)

    def test_pad_tokens_do_not_leak(self):
        p = small_params()
        a = seq([2, 4, 7, 3])
        b = TokenSequence(a.ids[:4] + (9, 9, 9), a.attention_mask)
        ha, hb = enc.forward(p, a), enc.forward(p, b)
        np.testing.assert_allclose(ha.H[:4], hb.H[:4], atol=1e-14)
        np.testing.assert_allclose(enc.avg_pool(ha), enc.avg_pool(hb), atol=1e-14)

    def test_id_out_of_range(self):
        with pytest.raises(ValueError):
            enc.forward(small_params(), seq([2, 12, 3]))

    def test_batch_matches_single(self):
        p = small_params()
        s1, s2 = seq([2, 4, 3]), seq([2, 5, 6, 7, 3])
        batch = enc.forward(p, [s1, s2])
        np.testing.assert_allclose(batch.H[0], enc.forward(p, s1).H, atol=1e-14)
        np.testing.assert_allclose(batch.H[1], enc.forward(p, s2).H, atol=1e-14)

    def test_trim_preserves_pooled(self):
        p = small_params()
        seqs = [seq([2, 4, 3]), seq([2, 5, 6, 3])]
        full = enc.pool(enc.forward(p, seqs), "avg")
        np.testing.assert_allclose(enc.encode(p, seqs, "avg"), full, atol=1e-14)


class TestPooling:
    def test_cls(self):
        v = np.arange(5.0)
        H = np.zeros((4, 5))
        H[0] = v
        np.testing.assert_array_equal(enc.cls_pool(enc.HiddenStates(H, np.ones(4, bool))), v)

    def test_cls_zero(self):
        np.testing.assert_array_equal(enc.cls_pool(enc.HiddenStates(np.zeros((3, 2)), np.ones(3, bool))), 0)

    def test_avg_equal_rows(self):
        v = np.array([1.0, -2.0, 0.5])
        H = np.tile(v, (4, 1))
        H[3] = 99.0
        np.testing.assert_allclose(enc.avg_pool(enc.HiddenStates(H, np.array([1, 1, 1, 0], bool))), v)

    def test_avg_two_rows(self):
        u, w = np.array([1.0, 3.0]), np.array([5.0, -1.0])
        H = np.stack([u, w, np.full(2, 7.0)])
        np.testing.assert_allclose(enc.avg_pool(enc.HiddenStates(H, np.array([1, 1, 0], bool))), (u + w) / 2)

    def test_unknown_pooling(self):
        with pytest.raises(ValueError):
            enc.pool(enc.HiddenStates(np.zeros((2, 2)), np.ones(2, bool)), "max")


def fd_grad(p, tokens, dH, name, idx, h=1e-5):
    flat = p[name].reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    fp = float(np.sum(enc.forward(p, tokens).H * dH))
    flat[idx] = orig - h
    fm = float(np.sum(enc.forward(p, tokens).H * dH))
    flat[idx] = orig
    return (fp - fm) / (2 * h)


class TestBackward:
    def test_zero_upstream(self):
        p = small_params()
        s = [seq([2, 4, 3]), seq([2, 5, 6, 3])]
        g = enc.backward(p, s, np.zeros((2, 7, 5)))
        assert all(not np.any(a) for a in g.values())

    def test_unused_token_row(self):
        p = small_params()
        s = [seq([2, 4, 3]), seq([2, 5, 6, 3])]
        g = enc.backward(p, s, np.random.default_rng(0).normal(size=(2, 7, 5)))
        np.testing.assert_array_equal(g["token_emb"][[1, 7, 8, 9, 10, 11]], 0.0)
        assert np.any(g["token_emb"][4])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            enc.backward(small_params(), seq([2, 4, 3]), np.zeros((7, 4)))

    @pytest.mark.parametrize("name", [n for n in enc.FIELDS if n not in ("rel_mats", "rel_vecs")])
    def test_finite_difference(self, name):
        p = small_params()
        rng = np.random.default_rng(hash(name) % 2**32)
        tokens = [seq([2, 4, 5, 3]), seq([2, 6, 7, 8, 9, 3])]
        dH = rng.normal(size=(2, 7, 5))
        dH[~np.array([s.attention_mask for s in tokens], bool)] = 0  # pad rows never read
        g = enc.backward(p, tokens, dH)
        for idx in rng.integers(p[name].size, size=6):
            if name == "token_emb" and idx // 6 not in (2, 3, 4, 5, 6, 7, 8, 9):
                continue
            num = fd_grad(p, tokens, dH, name, int(idx))
            ana = g[name].reshape(-1)[idx]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-8)

    def test_pool_backward_avg(self):
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)
        g = enc.pool_backward(np.ones((2, 3)), mask, "avg", np.float64)
        np.testing.assert_allclose(g[0, :, 0], [0.5, 0.5, 0, 0])
        np.testing.assert_allclose(g[1, :, 0], [0.25] * 4)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, dtype):
        p = small_params(dtype=dtype)
        p.relation_labels = ["CHD|is_a", "RO|has_finding_site"]
        enc.save_checkpoint(p, tmp_path / "m.kge")
        q = enc.load_checkpoint(tmp_path / "m.kge")
        assert q.equals(p)
        assert q.dtype == dtype
        assert q.relation_labels == ["CHD|is_a", "RO|has_finding_site"]

    def test_header(self, tmp_path):
        enc.save_checkpoint(small_params(dtype=np.float32), tmp_path / "m.kge")
        raw = (tmp_path / "m.kge").read_bytes()
        assert raw[:4] == b"KGE1"
        assert np.frombuffer(raw[4:28], "<u4").tolist() == [12, 6, 8, 5, 7, 2]
        assert raw[28] == 4

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.kge").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError):
            enc.load_checkpoint(tmp_path / "x.kge")


def test_init_relation_matrices_near_identity():
    dims = enc.EncoderDims(50, 16, 32, 16, 8, 3)
    p = enc.init_params(dims, np.random.default_rng(0))
    assert p.dtype == np.float32
    for M in p["rel_mats"]:
        np.testing.assert_allclose(M, np.eye(16), atol=0.06)
    assert abs(p["token_emb"].std() - 0.02) < 0.002
    np.testing.assert_array_equal(p["out_b"], 0)
