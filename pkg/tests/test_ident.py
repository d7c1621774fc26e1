import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from totevision.backbone import BackboneConfig
from totevision.errors import DataError, DegenerateEmbeddingError, DimensionMismatchError, EmptyGalleryError
from totevision.ident import (
    LOGIT_SCALE_INIT,
    GalleryIndex,
    IdentConfig,
    IdentHead,
    IdentModel,
    build_gallery,
    contrastive_loss,
    embed_query,
    embed_reference,
    l2_normalize,
    read_rankings,
    retrieve,
    write_rankings,
)

TINY = BackboneConfig(image_size=32, embed_dim=8, num_heads=2, ffn_hidden=16, depth=1)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def scalar_contrastive(q, r, scale):
    """Independent loop implementation of the symmetric cross-entropy."""
    n = len(q)
    logits = [[scale * sum(a * b for a, b in zip(q[i], r[j])) for j in range(n)] for i in range(n)]

    def ce(rows):
        total = 0.0
        for i, row in enumerate(rows):
            m = max(row)
            total += -(row[i] - m - math.log(sum(math.exp(v - m) for v in row)))
        return total / n

    cols = [[logits[i][j] for i in range(n)] for j in range(n)]
    return (ce(logits) + ce(cols)) / 2


class TestEmbeddings:
    @pytest.fixture(scope="class")
    @staticmethod
    def model():
        torch.manual_seed(0)
        return IdentModel(TINY).double().eval()

    def test_reference_unit_norm_and_deterministic(self, model):
        imgs = torch.rand(4, 32, 32, 3, dtype=torch.float64)
        imgs[3] = imgs[0]
        e = model.embed_reference(imgs)
        np.testing.assert_allclose(e.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)
        assert torch.equal(e[0], e[3])

    def test_three_four_five(self):
        head = IdentHead(2, mid_dim=3, out_dim=2)
        with torch.no_grad():
            head.proj.weight.copy_(torch.eye(2))
            head.proj.bias.zero_()
        out = l2_normalize(head.proj(torch.tensor([[3.0, 4.0]])))
        np.testing.assert_allclose(out.detach().numpy(), [[0.6, 0.8]], atol=1e-7)

    def test_single_view_query_is_reference_path(self, model):
        imgs = torch.rand(3, 32, 32, 3, dtype=torch.float64)
        assert torch.equal(model.embed_query(imgs[:, None]), model.embed_reference(imgs))
        img = (np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)
        np.testing.assert_array_equal(embed_query(model, img[None]), embed_reference(model, img)[0])

    @pytest.mark.parametrize("k", [2, 4])
    def test_wrong_view_count(self, model, k):
        with pytest.raises(DimensionMismatchError):
            model.embed_query(torch.rand(1, k, 32, 32, 3, dtype=torch.float64))

    def test_zero_fusion_uses_bias_path(self):
        torch.manual_seed(1)
        model = IdentModel(TINY).double()
        with torch.no_grad():
            for p in model.head.fusion.parameters():
                p.zero_()
        q = model.embed_query(torch.rand(2, 3, 32, 32, 3, dtype=torch.float64))
        expect = l2_normalize(model.head.proj.bias[None].expand(2, -1))
        torch.testing.assert_close(q, expect, rtol=0, atol=1e-12)
        with torch.no_grad():
            model.head.proj.bias.zero_()
        with pytest.raises(DegenerateEmbeddingError):
            model.embed_query(torch.rand(1, 3, 32, 32, 3, dtype=torch.float64))

    def test_hand_set_tiny_fusion(self):
        head = IdentHead(2, mid_dim=3, out_dim=2).double()
        rng = np.random.default_rng(4)
        P = {}
        with torch.no_grad():
            for name, p in head.named_parameters():
                v = rng.normal(size=tuple(p.shape))
                p.copy_(torch.from_numpy(v))
                P[name] = v
        model = IdentModel.__new__(IdentModel)
        torch.nn.Module.__init__(model)
        model.head = head
        feats = rng.normal(size=(1, 6))
        got = model.fuse(torch.from_numpy(feats))[0].detach().numpy()

        def gelu(x):
            return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))

        h = [sum(P["fusion.0.weight"][i][j] * feats[0][j] for j in range(6)) + P["fusion.0.bias"][i] for i in range(3)]
        h = [gelu(v) for v in h]
        f = [sum(P["fusion.2.weight"][i][j] * h[j] for j in range(3)) + P["fusion.2.bias"][i] for i in range(2)]
        e = [sum(P["proj.weight"][i][j] * f[j] for j in range(2)) + P["proj.bias"][i] for i in range(2)]
        norm = math.sqrt(e[0] ** 2 + e[1] ** 2)
        np.testing.assert_allclose(got, [e[0] / norm, e[1] / norm], rtol=0, atol=1e-12)

    def test_temperature_init(self):
        head = IdentHead(8)
        assert head.logit_scale.item() == pytest.approx(math.log(14.3))
        assert LOGIT_SCALE_INIT == pytest.approx(2.660, abs=1e-3)

    def test_config_round_trip(self):
        c = IdentConfig(mid_dim=32, embed_out=16)
        assert IdentConfig.from_dict(c.to_dict()) == c


class TestContrastiveLoss:
    def test_orthonormal_large_scale_goes_to_zero(self):
        e = torch.eye(4, dtype=torch.float64)
        assert contrastive_loss(e, e, math.log(100.0)).item() < 1e-40

    @pytest.mark.parametrize("n", range(2, 9))
    def test_identical_rows_give_ln_n(self, n):
        v = torch.tensor(unit_rows(np.random.default_rng(n), 1, 5)).expand(n, -1)
        assert abs(contrastive_loss(v, v, 1.3).item() - math.log(n)) <= 1e-9

    def test_three_rows_scale_ten(self):
        rng = np.random.default_rng(0)
        q, r = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        got = contrastive_loss(torch.tensor(q), torch.tensor(r), math.log(10.0)).item()
        assert abs(got - scalar_contrastive(q.tolist(), r.tolist(), 10.0)) <= 1e-10

    def test_hundred_random_batches_match_scalar_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(2, 9))
            t = float(rng.uniform(-1, math.log(100)))
            q, r = unit_rows(rng, n, d), unit_rows(rng, n, d)
            got = contrastive_loss(torch.tensor(q), torch.tensor(r), t).item()
            assert abs(got - scalar_contrastive(q.tolist(), r.tolist(), math.exp(t))) <= 1e-10

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 8), d=st.integers(1, 6), seed=st.integers(0, 10**6), t=st.floats(-2, 5))
    def test_symmetric_exactly(self, n, d, seed, t):
        rng = np.random.default_rng(seed)
        q, r = torch.tensor(unit_rows(rng, n, d)), torch.tensor(unit_rows(rng, n, d))
        assert contrastive_loss(q, r, t).item() == contrastive_loss(r, q, t).item()

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 8), seed=st.integers(0, 10**6))
    def test_permutation_equivariance(self, n, seed):
        rng = np.random.default_rng(seed)
        q, r = torch.tensor(unit_rows(rng, n, 5)), torch.tensor(unit_rows(rng, n, 5))
        perm = torch.from_numpy(rng.permutation(n))
        a = contrastive_loss(q, r, 1.0).item()
        b = contrastive_loss(q[perm], r[perm], 1.0).item()
        assert a == pytest.approx(b, rel=1e-13, abs=1e-13)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.ones(1, 3), torch.ones(1, 3), 0.0)
        with pytest.raises(DimensionMismatchError):
            contrastive_loss(torch.ones(2, 3), torch.ones(3, 3), 0.0)

    def test_temperature_receives_gradient(self, fd_check):
        rng = np.random.default_rng(2)
        q, r = torch.tensor(unit_rows(rng, 5, 4)), torch.tensor(unit_rows(rng, 5, 4))
        t = torch.tensor(LOGIT_SCALE_INIT, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(contrastive_loss(q, r, t), [t])
        assert abs(g.item()) > 1e-6
        assert fd_check(lambda: contrastive_loss(q, r, t), [t]) < 1e-6

    def test_temperature_clamped(self):
        rng = np.random.default_rng(3)
        q, r = torch.tensor(unit_rows(rng, 4, 4)), torch.tensor(unit_rows(rng, 4, 4))
        assert contrastive_loss(q, r, 9.0).item() == contrastive_loss(q, r, math.log(100.0)).item()


def test_full_query_path_gradient(fd_check):
    torch.manual_seed(0)
    model = IdentModel(TINY, IdentConfig(mid_dim=6, embed_out=4)).double()
    g = torch.Generator().manual_seed(1)
    refs = torch.rand(3, 32, 32, 3, dtype=torch.float64, generator=g)
    queries = torch.rand(3, 3, 32, 32, 3, dtype=torch.float64, generator=g)

    def loss():
        r, q = model(refs, queries)
        return contrastive_loss(q, r, model.head.logit_scale)

    assert fd_check(loss, list(model.parameters()), max_entries=15) < 1e-4


def _brute_rank(vectors, ids, query):
    best = {}
    for v, i in zip(vectors, ids):
        s = float(np.dot(v.astype(np.float64), query.astype(np.float64)))
        best[int(i)] = max(best.get(int(i), -np.inf), s)
    return sorted(best, key=lambda i: (-best[i], i))


class TestRetrieve:
    def test_self_similarity_ranks_first(self):
        rng = np.random.default_rng(0)
        v = unit_rows(rng, 10, 8).astype(np.float32)
        g = GalleryIndex(v, np.arange(10))
        for i in range(10):
            assert retrieve(v[i], g, 1)[0][0] == i

    def test_k_larger_than_gallery(self):
        v = unit_rows(np.random.default_rng(1), 4, 3).astype(np.float32)
        assert len(retrieve(v[0], GalleryIndex(v, np.arange(4)), 50)) == 4

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        v = unit_rows(rng, 100, 16).astype(np.float32)
        ids = rng.integers(0, 60, size=100)
        g = GalleryIndex(v, ids)
        for q in unit_rows(rng, 20, 16):
            assert [i for i, _ in retrieve(q, g)] == _brute_rank(v, ids, q)

    def test_ties_by_ascending_id(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        g = GalleryIndex(v, np.array([7, 3, 5]))
        assert [i for i, _ in retrieve(np.array([1.0, 0.0]), g)] == [3, 7, 5]

    def test_container_filter(self):
        v = unit_rows(np.random.default_rng(3), 6, 4).astype(np.float32)
        g = GalleryIndex(v, np.arange(6))
        ranked = retrieve(v[0], g, allowed=[1, 2, 4])
        assert sorted(i for i, _ in ranked) == [1, 2, 4]
        with pytest.raises(EmptyGalleryError):
            retrieve(v[0], g, allowed=[99])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0))
    def test_rescaling_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        v = unit_rows(rng, 12, 5)
        scaled = v * scale
        renorm = (scaled / np.linalg.norm(scaled, axis=1, keepdims=True)).astype(np.float32)
        q = unit_rows(rng, 1, 5)[0]
        a = retrieve(q, GalleryIndex(v.astype(np.float32), np.arange(12)))
        b = retrieve(q, GalleryIndex(renorm, np.arange(12)))
        assert [i for i, _ in a][0] == [i for i, _ in b][0]

    def test_large_index_memory_and_exactness(self):
        n, d = 190_000, 64
        rng = np.random.default_rng(4)
        v = rng.standard_normal((n, d), dtype=np.float32)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        g = GalleryIndex(v, np.arange(n))
        # 4-byte floats plus an 8-byte id per entry and a fixed header
        assert g.nbytes() == 20 + n * (4 * d + 8)
        assert g.nbytes() < 50 * 2**20
        sub = rng.choice(n, size=1000, replace=False)
        queries = unit_rows(rng, 1000, d)
        oracle = np.argmax(v[sub].astype(np.float64) @ queries.T, axis=0)
        small = GalleryIndex(v[sub], sub)
        for q, o in zip(queries, oracle):
            assert retrieve(q, small, 1)[0][0] == sub[o]
        for q in queries[:5]:
            full_best = int(np.argmax(v.astype(np.float64) @ q))
            assert retrieve(q, g, 1)[0][0] == full_best


class TestGallery:
    @pytest.fixture(scope="class")
    @staticmethod
    def model():
        torch.manual_seed(0)
        return IdentModel(TINY)

    def _images(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [(rng.random((32, 32, 3)) * 255).astype(np.uint8) for _ in range(n)]

    def test_single_reference(self, model):
        g = build_gallery(model, self._images(1), [5])
        assert len(g) == 1 and g.ids.tolist() == [5]

    def test_rebuild_is_bitwise_identical(self, model):
        imgs = self._images(5)
        a = build_gallery(model, imgs, range(5))
        b = build_gallery(model, imgs, range(5))
        assert a.vectors.tobytes() == b.vectors.tobytes()

    def test_duplicate_rejected(self, model):
        imgs = self._images(2)
        with pytest.raises(DataError):
            build_gallery(model, [imgs[0], imgs[1], imgs[0]], [1, 2, 1])
        # the same image under two ids is allowed
        assert len(build_gallery(model, [imgs[0], imgs[0]], [1, 2])) == 2

    def test_empty_rejected(self, model):
        with pytest.raises(EmptyGalleryError):
            build_gallery(model, [], [])

    def test_save_load_round_trip(self, model, tmp_path):
        g = build_gallery(model, self._images(6), [3, 1, 4, 1, 5, 9])
        g.save(tmp_path / "g.bin")
        h = GalleryIndex.load(tmp_path / "g.bin")
        assert h.vectors.tobytes() == g.vectors.tobytes() and h.ids.tolist() == g.ids.tolist()
        assert (tmp_path / "g.bin").stat().st_size == g.nbytes()

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"TVGX" + b"\0" * 30)
        with pytest.raises(DataError):
            GalleryIndex.load(tmp_path / "bad.bin")
        g = GalleryIndex(np.eye(3, dtype=np.float32), np.arange(3))
        g.save(tmp_path / "g.bin")
        raw = (tmp_path / "g.bin").read_bytes()
        (tmp_path / "trunc.bin").write_bytes(raw[:-3])
        with pytest.raises(DataError):
            GalleryIndex.load(tmp_path / "trunc.bin")

    def test_non_unit_vectors_rejected(self):
        with pytest.raises(DegenerateEmbeddingError):
            GalleryIndex(np.ones((2, 3), dtype=np.float32), np.arange(2))


def test_rankings_round_trip(tmp_path):
    recs = [("p1", [(3, 0.9), (1, 0.2)]), ("p2", [(7, 0.5)])]
    write_rankings(tmp_path / "r.jsonl", recs)
    back = read_rankings(tmp_path / "r.jsonl")
    assert back == [
        {"pick_id": "p1", "ranked_ids": [3, 1], "scores": [0.9, 0.2]},
        {"pick_id": "p2", "ranked_ids": [7], "scores": [0.5]},
    ]
