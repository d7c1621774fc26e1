import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from totevision.backbone import (
    BASE_GEOMETRY,
    Backbone,
    BackboneConfig,
    MultiWayBlock,
    count_parameters,
    expert_parameter_count,
    multiway_block,
    prune_experts,
    prune_state_dict,
)
from totevision.errors import ConfigError, DimensionMismatchError, UnknownModalityError


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * w + b


class TestConfig:
    def test_defaults_match_toy_geometry(self):
        c = BackboneConfig()
        assert (c.image_size, c.patch_size, c.embed_dim, c.depth, c.num_heads, c.ffn_hidden) == (64, 16, 96, 4, 4, 384)
        assert c.grid_size == 4

    @pytest.mark.parametrize(
        "kw",
        [dict(image_size=60), dict(embed_dim=10, num_heads=4), dict(expert_set=()), dict(expert_set=("audio",))],
    )
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigError):
            BackboneConfig(**kw)

    def test_round_trip(self):
        c = BackboneConfig(expert_set=("language", "vision"), depth=2)
        assert BackboneConfig.from_dict(c.to_dict()) == c
        assert c.expert_set == ("vision", "language")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig.from_dict({"bogus": 1})


class TestPatchify:
    def test_token_count(self):
        bb = Backbone(BackboneConfig())
        tokens = bb.patchify(torch.rand(2, 64, 64, 3))
        assert tokens.shape == (2, 16 + 1, 96)

    def test_zero_image_gives_bias_plus_position(self):
        bb = Backbone(BackboneConfig(image_size=32, embed_dim=8, num_heads=2, ffn_hidden=16, depth=1))
        tokens = bb.patchify(torch.zeros(1, 32, 32, 3))
        expected = bb.patch_embed.bias + bb.pos_embed[0, 1:]
        torch.testing.assert_close(tokens[0, 1:], expected, rtol=0, atol=0)

    def test_white_patch_difference_is_its_projection(self):
        bb = Backbone(BackboneConfig(image_size=48, embed_dim=8, num_heads=2, ffn_hidden=16, depth=1)).double()
        img = torch.zeros(1, 48, 48, 3, dtype=torch.float64)
        img[0, :16, :16] = 1.0
        tokens = bb.patchify(img)[0, 1:]
        w = bb.patch_embed.weight.detach().numpy()
        pos = bb.pos_embed.detach().numpy()[0, 1:]
        # oracle: explicit matrix product with the all-ones patch
        diff = w @ np.ones(16 * 16 * 3) + pos[0] - pos[1]
        np.testing.assert_allclose((tokens[0] - tokens[1]).detach().numpy(), diff, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 64, 48, 3), (1, 32, 32, 3), (1, 64, 64, 1), (64, 64, 3)])
    def test_dimension_mismatch(self, shape):
        bb = Backbone(BackboneConfig())
        with pytest.raises(DimensionMismatchError):
            bb.patchify(torch.zeros(shape))


class TestMultiWayBlock:
    def test_unknown_modality(self):
        block = MultiWayBlock(8, 2, 16, ("vision",))
        x = torch.randn(1, 3, 8)
        assert multiway_block(x, block, "vision").shape == x.shape
        with pytest.raises(UnknownModalityError):
            multiway_block(x, block, "language")

    def test_zero_weights_are_identity(self):
        block = MultiWayBlock(8, 2, 16, ("vision", "language"))
        with torch.no_grad():
            for name, p in block.named_parameters():
                p.fill_(1.0 if (".norm" in name and name.endswith("weight")) else 0.0)
        x = torch.randn(2, 5, 8)
        for m in ("vision", "language"):
            assert torch.equal(block(x, m), x)

    def test_hand_computed_single_token(self):
        block = MultiWayBlock(2, 1, 3, ("vision",)).double()
        rng = np.random.default_rng(3)
        with torch.no_grad():
            for p in block.parameters():
                p.copy_(torch.from_numpy(rng.normal(size=tuple(p.shape))))
        x = np.array([0.7, -1.3])
        got = block(torch.tensor(x)[None, None], "vision")[0, 0].detach().numpy()

        P = {k: v.detach().numpy() for k, v in block.state_dict().items()}
        e = "expert.vision."
        h = _layer_norm(x, P[e + "norm1.weight"], P[e + "norm1.bias"])
        # a single token attends only to itself: softmax weight is exactly 1
        v = P["attn.v.weight"] @ h + P["attn.v.bias"]
        a = P["attn.o.weight"] @ v + P["attn.o.bias"]
        x1 = x + a
        h2 = _layer_norm(x1, P[e + "norm2.weight"], P[e + "norm2.bias"])
        f1 = P[e + "fc1.weight"] @ h2 + P[e + "fc1.bias"]
        f = P[e + "fc2.weight"] @ np.array([_gelu(z) for z in f1]) + P[e + "fc2.bias"]
        np.testing.assert_allclose(got, x1 + f, rtol=1e-12, atol=1e-12)

    def test_attention_is_shared_single_copy(self):
        for experts in [("vision",), ("vision", "language")]:
            block = MultiWayBlock(8, 2, 16, experts)
            keys = [k for k in block.state_dict() if k.startswith("attn.")]
            assert sorted(keys) == sorted(f"attn.{p}.{t}" for p in "qkvo" for t in ("weight", "bias"))
            assert not any("attn" in k for k in block.state_dict() if k.startswith("expert."))


class TestEncode:
    def test_grid_and_scale(self):
        cfg = BackboneConfig(depth=2)
        cls, fm = Backbone(cfg)(torch.rand(3, 64, 64, 3))
        assert cls.shape == (3, 96)
        assert fm.data.shape == (3, 4, 4, 96)
        assert fm.scale == 1 / 16

    def test_duplicates_and_permutation(self):
        bb = Backbone(BackboneConfig(depth=2)).double()
        x = torch.rand(4, 64, 64, 3, dtype=torch.float64)
        x[3] = x[1]
        cls, fm = bb(x)
        assert torch.equal(cls[1], cls[3]) and torch.equal(fm.data[1], fm.data[3])
        perm = torch.tensor([2, 0, 3, 1])
        cls_p, fm_p = bb(x[perm])
        torch.testing.assert_close(cls_p, cls[perm], rtol=0, atol=1e-13)
        torch.testing.assert_close(fm_p.data, fm.data[perm], rtol=0, atol=1e-13)

    def test_seeded_determinism(self):
        cfg = BackboneConfig(depth=2, seed=7)
        x = torch.rand(2, 64, 64, 3)
        a = Backbone(cfg)(x)
        b = Backbone(cfg)(x)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1].data, b[1].data)
        c = Backbone(BackboneConfig(depth=2, seed=8))(x)
        assert not torch.equal(a[0], c[0])

    def test_class_token_is_first_row(self):
        bb = Backbone(BackboneConfig(depth=1))
        x = torch.rand(1, 64, 64, 3)
        tokens = bb.patchify(x)
        for b in bb.blocks:
            tokens = b(tokens)
        cls, fm = bb(x)
        assert torch.equal(cls, tokens[:, 0])
        assert torch.equal(fm.data.reshape(1, 16, -1), tokens[:, 1:])

    @settings(max_examples=15, deadline=None)
    @given(
        patch=st.sampled_from([4, 8, 16]),
        cells=st.integers(1, 5),
        heads=st.sampled_from([1, 2, 4]),
        width=st.integers(1, 4),
        depth=st.integers(0, 2),
    )
    def test_shape_law(self, patch, cells, heads, width, depth):
        cfg = BackboneConfig(
            image_size=patch * cells, patch_size=patch, embed_dim=heads * 4 * width, num_heads=heads,
            ffn_hidden=8, depth=depth,
        )
        cls, fm = Backbone(cfg)(torch.rand(2, cfg.image_size, cfg.image_size, 3))
        assert fm.data.shape == (2, cells, cells, cfg.embed_dim)
        assert cls.shape == (2, cfg.embed_dim)
        assert torch.isfinite(fm.data).all()

    def test_gradient_matches_finite_differences(self, fd_check):
        cfg = BackboneConfig(image_size=16, patch_size=8, embed_dim=8, num_heads=2, ffn_hidden=8, depth=2)
        bb = Backbone(cfg).double()
        x = torch.rand(2, 16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        target = torch.randn(2, 2, 2, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

        def loss():
            cls, fm = bb(x)
            return ((fm.data - target) ** 2).mean() + cls.pow(3).mean()

        params = [p for p in bb.parameters()]
        assert fd_check(loss, params, max_entries=12) < 1e-4


class TestPruning:
    def test_pruned_difference_is_enumerated_expert_total(self):
        full = BackboneConfig(embed_dim=64, ffn_hidden=256, depth=4, num_heads=4, expert_set=("vision", "language"))
        pruned = prune_experts(full)
        per_expert = (64 * 256 + 256) + (256 * 64 + 64) + 2 * (64 + 64)
        assert count_parameters(full) - count_parameters(pruned) == 4 * per_expert
        assert expert_parameter_count(full) == per_expert

    def test_attention_parameters_unchanged(self):
        full = Backbone(BackboneConfig(depth=2, expert_set=("vision", "language")))
        small = full.pruned()
        for i in range(2):
            a = getattr(full, f"block{i}").attn.state_dict()
            b = getattr(small, f"block{i}").attn.state_dict()
            assert all(torch.equal(a[k], b[k]) for k in a)
        x = torch.rand(1, 64, 64, 3)
        assert torch.equal(full(x)[0], small(x)[0])

    def test_prune_is_key_filtering(self):
        full = Backbone(BackboneConfig(depth=2, expert_set=("vision", "language")))
        keys = set(prune_state_dict(full.state_dict()))
        assert keys == set(Backbone(BackboneConfig(depth=2)).state_dict())

    def test_vision_only_is_identity(self):
        c = BackboneConfig()
        assert prune_experts(c) == c

    def test_vision_required(self):
        with pytest.raises(ConfigError):
            prune_experts(BackboneConfig(expert_set=("language",)))


class TestCountParameters:
    def test_zero_depth(self):
        c = BackboneConfig(depth=0)
        d = c.embed_dim
        assert count_parameters(c) == (16 * 16 * 3 * d + d) + (16 + 1) * d + d

    def test_depth_linearity(self):
        base = count_parameters(BackboneConfig(depth=0))
        two = count_parameters(BackboneConfig(depth=2))
        four = count_parameters(BackboneConfig(depth=4))
        assert four - base == 2 * (two - base)

    def test_module_and_mapping_agree(self):
        bb = Backbone(BackboneConfig(depth=1))
        n = count_parameters(params=bb)
        assert n == count_parameters(params=dict(bb.state_dict())) == count_parameters(BackboneConfig(depth=1))

    def test_base_geometry_ratio(self):
        full = count_parameters(BASE_GEOMETRY)
        pruned = count_parameters(prune_experts(BASE_GEOMETRY))
        assert full == 192_449_280
        assert pruned == 85_797_120
        assert pruned / full < 0.45
