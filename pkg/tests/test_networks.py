"""Architecture audit: per-layer shapes, locality, init, parameter counts."""

import numpy as np
import pytest
import torch

from repiece.errors import DataError
from repiece.grid import Permutation, identity_permutation
from repiece.networks import (Classifier, Discriminator, Encoder, GeneratorTail,
                              build_models, combine_features, encode,
                              init_weights, param_count)
from repiece.warp import flow_from_permutation, warp


def audit(net, x):
    """Run ``net`` on ``x`` and return the output shape of every entry of
    ``net.layers`` in index order (each entry fires exactly once).
    """
    shapes = {}
    hooks = []
    for idx, module in enumerate(net.layers):
        def grab(mod, args, out, idx=idx):
            shapes[idx] = tuple(out.shape)
        hooks.append(module.register_forward_hook(grab))
    try:
        net(x)
    finally:
        for h in hooks:
            h.remove()
    return [shapes[i] for i in range(len(net.layers))]


class TestShapeAudit:
    # piece_px = 24 throughout; B = 2 images.

    def test_encoder_layers(self):
        # Per-piece: 24 -> 24 -> 12 -> 12 -> 6 -> 6; channels 64/128/256.
        enc = Encoder().eval()
        got = audit(enc, torch.randn(8, 3, 24, 24))
        assert got == [
            (8, 64, 24, 24), (8, 64, 24, 24),
            (8, 128, 12, 12), (8, 128, 12, 12), (8, 128, 12, 12),
            (8, 256, 6, 6), (8, 256, 6, 6), (8, 256, 6, 6),
        ]

    @pytest.mark.parametrize("n,conv_sizes", [
        (2, (6, 2, 1)),   # grid 12: conv/pool trace 12-6-3-2-1-1-1
        (3, (9, 2, 1)),   # grid 18: 18-9-4-2-1-1-1
        (4, (12, 3, 1)),  # grid 24: 24-12-6-3-1-1-1
    ])
    def test_classifier_layers(self, n, conv_sizes):
        clf = Classifier(10).eval()
        got = audit(clf, torch.randn(2, 256, 6 * n, 6 * n))
        s0, s1, s2 = conv_sizes
        assert got == [
            (2, 256, s0, s0), (2, 384, s1, s1), (2, 384, s2, s2),
            (2, 4096), (2, 10),
        ]

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_generator_layers(self, n):
        gen = GeneratorTail().eval()
        hf = 6 * n
        got = audit(gen, torch.randn(2, 256, hf, hf))
        res = [(2, 256, hf, hf)] * 8
        deconv = [
            (2, 128, 2 * hf, 2 * hf), (2, 128, 2 * hf, 2 * hf), (2, 128, 2 * hf, 2 * hf),
            (2, 64, 4 * hf, 4 * hf), (2, 64, 4 * hf, 4 * hf), (2, 64, 4 * hf, 4 * hf),
            (2, 3, 4 * hf, 4 * hf),
        ]
        assert got == res + deconv
        assert 4 * hf == 24 * n  # decoded image side matches the puzzle side

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_discriminator_layers(self, n):
        disc = Discriminator().eval()
        h = 24 * n
        got = audit(disc, torch.randn(2, 3, h, h))
        assert got == [
            (2, 32, h, h),
            (2, 64, h // 2, h // 2), (2, 64, h // 2, h // 2), (2, 64, h // 2, h // 2),
            (2, 128, h // 4, h // 4), (2, 128, h // 4, h // 4), (2, 128, h // 4, h // 4),
            (2, 256, h // 4, h // 4), (2, 256, h // 4, h // 4),
            (2, 1, h // 4, h // 4),
        ]

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_encode_shape(self, n):
        enc = Encoder().eval()
        feats = encode(enc, torch.randn(2 * n * n, 3, 24, 24), n)
        assert feats.shape == (2, 256, 6 * n, 6 * n)


class TestEncoderLocality:
    def test_zeroed_piece_changes_only_its_block(self):
        torch.manual_seed(0)
        enc = Encoder()
        init_weights(enc)
        enc.eval()
        pieces = torch.randn(9, 3, 24, 24)
        base = encode(enc, pieces, 3)
        for k in (0, 4, 8):
            poked = pieces.clone()
            poked[k] = 0
            delta = (encode(enc, poked, 3) - base).abs().sum(dim=1)[0]
            r, c = divmod(k, 3)
            assert delta[r * 6:(r + 1) * 6, c * 6:(c + 1) * 6].sum() > 0
            outside = delta.clone()
            outside[r * 6:(r + 1) * 6, c * 6:(c + 1) * 6] = 0
            assert not outside.any()  # nothing leaked past the block

    def test_piece_shuffle_equals_feature_warp(self):
        # Permute pieces then encode == encode then block-warp the grid.
        torch.manual_seed(1)
        enc = Encoder()
        init_weights(enc)
        enc.eval()
        pieces = torch.randn(4, 3, 24, 24)
        sigma = Permutation((2, 0, 3, 1))
        with torch.no_grad():
            shuffled = encode(enc, pieces[list(sigma.mapping)], 2)
            warped = warp(encode(enc, pieces, 2), flow_from_permutation(sigma, 12, 12))
        assert torch.equal(shuffled, warped)


class TestForwardBehaviour:
    def test_generator_output_bounded(self):
        gen = GeneratorTail().eval()
        with torch.no_grad():
            out = gen(torch.randn(1, 256, 12, 12) * 5)
        assert out.min() >= -1 and out.max() <= 1
        assert torch.isfinite(out).all()

    def test_classifier_deterministic_in_eval(self):
        torch.manual_seed(2)
        clf = Classifier(7)
        init_weights(clf)
        clf.eval()
        x = torch.randn(3, 256, 12, 12)
        with torch.no_grad():
            assert torch.equal(clf(x), clf(x))
            assert torch.isfinite(clf(x)).all()

    def test_discriminator_arbitrary_sizes(self):
        disc = Discriminator().eval()
        with torch.no_grad():
            assert disc(torch.randn(1, 3, 48, 48)).shape == (1, 1, 12, 12)
            assert disc(torch.randn(1, 3, 72, 72)).shape == (1, 1, 18, 18)
            assert torch.isfinite(disc(torch.randn(2, 3, 48, 48))).all()

    def test_discriminator_rejects_indivisible(self):
        disc = Discriminator()
        with pytest.raises(DataError):
            disc(torch.randn(1, 3, 50, 50))

    def test_classifier_rejects_oversized_grid(self):
        clf = Classifier(5).eval()
        with pytest.raises(DataError):
            clf(torch.randn(1, 256, 128, 128))

    def test_classifier_rejects_bad_class_count(self):
        with pytest.raises(DataError):
            Classifier(0)

    def test_combine_features_row_major(self):
        # Constant-valued per-piece features land in row-major blocks.
        feats = torch.stack([torch.full((5, 2, 2), float(k)) for k in range(4)])
        grid = combine_features(feats, 2)
        assert grid.shape == (1, 5, 4, 4)
        assert grid[0, 0, 0, 3] == 1 and grid[0, 0, 3, 0] == 2

    def test_combine_features_rejects_bad_batch(self):
        with pytest.raises(DataError):
            combine_features(torch.randn(5, 256, 6, 6), 2)
        with pytest.raises(DataError):
            encode(Encoder(), torch.randn(4, 1, 24, 24), 2)


class TestGradientConnectivity:
    def test_decoder_to_pieces(self):
        torch.manual_seed(3)
        enc, gen = Encoder(), GeneratorTail()
        for net in (enc, gen):
            init_weights(net)
            net.eval()
        pieces = torch.randn(4, 3, 24, 24, requires_grad=True)
        feats = encode(enc, pieces, 2)
        warped = warp(feats, flow_from_permutation(identity_permutation(4), 12, 12))
        gen(warped).mean().backward()
        assert pieces.grad is not None and pieces.grad.abs().sum() > 0

    def test_classifier_to_pieces(self):
        torch.manual_seed(4)
        enc, clf = Encoder(), Classifier(6)
        for net in (enc, clf):
            init_weights(net)
            net.eval()
        pieces = torch.randn(4, 3, 24, 24, requires_grad=True)
        clf(encode(enc, pieces, 2)).sum().backward()
        assert pieces.grad is not None and pieces.grad.abs().sum() > 0


class TestInitAndCounts:
    # Golden counts; verified against by-hand layer arithmetic (e.g. the
    # classifier at P=10: 590080 + 885120 + 1327488 + 1576960 + 40970).
    GOLDEN = {
        "encoder": 1_117_056,
        "classifier": 4_420_618,
        "generator": 10_012_611,
        "discriminator": 576_129,
    }

    def test_param_counts_frozen(self):
        models = build_models(10, 0)
        got = {name: param_count(net) for name, net in models.items()}
        assert got == self.GOLDEN
        assert param_count(build_models(100, 0)["classifier"]) == 4_789_348

    def test_build_models_deterministic(self):
        a = build_models(10, 42)
        b = build_models(10, 42)
        for name in a:
            for (ka, va), (kb, vb) in zip(a[name].state_dict().items(),
                                          b[name].state_dict().items()):
                assert ka == kb and torch.equal(va, vb)
        c = build_models(10, 43)
        assert not torch.equal(a["encoder"].layers[0].weight,
                               c["encoder"].layers[0].weight)

    def test_init_statistics(self):
        torch.manual_seed(5)
        enc = Encoder()
        init_weights(enc)
        w = enc.layers[6].weight  # 256*256*3*3 samples, plenty for a 3-sigma test
        assert abs(w.mean().item()) < 3 * 0.02 / np.sqrt(w.numel())
        assert abs(w.std().item() - 0.02) < 0.001
        assert not enc.layers[0].bias.any()
        bn = enc.layers[1]
        assert abs(bn.weight.mean().item() - 1.0) < 0.01 and not bn.bias.any()
