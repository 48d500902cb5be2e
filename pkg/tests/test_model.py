import numpy as np
import pytest
import torch

from msfanet.errors import ContractError, LoadError
from msfanet.model import (ModelConfig, MsfaNet, init_parameters,
                           parameter_count, save_backbone)

TINY = dict(channel_multiplier=0.125, stem_window=2)


def tiny_cfg(**kw):
    params = dict(TINY)
    params.update(kw)
    return ModelConfig(**params)


class TestBlocks:
    def test_block1_shape(self):
        m = MsfaNet(ModelConfig(channel_multiplier=0.25))
        out = m.blocks[0](torch.randn(1, 3, 224, 224))
        assert out.shape == (1, 16, 112, 112)  # 64 * 0.25 channels, pooled

    def test_block5_no_pool(self):
        m = MsfaNet(ModelConfig(channel_multiplier=0.25))
        out = m.blocks[4](torch.randn(1, 128, 14, 14))
        assert out.shape == (1, 128, 14, 14)

    def test_zero_input_zero_biases_gives_zero(self):
        m = MsfaNet(tiny_cfg())
        with torch.no_grad():
            for p in m.blocks[0].parameters():
                if p.ndim == 1:
                    p.zero_()
        out = m.blocks[0](torch.zeros(1, 3, 32, 32)).detach()
        assert float(out.abs().max()) == 0.0

    def test_conv_stack_depths(self):
        m = MsfaNet(ModelConfig())
        assert [len(b.convs) for b in m.blocks] == [2, 2, 3, 3, 3]


class TestShortAgg:
    def test_block2_fusion_shape(self):
        m = MsfaNet(ModelConfig())
        x = torch.randn(1, 64, 112, 112)
        fused = m.blocks[1](x) + m.shortcuts["2"](x)
        assert fused.shape == (1, 128, 56, 56)

    def test_zero_shortcut_is_identity_on_block_output(self):
        torch.manual_seed(0)
        m = MsfaNet(tiny_cfg())
        with torch.no_grad():
            m.shortcuts["2"].weight.zero_()
        x = torch.randn(1, 8, 16, 16)
        assert torch.equal(m.blocks[1](x) + m.shortcuts["2"](x), m.blocks[1](x))

    def test_zero_f_path_leaves_strided_projection(self):
        torch.manual_seed(1)
        m = MsfaNet(tiny_cfg())
        with torch.no_grad():
            for p in m.blocks[1].parameters():
                p.zero_()
        x = torch.rand(1, 8, 16, 16)
        fused = m.blocks[1](x) + m.shortcuts["2"](x)
        assert torch.equal(fused, m.shortcuts["2"](x))

    def test_block5_shortcut_keeps_stride(self):
        m = MsfaNet(ModelConfig())
        assert m.shortcuts["5"].stride == (1, 1)
        assert m.shortcuts["2"].stride == (2, 2)
        assert all(m.shortcuts[k].bias is None for k in m.shortcuts)


class TestSkipAgg:
    def test_adapter_shapes(self):
        m = MsfaNet(ModelConfig())
        stem = torch.randn(1, 128, 112, 112)
        assert m.skip_adapters["3"](stem).shape == (1, 256, 28, 28)
        assert m.skip_adapters["4"](stem).shape == (1, 512, 14, 14)
        assert m.skip_adapters["5"](stem).shape == (1, 512, 14, 14)

    def test_zero_stem_features_adapt_to_zero(self):
        m = MsfaNet(ModelConfig(channel_multiplier=0.125))
        out = m.skip_adapters["5"](torch.zeros(1, 16, 112, 112)).detach()
        assert float(out.abs().max()) == 0.0  # bias-free adapters

    def test_zero_weight_adapters_match_sh_only_model_bit_exact(self):
        torch.manual_seed(2)
        cfg_sk = tiny_cfg(enable_shortagg=True, enable_skipagg=True)
        cfg_sh = tiny_cfg(enable_shortagg=True, enable_skipagg=False)
        m_sk = init_parameters(cfg_sk, seed=3)
        m_sh = MsfaNet(cfg_sh)
        # share every common parameter, zero the adapters
        sk_state = m_sk.state_dict()
        m_sh.load_state_dict({k: v for k, v in sk_state.items()
                              if k in m_sh.state_dict()})
        with torch.no_grad():
            for key in m_sk.skip_adapters:
                m_sk.skip_adapters[key].weight.zero_()
        for shape in [(1, 3, 32, 32), (2, 3, 48, 64)]:
            x = torch.randn(*shape)
            assert torch.equal(m_sk(x), m_sh(x))


class TestModelForward:
    def test_224_gives_28(self):
        m = MsfaNet(tiny_cfg(stem_window=7))
        assert m(torch.randn(1, 3, 224, 224)).shape == (1, 1, 28, 28)

    def test_non_square_padded_input(self):
        m = MsfaNet(tiny_cfg(stem_window=7))
        assert m(torch.randn(1, 3, 320, 480)).shape == (1, 1, 40, 60)

    def test_ceil_shape_contract(self):
        m = MsfaNet(tiny_cfg())
        for h, w in [(33, 47), (100, 100), (16, 90)]:
            out = m(torch.randn(1, 3, h, w))
            assert out.shape == (1, 1, -(-h // 8), -(-w // 8))

    def test_output_non_negative(self):
        m = init_parameters(tiny_cfg(), seed=4)
        out = m(torch.randn(2, 3, 64, 64)).detach()
        assert float(out.min()) >= 0.0

    def test_bad_input_shape_rejected(self):
        m = MsfaNet(tiny_cfg())
        with pytest.raises(ContractError):
            m(torch.randn(1, 1, 32, 32))

    def test_ablation_parameter_counts_strictly_increase(self):
        base = parameter_count(MsfaNet(tiny_cfg(enable_shortagg=False,
                                                enable_skipagg=False)))
        sh = parameter_count(MsfaNet(tiny_cfg(enable_shortagg=True,
                                              enable_skipagg=False)))
        sh_sk = parameter_count(MsfaNet(tiny_cfg(enable_shortagg=True,
                                                 enable_skipagg=True)))
        assert base < sh < sh_sk

    def test_baseline_has_no_aggregation_modules(self):
        m = MsfaNet(tiny_cfg(enable_shortagg=False, enable_skipagg=False))
        assert m.shortcuts is None and m.stem is None and m.skip_adapters is None


class TestInit:
    def test_gaussian_std_on_large_layer(self):
        m = init_parameters(ModelConfig(), seed=5)
        w = dict(m.named_parameters())["blocks.4.convs.0.weight"].detach()
        assert w.numel() >= 1e5
        std = float(w.std())
        assert abs(std - 0.01) <= 0.05 * 0.01

    def test_all_biases_zero(self):
        m = init_parameters(tiny_cfg(), seed=6)
        for name, p in m.named_parameters():
            if name.endswith(".bias"):
                assert float(p.detach().abs().max()) == 0.0, name

    def test_layernorm_identity_init(self):
        m = init_parameters(tiny_cfg(), seed=6)
        assert float(m.stem.block1.norm1.weight.detach().min()) == 1.0

    def test_same_seed_bit_identical(self):
        a = init_parameters(tiny_cfg(), seed=7)
        b = init_parameters(tiny_cfg(), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = init_parameters(tiny_cfg(), seed=7)
        b = init_parameters(tiny_cfg(), seed=8)
        assert not torch.equal(dict(a.named_parameters())["blocks.0.convs.0.weight"],
                               dict(b.named_parameters())["blocks.0.convs.0.weight"])

    def test_init_tags_cover_all_parameters(self):
        m = init_parameters(tiny_cfg(), seed=9)
        assert set(m.init_tags) == {n for n, _ in m.named_parameters()}
        assert m.init_tags["blocks.0.convs.0.weight"] == "gaussian0.01"


class TestPretrainedBackbone:
    def test_round_trip_marks_pretrained(self, tmp_path):
        donor = init_parameters(tiny_cfg(), seed=10)
        path = tmp_path / "backbone.npz"
        save_backbone(donor, path)
        fresh = init_parameters(tiny_cfg(), pretrained=path, seed=11)
        assert torch.equal(dict(fresh.named_parameters())["blocks.2.convs.1.weight"],
                           dict(donor.named_parameters())["blocks.2.convs.1.weight"])
        assert fresh.init_tags["blocks.2.convs.1.weight"] == "pretrained"
        # non-backbone weights still come from the fresh seed
        assert fresh.init_tags["head.convs.0.weight"] == "gaussian0.01"

    def test_shape_mismatch_lists_layers(self, tmp_path):
        donor = init_parameters(tiny_cfg(), seed=12)
        path = tmp_path / "backbone.npz"
        save_backbone(donor, path)
        with pytest.raises(LoadError, match="blocks.0.convs.0.weight"):
            init_parameters(ModelConfig(channel_multiplier=0.25, stem_window=2),
                            pretrained=path, seed=13)


class TestConfigValidation:
    def test_bad_skip_targets(self):
        with pytest.raises(ContractError):
            ModelConfig(skip_targets=(2, 3))

    def test_heads_divisibility_checked(self):
        with pytest.raises(ContractError):
            ModelConfig(stem_channels=(97, 128))

    def test_roundtrip_dict(self):
        cfg = ModelConfig(channel_multiplier=0.5, stem_window=4, stem_heads=3,
                          enable_skipagg=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_pad_multiple(self):
        assert ModelConfig().pad_multiple == 112          # lcm(16, 14)
        assert ModelConfig(stem_window=2).pad_multiple == 16


class TestContractErrors:
    def test_block_channel_mismatch(self):
        m = MsfaNet(tiny_cfg())
        with pytest.raises(ContractError, match="channels"):
            m.blocks[1](torch.randn(1, 5, 16, 16))
