import time

import pytest
import torch

from fusegnet.attention import PScSE
from fusegnet.errors import ConfigError, ShapeError
from fusegnet.network import (
    STRIDES, DecoderBlock, DecoderStageConfig, FUSegNet, NetworkConfig, count_parameters, decoder_stage_configs,
)

TOY = NetworkConfig(encoder_name="tiny", input_size=64, pretrained=False)
# native stage widths of the torchvision backbones, recorded once from the models themselves
STAGE_MANIFEST = {
    "efficientnet-b0": [16, 24, 40, 112, 320],
    "efficientnet-b7": [32, 48, 80, 224, 640],
}
PARAMS_REFERENCE_M = 64.90


@pytest.fixture(scope="module")
def toy_model():
    torch.manual_seed(0)
    return FUSegNet(TOY)


@pytest.mark.parametrize("size", [64, 224, 512])
def test_output_shape_and_range(toy_model, size):
    toy_model.eval()
    with torch.no_grad():
        y = toy_model(torch.randn(1, 3, size, size))
    assert y.shape == (1, 1, size, size)
    assert y.min() >= 0 and y.max() <= 1


def test_toy_forward_is_fast(toy_model):
    toy_model.eval()
    t = time.perf_counter()
    with torch.no_grad():
        toy_model(torch.randn(2, 3, 64, 64))
    assert time.perf_counter() - t < 60


@pytest.mark.parametrize("name", sorted(STAGE_MANIFEST))
def test_stage_manifest(name):
    model = FUSegNet(NetworkConfig(encoder_name=name, pretrained=False, input_size=64)).eval()
    with torch.no_grad():
        stages = model.encode(torch.randn(1, 3, 64, 64))
    assert [s.shape[1] for s in stages] == STAGE_MANIFEST[name] == model.encoder.out_channels
    assert [s.shape[-1] for s in stages] == [64 // k for k in STRIDES]


def test_deepest_stage_stride_32(toy_model):
    toy_model.eval()
    with torch.no_grad():
        for size, deep in ((512, 16), (224, 7)):
            assert toy_model.encode(torch.randn(1, 3, size, size))[-1].shape[-2:] == (deep, deep)


def test_decoder_stage_contracts():
    block = DecoderBlock(640, 224, DecoderStageConfig(256))
    out = block(torch.randn(1, 640, 16, 16), torch.randn(1, 224, 32, 32))
    assert out.shape == (1, 256, 32, 32)
    final = DecoderBlock(32, 0, DecoderStageConfig(16, use_skip=False, shorted=True))
    assert isinstance(final.attention, PScSE) and final.attention.shorted
    assert final(torch.randn(1, 32, 16, 16)).shape == (1, 16, 32, 32)
    with pytest.raises(ShapeError):
        block(torch.randn(1, 640, 16, 16), torch.randn(1, 224, 30, 30))
    with pytest.raises(ShapeError):
        block(torch.randn(1, 640, 16, 16))


def test_stage_layout_defaults():
    stages = decoder_stage_configs(NetworkConfig(pretrained=False), STAGE_MANIFEST["efficientnet-b7"])
    assert [s.use_skip for s in stages] == [True] * 4 + [False]
    assert [s.shorted for s in stages] == [False] * 4 + [True]
    assert [s.out_channels for s in stages] == [256, 128, 64, 32, 16]


def test_zero_weights_annihilate():
    block = DecoderBlock(8, 4, DecoderStageConfig(6))
    conv, bn = block.conv[0], block.conv[1]
    torch.nn.init.zeros_(conv.weight)
    torch.nn.init.zeros_(bn.weight)
    torch.nn.init.zeros_(bn.bias)
    for mode in (block.train, block.eval):
        mode()
        out = block(torch.randn(2, 8, 4, 4), torch.randn(2, 4, 8, 8))
        assert torch.count_nonzero(out) == 0


def test_every_skip_is_wired(toy_model):
    toy_model.eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        stages = toy_model.encode(x)
        base = toy_model.decode(stages)
        for i in range(len(stages)):
            zeroed = [torch.zeros_like(s) if j == i else s for j, s in enumerate(stages)]
            assert not torch.equal(toy_model.decode(zeroed), base), f"stage {i} has no effect"


def test_gradient_reaches_every_parameter():
    torch.manual_seed(1)
    model = FUSegNet(TOY).train()
    x = torch.randn(2, 3, 64, 64)
    target = (torch.rand(2, 1, 64, 64) > 0.5).float()
    torch.nn.functional.binary_cross_entropy(model(x), target).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


def test_eval_determinism(toy_model):
    toy_model.eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(toy_model(x), toy_model(x))


def test_config_errors():
    with pytest.raises(ConfigError):
        NetworkConfig(encoder_name="resnet-9000")
    with pytest.raises(ConfigError):
        NetworkConfig(decoder_channels=(16, 32, 64, 128, 256))
    with pytest.raises(ConfigError):
        NetworkConfig(input_size=500)
    with pytest.raises(ConfigError):
        NetworkConfig(attention="softmax")
    model = FUSegNet(TOY)
    with pytest.raises(ShapeError, match="divisible by 32"):
        model(torch.randn(1, 3, 60, 64))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 1, 64, 64))


@pytest.fixture(scope="module")
def b7():
    torch.manual_seed(0)
    return FUSegNet(NetworkConfig(pretrained=False))


def test_b7_parameter_budget(b7):
    n = count_parameters(b7)
    assert abs(n / 1e6 - PARAMS_REFERENCE_M) <= 0.03 * PARAMS_REFERENCE_M


@pytest.mark.slow
def test_b7_forward_512(b7):
    b7.eval()
    with torch.no_grad():
        y = b7(torch.randn(1, 3, 512, 512))
        stages = b7.encode(torch.randn(1, 3, 512, 512))
    assert y.shape == (1, 1, 512, 512) and 0 <= y.min() and y.max() <= 1
    assert stages[-1].shape[-2:] == (16, 16)
