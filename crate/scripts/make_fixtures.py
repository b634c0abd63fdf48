# SPDX-License-Identifier: MIT OR Apache-2.0
"""Reference outputs computed with PyTorch for the Rust integration tests.

Writes into crates/core/tests/fixtures/:

- resnet_mini.safetensors: weights of a reduced-width ResNet18 (torchvision
  parameter names) with randomized batch-norm statistics.
- resnet_mini_expected.safetensors: logits, In/Pre/Post taps of every
  block, and input gradients of selected center neurons, computed in
  float64 from the float32 weights.
- resample_expected.safetensors: center-crop + bilinear resize outputs at
  sampled pixel positions.
- spectral_expected.safetensors: spectral image parameterization outputs
  and parameter gradients.

Run from the repository root: python3 scripts/make_fixtures.py
"""

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from safetensors.torch import save_file
from torchvision.models.resnet import BasicBlock

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"
MEAN = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64).view(1, 3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225], dtype=torch.float64).view(1, 3, 1, 1)


class MiniResNet(nn.Module):
    def __init__(self, widths=(8, 16, 32, 64), classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(3, widths[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        inplanes = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            down = None
            if stride != 1 or inplanes != w:
                down = nn.Sequential(nn.Conv2d(inplanes, w, 1, stride, bias=False), nn.BatchNorm2d(w))
            layer = nn.Sequential(BasicBlock(inplanes, w, stride, down), BasicBlock(w, w))
            setattr(self, f"layer{i + 1}", layer)
            inplanes = w
        self.fc = nn.Linear(inplanes, classes)

    def blocks(self):
        for s in range(1, 5):
            for b, block in enumerate(getattr(self, f"layer{s}")):
                yield f"{s}.{b}", block

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for s in range(1, 5):
            x = getattr(self, f"layer{s}")(x)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


def randomize_bn(model, gen):
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            n = m.num_features
            m.weight.data = torch.rand(n, generator=gen) + 0.5
            m.bias.data = torch.randn(n, generator=gen) * 0.1
            m.running_mean.data = torch.randn(n, generator=gen) * 0.1
            m.running_var.data = torch.rand(n, generator=gen) * 1.5 + 0.5


def capture_taps(model):
    taps = {}
    hooks = []
    for addr, block in model.blocks():
        def pre_hook(mod, inp, out, addr=addr):
            # BasicBlock adds the shortcut in place; keep a copy.
            taps[f"{addr}.pre"] = out.clone()
        def block_hook(mod, inp, out, addr=addr):
            if mod.downsample is None:
                taps[f"{addr}.in"] = inp[0].clone()
            taps[f"{addr}.post"] = out
        def down_hook(mod, inp, out, addr=addr):
            taps[f"{addr}.in"] = out.clone()
        hooks.append(block.bn2.register_forward_hook(pre_hook))
        hooks.append(block.register_forward_hook(block_hook))
        if block.downsample is not None:
            hooks.append(block.downsample.register_forward_hook(down_hook))
    return taps, hooks


def network_fixtures():
    gen = torch.Generator().manual_seed(7)
    torch.manual_seed(7)
    model = MiniResNet()
    randomize_bn(model, gen)
    model.eval()
    weights = {k: v.detach().float().contiguous() for k, v in model.state_dict().items() if "num_batches_tracked" not in k}
    save_file(weights, OUT / "resnet_mini.safetensors")

    model = model.double()
    model.load_state_dict({k: v.double() for k, v in weights.items()}, strict=False)
    images = torch.rand(2, 3, 64, 64, generator=gen, dtype=torch.float64)
    expected = {"images": images.clone()}
    taps, hooks = capture_taps(model)
    with torch.no_grad():
        expected["logits"] = model((images - MEAN) / STD)
    for k, v in taps.items():
        expected[f"tap.{k}"] = v.clone()
    for h in hooks:
        h.remove()

    # Input gradients of center neurons of the first image.
    for addr, tap, channel in [("2.1", "pre", 3), ("3.0", "in", 5), ("1.1", "post", 2), ("4.1", "post", 11)]:
        x = images[:1].clone().requires_grad_(True)
        taps, hooks = capture_taps(model)
        model((x - MEAN) / STD)
        m = taps[f"{addr}.{tap}"]
        cy, cx = m.shape[2] // 2, m.shape[3] // 2
        value = m[0, channel, cy, cx]
        value.backward()
        for h in hooks:
            h.remove()
        expected[f"grad.{addr}.{tap}.{channel}"] = x.grad.detach().clone()
        expected[f"value.{addr}.{tap}.{channel}"] = value.detach().reshape(1).clone()
    save_file({k: v.contiguous() for k, v in expected.items()}, OUT / "resnet_mini_expected.safetensors")


def sample_positions(shape, count, gen):
    n = int(np.prod(shape))
    return torch.randperm(n, generator=gen)[:count]


def resample_fixtures():
    gen = torch.Generator().manual_seed(11)
    out = {}
    # Scale-up transform: center crop 112 of a 224 image, bilinear back to 224.
    img = torch.randint(0, 256, (1, 3, 224, 224), generator=gen, dtype=torch.uint8)
    x = img.double() / 255.0
    y = F.interpolate(TF.center_crop(x, [112, 112]), size=(224, 224), mode="bilinear", align_corners=False, antialias=False)
    idx = sample_positions(y.shape, 4000, gen)
    out["scale_up.input"] = img
    out["scale_up.index"] = idx
    out["scale_up.value"] = y.flatten()[idx]
    # Evaluation transforms on a 256 x 300 image.
    img = torch.randint(0, 256, (1, 3, 256, 300), generator=gen, dtype=torch.uint8)
    x = img.double() / 255.0
    out["eval.input"] = img
    for p in [0, 10, 20, 30, 40, 50]:
        if p == 0:
            y = TF.center_crop(x, [224, 224])
        else:
            crop = 256 - math.floor(256 * p / 100)
            y = F.interpolate(TF.center_crop(x, [crop, crop]), size=(224, 224), mode="bilinear", align_corners=False, antialias=False)
        idx = sample_positions(y.shape, 4000, gen)
        out[f"eval.{p}.index"] = idx
        out[f"eval.{p}.value"] = y.flatten()[idx]
    # Random-scale upsampling used by the regularization stack.
    x = torch.rand(1, 3, 21, 21, generator=gen, dtype=torch.float64)
    out["align.input"] = x
    out["align.value"] = F.interpolate(x, size=(24, 24), mode="bilinear", align_corners=True)
    save_file({k: v.contiguous() for k, v in out.items()}, OUT / "resample_expected.safetensors")


def spectral_fixtures():
    gen = torch.Generator().manual_seed(13)
    h = w = 16
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[: w // 2 + 1]
    freqs = np.sqrt(fx * fx + fy * fy)
    scale = torch.tensor(1.0 / np.maximum(freqs, 1.0 / max(w, h)), dtype=torch.float64)[None, None, :, :, None]
    corr = np.asarray([[0.26, 0.09, 0.02], [0.27, 0.00, -0.05], [0.27, -0.09, 0.03]])
    corr = torch.tensor(corr / np.max(np.linalg.norm(corr, axis=0)), dtype=torch.float64)

    params = (torch.randn(1, 3, h, w // 2 + 1, 2, generator=gen, dtype=torch.float64) * 0.5).requires_grad_(True)
    spectrum = torch.view_as_complex(scale * params)
    image = torch.fft.irfftn(spectrum, s=(h, w), norm="ortho") / 4.0
    image = torch.matmul(image.permute(0, 2, 3, 1), corr.T).permute(0, 3, 1, 2)
    image = torch.sigmoid(image)
    weights = torch.randn(1, 3, h, w, generator=gen, dtype=torch.float64)
    (image * weights).sum().backward()
    save_file(
        {
            "params": params.detach().contiguous(),
            "image": image.detach().contiguous(),
            "weights": weights.contiguous(),
            "grad": params.grad.contiguous(),
        },
        OUT / "spectral_expected.safetensors",
    )


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    network_fixtures()
    resample_fixtures()
    spectral_fixtures()
    for f in sorted(OUT.glob("*.safetensors")):
        print(f"{f.name}: {f.stat().st_size} bytes")
