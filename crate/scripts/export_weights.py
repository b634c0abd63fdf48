# SPDX-License-Identifier: MIT OR Apache-2.0
"""Exports torchvision ImageNet checkpoints as safetensors for the registry.

Usage: python3 scripts/export_weights.py OUT_DIR [resnet18|resnet34 ...]

Writes OUT_DIR/<arch>-imagenet-v1.safetensors with torchvision parameter
names. Point RESSCALE_WEIGHTS_DIR at OUT_DIR afterwards. Needs network
access on first use to download the torchvision weights.
"""

import sys
from pathlib import Path

import torchvision
from safetensors.torch import save_file

WEIGHTS = {
    "resnet18": torchvision.models.ResNet18_Weights.IMAGENET1K_V1,
    "resnet34": torchvision.models.ResNet34_Weights.IMAGENET1K_V1,
}


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    for arch in sys.argv[2:] or ["resnet18"]:
        model = getattr(torchvision.models, arch)(weights=WEIGHTS[arch]).eval()
        state = {k: v.float().contiguous() for k, v in model.state_dict().items() if "num_batches_tracked" not in k}
        path = out / f"{arch}-imagenet-v1.safetensors"
        save_file(state, path)
        print(f"{path}: {len(state)} tensors")


if __name__ == "__main__":
    main()
