#!/usr/bin/env python3
"""Convert pretrained torchvision VGG-16 weights into the manifest+blob format.

Asset-preparation step, not part of the build or tests: requires torchvision
(and a network or cached download). Extracts the conv1_1..relu3_3 slice that
the feature losses use.

    python scripts/convert_vgg16.py --out vgg16_conv3.json
"""

import argparse
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from gsstyle.encoder import Encoder, EncoderSpec, LayerSpec, save_encoder  # noqa: E402
from make_encoder import VGG16_CONV3_PLAN, VGG_MEAN, VGG_STD  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="vgg16_conv3.json")
    args = parser.parse_args()

    try:
        from torchvision.models import vgg16
    except ImportError:
        sys.exit("torchvision is required for weight conversion: pip install torchvision")

    model = vgg16(weights="IMAGENET1K_V1").features.eval()
    conv_names = [item[0] for item in VGG16_CONV3_PLAN if item[0].startswith("conv")]

    layers, weights = [], {}
    torch_convs = [m for m in model if m.__class__.__name__ == "Conv2d"]
    for item in VGG16_CONV3_PLAN:
        name = item[0]
        if name.startswith("conv"):
            module = torch_convs[conv_names.index(name)]
            kernel = module.weight.detach().numpy().astype(np.float64)
            bias = module.bias.detach().numpy().astype(np.float64)
            layers.append(LayerSpec(name, "conv3x3", item[1], item[2]))
            weights[name] = (kernel, bias)
        elif name.startswith("pool"):
            layers.append(LayerSpec(name, "maxpool2"))
        else:
            layers.append(LayerSpec(name, "relu"))

    encoder = Encoder(EncoderSpec(layers=layers, mean=VGG_MEAN, std=VGG_STD), weights)
    save_encoder(encoder, args.out)
    print(f"converted {len(conv_names)} conv layers to {args.out}")


if __name__ == "__main__":
    main()
