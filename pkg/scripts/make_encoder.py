#!/usr/bin/env python3
"""Create an encoder weight archive (manifest + blob).

Two modes:
  --arch tiny         small random 2-conv encoder for demos and smoke runs
  --arch vgg16-conv3  the published conv1_1..relu3_3 architecture slice with
                      random weights (useful for shape/pipeline realism when
                      no converted weights are available)

For real pretrained weights see scripts/convert_vgg16.py.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from gsstyle.encoder import Encoder, EncoderSpec, LayerSpec, save_encoder  # noqa: E402

VGG16_CONV3_PLAN = [
    ("conv1_1", 3, 64), ("relu1_1",), ("conv1_2", 64, 64), ("relu1_2",), ("pool1",),
    ("conv2_1", 64, 128), ("relu2_1",), ("conv2_2", 128, 128), ("relu2_2",), ("pool2",),
    ("conv3_1", 128, 256), ("relu3_1",), ("conv3_2", 256, 256), ("relu3_2",),
    ("conv3_3", 256, 256), ("relu3_3",),
]

# standard image normalization used with these published architectures
VGG_MEAN = (0.485, 0.456, 0.406)
VGG_STD = (0.229, 0.224, 0.225)


def build(plan, seed, mean, std) -> Encoder:
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    for item in plan:
        name = item[0]
        if name.startswith("conv"):
            cin, cout = item[1], item[2]
            layers.append(LayerSpec(name, "conv3x3", cin, cout))
            scale = np.sqrt(2.0 / (cin * 9))  # he-style init
            weights[name] = (rng.normal(scale=scale, size=(cout, cin, 3, 3)),
                             np.zeros(cout))
        elif name.startswith("pool"):
            layers.append(LayerSpec(name, "maxpool2"))
        else:
            layers.append(LayerSpec(name, "relu"))
    return Encoder(EncoderSpec(layers=layers, mean=mean, std=std), weights)


TINY_PLAN = [
    ("conv1_1", 3, 8), ("relu1_1",), ("pool1",),
    ("conv2_1", 8, 8), ("relu2_1",),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--arch", choices=("tiny", "vgg16-conv3"), default="tiny")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="encoder.json")
    args = parser.parse_args()

    plan = TINY_PLAN if args.arch == "tiny" else VGG16_CONV3_PLAN
    encoder = build(plan, args.seed, VGG_MEAN, VGG_STD)
    save_encoder(encoder, args.out)
    print(f"{args.arch} encoder ({len(encoder)} layers) written to {args.out}")


if __name__ == "__main__":
    main()
