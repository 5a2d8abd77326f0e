#!/usr/bin/env python3
"""Regenerate paper_fixtures/vgg16_shapes.json, the shape-only manifest of the
13-conv reference network used for storage accounting. Carries no weights; the
graph validator checks every dimension before the file is written."""

import argparse
from pathlib import Path

from actquant.netgraph import LayerDef, ModelGraph, save_model

CONV_BLOCKS = [
    ("conv1", 2, 64),
    ("conv2", 2, 128),
    ("conv3", 3, 256),
    ("conv4", 3, 512),
    ("conv5", 3, 512),
]


def build() -> ModelGraph:
    layers = []
    h = w = 224
    c = 3
    for block, reps, out_c in CONV_BLOCKS:
        for i in range(1, reps + 1):
            name = f"{block}_{i}"
            layers.append(LayerDef(
                name=name, kind="conv2d", output_dims=(h, w, out_c),
                kernel=(3, 3), stride=1, padding=1,
                in_channels=c, out_channels=out_c,
            ))
            layers.append(LayerDef(name=f"relu{name[4:]}", kind="relu",
                                   output_dims=(h, w, out_c)))
            c = out_c
        h //= 2
        w //= 2
        layers.append(LayerDef(name=f"pool{block[4:]}", kind="maxpool",
                               output_dims=(h, w, c), pool=(2, 2), stride=2))
    flat = h * w * c
    for name, out_f in (("fc6", 4096), ("fc7", 4096)):
        layers.append(LayerDef(name=name, kind="fullyconnected",
                               output_dims=(out_f,), in_features=flat,
                               out_features=out_f))
        layers.append(LayerDef(name=f"relu{name[2:]}", kind="relu",
                               output_dims=(out_f,)))
        flat = out_f
    layers.append(LayerDef(name="fc8", kind="fullyconnected", output_dims=(1000,),
                           in_features=flat, out_features=1000))
    layers.append(LayerDef(name="prob", kind="softmax", output_dims=(1000,)))
    return ModelGraph(layers=tuple(layers), input_dims=(224, 224, 3), name="vgg16")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        default=Path(__file__).resolve().parent.parent / "paper_fixtures" / "vgg16_shapes.json",
    )
    args = parser.parse_args()
    model = build()
    save_model(args.out, model)
    quantizable = model.quantizable_layers()
    print(f"wrote {args.out}: {len(model.layers)} layers, "
          f"{len(quantizable)} quantizable ({quantizable[0]}..{quantizable[-1]})")


if __name__ == "__main__":
    main()
