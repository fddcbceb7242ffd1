#!/usr/bin/env python3
"""Export ImageNet-pretrained MobileNetV2 weights to safetensors.

Maps Keras layer names onto the crate's tensor names and layouts:

  Keras                          crate
  -----------------------------  -----------------------------------
  Conv1 / bn_Conv1               backbone.stem.conv / backbone.stem.bn
  expanded_conv_*                backbone.block01.*
  block_<n>_*   (n = 1..16)      backbone.block<n+1:02>.*
  Conv_1 / Conv_1_bn             backbone.final.conv / backbone.final.bn

Kernel layouts: Keras stores conv kernels as (kh, kw, c_in, c_out) and
depthwise kernels as (kh, kw, c, 1); the crate expects (c_out, c_in, kh,
kw) and (c, kh, kw) respectively.

The Keras network was trained on inputs scaled to [-1, 1]; the crate's
preprocessing scales pixels to [0, 1]. The rescale x' = 2x - 1 is folded
into the stem: the stem kernel is doubled and the constant shift is
absorbed into the stem batch-norm running mean. The fold is exact except
on the one-pixel zero-padded border of the stem convolution, which is
negligible at 224x224.

Usage:
  pip install tensorflow safetensors numpy
  python tools/export_mobilenetv2.py --out mobilenetv2_imagenet.safetensors
"""

import argparse

import numpy as np


def conv_kernel(layer):
    (w,) = layer.get_weights()
    return np.ascontiguousarray(w.transpose(3, 2, 0, 1)).astype(np.float32)


def depthwise_kernel(layer):
    (w,) = layer.get_weights()  # (kh, kw, c, 1)
    return np.ascontiguousarray(w[:, :, :, 0].transpose(2, 0, 1)).astype(np.float32)


def bn_tensors(layer, prefix):
    gamma, beta, mean, var = (v.astype(np.float32) for v in layer.get_weights())
    return {
        f"{prefix}.gamma": gamma,
        f"{prefix}.beta": beta,
        f"{prefix}.running_mean": mean,
        f"{prefix}.running_var": var,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="mobilenetv2_imagenet.safetensors")
    args = parser.parse_args()

    from safetensors.numpy import save_file
    from tensorflow.keras.applications import MobileNetV2

    model = MobileNetV2(weights="imagenet", include_top=False, input_shape=(224, 224, 3))
    get = model.get_layer
    tensors = {}

    # Stem, with the [0,1] -> [-1,1] input rescale folded in.
    stem = conv_kernel(get("Conv1")) * 2.0
    shift = stem.sum(axis=(1, 2, 3))  # response to an all-ones input
    tensors["backbone.stem.conv.weight"] = stem
    bn = bn_tensors(get("bn_Conv1"), "backbone.stem.bn")
    bn["backbone.stem.bn.running_mean"] = bn["backbone.stem.bn.running_mean"] + shift
    tensors.update(bn)

    # Inverted-residual blocks. Block 1 ("expanded_conv") has no expand conv.
    for block in range(1, 18):
        ours = f"backbone.block{block:02}"
        keras = "expanded_conv" if block == 1 else f"block_{block - 1}"
        if block > 1:
            tensors[f"{ours}.expand.conv.weight"] = conv_kernel(get(f"{keras}_expand"))
            tensors.update(bn_tensors(get(f"{keras}_expand_BN"), f"{ours}.expand.bn"))
        tensors[f"{ours}.depthwise.weight"] = depthwise_kernel(get(f"{keras}_depthwise"))
        tensors.update(bn_tensors(get(f"{keras}_depthwise_BN"), f"{ours}.depthwise_bn"))
        tensors[f"{ours}.project.weight"] = conv_kernel(get(f"{keras}_project"))
        tensors.update(bn_tensors(get(f"{keras}_project_BN"), f"{ours}.project_bn"))

    tensors["backbone.final.conv.weight"] = conv_kernel(get("Conv_1"))
    tensors.update(bn_tensors(get("Conv_1_bn"), "backbone.final.bn"))

    save_file(tensors, args.out)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
