"""Export Keras application backbones (no top) to the .npz layout read by slr.

    python export_keras_weights.py OUT_DIR [--arch resnet50 ...] [--random] [--reference]

Writes OUT_DIR/<arch>_notop.npz with one array per weight, keyed
"<layer name>/<weight name>". `--random` skips the ImageNet download and
exports freshly initialised weights; `--reference` also stores one random
input ("input") and the backbone's float64 output ("output") for checking.
Each model is built in a fresh session so auto-generated layer names
(conv2d, conv2d_1, ...) are deterministic.
"""
import argparse
import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np
import keras

BUILDERS = {
    "resnet50": keras.applications.ResNet50V2,
    "inceptionv3": keras.applications.InceptionV3,
    "xception": keras.applications.Xception,
    "vgg16": keras.applications.VGG16,
}


def export(arch, out_dir, random, reference, side):
    keras.backend.clear_session(free_memory=True)
    if reference:
        keras.backend.set_floatx("float64")
    model = BUILDERS[arch](
        include_top=False,
        weights=None if random else "imagenet",
        input_shape=(side, side, 3),
    )
    arrays = {}
    for layer in model.layers:
        for var in layer.weights:
            arrays[f"{layer.name}/{var.name}"] = np.asarray(var.numpy())
    if reference:
        rng = np.random.default_rng(0)
        x = rng.uniform(0.0, 1.0, size=(1, side, side, 3))
        arrays["input"] = x[0]
        arrays["output"] = np.asarray(model(x, training=False))[0]
    path = os.path.join(out_dir, f"{arch}_notop.npz")
    np.savez_compressed(path, **arrays)
    print(f"{arch}: {model.count_params()} parameters -> {path}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir")
    parser.add_argument("--arch", nargs="*", default=list(BUILDERS))
    parser.add_argument("--random", action="store_true")
    parser.add_argument("--reference", action="store_true")
    parser.add_argument("--side", type=int, default=75)
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    for arch in args.arch:
        export(arch, args.out_dir, args.random, args.reference, args.side)


if __name__ == "__main__":
    main()
