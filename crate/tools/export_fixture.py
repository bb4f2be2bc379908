"""Train the tinycnn fixture on the scikit-learn digits set and export it.

Pixels are scaled to [0, 1] and perturbed with seeded Gaussian noise
(std NOISE) so that the task is not trivially separable.

Writes four tensor archives under OUT:

  model/         conv-bn-relu, conv-bn, residual add, relu, avgpool, fc
  calib/         256 class-balanced training images with labels
  holdout/       the held-out split with labels
  probes/        16 held-out images, plus probe_logits/ with the reference logits

Usage: python tools/export_fixture.py --seed 0 --out crates/core/tests/fixtures/tinycnn
"""

import argparse
import json
import os

import numpy as np
import torch
import torch.nn as nn
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

CHANNELS = 64
CALIB_SIZE = 256
PROBES = 16
EPOCHS = 40
BN_EPS = 1e-5
NOISE = 0.25


class TinyCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, CHANNELS, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(CHANNELS, eps=BN_EPS)
        self.conv2 = nn.Conv2d(CHANNELS, CHANNELS, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(CHANNELS, eps=BN_EPS)
        self.pool = nn.AvgPool2d(2)
        self.fc = nn.Linear(CHANNELS * 16, 10)

    def forward(self, x):
        r = torch.relu(self.bn1(self.conv1(x)))
        y = torch.relu(r + self.bn2(self.conv2(r)))
        return self.fc(torch.flatten(self.pool(y), 1))


def blob(out, name, array, dtype="f32le"):
    arr = np.ascontiguousarray(array, dtype="<f4" if dtype == "f32le" else "<i8")
    with open(os.path.join(out, name), "wb") as f:
        f.write(arr.tobytes())
    ref = {"shape": list(arr.shape), "blob": name}
    if dtype != "f32le":
        ref["dtype"] = dtype
    return ref


def write_manifest(out, content):
    manifest = {"format": "quantforge-archive", "version": 1, "dtype": "f32le", **content}
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def export_model(model, out):
    os.makedirs(out, exist_ok=True)
    sd = {k: v.detach().numpy() for k, v in model.state_dict().items()}

    def params(prefix, names):
        return {n: blob(out, f"{prefix}.{n}.bin", sd[f"{prefix}.{src}"]) for n, src in names}

    conv = [("weight", "weight"), ("bias", "bias")]
    bn = [("gamma", "weight"), ("beta", "bias"), ("mean", "running_mean"), ("var", "running_var")]

    def spec(cin):
        return {"in_channels": cin, "out_channels": CHANNELS, "kernel": 3, "stride": 1, "padding": 1}

    nodes = [
        {"id": "conv1", "kind": "conv2d", "inputs": ["input"], "spec": spec(1), "params": params("conv1", conv)},
        {"id": "bn1", "kind": "batchnorm2d", "inputs": ["conv1"], "eps": BN_EPS, "params": params("bn1", bn)},
        {"id": "relu1", "kind": "relu", "inputs": ["bn1"]},
        {"id": "conv2", "kind": "conv2d", "inputs": ["relu1"], "spec": spec(CHANNELS), "params": params("conv2", conv)},
        {"id": "bn2", "kind": "batchnorm2d", "inputs": ["conv2"], "eps": BN_EPS, "params": params("bn2", bn)},
        {"id": "add", "kind": "add", "inputs": ["relu1", "bn2"]},
        {"id": "relu2", "kind": "relu", "inputs": ["add"]},
        {"id": "pool", "kind": "avgpool", "inputs": ["relu2"], "kernel": 2},
        {"id": "flat", "kind": "flatten", "inputs": ["pool"]},
        {"id": "fc", "kind": "fc", "inputs": ["flat"], "params": params("fc", conv)},
    ]
    write_manifest(out, {"kind": "model", "input_shape": [1, 8, 8], "output": "fc", "nodes": nodes})


def export_set(out, inputs, labels=None):
    os.makedirs(out, exist_ok=True)
    content = {"kind": "calibration", "inputs": blob(out, "inputs.bin", inputs)}
    if labels is not None:
        content["labels"] = blob(out, "labels.bin", labels, "i64le")
    write_manifest(out, content)


def balanced_sample(labels, size, rng):
    classes = np.unique(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    picked = []
    i = 0
    while len(picked) < size:
        for idx in per_class:
            if i < len(idx) and len(picked) < size:
                picked.append(idx[i])
        i += 1
    return np.sort(np.array(picked))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    noise_rng = np.random.default_rng(args.seed)
    sample_rng = np.random.default_rng(args.seed + 1)

    digits = load_digits()
    x = (digits.images / 16.0)[:, None, :, :]
    x = (x + noise_rng.normal(0.0, NOISE, x.shape)).astype(np.float32)
    y = digits.target.astype(np.int64)
    x_train, x_hold, y_train, y_hold = train_test_split(
        x, y, test_size=0.3, random_state=args.seed, stratify=y
    )

    model = TinyCnn()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    xt, yt = torch.from_numpy(x_train), torch.from_numpy(y_train)
    for _ in range(EPOCHS):
        model.train()
        perm = torch.randperm(len(xt))
        for start in range(0, len(xt), 32):
            idx = perm[start:start + 32]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        hold_logits = model(torch.from_numpy(x_hold)).numpy()
    accuracy = float((hold_logits.argmax(1) == y_hold).mean())
    print(f"holdout accuracy {accuracy:.4f}")

    calib = balanced_sample(y_train, CALIB_SIZE, sample_rng)
    export_model(model, os.path.join(args.out, "model"))
    export_set(os.path.join(args.out, "calib"), x_train[calib], y_train[calib])
    export_set(os.path.join(args.out, "holdout"), x_hold, y_hold)
    export_set(os.path.join(args.out, "probes"), x_hold[:PROBES])
    export_set(os.path.join(args.out, "probe_logits"), hold_logits[:PROBES])
    with open(os.path.join(args.out, "export.json"), "w") as f:
        json.dump(
            {
                "source": "TinyCnn (torch)",
                "dataset": f"sklearn digits, 8x8, /16, gaussian noise std {NOISE}",
                "seed": args.seed,
                "calibration_size": CALIB_SIZE,
                "holdout_size": int(len(y_hold)),
                "holdout_accuracy": accuracy,
            },
            f,
            indent=2,
        )
        f.write("\n")


if __name__ == "__main__":
    main()
