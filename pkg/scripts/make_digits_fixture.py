"""Build the MNIST-format digits fixture and train the reference MLP.

Writes to tests/fixtures/digits/:

    train-images-idx3-ubyte, train-labels-idx1-ubyte   (augmented train split)
    t10k-images-idx3-ubyte,  t10k-labels-idx1-ubyte    (held-out split)
    mlp.snm/                                           (64-128-128-10 ReLU MLP)

The source images are scikit-learn's 8x8 handwritten digits (values 0..16),
rescaled to 0..255.  The train split is augmented with one-pixel shifts.
Training is plain numpy Adam with a fixed seed, so the output is reproducible.

    python scripts/make_digits_fixture.py
"""
import argparse
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from snprune.evalharness import Dataset, evaluate, write_idx
from snprune.model import dense_mlp, save_model

SHIFTS = [(0, 1), (0, -1), (1, 0), (-1, 0)]


def shifted(images, dy, dx):
    out = np.zeros_like(images)
    h, w = images.shape[1:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = images[:, ys, xs]
    return out


def train_mlp(x, y, hidden=(128, 128), epochs=60, batch=64, lr=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *hidden, 10]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params += [rng.standard_normal((b, a)) * np.sqrt(2.0 / a), np.zeros(b)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            acts = [x[idx]]
            for k in range(0, len(params), 2):
                z = acts[-1] @ params[k].T + params[k + 1]
                acts.append(np.maximum(z, 0) if k < len(params) - 2 else z)
            z = acts[-1] - acts[-1].max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1
            delta = p / len(idx)
            grads = [None] * len(params)
            for k in range(len(params) - 2, -1, -2):
                a_in = acts[k // 2]
                grads[k] = delta.T @ a_in
                grads[k + 1] = delta.sum(axis=0)
                if k:
                    delta = (delta @ params[k]) * (a_in > 0)
            step += 1
            for i, g in enumerate(grads):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                mh = m[i] / (1 - 0.9 ** step)
                vh = v[i] / (1 - 0.999 ** step)
                params[i] -= lr * mh / (np.sqrt(vh) + 1e-8)
    return dense_mlp(params[0::2], params[1::2], input_dim=x.shape[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "digits")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    images = np.clip(digits.images * 16, 0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    test_idx, train_idx = order[:500], order[500:]

    train_images = [images[train_idx]] + [shifted(images[train_idx], dy, dx) for dy, dx in SHIFTS]
    train_images = np.concatenate(train_images)
    train_labels = np.tile(labels[train_idx], len(SHIFTS) + 1)

    write_idx(out / "train-images-idx3-ubyte", train_images)
    write_idx(out / "train-labels-idx1-ubyte", train_labels)
    write_idx(out / "t10k-images-idx3-ubyte", images[test_idx])
    write_idx(out / "t10k-labels-idx1-ubyte", labels[test_idx])

    x = train_images.reshape(len(train_images), -1).astype(np.float64) / 255.0
    net = train_mlp(x, train_labels.astype(np.int64), seed=args.seed)
    save_model(net, out / "mlp.snm")

    test = Dataset(images[test_idx].reshape(500, -1) / 255.0, labels[test_idx].astype(np.int64))
    acc, loss = evaluate(net, test)
    print(f"train samples {len(train_labels)}, test samples 500, test accuracy {acc:.4f}, loss {loss:.4f}")


if __name__ == "__main__":
    main()
