"""Regenerates the test fixtures in this directory.

Models are written in the portable JSON format; their golden probabilities
come from the plain numpy forward pass below, which shares no code with the
Rust engine. Run from anywhere: python3 generate.py
"""

import base64
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

HERE = Path(__file__).resolve().parent
MEAN_FACE = HERE.parents[1] / "data" / "mean_face_112.json"
PAIN_AUS = ["AU04", "AU06", "AU07", "AU09", "AU10", "AU25", "AU26", "AU27"]


def enc(a):
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data_b64": base64.b64encode(a.tobytes()).decode()}


def conv(x, k, b, stride, pad):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, i, j] = np.tensordot(k.astype(np.float64), patch, axes=([1, 2, 3], [0, 1, 2]))
    return out + b[:, None, None]


def maxpool(x, win, stride):
    c, h, w = x.shape
    oh, ow = (h - win) // stride + 1, (w - win) // stride + 1
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[:, i, j] = x[:, i * stride:i * stride + win, j * stride:j * stride + win].max(axis=(1, 2))
    return out


def run(layers, x):
    outs = []
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv2d":
            x = conv(x, layer["k"], layer["b"], layer["stride"], layer["padding"])
        elif kind == "dense":
            x = x.reshape(-1) @ layer["w"].astype(np.float64) + layer["b"]
        elif kind == "relu":
            x = np.maximum(x, 0)
        elif kind == "sigmoid":
            x = 1 / (1 + np.exp(-x))
        elif kind == "maxpool":
            x = maxpool(x, layer["window"], layer["window"])
        elif kind == "flatten":
            x = x.reshape(-1)
        elif kind == "global_avgpool":
            x = x.mean(axis=(1, 2))
        elif kind == "batchnorm":
            g, be, m, v, eps = (layer[n] for n in ("gamma", "beta", "mean", "var", "eps"))
            x = (g[:, None, None] * (x - m[:, None, None]) / np.sqrt(v[:, None, None] + eps)
                 + be[:, None, None])
        elif kind == "residual_add":
            skip = outs[layer["skip_source"]]
            if "pk" in layer:
                skip = conv(skip, layer["pk"], layer["pb"], layer["pstride"], 0)
            x = x + skip
        outs.append(x)
    return outs


def to_doc(layers):
    docs = []
    for layer in layers:
        kind = layer["kind"]
        d = {"kind": kind}
        if kind == "conv2d":
            d.update(kernels=enc(layer["k"]), bias=enc(layer["b"]),
                     stride=layer["stride"], padding=layer["padding"])
        elif kind == "dense":
            d.update(weights=enc(layer["w"]), bias=enc(layer["b"]))
        elif kind == "maxpool":
            d.update(window=layer["window"])
        elif kind == "batchnorm":
            d.update(gamma=enc(layer["gamma"]), beta=enc(layer["beta"]),
                     running_mean=enc(layer["mean"]), running_var=enc(layer["var"]),
                     epsilon=layer["eps"])
        elif kind == "residual_add":
            d["skip_source"] = layer["skip_source"]
            if "pk" in layer:
                d["projection"] = {"kernels": enc(layer["pk"]), "bias": enc(layer["pb"]),
                                   "stride": layer["pstride"]}
        docs.append(d)
    return docs


def f32(a):
    return np.asarray(a, dtype=np.float32)


def conv_layer(rng, o, c, k, stride=1, padding=1, scale=None):
    scale = scale or np.sqrt(2.0 / (c * k * k))
    return {"kind": "conv2d", "k": f32(rng.normal(0, scale, (o, c, k, k))),
            "b": f32(rng.normal(0, 0.05, o)), "stride": stride, "padding": padding}


def bn_layer(rng, c):
    return {"kind": "batchnorm", "gamma": f32(rng.uniform(0.5, 1.5, c)),
            "beta": f32(rng.normal(0, 0.1, c)), "mean": f32(rng.normal(0, 0.2, c)),
            "var": f32(rng.uniform(0.5, 2.0, c)), "eps": 1e-5}


def write_model(path, name, shape, labels, layers, golden_input, metadata=None):
    outs = run(layers, golden_input.astype(np.float64))
    doc = {
        "format_version": 1,
        "name": name,
        "input_shape": list(shape),
        "output_labels": labels,
        "layers": to_doc(layers),
        "golden": {"input": enc(golden_input), "probabilities": [float(p) for p in outs[-1]]},
    }
    if metadata is not None:
        doc["metadata"] = metadata(outs)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return outs


def face_image(rng, pts):
    img = Image.new("L", (112, 112), 0)
    d = ImageDraw.Draw(img)
    for y in range(112):
        d.line([(0, y), (111, y)], fill=int(40 + 50 * y / 111))
    xs, ys = pts[:17, 0], pts[:17, 1]
    d.ellipse([xs.min(), pts[19, 1] - 14, xs.max(), ys.max()], fill=int(rng.integers(150, 200)))
    for a, b in [(17, 22), (22, 27)]:
        d.line([tuple(p) for p in pts[a:b]], fill=40, width=2)
    for a, b in [(36, 42), (42, 48)]:
        d.polygon([tuple(p) for p in pts[a:b]], fill=30)
    d.line([tuple(p) for p in pts[27:31]], fill=110, width=2)
    d.polygon([tuple(p) for p in pts[48:60]], fill=int(rng.integers(60, 110)))
    noise = rng.normal(0, 6, (112, 112))
    arr = np.clip(np.asarray(img, dtype=np.float64) + noise, 0, 255).astype(np.uint8)
    return arr


def main():
    rng = np.random.default_rng(20240611)
    mean_face = np.array(json.loads(MEAN_FACE.read_text())["points"], dtype=np.float64)

    (HERE / "images").mkdir(exist_ok=True)
    faces = []
    for i in range(10):
        shift = rng.uniform(-3, 3, 2)
        pts = mean_face + shift + rng.normal(0, 0.8, mean_face.shape)
        pts = np.round(pts, 2)
        arr = face_image(rng, pts)
        name = f"face_{i:02d}.png"
        Image.fromarray(arr, mode="L").save(HERE / "images" / name)
        faces.append((name, pts, arr.astype(np.float64) / 255.0))

    # toy CNN: 112x112 gray -> two AU heads
    toy = [
        conv_layer(rng, 4, 1, 4, stride=2),
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2},
        conv_layer(rng, 8, 4, 4, stride=2),
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "flatten"},
        {"kind": "dense", "w": f32(rng.normal(0, 0.15, (392, 2))), "b": f32(np.zeros(2))},
        {"kind": "sigmoid"},
    ]
    labels = ["AU04", "AU25"]
    logits = np.array([run(toy[:-1], f[2][None])[-1] for f in faces])
    # centre each head on the fixture set so predictions split both ways
    toy[-2]["b"] = f32(-np.median(logits, axis=0) + np.array([0.01, -0.01]))
    probs = np.array([run(toy, f[2][None])[-1] for f in faces])
    assert np.all(np.abs(probs - 0.5) > 1e-4), probs
    golden_input = f32(faces[0][2][None])
    write_model(HERE / "toy_cnn.json", "toy_cnn", (1, 112, 112), labels, toy, golden_input)

    lines = []
    for i, (name, pts, _) in enumerate(faces):
        predicted = {labels[k] for k in range(2) if probs[i, k] >= 0.5}
        if i < 5:
            truth = set(predicted) or {"AU04"}
        elif i < 7:
            truth = set(labels) - predicted
        else:
            truth = set(labels) | {"AU06"}
        lines.append(json.dumps({
            "image_id": f"face_{i:02d}",
            "path": f"images/{name}",
            "landmarks": pts.tolist(),
            "aus": sorted(truth),
            "dataset": "actor" if i % 2 == 0 else "unbc",
        }))
    (HERE / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (HERE / "manifest_2.jsonl").write_text("\n".join(lines[:2]) + "\n")
    (HERE / "toy_cnn_probabilities.json").write_text(json.dumps(
        {f"face_{i:02d}": [float(p) for p in probs[i]] for i in range(10)}, indent=1) + "\n")

    # small residual network over 33x33 gray input; odd size keeps every
    # stride-2 output integral, including the 1x1 projection
    res = [
        conv_layer(rng, 8, 1, 3),
        bn_layer(rng, 8),
        {"kind": "relu"},
        conv_layer(rng, 8, 8, 3),
        bn_layer(rng, 8),
        {"kind": "relu"},
        conv_layer(rng, 8, 8, 3),
        bn_layer(rng, 8),
        {"kind": "residual_add", "skip_source": 2},
        {"kind": "relu"},
        conv_layer(rng, 16, 8, 3, stride=2),
        bn_layer(rng, 16),
        {"kind": "relu"},
        conv_layer(rng, 16, 16, 3),
        bn_layer(rng, 16),
        {"kind": "residual_add", "skip_source": 9,
         "pk": f32(rng.normal(0, 0.3, (16, 8, 1, 1))), "pb": f32(rng.normal(0, 0.05, 16)),
         "pstride": 2},
        {"kind": "relu"},
        {"kind": "global_avgpool"},
        {"kind": "dense", "w": f32(rng.normal(0, 0.4, (16, 8))), "b": f32(rng.normal(0, 0.1, 8))},
        {"kind": "sigmoid"},
    ]
    golden_input = f32(rng.uniform(0, 1, (1, 33, 33)))
    write_model(HERE / "resnet_small.json", "resnet_small", (1, 33, 33), PAIN_AUS, res, golden_input,
                metadata=lambda outs: {"layer_count": len(res),
                                       "layer_output_shapes": [list(o.shape) for o in outs]})


if __name__ == "__main__":
    main()
