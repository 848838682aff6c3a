"""Regenerates the neural-mode golden fixture with an independent numpy
forward pass. Run from this directory: python3 make_neural_fixture.py"""

import json

import numpy as np

DIMS = dict(
    feature_width=10, n_down=6, n_pose=15, n_shape=10, pose_width=8, pose_heads=2,
    orient_width=8, orient_heads=2, encoder_layers=2, hidden=[12], grid_features=12,
)
N_VIEWS = 3
EPS = 1e-5
rng = np.random.default_rng(20240611)


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def linear(name, n_in, n_out, out):
    out[f"{name}.w"] = f32(rng.uniform(-0.6, 0.6, (n_out, n_in)))
    out[f"{name}.b"] = f32(rng.uniform(-0.2, 0.2, n_out))


def mlp(name, n_in, n_out, out):
    sizes = [n_in] + DIMS["hidden"] + [n_out]
    for i in range(len(sizes) - 1):
        linear(f"{name}.{i}", sizes[i], sizes[i + 1], out)


def encoder(name, width, out):
    for i in range(DIMS["encoder_layers"]):
        p = f"{name}.{i}"
        for norm in ("norm1", "norm2"):
            out[f"{p}.{norm}.gain"] = f32(rng.uniform(0.5, 1.5, width))
            out[f"{p}.{norm}.bias"] = f32(rng.uniform(-0.1, 0.1, width))
        for lin in ("query", "key", "value", "out"):
            linear(f"{p}.{lin}", width, width, out)
        linear(f"{p}.ff1", width, 2 * width, out)
        linear(f"{p}.ff2", 2 * width, width, out)


def apply_linear(w, name, x):
    return x @ w[f"{name}.w"].T + w[f"{name}.b"]


def apply_mlp(w, name, x):
    n = len(DIMS["hidden"]) + 1
    for i in range(n):
        x = apply_linear(w, f"{name}.{i}", x)
        if i + 1 < n:
            x = np.maximum(x, 0.0)
    return x


def layer_norm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + EPS) * gain + bias


def encode(w, name, x, heads):
    width = x.shape[1]
    dh = width // heads
    for i in range(DIMS["encoder_layers"]):
        p = f"{name}.{i}"
        h = layer_norm(x, w[f"{p}.norm1.gain"], w[f"{p}.norm1.bias"])
        q, k, v = (apply_linear(w, f"{p}.{n}", h) for n in ("query", "key", "value"))
        heads_out = []
        for hd in range(heads):
            s = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, s] @ k[:, s].T / np.sqrt(dh)
            scores = np.exp(scores - scores.max(axis=1, keepdims=True))
            scores /= scores.sum(axis=1, keepdims=True)
            heads_out.append(scores @ v[:, s])
        x = x + apply_linear(w, f"{p}.out", np.concatenate(heads_out, axis=1))
        h = layer_norm(x, w[f"{p}.norm2.gain"], w[f"{p}.norm2.bias"])
        x = x + apply_linear(w, f"{p}.ff2", np.maximum(apply_linear(w, f"{p}.ff1", h), 0.0))
    return x


def aggregate(tokens, masks, kind, w):
    n_views, rows, cols = tokens.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        vals = tokens[masks[:, i], i, :]
        if len(vals) == 0:
            continue
        if kind == "max":
            out[i] = vals.max(axis=0)
        elif kind == "avg":
            out[i] = vals.mean(axis=0)
        elif kind == "softmax":
            e = np.exp(vals - vals.max(axis=0))
            out[i] = (vals * e).sum(axis=0) / e.sum(axis=0)
        else:
            out[i] = encode(w, "pose_encoder", vals, DIMS["pose_heads"]).max(axis=0)
    return out


def softplus(x):
    return max(x, 0.0) + np.log1p(np.exp(-abs(x)))


def write_tensors(stem, tensors):
    manifest = {"format": "f32-le-row-major", "tensors": []}
    blob = bytearray()
    for name, a in tensors.items():
        a = np.asarray(a, dtype=np.float32)
        shape = list(a.shape)
        manifest["tensors"].append({"name": name, "shape": shape})
        blob += a.astype("<f4").tobytes(order="C")
    with open(f"{stem}.json", "w") as f:
        json.dump(manifest, f, indent=2)
    with open(f"{stem}.bin", "wb") as f:
        f.write(bytes(blob))


def main():
    d = DIMS
    out_ps = 6 * d["n_pose"] + d["n_shape"]
    w = {}
    linear("pose_proj", d["feature_width"], d["pose_width"], w)
    encoder("pose_encoder", d["pose_width"], w)
    mlp("pose_decoder", d["pose_width"] * d["n_down"], out_ps, w)
    linear("orient_proj", d["feature_width"] * d["n_down"], d["orient_width"], w)
    encoder("orient_encoder", d["orient_width"], w)
    mlp("orient_decoder", d["orient_width"], 6, w)
    mlp("camera_decoder", d["orient_width"], 3, w)
    mlp("init_decoder", d["grid_features"], out_ps, w)

    rows = f32(rng.uniform(-1.0, 1.0, (N_VIEWS, d["n_down"], d["feature_width"])))
    masks = rng.uniform(size=(N_VIEWS, d["n_down"])) > 0.3
    masks[:, 0] = False  # one vertex seen by no view
    masks[0, 1] = True
    grid = f32(rng.uniform(-1.0, 1.0, d["grid_features"]))

    case = {"rows": rows, "masks": masks.astype(np.float64), "grid": grid}
    tokens = np.stack([apply_linear(w, "pose_proj", r) for r in rows])
    for kind in ("max", "avg", "softmax", "transformer"):
        fused = aggregate(tokens, masks, kind, w)
        case[f"fused.{kind}"] = fused
        case[f"pose_shape.{kind}"] = apply_mlp(w, "pose_decoder", fused.reshape(-1))
    orient = np.stack([apply_linear(w, "orient_proj", r.reshape(-1)) for r in rows])
    encoded = encode(w, "orient_encoder", orient, d["orient_heads"])
    case["orient_tokens"] = orient
    case["orient_encoded"] = encoded
    case["orientation"] = np.stack([apply_mlp(w, "orient_decoder", t) for t in encoded])
    cam = np.stack([apply_mlp(w, "camera_decoder", t) for t in encoded])
    cam[:, 0] = [softplus(x) + 0.1 for x in cam[:, 0]]
    case["camera"] = cam
    case["init"] = apply_mlp(w, "init_decoder", grid)

    write_tensors("neural_weights", w)
    # expected values are stored as f32; comparisons use a matching tolerance
    write_tensors("neural_case", case)
    with open("neural_dims.json", "w") as f:
        json.dump(d, f, indent=2)


if __name__ == "__main__":
    main()
