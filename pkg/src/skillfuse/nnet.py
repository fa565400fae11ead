"""Minimal reverse-mode-differentiated skill network.

Architecture: 1D conv -> ReLU -> residual block (two convs, identity
shortcut, no activation after the add) -> channel+spatial
squeeze-excitation -> global average pooling over time -> one dense head.
Everything is float64 and every gradient is written by hand so it can be
checked against finite differences.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class VbaNetConfig:
    in_channels: int
    conv_filters: int = 64
    kernel: int = 3
    se_reduction: int = 8
    head: str = "classify"
    n_classes: int = 2
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    patience: int = 10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.conv_filters < self.se_reduction:
            raise ValueError("conv_filters must be >= se_reduction")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.head not in ("classify", "regress"):
            raise ValueError("head must be 'classify' or 'regress'")
        if self.head == "classify" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.head == "classify" else 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded cross-correlation. x: TxCin, w: FxCinxK, b: F."""
    t = x.shape[0]
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.zeros((t + k - 1, x.shape[1]))
    xp[p:p + t] = x
    y = np.broadcast_to(b, (t, b.shape[0])).copy()
    for j in range(k):
        y += xp[j:j + t] @ w[:, :, j].T
    return y, xp


def conv1d_backward(dy: np.ndarray, xp: np.ndarray, w: np.ndarray):
    t = dy.shape[0]
    k = w.shape[2]
    p = (k - 1) // 2
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for j in range(k):
        dw[:, :, j] = dy.T @ xp[j:j + t]
        dxp[j:j + t] += dy @ w[:, :, j]
    return dxp[p:p + t], dw, dy.sum(axis=0)


class VbaNet:
    """Parameter container plus hand-written forward/backward."""

    def __init__(self, config: VbaNetConfig, rng: np.random.Generator | None = None):
        self.config = config
        if rng is None:
            rng = np.random.default_rng(config.rng_seed)
        c_in = config.in_channels
        f = config.conv_filters
        k = config.kernel
        fr = f // config.se_reduction
        if fr < 1:
            fr = 1
        self.se_hidden = fr
        out = config.out_dim

        def fan_in_uniform(shape, fan):
            limit = 1.0 / np.sqrt(fan)
            return rng.uniform(-limit, limit, size=shape)

        # SE gate final layers start at zero so both sigmoids open at 0.5
        # and the whole block is the identity at initialization.
        self.params: dict[str, np.ndarray] = {
            "conv_w": fan_in_uniform((f, c_in, k), c_in * k),
            "conv_b": np.zeros(f),
            "res1_w": fan_in_uniform((f, f, k), f * k),
            "res1_b": np.zeros(f),
            "res2_w": fan_in_uniform((f, f, k), f * k),
            "res2_b": np.zeros(f),
            "se1_w": fan_in_uniform((f, fr), f),
            "se1_b": np.zeros(fr),
            "se2_w": np.zeros((fr, f)),
            "se2_b": np.zeros(f),
            "sse_w": np.zeros(f),
            "sse_b": np.zeros(1),
            "head_w": fan_in_uniform((f, out), f),
            "head_b": np.zeros(out),
        }

    # --- flat parameter vector -------------------------------------------

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(arr.shape)) for name, arr in self.params.items()]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for name in self.param_names():
            arr = self.params[name]
            n = arr.size
            self.params[name] = vec[offset:offset + n].reshape(arr.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError("flat vector length mismatch")

    def n_params(self) -> int:
        return sum(arr.size for arr in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.params.items()}

    # --- forward ----------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"input must be T x {self.config.in_channels}, got {x.shape}")
        if x.shape[0] < self.config.kernel:
            raise ValueError("series shorter than the conv kernel")
        return x

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Returns (output, activation_map, cache).

        output: class probabilities (K,) or raw scalar in scaled space.
        activation_map: T x F feature map entering GAP (used for CAMs).
        """
        x = self._check_input(x)
        p = self.params
        t = x.shape[0]

        y0, xp0 = conv1d_forward(x, p["conv_w"], p["conv_b"])
        a0 = relu(y0)
        r1, xp1 = conv1d_forward(a0, p["res1_w"], p["res1_b"])
        a1 = relu(r1)
        r2, xp2 = conv1d_forward(a1, p["res2_w"], p["res2_b"])
        res = a0 + r2  # identity shortcut, no post-add activation

        s = res.mean(axis=0)
        h_pre = s @ p["se1_w"] + p["se1_b"]
        h = relu(h_pre)
        g_pre = h @ p["se2_w"] + p["se2_b"]
        g = sigmoid(g_pre)
        q_pre = res @ p["sse_w"] + p["sse_b"][0]
        q = sigmoid(q_pre)
        amap = res * g + res * q[:, None]

        gap = amap.mean(axis=0)
        logits = gap @ p["head_w"] + p["head_b"]

        if self.config.head == "classify":
            output = softmax(logits)
        else:
            output = logits[0]

        if not want_cache:
            return output, amap, None
        cache = dict(x=x, t=t, xp0=xp0, y0=y0, a0=a0, xp1=xp1, r1=r1, a1=a1,
                     xp2=xp2, res=res, s=s, h_pre=h_pre, h=h, g=g, q=q,
                     gap=gap, logits=logits, output=output)
        return output, amap, cache

    def activation_map(self, x: np.ndarray) -> np.ndarray:
        """T x F map entering GAP; GAP(map) @ head_w + head_b = logits."""
        _, amap, _ = self.forward(x)
        return amap

    # --- loss and gradients -------------------------------------------------

    def loss_and_grads(self, x: np.ndarray, target):
        output, _, cache = self.forward(x, want_cache=True)
        p = self.params
        t = cache["t"]

        if self.config.head == "classify":
            y = int(target)
            if not 0 <= y < self.config.n_classes:
                raise ValueError("class target out of range")
            probs = cache["output"]
            loss = -np.log(max(probs[y], 1e-300))
            dlogits = probs.copy()
            dlogits[y] -= 1.0
        else:
            y = float(target)
            pred = cache["logits"][0]
            loss = (pred - y) ** 2
            dlogits = np.array([2.0 * (pred - y)])

        grads: dict[str, np.ndarray] = {}
        grads["head_w"] = np.outer(cache["gap"], dlogits)
        grads["head_b"] = dlogits
        dgap = p["head_w"] @ dlogits
        damap = np.broadcast_to(dgap / t, (t, dgap.shape[0])).copy()

        res, g, q, h = cache["res"], cache["g"], cache["q"], cache["h"]
        dres = damap * g + damap * q[:, None]
        dg = (damap * res).sum(axis=0)
        dq = (damap * res).sum(axis=1)

        dg_pre = dg * g * (1.0 - g)
        grads["se2_w"] = np.outer(h, dg_pre)
        grads["se2_b"] = dg_pre
        dh = p["se2_w"] @ dg_pre
        dh_pre = dh * (cache["h_pre"] > 0)
        grads["se1_w"] = np.outer(cache["s"], dh_pre)
        grads["se1_b"] = dh_pre
        ds = p["se1_w"] @ dh_pre
        dres += ds / t

        dq_pre = dq * q * (1.0 - q)
        grads["sse_w"] = res.T @ dq_pre
        grads["sse_b"] = np.array([dq_pre.sum()])
        dres += np.outer(dq_pre, p["sse_w"])

        da1, grads["res2_w"], grads["res2_b"] = conv1d_backward(
            dres, cache["xp2"], p["res2_w"])
        dr1 = da1 * (cache["r1"] > 0)
        da0, grads["res1_w"], grads["res1_b"] = conv1d_backward(
            dr1, cache["xp1"], p["res1_w"])
        da0 += dres  # shortcut branch
        dy0 = da0 * (cache["y0"] > 0)
        _, grads["conv_w"], grads["conv_b"] = conv1d_backward(
            dy0, cache["xp0"], p["conv_w"])

        return loss, grads


@dataclass
class TrainedModel:
    net: VbaNet
    config: VbaNetConfig
    history: list[float]
    best_epoch: int
    target_min: float = 0.0
    target_max: float = 1.0

    @property
    def parameters(self) -> np.ndarray:
        return self.net.flat()

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return self.net.layout()

    def predict(self, x: np.ndarray):
        """Class probabilities, or a score mapped back to original scale."""
        output, _, _ = self.net.forward(x)
        if self.config.head == "classify":
            return output
        return output * (self.target_max - self.target_min) + self.target_min

    def predict_class(self, x: np.ndarray) -> int:
        return int(np.argmax(self.predict(x)))

    def activation_map(self, x: np.ndarray) -> np.ndarray:
        return self.net.activation_map(x)


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def _adam_step(params, grads, m, v, t, lr):
    for name, g in grads.items():
        m[name] = ADAM_BETA1 * m[name] + (1 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v[name] + (1 - ADAM_BETA2) * g * g
        mhat = m[name] / (1 - ADAM_BETA1 ** t)
        vhat = v[name] / (1 - ADAM_BETA2 ** t)
        params[name] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def train(config: VbaNetConfig, trials) -> TrainedModel:
    """Batch-size-1 adaptive-moment training with best-epoch restore.

    `trials` is a list of (T x C matrix, target) pairs. Classification
    targets are class indices; regression scores are min-max scaled to
    [0,1] internally and mapped back at prediction time.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("empty training set")

    inputs = [np.asarray(x, dtype=np.float64) for x, _ in trials]
    raw_targets = [t for _, t in trials]

    if config.head == "classify":
        targets = [int(t) for t in raw_targets]
        if len(set(targets)) < 2:
            raise ValueError("need at least two classes to train a classifier")
        for t in targets:
            if not 0 <= t < config.n_classes:
                raise ValueError("class target out of range")
        t_min, t_max = 0.0, 1.0
    else:
        scores = np.array([float(t) for t in raw_targets])
        if not np.all(np.isfinite(scores)):
            raise ValueError("regression targets must be finite")
        t_min, t_max = float(scores.min()), float(scores.max())
        span = t_max - t_min
        targets = list((scores - t_min) / span) if span > 0 else [0.5] * len(scores)

    rng = np.random.default_rng(config.rng_seed)
    net = VbaNet(config, rng)
    m = {k: np.zeros_like(a) for k, a in net.params.items()}
    v = {k: np.zeros_like(a) for k, a in net.params.items()}
    step = 0

    stopper = EarlyStopper(config.patience)
    history: list[float] = []
    best_params = net.copy_params()
    n = len(trials)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for idx in order:
            loss, grads = net.loss_and_grads(inputs[idx], targets[idx])
            step += 1
            _adam_step(net.params, grads, m, v, step, config.learning_rate)
            epoch_loss += loss
        epoch_loss /= n
        history.append(epoch_loss)
        improved = epoch_loss < stopper.best_loss
        should_stop = stopper.update(epoch, epoch_loss)
        if improved:
            best_params = net.copy_params()
        if should_stop:
            break

    net.params = best_params
    return TrainedModel(net=net, config=config, history=history,
                        best_epoch=stopper.best_epoch,
                        target_min=t_min, target_max=t_max)


def grad_check(config: VbaNetConfig, x: np.ndarray, target,
               n_coords: int = 200, step: float = 1e-5,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference grads."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed + 1)
    net = VbaNet(config, rng)
    if net.n_params() > 10_000:
        raise ValueError("grad_check is for small configurations")
    # jitter every parameter so zero-initialized gate paths carry signal
    flat = net.flat() + rng.normal(0.0, 0.1, net.n_params())
    net.set_flat(flat)

    _, analytic = net.loss_and_grads(x, target)
    g_ad = np.concatenate([analytic[n].ravel() for n in net.param_names()])

    total = flat.size
    n_pick = min(n_coords, total)
    coords = rng.choice(total, size=n_pick, replace=False)

    worst = 0.0
    for c in coords:
        bumped = flat.copy()
        bumped[c] = flat[c] + step
        net.set_flat(bumped)
        loss_plus, _ = net.loss_and_grads(x, target)
        bumped[c] = flat[c] - step
        net.set_flat(bumped)
        loss_minus, _ = net.loss_and_grads(x, target)
        g_fd = (loss_plus - loss_minus) / (2 * step)
        denom = max(abs(g_ad[c]), abs(g_fd), 1e-8)
        worst = max(worst, abs(g_ad[c] - g_fd) / denom)
    net.set_flat(flat)
    return worst


# --- checkpointing ---------------------------------------------------------

CHECKPOINT_FORMAT = "skillfuse-model"
CHECKPOINT_VERSION = 1


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode("ascii")


def _decode_array(text: str, shape) -> np.ndarray:
    buf = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()


def save_model(model: TrainedModel, path: str) -> None:
    cfg = model.config
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "in_channels": cfg.in_channels,
            "conv_filters": cfg.conv_filters,
            "kernel": cfg.kernel,
            "se_reduction": cfg.se_reduction,
            "head": cfg.head,
            "n_classes": cfg.n_classes,
            "learning_rate": cfg.learning_rate,
            "max_epochs": cfg.max_epochs,
            "patience": cfg.patience,
            "rng_seed": cfg.rng_seed,
        },
        "layout": [[name, list(shape)] for name, shape in model.layout],
        "parameters": {name: _encode_array(arr)
                       for name, arr in model.net.params.items()},
        "history": model.history,
        "best_epoch": model.best_epoch,
        "target_min": model.target_min,
        "target_max": model.target_max,
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_model(path: str) -> TrainedModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = VbaNetConfig(**doc["config"])
    net = VbaNet(config)
    for name, shape in ((n, tuple(s)) for n, s in doc["layout"]):
        if name not in net.params or net.params[name].shape != shape:
            raise ValueError("checkpoint layout does not match configuration")
        net.params[name] = _decode_array(doc["parameters"][name], shape)
    return TrainedModel(net=net, config=config, history=list(doc["history"]),
                        best_epoch=int(doc["best_epoch"]),
                        target_min=float(doc["target_min"]),
                        target_max=float(doc["target_max"]))
