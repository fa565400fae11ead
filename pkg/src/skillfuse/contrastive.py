"""Self-supervised contrastive feature extraction at desk scale.

Paired augmentations feed a small strided 2D conv backbone with a dense
projection head, trained by the normalized temperature-scaled
cross-entropy over a batch; the head is dropped after training and the
backbone embeds frames in temporal order for the motor-feature stream.
Gradients are hand-written, matching the rest of the package.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .nnet import EarlyStopper, _adam_step, relu

BLOB_MAGIC = b"SKFB"
BLOB_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}


@dataclass
class Frame:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")
        if self.pixels.shape[0] < 8 or self.pixels.shape[1] < 8:
            raise ValueError("frames must be at least 8 x 8")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class BackboneConfig:
    feature_dim: int = 32
    projection_dim: int = 128
    temperature: float = 0.5
    batch_size: int = 64
    epochs: int = 200
    patience: int = 10
    rng_seed: int = 0
    crop_size: int = 32
    conv_channels: tuple[int, int] = (16, 24)
    learning_rate: float = 1e-3
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.projection_dim < 2:
            raise ValueError("projection_dim must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.crop_size < 8:
            raise ValueError("crop_size must be >= 8")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


# --- augmentation ------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_grayscale(img: np.ndarray) -> np.ndarray:
    luma = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(luma[:, :, None], 3, axis=2)


def channel_normalize(img: np.ndarray) -> np.ndarray:
    mean = img.mean(axis=(0, 1))
    std = img.std(axis=(0, 1))
    return (img - mean) / (std + 1e-8)


def _one_view(pixels: np.ndarray, rng: np.random.Generator,
              crop_size: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    # random resized crop
    scale = rng.uniform(0.5, 1.0)
    log_ratio = rng.uniform(np.log(3.0 / 4.0), np.log(4.0 / 3.0))
    area = scale * h * w
    ratio = np.exp(log_ratio)
    crop_w = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    crop_h = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    view = bilinear_resize(pixels[top:top + crop_h, left:left + crop_w],
                           crop_size, crop_size)
    # photometric jitter
    view = np.clip(view * rng.uniform(0.6, 1.4), 0.0, 1.0)
    contrast = rng.uniform(0.6, 1.4)
    view = np.clip((view - view.mean()) * contrast + view.mean(), 0.0, 1.0)
    sigma = rng.uniform(0.1, 2.0)
    view = gaussian_filter(view, sigma=(sigma, sigma, 0.0))
    if rng.uniform() < 0.5:
        view = view[:, ::-1]
    if rng.uniform() < 0.2:
        view = to_grayscale(view)
    return channel_normalize(view)


def augment_pair(frame: Frame, rng: np.random.Generator,
                 crop_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented, channel-normalized views of a frame.

    Views are network-ready arrays (zero mean, unit variance per channel),
    so their values are not confined to [0, 1].
    """
    pixels = frame.pixels
    if pixels.shape[0] < crop_size or pixels.shape[1] < crop_size:
        raise ValueError("frame smaller than the crop target")
    return _one_view(pixels, rng, crop_size), _one_view(pixels, rng, crop_size)


# --- NT-Xent ------------------------------------------------------------------

def nt_xent_loss(embeddings: np.ndarray,
                 temperature: float) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. raw embeddings; pairs at rows (2i, 2i+1).

    Rows are L2-normalized internally; each anchor's positive is its pair
    partner and every other row in the batch is a negative.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2 or e.shape[0] % 2 != 0:
        raise ValueError("embeddings must be 2N x K with N >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("zero-norm embedding row")
    z = e / norms[:, None]
    two_n = e.shape[0]

    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)  # self-similarity excluded
    shifted = sim - sim.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)

    pos = np.arange(two_n) ^ 1  # partner of row a
    loss = float(-np.log(probs[np.arange(two_n), pos]).mean())

    grad_sim = probs.copy()
    grad_sim[np.arange(two_n), pos] -= 1.0
    grad_sim /= two_n
    dz = (grad_sim + grad_sim.T) @ z / temperature
    # through the row normalization: project out the radial component
    radial = (dz * z).sum(axis=1, keepdims=True)
    de = (dz - z * radial) / norms[:, None]
    return loss, de


# --- backbone -----------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 2, pad: int = 1):
    """x: H x W x Cin; w: F x Cin x kh x kw. Returns (out, cols_cache)."""
    h, wd, _ = x.shape
    f, c_in, kh, kw = w.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((h + 2 * pad, wd + 2 * pad, c_in))
    xp[pad:pad + h, pad:pad + wd] = x
    cols = np.empty((h_out * w_out, kh * kw * c_in))
    idx = 0
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[i * stride:i * stride + kh, j * stride:j * stride + kw]
            cols[idx] = patch.ravel()
            idx += 1
    w_mat = w.transpose(0, 2, 3, 1).reshape(f, -1)  # match (kh, kw, C) order
    out = (cols @ w_mat.T + b).reshape(h_out, w_out, f)
    return out, (cols, xp.shape, x.shape, stride, pad)


def conv2d_backward(dy: np.ndarray, cache, w: np.ndarray):
    cols, xp_shape, x_shape, stride, pad = cache
    f, c_in, kh, kw = w.shape
    h_out, w_out, _ = dy.shape
    dy_mat = dy.reshape(-1, f)
    w_mat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dw_mat = dy_mat.T @ cols
    dw = dw_mat.reshape(f, kh, kw, c_in).transpose(0, 3, 1, 2)
    db = dy_mat.sum(axis=0)
    dcols = dy_mat @ w_mat
    dxp = np.zeros(xp_shape)
    idx = 0
    for i in range(h_out):
        for j in range(w_out):
            dxp[i * stride:i * stride + kh, j * stride:j * stride + kw] += \
                dcols[idx].reshape(kh, kw, c_in)
            idx += 1
    h, wd, _ = x_shape
    return dxp[pad:pad + h, pad:pad + wd], dw, db


class ContrastiveBackbone:
    """Three strided conv layers + spatial mean pooling -> D features."""

    def __init__(self, config: BackboneConfig,
                 rng: np.random.Generator | None = None):
        self.config = config
        if rng is None:
            rng = np.random.default_rng(config.rng_seed)
        c1, c2 = config.conv_channels
        d = config.feature_dim

        def init(shape, fan):
            limit = 1.0 / np.sqrt(fan)
            return rng.uniform(-limit, limit, size=shape)

        self.params: dict[str, np.ndarray] = {
            "c1_w": init((c1, 3, 3, 3), 3 * 9), "c1_b": np.zeros(c1),
            "c2_w": init((c2, c1, 3, 3), c1 * 9), "c2_b": np.zeros(c2),
            "c3_w": init((d, c2, 3, 3), c2 * 9), "c3_b": np.zeros(d),
        }
        self.val_history: list[float] = []

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def features(self, img: np.ndarray, want_cache: bool = False):
        p = self.params
        y1, cache1 = conv2d_forward(img, p["c1_w"], p["c1_b"])
        a1 = relu(y1)
        y2, cache2 = conv2d_forward(a1, p["c2_w"], p["c2_b"])
        a2 = relu(y2)
        y3, cache3 = conv2d_forward(a2, p["c3_w"], p["c3_b"])
        a3 = relu(y3)
        feats = a3.mean(axis=(0, 1))
        if not want_cache:
            return feats
        return feats, (y1, cache1, y2, cache2, y3, cache3, a3.shape)

    def backward(self, dfeats: np.ndarray, cache) -> dict[str, np.ndarray]:
        p = self.params
        y1, cache1, y2, cache2, y3, cache3, a3_shape = cache
        spatial = a3_shape[0] * a3_shape[1]
        da3 = np.broadcast_to(dfeats / spatial, a3_shape).copy()
        dy3 = da3 * (y3 > 0)
        da2, dw3, db3 = conv2d_backward(dy3, cache3, p["c3_w"])
        dy2 = da2 * (y2 > 0)
        da1, dw2, db2 = conv2d_backward(dy2, cache2, p["c2_w"])
        dy1 = da1 * (y1 > 0)
        _, dw1, db1 = conv2d_backward(dy1, cache1, p["c1_w"])
        return {"c1_w": dw1, "c1_b": db1, "c2_w": dw2, "c2_b": db2,
                "c3_w": dw3, "c3_b": db3}


def _batch_loss_and_grads(backbone: ContrastiveBackbone, proj_w, proj_b,
                          views: list[np.ndarray], temperature: float):
    feats, caches = [], []
    for view in views:
        f, cache = backbone.features(view, want_cache=True)
        feats.append(f)
        caches.append(cache)
    feat_mat = np.stack(feats)
    embeddings = feat_mat @ proj_w + proj_b
    loss, de = nt_xent_loss(embeddings, temperature)

    grads = {name: np.zeros_like(arr) for name, arr in backbone.params.items()}
    dproj_w = feat_mat.T @ de
    dproj_b = de.sum(axis=0)
    dfeat = de @ proj_w.T
    for i, cache in enumerate(caches):
        for name, g in backbone.backward(dfeat[i], cache).items():
            grads[name] += g
    return loss, grads, dproj_w, dproj_b


def _pair_views(frames: list[Frame], rng: np.random.Generator,
                crop_size: int) -> list[np.ndarray]:
    views: list[np.ndarray] = []
    for frame in frames:
        a, b = augment_pair(frame, rng, crop_size)
        views.extend((a, b))
    return views


def train_contrastive(frames: list[Frame],
                      config: BackboneConfig) -> ContrastiveBackbone:
    """NT-Xent training with a held-out split for early stopping.

    The projection head lives only inside this function; the returned
    backbone carries `val_history` whose first entry is the held-out loss
    before any update.
    """
    if len(frames) < config.batch_size:
        raise ValueError("need at least batch_size frames")
    rng = np.random.default_rng(config.rng_seed)
    order = rng.permutation(len(frames))
    n_val = max(1, int(round(config.val_fraction * len(frames))))
    val_frames = [frames[i] for i in order[:n_val]]
    train_frames = [frames[i] for i in order[n_val:]]
    if len(train_frames) < 2:
        raise ValueError("too few frames left for training after the split")

    backbone = ContrastiveBackbone(config, rng)
    d, k = config.feature_dim, config.projection_dim
    proj_w = rng.uniform(-1, 1, size=(d, k)) / np.sqrt(d)
    proj_b = np.zeros(k)

    params = dict(backbone.params)
    params["proj_w"], params["proj_b"] = proj_w, proj_b
    m = {key: np.zeros_like(arr) for key, arr in params.items()}
    v = {key: np.zeros_like(arr) for key, arr in params.items()}
    step = 0

    def val_loss() -> float:
        val_rng = np.random.default_rng([config.rng_seed, 0xC0FFEE])
        views = _pair_views(val_frames, val_rng, config.crop_size)
        feats = np.stack([backbone.features(view) for view in views])
        embeddings = feats @ params["proj_w"] + params["proj_b"]
        loss, _ = nt_xent_loss(embeddings, config.temperature)
        return loss

    stopper = EarlyStopper(config.patience)
    backbone.val_history = [val_loss()]
    best = backbone.copy_params()
    best_proj = (params["proj_w"].copy(), params["proj_b"].copy())

    batch = min(config.batch_size, len(train_frames))
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_frames))
        for start in range(0, len(perm) - batch + 1, batch):
            chunk = [train_frames[i] for i in perm[start:start + batch]]
            views = _pair_views(chunk, rng, config.crop_size)
            loss, grads, dpw, dpb = _batch_loss_and_grads(
                backbone, params["proj_w"], params["proj_b"],
                views, config.temperature)
            grads["proj_w"], grads["proj_b"] = dpw, dpb
            step += 1
            _adam_step(params, grads, m, v, step, config.learning_rate)
            for name in backbone.params:
                backbone.params[name] = params[name]

        current = val_loss()
        backbone.val_history.append(current)
        improved = current < stopper.best_loss
        should_stop = stopper.update(epoch, current)
        if improved:
            best = backbone.copy_params()
            best_proj = (params["proj_w"].copy(), params["proj_b"].copy())
        if should_stop:
            break

    backbone.params = best
    del best_proj  # head is dropped on return
    return backbone


def extract_features(backbone: ContrastiveBackbone,
                     frames: list[Frame]) -> np.ndarray:
    """Row j = backbone features of frame j; no augmentation, pure."""
    rows = [backbone.features(channel_normalize(f.pixels)) for f in frames]
    return np.stack(rows) if rows else np.empty((0, backbone.config.feature_dim))


# --- frame ingestion ------------------------------------------------------------

def load_frames_from_dir(path: str) -> list[Frame]:
    """Image files in lexicographic order = temporal order."""
    from PIL import Image

    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    frames = []
    for name in names:
        with Image.open(os.path.join(path, name)) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        frames.append(Frame(pixels))
    return frames


def write_frames_blob(path: str, frames: list[Frame],
                      dtype=np.float64) -> None:
    codes = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
    code = codes[np.dtype(dtype)]
    stack = np.stack([f.pixels for f in frames]).astype(dtype)
    t, h, w, _ = stack.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<IIIII", BLOB_VERSION, t, h, w, code))
        fh.write(stack.tobytes())
    os.replace(tmp, path)


def read_frames_blob(path: str) -> list[Frame]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BLOB_MAGIC:
            raise ValueError("not a frame blob")
        version, t, h, w, code = struct.unpack("<IIIII", fh.read(20))
        if version != BLOB_VERSION:
            raise ValueError(f"unsupported blob version {version}")
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=_DTYPES[code])
    pixels = data.reshape(t, h, w, 3).astype(np.float64)
    return [Frame(pixels[i]) for i in range(t)]
