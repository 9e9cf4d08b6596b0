"""Proxy-image synthesizer: edge sketch, conditional generator, patch critic."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Adam, Conv2d, Module, Tensor, functional as F
from .autodiff import checkpoint
from .errors import DataError, NumericError, ShapeError
from .segmentor import UNet, label_intensities, one_hot

log = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0


@dataclass
class SynthConfig:
    gen_base: int = 8
    gen_depth: int = 3
    disc_base: int = 8
    disc_levels: int = 3
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0
    lr_gen: float = 1e-3
    lr_disc: float = 1e-4
    batch_size: int = 4

    def __post_init__(self):
        if self.lambda_rec <= 0:
            raise ValueError("lambda_rec must be > 0")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")


def sobel_magnitude(image):
    image = np.asarray(image, dtype=float)
    gx = ndimage.correlate(image, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(image, SOBEL_X.T, mode="nearest")
    return np.hypot(gx, gy), gx, gy


def _thin(mag, gx, gy):
    # keep pixels that are maximal along the dominant gradient axis; on a
    # two-pixel plateau only the first (lower-index) pixel survives
    padded = np.pad(mag, 1)
    left, right = padded[1:-1, :-2], padded[1:-1, 2:]
    up, down = padded[:-2, 1:-1], padded[2:, 1:-1]
    horizontal = np.abs(gx) >= np.abs(gy)
    keep_h = (mag >= left) & (mag > right)
    keep_v = (mag >= up) & (mag > down)
    return np.where(horizontal, keep_h, keep_v)


def extract_sketch(image, low_thresh=0.1, high_thresh=0.2):
    """Binary edge map: Sobel magnitude, axis-wise thinning, hysteresis thresholds.

    ``image`` is a [H,W] array (or a Tensor with trailing H,W) in [0,1].
    Magnitudes are scaled so a unit step scores 1.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    data = data.reshape(data.shape[-2:])
    mag, gx, gy = sobel_magnitude(data)
    candidates = _thin(mag, gx, gy) & (mag >= low_thresh)
    strong = candidates & (mag >= high_thresh)
    labels, n = ndimage.label(candidates, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(data.shape, dtype=np.float32)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.float32)


class Generator(Module):
    def __init__(self, config, rng):
        self.net = UNet(2, 1, config.gen_base, config.gen_depth, rng)

    def forward(self, heatmap, sketch):
        return synth_forward(self, heatmap, sketch)


class Discriminator(Module):
    """Conditional patch critic on concat(image, heatmap/255, sketch)."""

    def __init__(self, config, rng):
        widths = [config.disc_base * 2 ** i for i in range(config.disc_levels)]
        self.levels = config.disc_levels
        self.convs = [Conv2d(3 if i == 0 else widths[i - 1], w, 3, rng=rng) for i, w in enumerate(widths)]
        self.head = Conv2d(widths[-1], 1, 1, rng=rng, gain=1.0)

    def forward(self, image, heatmap, sketch):
        return disc_forward(self, image, heatmap, sketch)


class Synthesizer(Module):
    def __init__(self, config=None, seed=0):
        self.config = config or SynthConfig()
        rng = np.random.default_rng(seed)
        self.gen = Generator(self.config, rng)
        self.disc = Discriminator(self.config, rng)
        self.gen.assign_names("synth.gen")
        self.disc.assign_names("synth.disc")


def _image_tensor(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    return x


def _conditions(heatmap, sketch):
    heatmap, sketch = _image_tensor(heatmap), _image_tensor(sketch)
    if heatmap.shape != sketch.shape:
        raise ShapeError(f"heatmap {heatmap.shape} and sketch {sketch.shape} differ")
    # the sketch is data, never a gradient path
    sketch = Tensor(sketch.data)
    return F.concat([heatmap * (1.0 / 255.0), sketch], axis=1)


def synth_forward(gen, heatmap, sketch):
    """Heatmap [1,1,H,W] in [0,255] plus binary sketch -> proxy image in (0,1)."""
    return F.sigmoid(gen.net(_conditions(heatmap, sketch)))


def disc_forward(disc, image, heatmap, sketch):
    x = F.concat([_image_tensor(image), _conditions(heatmap, sketch)], axis=1)
    if x.shape[-2] % 2 ** disc.levels or x.shape[-1] % 2 ** disc.levels:
        raise ShapeError(f"extents {x.shape[-2:]} not divisible by {2 ** disc.levels}")
    for conv in disc.convs:
        x = F.max_pool2x(F.leaky_relu(conv(x), 0.2))
    return disc.head(x)


def label_heatmap(label, k):
    """Intensity-coded ground-truth mask, i.e. the heatmap of a one-hot probability map."""
    return (one_hot(label, k) * label_intensities(k).reshape(-1, 1, 1)).sum(axis=-3)


def prepare_samples(samples, k, sketch_thresholds=(0.1, 0.2)):
    """Stack (image, label) pairs into image/heatmap/sketch arrays of shape [N,1,H,W]."""
    images = np.stack([np.asarray(s[0], dtype=float) for s in samples])
    heat = np.stack([label_heatmap(s[1], k) for s in samples])
    sketches = np.stack([extract_sketch(im, *sketch_thresholds) for im in images])
    return images[:, None], heat[:, None], sketches[:, None]


def reconstruction_mae(synth, images, heat, sketches):
    errors = []
    for i in range(len(images)):
        proxy = synth_forward(synth.gen, Tensor(heat[i:i + 1]), Tensor(sketches[i:i + 1]))
        errors.append(np.abs(proxy.data - images[i:i + 1]).mean())
    return float(np.mean(errors)) if errors else float("nan")


def _lsgan(pred, target):
    return F.mean((pred - target) ** 2) * 0.5


def train_synthesizer(config, train, val, k, epochs=100, seed=0, out_dir=None, synth=None, start_epoch=0,
                      initial_best=None):
    """Alternating LSGAN training on ground-truth heatmaps; keeps the best-val-MAE weights.

    Writes ``synth.ckpt`` (best), ``synth_last.ckpt`` and ``synth_train.csv`` to ``out_dir``.
    Returns ``(synth, history)``.
    """
    if not train:
        raise DataError("training set is empty")
    config = config or SynthConfig()
    synth = synth or Synthesizer(config, seed=seed)
    rng = np.random.default_rng(seed + 7)
    opt_g = Adam(synth.gen.parameters(), lr=config.lr_gen, betas=(0.5, 0.999))
    opt_d = Adam(synth.disc.parameters(), lr=config.lr_disc, betas=(0.5, 0.999))
    images, heat, sketches = prepare_samples(train, k)
    v_images, v_heat, v_sketches = prepare_samples(val, k) if val else (None, None, None)

    def val_mae():
        return reconstruction_mae(synth, v_images, v_heat, v_sketches) if val else float("nan")

    history = []
    best = (val_mae(), synth.state_dict())
    if initial_best is not None and not initial_best[0] > best[0]:
        best = initial_best
    if epochs == 0:
        history.append(dict(epoch=start_epoch, g_loss=float("nan"), d_loss=float("nan"), val_mae=best[0]))
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        g_losses, d_losses = [], []
        order = rng.permutation(len(images))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            real, h, s = Tensor(images[idx]), Tensor(heat[idx]), Tensor(sketches[idx])

            fake = synth_forward(synth.gen, h, s)
            g_loss = F.mean(F.absolute(fake - real)) * config.lambda_rec
            if config.lambda_adv > 0:
                g_loss = g_loss + _lsgan(disc_forward(synth.disc, fake, h, s), 1.0) * config.lambda_adv
            opt_g.zero_grad()
            synth.disc.zero_grads()
            g_loss.backward()
            opt_g.step()

            d_loss = Tensor(0.0)
            if config.lambda_adv > 0:
                fake_d = Tensor(fake.data)
                d_loss = _lsgan(disc_forward(synth.disc, real, h, s), 1.0) + _lsgan(disc_forward(synth.disc, fake_d, h, s), 0.0)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            if not (np.isfinite(g_loss.item()) and np.isfinite(d_loss.item())):
                raise NumericError(f"synthesizer training diverged at epoch {epoch}")
            g_losses.append(g_loss.item())
            d_losses.append(d_loss.item())
        mae = val_mae()
        history.append(dict(epoch=epoch, g_loss=float(np.mean(g_losses)), d_loss=float(np.mean(d_losses)), val_mae=mae))
        log.info("synth epoch %d g %.4f d %.4f val mae %.4f", epoch, np.mean(g_losses), np.mean(d_losses), mae)
        if mae < best[0] or np.isnan(best[0]):
            best = (mae, synth.state_dict())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint.save(os.path.join(out_dir, "synth_last.ckpt"), synth.state_dict())
    if val:
        synth.load_state_dict(best[1])
    if out_dir is not None:
        checkpoint.save(os.path.join(out_dir, "synth.ckpt"), synth.state_dict())
        write_training_log(os.path.join(out_dir, "synth_train.csv"), history, append=start_epoch > 0)
    return synth, history


def write_training_log(path, history, append=False):
    new = not (append and os.path.exists(path))
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "g_loss", "d_loss", "val_mae"])
        for row in history:
            w.writerow([row["epoch"], f"{row['g_loss']:.6f}", f"{row['d_loss']:.6f}", f"{row['val_mae']:.6f}"])


def load_synthesizer(path, config=None):
    synth = Synthesizer(config)
    synth.load_state_dict(checkpoint.load(path))
    return synth
