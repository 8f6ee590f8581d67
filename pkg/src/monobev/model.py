"""Full model: pyramid -> cycle view transform -> temporal fusion ->
top-down head -> per-class logits."""

from __future__ import annotations

import functools

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value
from .geometry import depth_partition
from .params import ParamStore, uniform_fan_in
from .temporal import MemoryBank, fuse_history
from .transformer import CycleViewTransformer, PyramidExtractor, conv3x3


@functools.lru_cache(maxsize=64)
def _upsample_coords(h, w):
    rows = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    cols = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    # Clamp the border half-cells so edge values replicate instead of
    # fading into zero padding.
    return np.stack([np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)])


def upsample2x(x):
    """Bilinear 2x upsample of a (C, H, W) grid (half-pixel centers)."""
    return ad.bilinear_sample(x, _upsample_coords(x.shape[1], x.shape[2]))


class TopDownHead:
    """Two residual bottleneck blocks around a 2x upsample, then 1x1
    per-class logits. Output cells are half the BEV feature cell size."""

    def __init__(self, store, c_t, hidden, n_c, rng):
        self.store = store
        self.c_t = c_t
        self.n_c = n_c
        for i in range(2):
            p = f"head.block{i}"
            store.add(f"{p}.reduce.w", uniform_fan_in(rng, (hidden, c_t), c_t))
            store.add(f"{p}.reduce.b", np.zeros(hidden))
            store.add(f"{p}.conv.w", uniform_fan_in(rng, (hidden, 9 * hidden), 9 * hidden))
            store.add(f"{p}.conv.b", np.zeros(hidden))
            store.add(f"{p}.expand.w", uniform_fan_in(rng, (c_t, hidden), hidden))
            store.add(f"{p}.expand.b", np.zeros(c_t))
        store.add("head.classify.w", uniform_fan_in(rng, (n_c, c_t), c_t))
        # Start predictions at low occupancy probability.
        store.add("head.classify.b", np.full(n_c, -2.0))

    def _block(self, x, i):
        p = f"head.block{i}"
        y = ad.relu(ad.conv1x1(x, self.store[f"{p}.reduce.w"]) +
                    ad.reshape(self.store[f"{p}.reduce.b"], (-1, 1, 1)))
        y = ad.relu(conv3x3(y, self.store[f"{p}.conv.w"], self.store[f"{p}.conv.b"]))
        y = ad.conv1x1(y, self.store[f"{p}.expand.w"]) + ad.reshape(self.store[f"{p}.expand.b"], (-1, 1, 1))
        return ad.relu(x + y)

    def __call__(self, b_temp):
        x = self._block(b_temp, 0)
        x = upsample2x(x)
        x = self._block(x, 1)
        return ad.conv1x1(x, self.store["head.classify.w"]) + ad.reshape(
            self.store["head.classify.b"], (self.n_c, 1, 1)
        )


class BevSegmenter:
    """End-to-end monocular BEV segmenter over the parameter store."""

    def __init__(self, cfg, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.cam = cfg.camera()
        self.bev = cfg.bev_spec()
        self.out = cfg.out_spec()
        self.level_specs = depth_partition(self.bev, self.cam, cfg.levels)
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(cfg.seed)
        self.pyramid = PyramidExtractor(self.store, cfg.c_t, [ls.level for ls in self.level_specs], rng)
        self.vt = CycleViewTransformer(self.store, cfg.c_t, cfg.heads, cfg.n_dec,
                                       self.level_specs, self.cam, self.bev, rng)
        c_in = (cfg.n_his + 1) * cfg.c_t
        # Plug-in init: identity on the reference block, zero on history
        # blocks, so fusion starts as a pass-through of the current frame
        # and learns what to take from history.
        phi0 = np.zeros((cfg.c_t, c_in))
        phi0[:, cfg.n_his * cfg.c_t:] = np.eye(cfg.c_t)
        self.phi_w = self.store.add("temporal.phi.w", phi0)
        self.phi_b = self.store.add("temporal.phi.b", np.zeros(cfg.c_t))
        self.head = TopDownHead(self.store, cfg.c_t, cfg.head_hidden, cfg.n_c, rng)

    def new_bank(self):
        return MemoryBank(self.cfg.n_his)

    def image_value(self, image):
        """uint8 or float (3, H, W) image -> normalized float Value."""
        arr = image.data if isinstance(image, Value) else np.asarray(image)
        if arr.shape != (3, self.cam.image_h, self.cam.image_w):
            raise ShapeError(f"image shape {arr.shape} != (3, {self.cam.image_h}, {self.cam.image_w})")
        if arr.dtype == np.uint8:
            arr = arr.astype(self.store.dtype) / 255.0 - 0.5
        return Value(arr.astype(self.store.dtype, copy=False))

    def calibrated_bev(self, image):
        """Image -> calibrated Cartesian BEV features (C_T, Z, X)."""
        return self.vt.transform(self.pyramid(self.image_value(image)))

    def calibrated_bev_batch(self, images):
        """Several frames at once; the view transformation batches them
        along the column axis (calibrated features do not depend on the
        memory bank, so grouping preserves streaming semantics)."""
        return self.vt.transform_batch([self.pyramid(self.image_value(im)) for im in images])

    def fuse_and_head(self, b_calib, pose, bank, push=True):
        """Temporal fusion against the bank, then the prediction head.
        Reads the bank before aggregation; pushes the new calibrated
        features afterwards."""
        b_temp = fuse_history(bank, b_calib, pose, self.bev, self.phi_w, self.phi_b, n_his=self.cfg.n_his)
        if push:
            bank.push(b_calib, pose)
        return self.head(b_temp)

    def forward_frame(self, image, pose, bank, push=True):
        """One frame through the full pipeline; returns per-class logits
        (N_c, 2Z, 2X)."""
        return self.fuse_and_head(self.calibrated_bev(image), pose, bank, push=push)

    def predict_probabilities(self, image, pose, bank, push=True):
        with ad.no_grad():
            return ad.sigmoid(self.forward_frame(image, pose, bank, push=push)).data
