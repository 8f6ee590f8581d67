"""Column-wise cross-attention view transformation.

A perspective feature column and the polar BEV ray it projects to form a
matched sequence pair, so attention runs strictly within columns. The
calibration cycle runs three decoder passes per pyramid level:

    P      = pv2bev(E_bev,  F)          initial polar features
    F_cal  = bev2pv(E_pv,   P)          BEV-focused perspective features
    P_cal  = pv2bev(E_bev2, F_cal) + P  second pass, same pv2bev weights

The second perspective-to-BEV pass reuses the first pass's decoder
parameters (identical objects) but a distinct query embedding, and adds
the initial polar features as a residual.

Also hosts the small strided convolutional pyramid that supplies
per-level perspective features.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .geometry import concat_depth, polar_to_cartesian
from .params import normal_embed, uniform_fan_in


def collapse_columns(grid):
    """(C, L, W) grid -> per-column sequences (W, L, C)."""
    return ad.transpose(grid, (2, 1, 0))


def expand_columns(cols):
    """(W, L, C) per-column sequences -> (C, L, W) grid."""
    return ad.transpose(cols, (2, 1, 0))


def conv3x3(x, w, b=None, stride=1):
    """3x3 convolution with zero padding 1, built from pad/slice/concat/1x1.

    `w` is (C_out, 9*C_in) with taps ordered row-major over the 3x3 window,
    each tap spanning C_in consecutive input channels.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv3x3: input must be (C,H,W), got {x.shape}")
    h, w_in = x.shape[1], x.shape[2]
    ho = (h - 1) // stride + 1
    wo = (w_in - 1) // stride + 1
    xp = ad.pad2d(x, 1)
    patches = []
    for dy in range(3):
        for dx in range(3):
            patches.append(xp[:, dy:dy + (ho - 1) * stride + 1:stride, dx:dx + (wo - 1) * stride + 1:stride])
    stacked = ad.concat(patches, axis=0)
    out = ad.conv1x1(stacked, w)
    if b is not None:
        out = out + ad.reshape(b, (b.shape[0], 1, 1))
    return out


class PyramidExtractor:
    """Strided conv pyramid producing C_T-channel features at 1/2^(i+2).

    Stand-in for a pretrained backbone and FPN; any extractor meeting the
    per-level shape contract would do. Level i comes off the trunk after
    i+2 stride-2 blocks, through a per-level 1x1 projection.
    """

    def __init__(self, store, c_t, levels, rng, in_channels=3):
        self.c_t = c_t
        self.levels = sorted(levels)
        self.max_d = 2 ** (self.levels[-1] + 2)
        self.n_stages = self.levels[-1] + 2
        self.store = store
        for s in range(self.n_stages):
            cin = in_channels if s == 0 else c_t
            store.add(f"pyramid.stage{s}.w", uniform_fan_in(rng, (c_t, 9 * cin), 9 * cin))
            store.add(f"pyramid.stage{s}.b", np.zeros(c_t))
        for lvl in self.levels:
            store.add(f"pyramid.head{lvl}.w", uniform_fan_in(rng, (c_t, c_t), c_t))
            store.add(f"pyramid.head{lvl}.b", np.zeros(c_t))

    def __call__(self, image):
        """image (3, H, W) -> {level: (C_T, H/d, W/d)}."""
        if image.ndim != 3:
            raise ShapeError(f"pyramid: image must be (3,H,W), got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % self.max_d or w % self.max_d:
            raise ShapeError(f"pyramid: image size {h}x{w} not divisible by max downsample {self.max_d}")
        feats = {}
        x = image
        for s in range(self.n_stages):
            x = ad.relu(conv3x3(x, self.store[f"pyramid.stage{s}.w"], self.store[f"pyramid.stage{s}.b"], stride=2))
            lvl = s - 1  # after s+1 stride-2 blocks the scale is 2^(s+1) = 2^(lvl+2)
            if lvl in self.levels:
                feats[lvl] = ad.conv1x1(x, self.store[f"pyramid.head{lvl}.w"]) + ad.reshape(
                    self.store[f"pyramid.head{lvl}.b"], (self.c_t, 1, 1)
                )
        return feats


class ColumnDecoder:
    """Stack of column-wise cross-attention layers (or a 2-layer MLP when
    the stack depth is zero).

    Queries come from a grid-shaped embedding collapsed per column; keys
    and values from the feature grid's columns. Values carry no positional
    term. Residuals follow the post-norm order: normalize(MHCA + Q), then
    normalize(MLP + x). Positional encodings are shared across layers.
    """

    def __init__(self, store, prefix, c_t, heads, n_dec, len_q, len_k, rng):
        if n_dec > 0 and c_t % heads:
            raise ValueError(f"{prefix}: hidden size {c_t} not divisible by {heads} heads")
        self.prefix = prefix
        self.c_t = c_t
        self.heads = heads
        self.n_dec = n_dec
        self.len_q = len_q
        self.len_k = len_k
        self.store = store
        self.last_attention = []

        if n_dec == 0:
            hidden = c_t * max(len_q, len_k)
            store.add(f"{prefix}.mlp0.w1", uniform_fan_in(rng, (len_k * c_t, hidden), len_k * c_t))
            store.add(f"{prefix}.mlp0.b1", np.zeros(hidden))
            store.add(f"{prefix}.mlp0.w2", uniform_fan_in(rng, (hidden, len_q * c_t), hidden))
            store.add(f"{prefix}.mlp0.b2", np.zeros(len_q * c_t))
            return

        store.add(f"{prefix}.pe_q", normal_embed(rng, (len_q, c_t)))
        store.add(f"{prefix}.pe_k", normal_embed(rng, (len_k, c_t)))
        for l in range(n_dec):
            p = f"{prefix}.layer{l}"
            for name in ("w_q", "w_k", "w_v", "w_o"):
                store.add(f"{p}.{name}", uniform_fan_in(rng, (c_t, c_t), c_t))
            store.add(f"{p}.ln1_g", np.ones(c_t))
            store.add(f"{p}.ln1_b", np.zeros(c_t))
            store.add(f"{p}.ln2_g", np.ones(c_t))
            store.add(f"{p}.ln2_b", np.zeros(c_t))
            store.add(f"{p}.mlp_w1", uniform_fan_in(rng, (c_t, 2 * c_t), c_t))
            store.add(f"{p}.mlp_b1", np.zeros(2 * c_t))
            store.add(f"{p}.mlp_w2", uniform_fan_in(rng, (2 * c_t, c_t), 2 * c_t))
            store.add(f"{p}.mlp_b2", np.zeros(c_t))

    def _check(self, query_grid, feature_grid):
        if query_grid.ndim != 3 or feature_grid.ndim != 3:
            raise ShapeError(f"{self.prefix}: grids must be 3-d, got {query_grid.shape}, {feature_grid.shape}")
        if query_grid.shape[0] != self.c_t or feature_grid.shape[0] != self.c_t:
            raise ShapeError(
                f"{self.prefix}: channel mismatch, query {query_grid.shape}, features {feature_grid.shape}, "
                f"expected {self.c_t} channels"
            )
        if query_grid.shape[2] != feature_grid.shape[2]:
            raise ShapeError(
                f"{self.prefix}: width mismatch, query {query_grid.shape} vs features {feature_grid.shape}"
            )
        if query_grid.shape[1] != self.len_q or feature_grid.shape[1] != self.len_k:
            raise ShapeError(
                f"{self.prefix}: sequence lengths {query_grid.shape[1]}/{feature_grid.shape[1]} "
                f"do not match configured {self.len_q}/{self.len_k}"
            )

    def build_qkv(self, query_grid, feature_grid, layer=0):
        """First-stage projections for one layer: Q with query positional
        encoding, K with key positional encoding, V bare."""
        self._check(query_grid, feature_grid)
        q_cols = collapse_columns(query_grid)
        f_cols = collapse_columns(feature_grid)
        return self._project_qkv(q_cols, f_cols, layer)

    def _project_qkv(self, q_cols, f_cols, layer):
        p = f"{self.prefix}.layer{layer}"
        q = ad.matmul(q_cols + self.store[f"{self.prefix}.pe_q"], self.store[f"{p}.w_q"])
        k = ad.matmul(f_cols + self.store[f"{self.prefix}.pe_k"], self.store[f"{p}.w_k"])
        v = ad.matmul(f_cols, self.store[f"{p}.w_v"])
        return q, k, v

    def _mhca(self, q, k, v, layer):
        w_cols, lq, c = q.shape
        lk = k.shape[1]
        d = c // self.heads
        qh = ad.transpose(ad.reshape(q, (w_cols, lq, self.heads, d)), (0, 2, 1, 3))
        kt = ad.transpose(ad.reshape(k, (w_cols, lk, self.heads, d)), (0, 2, 3, 1))
        vh = ad.transpose(ad.reshape(v, (w_cols, lk, self.heads, d)), (0, 2, 1, 3))
        attn = ad.softmax(ad.scale(ad.matmul(qh, kt), 1.0 / np.sqrt(d)), axis=-1)
        self.last_attention.append(attn.data)
        ctx = ad.matmul(attn, vh)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (w_cols, lq, c))
        return ad.matmul(merged, self.store[f"{self.prefix}.layer{layer}.w_o"])

    def __call__(self, query_grid, feature_grid):
        self._check(query_grid, feature_grid)
        self.last_attention = []
        f_cols = collapse_columns(feature_grid)
        w_cols = feature_grid.shape[2]

        if self.n_dec == 0:
            p = f"{self.prefix}.mlp0"
            flat = ad.reshape(f_cols, (w_cols, self.len_k * self.c_t))
            h = ad.relu(ad.matmul(flat, self.store[f"{p}.w1"]) + self.store[f"{p}.b1"])
            out = ad.matmul(h, self.store[f"{p}.w2"]) + self.store[f"{p}.b2"]
            return expand_columns(ad.reshape(out, (w_cols, self.len_q, self.c_t)))

        x = collapse_columns(query_grid)
        for l in range(self.n_dec):
            p = f"{self.prefix}.layer{l}"
            q, k, v = self._project_qkv(x, f_cols, l)
            attn_out = self._mhca(q, k, v, l)
            e = ad.layer_norm(attn_out + q, axis=-1) * self.store[f"{p}.ln1_g"] + self.store[f"{p}.ln1_b"]
            m = ad.matmul(ad.relu(ad.matmul(e, self.store[f"{p}.mlp_w1"]) + self.store[f"{p}.mlp_b1"]),
                          self.store[f"{p}.mlp_w2"]) + self.store[f"{p}.mlp_b2"]
            x = ad.layer_norm(m + e, axis=-1) * self.store[f"{p}.ln2_g"] + self.store[f"{p}.ln2_b"]
        return expand_columns(x)


class CycleViewTransformer:
    """Per-level decoder pairs plus learnable query embeddings, and the
    polar-to-Cartesian assembly of the calibrated BEV feature grid."""

    def __init__(self, store, c_t, heads, n_dec, level_specs, cam, bev, rng):
        self.store = store
        self.c_t = c_t
        self.cam = cam
        self.bev = bev
        self.level_specs = {ls.level: ls for ls in level_specs}
        self.ordered_levels = [ls.level for ls in level_specs]
        self.pv2bev = {}
        self.bev2pv = {}
        for ls in level_specs:
            h_i = cam.image_h // ls.d
            w_i = cam.image_w // ls.d
            z_i = ls.depth_rows
            if h_i < 1 or w_i < 1:
                raise ShapeError(f"level {ls.level}: image {cam.image_h}x{cam.image_w} too small for d={ls.d}")
            lp = f"level{ls.level}"
            store.add(f"{lp}.embed_bev", normal_embed(rng, (c_t, z_i, w_i)))
            store.add(f"{lp}.embed_bev_cal", normal_embed(rng, (c_t, z_i, w_i)))
            store.add(f"{lp}.embed_pv", normal_embed(rng, (c_t, h_i, w_i)))
            self.pv2bev[ls.level] = ColumnDecoder(store, f"{lp}.pv2bev", c_t, heads, n_dec, z_i, h_i, rng)
            self.bev2pv[ls.level] = ColumnDecoder(store, f"{lp}.bev2pv", c_t, heads, n_dec, h_i, z_i, rng)

    def _embed(self, level, role, width):
        """Level embedding, tiled along columns when the feature grid
        carries several frames side by side (column-wise attention makes
        width a pure batch axis)."""
        e = self.store[f"level{level}.{role}"]
        nat = e.shape[2]
        if width == nat:
            return e
        if width % nat:
            raise ShapeError(f"level {level}: feature width {width} is not a multiple of {nat}")
        return ad.concat([e] * (width // nat), axis=2)

    def pv_to_bev_initial(self, level, feats):
        return self.pv2bev[level](self._embed(level, "embed_bev", feats.shape[2]), feats)

    def bev_to_pv(self, level, polar):
        return self.bev2pv[level](self._embed(level, "embed_pv", polar.shape[2]), polar)

    def pv_to_bev_calibrated(self, level, feats_cal):
        """Second perspective-to-BEV pass: same decoder weights as the
        initial pass, distinct query embedding."""
        return self.pv2bev[level](self._embed(level, "embed_bev_cal", feats_cal.shape[2]), feats_cal)

    def cycle_calibrate(self, level, feats):
        p_init = self.pv_to_bev_initial(level, feats)
        f_cal = self.bev_to_pv(level, p_init)
        return self.pv_to_bev_calibrated(level, f_cal) + p_init

    def transform(self, pyramid):
        """Full view transformation: cycle-calibrate each level, resample
        each polar band to Cartesian, stack along depth (far to near)."""
        return self.transform_batch([pyramid])[0]

    def transform_batch(self, pyramids):
        """Batched view transformation for several frames.

        Per-level features are concatenated along the column axis, run
        through the calibration cycle in one pass (columns are
        independent), then split back per frame for the Cartesian
        resampling."""
        bands = [[] for _ in pyramids]
        specs = []
        for lvl in self.ordered_levels:
            ls = self.level_specs[lvl]
            feats = []
            for pyramid in pyramids:
                if lvl not in pyramid:
                    raise ShapeError(f"pyramid is missing level {lvl}")
                feats.append(pyramid[lvl])
            stacked = feats[0] if len(feats) == 1 else ad.concat(feats, axis=2)
            p_cal = self.cycle_calibrate(lvl, stacked)
            w_nat = feats[0].shape[2]
            for b in range(len(pyramids)):
                piece = p_cal if len(feats) == 1 else p_cal[:, :, b * w_nat:(b + 1) * w_nat]
                bands[b].append(polar_to_cartesian(piece, self.cam, ls.d, self.bev, ls))
            specs.append(ls)
        return [concat_depth(per_frame, specs, self.bev) for per_frame in bands]
