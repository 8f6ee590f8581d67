"""Qualitative output: per-frame side-by-side panels of the input image,
ground-truth map, thresholded prediction, and the occlusion mask."""

from __future__ import annotations

from pathlib import Path

import numpy as np

BACKGROUND = (25, 25, 25)
GAP = 4


def colorize_map(binary_map, classes, background=BACKGROUND):
    """(N_c, Z, X) binary map -> (Z, X, 3) uint8, later classes on top."""
    n_c, z, x = binary_map.shape
    img = np.empty((z, x, 3), dtype=np.uint8)
    img[:] = background
    for k in range(n_c):
        img[binary_map[k] >= 0.5] = classes[k].color
    return img


def _upscale(img, factor):
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _compose(panels):
    height = max(p.shape[0] for p in panels)
    widths = [p.shape[1] for p in panels]
    total = sum(widths) + GAP * (len(panels) - 1)
    canvas = np.full((height, total, 3), 255, dtype=np.uint8)
    x = 0
    for p in panels:
        y = (height - p.shape[0]) // 2
        canvas[y:y + p.shape[0], x:x + p.shape[1]] = p
        x += p.shape[1] + GAP
    return canvas


def render_frame(frame, probs, classes, threshold=0.5, map_scale=2):
    """Compose input | GT | prediction | occlusion overlay for one frame."""
    image = frame.image.transpose(1, 2, 0)
    gt_panel = _upscale(colorize_map(frame.gt, classes), map_scale)
    pred_panel = _upscale(colorize_map((probs >= threshold).astype(np.float32), classes), map_scale)
    occ = _upscale(colorize_map(frame.gt, classes), map_scale).astype(np.float32)
    occ_mask = _upscale((~frame.visibility)[..., None].astype(np.float32), map_scale)
    occ = (occ * (1.0 - 0.6 * occ_mask)).astype(np.uint8)
    return _compose([image, gt_panel, pred_panel, occ])


def render_maps(model, frames, classes, out_dir, threshold=0.5, map_scale=2):
    """Run the model over a sequence and write one panel PNG per frame."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bank = model.new_bank()
    paths = []
    for i, frame in enumerate(frames):
        probs = model.predict_probabilities(frame.image, frame.pose, bank, push=True)
        panel = render_frame(frame, probs, classes, threshold=threshold, map_scale=map_scale)
        path = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(panel).save(path)
        paths.append(path)
    return paths
