"""Finite-difference verification suites.

Every differentiation rule in the engine plus the composite gradients the
pipeline depends on (objective through the logits, the calibration cycle
through an attention matrix per decoder, temporal aggregation through the
mixing convolution), all run in float64 at generic parameter points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Value, grad_check
from .config import ExperimentConfig
from .geometry import BevGridSpec, CameraModel, depth_partition, polar_to_cartesian
from .losses import iou_loss_oa, total_loss
from .model import BevSegmenter
from .temporal import aggregate


@dataclass
class GradCase:
    name: str
    module: str
    build: object  # () -> (f, params)


def _fixed_weight(shape, seed):
    """A frozen random weighting so sum(w * out) is a generic scalar target."""
    return Value(np.random.default_rng(seed).normal(size=shape))


def _weighted_sum(v, w):
    return ad.reduce_sum(ad.mul(v, w))


def _case(name, module, op, shapes, seed=0, positive=False):
    def build():
        rng = np.random.default_rng(seed)
        params = []
        args = []
        for i, shape in enumerate(shapes):
            data = rng.normal(size=shape)
            if positive:
                data = np.abs(data) + 0.5
            p = Value(data, requires_grad=True)
            params.append((f"x{i}", p))
            args.append(p)
        w = _fixed_weight(op(*args).shape, seed + 1)
        return (lambda: _weighted_sum(op(*args), w)), params

    return GradCase(name, module, build)


def engine_cases():
    cases = [
        _case("matmul", "autodiff", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
        _case("add", "autodiff", lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
        _case("mul", "autodiff", lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
        _case("div", "autodiff", lambda a, b: ad.div(a, b), [(3, 4), (3, 4)], positive=True),
        _case("scale", "autodiff", lambda a: ad.scale(a, -1.7), [(5,)]),
        _case("softmax", "autodiff", lambda a: ad.softmax(a, axis=-1), [(3, 6)]),
        _case("layer_norm", "autodiff", lambda a: ad.layer_norm(a, axis=-1), [(4, 8)]),
        _case("relu", "autodiff", ad.relu, [(4, 4)]),
        _case("sigmoid", "autodiff", ad.sigmoid, [(9,)]),
        _case("log", "autodiff", ad.log, [(6,)], positive=True),
        _case("clip", "autodiff", lambda a: ad.clip(a, -0.6, 0.6), [(10,)]),
        _case("concat", "autodiff", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 4)]),
        _case("reshape", "autodiff", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
        _case("transpose", "autodiff", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        _case("slice", "autodiff", lambda a: a[1:, ::2], [(4, 6)]),
        _case("sum", "autodiff", lambda a: ad.reduce_sum(ad.mul(a, a), axis=1), [(3, 5)]),
        _case("mean", "autodiff", lambda a: ad.reduce_mean(ad.mul(a, a), axis=0), [(3, 5)]),
        _case("pad2d", "autodiff", lambda a: ad.pad2d(a, 1), [(2, 3, 3)]),
        _case("conv1x1", "autodiff", ad.conv1x1, [(3, 4, 5), (2, 3)]),
        _case("embedding_lookup", "autodiff",
              lambda t: ad.embedding_lookup(t, np.array([0, 2, 2, 1])), [(4, 3)]),
    ]

    def build_bilinear():
        rng = np.random.default_rng(5)
        grid = Value(rng.normal(size=(2, 4, 5)), requires_grad=True)
        coords = np.stack([rng.uniform(-0.5, 3.5, size=(3, 3)), rng.uniform(-0.5, 4.5, size=(3, 3))])
        w = _fixed_weight((2, 3, 3), 6)
        return (lambda: _weighted_sum(ad.bilinear_sample(grid, coords), w)), [("grid", grid)]

    cases.append(GradCase("bilinear_sample", "autodiff", build_bilinear))
    return cases


def losses_cases():
    def build_total():
        rng = np.random.default_rng(11)
        logits = Value(rng.normal(size=(2, 4, 4)), requires_grad=True)
        y = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
        vis = rng.random((4, 4)) > 0.4
        return (lambda: total_loss(ad.sigmoid(logits), y, vis)), [("logits", logits)]

    def build_iou():
        rng = np.random.default_rng(12)
        w = Value(rng.normal(size=(1, 2, 2)), requires_grad=True)
        y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        return (lambda: iou_loss_oa(ad.sigmoid(w), y)), [("w", w)]

    return [
        GradCase("total_loss_wrt_logits", "losses", build_total),
        GradCase("iou_loss_oa_wrt_logits", "losses", build_iou),
    ]


def geometry_cases():
    def build():
        cam = CameraModel(f=40.0, u0=12.0, image_h=24, image_w=24)
        spec = BevGridSpec(Z=6, X=5, cell_m=0.5, z_min=1.0)
        ls = depth_partition(spec, cam, 2)[0]
        rng = np.random.default_rng(13)
        p = Value(rng.normal(size=(2, ls.depth_rows, 3)), requires_grad=True)
        w = _fixed_weight((2, ls.depth_rows, spec.X), 14)
        return (lambda: _weighted_sum(polar_to_cartesian(p, cam, ls.d, spec, ls), w)), [("polar", p)]

    return [GradCase("polar_to_cartesian_wrt_polar", "geometry", build)]


def tiny_config(**overrides):
    cfg = ExperimentConfig(
        image_h=32, image_w=32, c_t=8, levels=2, n_dec=2, heads=2, n_his=2,
        head_hidden=4, bev_z=6, bev_x=6, bev_cell_m=0.5, bev_z_min=1.0, n_c=2,
        cam_f=50.0, cam_u0=16.0, batch_size=2, total_steps=10, warmup_steps=2,
        n_sequences=1, seq_len=4,
    )
    return replace(cfg, **overrides).validate()


def _tiny_model64(seed=0):
    model = BevSegmenter(tiny_config(), dtype=np.float64)
    # Generic parameter point: the symmetric init (unit layer-norm gains)
    # makes plain feature sums analytically constant.
    jitter = np.random.default_rng(100 + seed)
    for _, p in model.store.items():
        p.data = p.data + jitter.normal(0.0, 0.05, size=p.data.shape)
    return model


def transformer_cases():
    def build_pyramid():
        from .params import ParamStore
        from .transformer import PyramidExtractor

        store = ParamStore(dtype=np.float64)
        pyr = PyramidExtractor(store, 4, [1], np.random.default_rng(3))
        img = Value(np.random.default_rng(4).normal(size=(3, 8, 8)))
        w = _fixed_weight((4, 1, 1), 5)
        return (lambda: _weighted_sum(pyr(img)[1], w)), [
            ("stage0.w", store["pyramid.stage0.w"]),
            ("stage0.b", store["pyramid.stage0.b"]),
        ]

    def build_cycle(which):
        def inner():
            model = _tiny_model64()
            img = Value(np.random.default_rng(7).normal(size=(3, 32, 32)))

            def f():
                return ad.reduce_sum(model.calibrated_bev(img))

            name = f"level1.{which}.layer0.w_q"
            return f, [(name, model.store[name])]

        return inner

    return [
        GradCase("pyramid_first_stage", "transformer", build_pyramid),
        GradCase("cycle_transform_wrt_pv2bev_attention", "transformer", build_cycle("pv2bev")),
        GradCase("cycle_transform_wrt_bev2pv_attention", "transformer", build_cycle("bev2pv")),
    ]


def temporal_cases():
    def build_phi():
        rng = np.random.default_rng(21)
        aligned = [Value(rng.normal(size=(2, 4, 3))) for _ in range(2)]
        b = Value(rng.normal(size=(2, 4, 3)))
        phi = Value(rng.normal(size=(2, 6)), requires_grad=True)
        phi_b = Value(rng.normal(size=2), requires_grad=True)
        w = _fixed_weight((2, 4, 3), 22)

        def f():
            return _weighted_sum(aggregate(aligned, b, phi, phi_b, n_his=2), w)

        return f, [("phi.w", phi), ("phi.b", phi_b)]

    def build_align():
        from .temporal import MotionDelta, align_history

        rng = np.random.default_rng(23)
        spec = BevGridSpec(Z=5, X=5, cell_m=0.5, z_min=1.0)
        grid = Value(rng.normal(size=(2, 5, 5)), requires_grad=True)
        delta = MotionDelta(0.3, (0.2, -0.4))
        w = _fixed_weight((2, 5, 5), 24)
        return (lambda: _weighted_sum(align_history(grid, delta, True, grid, spec), w)), [("grid", grid)]

    return [
        GradCase("aggregate_wrt_phi", "temporal", build_phi),
        GradCase("align_history_wrt_features", "temporal", build_align),
    ]


def all_cases():
    return engine_cases() + losses_cases() + geometry_cases() + transformer_cases() + temporal_cases()


def run_gradcheck(module=None, step=1e-5, tolerance=1e-4, out=None):
    """Run the suites (optionally one module); returns (ok, elapsed)."""
    emit = out or (lambda s: None)
    cases = [c for c in all_cases() if module is None or c.module == module]
    if not cases:
        raise ValueError(f"no gradcheck cases for module {module!r}")
    start = time.time()
    ok = True
    for case in cases:
        f, params = case.build()
        report = grad_check(f, params, step=step, tolerance=tolerance)
        worst = max((e.max_rel_err for e in report.entries), default=0.0)
        status = "ok" if report.ok else "FAIL"
        emit(f"[{status}] {case.module}/{case.name}: max rel err {worst:.3e}")
        ok &= report.ok
    elapsed = time.time() - start
    emit(f"gradcheck: {'PASS' if ok else 'FAIL'} ({len(cases)} checks in {elapsed:.1f}s)")
    return ok, elapsed
