"""Training harness: dataset assembly, the decoupled-weight-decay moment
optimizer, the warm-up/linear-decay schedule, checkpointing with exact
resume, evaluation, and the two toy ablation axes.

Training streams frames through one persistent memory bank owned by the
loop: each step processes the next `batch_size` frames in dataset order,
pushing every frame's calibrated BEV features (detached) after use. On a
sequence boundary the scene id changes and the alignment fallback
replaces stale history with the reference features, so the bank never
needs flushing.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import pack_text, read_arrays, unpack_text, write_arrays
from .config import format_config, parse_config
from .losses import ConfusionAccumulator, LossWeights, MetricReport, class_weights_from_frequency, loss_breakdown
from .model import BevSegmenter
from .temporal import EgoPose
from .world import WorldConfig, generate_sequence, load_dataset


class TrainingDiverged(RuntimeError):
    def __init__(self, step, component, value):
        super().__init__(f"non-finite loss at step {step}: component {component!r} = {value}")
        self.step = step
        self.component = component


def lr_at(step, base, warmup, total):
    """Step k (1-based): (k/warmup)*base through warm-up, then linear
    decay to exactly 0 at the final step."""
    if step <= warmup:
        return base * step / max(warmup, 1)
    if total <= warmup:
        return base
    return base * (total - step) / (total - warmup)


class MomentOptimizer:
    """Gradient descent with first/second moment accumulation and
    decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr, grad_scale=1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = (p.grad * grad_scale if p.grad is not None else np.zeros_like(p.data)).astype(p.data.dtype)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - p.data.dtype.type(lr) * (update + self.weight_decay * p.data)

    def state_arrays(self):
        items = [("opt.t", np.array(self.t, dtype=np.int64))]
        for name, _ in self.params:
            items.append((f"opt.m.{name}", self.m[name]))
            items.append((f"opt.v.{name}", self.v[name]))
        return items

    def load_state(self, arrays):
        self.t = int(arrays["opt.t"])
        for name, p in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(p.data.dtype).copy()
            self.v[name] = arrays[f"opt.v.{name}"].astype(p.data.dtype).copy()


@dataclass
class SequenceDataset:
    sequences: list
    class_names: list
    static_mask: np.ndarray

    @classmethod
    def generate(cls, cfg, world_config=None, n_sequences=None, seq_len=None):
        wc = world_config or WorldConfig(occluder_bias=cfg.occluder_bias)
        n_seq = n_sequences or cfg.n_sequences
        length = seq_len or cfg.seq_len
        if len(wc.classes) != cfg.n_c:
            raise ValueError(f"world has {len(wc.classes)} classes, config expects {cfg.n_c}")
        sequences = []
        for i in range(n_seq):
            _, frames = generate_sequence(cfg.data_seed + i, cfg.camera(), cfg.out_spec(),
                                          length, wc, cfg.motion_model)
            sequences.append(frames)
        return cls(
            sequences=sequences,
            class_names=[c.name for c in wc.classes],
            static_mask=np.array([c.static for c in wc.classes]),
        )

    @classmethod
    def from_dir(cls, data_dir, static_classes=("drivable", "crossing")):
        sequences, names = load_dataset(data_dir)
        return cls(
            sequences=sequences,
            class_names=names,
            static_mask=np.array([n in static_classes for n in names]),
        )

    def frame_order(self):
        return [(s, t) for s, seq in enumerate(self.sequences) for t in range(len(seq))]

    def n_frames(self):
        return sum(len(s) for s in self.sequences)

    def class_weights(self):
        return class_weights_from_frequency([f.gt for seq in self.sequences for f in seq])


class Trainer:
    """Owns the model, the optimizer and the single training-loop memory
    bank; one instance per run."""

    def __init__(self, cfg, dataset=None, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.model = BevSegmenter(cfg)
        self.dataset = dataset or SequenceDataset.generate(cfg)
        self.weights = LossWeights(alpha=cfg.alpha, beta=cfg.beta,
                                   class_weights=self.dataset.class_weights())
        self.opt = MomentOptimizer(self.model.store.items(), weight_decay=cfg.weight_decay)
        self.step = 0
        self.cursor = 0
        self.bank = self.model.new_bank()
        self.out_dir = Path(out_dir) if out_dir else None
        self.log_lines = []
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def _next_frame(self):
        order = self.dataset.frame_order()
        seq, t = order[self.cursor % len(order)]
        self.cursor += 1
        return self.dataset.sequences[seq][t]

    def frame_loss(self, frame, b_calib=None):
        """Forward one frame against the live bank (reads detached history,
        pushes the new calibrated features) and return the loss parts."""
        if b_calib is None:
            b_calib = self.model.calibrated_bev(frame.image)
        logits = self.model.fuse_and_head(b_calib, frame.pose, self.bank, push=True)
        p = ad.sigmoid(logits)
        with warnings.catch_warnings():
            # Frames with no occluded (or no visible) cells legitimately
            # zero out one loss component.
            warnings.simplefilter("ignore", RuntimeWarning)
            return loss_breakdown(p, frame.gt, frame.visibility, self.weights)

    def train_step(self):
        """One optimizer step over the next `batch_size` frames in stream
        order. The view transformation runs once for the whole batch; the
        bank is then read/pushed frame by frame in order."""
        self.step += 1
        self.model.store.zero_grads()
        totals = {"bce": 0.0, "uncert": 0.0, "iou": 0.0, "total": 0.0}
        frames = [self._next_frame() for _ in range(self.cfg.batch_size)]
        b_calibs = self.model.calibrated_bev_batch([f.image for f in frames])
        batch_loss = None
        for frame, b_calib in zip(frames, b_calibs):
            parts = self.frame_loss(frame, b_calib=b_calib)
            for k in totals:
                val = parts[k].item()
                if not np.isfinite(val):
                    raise TrainingDiverged(self.step, k, val)
                totals[k] += val / self.cfg.batch_size
            batch_loss = parts["total"] if batch_loss is None else batch_loss + parts["total"]
        # One backward over the whole batch: the frames share the batched
        # view-transformation subgraph.
        ad.scale(batch_loss, 1.0 / self.cfg.batch_size).backward()
        lr = lr_at(self.step, self.cfg.base_lr, self.cfg.warmup_steps, self.cfg.total_steps)
        self.opt.step(lr, grad_scale=1.0)
        return lr, totals

    def run(self, steps=None, stop_fn=None, quiet=True):
        """Train for `steps` (default: the configured remaining budget).
        `stop_fn(trainer)` is polled every log interval and may end the
        run early (used by the overfit acceptance check)."""
        target = self.step + steps if steps is not None else self.cfg.total_steps
        start = time.time()
        while self.step < target:
            lr, totals = self.train_step()
            if self.step % self.cfg.log_every == 0 or self.step == target:
                line = (f"step {self.step:5d} lr {lr:.3e} loss {totals['total']:.4f} "
                        f"bce {totals['bce']:.4f} uncert {totals['uncert']:.4f} iou {totals['iou']:.4f}")
                self.log_lines.append(line)
                if not quiet:
                    print(line, flush=True)
                if stop_fn is not None and stop_fn(self):
                    break
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                line = f"step {self.step:5d} train_miou {train_miou(self):.4f}"
                self.log_lines.append(line)
                if not quiet:
                    print(line, flush=True)
            if (self.cfg.checkpoint_every and self.out_dir
                    and self.step % self.cfg.checkpoint_every == 0):
                self.save_checkpoint(self.out_dir / f"step_{self.step:06d}.ckpt")
        if self.out_dir:
            (self.out_dir / "train_log.txt").write_text("\n".join(self.log_lines) + "\n")
            self.save_checkpoint(self.out_dir / "final.ckpt")
        return time.time() - start

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self, path):
        items = [("config_text", pack_text(format_config(self.cfg))),
                 ("trainer.step", np.array(self.step, dtype=np.int64)),
                 ("trainer.cursor", np.array(self.cursor, dtype=np.int64)),
                 ("trainer.class_weights", np.asarray(self.weights.class_weights, dtype=np.float64))]
        for i, (feat, pose) in enumerate(self.bank.read()):
            items.append((f"bank.{i}.feat", feat.data))
            items.append((f"bank.{i}.pose", np.array([pose.x, pose.z, pose.yaw, pose.t], dtype=np.float64)))
            items.append((f"bank.{i}.scene", pack_text(pose.scene_id)))
        items += self.model.store.state_arrays()
        items += self.opt.state_arrays()
        return write_arrays(path, items)

    def load_checkpoint(self, path):
        arrays = read_arrays(path)
        self.model.store.load_state(arrays)
        self.opt.load_state(arrays)
        self.step = int(arrays["trainer.step"])
        self.cursor = int(arrays["trainer.cursor"])
        self.weights = LossWeights(alpha=self.cfg.alpha, beta=self.cfg.beta,
                                   class_weights=arrays["trainer.class_weights"])
        self.bank = self.model.new_bank()
        i = 0
        while f"bank.{i}.feat" in arrays:
            px, pz, pyaw, pt = arrays[f"bank.{i}.pose"]
            pose = EgoPose(x=float(px), z=float(pz), yaw=float(pyaw),
                           scene_id=unpack_text(arrays[f"bank.{i}.scene"]), t=int(pt))
            self.bank.push(arrays[f"bank.{i}.feat"], pose)
            i += 1


def load_model_from_checkpoint(path, dtype=np.float32):
    arrays = read_arrays(path)
    if "config_text" not in arrays:
        raise ValueError(f"{path}: missing embedded config")
    cfg = parse_config(unpack_text(arrays["config_text"]))
    model = BevSegmenter(cfg, dtype=dtype)
    model.store.load_state(arrays)
    return model, cfg


def evaluate_model(model, dataset, threshold=0.5, paper_protocol=False, occluded_only=False):
    """Sequential per-sequence evaluation with a live memory bank.

    With `occluded_only`, IoU counts are restricted to cells marked
    occluded in the ground truth (used by the temporal-fusion checks).
    """
    acc = ConfusionAccumulator(model.cfg.n_c)
    for seq in dataset.sequences:
        bank = model.new_bank()
        for frame in seq:
            p = model.predict_probabilities(frame.image, frame.pose, bank, push=True)
            mask = ~frame.visibility if occluded_only else None
            acc.update(p, frame.gt, threshold=threshold, cell_mask=mask, paper_protocol=paper_protocol)
    return MetricReport(dataset.class_names, acc.per_class_iou(), static_mask=dataset.static_mask)


def evaluate_gt(dataset):
    """Ground truth against itself (sanity anchor for the report path)."""
    acc = ConfusionAccumulator(len(dataset.class_names))
    for seq in dataset.sequences:
        for frame in seq:
            acc.update(frame.gt, frame.gt)
    return MetricReport(dataset.class_names, acc.per_class_iou(), static_mask=dataset.static_mask)


def train_miou(trainer, threshold=0.5):
    report = evaluate_model(trainer.model, trainer.dataset, threshold=threshold)
    return report.group_miou()["total"]


def ablate(axis, values, base_cfg, dataset=None, steps=None, out_dir=None, quiet=True):
    """Train/evaluate one run per axis value with shared seeds; returns
    (table text, rows) shaped like the published ablation tables."""
    if axis not in ("n_dec", "n_his"):
        raise ValueError(f"ablation axis must be n_dec or n_his, got {axis!r}")
    rows = []
    for v in values:
        cfg = replace(base_cfg, **{axis: int(v)}).validate()
        data = dataset or SequenceDataset.generate(cfg)
        trainer = Trainer(cfg, dataset=data)
        trainer.run(steps=steps, quiet=quiet)
        report = evaluate_model(trainer.model, data)
        rows.append((int(v), report))

    lines = [f"{axis:>8s} | " + " | ".join(f"{v:>7d}" for v, _ in rows)]
    if axis == "n_his":
        for group in ("layout", "object", "total"):
            vals = [r.group_miou().get(group, float("nan")) for _, r in rows]
            lines.append(f"{group:>8s} | " + " | ".join(f"{v:7.4f}" for v in vals))
    else:
        vals = [r.group_miou()["total"] for _, r in rows]
        lines.append(f"{'miou':>8s} | " + " | ".join(f"{v:7.4f}" for v in vals))
    table = "\n".join(lines)
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablate_{axis}.txt").write_text(table + "\n")
        with open(out_dir / f"ablate_{axis}.csv", "w") as fh:
            fh.write(f"{axis},miou_layout,miou_object,miou_total\n")
            for v, r in rows:
                g = r.group_miou()
                fh.write(f"{v},{g.get('layout', '')},{g.get('object', '')},{g['total']}\n")
    return table, rows
