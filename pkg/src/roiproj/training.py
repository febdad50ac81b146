"""Label assignment, batch assembly, and two-stage cascaded optimization.

Stage 1 trains the shared stack and the rigid branch alone. Each stage-2
iteration runs two processes in order: (a) one SGD step on both detection
losses over the sampled RoI batch, then (b) detection inference over the
full proposal set, combined-map construction and injection, and one SGD
step on the event loss.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import binio
from . import roi as R
from . import tensor as T
from .data import NONRIGID_CLASSES, RIGID_CLASSES, DataConfig, Scene, propose_rois
from .errors import ConfigurationError, InputError, TrainingError
from .model import Model
from .nn import SGD

log = logging.getLogger(__name__)

STEP_RATIO = 0.6  # lr drops at this fraction of a stage's iterations


@dataclass(frozen=True)
class StageConfig:
    lr: float
    iters: int
    step: int | None = None  # defaults to STEP_RATIO * iters

    def resolved_step(self):
        if self.step is None:
            return int(round(STEP_RATIO * self.iters))
        if self.iters and abs(self.step / self.iters - STEP_RATIO) > 0.01:
            raise ConfigurationError(
                f"stage step {self.step} must sit at {STEP_RATIO:.0%} of {self.iters} iterations"
            )
        return self.step

    def lr_at(self, iteration):
        return self.lr * (0.1 if iteration >= self.resolved_step() else 1.0)


@dataclass(frozen=True)
class TrainConfig:
    stage1: StageConfig = StageConfig(lr=0.001, iters=2000)
    stage2: StageConfig = StageConfig(lr=0.0001, iters=800)
    momentum: float = 0.9
    rigid_rois_per_image: int = 64
    rigid_positive_fraction: float = 0.25
    iou_rigid: float = 0.5
    iou_nonrigid: float = 0.1
    iou_negative: float = 0.1
    detach_injected: bool = True
    seed: int = 0

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


# ---------------------------------------------------------------------------
# IoU and label assignment

NEGATIVE = -1
EXCLUDED = -2


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (N,4) / (M,4) box arrays in (x1,y1,x2,y2) form."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def assign_labels(rois, ground_truth, threshold, negative_threshold=0.1, class_names=None):
    """Three-way assignment by IoU against ground truth boxes.

    ground_truth is [(class_name, box), ...]. Returns an int array per RoI:
    the matched class index when max IoU >= threshold, NEGATIVE when
    max IoU < negative_threshold, EXCLUDED in between.
    """
    class_names = class_names or RIGID_CLASSES
    boxes = [r.box if isinstance(r, R.RoI) else r for r in rois]
    if not boxes:
        return np.zeros(0, dtype=np.int64)
    if not ground_truth:
        return np.full(len(boxes), NEGATIVE, dtype=np.int64)
    ious = iou_matrix(boxes, [b for _, b in ground_truth])
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(boxes)), best]
    gt_cls = np.array([class_names.index(name) for name, _ in ground_truth])
    labels = np.where(
        best_iou >= threshold,
        gt_cls[best],
        np.where(best_iou < negative_threshold, NEGATIVE, EXCLUDED),
    )
    return labels.astype(np.int64)


def nonrigid_targets(rois, ground_truth, threshold=0.1):
    """Multi-hot (R, N) targets: class c is on when IoU with any class-c box >= threshold."""
    boxes = [r.box if isinstance(r, R.RoI) else r for r in rois]
    out = np.zeros((len(boxes), len(NONRIGID_CLASSES)), dtype=np.float32)
    if not boxes:
        return out
    for ci, cname in enumerate(NONRIGID_CLASSES):
        cls_boxes = [b for name, b in ground_truth if name == cname]
        if not cls_boxes:
            continue
        ious = iou_matrix(boxes, cls_boxes)
        out[:, ci] = (ious.max(axis=1) >= threshold).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# proposal cache and batch assembly


@dataclass
class SceneProposals:
    rigid: list  # RoIs (image_index 0)
    rigid_labels: np.ndarray  # class index / NEGATIVE / EXCLUDED
    nonrigid: list
    nonrigid_targets: np.ndarray  # (5, N_n) multi-hot


def prepare_proposals(scene: Scene, dcfg: DataConfig, tcfg: TrainConfig) -> SceneProposals:
    rigid = propose_rois(scene, "rigid", dcfg)
    nonrigid = propose_rois(scene, "nonrigid", dcfg)
    return SceneProposals(
        rigid=rigid,
        rigid_labels=assign_labels(rigid, scene.rigid_boxes, tcfg.iou_rigid, tcfg.iou_negative),
        nonrigid=nonrigid,
        nonrigid_targets=nonrigid_targets(nonrigid, scene.nonrigid_boxes, tcfg.iou_nonrigid),
    )


@dataclass
class Batch:
    scenes: list  # [malicious, benign]
    images: T.Tensor  # (2, 3, H, W)
    event_labels: np.ndarray  # (2,)
    rigid_rois: list  # 128 RoIs with image_index set
    rigid_labels: np.ndarray  # background index for negatives
    nonrigid_rois: list  # 10 RoIs
    nonrigid_targets: np.ndarray  # (10, N_n)


class BatchAssembler:
    """Deterministic batch construction: one malicious plus one benign image."""

    def __init__(self, scenes, dcfg: DataConfig, tcfg: TrainConfig, proposal_cache=None):
        self.tcfg = tcfg
        self.dcfg = dcfg
        self.malicious = [s for s in scenes if s.event == "malicious"]
        self.benign = [s for s in scenes if s.event == "benign"]
        if not self.malicious or not self.benign:
            raise InputError("training data must contain both event classes")
        self.cache = proposal_cache if proposal_cache is not None else {}
        self._warned_replacement = False

    def proposals(self, scene) -> SceneProposals:
        if scene.uid not in self.cache:
            self.cache[scene.uid] = prepare_proposals(scene, self.dcfg, self.tcfg)
        return self.cache[scene.uid]

    def assemble(self, iteration: int, seed: int) -> Batch:
        rng = np.random.default_rng([seed, iteration])
        # scenes are drawn with replacement: a tiny class is simply resampled
        if not self._warned_replacement and (len(self.malicious) < 2 or len(self.benign) < 2):
            log.info("small event class: scenes sampled with replacement")
            self._warned_replacement = True
        pair = [
            self.malicious[rng.integers(0, len(self.malicious))],
            self.benign[rng.integers(0, len(self.benign))],
        ]
        tc = self.tcfg
        n_bg = len(RIGID_CLASSES)  # background index in rigid softmax
        rigid_rois, rigid_labels = [], []
        nr_rois, nr_targets = [], []
        for img_idx, scene in enumerate(pair):
            props = self.proposals(scene)
            pos = np.flatnonzero(props.rigid_labels >= 0)
            neg = np.flatnonzero(props.rigid_labels == NEGATIVE)
            want_pos = int(round(tc.rigid_rois_per_image * tc.rigid_positive_fraction))
            take_pos = min(want_pos, len(pos))
            chosen_pos = rng.choice(pos, size=take_pos, replace=False) if take_pos else np.zeros(0, int)
            want_neg = tc.rigid_rois_per_image - take_pos
            replace = len(neg) < want_neg
            chosen_neg = rng.choice(neg, size=want_neg, replace=replace)
            for i in chosen_pos:
                rigid_rois.append(R.RoI(img_idx, props.rigid[i].box))
                rigid_labels.append(props.rigid_labels[i])
            for i in chosen_neg:
                rigid_rois.append(R.RoI(img_idx, props.rigid[i].box))
                rigid_labels.append(n_bg)
            for i, roi in enumerate(props.nonrigid):
                nr_rois.append(R.RoI(img_idx, roi.box))
                nr_targets.append(props.nonrigid_targets[i])
        return Batch(
            scenes=pair,
            images=T.Tensor(np.stack([s.image for s in pair])),
            event_labels=np.array([s.event_index for s in pair], dtype=np.int64),
            rigid_rois=rigid_rois,
            rigid_labels=np.array(rigid_labels, dtype=np.int64),
            nonrigid_rois=nr_rois,
            nonrigid_targets=np.stack(nr_targets),
        )


def assemble_batch(scenes, iteration, seed, dcfg=None, tcfg=None, proposal_cache=None) -> Batch:
    assembler = BatchAssembler(scenes, dcfg or DataConfig(), tcfg or TrainConfig(), proposal_cache)
    return assembler.assemble(iteration, seed)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, model: Model, scenes, tcfg: TrainConfig, dcfg: DataConfig,
                 out_dir=None, on_phase=None):
        self.model = model
        self.tcfg = tcfg
        self.dcfg = dcfg
        self.out_dir = out_dir
        self.on_phase = on_phase  # callback(stage, iteration, phase_name, model)
        self.assembler = BatchAssembler(scenes, dcfg, tcfg)
        self.log_records = []
        self._log_fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")

    # -- logging / checkpointing

    def _log(self, record):
        self.log_records.append(record)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _checkpoint(self, name):
        if self.out_dir is None:
            return
        path = os.path.join(self.out_dir, f"{name}.ckpt")
        binio.write_arrays(path, self.model.state_arrays())

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # -- loss pieces

    def _check_finite(self, value, stage, iteration):
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at stage {stage} iteration {iteration}")

    def _detection_losses(self, batch: Batch, rigid_only=False):
        c5 = self.model.backbone(batch.images)
        rigid_maps, rigid_logits, _ = self.model.detect(c5, batch.rigid_rois, "rigid")
        loss_r = T.softmax_cross_entropy(rigid_logits, batch.rigid_labels)
        if rigid_only:
            return loss_r, None
        _, nr_logits, _ = self.model.detect(c5, batch.nonrigid_rois, "nonrigid")
        loss_n = T.sigmoid_cross_entropy(nr_logits, batch.nonrigid_targets)
        return loss_r, loss_n

    def _combined_maps(self, c5, batch: Batch, record_grad: bool):
        """Per-image combined maps for both branches over the full proposal set."""
        model = self.model
        ctx = T.no_grad() if not record_grad else _nullcontext()
        combined_r, combined_n = [], []
        with ctx:
            for img_idx, scene in enumerate(batch.scenes):
                props = self.assembler.proposals(scene)
                for branch, source, out in (
                    ("rigid", props.rigid, combined_r),
                    ("nonrigid", props.nonrigid, combined_n),
                ):
                    rois = [R.RoI(img_idx, r.box) for r in source]
                    maps, _, probs = model.detect(c5, rois, branch)
                    out.append(
                        model.combined_from_maps(maps, probs, [r.box for r in rois], img_idx)
                    )
        return combined_r, combined_n

    def _event_loss(self, batch: Batch):
        model = self.model
        c5 = model.backbone(batch.images)
        if model.cfg.variant in ("dod", "s-dod"):
            record = not self.tcfg.detach_injected
            combined_r, combined_n = self._combined_maps(c5, batch, record_grad=record)
            logits = model.forward_event(c5, combined_r, combined_n)
        else:
            logits = model.forward_event(c5)
        return T.softmax_cross_entropy(logits, batch.event_labels)

    # -- stages

    def train_stage1(self):
        """Only the shared stack and the rigid branch receive updates."""
        cfg = self.tcfg.stage1
        params = {**self.model.group("shared"), **self.model.group("rigid")}
        opt = SGD(params, cfg.lr, self.tcfg.momentum)
        for it in range(cfg.iters):
            opt.lr = cfg.lr_at(it)
            batch = self.assembler.assemble(it, self.tcfg.seed)
            opt.zero_grad()
            loss_r, _ = self._detection_losses(batch, rigid_only=True)
            value = loss_r.item()
            self._check_finite(value, 1, it)
            loss_r.backward()
            opt.step(it)
            if self.on_phase:
                self.on_phase(1, it, "rigid", self.model)
            self._log({"stage": 1, "iter": it, "loss_rigid": value, "lr": opt.lr})
        self._checkpoint("stage1")
        return self.model

    def stage2_iteration(self, it, opt_det, opt_event):
        cfg = self.tcfg.stage2
        lr = cfg.lr_at(it)
        opt_det.lr = lr
        opt_event.lr = lr
        batch = self.assembler.assemble(self.tcfg.stage1.iters + it, self.tcfg.seed)

        # process (a): one step on both detection losses
        opt_det.zero_grad()
        self.model.zero_grad()
        loss_r, loss_n = self._detection_losses(batch)
        val_r, val_n = loss_r.item(), loss_n.item()
        self._check_finite(val_r + val_n, 2, it)
        T.add(loss_r, loss_n).backward()
        opt_det.step(it)
        if self.on_phase:
            self.on_phase(2, it, "a", self.model)

        # process (b): full proposal set -> combined maps -> event step
        opt_event.zero_grad()
        self.model.zero_grad()
        loss_e = self._event_loss(batch)
        val_e = loss_e.item()
        self._check_finite(val_e, 2, it)
        loss_e.backward()
        opt_event.step(it)
        if self.on_phase:
            self.on_phase(2, it, "b", self.model)

        self._log({
            "stage": 2, "iter": it, "loss_rigid": val_r,
            "loss_nonrigid": val_n, "loss_event": val_e, "lr": lr,
        })

    def train_stage2(self):
        cfg = self.tcfg.stage2
        model = self.model
        opt_det = SGD(
            {**model.group("shared"), **model.group("rigid"), **model.group("nonrigid")},
            cfg.lr, self.tcfg.momentum,
        )
        if self.tcfg.detach_injected:
            event_params = {**model.group("shared"), **model.group("event")}
        else:
            event_params = dict(model.params)
        opt_event = SGD(event_params, cfg.lr, self.tcfg.momentum)
        for it in range(cfg.iters):
            self.stage2_iteration(it, opt_det, opt_event)
        self._checkpoint("stage2")
        return model

    def train(self):
        try:
            self.train_stage1()
            self.train_stage2()
        finally:
            self.close()
        return self.model


def train_single_task(model: Model, scenes, tcfg: TrainConfig, dcfg: DataConfig,
                      task: str, out_dir=None):
    """Optimize one task alone (shared stack plus that branch), stage-1 schedule."""
    if task not in ("event", "rigid", "nonrigid"):
        raise InputError(f"unknown task {task!r}")
    trainer = Trainer(model, scenes, tcfg, dcfg, out_dir=out_dir)
    cfg = tcfg.stage1
    params = {**model.group("shared"), **model.group(task)}
    opt = SGD(params, cfg.lr, tcfg.momentum)
    try:
        for it in range(cfg.iters):
            opt.lr = cfg.lr_at(it)
            batch = trainer.assembler.assemble(it, tcfg.seed)
            opt.zero_grad()
            model.zero_grad()
            if task == "event":
                c5 = model.backbone(batch.images)
                loss = T.softmax_cross_entropy(model.forward_event(c5), batch.event_labels)
            elif task == "rigid":
                loss, _ = trainer._detection_losses(batch, rigid_only=True)
            else:
                c5 = model.backbone(batch.images)
                _, logits, _ = model.detect(c5, batch.nonrigid_rois, "nonrigid")
                loss = T.sigmoid_cross_entropy(logits, batch.nonrigid_targets)
            value = loss.item()
            trainer._check_finite(value, 1, it)
            loss.backward()
            opt.step(it)
            trainer._log({"stage": 1, "iter": it, f"loss_{task}": value, "lr": opt.lr})
        trainer._checkpoint("single")
    finally:
        trainer.close()
    return model


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def multitask_loss_for_gradcheck(model: Model, images: T.Tensor, rng_seed=0):
    """Combined three-task loss on synthetic RoIs; used by the gradient sweep.

    Uses linear projection with injection so the checked path covers the
    concat and projection operators end to end. Projection weights are
    drawn from the fixed rng rather than from detection scores: scores are
    detached by design, so using them would make finite differences see a
    path the analytic gradient intentionally ignores.
    """
    rng = np.random.default_rng(rng_seed)
    s = model.cfg.image_size
    batch = images.shape[0]

    def rand_rois(img, count):
        out = []
        for _ in range(count):
            x1, y1 = rng.uniform(0, s / 2, size=2)
            w, h = rng.uniform(s / 4, s / 2, size=2)
            out.append(R.RoI(img, (x1, y1, min(x1 + w, s), min(y1 + h, s))))
        return out

    rigid_by_img = [rand_rois(b, 3) for b in range(batch)]
    nr_by_img = [rand_rois(b, 2) for b in range(batch)]
    rigid_rois = [r for group in rigid_by_img for r in group]
    nr_rois = [r for group in nr_by_img for r in group]
    rigid_labels = rng.integers(0, model.cfg.n_rigid + 1, size=len(rigid_rois))
    nr_targets = rng.integers(0, 2, size=(len(nr_rois), model.cfg.n_nonrigid)).astype(np.float64)
    event_labels = rng.integers(0, model.cfg.n_events, size=batch)

    c5 = model.backbone(images)
    _, logits_r, _ = model.detect(c5, rigid_rois, "rigid")
    _, logits_n, _ = model.detect(c5, nr_rois, "nonrigid")
    loss = T.add(
        T.softmax_cross_entropy(logits_r, rigid_labels),
        T.sigmoid_cross_entropy(logits_n, nr_targets),
    )
    if model.cfg.variant in ("dod", "s-dod"):
        combined_r, combined_n = [], []
        for b in range(batch):
            for branch, group, out, n_cls in (
                ("rigid", rigid_by_img[b], combined_r, model.cfg.n_rigid),
                ("nonrigid", nr_by_img[b], combined_n, model.cfg.n_nonrigid),
            ):
                maps, _, _ = model.detect(c5, group, branch)
                fixed_probs = rng.uniform(0.1, 0.9, size=(len(group), n_cls)).astype(np.float32)
                out.append(
                    model.combined_from_maps(maps, fixed_probs, [r.box for r in group], b)
                )
        logits_e = model.forward_event(c5, combined_r, combined_n)
    else:
        logits_e = model.forward_event(c5)
    return T.add(loss, T.softmax_cross_entropy(logits_e, event_labels))
