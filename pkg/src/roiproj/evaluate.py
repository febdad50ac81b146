"""Average precision scoring and the comparison/ablation experiment harness."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import roi as R
from . import tensor as T
from .data import NONRIGID_CLASSES, RIGID_CLASSES, DataConfig
from .errors import TrainingError, UndefinedMetricError
from .model import Model, NetworkConfig, build_network
from .training import (
    TrainConfig,
    Trainer,
    iou_matrix,
    prepare_proposals,
    train_single_task,
)

log = logging.getLogger(__name__)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at each positive, ranked by score.

    Ties keep input order (stable sort on descending score).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked == 1)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_pos = (hits / ranks)[ranked == 1]
    return float(precision_at_pos.sum() / n_pos)


# ---------------------------------------------------------------------------
# model scoring


def event_scores(model: Model, scenes, dcfg: DataConfig, tcfg: TrainConfig,
                 proposal_cache=None, chunk=8):
    """P(malicious) per scene via the full injection pipeline (no gradients)."""
    cache = proposal_cache if proposal_cache is not None else {}
    out = np.zeros(len(scenes), dtype=np.float64)
    with T.no_grad():
        for start in range(0, len(scenes), chunk):
            group = scenes[start : start + chunk]
            images = T.Tensor(np.stack([s.image for s in group]))
            c5 = model.backbone(images)
            if model.cfg.variant in ("dod", "s-dod"):
                combined_r, combined_n = [], []
                for b, scene in enumerate(group):
                    if scene.uid not in cache:
                        cache[scene.uid] = prepare_proposals(scene, dcfg, tcfg)
                    props = cache[scene.uid]
                    for branch, source, dest in (
                        ("rigid", props.rigid, combined_r),
                        ("nonrigid", props.nonrigid, combined_n),
                    ):
                        rois = [R.RoI(b, r.box) for r in source]
                        maps, _, probs = model.detect(c5, rois, branch)
                        dest.append(
                            model.combined_from_maps(maps, probs, [r.box for r in rois], b)
                        )
                logits = model.forward_event(c5, combined_r, combined_n)
            else:
                logits = model.forward_event(c5)
            out[start : start + len(group)] = T.softmax(logits.data)[:, 1]
    return out


def detection_ap(model: Model, scenes, dcfg: DataConfig, tcfg: TrainConfig,
                 branch: str, proposal_cache=None):
    """Mean per-class AP over pooled test proposals; positives by IoU threshold."""
    cache = proposal_cache if proposal_cache is not None else {}
    classes = RIGID_CLASSES if branch == "rigid" else NONRIGID_CLASSES
    threshold = tcfg.iou_rigid if branch == "rigid" else tcfg.iou_nonrigid
    all_scores, all_hits = [], []
    with T.no_grad():
        for scene in scenes:
            if scene.uid not in cache:
                cache[scene.uid] = prepare_proposals(scene, dcfg, tcfg)
            props = cache[scene.uid]
            rois = props.rigid if branch == "rigid" else props.nonrigid
            images = T.Tensor(scene.image[None])
            c5 = model.backbone(images)
            local = [R.RoI(0, r.box) for r in rois]
            _, _, probs = model.detect(c5, local, branch)
            gts = scene.rigid_boxes if branch == "rigid" else scene.nonrigid_boxes
            hits = np.zeros((len(local), len(classes)), dtype=bool)
            for ci, cname in enumerate(classes):
                boxes = [b for name, b in gts if name == cname]
                if boxes:
                    ious = iou_matrix([r.box for r in local], boxes)
                    hits[:, ci] = ious.max(axis=1) >= threshold
            all_scores.append(probs)
            all_hits.append(hits)
    scores = np.concatenate(all_scores)
    hits = np.concatenate(all_hits)
    aps = []
    for ci, cname in enumerate(classes):
        if not hits[:, ci].any():
            log.warning("no %s positives in evaluation set; class skipped", cname)
            continue
        aps.append(average_precision(scores[:, ci], hits[:, ci].astype(int)))
    return float(np.mean(aps)) if aps else float("nan")


def evaluate_model(model: Model, test_scenes, dcfg, tcfg, proposal_cache=None):
    scores = event_scores(model, test_scenes, dcfg, tcfg, proposal_cache)
    labels = np.array([s.event_index for s in test_scenes])
    return {
        "ap_event": average_precision(scores, labels),
        "ap_rigid": detection_ap(model, test_scenes, dcfg, tcfg, "rigid", proposal_cache),
        "ap_nonrigid": detection_ap(model, test_scenes, dcfg, tcfg, "nonrigid", proposal_cache),
    }


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class ExperimentReport:
    kind: str  # "comparison" | "ablation"
    rows: list
    seeds: tuple
    data_hash: str
    train_hash: str

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n"

    def format_table(self):
        if self.kind == "comparison":
            return self._comparison_table()
        return self._ablation_table()

    def _comparison_table(self):
        lines = [
            f"{'Method':<34}{'Projection':<12}{'Selection':<18}{'E':>7}{'R':>7}{'N':>7}",
            "-" * 85,
        ]
        for row in self.rows:
            lines.append(
                f"{row['method']:<34}{row.get('interp') or '-':<12}"
                f"{row.get('selection') or '-':<18}"
                f"{_fmt(row.get('ap_event')):>7}{_fmt(row.get('ap_rigid')):>7}"
                f"{_fmt(row.get('ap_nonrigid')):>7}"
            )
        return "\n".join(lines) + "\n"

    def _ablation_table(self):
        injects = ("c5", "c6", "c7")
        lines = [
            f"{'Method':<12}{'Build':<10}" + "".join(f"{c:>9}" for c in injects),
            "-" * 49,
        ]
        grouped = {}
        for row in self.rows:
            grouped.setdefault((row["method"], row["build"]), {})[row["inject"]] = row
        for (method, build), cells in grouped.items():
            vals = []
            for inj in injects:
                cell = cells.get(inj)
                if cell is None or cell["status"] == "not-applicable":
                    vals.append(f"{'.':>9}")
                elif cell["status"] == "failed":
                    vals.append(f"{'FAIL':>9}")
                else:
                    vals.append(f"{_fmt(cell['ap_event']):>9}")
            lines.append(f"{method:<12}{build:<10}" + "".join(vals))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.3f}"


def comparison_variants():
    """Row structure mirroring the headline comparison: baselines plus all
    four projection/selection combinations."""
    rows = [
        {"method": "single-task", "variant": "single-task", "interp": None, "selection": None},
        {"method": "no-direct", "variant": "no-direct", "interp": None, "selection": None},
        {"method": "dod", "variant": "dod", "interp": None, "selection": None},
    ]
    for interp in ("max", "linear"):
        for selection in ("class-agnostic", "class-specific"):
            rows.append({
                "method": f"s-dod({interp}/{selection})",
                "variant": "s-dod",
                "interp": interp,
                "selection": selection,
            })
    return rows


def _net_for(base: NetworkConfig, variant, interp=None, selection=None,
             build_site=None, inject_site=None):
    changes = {"variant": variant}
    if interp:
        changes["interp"] = interp
    if selection:
        changes["selection"] = selection
    if build_site:
        changes["build_site"] = build_site
    changes["inject_site"] = inject_site or ("c7" if variant == "dod" else base.inject_site)
    return dataclasses.replace(base, **changes)


def _train_and_eval(net_cfg, variant, train_scenes, test_scenes, dcfg, tcfg, seed,
                    proposal_cache, out_dir=None):
    tcfg_seeded = dataclasses.replace(tcfg, seed=seed)
    model = build_network(net_cfg, seed=seed)
    if variant == "single-task":
        results = {}
        for task, key in (("event", "ap_event"), ("rigid", "ap_rigid"), ("nonrigid", "ap_nonrigid")):
            m = build_network(net_cfg, seed=seed)
            train_single_task(m, train_scenes, tcfg_seeded, dcfg, task, out_dir=out_dir)
            results[key] = evaluate_model(m, test_scenes, dcfg, tcfg_seeded, proposal_cache)[key]
        return results
    trainer = Trainer(model, train_scenes, tcfg_seeded, dcfg, out_dir=out_dir)
    trainer.train()
    return evaluate_model(model, test_scenes, dcfg, tcfg_seeded, proposal_cache)


def run_comparison(scenes, net_cfg: NetworkConfig, dcfg: DataConfig, tcfg: TrainConfig,
                   seeds=(1, 2, 3), out_dir=None, variants=None) -> ExperimentReport:
    """Train and evaluate every variant x seed; failed cells are marked, not fatal."""
    train_scenes = [s for s in scenes if s.split == "train"]
    test_scenes = [s for s in scenes if s.split == "test"]
    proposal_cache = {}
    rows = []
    for spec in variants or comparison_variants():
        cfg_v = _net_for(net_cfg, spec["variant"], spec["interp"], spec["selection"])
        row = dict(spec)
        row["config_hash"] = cfg_v.config_hash()
        row["cells"] = []
        per_seed = {"ap_event": [], "ap_rigid": [], "ap_nonrigid": []}
        for seed in seeds:
            cell_dir = None
            if out_dir is not None:
                cell_dir = os.path.join(out_dir, f"{spec['method']}_seed{seed}")
            try:
                result = _train_and_eval(
                    cfg_v, spec["variant"], train_scenes, test_scenes,
                    dcfg, tcfg, seed, proposal_cache, out_dir=cell_dir,
                )
            except TrainingError as exc:
                log.warning("cell %s seed %s failed: %s", spec["method"], seed, exc)
                row["cells"].append({"seed": seed, "status": "failed",
                                     "config_hash": cfg_v.config_hash(), "error": str(exc)})
                continue
            cell = {"seed": seed, "status": "ok", "config_hash": cfg_v.config_hash(), **result}
            if cell_dir is not None:
                cell["checkpoint"] = os.path.join(
                    os.path.relpath(cell_dir, out_dir),
                    "single.ckpt" if spec["variant"] == "single-task" else "stage2.ckpt",
                )
            row["cells"].append(cell)
            for key in per_seed:
                per_seed[key].append(result[key])
        for key, vals in per_seed.items():
            row[key] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return ExperimentReport(
        kind="comparison", rows=rows, seeds=tuple(seeds),
        data_hash=dcfg.config_hash(), train_hash=tcfg.config_hash(),
    )


def run_ablation(scenes, net_cfg: NetworkConfig, dcfg: DataConfig, tcfg: TrainConfig,
                 builds=("roipool", "c6", "c7"), injects=("c5", "c6", "c7"),
                 seeds=(1,), out_dir=None) -> ExperimentReport:
    """Build x inject grid for the projection variant plus the batch-pool
    baseline row; structurally invalid cells are marked not-applicable."""
    train_scenes = [s for s in scenes if s.split == "train"]
    test_scenes = [s for s in scenes if s.split == "test"]
    proposal_cache = {}
    rows = []

    def run_cell(method, variant, build, inject):
        row = {"method": method, "build": build, "inject": inject}
        if variant == "dod" and inject == "c5":
            row.update(status="not-applicable", ap_event=None, cells=[])
            return row
        cfg_v = _net_for(net_cfg, variant, build_site=build, inject_site=inject)
        row["config_hash"] = cfg_v.config_hash()
        cells, aps = [], []
        for seed in seeds:
            cell_dir = None
            if out_dir is not None:
                cell_dir = os.path.join(out_dir, f"{method}_{build}_{inject}_seed{seed}")
            try:
                result = _train_and_eval(
                    cfg_v, variant, train_scenes, test_scenes,
                    dcfg, tcfg, seed, proposal_cache, out_dir=cell_dir,
                )
            except TrainingError as exc:
                log.warning("cell %s/%s/%s seed %s failed: %s", method, build, inject, seed, exc)
                cells.append({"seed": seed, "status": "failed", "error": str(exc),
                              "config_hash": cfg_v.config_hash()})
                continue
            cell = {"seed": seed, "status": "ok", "config_hash": cfg_v.config_hash(), **result}
            if cell_dir is not None:
                cell["checkpoint"] = os.path.join(os.path.relpath(cell_dir, out_dir), "stage2.ckpt")
            cells.append(cell)
            aps.append(result["ap_event"])
        row["cells"] = cells
        row["ap_event"] = float(np.mean(aps)) if aps else None
        row["status"] = "ok" if aps else "failed"
        return row

    for inject in injects:
        rows.append(run_cell("dod", "dod", "c7", inject))
    for build in builds:
        for inject in injects:
            rows.append(run_cell("s-dod", "s-dod", build, inject))
    return ExperimentReport(
        kind="ablation", rows=rows, seeds=tuple(seeds),
        data_hash=dcfg.config_hash(), train_hash=tcfg.config_hash(),
    )
