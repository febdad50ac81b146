"""Three-branch network: shared conv stack, per-RoI detection, event recognition.

The shared stack C1..C5 feeds three task modules (event, rigid, non-rigid),
each a C6/C7 conv pair, global average pooling, and a classifier layer.
Detection branches score RoI-pooled maps; the event branch consumes the
full-image map, optionally concatenated with injected combined maps at a
configurable site.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from . import roi as R
from . import tensor as T
from .data import NONRIGID_CLASSES, RIGID_CLASSES
from .errors import ConfigurationError

VARIANTS = ("single-task", "no-direct", "dod", "s-dod")
BUILD_SITES = ("roipool", "c6", "c7")
INJECT_SITES = ("c5", "c6", "c7")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 64
    in_channels: int = 3
    shared_channels: tuple = (16, 32, 32, 32, 32)
    pool_after: tuple = (1, 2, 3)  # 2x2 max-pool after these shared convs (1-based)
    branch_channels: tuple = (32, 32)  # c6, c7
    roi_bins: tuple = (4, 4)
    n_events: int = 2
    n_rigid: int = len(RIGID_CLASSES)
    n_nonrigid: int = len(NONRIGID_CLASSES)
    variant: str = "s-dod"
    interp: str = "linear"
    selection: str = "class-specific"
    top_k: int = 5
    build_site: str = "c7"
    inject_site: str = "c5"
    init: str = "gaussian"  # "gaussian" (N(0, init_std^2)) or "he"
    init_std: float = 0.01

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def _validate(cfg: NetworkConfig):
    if cfg.variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {cfg.variant!r}")
    if cfg.build_site not in BUILD_SITES:
        raise ConfigurationError(f"unknown build site {cfg.build_site!r}")
    if cfg.inject_site not in INJECT_SITES:
        raise ConfigurationError(f"unknown inject site {cfg.inject_site!r}")
    if cfg.interp not in R.INTERP_MODES:
        raise ConfigurationError(f"unknown interpolation {cfg.interp!r}")
    if cfg.selection not in R.SELECTION_MODES:
        raise ConfigurationError(f"unknown selection {cfg.selection!r}")
    if len(cfg.shared_channels) != 5:
        raise ConfigurationError("exactly five shared conv layers are required")
    if cfg.variant == "dod" and cfg.inject_site == "c5":
        raise ConfigurationError(
            "variant 'dod' cannot inject at site 'c5': its batch-pooled map has "
            f"bin geometry {cfg.roi_bins}, not the c5 grid (build_site="
            f"{cfg.build_site}, inject_site=c5 is structurally invalid)"
        )


class Model:
    """Parameters plus forward helpers; exclusive during forward/backward."""

    def __init__(self, cfg: NetworkConfig, params, shared_specs, branch_specs, shapes):
        self.cfg = cfg
        self.params = params
        self.shared_specs = shared_specs
        self.branch_specs = branch_specs
        self.shapes = shapes  # static shape-check results

    # -- parameter bookkeeping

    def group(self, prefix):
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigurationError(f"checkpoint missing parameter {name}")
            if tuple(arrays[name].shape) != tuple(p.data.shape):
                raise ConfigurationError(
                    f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arrays[name].astype(p.data.dtype)
            p.zero_grad()

    # -- forward pieces

    def backbone(self, images: T.Tensor) -> T.Tensor:
        x = images
        for i, spec in enumerate(self.shared_specs, start=1):
            x = nn.forward_layer(x, spec, self.params_for(spec))
            x = T.relu(x)
            if i in self.cfg.pool_after:
                x = T.max_pool2d(x, (2, 2), 2)
        return x

    def params_for(self, spec):
        if spec.kind in ("conv", "fully-connected"):
            return {
                "weight": self.params[f"{spec.name}.weight"],
                "bias": self.params[f"{spec.name}.bias"],
            }
        return None

    def full_image_roi(self, image_index):
        s = float(self.cfg.image_size)
        return R.RoI(image_index=image_index, box=(0.0, 0.0, s, s))

    def branch_forward(self, branch: str, pooled: T.Tensor):
        """Run C6/C7/AVG/FC of a branch over stacked (R, C, bh, bw) maps.

        Returns (site activation maps dict, logits).
        """
        specs = self.branch_specs[branch]
        a6 = T.relu(nn.forward_layer(pooled, specs["c6"], self.params_for(specs["c6"])))
        a7 = T.relu(nn.forward_layer(a6, specs["c7"], self.params_for(specs["c7"])))
        hb, wb = a7.shape[2], a7.shape[3]
        avg = T.avg_pool2d(a7, (hb, wb), 1)
        flat = T.reshape(avg, (avg.shape[0], avg.shape[1]))
        logits = nn.forward_layer(flat, specs["fc"], self.params_for(specs["fc"]))
        return {"roipool": pooled, "c6": a6, "c7": a7}, logits

    def detect(self, c5: T.Tensor, rois, branch: str):
        """Score RoIs with a detection branch.

        Returns (maps at the configured build site (R, k, bh, bw), logits,
        per-RoI class probabilities as a plain (R, N) array). Rigid scoring
        is softmax over N+1 logits (background last) with the background
        column dropped; non-rigid scoring is per-class sigmoid.
        """
        n_classes = self.cfg.n_rigid if branch == "rigid" else self.cfg.n_nonrigid
        if not rois:
            empty = T.Tensor(np.zeros((0, self.build_channels(), *self.cfg.roi_bins), dtype=np.float32))
            return empty, None, np.zeros((0, n_classes), dtype=np.float32)
        image_hw = (self.cfg.image_size, self.cfg.image_size)
        pooled = R.roi_pool_batch(c5, rois, self.cfg.roi_bins, image_hw)
        sites, logits = self.branch_forward(branch, pooled)
        if branch == "rigid":
            probs = T.softmax(logits.data)[:, : self.cfg.n_rigid]
        else:
            probs = T.sigmoid(logits.data)
        return sites[self.cfg.build_site], logits, probs.astype(np.float32)

    def build_channels(self):
        """Channel count k of per-RoI maps at the configured build site."""
        if self.cfg.build_site == "roipool":
            return self.cfg.shared_channels[-1]
        return self.cfg.branch_channels[0 if self.cfg.build_site == "c6" else 1]

    def injected_channels(self):
        k = self.build_channels()
        if self.cfg.variant == "s-dod":
            if self.cfg.selection == "class-specific":
                return k * self.cfg.n_rigid + k * self.cfg.n_nonrigid
            return 2 * k
        if self.cfg.variant == "dod":
            return 2 * k
        return 0

    def inject_grid(self):
        return self.shapes["c5_hw"] if self.cfg.inject_site == "c5" else tuple(self.cfg.roi_bins)

    def combined_from_maps(self, site_maps: T.Tensor, probs, boxes, image_index):
        """Select, project, and combine one branch's scored maps for one image."""
        cfg = self.cfg
        image_hw = (cfg.image_size, cfg.image_size)
        grid = self.inject_grid()
        k = self.build_channels()
        n = probs.shape[1] if probs.size else 0
        if cfg.variant == "dod":
            groups = R.select_indices(probs, "class-agnostic", cfg.top_k) if len(boxes) else [[]]
            maps = [T.row(site_maps, i) for i, _ in groups[0]]
            pooled = R.batch_pool(maps, empty_shape=(k, *cfg.roi_bins))
            return R.CombinedFeatureMap(
                map=pooled, site=cfg.inject_site,
                scale=(grid[0] / image_hw[0], grid[1] / image_hw[1]),
            )
        if len(boxes) == 0:
            n_groups = n if cfg.selection == "class-specific" else 1
            selection = R.Selection(mode=cfg.selection, groups=[[] for _ in range(max(n_groups, 1))])
        else:
            groups = R.select_indices(probs, cfg.selection, cfg.top_k)
            selection = R.Selection(
                mode=cfg.selection,
                groups=[
                    [
                        (
                            R.PerRoIFeatureMap(
                                source=R.RoI(image_index, boxes[i], probs=probs[i]),
                                map=T.row(site_maps, i),
                            ),
                            w,
                        )
                        for i, w in g
                    ]
                    for g in groups
                ],
            )
        return R.build_combined_map(
            selection, grid, image_hw, cfg.interp, site=cfg.inject_site, channels=k
        )

    def forward_event(self, c5: T.Tensor, combined_rigid=None, combined_nonrigid=None) -> T.Tensor:
        """Event logits for a batch; combined maps are per-image lists or None."""
        cfg = self.cfg
        batch = c5.shape[0]
        image_hw = (cfg.image_size, cfg.image_size)
        inject = cfg.variant in ("dod", "s-dod")
        if inject:
            if combined_rigid is None or combined_nonrigid is None:
                raise ConfigurationError(f"variant {cfg.variant!r} requires combined maps")
            grid = self.inject_grid()
            for cm in list(combined_rigid) + list(combined_nonrigid):
                if tuple(cm.map.shape[1:]) != tuple(grid):
                    raise ConfigurationError(
                        f"combined map grid {tuple(cm.map.shape[1:])} does not match "
                        f"inject site {cfg.inject_site} grid {tuple(grid)}"
                    )
            inj = T.stack(
                [T.concat([combined_rigid[b].map, combined_nonrigid[b].map], axis=0) for b in range(batch)],
                axis=0,
            )
        x = c5
        if inject and cfg.inject_site == "c5":
            x = T.concat([x, inj], axis=1)
        rois = [self.full_image_roi(b) for b in range(batch)]
        x = R.roi_pool_batch(x, rois, cfg.roi_bins, image_hw)
        specs = self.branch_specs["event"]
        x = T.relu(nn.forward_layer(x, specs["c6"], self.params_for(specs["c6"])))
        if inject and cfg.inject_site == "c6":
            x = T.concat([x, inj], axis=1)
        x = T.relu(nn.forward_layer(x, specs["c7"], self.params_for(specs["c7"])))
        if inject and cfg.inject_site == "c7":
            x = T.concat([x, inj], axis=1)
        x = T.avg_pool2d(x, (x.shape[2], x.shape[3]), 1)
        x = T.reshape(x, (x.shape[0], x.shape[1]))
        return nn.forward_layer(x, specs["fc"], self.params_for(specs["fc"]))


def _static_shape_check(cfg: NetworkConfig):
    """Propagate shapes through every layer; channel arithmetic must close."""
    hw = (cfg.image_size, cfg.image_size)
    ch = cfg.in_channels
    for i, out_ch in enumerate(cfg.shared_channels, start=1):
        spec = nn.LayerSpec("conv", name=f"shared.c{i}", kernel=3, padding=1,
                            in_channels=ch, out_channels=out_ch)
        hw = nn.output_hw(spec, hw)
        ch = out_ch
        if i in cfg.pool_after:
            hw = nn.output_hw(nn.LayerSpec("max-pool", name=f"shared.pool{i}", kernel=2, stride=2), hw)
    c5_hw = hw
    bins = tuple(cfg.roi_bins)
    if bins[0] > c5_hw[0] or bins[1] > c5_hw[1]:
        raise ConfigurationError(f"roi bins {bins} exceed c5 grid {c5_hw}")
    return {"c5_hw": c5_hw, "c5_channels": ch}


def build_network(cfg: NetworkConfig, seed: int) -> Model:
    """Construct and initialize the network; deterministic under `seed`.

    All weights draw from the configured init (default N(0, 0.01^2)),
    biases start at zero. Raises ConfigurationError before allocating
    anything if the channel arithmetic does not close.
    """
    _validate(cfg)
    shapes = _static_shape_check(cfg)
    c5_ch = shapes["c5_channels"]
    b6, b7 = cfg.branch_channels

    # injected channel count mirrors Model.injected_channels (model not built yet)
    k = c5_ch if cfg.build_site == "roipool" else (b6 if cfg.build_site == "c6" else b7)
    if cfg.variant == "s-dod":
        inj = k * (cfg.n_rigid + cfg.n_nonrigid) if cfg.selection == "class-specific" else 2 * k
    elif cfg.variant == "dod":
        inj = 2 * k
    else:
        inj = 0

    def branch(name, n_out, inj_c6=0, inj_c7=0, inj_fc=0):
        return {
            "c6": nn.LayerSpec("conv", name=f"{name}.c6", kernel=3, padding=1,
                               in_channels=c5_ch + inj_c6, out_channels=b6),
            "c7": nn.LayerSpec("conv", name=f"{name}.c7", kernel=3, padding=1,
                               in_channels=b6 + inj_c7, out_channels=b7),
            "fc": nn.LayerSpec("fully-connected", name=f"{name}.fc",
                               in_channels=b7 + inj_fc, out_channels=n_out),
        }

    shared_specs = []
    ch = cfg.in_channels
    for i, out_ch in enumerate(cfg.shared_channels, start=1):
        shared_specs.append(
            nn.LayerSpec("conv", name=f"shared.c{i}", kernel=3, padding=1,
                         in_channels=ch, out_channels=out_ch)
        )
        ch = out_ch

    branch_specs = {
        "event": branch(
            "event", cfg.n_events,
            inj_c6=inj if cfg.inject_site == "c5" else 0,
            inj_c7=inj if cfg.inject_site == "c6" else 0,
            inj_fc=inj if cfg.inject_site == "c7" else 0,
        ),
        # rigid softmax needs a reject class for negative RoIs: N+1 outputs,
        # background last; scoring drops it so probs stay length N
        "rigid": branch("rigid", cfg.n_rigid + 1),
        "nonrigid": branch("nonrigid", cfg.n_nonrigid),
    }

    rng = np.random.default_rng(seed)
    params = {}
    for spec in shared_specs:
        for pname, p in nn.init_layer_params(spec, rng, cfg.init, cfg.init_std).items():
            params[f"{spec.name}.{pname}"] = p
    for bname in ("event", "rigid", "nonrigid"):
        for lname in ("c6", "c7", "fc"):
            spec = branch_specs[bname][lname]
            for pname, p in nn.init_layer_params(spec, rng, cfg.init, cfg.init_std).items():
                params[f"{spec.name}.{pname}"] = p

    return Model(cfg, params, shared_specs, branch_specs, shapes)


def forward_detection(model: Model, images: T.Tensor, rois, branch: str):
    """Spec-level entry: backbone + one detection branch over the given RoIs.

    Returns (list of scored PerRoIFeatureMaps, logits tensor).
    """
    c5 = model.backbone(images)
    maps, logits, probs = model.detect(c5, rois, branch)
    scored = [
        R.PerRoIFeatureMap(
            source=R.RoI(r.image_index, r.box, probs=probs[i]),
            map=T.row(maps, i),
        )
        for i, r in enumerate(rois)
    ]
    return scored, logits


def forward_event(model: Model, images: T.Tensor, combined_rigid=None, combined_nonrigid=None):
    """Spec-level entry: backbone + event branch with optional injection."""
    c5 = model.backbone(images)
    return model.forward_event(c5, combined_rigid, combined_nonrigid)
