"""Toy multi-scale single-shot detector with keyed feature-map permutation.

A stack of stride-2 conv stages produces one feature map per stage; the
last few stages feed class/box heads (SSD-style, shrunk to desk scale).
When a secret key is supplied to ``forward``, the channels of every
configured site are permuted by that site's derived permutation before the
activations flow onward — the heads fed from a permuted site therefore see
scrambled features unless the key used at test time matches training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from featlock.errors import ConfigError, DimensionError
from featlock.keyed_transforms import SecretKey, derive_permutation

DEFAULT_PYRAMID = ((16, 2), (32, 2), (64, 2), (64, 2), (64, 2), (64, 2))


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture plus the set of feature-map sites to transform.

    ``pyramid`` lists (channel width, stride) per stage; ``head_levels``
    and ``encrypted_sites`` are 1-based stage indices.  ``num_classes``
    excludes background (added internally as logit 0).
    """

    input_size: int = 96
    num_classes: int = 3
    pyramid: tuple[tuple[int, int], ...] = DEFAULT_PYRAMID
    head_levels: tuple[int, ...] = (4, 5, 6)
    encrypted_sites: tuple[int, ...] = ()
    priors_per_cell: int = 2
    scale_min: float = 0.2
    scale_max: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "pyramid", tuple((int(w), int(s)) for w, s in self.pyramid))
        object.__setattr__(self, "head_levels", tuple(int(v) for v in self.head_levels))
        object.__setattr__(self, "encrypted_sites", tuple(sorted(int(v) for v in self.encrypted_sites)))
        if self.input_size < 8:
            raise ConfigError(f"input_size must be >= 8, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.pyramid:
            raise ConfigError("pyramid must have at least one stage")
        for w, s in self.pyramid:
            if w < 1 or s < 1:
                raise ConfigError(f"pyramid stage ({w}, {s}) must have width >= 1 and stride >= 1")
        valid = set(range(1, self.num_stages + 1))
        if not self.head_levels:
            raise ConfigError("head_levels must be non-empty")
        if not set(self.head_levels) <= valid:
            raise ConfigError(f"head_levels {self.head_levels} outside stages 1..{self.num_stages}")
        if len(set(self.head_levels)) != len(self.head_levels):
            raise ConfigError("head_levels contains duplicates")
        if not set(self.encrypted_sites) <= valid:
            raise ConfigError(f"encrypted_sites {self.encrypted_sites} outside stages 1..{self.num_stages}")
        if self.priors_per_cell < 1:
            raise ConfigError("priors_per_cell must be >= 1")
        if not (0 < self.scale_min <= self.scale_max):
            raise ConfigError("need 0 < scale_min <= scale_max")

    @property
    def num_stages(self) -> int:
        return len(self.pyramid)

    def site_width(self, site: int) -> int:
        return self.pyramid[site - 1][0]

    def grid_sizes(self) -> tuple[int, ...]:
        """Spatial size of each stage output (3x3 conv, padding 1)."""
        sizes = []
        size = self.input_size
        for _, stride in self.pyramid:
            size = (size - 1) // stride + 1
            sizes.append(size)
        return tuple(sizes)

    def level_scales(self) -> tuple[float, ...]:
        n = len(self.head_levels)
        if n == 1:
            return (self.scale_min,)
        return tuple(self.scale_min + (self.scale_max - self.scale_min) * i / (n - 1) for i in range(n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown detector config fields: {sorted(unknown)}")
        d = dict(d)
        if "pyramid" in d:
            d["pyramid"] = tuple(tuple(stage) for stage in d["pyramid"])
        for key in ("head_levels", "encrypted_sites"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def generate_priors(config: DetectorConfig) -> np.ndarray:
    """Fixed center-form prior set, ``(P, 4)`` as (cx, cy, w, h).

    For each head level (grid g, level scale s): cells row-major, then
    ``priors_per_cell`` square priors of side s * sqrt(2)**k per cell.
    Matches the head tensor layout in :class:`KeyedDetector`.
    """
    grids = config.grid_sizes()
    priors = []
    for scale, level in zip(config.level_scales(), config.head_levels):
        g = grids[level - 1]
        for row in range(g):
            for col in range(g):
                cx = (col + 0.5) / g
                cy = (row + 0.5) / g
                for k in range(config.priors_per_cell):
                    side = scale * (2.0 ** (k / 2.0))
                    priors.append((cx, cy, side, side))
    return np.array(priors, dtype=np.float64)


def encode_boxes(boxes: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Corner-form boxes -> (dcx, dcy, dlogw, dlogh) offsets against priors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack(
        [
            (cx - priors[:, 0]) / priors[:, 2],
            (cy - priors[:, 1]) / priors[:, 3],
            np.log(w / priors[:, 2]),
            np.log(h / priors[:, 3]),
        ],
        axis=1,
    )


def decode_boxes(offsets: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns corner-form boxes (unclipped)."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    cx = priors[:, 0] + offsets[:, 0] * priors[:, 2]
    cy = priors[:, 1] + offsets[:, 1] * priors[:, 3]
    w = priors[:, 2] * np.exp(offsets[:, 2])
    h = priors[:, 3] * np.exp(offsets[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


class KeyedDetector(nn.Module):
    """Conv pyramid with optional keyed channel permutation at selected sites."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        stages = []
        cin = 3
        for width, stride in config.pyramid:
            stages.append(
                nn.Sequential(nn.Conv2d(cin, width, 3, stride=stride, padding=1), nn.ReLU(inplace=True))
            )
            cin = width
        self.stages = nn.ModuleList(stages)
        self.cls_heads = nn.ModuleList()
        self.loc_heads = nn.ModuleList()
        for level in config.head_levels:
            width = config.site_width(level)
            a = config.priors_per_cell
            self.cls_heads.append(nn.Conv2d(width, a * (config.num_classes + 1), 3, padding=1))
            self.loc_heads.append(nn.Conv2d(width, a * 4, 3, padding=1))
        self._perm_cache: dict[str, dict[int, torch.Tensor]] = {}

    def site_permutations(self, key: SecretKey) -> dict[int, torch.Tensor]:
        """0-based gather indices per encrypted site, derived from the key."""
        cache = self._perm_cache.setdefault(key.fingerprint(), {})
        if not cache:
            for site in self.config.encrypted_sites:
                p = derive_permutation(key, self.config.site_width(site), site=site)
                cache[site] = torch.from_numpy(p.indices)
        return cache

    def forward(self, x: torch.Tensor, key: SecretKey | None = None, capture_sites: bool = False):
        """Run detection; returns (loc (N,P,4), class logits (N,P,C+1)).

        With a key, every encrypted site's channels are permuted after the
        stage activation and before anything downstream (later stages and
        that site's own heads).  Without one the pass is untransformed.
        With ``capture_sites`` a list of all post-permutation stage outputs
        is appended to the return tuple.
        """
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise DimensionError(
                f"expected input (N, 3, {self.config.input_size}, {self.config.input_size}), got {tuple(x.shape)}"
            )
        perms = self.site_permutations(key) if key is not None and self.config.encrypted_sites else {}
        head_idx = {level: i for i, level in enumerate(self.config.head_levels)}
        sites = []
        locs, logits = [], []
        n = x.shape[0]
        for site, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if site in perms:
                x = x[:, perms[site]]
            if capture_sites:
                sites.append(x)
            if site in head_idx:
                i = head_idx[site]
                loc = self.loc_heads[i](x).permute(0, 2, 3, 1).reshape(n, -1, 4)
                cls = self.cls_heads[i](x).permute(0, 2, 3, 1).reshape(n, -1, self.config.num_classes + 1)
                locs.append(loc)
                logits.append(cls)
        loc_out = torch.cat(locs, dim=1)
        cls_out = torch.cat(logits, dim=1)
        if capture_sites:
            return loc_out, cls_out, sites
        return loc_out, cls_out


def build_model(config: DetectorConfig, seed: int) -> KeyedDetector:
    """Construct a detector with deterministic (seeded) initialization."""
    torch.manual_seed(seed)
    return KeyedDetector(config)


@dataclass(frozen=True)
class Detection:
    """One decoded detection: class id, confidence, normalized corner box."""

    label: int
    score: float
    box: tuple[float, float, float, float]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first.

    Ties in score are broken by input position (stable), so results are
    deterministic for identical inputs.
    """
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        best = order.pop(0)
        keep.append(int(best))
        if not order:
            break
        rest = np.array(order)
        from featlock.evaluation import iou_matrix  # local import avoids cycle at module load

        overlaps = iou_matrix(boxes[best : best + 1], boxes[rest])[0]
        order = [int(i) for i, ov in zip(rest, overlaps) if ov <= iou_thresh]
    return keep


def decode_and_nms(
    loc: np.ndarray,
    logits: np.ndarray,
    priors: np.ndarray,
    score_thresh: float = 0.05,
    nms_iou: float = 0.45,
    top_k: int = 100,
) -> list[Detection]:
    """Decode offsets, clip to the image, and apply per-class greedy NMS.

    Returns at most ``top_k`` detections sorted by descending score.
    """
    loc = np.asarray(loc, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if loc.shape[0] != priors.shape[0] or logits.shape[0] != priors.shape[0]:
        raise DimensionError(
            f"predictions ({loc.shape[0]}, {logits.shape[0]}) not aligned with {priors.shape[0]} priors"
        )
    scores = softmax(logits, axis=1)
    boxes = np.clip(decode_boxes(loc, priors), 0.0, 1.0)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

    detections: list[Detection] = []
    num_classes = logits.shape[1] - 1
    for k in range(1, num_classes + 1):
        sel = np.flatnonzero((scores[:, k] > score_thresh) & valid)
        if sel.size == 0:
            continue
        kept = nms(boxes[sel], scores[sel, k], nms_iou)
        for i in kept:
            idx = sel[i]
            detections.append(Detection(label=k - 1, score=float(scores[idx, k]), box=tuple(boxes[idx])))
    detections.sort(key=lambda d: -d.score)
    return detections[:top_k]


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """A trained model plus the metadata needed to reload and audit it.

    ``meta`` carries a config echo, the training seed, encrypted sites, a
    key fingerprint (hash of the key bytes — never the key itself), and the
    input-shuffling block size when the model was trained on encrypted
    images.  ``history`` (per-iteration loss rows) is in-memory only.
    """

    model: KeyedDetector
    meta: dict
    history: list = field(default_factory=list)

    @property
    def config(self) -> DetectorConfig:
        return self.model.config

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model, meta = load_checkpoint(path)
        return cls(model=model, meta=meta)


def save_checkpoint(path, model: KeyedDetector, meta: dict) -> None:
    meta = dict(meta)
    meta.setdefault("format", "featlock-checkpoint")
    meta.setdefault("version", 1)
    meta["config"] = model.config.to_dict()
    meta["encrypted_sites"] = list(model.config.encrypted_sites)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path, meta_json=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[KeyedDetector, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta_json"]))
        params = {k[len("param/") :]: archive[k] for k in archive.files if k.startswith("param/")}
    config = DetectorConfig.from_dict(meta["config"])
    model = KeyedDetector(config)
    state = {k: torch.from_numpy(v) for k, v in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
