"""Retrieval evaluation: CMC Rank-k / mAP under SYSU-style and symmetric protocols."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "Mode",
    "Direction",
    "EvalProtocol",
    "EvalResult",
    "inference_feature",
    "compute_cmc_map",
    "run_protocol",
    "extract_features",
    "evaluate_model",
    "format_table",
    "write_report",
]


class Mode(str, Enum):
    ALL_SEARCH = "ALL_SEARCH"
    INDOOR_SEARCH = "INDOOR_SEARCH"
    SYMMETRIC = "SYMMETRIC"


class Direction(str, Enum):
    VIS2IR = "VIS2IR"
    IR2VIS = "IR2VIS"


@dataclass
class EvalProtocol:
    mode: Mode = Mode.ALL_SEARCH
    shot: int = 1
    trials: int = 10
    direction: Direction = Direction.IR2VIS
    indoor_cameras: tuple = ()
    max_rank: int = 20

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.direction = Direction(self.direction)
        self.indoor_cameras = tuple(int(c) for c in self.indoor_cameras)
        if self.shot not in (1, 10):
            raise ValueError("shot must be 1 (single-shot) or 10 (multi-shot)")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        if self.mode is Mode.INDOOR_SEARCH and not self.indoor_cameras:
            raise ValueError("INDOOR_SEARCH needs indoor_cameras")

    def to_dict(self):
        d = asdict(self)
        d["mode"], d["direction"] = self.mode.value, self.direction.value
        d["indoor_cameras"] = list(self.indoor_cameras)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    per_trial: list = field(default_factory=list)
    num_queries: int = 0
    num_skipped: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self):
        return {
            "cmc": [float(v) for v in self.cmc],
            "map": float(self.map),
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
            "per_trial": [
                {"cmc": [float(v) for v in t.cmc], "map": float(t.map),
                 "num_queries": t.num_queries, "num_skipped": t.num_skipped}
                for t in self.per_trial
            ],
        }


def inference_feature(bundle):
    """Concatenate post-BNNeck ``Rg, R1..RN, Qg, Q1..QM`` and L2-normalize."""
    feat = torch.cat([*bundle.p5_bn, *bundle.p4_bn], dim=1)
    return F.normalize(feat, dim=1)


def compute_cmc_map(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
                    max_rank=None) -> EvalResult:
    """Rank the gallery by descending dot product and score every query.

    CMC(k) is the fraction of scored queries whose first match is at rank <= k.
    AP is the mean over matches of precision at that match. Queries with no
    gallery match are skipped and counted in ``num_skipped``. Ties in
    similarity are broken by gallery index. Camera ids are accepted for
    protocol bookkeeping; same-camera matches are not filtered.
    """
    qf = np.asarray(query_feats, dtype=np.float64)
    gf = np.asarray(gallery_feats, dtype=np.float64)
    q_ids, g_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    if gf.shape[0] == 0:
        raise ValueError("empty gallery")
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dimension mismatch {qf.shape} vs {gf.shape}")
    n_gallery = gf.shape[0]
    max_rank = n_gallery if max_rank is None else min(max_rank, n_gallery)

    order = np.argsort(-(qf @ gf.T), axis=1, kind="stable")
    matches = g_ids[order] == q_ids[:, None]
    valid = matches.any(axis=1)
    matches = matches[valid]
    if not len(matches):
        return EvalResult(cmc=np.zeros(max_rank), map=0.0, num_queries=0, num_skipped=int((~valid).sum()))

    first = matches.argmax(axis=1)
    cmc = (first[:, None] <= np.arange(max_rank)[None, :]).mean(axis=0)
    # AP is a ratio of small integers; summing exactly and rounding once makes
    # e.g. precisions 1/1 and 2/3 give the double nearest 5/6
    total = Fraction(0)
    for row in matches:
        pos = np.flatnonzero(row) + 1
        total += sum(Fraction(k, int(r)) for k, r in enumerate(pos, 1)) / len(pos)
    return EvalResult(cmc=cmc, map=float(total / len(matches)), num_queries=int(valid.sum()),
                      num_skipped=int((~valid).sum()))


def _arrays(records):
    ids = np.array([r.person_id for r in records])
    cams = np.array([r.camera_id for r in records])
    mods = np.array([r.modality for r in records])
    return ids, cams, mods


def run_protocol(features, records, protocol: EvalProtocol, seed=0) -> EvalResult:
    """Evaluate precomputed features (row ``i`` belongs to ``records[i]``).

    ALL_SEARCH / INDOOR_SEARCH: queries are every IR image; each trial draws
    ``shot`` VIS images per (identity, eligible camera) for the gallery, with
    the trial RNG seeded by ``(seed, trial)``. Metrics are trial means.
    SYMMETRIC: the direction's source modality queries the whole target
    modality once.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] != len(records):
        raise ValueError("one feature row per record required")
    ids, cams, mods = _arrays(records)
    max_rank = protocol.max_rank

    if protocol.mode is Mode.SYMMETRIC:
        src, dst = ("VIS", "IR") if protocol.direction is Direction.VIS2IR else ("IR", "VIS")
        q, g = np.flatnonzero(mods == src), np.flatnonzero(mods == dst)
        missing = set(ids[q]) - set(ids[g])
        if missing:
            raise ValueError(f"identities {sorted(missing)} absent from the {dst} gallery")
        res = compute_cmc_map(feats[q], ids[q], cams[q], feats[g], ids[g], cams[g], max_rank=max_rank)
        res.per_trial = [res]
        return _aggregate([res])

    q = np.flatnonzero(mods == "IR")
    vis = np.flatnonzero(mods == "VIS")
    if protocol.mode is Mode.INDOOR_SEARCH:
        vis = vis[np.isin(cams[vis], protocol.indoor_cameras)]
    missing = set(ids[q]) - set(ids[vis])
    if missing:
        raise ValueError(f"identities {sorted(missing)} absent from the VIS gallery")

    groups = {}
    for i in vis:
        groups.setdefault((ids[i], cams[i]), []).append(i)
    keys = sorted(groups)
    trials = []
    for t in range(protocol.trials):
        rng = np.random.default_rng([seed, t])
        g = []
        for key in keys:
            members = groups[key]
            take = min(protocol.shot, len(members))
            g.extend(sorted(rng.choice(members, size=take, replace=False).tolist()))
        g = np.array(g)
        trials.append(compute_cmc_map(feats[q], ids[q], cams[q], feats[g], ids[g], cams[g],
                                      max_rank=max_rank))
    return _aggregate(trials)


def _aggregate(trials):
    width = min(len(t.cmc) for t in trials)
    cmc = np.mean([t.cmc[:width] for t in trials], axis=0)
    return EvalResult(cmc=cmc, map=float(np.mean([t.map for t in trials])), per_trial=list(trials),
                      num_queries=trials[0].num_queries, num_skipped=trials[0].num_skipped)


@torch.no_grad()
def extract_features(model, records, image_size, batch_size=32, dtype=torch.float32):
    """Inference descriptors for every record, in record order (eval mode)."""
    from .data import load_image_tensor, map_ordered

    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            images = torch.stack(map_ordered(lambda r: load_image_tensor(r.image_path, image_size),
                                             chunk)).to(dtype)
            out.append(model.inference_features(images, [r.modality for r in chunk]))
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()


def evaluate_model(model, records, protocol, seed=0, batch_size=32, dtype=torch.float32):
    size = (model.cfg.input_height, model.cfg.input_width)
    feats = extract_features(model, records, size, batch_size=batch_size, dtype=dtype)
    return run_protocol(feats, records, protocol, seed=seed)


def format_table(protocol, result, ranks=(1, 5, 10, 20)) -> str:
    ranks = [k for k in ranks if k <= len(result.cmc)]
    head = ["protocol", "shot", "trials"] + [f"R{k}" for k in ranks] + ["mAP"]
    name = protocol.mode.value if protocol.mode is not Mode.SYMMETRIC else protocol.direction.value
    row = [name, str(protocol.shot), str(len(result.per_trial))]
    row += [f"{100 * result.cmc[k - 1]:.2f}" for k in ranks] + [f"{100 * result.map:.2f}"]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([line(head), "-+-".join("-" * w for w in widths), line(row)]) + "\n"


def write_report(path, protocol, result):
    report = {
        "protocol": protocol.mode.value,
        "direction": protocol.direction.value,
        "shot": protocol.shot,
        "trials": len(result.per_trial),
        **result.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
