"""Manifests, identity-balanced cross-modality batches, preprocessing, synthetic data."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from PIL import Image

__all__ = [
    "MODALITIES",
    "ManifestRecord",
    "SamplerConfig",
    "AugmentConfig",
    "load_manifest",
    "write_manifest",
    "read_manifest_header",
    "make_pk_batches",
    "preprocess",
    "load_image_tensor",
    "generate_synthetic_dataset",
    "split_records",
    "MEAN",
    "STD",
]

MODALITIES = ("VIS", "IR")
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
_FIELDS = ("image_path", "person_id", "camera_id", "modality")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    person_id: int
    camera_id: int
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.person_id < 0 or self.camera_id < 0:
            raise ValueError("person_id and camera_id must be non-negative")

    def to_json(self, base_dir=None):
        d = asdict(self)
        if base_dir is not None:
            d["image_path"] = os.path.relpath(self.image_path, base_dir)
        return json.dumps(d, sort_keys=True)


def load_manifest(path):
    """Parse a JSON-lines manifest.

    Returns ``(records, id_map)`` where ``id_map`` maps original person ids to
    dense class indices in sorted order. Relative image paths resolve against
    the manifest's directory. Lines starting with ``#`` are header comments.
    """
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != set(_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected exactly the fields {list(_FIELDS)}")
            try:
                rec = ManifestRecord(
                    image_path=os.path.normpath(os.path.join(base, obj["image_path"])),
                    person_id=int(obj["person_id"]),
                    camera_id=int(obj["camera_id"]),
                    modality=obj["modality"],
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    id_map = {pid: i for i, pid in enumerate(sorted({r.person_id for r in records}))}
    return records, id_map


def read_manifest_header(path):
    """The JSON object of the first ``# {...}`` header line, or ``{}``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("#"):
        return json.loads(first[1:])
    return {}


def write_manifest(path, records, header=None):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(r.to_json(base) + "\n")
    return path


def split_records(records, test_per_modality):
    """Hold out the last ``test_per_modality`` images of each (identity, modality).

    Order follows the manifest. Returns ``(train, test)``.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.person_id, r.modality), []).append(r)
    held = set()
    for members in groups.values():
        if len(members) <= test_per_modality:
            raise ValueError("not enough images per identity and modality to hold out")
        held.update(id(r) for r in members[-test_per_modality:])
    return [r for r in records if id(r) not in held], [r for r in records if id(r) in held]


@dataclass
class SamplerConfig:
    p_ids: int = 8
    k_per_modality: int = 4
    seed: int = 0
    batches_per_epoch: int | None = None

    def __post_init__(self):
        if self.p_ids < 1 or self.k_per_modality < 1:
            raise ValueError("p_ids and k_per_modality must be positive")

    @property
    def batch_size(self):
        return 2 * self.p_ids * self.k_per_modality

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sampler config keys: {sorted(unknown)}")
        return cls(**d)


def make_pk_batches(records, cfg: SamplerConfig, epoch: int):
    """Index batches of ``p_ids`` identities x ``k_per_modality`` VIS + IR images each.

    Within a batch, every identity contributes its VIS draws then its IR
    draws. Identities are visited in a shuffled order per epoch, so each
    appears at least once; images are drawn without replacement unless an
    identity has fewer than ``k_per_modality`` in a modality. Deterministic
    given ``(cfg.seed, epoch)``.
    """
    by_id = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.person_id, {"VIS": [], "IR": []})[r.modality].append(i)
    for pid, mods in by_id.items():
        for m in MODALITIES:
            if not mods[m]:
                raise ValueError(f"identity {pid} has no {m} images; cannot train on this manifest")
    pids = sorted(by_id)
    if len(pids) < cfg.p_ids:
        raise ValueError(f"{len(pids)} identities available, p_ids={cfg.p_ids}")

    rng = np.random.default_rng([cfg.seed, epoch])
    n_batches = cfg.batches_per_epoch or max(
        math.ceil(len(pids) / cfg.p_ids), math.ceil(len(records) / cfg.batch_size))
    order = []
    while len(order) < n_batches * cfg.p_ids:
        order.extend(rng.permutation(pids).tolist())

    batches = []
    for b in range(n_batches):
        chosen = order[b * cfg.p_ids:(b + 1) * cfg.p_ids]
        # a duplicate id inside one batch would break the balance; swap it out
        seen = set()
        for j, pid in enumerate(chosen):
            if pid in seen:
                spare = [p for p in pids if p not in seen and p not in chosen[j + 1:]]
                chosen[j] = pid = spare[int(rng.integers(len(spare)))]
            seen.add(pid)
        batch = []
        for pid in chosen:
            for m in MODALITIES:
                pool = by_id[pid][m]
                replace = len(pool) < cfg.k_per_modality
                batch.extend(int(v) for v in rng.choice(pool, size=cfg.k_per_modality, replace=replace))
        batches.append(batch)
    return batches


@dataclass
class AugmentConfig:
    flip: bool = True
    pad_crop: bool = True
    pad: int = 10
    erase: bool = True
    erase_p: float = 0.5

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)


def _load_rgb(image, size):
    if isinstance(image, (str, os.PathLike)):
        try:
            with Image.open(image) as im:
                im = im.convert("RGB")
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot decode image {image}: {exc}") from None
    elif isinstance(image, Image.Image):
        im = image.convert("RGB")
    else:
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        im = Image.fromarray(arr.astype(np.uint8))
    h, w = size
    if im.size != (w, h):
        im = im.resize((w, h), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0  # (H, W, 3) in [0, 1]


def _random_erase(arr, rng, p):
    if rng.random() >= p:
        return arr
    h, w, _ = arr.shape
    for _ in range(100):
        area = rng.uniform(0.02, 0.4) * h * w
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        eh, ew = int(round(math.sqrt(area * aspect))), int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y, x = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
            arr = arr.copy()
            arr[y:y + eh, x:x + ew] = MEAN  # zero after normalization
            return arr
    return arr


def preprocess(image, train=False, seed=0, size=(384, 144), augment: AugmentConfig | None = None):
    """Image (path, PIL image or uint8 array) to a normalized ``(3, H, W)`` float tensor.

    Train mode applies horizontal flip, zero-pad random crop and random
    erasing, each seeded by ``seed``. IR images come out as three equal channels.
    """
    arr = _load_rgb(image, size)
    if train:
        aug = augment or AugmentConfig()
        rng = np.random.default_rng(seed)
        if aug.flip and rng.random() < 0.5:
            arr = arr[:, ::-1]
        if aug.pad_crop and aug.pad > 0:
            h, w, _ = arr.shape
            padded = np.zeros((h + 2 * aug.pad, w + 2 * aug.pad, 3), dtype=arr.dtype)
            padded[aug.pad:aug.pad + h, aug.pad:aug.pad + w] = arr
            y, x = rng.integers(0, 2 * aug.pad + 1, size=2)
            arr = padded[y:y + h, x:x + w]
        if aug.erase:
            arr = _random_erase(arr, rng, aug.erase_p)
    arr = (arr - np.asarray(MEAN, dtype=np.float32)) / np.asarray(STD, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def num_workers():
    """Preprocessing worker count from ``WRIM_NUM_WORKERS`` (default 1, i.e. inline)."""
    raw = os.environ.get("WRIM_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"WRIM_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("WRIM_NUM_WORKERS must be >= 1")
    return n


def map_ordered(fn, items, workers=None):
    """``[fn(x) for x in items]``, optionally on a thread pool; output order is preserved."""
    workers = workers or num_workers()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_image_tensor(path, size):
    return preprocess(path, train=False, size=size)


# ---------------------------------------------------------------------------
# synthetic paired-modality data


def _draw_latents(num_ids, rng, min_sep):
    """Per-identity body layout; shape parameters in [0, 1], min L-inf gap ``min_sep``."""
    latents = []
    attempts = 0
    while len(latents) < num_ids:
        attempts += 1
        if attempts > 100000:
            raise RuntimeError("could not separate identity latents; lower min_sep")
        shape = rng.random(6)
        if any(np.abs(shape - other["shape"]).max() < min_sep for other in latents):
            continue
        latents.append({
            "shape": shape,
            "colors": rng.random((4, 3)),
        })
    return latents


def _thermal(rgb):
    """Grayscale emission of a clothing colour: inverted, re-weighted luminance."""
    lum = float(np.dot(rgb, (0.6, 0.1, 0.3)))
    return 0.3 + 0.7 * (1.0 - lum) ** 1.5


def _render(latent, modality, size, rng):
    h, w = size
    s = latent["shape"]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = rng.uniform(0.95, 1.05)
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    top = h * (0.05 + rng.uniform(-0.03, 0.03))
    u = h * 0.9 * scale

    head_r = u * (0.04 + 0.06 * s[0])
    torso_w = w * (0.2 + 0.4 * s[1]) * scale
    torso_h = u * (0.2 + 0.2 * s[2])
    leg_gap = w * (0.02 + 0.16 * s[3]) * scale
    leg_w = w * (0.06 + 0.1 * s[4]) * scale
    stripe_n = 1 + int(round(3 * s[5]))

    head_cy = top + head_r
    torso_top = head_cy + head_r * 1.1
    torso_bot = torso_top + torso_h
    leg_bot = min(h - 1.0, top + u)

    parts = np.zeros((h, w), dtype=np.int64)  # 0 background
    parts[(yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r ** 2] = 1
    torso = (np.abs(xx - cx) <= torso_w / 2) & (yy >= torso_top) & (yy < torso_bot)
    parts[torso] = 2
    stripe_band = np.floor((yy - torso_top) / torso_h * (2 * stripe_n + 1)).astype(int) % 2 == 1
    parts[torso & stripe_band] = 3
    for side in (-1, 1):
        lx = cx + side * (leg_gap / 2 + leg_w / 2)
        parts[(np.abs(xx - lx) <= leg_w / 2) & (yy >= torso_bot) & (yy < leg_bot)] = 4

    if modality == "VIS":
        bg = rng.uniform(0.35, 0.65) + rng.uniform(-0.1, 0.1, size=3)
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        img += 0.06 * rng.standard_normal((h // 4 + 1, w // 4 + 1, 3)).repeat(4, 0).repeat(4, 1)[:h, :w]
        cast = rng.uniform(0.9, 1.1, size=3)
        for p in range(1, 5):
            img[parts == p] = latent["colors"][p - 1] * cast
        img *= rng.uniform(0.85, 1.1)
        img += rng.normal(0, 0.03, size=img.shape)
    else:
        bg = rng.uniform(0.05, 0.25)
        gray = np.full((h, w), bg) + 0.05 * rng.standard_normal((h // 4 + 1, w // 4 + 1)).repeat(4, 0).repeat(4, 1)[:h, :w]
        for p in range(1, 5):
            gray[parts == p] = _thermal(latent["colors"][p - 1]) * rng.uniform(0.95, 1.05)
        gray = gray * rng.uniform(0.9, 1.1) + rng.normal(0, 0.04, size=gray.shape)
        img = np.repeat(gray[..., None], 3, axis=2)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic_dataset(num_ids, per_id_per_modality, image_size=(96, 48), seed=0, out_dir=".",
                               min_separation=0.12):
    """Render a paired VIS/IR identity set and write PNGs plus ``manifest.jsonl``.

    Each identity is a silhouette with its own head size, torso width/height,
    leg spacing/width and stripe count. VIS renders use identity colours on a
    textured, randomly tinted background; IR renders map each part colour through a
    fixed inverted-luminance transform onto a dark grayscale background, so
    raw pixels do not match across modalities while the silhouette and the
    part intensity ordering still identify the person. VIS images come from cameras 0-1, IR from cameras 2-3.
    Deterministic given ``seed``. Returns the manifest path.
    """
    image_size = tuple(int(v) for v in image_size)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    latents = _draw_latents(num_ids, rng, min_separation)
    records = []
    for pid, latent in enumerate(latents):
        for m, cams in (("VIS", (0, 1)), ("IR", (2, 3))):
            for j in range(per_id_per_modality):
                img_rng = np.random.default_rng([seed, pid, MODALITIES.index(m), j])
                arr = _render(latent, m, image_size, img_rng)
                rel = os.path.join("images", f"{pid:04d}_{m}_{j:03d}.png")
                full = os.path.join(out_dir, rel)
                os.makedirs(os.path.dirname(full), exist_ok=True)
                if m == "IR":
                    Image.fromarray(np.ascontiguousarray(arr[..., 0])).save(full)
                else:
                    Image.fromarray(arr).save(full)
                records.append(ManifestRecord(os.path.abspath(full), pid, cams[j % 2], m))
    header = {"generator": {
        "num_ids": num_ids, "per_id_per_modality": per_id_per_modality,
        "image_size": list(image_size), "seed": seed, "min_separation": min_separation,
    }}
    return write_manifest(os.path.join(out_dir, "manifest.jsonl"), records, header=header)
