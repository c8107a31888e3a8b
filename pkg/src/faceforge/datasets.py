"""Synthetic corpora: (image, landmarks, identity) triples with identity splits.

Layout on disk:
  root/manifest.jsonl   header line {"schema": "faceforge-corpus", ...}
                        followed by one JSON record per sample
  root/images/*.png     lossless 8-bit renders

Boundary maps are rendered on the fly (and cached in memory) so their blur
and channel configuration can change without repacking the corpus.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import LandmarkSet, landmark_record, landmarks_from_record, render_boundary
from .synth import SyntheticFaceSpec, synth_face

MANIFEST_SCHEMA = "faceforge-corpus"
MANIFEST_VERSION = 1


@dataclass
class CorpusRecord:
    uid: str
    identity: int
    image: str  # path relative to corpus root
    landmarks: LandmarkSet
    split: str = "train"
    face_spec: SyntheticFaceSpec | None = None


@dataclass
class Corpus:
    root: Path
    size: tuple[int, int]
    records: list[CorpusRecord]
    meta: dict = field(default_factory=dict)
    _image_cache: dict = field(default_factory=dict, repr=False)
    _boundary_cache: dict = field(default_factory=dict, repr=False)

    def split_records(self, split: str) -> list[CorpusRecord]:
        return [r for r in self.records if r.split == split]

    def identities(self, split: str | None = None) -> set[int]:
        return {r.identity for r in self.records if split is None or r.split == split}

    def load_image(self, rec: CorpusRecord) -> np.ndarray:
        """(3, H, W) float32 in [0, 1], cached."""
        img = self._image_cache.get(rec.uid)
        if img is None:
            arr = np.asarray(Image.open(self.root / rec.image).convert("RGB"), dtype=np.float32)
            img = (arr / 255.0).transpose(2, 0, 1)
            self._image_cache[rec.uid] = img
        return img

    def load_boundary(self, rec, mode="single", blur_sigma=1.0, cache=True) -> np.ndarray:
        """(C, H, W) float32 boundary map for a record."""
        key = (rec.uid, mode, blur_sigma)
        bnd = self._boundary_cache.get(key) if cache else None
        if bnd is None:
            bnd = render_boundary(rec.landmarks, mode=mode, blur_sigma=blur_sigma).as_channels()
            if cache:
                self._boundary_cache[key] = bnd
        return bnd


def split_by_identity(records: list[CorpusRecord], train_frac: float = 0.9, seed: int = 0):
    """Shuffle identities under `seed` and mark the first ceil(frac*n) as train.

    Mutates and returns `records`. Requires at least 2 distinct identities.
    """
    ids = sorted({r.identity for r in records})
    if len(ids) < 2:
        raise ValueError(
            f"split_by_identity requires at least 2 distinct identities, got {len(ids)}"
        )
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_train = math.ceil(train_frac * len(ids))
    train_ids = set(perm[:n_train])
    for rec in records:
        rec.split = "train" if rec.identity in train_ids else "test"
    return records


def _save_png(path: Path, image_hwc: np.ndarray) -> None:
    arr = np.clip(np.rint(image_hwc * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def build_synthetic_corpus(
    n_identities: int,
    samples_per_identity: int,
    seed: int,
    size: tuple[int, int] = (64, 64),
    root: str | Path | None = None,
    train_frac: float = 0.9,
) -> Corpus:
    """Render a corpus where each identity has fixed appearance and varied structure.

    Deterministic under `seed`. When `root` is given the images and manifest
    are written to disk; otherwise the corpus stays in memory.
    """
    rng = np.random.default_rng(seed)
    records: list[CorpusRecord] = []
    images: dict[str, np.ndarray] = {}
    for ident in range(n_identities):
        skin = tuple(np.round(0.45 + 0.40 * rng.random(3), 4))
        hair = tuple(np.round(0.05 + 0.50 * rng.random(3), 4))
        texture_seed = int(rng.integers(0, 2**31 - 1))
        for k in range(samples_per_identity):
            spec = SyntheticFaceSpec(
                skin=skin,
                hair=hair,
                texture_seed=texture_seed,
                expression=float(np.round(rng.uniform(-1, 1), 4)),
                yaw=float(np.round(rng.uniform(-1, 1), 4)),
                scale=float(np.round(rng.uniform(0.8, 1.2), 4)),
                identity_id=ident,
            )
            uid = f"{ident:04d}_{k:02d}"
            img, lms = synth_face(spec, size)
            images[uid] = img
            records.append(
                CorpusRecord(
                    uid=uid,
                    identity=ident,
                    image=f"images/{uid}.png",
                    landmarks=lms,
                    face_spec=spec,
                )
            )
    split_by_identity(records, train_frac=train_frac, seed=seed)
    meta = {
        "n_identities": n_identities,
        "samples_per_identity": samples_per_identity,
        "seed": seed,
        "train_frac": train_frac,
    }
    corpus = Corpus(root=Path(root) if root else Path("."), size=size, records=records, meta=meta)
    if root is not None:
        rootp = Path(root)
        (rootp / "images").mkdir(parents=True, exist_ok=True)
        for rec in records:
            _save_png(rootp / rec.image, images[rec.uid])
        save_manifest(corpus)
    else:
        for rec in records:  # quantize like the PNG path would
            arr = np.clip(np.rint(images[rec.uid] * 255.0), 0, 255).astype(np.float32) / 255.0
            corpus._image_cache[rec.uid] = arr.transpose(2, 0, 1)
    return corpus


def save_manifest(corpus: Corpus) -> Path:
    path = corpus.root / "manifest.jsonl"
    header = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "size": [int(corpus.size[0]), int(corpus.size[1])],
        **corpus.meta,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for rec in corpus.records:
            row = landmark_record(rec.landmarks, rec.identity, rec.image, uid=rec.uid, split=rec.split)
            if rec.face_spec is not None:
                row["face_spec"] = rec.face_spec.to_dict()
            f.write(json.dumps(row) + "\n")
    return path


def load_corpus(root: str | Path) -> Corpus:
    rootp = Path(root)
    path = rootp / "manifest.jsonl"
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path} is not a corpus manifest")
    header = lines[0]
    records = []
    for row in lines[1:]:
        spec = SyntheticFaceSpec.from_dict(row["face_spec"]) if "face_spec" in row else None
        records.append(
            CorpusRecord(
                uid=row["uid"],
                identity=int(row["identity"]),
                image=row["image"],
                landmarks=landmarks_from_record(row),
                split=row.get("split", "train"),
                face_spec=spec,
            )
        )
    size = (int(header["size"][0]), int(header["size"][1]))
    meta = {k: v for k, v in header.items() if k not in ("schema", "version", "size")}
    return Corpus(root=rootp, size=size, records=records, meta=meta)


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W) float32
    boundaries: np.ndarray  # (B, C, H, W) float32
    landmarks: list[LandmarkSet]
    uids: list[str]

    def __len__(self):
        return len(self.uids)


def iterate_batches(
    corpus: Corpus,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    split: str = "train",
    boundary_mode: str = "single",
    blur_sigma: float = 1.0,
    cache_boundaries: bool = True,
):
    """Yield every `split` record exactly once per call; short final batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    recs = corpus.split_records(split)
    if not recs:
        raise ValueError(f"corpus has no '{split}' records")
    order = np.arange(len(recs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(recs))
    for start in range(0, len(recs), batch_size):
        chunk = [recs[i] for i in order[start : start + batch_size]]
        images = np.stack([corpus.load_image(r) for r in chunk])
        bnds = np.stack(
            [corpus.load_boundary(r, boundary_mode, blur_sigma, cache_boundaries) for r in chunk]
        )
        yield Batch(images, bnds, [r.landmarks for r in chunk], [r.uid for r in chunk])


def n_batches(corpus: Corpus, batch_size: int, split: str = "train") -> int:
    return math.ceil(len(corpus.split_records(split)) / batch_size)
