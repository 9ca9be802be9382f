"""Evaluation protocol: feature statistics, FID, similarity score,
zero-shot classification accuracy, and the probe studies.

The feature space comes from a small scene classifier trained on the toy
corpus (a stand-in for a large pretrained feature network), so every
distance reported here is a toy-scale number, comparable only within this
artifact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import scipy.ndimage
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as toydata
from .checkpoints import CheckpointManifest, load_manifest, load_state, save_checkpoint
from .data import Manifest, luminance
from .diffusion import Pipeline, sample_batch
from .seeding import derive_seed, seeded_init, torch_generator
from .textenc import DualEncoder, Tokenizer, _tokenize_all
from .vae import images_from_manifest, to_bchw


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        n, f = features.shape
        if n < f + 1:
            warnings.warn(
                f"only {n} samples for {f}-dim features; covariance is rank-deficient",
                stacklevel=2,
            )
        mu = features.mean(axis=0)
        sigma = np.cov(features, rowvar=False)
        return cls(mu=mu, sigma=np.atleast_2d(sigma), n=n)


def fid(stats_r: FeatureStats, stats_g: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits.

    The matrix square root is taken by symmetric eigendecomposition of
    S_r^{1/2} S_g S_r^{1/2}; negative eigenvalues are clamped to zero and a
    warning fires if the product drifts measurably from symmetric.
    """
    if stats_r.mu.shape != stats_g.mu.shape:
        raise ValueError(
            f"feature dimension mismatch: {stats_r.mu.shape} vs {stats_g.mu.shape}"
        )
    for s in (stats_r, stats_g):
        if not (np.isfinite(s.mu).all() and np.isfinite(s.sigma).all()):
            raise ValueError("non-finite feature statistics")
    diff = stats_r.mu - stats_g.mu
    evals_r, evecs_r = np.linalg.eigh(stats_r.sigma)
    root_r = evecs_r @ np.diag(np.sqrt(np.clip(evals_r, 0.0, None))) @ evecs_r.T
    inner = root_r @ stats_g.sigma @ root_r
    asym = np.abs(inner - inner.T).max()
    scale = max(np.abs(inner).max(), 1e-30)
    if asym / scale > 1e-6:
        warnings.warn(f"covariance product asymmetry {asym / scale:.2e}", stacklevel=2)
    evals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.clip(evals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(stats_r.sigma) + np.trace(stats_g.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def clip_score_from_embeddings(image_embs: np.ndarray, text_embs: np.ndarray) -> float:
    """100 x mean cosine similarity over paired unit-norm embeddings."""
    image_embs, text_embs = np.asarray(image_embs), np.asarray(text_embs)
    if len(image_embs) != len(text_embs) or len(image_embs) < 1:
        raise ValueError(
            f"need equal, non-empty lists; got {len(image_embs)} images, {len(text_embs)} texts"
        )
    num = (image_embs * text_embs).sum(axis=1)
    denom = np.linalg.norm(image_embs, axis=1) * np.linalg.norm(text_embs, axis=1)
    return float(100.0 * np.mean(num / np.maximum(denom, 1e-12)))


@torch.no_grad()
def clip_score(
    images: list[np.ndarray], texts: list[str], model: DualEncoder, tokenizer: Tokenizer
) -> float:
    if len(images) != len(texts) or len(images) < 1:
        raise ValueError(f"need equal, non-empty lists; got {len(images)} vs {len(texts)}")
    img_embs = model.image(to_bchw(np.stack(images))).numpy()
    ids, masks = _tokenize_all(tokenizer, texts)
    _, pooled = model.text(ids, masks)
    return clip_score_from_embeddings(img_embs, pooled.numpy())


# ---------------------------------------------------------------------------
# Feature model (classifier whose penultimate layer is the feature space)
# ---------------------------------------------------------------------------


@dataclass
class FeatureModelConfig:
    width: int = 16
    n_classes: int = 6
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return 4 * self.width


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class FeatureModel(nn.Module):
    def __init__(self, config: FeatureModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.width
        with seeded_init(seed, "feature-model"):
            self.body = nn.Sequential(
                nn.Conv2d(3, w, 3, stride=2, padding=1), _gn(w), nn.SiLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _gn(2 * w), nn.SiLU(),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), _gn(4 * w), nn.SiLU(),
            )
            self.head = nn.Linear(4 * w, config.n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def class_index(scene: str) -> int:
    return toydata.SCENE_CLASSES.index(scene)


def labelled_images(manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    records = manifest.select(split=split, modality="RGB")
    images = images_from_manifest(manifest, split)
    labels = np.array([class_index(r.scene_class) for r in records])
    return images, labels


def train_classifier(
    images: np.ndarray, labels: np.ndarray, config: FeatureModelConfig
) -> FeatureModel:
    """Fit a fresh classifier; fully determined by config.seed."""
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"need at least 2 classes to train, got {classes.size}")
    model = FeatureModel(config, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    x = to_bchw(images)
    y = torch.from_numpy(labels).long()
    gen = torch_generator(config.seed, "classifier")
    n = len(labels)
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            sel = perm[start : start + config.batch_size]
            loss = F.cross_entropy(model(x[sel]), y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def classifier_accuracy(model: FeatureModel, images: np.ndarray, labels: np.ndarray) -> float:
    preds = model(to_bchw(images)).argmax(dim=1).numpy()
    return float(np.mean(preds == labels))


def fit_feature_extractor(
    manifest: Manifest, config: FeatureModelConfig, out_dir: Path | str
) -> CheckpointManifest:
    """Train the shared feature model on the labelled train split."""
    images, labels = labelled_images(manifest, "train")
    model = train_classifier(images, labels, config)
    test_images, test_labels = labelled_images(manifest, "test")
    accuracy = classifier_accuracy(model, test_images, test_labels)
    return save_checkpoint(
        out_dir, "feature-model", model.state_dict(),
        config=asdict(config),
        metrics={"test_accuracy": accuracy, "feature_dim": config.feature_dim},
    )


def load_feature_model(path: Path | str) -> tuple[FeatureModel, CheckpointManifest]:
    manifest = load_manifest(path, produced_by="toyearth eval fid (fit stage)")
    model = FeatureModel(FeatureModelConfig(**manifest.config))
    model.load_state_dict(load_state(path))
    model.eval()
    return model, manifest


@torch.no_grad()
def extract_features(model: FeatureModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch):
        out.append(model.features(to_bchw(images[start : start + batch])).numpy())
    return np.concatenate(out)


def feature_stats(model: FeatureModel, images: np.ndarray) -> FeatureStats:
    return FeatureStats.from_features(extract_features(model, images))


# ---------------------------------------------------------------------------
# Zero-shot classification overall accuracy
# ---------------------------------------------------------------------------


def cls_oa(
    generated: list[tuple[np.ndarray, int]],
    real_test_manifest: Manifest,
    config: FeatureModelConfig,
) -> float:
    """Train a fresh classifier on generated images only; score on real test."""
    test_images, test_labels = labelled_images(real_test_manifest, "test")
    gen_labels = np.array([label for _, label in generated])
    missing = set(np.unique(test_labels)) - set(np.unique(gen_labels))
    if missing:
        names = [toydata.SCENE_CLASSES[i] for i in sorted(missing)]
        raise ValueError(f"generated set is missing classes: {names}")
    gen_images = np.stack([img for img, _ in generated])
    model = train_classifier(gen_images, gen_labels, config)
    return classifier_accuracy(model, test_images, test_labels)


# ---------------------------------------------------------------------------
# Probes and studies
# ---------------------------------------------------------------------------


def foreground_threshold(scene: str = "storage_tanks", color: str = "white") -> float:
    """Midpoint between the class background and object palette luminance."""
    bg = np.array(toydata.BACKGROUNDS[scene])[None, None]
    obj = np.array(toydata.PALETTE[color])[None, None]
    return float((luminance(bg) + luminance(obj)) / 2.0)


def measure_objects(image: np.ndarray, threshold: float) -> tuple[int, list[float]]:
    """Connected bright components and their box diameters."""
    labels, count = scipy.ndimage.label(luminance(image) > threshold)
    boxes = scipy.ndimage.find_objects(labels)
    diameters = [float(max(b[0].stop - b[0].start, b[1].stop - b[1].start)) for b in boxes]
    return count, diameters


def probe_rows_from_images(
    images_by_resolution: dict[float, np.ndarray], threshold: float
) -> list[dict]:
    """Object-size measurement per resolution, with a detectability flag."""
    rows = []
    for resolution in sorted(images_by_resolution):
        images = images_by_resolution[resolution]
        diameters: list[float] = []
        empty = 0
        for img in images:
            count, diams = measure_objects(img, threshold)
            if count == 0:
                empty += 1
            diameters.extend(diams)
        flagged = empty > 0.5 * len(images)
        rows.append(
            {
                "resolution_m_per_px": resolution,
                "mean_object_px_diameter": float(np.mean(diameters)) if diameters else 0.0,
                "detected_fraction": 1.0 - empty / len(images),
                "flagged": flagged,
            }
        )
    return rows


def resolution_probe(
    pipeline: Pipeline,
    prompt: str,
    resolutions: list[float],
    n_per_res: int,
    threshold: float | None = None,
    omega: float = 3.0,
    seed: int = 0,
) -> list[dict]:
    """Generate at each resolution and measure mean object pixel size."""
    threshold = foreground_threshold() if threshold is None else threshold
    images_by_resolution = {}
    for resolution in resolutions:
        seeds = [derive_seed(seed, "resprobe", resolution, i) for i in range(n_per_res)]
        images_by_resolution[resolution] = sample_batch(
            pipeline, [prompt] * n_per_res, [resolution] * n_per_res, seeds, omega
        )
    return probe_rows_from_images(images_by_resolution, threshold)


def object_count_probe(
    pipeline: Pipeline,
    prompts_with_counts: list[tuple[str, int]],
    n_per_prompt: int,
    threshold: float | None = None,
    resolution: float = 1.0,
    omega: float = 3.0,
    seed: int = 0,
) -> list[dict]:
    """Requested vs generated object counts; diagnostic only."""
    threshold = foreground_threshold() if threshold is None else threshold
    rows = []
    for prompt, requested in prompts_with_counts:
        seeds = [derive_seed(seed, "countprobe", prompt, i) for i in range(n_per_prompt)]
        images = sample_batch(
            pipeline, [prompt] * n_per_prompt, [resolution] * n_per_prompt, seeds, omega
        )
        counts = [measure_objects(img, threshold)[0] for img in images]
        rows.append(
            {
                "requested": requested,
                "mean_generated": float(np.mean(counts)),
                "mae": float(np.mean([abs(c - requested) for c in counts])),
            }
        )
    return rows


def count_probe_rows_from_images(
    images_with_requested: list[tuple[np.ndarray, int]], threshold: float
) -> list[dict]:
    rows = []
    for img, requested in images_with_requested:
        count, _ = measure_objects(img, threshold)
        rows.append({"requested": requested, "mean_generated": float(count),
                     "mae": float(abs(count - requested))})
    return rows


def guidance_sweep(
    pipeline: Pipeline,
    feature_model: FeatureModel,
    real_stats: FeatureStats,
    test_manifest: Manifest,
    omegas: list[float],
    n_per_omega: int,
    classifier_config: FeatureModelConfig,
    seed: int = 0,
) -> list[dict]:
    """One (omega, fid, cls_oa) row per guidance scale, fixed seeds."""
    if not omegas:
        raise ValueError("omega list must be non-empty")
    records = test_manifest.select(split="test", modality="RGB")
    prompts = [(r.caption, class_index(r.scene_class)) for r in records]
    rows = []
    for omega in omegas:
        chosen = [prompts[i % len(prompts)] for i in range(n_per_omega)]
        # keep every class represented so the accuracy metric is defined
        by_class: dict[int, tuple[str, int]] = {}
        for p in prompts:
            by_class.setdefault(p[1], p)
        for k, p in enumerate(by_class.values()):
            chosen[k % len(chosen)] = p
        seeds = [derive_seed(seed, "sweep", omega, i) for i in range(n_per_omega)]
        images = sample_batch(
            pipeline,
            [c[0] for c in chosen],
            [None] * n_per_omega,
            seeds,
            omega,
        )
        stats_g = feature_stats(feature_model, images)
        accuracy = cls_oa(
            [(images[i], chosen[i][1]) for i in range(n_per_omega)],
            test_manifest, classifier_config,
        )
        rows.append({"omega": omega, "fid": fid(real_stats, stats_g), "cls_oa": accuracy})
    return rows


def augmentation_study(
    base_train_manifest: Manifest,
    synthetic_set: list[tuple[np.ndarray, int]],
    test_manifest: Manifest,
    classifier_configs: dict[str, FeatureModelConfig],
) -> list[dict]:
    """Paired with/without-synthetic accuracies per classifier config."""
    base_images, base_labels = labelled_images(base_train_manifest, "train")
    test_images, test_labels = labelled_images(test_manifest, "test")
    if synthetic_set:
        extra_labels = np.unique([label for _, label in synthetic_set])
        if set(extra_labels) - set(np.unique(base_labels)):
            raise ValueError("synthetic set contains classes absent from base training data")
        aug_images = np.concatenate([base_images, np.stack([i for i, _ in synthetic_set])])
        aug_labels = np.concatenate([base_labels, [l for _, l in synthetic_set]])
    else:
        aug_images, aug_labels = base_images, base_labels
    rows = []
    for name, config in classifier_configs.items():
        without = classifier_accuracy(
            train_classifier(base_images, base_labels, config), test_images, test_labels
        )
        with_aug = classifier_accuracy(
            train_classifier(aug_images, aug_labels, config), test_images, test_labels
        )
        rows.append(
            {"classifier": name, "acc_without": without, "acc_with": with_aug,
             "delta": with_aug - without}
        )
    return rows


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(rows: list[dict], path: Path | str) -> str:
    """Tab-separated table, one row per line, header first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        text = ""
    else:
        header = "\t".join(rows[0].keys())
        lines = ["\t".join(format_value(v) for v in row.values()) for row in rows]
        text = "\n".join([header] + lines) + "\n"
    path.write_text(text, encoding="utf-8")
    return text


def render_summary(title: str, rows: list[dict]) -> str:
    if not rows:
        return f"{title}: (empty)"
    widths = {k: max(len(k), *(len(format_value(r[k])) for r in rows)) for k in rows[0]}
    lines = [title, "  ".join(k.ljust(widths[k]) for k in rows[0])]
    for row in rows:
        lines.append("  ".join(format_value(v).ljust(widths[k]) for k, v in row.items()))
    return "\n".join(lines)
