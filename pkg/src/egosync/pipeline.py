"""End-to-end stages on a synthetic dataset, shared by the CLI and the tests."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .analysis import class_cca_matrix, project_2d
from .data import (DEFAULT_HARD_SHIFTS, EASY, HARD, POSITIVE, mine_negative_pairs,
                   mine_positive_pairs)
from .embed import SemiSiameseNet, StackBank, TrainConfig, embed, pair_distances, train
from .flow import HALF_WINDOW
from .synthetic import take_of
from .transfer import FeatureSequence, PoseRegressor, base_features

logger = logging.getLogger(__name__)


def split_records(dataset, split):
    ids = set(dataset.splits[split])
    return [r for r in dataset.records if r.clip_id in ids]


def mine_pairs(records, shifts=DEFAULT_HARD_SHIFTS):
    """Positives plus both negative pools for one split."""
    return (mine_positive_pairs(records)
            + mine_negative_pairs(records, "easy")
            + mine_negative_pairs(records, "hard", shifts))


def build_bank(dataset, provider, clip_to=None):
    """Stacks for every stream, normalized with training-split statistics."""
    return StackBank.from_streams(dataset.streams, provider,
                                  fit_clips=split_records(dataset, "train"), clip_to=clip_to)


def train_embedding(dataset, bank, config, shifts=DEFAULT_HARD_SHIFTS, log=None):
    model = SemiSiameseNet(config.backbone, dataset.meta["image_size"], config.normalize,
                           seed=config.seed)
    pairs = mine_pairs(split_records(dataset, "train"), shifts)
    history = train(model, pairs, bank, config, log=log)
    return model, history


def clip_times(record):
    return np.arange(record.start + HALF_WINDOW, record.end - HALF_WINDOW)


def clip_features(model, bank, dataset, record):
    """Base features and first-stream embeddings for a first-view clip."""
    t = clip_times(record)
    z = embed(model, bank.get(record.source_uri, t), "first")
    phi = base_features(dataset.streams[record.source_uri][t])
    return FeatureSequence(phi, z, t)


def split_features(model, bank, dataset, split):
    """Concatenated features and ground truth over a split's first-view clips."""
    feats, gts, owners = [], [], []
    for r in split_records(dataset, split):
        if r.view != "first":
            continue
        f = clip_features(model, bank, dataset, r)
        feats.append(f)
        gts.append(dataset.skeletons[take_of(r)][f.times])
        owners.extend([r.clip_id] * len(f))
    return FeatureSequence.concat(feats), np.concatenate(gts), np.asarray(owners)


@dataclass
class TransferResult:
    baseline: PoseRegressor
    augmented: PoseRegressor
    baseline_error: float
    augmented_error: float
    baseline_table: dict = field(default_factory=dict)
    augmented_table: dict = field(default_factory=dict)


def transfer_experiment(model, bank, dataset, regressor_params=None):
    """Fit the regressor with and without embeddings; score on held-out clips."""
    from .skeleton import error_table, sequence_error

    params = dict(regressor_params or {})
    train_f, train_y, _ = split_features(model, bank, dataset, "train")
    test_f, test_y, _ = split_features(model, bank, dataset, "test")
    base = PoseRegressor(use_embedding=False, **params).fit(train_f, train_y)
    aug = PoseRegressor(use_embedding=True, **params).fit(train_f, train_y)
    pb, pa = base.predict(test_f), aug.predict(test_f)
    return TransferResult(base, aug, sequence_error(pb, test_y), sequence_error(pa, test_y),
                          error_table(pb, test_y), error_table(pa, test_y))


def sync_statistics(model, bank, dataset, split="test", shifts=DEFAULT_HARD_SHIFTS):
    """Distance statistics and threshold accuracy on a split's pairs.

    The threshold is chosen on the training split and applied unchanged to
    ``split``; accuracy is averaged over the two classes so the larger
    negative pool does not dominate.
    """
    train_d = pair_distances(model, mine_pairs(split_records(dataset, "train"), shifts), bank)
    thr = best_threshold(train_d.positive, train_d.negative)
    d = pair_distances(model, mine_pairs(split_records(dataset, split), shifts), bank)
    acc = 0.5 * ((d.positive < thr).mean() + (d.negative >= thr).mean())

    def mean(x):
        # short clips may admit no hard negatives at the configured shifts
        return float(x.mean()) if len(x) else float("nan")

    return {
        "positive_mean": mean(d.positive),
        "negative_mean": mean(d.negative),
        "easy_mean": mean(d.easy_negative),
        "hard_mean": mean(d.hard_negative),
        "ratio": float(d.negative.mean() / d.positive.mean()),
        "threshold": float(thr),
        "accuracy": float(acc),
    }


def best_threshold(pos, neg):
    """Distance cut maximizing class-balanced accuracy (``d < cut`` means synchronized)."""
    cand = np.unique(np.concatenate([pos, neg]))
    mids = np.concatenate([[cand[0] - 1e-9], (cand[:-1] + cand[1:]) / 2, [cand[-1] + 1e-9]])
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    tpr = np.searchsorted(pos_s, mids, side="left") / len(pos_s)
    tnr = 1.0 - np.searchsorted(neg_s, mids, side="left") / len(neg_s)
    return float(mids[np.argmax(tpr + tnr)])


def class_embeddings(model, bank, dataset, split="test", third_view="third_front"):
    """First- and third-view embeddings of synchronized frames, grouped by class.

    Returns ``(first, third, groups)`` dicts keyed by activity class; groups
    hold the person id of each row.
    """
    first, third, groups = {}, {}, {}
    by_take = {}
    for r in split_records(dataset, split):
        by_take.setdefault((take_of(r), r.start), {})[r.view] = r
    for key in sorted(by_take):
        views = by_take[key]
        if "first" not in views or third_view not in views:
            continue
        rf, rt = views["first"], views[third_view]
        t = clip_times(rf)
        cls = dataset.activity_classes[rf.activity_id]
        first.setdefault(cls, []).append(embed(model, bank.get(rf.source_uri, t), "first"))
        third.setdefault(cls, []).append(embed(model, bank.get(rt.source_uri, t), "third"))
        groups.setdefault(cls, []).append(np.full(len(t), rf.person_id))
    cat = {k: np.concatenate(v) for k, v in first.items()}
    return (cat, {k: np.concatenate(v) for k, v in third.items()},
            {k: np.concatenate(v) for k, v in groups.items()})


def cca_analysis(model, bank, dataset, split="test"):
    from .synthetic import ACTIVITY_CLASSES

    first, third, _ = class_embeddings(model, bank, dataset, split)
    classes = [c for c in ACTIVITY_CLASSES if c in first]
    return class_cca_matrix(first, third, classes), classes


def activity_projection(model, bank, dataset, activities, split="test"):
    """PCA of first-view embeddings for the given activity ids."""
    zs, labels = [], []
    for r in split_records(dataset, split):
        if r.view == "first" and r.activity_id in activities:
            z = embed(model, bank.get(r.source_uri, clip_times(r)), "first")
            zs.append(z)
            labels.extend([r.activity_id] * len(z))
    return project_2d(np.concatenate(zs), "pca"), np.asarray(labels)


def default_train_config(seed=0, **overrides):
    """Desk-scale settings for the tiny backbone on the synthetic oracle."""
    params = dict(seed=seed, lr=1e-3, frames_per_pair=512)
    params.update(overrides)
    return TrainConfig(**params)


__all__ = [
    "EASY", "HARD", "POSITIVE", "TransferResult", "activity_projection", "best_threshold",
    "build_bank", "cca_analysis", "class_embeddings", "clip_features", "clip_times", "default_train_config",
    "mine_pairs", "split_features", "split_records", "sync_statistics", "train_embedding",
    "transfer_experiment",
]
