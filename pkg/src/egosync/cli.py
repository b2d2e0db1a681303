"""``egosync`` command-line entry point.

Every stage reads its inputs from and writes its outputs under one run
directory (``--out``, else ``run.out``)::

    data/       synth-data: manifest, streams, ground truth, run.json
    flows/      train-embed: precomputed optical flow per stream
    embed/      train-embed: model.ckpt, history.tsv
    features/   extract: per-split base features, embeddings, ground truth
    pose/       train-pose: baseline/augmented regressors, pose vocabulary
    eval/       eval: error tables and synchronization statistics
    analysis/   analyze cca|pca|transversal

Exit codes: 0 ok, 2 configuration error, 3 artifact error, 4 numeric error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import artifacts
from .config import load_config
from .exceptions import ConfigError, EgoSyncError, MissingArtifact

logger = logging.getLogger("egosync")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

SPLITS = ("train", "test")


class Run:
    """Resolved paths and settings for one invocation."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.root = os.path.abspath(out)
        self.seed = cfg["run.seed"]

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def stage_dir(self, name):
        path = self.path(name)
        os.makedirs(path, exist_ok=True)
        return path

    def need(self, *parts):
        path = self.path(*parts)
        if not os.path.exists(path):
            raise MissingArtifact(f"missing upstream artifact {path}; run the earlier stage first")
        return path

    def write_meta(self, stage, **extra):
        meta = dict(stage=stage, seed=self.seed, format_version=artifacts.FORMAT_VERSION,
                    config=self.cfg.as_dict(), **extra)
        meta["config"].pop("run.out", None)
        with open(self.path(stage, "run.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def _set_seeds(seed):
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _dataset(run):
    from .synthetic import load_synthetic_dataset

    run.need("data", "run.json")
    return load_synthetic_dataset(run.path("data"))


def _bank(run, dataset, stats):
    from .embed import StackBank
    from .flow import PrecomputedFlow

    flow_dir = run.need("flows")
    return StackBank.from_streams(dataset.streams, PrecomputedFlow(flow_dir), stats=stats,
                                  clip_to=run.cfg["flow.clip"])


def _model(run):
    from .embed import load_model

    return load_model(run.need("embed", "model.ckpt"))


def _features(run, split):
    from .transfer import FeatureSequence

    base = os.path.join("features", split)
    phi = artifacts.load_tensor(run.need(base + ".phi.npy"))
    z = artifacts.load_tensor(run.need(base + ".z.npy"))
    times = artifacts.load_tensor(run.need(base + ".times.npy"))
    gt = artifacts.load_tensor(run.need(base + ".gt.npy"))
    return FeatureSequence(phi, z, times), gt


def cmd_synth_data(run):
    from .synthetic import generate_synthetic_dataset

    cfg = run.cfg
    cfg.require("data.n_people", "data.n_activities", "data.n_frames")
    ds = generate_synthetic_dataset(cfg["data.n_people"], cfg["data.n_activities"],
                                    cfg["data.n_frames"], run.seed,
                                    image_size=cfg["data.image_size"], noise=cfg["data.noise"],
                                    test_fraction=cfg["data.test_fraction"])
    ds.save(run.stage_dir("data"))
    logger.info("wrote %d clips to %s", len(ds.records), run.path("data"))
    return 0


def cmd_train_embed(run):
    from .embed import TrainConfig, config_dict, save_model
    from .flow import Clip, PrecomputedFlow, make_provider, precompute_flows
    from .pipeline import build_bank, train_embedding

    cfg = run.cfg
    ds = _dataset(run)
    params = cfg.section("train")
    shifts = params.pop("hard_shifts")
    config = TrainConfig(seed=run.seed, **params)
    provider_name = cfg["flow.provider"]
    if provider_name != "precomputed":
        provider = make_provider(provider_name)
        flow_dir = run.stage_dir("flows")
        for uri, frames in sorted(ds.streams.items()):
            precompute_flows(Clip(frames, uri=uri), provider, flow_dir)
    bank = build_bank(ds, PrecomputedFlow(run.need("flows")), clip_to=cfg["flow.clip"])
    _set_seeds(run.seed)
    out = run.stage_dir("embed")
    model, history = train_embedding(ds, bank, config, shifts=shifts)
    save_model(os.path.join(out, "model.ckpt"), model, bank.stats,
               extra={"train": config_dict(config), "hard_shifts": list(shifts)})
    cols = ["step", "epoch", "loss", "batch", "positive", "easy_negative", "hard_negative"]
    artifacts.write_records(os.path.join(out, "history.tsv"), cols,
                            [[rec[c] for c in cols] for rec in history])
    run.write_meta("embed", steps=len(history))
    logger.info("trained %d steps; final loss %.4g", len(history), history[-1]["loss"])
    return 0


def cmd_extract(run):
    from .embed import parameter_checksum
    from .pipeline import split_features

    ds = _dataset(run)
    model, stats = _model(run)
    bank = _bank(run, ds, stats)
    before = parameter_checksum(model)
    out = run.stage_dir("features")
    for split in SPLITS:
        feats, gt, owners = split_features(model, bank, ds, split)
        base = os.path.join(out, split)
        artifacts.save_tensor(base + ".phi.npy", feats.phi)
        artifacts.save_tensor(base + ".z.npy", feats.z)
        artifacts.save_tensor(base + ".times.npy", feats.times)
        artifacts.save_tensor(base + ".gt.npy", gt)
        artifacts.write_records(base + ".owners.tsv", ["row", "clip_id"], list(enumerate(owners)))
        logger.info("%s: %d frames", split, len(feats))
    if parameter_checksum(model) != before:
        raise RuntimeError("embedding model changed during extraction")
    run.write_meta("features", model_checksum=before)
    return 0


def cmd_train_pose(run):
    from .skeleton import align_sequence
    from .transfer import PoseRegressor, PoseVocabulary, save_regressor, save_vocabulary

    cfg = run.cfg
    feats, gt = _features(run, "train")
    params = cfg.section("transfer")
    n_poses = params.pop("n_poses")
    out = run.stage_dir("pose")
    for name, flag in (("baseline", False), ("augmented", True)):
        reg = PoseRegressor(use_embedding=flag, seed=run.seed, **params).fit(feats, gt)
        save_regressor(os.path.join(out, name + ".ckpt"), reg)
    aligned = align_sequence(gt)
    k = min(n_poses, len(np.unique(aligned.reshape(len(aligned), -1), axis=0)))
    if k < n_poses:
        logger.warning("only %d distinct training poses; vocabulary size reduced from %d",
                       k, n_poses)
    vocab = PoseVocabulary(n_poses=k, seed=run.seed).fit(aligned)
    save_vocabulary(os.path.join(out, "vocabulary.txt"), vocab)
    run.write_meta("pose", n_poses=int(k), vocabulary_inertia=float(vocab.inertia_))
    return 0


def format_error_table(rows):
    """Text table: one row per run, joint columns then group averages (cm)."""
    names = list(rows)
    cols = list(rows[names[0]])
    width = max(len(n) for n in names)
    lines = [" ".join([f"{'':<{width}}"] + [f"{c:>9}" for c in cols])]
    for name in names:
        lines.append(" ".join([f"{name:<{width}}"] + [f"{rows[name][c]:>9.2f}" for c in cols]))
    return "\n".join(lines)


def cmd_eval(run):
    from .pipeline import sync_statistics
    from .skeleton import error_table
    from .transfer import load_regressor, load_vocabulary, nearest_indices

    feats, gt = _features(run, "test")
    base = load_regressor(run.need("pose", "baseline.ckpt"))
    aug = load_regressor(run.need("pose", "augmented.ckpt"))
    vocab = load_vocabulary(run.need("pose", "vocabulary.txt"))
    pred_aug = aug.predict(feats)
    centers = vocab.centers_.reshape(len(vocab.centers_), -1)
    snapped = vocab.centers_[nearest_indices(pred_aug.reshape(len(pred_aug), -1), centers)]
    rows = {
        "baseline": error_table(base.predict(feats), gt),
        "augmented": error_table(pred_aug, gt),
        "augmented_vocab": error_table(snapped, gt),
    }
    ds = _dataset(run)
    model, stats = _model(run)
    shifts = tuple(run.cfg["train.hard_shifts"])
    sync = sync_statistics(model, _bank(run, ds, stats), ds, shifts=shifts)

    out = run.stage_dir("eval")
    cols = list(rows["baseline"])
    artifacts.write_records(os.path.join(out, "errors.tsv"), ["run"] + cols,
                            [[n] + [r[c] for c in cols] for n, r in rows.items()])
    artifacts.write_records(os.path.join(out, "sync.tsv"), ["statistic", "value"],
                            sorted(sync.items()))
    run.write_meta("eval")

    print(format_error_table(rows))
    better = rows["augmented"]["Avg"] < rows["baseline"]["Avg"]
    print(f"augmented vs baseline average error: {rows['augmented']['Avg']:.3f} vs "
          f"{rows['baseline']['Avg']:.3f} cm ({'lower' if better else 'not lower'})")
    print(f"synchronization: distance ratio {sync['ratio']:.2f}, "
          f"held-out accuracy {sync['accuracy']:.3f}")
    return 0


def cmd_analyze(run, kind):
    from .analysis import (build_transversal, class_cca_matrix, emit_report, project_2d,
                           smoothness_ratio)
    from .embed import embed
    from .pipeline import class_embeddings, clip_times, split_records
    from .synthetic import ACTIVITY_CLASSES

    cfg = run.cfg
    out = run.path("analysis", kind)
    plots = cfg["analysis.plots"]
    if kind == "transversal":
        from .transfer import load_regressor

        feats, _ = _features(run, "test")
        reg = load_regressor(run.need("pose", "augmented.ckpt"))
        i, j = cfg["analysis.endpoints"]
        if not (0 <= i < len(feats) and 0 <= j < len(feats)):
            raise ConfigError(f"analysis.endpoints {i},{j} outside 0..{len(feats) - 1}")
        tr = build_transversal(feats.z[i], feats.z[j], feats.phi[i], feats.phi[j], reg,
                               step=cfg["analysis.step"])
        emit_report({"transversal": tr}, out, plots=plots)
        print(f"{len(tr.skeletons)} skeletons; smoothness ratio "
              f"{smoothness_ratio(tr.skeletons):.3f}")
        return 0

    ds = _dataset(run)
    model, stats = _model(run)
    bank = _bank(run, ds, stats)
    if kind == "cca":
        first, third, _ = class_embeddings(model, bank, ds)
        classes = [c for c in ACTIVITY_CLASSES if c in first]
        M = class_cca_matrix(first, third, classes, eps=cfg["analysis.cca_eps"])
        emit_report({"cca": {"matrix": M, "classes": classes}}, out, plots=plots)
        print("\t".join(["first\\third"] + classes))
        for c, row in zip(classes, M):
            print("\t".join([c] + [f"{v:.3f}" for v in row]))
        return 0

    activities = cfg["analysis.activities"]
    if cfg["analysis.method"] not in ("pca", "tsne"):
        raise ConfigError(f"analysis.method must be pca or tsne, got {cfg['analysis.method']!r}")
    zs, labels = [], []
    for r in split_records(ds, "test"):
        if r.view == "first" and r.activity_id in activities:
            z = embed(model, bank.get(r.source_uri, clip_times(r)), "first")
            zs.append(z)
            labels.extend([r.activity_id] * len(z))
    if not zs:
        raise ConfigError(f"no held-out first-view clips for activities {list(activities)}")
    pts = project_2d(np.concatenate(zs), cfg["analysis.method"], seed=run.seed)
    emit_report({"pca": {"points": pts, "labels": labels}}, out, plots=plots)
    print(f"projected {len(pts)} embeddings with {cfg['analysis.method']}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-embed": cmd_train_embed,
    "extract": cmd_extract,
    "train-pose": cmd_train_pose,
    "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' file")
    common.add_argument("--seed", type=int, metavar="N", help="overrides run.seed")
    common.add_argument("--out", metavar="DIR", help="run directory (overrides run.out)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="egosync",
                                     description="Synchronized-view embedding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    analyze = sub.add_parser("analyze", parents=[common])
    analyze.add_argument("kind", choices=("cca", "pca", "transversal"))
    return parser


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(ns.config)
        overrides = {}
        if ns.seed is not None:
            overrides["run.seed"] = ns.seed
        if ns.out is not None:
            overrides["run.out"] = ns.out
        cfg = cfg.with_overrides(**overrides)
        run = Run(cfg, cfg["run.out"])
        if ns.command == "analyze":
            return cmd_analyze(run, ns.kind)
        return COMMANDS[ns.command](run)
    except EgoSyncError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
