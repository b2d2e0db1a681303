"""Semi-Siamese first/third-view embedding network and its contrastive training.

Each stream has its own backbone and its own 100-unit projection; the final
100 -> 64 projection is a single module reachable from both streams, so it is
the only shared parameter set.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from . import artifacts
from .data import (EASY, HARD, POSITIVE, curriculum_batches, sample_frame_times, third_time,
                   valid_frame_range)
from .exceptions import BatchMismatch, ConfigError, NonFiniteLoss, ShapeMismatch
from .flow import (HALF_WINDOW, N_CHANNELS, Clip, build_stacks, check_stack, normalize_stack,
                   stack_stats)

logger = logging.getLogger(__name__)

EMBED_DIM = 64
STREAM_DIM = 100


class TinyBackbone(nn.Module):
    """Four 3x3 convolutions; flattened so blob positions survive."""

    def __init__(self, image_size=16, width=32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(N_CHANNELS, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        side = (image_size + 3) // 4
        self.out_dim = 2 * width * side * side

    def forward(self, x):
        return self.features(x)


class ResNetBackbone(nn.Module):
    """ResNet-50 with a 23-channel stem and the classifier removed."""

    def __init__(self, image_size=224):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(N_CHANNELS, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.out_dim = 2048

    def forward(self, x):
        return self.net(x)


BACKBONES = {"tiny": TinyBackbone, "resnet50": ResNetBackbone}


class SemiSiameseNet(nn.Module):
    def __init__(self, backbone="tiny", image_size=16, normalize=False, seed=0):
        super().__init__()
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        self.arch = {"backbone": backbone, "image_size": int(image_size),
                     "normalize": bool(normalize)}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.first_backbone = BACKBONES[backbone](image_size)
            self.third_backbone = BACKBONES[backbone](image_size)
            feat = self.first_backbone.out_dim
            self.first_fc = nn.Linear(feat, STREAM_DIM)
            self.third_fc = nn.Linear(feat, STREAM_DIM)
            self.shared = nn.Linear(STREAM_DIM, EMBED_DIM)
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                    if mod.bias is not None:
                        nn.init.zeros_(mod.bias)
            # Start embeddings at the margin's scale rather than the backbone's.
            nn.init.normal_(self.shared.weight, std=0.1 / STREAM_DIM ** 0.5)
        self.normalize = normalize

    @property
    def first_head(self):
        return self.shared

    @property
    def third_head(self):
        return self.shared

    def _project(self, backbone, fc, x):
        if x.ndim != 4 or x.shape[1] != N_CHANNELS:
            raise ShapeMismatch(f"expected (B, {N_CHANNELS}, H, W) input, got {tuple(x.shape)}")
        z = self.shared(torch.relu(fc(backbone(x))))
        if self.normalize:
            z = nn.functional.normalize(z, dim=1)
        return z

    def forward_first(self, x):
        return self._project(self.first_backbone, self.first_fc, x)

    def forward_third(self, x):
        return self._project(self.third_backbone, self.third_fc, x)

    def forward(self, x_first, x_third):
        return self.forward_first(x_first), self.forward_third(x_third)


def contrastive_loss(z_f, z_t, y, margin=0.9, reduction="sum"):
    """Squared distance for synchronized pairs, squared hinge for the rest.

    ``L = sum_j y_j d_j^2 + (1 - y_j) max(0, m - d_j)^2`` with
    ``d_j = ||z_f_j - z_t_j||``.
    """
    if z_f.shape != z_t.shape or z_f.shape[0] != y.shape[0]:
        raise BatchMismatch(
            f"batch shapes differ: {tuple(z_f.shape)}, {tuple(z_t.shape)}, {tuple(y.shape)}"
        )
    y = y.to(z_f.dtype)
    d2 = ((z_f - z_t) ** 2).sum(dim=1)
    # Clamp keeps the sqrt differentiable at d = 0; positives use d2 directly.
    d = torch.sqrt(torch.clamp(d2, min=1e-12))
    per = y * d2 + (1 - y) * torch.clamp(margin - d, min=0) ** 2
    if reduction == "sum":
        return per.sum()
    if reduction == "mean":
        return per.mean()
    if reduction == "none":
        return per
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class TrainConfig:
    margin: float = 0.9
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    backbone: str = "tiny"
    frames_per_pair: int = 64
    neg_ratio: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


class StackBank:
    """Normalized channel-first stacks for every full-window frame of each stream."""

    def __init__(self, stacks, stats=None):
        # uri -> (first absolute frame, array (n, 23, H, W))
        self.stacks = stacks
        self.stats = stats

    @classmethod
    def from_streams(cls, streams, provider, stats=None, fit_clips=None, clip_to=None):
        """Build every stack once.

        Without ``stats``, channel statistics are fitted on the full-window
        frames of ``fit_clips`` (records), or of every stream when omitted.
        """
        raw = {uri: build_stacks(Clip(frames, uri=uri), provider, clip_to=clip_to)
               for uri, frames in sorted(streams.items())}
        if stats is None:
            if fit_clips is None:
                fit = [raw[k] for k in sorted(raw)]
            else:
                fit = [raw[r.source_uri][np.arange(r.start, r.end - 2 * HALF_WINDOW)]
                       for r in sorted(fit_clips, key=lambda r: r.clip_id)
                       if r.end - r.start > 2 * HALF_WINDOW]
            stats = stack_stats(np.concatenate(fit))
        stacks = {uri: (HALF_WINDOW, np.ascontiguousarray(
            np.moveaxis(normalize_stack(s, stats), -1, 1)))
            for uri, s in raw.items()}
        return cls(stacks, stats)

    def get(self, uri, times):
        first, arr = self.stacks[uri]
        return arr[np.asarray(times) - first]

    def times(self, uri):
        first, arr = self.stacks[uri]
        return np.arange(first, first + len(arr))


def _to_tensor(x):
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def frame_samples(stream, config, rng):
    """Expand clip pairs into ``(pair, t_first, t_third)`` training frames."""
    samples = []
    for pair in stream:
        for t in sample_frame_times(pair, HALF_WINDOW, config.frames_per_pair, rng):
            samples.append((pair, int(t), int(third_time(pair, t))))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def train(model, pairs, bank, config, schedule=None, log=None):
    """SGD with momentum on the contrastive loss, one curriculum stage per epoch.

    ``schedule(pairs, epoch)`` returns the epoch's pair stream and defaults to
    :func:`curriculum_batches`. Returns a list of per-step log records; when
    ``log`` is a path the records are also written one JSON object per line.
    """
    if schedule is None:
        def schedule(p, epoch):
            return curriculum_batches(p, epoch, config.neg_ratio, config.seed)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    history = []
    step = 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        stream = schedule(pairs, epoch)
        rng = np.random.default_rng([config.seed, epoch])
        samples = frame_samples(stream, config, rng)
        if not samples:
            raise ValueError(f"epoch {epoch}: pair stream yields no trainable frames")
        for b in range(0, len(samples), config.batch_size):
            batch = samples[b:b + config.batch_size]
            xf = np.stack([bank.get(p.first.source_uri, [t])[0] for p, t, _ in batch])
            xt = np.stack([bank.get(p.third.source_uri, [t3])[0] for p, _, t3 in batch])
            y = torch.tensor([p.label for p, _, _ in batch])
            z_f, z_t = model(_to_tensor(xf), _to_tensor(xt))
            loss = contrastive_loss(z_f, z_t, y, config.margin)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step, sorted({p.pair_id for p, _, _ in batch}), loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            kinds = [p.difficulty for p, _, _ in batch]
            history.append({
                "step": step,
                "epoch": epoch,
                "loss": float(loss.item()),
                "batch": len(batch),
                "positive": kinds.count(POSITIVE),
                "easy_negative": kinds.count(EASY),
                "hard_negative": kinds.count(HARD),
            })
            step += 1
    model.eval()
    if log is not None:
        with open(log, "w") as f:
            for rec in history:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return history


@torch.no_grad()
def embed(model, stacks, stream="first", batch_size=256):
    """Embed channel-last ``(n, H, W, 23)`` or channel-first stacks in eval mode."""
    stacks = np.asarray(stacks)
    if stacks.ndim == 3:
        stacks = stacks[None]
    if stacks.ndim != 4:
        raise ShapeMismatch(f"expected a batch of stacks, got shape {stacks.shape}")
    if stacks.shape[1] != N_CHANNELS:
        check_stack(stacks)
        stacks = np.moveaxis(stacks, -1, 1)
    was_training = model.training
    model.eval()
    fwd = model.forward_first if stream == "first" else model.forward_third
    out = [fwd(_to_tensor(stacks[i:i + batch_size])).numpy()
           for i in range(0, len(stacks), batch_size)]
    model.train(was_training)
    if not out:
        return np.empty((0, EMBED_DIM), dtype=np.float32)
    return np.concatenate(out)


def forward_first(model, stack):
    """Embedding of one ``(H, W, 23)`` stack through the first-view stream."""
    return embed(model, check_stack(stack)[None], "first")[0]


def forward_third(model, stack):
    return embed(model, check_stack(stack)[None], "third")[0]


def save_model(path, model, stats=None, extra=None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if stats is not None:
        tensors["__stats_mean"] = np.asarray(stats.mean)
        tensors["__stats_std"] = np.asarray(stats.std)
    artifacts.write_checkpoint(path, "embed", tensors, dict(model.arch, **(extra or {})))


def load_model(path):
    """Return ``(model, stats)``; ``stats`` is ``None`` if none were saved."""
    from .flow import StackStats

    tensors, meta = artifacts.read_checkpoint(path, kind="embed")
    stats = None
    if "__stats_mean" in tensors:
        stats = StackStats(tensors.pop("__stats_mean"), tensors.pop("__stats_std"))
    model = SemiSiameseNet(meta["backbone"], meta["image_size"], meta["normalize"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, stats


def parameter_checksum(model):
    """Order-stable digest of all parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class EmbeddingExtractor(TransformerMixin, BaseEstimator):
    """Frozen feature extractor: stacks in, 64-D joint-space embeddings out."""

    def __init__(self, model=None, stream="first"):
        self.model = model
        self.stream = stream

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return embed(self.model, X, self.stream)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


@dataclass
class PairDistances:
    positive: np.ndarray = field(default_factory=lambda: np.empty(0))
    easy_negative: np.ndarray = field(default_factory=lambda: np.empty(0))
    hard_negative: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def negative(self):
        return np.concatenate([self.easy_negative, self.hard_negative])


def pair_distances(model, pairs, bank, stride=1):
    """Embedding distance for every full-window frame of each pair."""
    out = {POSITIVE: [], EASY: [], HARD: []}
    for pair in pairs:
        lo, hi = valid_frame_range(pair, HALF_WINDOW)
        if hi <= lo:
            continue
        t = np.arange(lo, hi, stride)
        zf = embed(model, bank.get(pair.first.source_uri, t), "first")
        zt = embed(model, bank.get(pair.third.source_uri, third_time(pair, t)), "third")
        out[pair.difficulty].append(np.linalg.norm(zf - zt, axis=1))
    return PairDistances(*(np.concatenate(out[k]) if out[k] else np.empty(0)
                           for k in (POSITIVE, EASY, HARD)))


def config_dict(config):
    return asdict(config)
