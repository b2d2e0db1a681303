"""Frozen-embedding feature extraction, pose vocabularies and pose regression."""

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClusterMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import artifacts
from .embed import EMBED_DIM, embed
from .exceptions import ClipTooShort, DimensionMismatch, TooFewSamples
from .flow import HALF_WINDOW, build_stacks, normalize_stack
from .skeleton import ALL, N_JOINTS, align_sequence, check_sequence, check_skeleton


@dataclass
class FeatureSequence:
    """Per-frame base features ``phi`` (T, d) and embeddings ``z`` (T, 64)."""

    phi: np.ndarray
    z: np.ndarray
    times: np.ndarray = None

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        if len(self.phi) != len(self.z):
            raise DimensionMismatch(f"{len(self.phi)} base-feature rows vs {len(self.z)} embeddings")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.z))):
            raise ValueError("feature sequence has non-finite entries")
        if self.times is None:
            self.times = np.arange(len(self.phi))

    def __len__(self):
        return len(self.phi)

    def design(self, use_embedding):
        return np.hstack([self.phi, self.z]) if use_embedding else self.phi

    @classmethod
    def concat(cls, seqs):
        seqs = list(seqs)
        return cls(np.vstack([s.phi for s in seqs]), np.vstack([s.z for s in seqs]),
                   np.concatenate([s.times for s in seqs]))

    def interpolate(self, i, j, beta):
        """Rows on the straight line between frames ``i`` and ``j``."""
        beta = np.asarray(beta, dtype=np.float64)[:, None]
        return FeatureSequence(self.phi[i] + (self.phi[j] - self.phi[i]) * beta,
                               self.z[i] + (self.z[j] - self.z[i]) * beta)


def base_features(frames):
    """Per-channel contrast (pixel std) of RGB frames ``(T, H, W, 3)``.

    Deliberately weak: a position-free summary of the head-mounted view.
    """
    frames = np.asarray(frames, dtype=np.float64)
    return frames.std(axis=(1, 2))


def extract_embeddings(model, clip, provider, stats):
    """First-stream embeddings for every full-window frame of ``clip``.

    Returns ``(times, z)``. The model only runs forward passes in eval mode.
    """
    n = clip.stop - clip.start
    if n < 2 * HALF_WINDOW + 1:
        raise ClipTooShort(f"clip has {n} frames; at least {2 * HALF_WINDOW + 1} are needed")
    times = clip.valid_times()
    stacks = normalize_stack(build_stacks(clip, provider, times), stats)
    return times, embed(model, stacks, "first")


def clip_features(model, clip, provider, stats):
    times, z = extract_embeddings(model, clip, provider, stats)
    return FeatureSequence(base_features(clip.frames[times]), z, times)


class PoseVocabulary(ClusterMixin, BaseEstimator):
    """Lloyd k-means over aligned skeletons in 51-D joint-coordinate space.

    With ``n_upper``/``n_lower`` set, upper- and lower-body joints are
    clustered separately and ``centers_`` holds the upper centers followed by
    the lower ones (joints outside each group are zero).
    """

    def __init__(self, n_poses=300, n_upper=None, n_lower=None, max_iter=100, tol=1e-6, seed=0):
        self.n_poses = n_poses
        self.n_upper = n_upper
        self.n_lower = n_lower
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def _parts(self):
        from .skeleton import LOWER, UPPER

        if self.n_upper is None and self.n_lower is None:
            return [(tuple(range(N_JOINTS)), self.n_poses)]
        return [(UPPER.members, self.n_upper), (LOWER.members, self.n_lower)]

    def fit(self, X, y=None):
        seq = check_sequence(X)
        self.centers_, self.labels_, self.objective_history_ = [], [], []
        self.inertia_ = 0.0
        for p, (joints, k) in enumerate(self._parts()):
            pts = seq[:, list(joints)].reshape(len(seq), -1)
            centers, labels, history = lloyd(pts, k, self.max_iter, self.tol,
                                             np.random.default_rng([self.seed, p]))
            full = np.zeros((k, N_JOINTS, 3))
            full[:, list(joints)] = centers.reshape(k, len(joints), 3)
            self.centers_.append(full)
            self.labels_.append(labels)
            self.objective_history_.append(history)
            self.inertia_ += history[-1]
        self.part_joints_ = [joints for joints, _ in self._parts()]
        if len(self.centers_) == 1:
            self.centers_ = self.centers_[0]
            self.labels_ = self.labels_[0]
            self.objective_history_ = self.objective_history_[0]
        else:
            self.centers_ = np.concatenate(self.centers_)
            self.labels_ = np.stack(self.labels_, axis=1)
        return self

    def predict(self, X):
        """Nearest-center index per skeleton (one column per part when split)."""
        check_is_fitted(self, "centers_")
        seq = check_sequence(X)
        if len(self.part_joints_) == 1:
            return nearest_indices(seq.reshape(len(seq), -1),
                                   self.centers_.reshape(len(self.centers_), -1))
        out, offset = [], 0
        for joints, (_, k) in zip(self.part_joints_, self._parts()):
            c = self.centers_[offset:offset + k][:, list(joints)].reshape(k, -1)
            out.append(nearest_indices(seq[:, list(joints)].reshape(len(seq), -1), c) + offset)
            offset += k
        return np.stack(out, axis=1)


def nearest_indices(points, centers, chunk=2048):
    """Index of the closest center per row; the lowest index wins ties."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    out = np.empty(len(points), dtype=np.int64)
    for i in range(0, len(points), chunk):
        diff = points[i:i + chunk, None, :] - centers[None, :, :]
        # argmin returns the first minimum, which is the tie rule.
        out[i:i + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def lloyd(points, k, max_iter=100, tol=1e-6, rng=None):
    """Plain Lloyd iterations seeded with ``k`` distinct random samples.

    Returns ``(centers, labels, objective_history)`` where each history entry
    is the sum of squared distances to the assigned centers, recorded once per
    iteration; the sequence never increases.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    points = np.asarray(points, dtype=np.float64)
    distinct = np.unique(points, axis=0)
    if k < 1 or len(distinct) < k:
        raise TooFewSamples(f"need at least {k} distinct samples, got {len(distinct)}")
    centers = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))].copy()
    history = []
    prev = None
    for _ in range(max_iter):
        labels = nearest_indices(points, centers)
        diff = points - centers[labels]
        history.append(float(np.einsum("nd,nd->", diff, diff)))
        if prev is not None and np.array_equal(labels, prev):
            break
        if len(history) > 1 and history[-2] - history[-1] <= tol * history[-2]:
            break
        for c in range(k):
            members = points[labels == c]
            # Empty clusters keep their previous center.
            if len(members):
                centers[c] = members.mean(axis=0)
        prev = labels
    else:
        labels = nearest_indices(points, centers)
        diff = points - centers[labels]
        history.append(float(np.einsum("nd,nd->", diff, diff)))
    return centers, labels, history


def quantize_poses(skeletons, k, seed=0, **kwargs):
    """Fit a :class:`PoseVocabulary` with ``k`` centers on aligned skeletons."""
    return PoseVocabulary(n_poses=k, seed=seed, **kwargs).fit(skeletons)


def nearest_pose(vocab, skeleton):
    """``(index, center)`` of the vocabulary entry closest to ``skeleton``."""
    s = check_skeleton(skeleton)
    centers = vocab.centers_ if hasattr(vocab, "centers_") else np.asarray(vocab)
    idx = int(nearest_indices(s.reshape(1, -1), centers.reshape(len(centers), -1))[0])
    return idx, centers[idx]


def save_vocabulary(path, vocab):
    """Header ``# K dims seed`` followed by one center per row."""
    centers = vocab.centers_.reshape(len(vocab.centers_), -1)
    with open(path, "w") as f:
        f.write(f"# K={len(centers)} dims={centers.shape[1]} seed={vocab.seed}\n")
        for row in centers:
            f.write(" ".join("%.17g" % v for v in row) + "\n")


def load_vocabulary(path):
    with open(path) as f:
        header = f.readline().split()
        fields = dict(tok.split("=") for tok in header[1:])
        rows = [[float(v) for v in line.split()] for line in f if line.strip()]
    centers = np.asarray(rows).reshape(int(fields["K"]), N_JOINTS, 3)
    vocab = PoseVocabulary(n_poses=len(centers), seed=int(fields["seed"]))
    vocab.centers_ = centers
    vocab.part_joints_ = [tuple(range(N_JOINTS))]
    return vocab


class _MLP(nn.Module):
    def __init__(self, n_in, hidden, n_out):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_in, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n_out),
        )

    def forward(self, x):
        return self.net(x)


class PoseRegressor(RegressorMixin, BaseEstimator):
    """Feed-forward regressor from per-frame features to aligned 17-joint poses.

    ``fit`` takes a :class:`FeatureSequence` (the ``use_embedding`` flag picks
    ``phi`` alone or ``phi`` concatenated with ``z``) or a ready design matrix,
    and ground-truth skeletons in any pose; targets are aligned to the
    canonical frame at 30 cm shoulder width before the squared-error fit.
    """

    def __init__(self, use_embedding=True, hidden=64, epochs=1000, lr=3e-3,
                 weight_decay=1e-3, seed=0):
        self.use_embedding = use_embedding
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _design(self, X):
        if isinstance(X, FeatureSequence):
            X = X.design(self.use_embedding)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"regressor was fitted on {self.n_features_in_} features, got {X.shape[1]}"
            )
        return X

    def fit(self, X, y):
        if hasattr(self, "n_features_in_"):
            del self.n_features_in_
        X = self._design(X)
        Y = align_sequence(y)
        Y = Y.reshape(len(Y), -1)
        if len(Y) != len(X):
            raise DimensionMismatch(f"{len(X)} feature rows vs {len(Y)} skeletons")
        self.n_features_in_ = X.shape[1]
        self.x_mean_ = X.mean(axis=0)
        self.x_std_ = np.where(X.std(axis=0) > 1e-8, X.std(axis=0), 1.0)
        self.y_mean_ = Y.mean(axis=0)
        self.y_std_ = np.where(Y.std(axis=0) > 1e-8, Y.std(axis=0), 1.0)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = _MLP(X.shape[1], self.hidden, 3 * N_JOINTS)
        xs = torch.from_numpy(((X - self.x_mean_) / self.x_std_).astype(np.float32))
        ys = torch.from_numpy(((Y - self.y_mean_) / self.y_std_).astype(np.float32))
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = nn.functional.mse_loss(self.net_(xs), ys)
            loss.backward()
            opt.step()
            self.loss_curve_.append(float(loss.item()))
        self.net_.eval()
        return self

    @torch.no_grad()
    def predict(self, X):
        """Aligned skeletons ``(T, 17, 3)``, one per feature row."""
        check_is_fitted(self, "net_")
        X = self._design(X)
        xs = torch.from_numpy(((X - self.x_mean_) / self.x_std_).astype(np.float32))
        out = self.net_(xs).numpy().astype(np.float64) * self.y_std_ + self.y_mean_
        return out.reshape(len(X), N_JOINTS, 3)

    def score(self, X, y):
        """Negative mean per-joint error (cm), so larger is better."""
        from .skeleton import sequence_error
        return -sequence_error(self.predict(X), y, ALL)


def train_regressor(features, skeletons, use_embedding, **params):
    return PoseRegressor(use_embedding=use_embedding, **params).fit(features, skeletons)


def predict_sequence(regressor, features):
    return regressor.predict(features)


def save_regressor(path, reg):
    check_is_fitted(reg, "net_")
    tensors = {k: v.numpy() for k, v in reg.net_.state_dict().items()}
    for name in ("x_mean_", "x_std_", "y_mean_", "y_std_"):
        tensors["__" + name] = getattr(reg, name)
    meta = dict(reg.get_params(), n_features_in=int(reg.n_features_in_))
    artifacts.write_checkpoint(path, "regressor", tensors, meta)


def load_regressor(path):
    tensors, meta = artifacts.read_checkpoint(path, kind="regressor")
    n_in = meta.pop("n_features_in")
    reg = PoseRegressor(**meta)
    for name in ("x_mean_", "x_std_", "y_mean_", "y_std_"):
        setattr(reg, name, tensors.pop("__" + name))
    reg.n_features_in_ = n_in
    reg.net_ = _MLP(n_in, reg.hidden, 3 * N_JOINTS)
    reg.net_.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    reg.net_.eval()
    return reg


__all__ = [
    "EMBED_DIM", "FeatureSequence", "PoseRegressor", "PoseVocabulary", "base_features",
    "clip_features", "extract_embeddings", "lloyd", "load_regressor", "load_vocabulary",
    "nearest_indices", "nearest_pose", "predict_sequence", "quantize_poses", "save_regressor",
    "save_vocabulary", "train_regressor",
]
