"""Per-timestep network input: the center RGB frame plus 10 optical-flow fields.

A :class:`Clip` wraps a frame array ``(N, H, W, 3)`` and the frame range a
clip occupies in it. Stacks are ``(H, W, 23)`` float32 arrays laid out as::

    [r, g, b, u(t-5 -> t-4), v(t-5 -> t-4), ..., u(t+4 -> t+5), v(t+4 -> t+5)]

Flow providers are callables ``provider(clip, i)`` returning the ``(H, W, 2)``
displacement field from absolute frame ``i`` to ``i + 1``.
"""

import logging
import os
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import artifacts
from .exceptions import ConfigError, ShapeMismatch, WindowOutOfRange, ZeroStd

logger = logging.getLogger(__name__)

N_FLOWS = 10
HALF_WINDOW = N_FLOWS // 2
N_CHANNELS = 3 + 2 * N_FLOWS
STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Clip:
    frames: np.ndarray
    start: int = 0
    end: Optional[int] = None
    uri: str = ""

    @property
    def stop(self):
        return len(self.frames) if self.end is None else self.end

    def valid_times(self):
        """Frame indices with a full flow window inside the clip."""
        return np.arange(self.start + HALF_WINDOW, self.stop - HALF_WINDOW)


class ZeroFlow:
    name = "zero"

    def __call__(self, clip, i):
        h, w = clip.frames.shape[1:3]
        return np.zeros((h, w, 2), dtype=np.float32)


class GradientFlow:
    """Dense Lucas-Kanade estimate with a few warp refinements.

    Good to a fraction of a pixel for smooth images moving about a pixel per
    frame, which is all the synthetic streams need.
    """

    name = "gradient"

    def __init__(self, sigma=2.0, iterations=3, reg=1e-2):
        self.sigma = sigma
        self.iterations = iterations
        self.reg = reg

    def __call__(self, clip, i):
        a = np.asarray(clip.frames[i], dtype=np.float64).mean(axis=-1)
        b = np.asarray(clip.frames[i + 1], dtype=np.float64).mean(axis=-1)
        return self.estimate(a, b)

    def estimate(self, a, b):
        h, w = a.shape
        rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        u = np.zeros((h, w))
        v = np.zeros((h, w))
        for _ in range(self.iterations):
            # Pull b back along the current estimate so the residual motion is small.
            warped = ndimage.map_coordinates(b, [rr + v, cc + u], order=1, mode="nearest")
            gy, gx = np.gradient(0.5 * (a + warped))
            gt = warped - a
            sxx = ndimage.gaussian_filter(gx * gx, self.sigma)
            syy = ndimage.gaussian_filter(gy * gy, self.sigma)
            sxy = ndimage.gaussian_filter(gx * gy, self.sigma)
            sxt = ndimage.gaussian_filter(gx * gt, self.sigma)
            syt = ndimage.gaussian_filter(gy * gt, self.sigma)
            # Tikhonov term scaled to the image's own gradient energy.
            ridge = self.reg * float(np.mean(sxx + syy)) + 1e-12
            sxx += ridge
            syy += ridge
            det = sxx * syy - sxy * sxy
            u = u - (syy * sxt - sxy * syt) / det
            v = v - (sxx * syt - sxy * sxt) / det
        return np.stack([u, v], axis=-1).astype(np.float32)


class PrecomputedFlow:
    """Reads ``<flow_dir>/<uri stem>.flow.npy`` holding ``(N - 1, H, W, 2)`` flows."""

    name = "precomputed"

    def __init__(self, flow_dir):
        self.flow_dir = flow_dir
        self._cache = {}

    def path_for(self, uri):
        stem = os.path.splitext(os.path.basename(uri))[0]
        return os.path.join(self.flow_dir, stem + ".flow.npy")

    def __call__(self, clip, i):
        if clip.uri not in self._cache:
            self._cache[clip.uri] = artifacts.load_tensor(self.path_for(clip.uri))
        return self._cache[clip.uri][i]


def make_provider(name, **kwargs):
    """Provider selection by config key."""
    if name == "zero":
        return ZeroFlow()
    if name == "gradient":
        return GradientFlow(**kwargs)
    if name == "precomputed":
        if "flow_dir" not in kwargs:
            raise ConfigError("precomputed flow provider needs flow_dir")
        return PrecomputedFlow(kwargs["flow_dir"])
    raise ConfigError(f"unknown flow provider {name!r}")


def precompute_flows(clip, provider, out_dir=None):
    """All ``N - 1`` consecutive flows of ``clip.frames``; optionally saved."""
    flows = np.stack([provider(clip, i) for i in range(len(clip.frames) - 1)])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        artifacts.save_tensor(PrecomputedFlow(out_dir).path_for(clip.uri), flows)
    return flows


def _assemble(rgb, flows, clip_to):
    flows = np.asarray(flows, dtype=np.float32)
    if clip_to is not None:
        flows = np.clip(flows, -clip_to, clip_to)
    h, w = rgb.shape[:2]
    flow_ch = np.moveaxis(flows, 0, 2).reshape(h, w, 2 * N_FLOWS)
    return np.concatenate([np.asarray(rgb, dtype=np.float32), flow_ch], axis=-1)


def build_stack(clip, t, provider, clip_to=None):
    """23-channel stack centered on absolute frame ``t``.

    Raises :class:`WindowOutOfRange` unless frames ``t-5 .. t+5`` lie in the clip.
    """
    if t - HALF_WINDOW < clip.start or t + HALF_WINDOW >= clip.stop:
        raise WindowOutOfRange(
            f"frame {t} needs [{t - HALF_WINDOW}, {t + HALF_WINDOW}] inside "
            f"[{clip.start}, {clip.stop})"
        )
    flows = [provider(clip, i) for i in range(t - HALF_WINDOW, t + HALF_WINDOW)]
    return _assemble(clip.frames[t], flows, clip_to)


def build_stacks(clip, provider, times=None, clip_to=None, flows=None):
    """Stacks for many frames, computing each consecutive flow once.

    ``flows`` may pass the full precomputed ``(N - 1, H, W, 2)`` array.
    """
    times = clip.valid_times() if times is None else np.asarray(times)
    if len(times) == 0:
        h, w = clip.frames.shape[1:3]
        return np.empty((0, h, w, N_CHANNELS), dtype=np.float32)
    lo, hi = int(times.min()), int(times.max())
    if lo - HALF_WINDOW < clip.start or hi + HALF_WINDOW >= clip.stop:
        raise WindowOutOfRange(f"times [{lo}, {hi}] leave no full window in [{clip.start}, {clip.stop})")
    if flows is None:
        needed = range(lo - HALF_WINDOW, hi + HALF_WINDOW)
        cache = {i: provider(clip, i) for i in needed}
    else:
        cache = flows
    return np.stack([
        _assemble(clip.frames[t], [cache[i] for i in range(t - HALF_WINDOW, t + HALF_WINDOW)],
                  clip_to)
        for t in times
    ])


def stack_rgb(stack):
    return stack[..., :3]


def stack_flows(stack):
    """Flow fields of a stack as ``(10, H, W, 2)``."""
    h, w = stack.shape[:2]
    return np.moveaxis(stack[..., 3:].reshape(h, w, N_FLOWS, 2), 2, 0)


def check_stack(stack):
    stack = np.asarray(stack)
    if stack.shape[-1] != N_CHANNELS:
        raise ShapeMismatch(f"expected {N_CHANNELS} channels, got {stack.shape[-1]}")
    if not np.all(np.isfinite(stack)):
        raise ValueError("stack has non-finite entries")
    return stack


class StackStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def stack_stats(stacks):
    """Per-channel mean/std over any number of leading axes."""
    stacks = check_stack(stacks).reshape(-1, N_CHANNELS).astype(np.float64)
    return StackStats(stacks.mean(axis=0), stacks.std(axis=0))


def normalize_stack(stack, stats):
    """Standardize channels with training statistics.

    Channels whose std is below 1e-8 are only centered, with a :class:`ZeroStd`
    warning.
    """
    stack = check_stack(stack)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    flat = std < STD_FLOOR
    if flat.any():
        msg = f"channels {np.flatnonzero(flat).tolist()} have near-zero std; centering only"
        logger.warning(msg)
        warnings.warn(msg, ZeroStd, stacklevel=2)
    scale = np.where(flat, 1.0, std)
    return ((stack - mean) / scale).astype(np.float32)


class StackNormalizer(TransformerMixin, BaseEstimator):
    """Fit per-channel statistics on training stacks, then standardize."""

    def fit(self, X, y=None):
        stats = stack_stats(X)
        self.mean_ = stats.mean
        self.std_ = stats.std
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return normalize_stack(X, StackStats(self.mean_, self.std_))
