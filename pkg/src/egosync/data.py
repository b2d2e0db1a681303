"""Clip manifests, first/third pair mining and the curriculum schedule."""

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import DuplicateId, InvalidShiftRange, ParseError

logger = logging.getLogger(__name__)

VIEWS = ("first", "third_front", "third_side", "third_top")
THIRD_VIEWS = VIEWS[1:]

POSITIVE = "positive"
EASY = "easy_negative"
HARD = "hard_negative"

DEFAULT_HARD_SHIFTS = (25, -25)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    view: str
    person_id: str
    activity_id: str
    scene_id: str
    start: int
    end: int
    source_uri: str = ""

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        if not self.end > self.start >= 0:
            raise ValueError(f"empty frame range [{self.start}, {self.end}) for {self.clip_id}")

    @property
    def frame_range(self):
        return (self.start, self.end)

    @property
    def n_frames(self):
        return self.end - self.start

    @property
    def recording(self):
        """Key shared by all views of one take."""
        return (self.person_id, self.activity_id, self.scene_id, self.start, self.end)


@dataclass(frozen=True)
class ClipPair:
    first: ClipRecord
    third: ClipRecord
    label: int
    difficulty: str
    time_shift: int = 0

    def __post_init__(self):
        if self.first.view != "first":
            raise ValueError(f"first clip {self.first.clip_id} has view {self.first.view}")
        if self.third.view not in THIRD_VIEWS:
            raise ValueError(f"third clip {self.third.clip_id} has view {self.third.view}")
        if not is_valid_pair(self):
            raise ValueError(f"pair {self.pair_id} violates the {self.difficulty} constraints")

    @property
    def pair_id(self):
        return f"{self.first.clip_id}|{self.third.clip_id}|{self.time_shift:+d}"


def is_valid_pair(pair):
    """Metadata predicate each difficulty level must satisfy."""
    f, t = pair.first, pair.third
    same_take = (f.person_id, f.scene_id) == (t.person_id, t.scene_id)
    if pair.difficulty == POSITIVE:
        return pair.label == 1 and pair.time_shift == 0 and f.recording == t.recording
    if pair.difficulty == EASY:
        return pair.label == 0 and same_take and f.activity_id != t.activity_id
    if pair.difficulty == HARD:
        return (pair.label == 0 and same_take and f.activity_id == t.activity_id
                and pair.time_shift != 0)
    return False


MANIFEST_FIELDS = ("clip_id", "view", "person", "activity", "scene", "start", "end", "uri")


def load_manifest(path):
    """Parse a tab-separated manifest, one clip per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    records = []
    seen = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != len(MANIFEST_FIELDS):
                raise ParseError(
                    f"expected {len(MANIFEST_FIELDS)} tab-separated fields, found {len(fields)}",
                    lineno,
                )
            clip_id, view, person, activity, scene, start, end, uri = fields
            try:
                rec = ClipRecord(clip_id, view, person, activity, scene, int(start), int(end), uri)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if clip_id in seen:
                raise DuplicateId(f"clip_id {clip_id!r} on line {lineno} repeats line {seen[clip_id]}")
            seen[clip_id] = lineno
            records.append(rec)
    return records


def write_manifest(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write("\t".join(str(v) for v in (
                r.clip_id, r.view, r.person_id, r.activity_id, r.scene_id,
                r.start, r.end, r.source_uri,
            )) + "\n")


def _by_view(records, view):
    return sorted((r for r in records if r.view == view), key=lambda r: r.clip_id)


def mine_positive_pairs(records, third_view="third_front"):
    """Pair every first-view clip with the third-view clip of the same take."""
    thirds = {}
    for r in _by_view(records, third_view):
        thirds.setdefault(r.recording, []).append(r)
    pairs = []
    for f in _by_view(records, "first"):
        for t in thirds.get(f.recording, ()):
            pairs.append(ClipPair(f, t, 1, POSITIVE))
    return pairs


def mine_negative_pairs(records, difficulty, shift_range=DEFAULT_HARD_SHIFTS,
                        third_view="third_front"):
    """Unsynchronized pairs of the requested difficulty (``"easy"`` or ``"hard"``).

    Easy: same person and scene, different activity, no time shift.
    Hard: the positive partner shifted by each offset in ``shift_range``.
    """
    firsts = _by_view(records, "first")
    thirds = _by_view(records, third_view)
    pairs = []
    if difficulty in ("easy", EASY):
        for f in firsts:
            for t in thirds:
                if ((f.person_id, f.scene_id) == (t.person_id, t.scene_id)
                        and f.activity_id != t.activity_id):
                    pairs.append(ClipPair(f, t, 0, EASY))
    elif difficulty in ("hard", HARD):
        shifts = [int(s) for s in shift_range]
        if not shifts or 0 in shifts:
            raise InvalidShiftRange(f"hard-negative shifts must be nonzero, got {shifts}")
        for pos in mine_positive_pairs(records, third_view):
            for s in shifts:
                if abs(s) < pos.first.n_frames:
                    pairs.append(ClipPair(pos.first, pos.third, 0, HARD, s))
    else:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    return pairs


def curriculum_batches(pairs, epoch, neg_ratio=1.0, seed=0):
    """Shuffled pair stream for one epoch.

    Epoch 1 draws negatives from the easy pool only; later epochs from the
    hard pool only. ``neg_ratio`` negatives are drawn per positive.
    """
    if epoch < 1:
        raise ValueError(f"epochs are numbered from 1, got {epoch}")
    positives = [p for p in pairs if p.difficulty == POSITIVE]
    wanted = EASY if epoch == 1 else HARD
    pool = [p for p in pairs if p.difficulty == wanted]
    rng = np.random.default_rng([seed, epoch])
    n_neg = int(round(len(positives) * neg_ratio))
    if not pool:
        logger.warning("epoch %d: no %s pairs available, streaming positives only", epoch, wanted)
        negatives = []
    elif n_neg:
        idx = rng.choice(len(pool), size=n_neg, replace=len(pool) < n_neg)
        negatives = [pool[i] for i in idx]
    else:
        negatives = []
    stream = positives + negatives
    order = rng.permutation(len(stream))
    return [stream[i] for i in order]


def third_time(pair, t):
    """Third-view frame matched with first-view frame ``t`` under ``pair``."""
    return pair.third.start + (t - pair.first.start) + pair.time_shift


def valid_frame_range(pair, half_window):
    """Half-open first-view frame range where both views have a full window."""
    offset = pair.third.start - pair.first.start + pair.time_shift
    lo = max(pair.first.start, pair.third.start - offset) + half_window
    hi = min(pair.first.end, pair.third.end - offset) - half_window
    return lo, max(lo, hi)


def sample_frame_times(pair, half_window, n, rng):
    """Draw ``n`` first-view frame indices where both views have a full window.

    Returns an empty array when no frame qualifies.
    """
    lo, hi = valid_frame_range(pair, half_window)
    if hi <= lo or n <= 0:
        return np.empty(0, dtype=np.int64)
    return rng.integers(lo, hi, size=n)
