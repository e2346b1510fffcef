"""Semantic class set and probability arithmetic in the log domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 16

# Probability floor: no class may drop to an absorbing zero, otherwise it
# could never recover under repeated multiplicative fusion.
PROB_FLOOR = 1e-9

PERSON_CLASS = 0
FLOOR_CLASS = 1

DEFAULT_CLASS_NAMES = (
    "person",
    "floor",
    "wall",
    "ceiling",
    "table",
    "chair",
    "sofa",
    "cabinet",
    "door",
    "window",
    "monitor",
    "shelf",
    "bed",
    "lamp",
    "whiteboard",
    "other",
)

DEFAULT_CLASS_COLORS = (
    (220, 20, 60),
    (152, 223, 138),
    (174, 199, 232),
    (196, 156, 148),
    (255, 187, 120),
    (188, 189, 34),
    (140, 86, 75),
    (255, 152, 150),
    (214, 39, 40),
    (197, 176, 213),
    (148, 103, 189),
    (23, 190, 207),
    (247, 182, 210),
    (219, 219, 141),
    (158, 218, 229),
    (127, 127, 127),
)


def _floor_and_norm(log_p: np.ndarray) -> np.ndarray:
    m = log_p.max(axis=-1, keepdims=True)
    log_p = log_p - (m + np.log(np.exp(log_p - m).sum(axis=-1, keepdims=True)))
    p = np.exp(log_p)
    p = np.maximum(p, PROB_FLOOR)
    p /= p.sum(axis=-1, keepdims=True)
    return np.log(p)


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    colors: tuple[tuple[int, int, int], ...] = DEFAULT_CLASS_COLORS

    def __post_init__(self):
        if len(self.names) != NUM_CLASSES:
            raise ValueError(f"class set must have {NUM_CLASSES} classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.colors) != len(self.names):
            raise ValueError("one color per class required")
        if self.names[PERSON_CLASS] != "person" or self.names[FLOOR_CLASS] != "floor":
            raise ValueError("index 0 must be 'person' and index 1 'floor'")

    def fingerprint(self) -> int:
        """FNV-1a (64-bit) over the canonical config serialization."""
        h = 0xCBF29CE484222325
        for i, name in enumerate(self.names):
            r, g, b = self.colors[i]
            for byte in f"{i} {name} {r} {g} {b}\n".encode():
                h ^= byte
                h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h

    def save(self, path) -> None:
        with open(path, "w") as f:
            for i, name in enumerate(self.names):
                r, g, b = self.colors[i]
                f.write(f"{i} {name} {r} {g} {b}\n")

    @classmethod
    def load(cls, path) -> "ClassSet":
        names, colors = [], []
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 'index name r g b'")
                if int(parts[0]) != len(names):
                    raise ValueError(f"{path}:{lineno}: class indices must be contiguous")
                names.append(parts[1])
                colors.append((int(parts[2]), int(parts[3]), int(parts[4])))
        return cls(names=tuple(names), colors=tuple(colors))


class ClassDistribution:
    """Probability vector over the class set, stored as natural logs."""

    __slots__ = ("log_p",)

    def __init__(self, log_p: np.ndarray, _trusted: bool = False):
        log_p = np.asarray(log_p, dtype=np.float64)
        if log_p.shape != (NUM_CLASSES,):
            raise ValueError(f"expected {NUM_CLASSES} log-probabilities")
        if not _trusted:
            if not np.all(np.isfinite(log_p)):
                raise ValueError("log-probabilities must be finite")
            if abs(np.exp(log_p).sum() - 1.0) > 1e-9:
                raise ValueError("probabilities must sum to 1")
        self.log_p = log_p

    @classmethod
    def from_probs(cls, p) -> "ClassDistribution":
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (NUM_CLASSES,):
            raise ValueError(f"expected {NUM_CLASSES} probabilities")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        s = p.sum()
        if s <= 0:
            raise ValueError("probabilities must not all be zero")
        p = np.maximum(p / s, PROB_FLOOR)
        return cls(np.log(p / p.sum()), _trusted=True)

    @classmethod
    def uniform(cls) -> "ClassDistribution":
        return cls(np.full(NUM_CLASSES, -np.log(NUM_CLASSES)), _trusted=True)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_p)

    def __eq__(self, other):
        return isinstance(other, ClassDistribution) and np.array_equal(
            self.log_p, other.log_p
        )

    def __repr__(self):
        top, p = argmax_class(self)
        return f"ClassDistribution(argmax={top}, p={p:.4f})"


def softmax(scores) -> ClassDistribution:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return ClassDistribution(_floor_and_norm(scores.copy()), _trusted=True)


def max_entropy_detection(class_idx: int, score: float) -> ClassDistribution:
    """Detection score on the detected class, remainder spread uniformly."""
    if not 0 <= class_idx < NUM_CLASSES:
        raise ValueError("class index out of range")
    if not 0.0 < score < 1.0:
        raise ValueError("detector score must lie strictly inside (0, 1)")
    p = np.full(NUM_CLASSES, (1.0 - score) / (NUM_CLASSES - 1))
    p[class_idx] = score
    return ClassDistribution.from_probs(p)


def clamp_score(score: float) -> float:
    """Clamp a detector score into the open interval fusion requires."""
    lo = PROB_FLOOR * (NUM_CLASSES - 1)
    hi = 1.0 - (NUM_CLASSES - 1) * PROB_FLOOR
    return min(max(score, lo), hi)


def bayes_fuse(a: ClassDistribution, b: ClassDistribution) -> ClassDistribution:
    return ClassDistribution(_floor_and_norm(a.log_p + b.log_p), _trusted=True)


def argmax_class(d: ClassDistribution) -> tuple[int, float]:
    i = int(np.argmax(d.log_p))
    return i, float(np.exp(d.log_p[i]))


# -- batch helpers over (N, C) log-probability matrices -----------------------
# The per-sensor cloud pipeline and the voxel map carry thousands of
# distributions; these operate on whole matrices without object overhead.


def log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    return _floor_and_norm(np.asarray(scores, dtype=np.float64))


def fuse_rows(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    return _floor_and_norm(log_a + log_b)


def uniform_rows(n: int) -> np.ndarray:
    return np.full((n, NUM_CLASSES), -np.log(NUM_CLASSES))
