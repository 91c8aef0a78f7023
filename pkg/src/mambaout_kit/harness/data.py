"""Synthetic arrangement task: the label is encoded by where colored
rectangles sit relative to each other, not by what is in any one patch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RED, GREEN, BLUE = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
DISTRACTOR = (0.5, 0.5, 0.5)
# label bits: 0 -> red left of green, 1 -> green left of blue, 2 -> red above blue
HFLIP_LABEL_MASK = 0b011


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic generator: ``(seed, index)`` always yields the same sample.

    Indices ``[0, n_train)`` form the training split, ``[n_train, n_train + n_val)``
    the validation split. Labels cycle through ``index % num_classes`` so both
    splits are balanced whenever their sizes are multiples of ``num_classes``.
    """

    image_size: int = 32
    num_classes: int = 8
    n_train: int = 4000
    n_val: int = 800
    seed: int = 0
    min_gap: int = 3
    distractor_prob: float = 0.5
    noise: float = 0.05

    def __post_init__(self):
        if self.num_classes not in (2, 4, 8):
            raise ValueError("num_classes must be 2, 4 or 8 (one to three relation bits)")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")

    @property
    def bits(self) -> int:
        return int(np.log2(self.num_classes))

    def label(self, index: int) -> int:
        return index % self.num_classes

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        rng = np.random.default_rng([self.seed, index])
        label = self.label(index)
        want = [(label >> b) & 1 for b in range(3)]
        S = self.image_size
        lo, hi = max(3, S // 8), max(4, S // 5)
        for _ in range(10_000):
            rects = []
            for _ in range(3):
                w, h = rng.integers(lo, hi + 1, 2)
                x, y = rng.integers(0, S - w + 1), rng.integers(0, S - h + 1)
                rects.append((int(x), int(y), int(w), int(h)))
            if self._overlap(rects):
                continue
            cx = [x + w / 2 for x, _, w, _ in rects]
            cy = [y + h / 2 for _, y, _, h in rects]
            rel = [(cx[0], cx[1]), (cx[1], cx[2]), (cy[0], cy[2])]
            ok = True
            for b in range(3):
                a, c = rel[b]
                if abs(a - c) < self.min_gap:
                    ok = False
                    break
                # unused high bits still get a clear margin but any order
                if b < self.bits and (a < c) != bool(want[b]):
                    ok = False
                    break
            if ok:
                break
        else:  # pragma: no cover - geometry always admits a layout
            raise RuntimeError(f"could not place rectangles for index {index}")
        img = np.zeros((S, S, 3), dtype=np.float64)
        if rng.random() < self.distractor_prob:
            for _ in range(100):
                w, h = rng.integers(lo, hi + 1, 2)
                x, y = rng.integers(0, S - w + 1), rng.integers(0, S - h + 1)
                d = (int(x), int(y), int(w), int(h))
                if not self._overlap(rects + [d]):
                    img[d[1]:d[1] + d[3], d[0]:d[0] + d[2]] = DISTRACTOR
                    break
        for (x, y, w, h), color in zip(rects, (RED, GREEN, BLUE)):
            img[y:y + h, x:x + w] = color
        img += rng.normal(0.0, self.noise, img.shape)
        return (img - 0.5).astype(np.float32), label

    @staticmethod
    def _overlap(rects) -> bool:
        for i in range(len(rects)):
            x1, y1, w1, h1 = rects[i]
            for j in range(i + 1, len(rects)):
                x2, y2, w2, h2 = rects[j]
                # one pixel of clearance between rectangles
                if x1 <= x2 + w2 and x2 <= x1 + w1 and y1 <= y2 + h2 and y2 <= y1 + h1:
                    return True
        return False

    def hflip_label(self, label):
        """Label of the horizontally mirrored image: left/right relations invert."""
        return label ^ (HFLIP_LABEL_MASK & (self.num_classes - 1))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            idx = range(self.n_train)
        elif name == "val":
            idx = range(self.n_train, self.n_train + self.n_val)
        else:
            raise ValueError(f"unknown split {name!r}")
        images, labels = zip(*(self.sample(i) for i in idx))
        return np.stack(images), np.asarray(labels, dtype=np.int64)
