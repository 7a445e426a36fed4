"""Synthetic driving cycles at 1 Hz.

Three generator styles with distinct statistics (ordered mean speeds:
city < urban < highway, city jerkiest) feed the driving-condition
recognizer and the speed predictor; three fixed named cycles feed the
shipped scenarios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .plant import DriveSample

STYLE_NAMES = ("city", "urban", "highway")


@dataclass(frozen=True)
class StyleParams:
    target_lo: float
    target_hi: float
    accel_lo: float
    accel_hi: float
    stop_prob: float
    dwell_lo: int
    dwell_hi: int
    idle_lo: int
    idle_hi: int
    noise: float


STYLES: dict[str, StyleParams] = {
    # dense stop-and-go, low speeds, hard accel/decel, long idles
    "city": StyleParams(2.0, 7.5, 0.6, 1.6, 0.80, 4, 14, 8, 26, 0.50),
    # arterial driving, moderate everything, occasional short stops
    "urban": StyleParams(8.0, 17.0, 0.5, 1.2, 0.25, 10, 32, 2, 6, 0.25),
    # sustained cruising with mild drift, rare stops
    "highway": StyleParams(24.0, 33.0, 0.3, 0.8, 0.03, 25, 80, 3, 8, 0.15),
}

MAX_ACCEL = 2.5  # |dv/dt| cap applied to every generated cycle


def _clip_step(prev: float, target: float, rate: float) -> float:
    step = max(-MAX_ACCEL, min(MAX_ACCEL, rate))
    if target > prev:
        return min(prev + step, target)
    return max(prev - step, target)


def generate_cycle(style: str, duration_s: int, seed: int) -> np.ndarray:
    """One style-conditioned speed trace (m/s), deterministic per seed."""
    if style not in STYLES:
        raise InvalidConfig(f"unknown style {style!r}; expected one of {STYLE_NAMES}")
    if duration_s < 1:
        raise InvalidConfig("duration must be >= 1 s")
    p = STYLES[style]
    rng = np.random.default_rng(seed)
    v = 0.0
    speeds = np.empty(duration_s)
    t = 0
    while t < duration_s:
        target = float(rng.uniform(p.target_lo, p.target_hi))
        accel = float(rng.uniform(p.accel_lo, p.accel_hi))
        # ramp toward the target
        while t < duration_s and abs(v - target) > 0.2:
            v = _clip_step(v, target, accel)
            speeds[t] = v
            t += 1
        # dwell near the target with jitter
        dwell = int(rng.integers(p.dwell_lo, p.dwell_hi + 1))
        for _ in range(dwell):
            if t >= duration_s:
                break
            v = max(0.0, v + float(rng.normal(0.0, p.noise)))
            speeds[t] = v
            t += 1
        # maybe come to a full stop and idle
        if rng.uniform() < p.stop_prob:
            decel = float(rng.uniform(p.accel_lo, p.accel_hi))
            while t < duration_s and v > 0.0:
                v = _clip_step(v, 0.0, decel)
                speeds[t] = v
                t += 1
            idle = int(rng.integers(p.idle_lo, p.idle_hi + 1))
            for _ in range(idle):
                if t >= duration_s:
                    break
                speeds[t] = 0.0
                t += 1
    return speeds


def generate_mixed_cycle(duration_s: int, seed: int,
                         segment_lo: int = 90, segment_hi: int = 200) -> np.ndarray:
    """Concatenated style segments; used for predictor training/evaluation."""
    rng = np.random.default_rng(seed)
    pieces = []
    total = 0
    k = 0
    while total < duration_s:
        style = STYLE_NAMES[int(rng.integers(0, 3))]
        seg_len = int(rng.integers(segment_lo, segment_hi + 1))
        seg = generate_cycle(style, seg_len, seed * 1009 + k)
        if pieces:
            # taper the joint so the splice respects the accel cap
            prev_end = pieces[-1][-1]
            for i in range(len(seg)):
                want = seg[i]
                stepped = _clip_step(prev_end, want, MAX_ACCEL)
                if stepped == want:
                    break
                seg[i] = stepped
                prev_end = stepped
        pieces.append(seg)
        total += seg_len
        k += 1
    return np.concatenate(pieces)[:duration_s]


def style_corpus(cycles_per_style: int, duration_s: int, seed: int,
                 ) -> list[tuple[str, np.ndarray]]:
    """Labeled corpus for recognizer training/evaluation."""
    corpus = []
    for si, style in enumerate(STYLE_NAMES):
        for k in range(cycles_per_style):
            corpus.append((style, generate_cycle(style, duration_s,
                                                 seed + 97 * si + k)))
    return corpus


# ---------------------------------------------------------------------------
# fixed named cycles for the shipped scenarios
# ---------------------------------------------------------------------------

def named_cycle(name: str, duration_s: int = 600, seed: int = 2024) -> np.ndarray:
    """The shipped scenario cycles: ``urban_stop_go``, ``highway_cruise``
    (with a mid-trip slowdown), and ``mixed``."""
    if name == "urban_stop_go":
        return generate_cycle("urban", duration_s, seed)
    if name == "highway_cruise":
        v = generate_cycle("highway", duration_s, seed)
        # a congestion event mid-trip: ramp down to ~11 m/s and back
        lo = int(duration_s * 0.45)
        hi = int(duration_s * 0.62)
        out = v.copy()
        prev = out[lo - 1] if lo > 0 else 0.0
        rng = np.random.default_rng(seed + 1)
        for t in range(lo, min(hi, duration_s)):
            target = 11.0 + float(rng.normal(0.0, 0.4))
            prev = _clip_step(prev, target, 0.9)
            out[t] = prev
        for t in range(hi, duration_s):
            prev = _clip_step(prev, v[t], 0.8)
            out[t] = prev
            if out[t] == v[t]:
                break
        return out
    if name == "mixed":
        return generate_mixed_cycle(duration_s, seed)
    raise InvalidConfig(f"unknown cycle name {name!r}")


NAMED_CYCLES = ("urban_stop_go", "highway_cruise", "mixed")


def accel_from_speed(speeds: np.ndarray) -> np.ndarray:
    """First-difference acceleration at 1 Hz; the first sample ramps from 0."""
    a = np.empty_like(speeds)
    a[0] = speeds[0]
    a[1:] = np.diff(speeds)
    return a


def cycle_samples(speeds: np.ndarray) -> list[DriveSample]:
    accels = accel_from_speed(speeds)
    return [DriveSample(float(v), float(a)) for v, a in zip(speeds, accels)]
