"""Quantitative model of the amplified remote-timing covert channel.

One measurement times a script that runs the leak gadget ``amplification``
times: a '0' bit costs one extra cache miss per iteration, so the expected
reading gap between the bit classes grows linearly with the amplification
factor.  The remote timer contributes an absolute network noise floor, and
each iteration's execution time jitters independently by a relative fraction
of its cost, so measurement noise grows with the square root of the
amplification factor.  That scaling is what makes requests-per-bit times
amplification roughly conserved, matching the measured request table.

All Monte-Carlo entry points take an explicit seed and derive one child seed
per phase and per candidate request count, so results are reproducible and
independent of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

CYCLES_PER_GHZ_NS = 1.0  # 1 GHz == 1 cycle/ns

# Measured reference rows for the in-sandbox attack:
# (amplification, requests per bit, script runtime in seconds, leaked bits/hour).
# The leakage column is consistent with 3600 / (requests * runtime), floored.
REFERENCE_ATTACK_ROWS: tuple[tuple[int, int, float, int], ...] = (
    (1, 250_000, 0.118, 0),
    (10, 25_000, 0.123, 1),
    (100, 2_500, 0.137, 10),
    (1_000, 250, 0.231, 62),
    (10_000, 25, 1.813, 79),
    (250_000, 1, 30.000, 120),
)

# Requests needed with no amplification at all; anchors the
# requests-times-amplification conservation law.
UNIT_AMPLIFICATION_REQUESTS = 250_000


class ChannelError(Exception):
    """Base class for channel-model failures."""


class DegenerateSamples(ChannelError):
    """Both classes collapse to the same single repeated value."""


class Unreachable(ChannelError):
    """The target success rate is not reachable within the request budget."""


@dataclass(frozen=True)
class ChannelParams:
    """Timing and noise parameters of one channel deployment.

    ``timer_jitter_rel`` is the relative jitter of each gadget iteration's
    execution time (independent per iteration, so its contribution to the
    measurement noise scales with sqrt(amplification)).  ``network_noise_sd``
    is the absolute round-trip noise of the remote timing pair, in cycles.
    """

    hit_cycles: float
    miss_cycles: float
    per_iteration_overhead: float
    eviction_accesses: int = 32_768  # 2 MB eviction array walked in 64 B lines
    timer_resolution_ns: float = 0.47
    timer_jitter_rel: float = 0.0167
    network_noise_sd: float = 0.0
    cpu_ghz: float = 2.1

    def __post_init__(self):
        if not self.miss_cycles > self.hit_cycles > 0:
            raise ValueError("need miss_cycles > hit_cycles > 0")
        if self.per_iteration_overhead < 0 or self.network_noise_sd < 0:
            raise ValueError("noise and overhead parameters must be >= 0")
        if self.timer_jitter_rel < 0 or self.timer_resolution_ns < 0:
            raise ValueError("timer parameters must be >= 0")
        if self.eviction_accesses < 0:
            raise ValueError("eviction_accesses must be >= 0")

    @property
    def resolution_cycles(self) -> float:
        return self.timer_resolution_ns * self.cpu_ghz * CYCLES_PER_GHZ_NS

    def iteration_cycles(self, bit: int) -> float:
        """Deterministic cost of one gadget iteration for the given bit.

        A '1' re-reads the already-cached line (hit); a '0' pays the extra
        miss on the architectural access.
        """
        access = self.hit_cycles if bit else self.miss_cycles
        return self.per_iteration_overhead + access

    def eviction_cycles(self) -> float:
        # one-time cache-state reset per measurement
        return self.eviction_accesses * self.hit_cycles

    def mean_reading(self, bit: int, amplification: int) -> float:
        return amplification * self.iteration_cycles(bit) + self.eviction_cycles()

    def reading_noise_sd(self, bit: int, amplification: int) -> float:
        per_iter = self.timer_jitter_rel * self.iteration_cycles(bit)
        return math.sqrt(
            self.network_noise_sd**2 + amplification * per_iter**2
        )


def js_worker_params() -> ChannelParams:
    """Sandbox-deployment calibration.

    The hit/miss gap reproduces the measured mean timing difference of
    21779307 cycles at amplification 250000; the per-iteration overhead and
    network floor are sized so ~250000 requests are needed for a 99% reliable
    bit with no amplification.
    """
    return ChannelParams(
        hit_cycles=50.0,
        miss_cycles=137.117228,
        per_iteration_overhead=406_900.0,
        network_noise_sd=2_000.0,
    )


def native_xeon_params() -> ChannelParams:
    """Native-code calibration on the evaluation server.

    The gap matches the measured 3434697-cycle mean distance at amplification
    100000 (34.34697 cycles per iteration); the overhead is sized so a bit
    takes ~2.5 s end to end at that factor, while the probe accesses alone
    sustain ~23 bit/s.
    """
    return ChannelParams(
        hit_cycles=880.0,
        miss_cycles=914.34697,
        per_iteration_overhead=51_314.0,
        network_noise_sd=1_500.0,
    )


def _quantize(readings: np.ndarray, resolution: float) -> np.ndarray:
    if resolution <= 0:
        return readings
    return np.trunc(readings / resolution) * resolution  # rounds toward zero


def simulate_bit_batch(
    bit: int,
    amplification: int,
    params: ChannelParams,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized measurements of one bit value; cycles, timer-quantized."""
    if amplification < 1:
        raise ValueError("amplification must be >= 1")
    if bit not in (0, 1):
        raise ValueError("bit must be 0 or 1")
    mean = params.mean_reading(bit, amplification)
    sd = params.reading_noise_sd(bit, amplification)
    readings = mean + sd * rng.standard_normal(size)
    return _quantize(readings, params.resolution_cycles)


def simulate_bit(bit: int, amplification: int, params: ChannelParams, rng_seed) -> float:
    """One measurement of one bit; deterministic given the seed."""
    rng = np.random.default_rng(rng_seed)
    return float(simulate_bit_batch(bit, amplification, params, 1, rng)[0])


@dataclass(frozen=True)
class BitSampleSet:
    """Timing samples per bit class; zeros run slower (one extra miss/iteration)."""

    zeros: np.ndarray
    ones: np.ndarray
    amplification: int


def sample_bit_set(
    amplification: int,
    params: ChannelParams,
    n_per_class: int,
    seed,
) -> BitSampleSet:
    root = np.random.SeedSequence(_seed_entropy(seed))
    zero_seed, one_seed = root.spawn(2)
    zeros = simulate_bit_batch(
        0, amplification, params, n_per_class, np.random.default_rng(zero_seed)
    )
    ones = simulate_bit_batch(
        1, amplification, params, n_per_class, np.random.default_rng(one_seed)
    )
    return BitSampleSet(zeros=zeros, ones=ones, amplification=amplification)


class BoxTest(NamedTuple):
    distinguishable: bool
    threshold: float


def box_test(
    zeros: Sequence[float],
    ones: Sequence[float],
    q_low: float = 10.0,
    q_high: float = 90.0,
) -> BoxTest:
    """Percentile-box distinguishability of the two timing classes.

    Classes are distinguishable when their [q_low, q_high] percentile boxes
    are disjoint; the decision threshold is the midpoint between the facing
    box edges (also returned for overlapping boxes, where it degrades to a
    best-effort split point).
    """
    zeros = np.asarray(zeros, dtype=np.float64)
    ones = np.asarray(ones, dtype=np.float64)
    if zeros.size == 0 or ones.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if not 0.0 <= q_low < q_high <= 100.0:
        raise ValueError("need 0 <= q_low < q_high <= 100")

    z_lo, z_hi = np.percentile(zeros, [q_low, q_high])
    o_lo, o_hi = np.percentile(ones, [q_low, q_high])
    if z_lo == z_hi == o_lo == o_hi:
        raise DegenerateSamples(
            "both classes collapse to a single repeated value; no threshold exists"
        )

    if z_lo >= o_lo:  # zeros are the slow class in a sane calibration
        lower_hi, upper_lo = o_hi, z_lo
    else:
        lower_hi, upper_lo = z_hi, o_lo
    return BoxTest(
        distinguishable=bool(upper_lo > lower_hi),
        threshold=float((lower_hi + upper_lo) / 2.0),
    )


def _seed_entropy(seed) -> list[int]:
    if isinstance(seed, np.random.SeedSequence):
        return list(seed.entropy) if isinstance(seed.entropy, (list, tuple)) else [seed.entropy]
    return [int(seed)]


def _one_shot_accuracy(
    amplification: int,
    params: ChannelParams,
    threshold: float,
    seed: np.random.SeedSequence,
    samples: int,
    chunk: int = 4_000_000,
) -> tuple[float, float]:
    """Per-class probabilities of classifying a single measurement correctly.

    Zeros are predicted when the reading exceeds the threshold.  Estimated
    from direct channel simulation in chunks to bound memory.
    """
    zero_seed, one_seed = seed.spawn(2)
    counts = []
    for bit, child in ((0, zero_seed), (1, one_seed)):
        rng = np.random.default_rng(child)
        hits = 0
        done = 0
        while done < samples:
            step = min(chunk, samples - done)
            readings = simulate_bit_batch(bit, amplification, params, step, rng)
            if bit == 0:
                hits += int((readings > threshold).sum())
            else:
                hits += int((readings <= threshold).sum())
            done += step
        counts.append(hits / samples)
    return counts[0], counts[1]


def _vote_success(
    n: int,
    q0: float,
    q1: float,
    trials: int,
    seed: np.random.SeedSequence,
) -> float:
    """Fraction of trials where a majority of n votes recovers the bit.

    Votes within a trial are independent, so the number of correct votes is
    exactly Binomial(n, q_class); trials split evenly between bit values.
    Ties are broken by a fair coin, which keeps the success rate
    nondecreasing in n (a tie-as-failure rule penalizes even vote counts).
    """
    rng = np.random.default_rng(seed)
    half = trials // 2
    wins = 0
    for q, count in ((q0, half), (q1, trials - half)):
        correct = rng.binomial(n, q, size=count)
        wins += int((correct * 2 > n).sum())
        ties = int((correct * 2 == n).sum())
        if ties:
            wins += int(rng.integers(0, 2, size=ties).sum())
    return wins / trials


@dataclass(frozen=True)
class ChannelCalibration:
    """Box-test threshold plus one-shot accuracies for one amplification."""

    amplification: int
    threshold: float
    accuracy_zero: float
    accuracy_one: float


def calibrate_decision(
    amplification: int,
    params: ChannelParams,
    seed,
    training_per_class: int = 4_000_000,
    accuracy_samples: int = 32_000_000,
) -> ChannelCalibration:
    root = np.random.SeedSequence(_seed_entropy(seed) + [int(amplification), 0x0B5E])
    train_seed, accuracy_seed = root.spawn(2)
    training = sample_bit_set(amplification, params, training_per_class, train_seed)
    decision = box_test(training.zeros, training.ones)
    q0, q1 = _one_shot_accuracy(
        amplification, params, decision.threshold, accuracy_seed, accuracy_samples
    )
    return ChannelCalibration(
        amplification=amplification,
        threshold=decision.threshold,
        accuracy_zero=q0,
        accuracy_one=q1,
    )


def required_requests(
    amplification: int,
    params: ChannelParams,
    target_success: float = 0.99,
    rng_seed=0,
    n_max: int = 1_000_000,
    trials: int = 1_000,
    training_per_class: int = 4_000_000,
    accuracy_samples: int = 32_000_000,
) -> int:
    """Smallest request count whose majority vote reaches the target success.

    Binary search over Monte-Carlo success estimates; every candidate n is
    evaluated with ``trials`` seeded trials whose seed depends only on
    (rng_seed, amplification, n), so the search path cannot perturb results.
    """
    if not 0.0 < target_success < 1.0:
        raise ValueError("target_success must be in (0, 1)")
    cal = calibrate_decision(
        amplification,
        params,
        rng_seed,
        training_per_class=training_per_class,
        accuracy_samples=accuracy_samples,
    )

    def success(n: int) -> float:
        seed = np.random.SeedSequence(
            _seed_entropy(rng_seed) + [int(amplification), int(n), 0x5EED]
        )
        return _vote_success(n, cal.accuracy_zero, cal.accuracy_one, trials, seed)

    if success(n_max) < target_success:
        raise Unreachable(
            f"success at n_max={n_max} below target {target_success} "
            f"for amplification {amplification}"
        )

    hi = 1
    while hi < n_max and success(hi) < target_success:
        hi = min(n_max, hi * 2)
    lo = max(1, hi // 2)
    while lo < hi:
        mid = (lo + hi) // 2
        if success(mid) >= target_success:
            hi = mid
        else:
            lo = mid + 1
    return hi


def success_rate_curve(
    amplifications: Sequence[int],
    request_counts: Sequence[int],
    params: ChannelParams,
    seed=0,
    trials: int = 1_000,
    training_per_class: int = 200_000,
    accuracy_samples: int = 2_000_000,
) -> np.ndarray:
    """Monte-Carlo success grid, shape (len(amplifications), len(request_counts))."""
    if len(amplifications) == 0 or len(request_counts) == 0:
        raise ValueError("both grid axes must be non-empty")
    grid = np.empty((len(amplifications), len(request_counts)))
    for i, amplification in enumerate(amplifications):
        cal = calibrate_decision(
            amplification,
            params,
            seed,
            training_per_class=training_per_class,
            accuracy_samples=accuracy_samples,
        )
        for j, n in enumerate(request_counts):
            child = np.random.SeedSequence(
                _seed_entropy(seed) + [int(amplification), int(n), 0x5EED]
            )
            grid[i, j] = _vote_success(
                int(n), cal.accuracy_zero, cal.accuracy_one, trials, child
            )
    return grid


# --- leakage economics ----------------------------------------------------

@dataclass(frozen=True)
class RuntimeModel:
    """Affine script-runtime model: runtime(a) = intercept + slope * a.

    Fitted by least squares to the reference rows; the a=10000 row deviates
    from affine by ~30%, so per-row exact runtimes may be passed directly
    where fidelity matters.
    """

    intercept_s: float
    slope_s: float

    def __call__(self, amplification: int) -> float:
        return self.intercept_s + self.slope_s * amplification

    @classmethod
    def fit(cls, rows: Sequence[tuple[int, float]]) -> "RuntimeModel":
        amps = np.asarray([a for a, _ in rows], dtype=np.float64)
        runtimes = np.asarray([r for _, r in rows], dtype=np.float64)
        slope, intercept = np.polyfit(amps, runtimes, 1)
        return cls(intercept_s=float(intercept), slope_s=float(slope))

    @classmethod
    def fit_reference(cls) -> "RuntimeModel":
        return cls.fit([(a, runtime) for a, _req, runtime, _leak in REFERENCE_ATTACK_ROWS])


@dataclass(frozen=True)
class LeakEstimate:
    amplification: int
    requests_per_bit: int
    script_runtime_s: float
    bits_per_hour: float
    success_rate: float


def leakage_rate(
    amplification: int,
    requests_per_bit: int,
    runtime_model: RuntimeModel | None = None,
    runtime_s: float | None = None,
    success_rate: float = 1.0,
) -> LeakEstimate:
    """Bits per hour: 3600 / (requests * runtime), scaled by the success rate."""
    if amplification < 1 or requests_per_bit < 1:
        raise ValueError("amplification and requests_per_bit must be >= 1")
    if runtime_s is None:
        runtime_s = (runtime_model or RuntimeModel.fit_reference())(amplification)
    if runtime_s <= 0:
        raise ValueError("runtime must be positive")
    bits = 3600.0 / (requests_per_bit * runtime_s) * success_rate
    return LeakEstimate(
        amplification=amplification,
        requests_per_bit=requests_per_bit,
        script_runtime_s=runtime_s,
        bits_per_hour=bits,
        success_rate=success_rate,
    )


def leakage_table(
    rows: Sequence[tuple[int, int, float, int]] = REFERENCE_ATTACK_ROWS,
) -> list[LeakEstimate]:
    """Leak estimates for the reference rows using their exact runtimes."""
    return [
        leakage_rate(amplification, requests, runtime_s=runtime)
        for amplification, requests, runtime, _reported in rows
    ]


def per_bit_seconds(amplification: int, params: ChannelParams) -> float:
    """Mean end-to-end wall time of one measurement, averaged over bit values."""
    cycles = (
        params.mean_reading(0, amplification) + params.mean_reading(1, amplification)
    ) / 2.0
    return cycles / (params.cpu_ghz * 1e9)


def access_bits_per_second(amplification: int, params: ChannelParams) -> float:
    """Channel rate counting only the probe accesses.

    Excludes per-iteration bookkeeping and eviction; this is the intrinsic
    rate the transient+probe phase sustains.
    """
    access = (params.hit_cycles + params.miss_cycles) / 2.0
    return params.cpu_ghz * 1e9 / (amplification * access)
