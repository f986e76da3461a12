"""Side-channel evaluation: CPA/CEMA, spectral CPA, TVLA and MTD estimation.

All statistics are kept in mergeable accumulators (centered co-moments
combined with the pairwise update of Chan et al.), so batches can be
produced independently and reduced in a fixed order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .aes_core import last_round_hd_table, last_round_key

log = logging.getLogger(__name__)

TVLA_THRESHOLD = 4.5


class ZeroVarianceError(ValueError):
    def __init__(self, columns):
        self.columns = list(int(c) for c in columns)
        shown = self.columns[:20]
        more = "..." if len(self.columns) > 20 else ""
        super().__init__(f"zero-variance sample columns: {shown}{more}")


@dataclass
class TraceSet:
    samples: np.ndarray
    plaintexts: np.ndarray
    ciphertexts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-D (n_traces, n_samples) array")
        self.plaintexts = np.asarray(self.plaintexts, dtype=np.uint8).reshape(-1, 16)
        self.ciphertexts = np.asarray(self.ciphertexts, dtype=np.uint8).reshape(-1, 16)
        n = self.samples.shape[0]
        if self.plaintexts.shape[0] != n or self.ciphertexts.shape[0] != n:
            raise ValueError("samples, plaintexts and ciphertexts disagree on the trace count")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def sample_rate_hz(self) -> float:
        return float(self.metadata.get("sample_rate_hz", 0.0))

    def __getitem__(self, idx) -> "TraceSet":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return TraceSet(self.samples[idx], self.plaintexts[idx], self.ciphertexts[idx], dict(self.metadata))

    @classmethod
    def concatenate(cls, sets: Sequence["TraceSet"]) -> "TraceSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([s.samples for s in sets]),
                   np.concatenate([s.plaintexts for s in sets]),
                   np.concatenate([s.ciphertexts for s in sets]),
                   dict(sets[0].metadata))


# -- accumulators -----------------------------------------------------------------

class CorrelationAccumulator:
    """Pearson correlation between ``H`` hypothesis columns and ``S`` sample columns."""

    def __init__(self, n_hyp: int, n_samples: int):
        self.n = 0
        self.mean_h = np.zeros(n_hyp)
        self.mean_t = np.zeros(n_samples)
        self.m2_h = np.zeros(n_hyp)
        self.m2_t = np.zeros(n_samples)
        self.c_ht = np.zeros((n_hyp, n_samples))

    @classmethod
    def from_batch(cls, h: np.ndarray, t: np.ndarray) -> "CorrelationAccumulator":
        h = np.asarray(h, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        acc = cls(h.shape[1], t.shape[1])
        if h.shape[0] == 0:
            return acc
        acc.n = h.shape[0]
        acc.mean_h = h.mean(axis=0)
        acc.mean_t = t.mean(axis=0)
        hc = h - acc.mean_h
        tc = t - acc.mean_t
        acc.m2_h = np.einsum("ij,ij->j", hc, hc)
        acc.m2_t = np.einsum("ij,ij->j", tc, tc)
        acc.c_ht = hc.T @ tc
        return acc

    def update(self, h: np.ndarray, t: np.ndarray) -> "CorrelationAccumulator":
        return self.merge(CorrelationAccumulator.from_batch(h, t))

    def merge(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                                  for k, v in other.__dict__.items()})
            return self
        na, nb = self.n, other.n
        n = na + nb
        dh = other.mean_h - self.mean_h
        dt = other.mean_t - self.mean_t
        w = na * nb / n
        self.c_ht += other.c_ht + w * np.outer(dh, dt)
        self.m2_h += other.m2_h + w * dh * dh
        self.m2_t += other.m2_t + w * dt * dt
        self.mean_h += dh * (nb / n)
        self.mean_t += dt * (nb / n)
        self.n = n
        return self

    def zero_variance_columns(self) -> np.ndarray:
        return np.flatnonzero(self.m2_t <= 0.0)

    def correlation(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.c_ht / np.sqrt(np.outer(self.m2_h, self.m2_t))
        return np.clip(r, -1.0, 1.0)


class WelchAccumulator:
    """Running mean and centered second moment per sample column."""

    def __init__(self, n_samples: int):
        self.n = 0
        self.mean = np.zeros(n_samples)
        self.m2 = np.zeros(n_samples)

    def update(self, t: np.ndarray) -> "WelchAccumulator":
        t = np.asarray(t, dtype=np.float64)
        other = WelchAccumulator(t.shape[1])
        if t.shape[0]:
            other.n = t.shape[0]
            other.mean = t.mean(axis=0)
            d = t - other.mean
            other.m2 = np.einsum("ij,ij->j", d, d)
        return self.merge(other)

    def merge(self, other: "WelchAccumulator") -> "WelchAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        d = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + d * d * (self.n * other.n / n)
        self.mean = self.mean + d * (other.n / n)
        self.n = n
        return self

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


def welch_t(a: WelchAccumulator, b: WelchAccumulator) -> np.ndarray:
    if a.n < 2 or b.n < 2:
        raise ValueError("Welch's t needs at least two traces per set")
    num = a.mean - b.mean
    den = np.sqrt(a.variance / a.n + b.variance / b.n)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = num / den
    # identical constant columns carry no evidence either way
    return np.where((den == 0) & (num == 0), 0.0, t)


# -- results ------------------------------------------------------------------------

@dataclass
class AttackResult:
    correlations: np.ndarray
    key_rank: int | None
    mtd_curve: list[tuple[int, int]]
    recovered_key_bytes: list[int]
    target_byte: int = 0
    correct_key_byte: int | None = None
    n_traces: int = 0
    rank_curve: list[tuple[int, int | None]] = field(default_factory=list)
    peak_curve: list[tuple[int, float]] = field(default_factory=list)
    frequencies: np.ndarray | None = None

    @property
    def recovered(self) -> bool:
        return self.key_rank == 0

    @property
    def mtd(self) -> int | None:
        """First checkpoint from which the correct guess stays on top."""
        if self.correct_key_byte is None:
            return None
        hit = None
        for count, best in self.mtd_curve:
            if best == self.correct_key_byte:
                if hit is None:
                    hit = count
            else:
                hit = None
        return hit


@dataclass
class TvlaResult:
    t_values: np.ndarray
    max_abs_t: float
    first_leaky_trace_count: int | None
    curve: list[tuple[int, float]] = field(default_factory=list)
    threshold: float = TVLA_THRESHOLD

    @property
    def leaky(self) -> bool:
        return self.max_abs_t > self.threshold


# -- helpers ------------------------------------------------------------------------

def log_checkpoints(max_count: int, start: int = 8, per_decade: int = 10) -> list[int]:
    """Log-spaced strictly increasing trace counts ending at ``max_count``."""
    if max_count < 1:
        return []
    start = min(start, max_count)
    n_pts = max(2, int(math.ceil(per_decade * math.log10(max_count / start))) + 1)
    pts = np.unique(np.round(np.logspace(math.log10(start), math.log10(max_count), n_pts)).astype(np.int64))
    pts = [int(p) for p in pts if p <= max_count]
    if pts[-1] != max_count:
        pts.append(int(max_count))
    return pts


def final_round_window(n_samples: int, n_rounds: int = 14, rounds: int = 2) -> tuple[int, int]:
    """Sample range of the last ``rounds`` register transitions."""
    spr = n_samples // n_rounds
    if spr < 1 or spr * n_rounds != n_samples:
        return (0, n_samples)
    return (n_samples - rounds * spr, n_samples)


def key_rank_at(corr: np.ndarray, correct: int) -> tuple[int, int, int]:
    """``(rank, best_guess, sample)`` evaluated at the global-max sample."""
    score = np.abs(np.nan_to_num(corr, nan=0.0))
    g, s = np.unravel_index(int(np.argmax(score)), score.shape)
    col = score[:, s]
    rank = int(np.sum(col > col[correct])) if correct is not None else None
    return rank, int(g), int(s)


def correct_key_byte_from(metadata: dict, target_byte: int) -> int | None:
    key = metadata.get("key")
    if key is None:
        return None
    key = bytes.fromhex(key) if isinstance(key, str) else bytes(key)
    return last_round_key(key)[target_byte]


def average_repeats(traces: TraceSet, averaging: int) -> TraceSet:
    """Mean over consecutive groups of ``averaging`` same-plaintext captures.

    Sets without that structure (random plaintexts) are returned unchanged.
    """
    if averaging < 1:
        raise ValueError("averaging must be >= 1")
    if averaging == 1:
        return traces
    n = len(traces) - len(traces) % averaging
    pts = traces.plaintexts[:n].reshape(-1, averaging, 16)
    if n == 0 or not np.all(pts == pts[:, :1, :]):
        log.warning("trace set has no repeated-plaintext groups of %d; averaging skipped", averaging)
        return traces
    samples = traces.samples[:n].reshape(-1, averaging, traces.n_samples).mean(axis=1, dtype=np.float64)
    return TraceSet(samples, pts[:, 0, :], traces.ciphertexts[:n:averaging], dict(traces.metadata))


def _split_at(batches: Iterable[TraceSet], checkpoints: Sequence[int]) -> Iterator[tuple[TraceSet, bool]]:
    """Re-chunk a batch stream so every checkpoint falls on a chunk edge."""
    cps = list(checkpoints)
    seen = 0
    i = 0
    for batch in batches:
        start = 0
        while start < len(batch):
            while i < len(cps) and cps[i] <= seen:
                i += 1
            if i >= len(cps):
                return
            take = min(len(batch) - start, cps[i] - seen)
            chunk = batch[start:start + take]
            seen += take
            start += take
            yield chunk, seen == cps[i]


# -- attacks ------------------------------------------------------------------------

def cpa_stream(batches: Iterable[TraceSet], target_byte: int, checkpoints: Sequence[int],
               correct_key_byte: int | None = None, window: tuple[int, int] | None = None,
               hypothesis: Callable[[TraceSet, int], np.ndarray] | None = None) -> AttackResult:
    """CPA over a stream of trace batches, evaluated at each checkpoint."""
    if not 0 <= target_byte < 16:
        raise ValueError("target_byte must be in 0..15")
    hypothesis = hypothesis or (lambda ts, b: last_round_hd_table(ts.ciphertexts, b))
    acc = None
    mtd_curve: list[tuple[int, int]] = []
    rank_curve: list[tuple[int, int | None]] = []
    peak_curve: list[tuple[int, float]] = []
    for chunk, at_checkpoint in _split_at(batches, checkpoints):
        t = chunk.samples if window is None else chunk.samples[:, window[0]:window[1]]
        h = hypothesis(chunk, target_byte)
        part = CorrelationAccumulator.from_batch(h, t)
        acc = part if acc is None else acc.merge(part)
        if at_checkpoint:
            corr = acc.correlation()
            rank, best, _ = key_rank_at(corr, correct_key_byte)
            mtd_curve.append((acc.n, best))
            rank_curve.append((acc.n, rank))
            peak_curve.append((acc.n, float(np.nanmax(np.abs(corr)))))
    if acc is None:
        raise ValueError("no traces to attack")
    zero = acc.zero_variance_columns()
    if zero.size:
        raise ZeroVarianceError(zero)
    corr = acc.correlation()
    rank, best, _ = key_rank_at(corr, correct_key_byte)
    if not mtd_curve or mtd_curve[-1][0] != acc.n:
        mtd_curve.append((acc.n, best))
        rank_curve.append((acc.n, rank))
        peak_curve.append((acc.n, float(np.nanmax(np.abs(corr)))))
    return AttackResult(correlations=corr, key_rank=rank, mtd_curve=mtd_curve, recovered_key_bytes=[best],
                        target_byte=target_byte, correct_key_byte=correct_key_byte, n_traces=acc.n,
                        rank_curve=rank_curve, peak_curve=peak_curve)


def cpa_attack(traces: TraceSet, target_byte: int, averaging: int = 1, correct_key_byte: int | None = None,
               checkpoints: Sequence[int] | None = None, window: tuple[int, int] | None = None,
               min_traces: int = 256) -> AttackResult:
    """Last-round Hamming-distance CPA on one trace set."""
    if not 0 <= target_byte < 16:
        raise ValueError("target_byte must be in 0..15")
    traces = average_repeats(traces, averaging)
    if len(traces) < min_traces:
        raise ValueError(f"need at least {min_traces} traces after averaging, got {len(traces)}")
    if correct_key_byte is None:
        correct_key_byte = correct_key_byte_from(traces.metadata, target_byte)
    if checkpoints is None:
        checkpoints = log_checkpoints(len(traces))
    return cpa_stream([traces], target_byte, checkpoints, correct_key_byte, window)


def cema_attack(em_traces: TraceSet, target_byte: int, averaging: int = 1, **kw) -> AttackResult:
    """CPA machinery applied to EM-proxy traces."""
    return cpa_attack(em_traces, target_byte, averaging, **kw)


def magnitude_spectrum(samples: np.ndarray, window: tuple[int, int] | None = None) -> np.ndarray:
    """One-sided |DFT| per row after zero-padding to a power of two."""
    x = np.asarray(samples, dtype=np.float64)
    if window is not None:
        x = x[:, window[0]:window[1]]
    n = 1 << max(0, (x.shape[-1] - 1).bit_length())
    return np.abs(np.fft.rfft(x, n=n, axis=-1))


def spectrum_frequencies(n_samples: int, sample_rate_hz: float) -> np.ndarray:
    n = 1 << max(0, (n_samples - 1).bit_length())
    return np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)


def spectral_cpa(traces: TraceSet, target_byte: int, f_lo: float, f_hi: float,
                 correct_key_byte: int | None = None, window: tuple[int, int] | None = None,
                 checkpoints: Sequence[int] | None = None, batch_size: int = 8192) -> AttackResult:
    """CPA across magnitude-spectrum bins in ``[f_lo, f_hi]``."""
    fs = traces.sample_rate_hz
    if fs <= 0:
        raise ValueError("trace metadata lacks a sample rate")
    if f_hi > fs / 2:
        raise ValueError(f"f_hi={f_hi:g} Hz above Nyquist {fs / 2:g} Hz")
    if f_lo > f_hi:
        raise ValueError("f_lo must not exceed f_hi")
    n_used = traces.n_samples if window is None else window[1] - window[0]
    freqs = spectrum_frequencies(n_used, fs)
    keep = (freqs >= f_lo) & (freqs <= f_hi)
    if not keep.any():
        raise ValueError("no frequency bins inside [f_lo, f_hi]")
    if correct_key_byte is None:
        correct_key_byte = correct_key_byte_from(traces.metadata, target_byte)

    def spectra():
        for i in range(0, len(traces), batch_size):
            part = traces[i:i + batch_size]
            mag = magnitude_spectrum(part.samples, window)[:, keep]
            yield TraceSet(mag, part.plaintexts, part.ciphertexts, part.metadata)

    cps = checkpoints if checkpoints is not None else log_checkpoints(len(traces))
    res = cpa_stream(spectra(), target_byte, cps, correct_key_byte)
    res.frequencies = freqs[keep]
    return res


def leaky_bins(result: AttackResult, z: float = 4.5) -> np.ndarray:
    """Frequencies where the correct guess is on top and exceeds ``z/sqrt(N)``."""
    if result.frequencies is None or result.correct_key_byte is None:
        return np.array([])
    score = np.abs(np.nan_to_num(result.correlations))
    top = np.argmax(score, axis=0)
    strong = score[result.correct_key_byte] > z / math.sqrt(result.n_traces)
    return result.frequencies[(top == result.correct_key_byte) & strong]


# -- TVLA ---------------------------------------------------------------------------

def tvla_stream(pairs: Iterable[tuple[np.ndarray, np.ndarray]], checkpoints: Sequence[int],
                threshold: float = TVLA_THRESHOLD) -> TvlaResult:
    """Fixed-vs-random Welch test over paired batches; checkpoints count traces per set."""
    acc_f = acc_r = None
    curve: list[tuple[int, float]] = []
    first = None
    cps = list(checkpoints)
    i = 0
    t = None
    for f_batch, r_batch in pairs:
        f_batch = np.asarray(f_batch)
        r_batch = np.asarray(r_batch)
        if acc_f is None:
            acc_f = WelchAccumulator(f_batch.shape[1])
            acc_r = WelchAccumulator(r_batch.shape[1])
        start = 0
        n = min(len(f_batch), len(r_batch))
        while start < n and i < len(cps):
            take = min(n - start, cps[i] - acc_f.n)
            acc_f.update(f_batch[start:start + take])
            acc_r.update(r_batch[start:start + take])
            start += take
            if acc_f.n == cps[i]:
                if acc_f.n >= 2:
                    t = welch_t(acc_f, acc_r)
                    m = float(np.max(np.abs(t)))
                    curve.append((acc_f.n, m))
                    if first is None and m > threshold:
                        first = acc_f.n
                i += 1
        if i >= len(cps):
            break
    if acc_f is None or acc_f.n < 2:
        raise ValueError("TVLA needs at least two traces per set")
    t = welch_t(acc_f, acc_r)
    return TvlaResult(t_values=t, max_abs_t=float(np.max(np.abs(t))), first_leaky_trace_count=first,
                      curve=curve, threshold=threshold)


def tvla(fixed: TraceSet, random: TraceSet, checkpoints: Sequence[int] | None = None,
         threshold: float = TVLA_THRESHOLD) -> TvlaResult:
    """Per-sample Welch t between a fixed-input and a random-input set."""
    if len(fixed) < 2 or len(random) < 2:
        raise ValueError("TVLA needs at least two traces per set")
    if fixed.n_samples != random.n_samples:
        raise ValueError("fixed and random sets differ in n_samples")
    n = min(len(fixed), len(random))
    cps = checkpoints if checkpoints is not None else log_checkpoints(n, start=2)
    acc_f = WelchAccumulator(fixed.n_samples).update(fixed.samples)
    acc_r = WelchAccumulator(random.n_samples).update(random.samples)
    res = tvla_stream([(fixed.samples[:n], random.samples[:n])], cps, threshold)
    # the final t uses every trace in both sets, which may be unbalanced
    t = welch_t(acc_f, acc_r)
    res.t_values = t
    res.max_abs_t = float(np.max(np.abs(t)))
    return res


# -- MTD ----------------------------------------------------------------------------

def estimate_mtd(attack: Callable[[int, int], AttackResult], max_traces: int, n_repeats: int = 3) -> int | None:
    """Smallest checkpoint where the key ranks first in at least ``n_repeats - 1`` runs.

    ``attack(repeat, max_traces)`` must return an :class:`AttackResult` whose
    ``mtd_curve`` uses the same checkpoints for every repeat.  ``None`` means
    the disclosure point was not reached within ``max_traces``.
    """
    if n_repeats < 3:
        raise ValueError("n_repeats must be >= 3")
    hits: dict[int, int] = {}
    for rep in range(n_repeats):
        res = attack(rep, max_traces)
        if res.correct_key_byte is None:
            raise ValueError("attack result lacks the correct key byte")
        for count, best in res.mtd_curve:
            if count <= max_traces:
                hits[count] = hits.get(count, 0) + (best == res.correct_key_byte)
    for count in sorted(hits):
        if hits[count] >= n_repeats - 1:
            return count
    return None
