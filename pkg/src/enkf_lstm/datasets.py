"""Record ingestion, ground truth, synthetic streams and detection metrics."""

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import DataError
from .lstm_core import LstmShape, forward_ensemble, pack

logger = logging.getLogger(__name__)


def _utc(s):
    return datetime.strptime(s, "%m/%d/%Y %H:%M:%S").replace(tzinfo=timezone.utc).timestamp()


@dataclass(frozen=True)
class EventSpec:
    name: str
    collection_start: float
    event_time: float
    collection_end: float
    keywords: tuple = ()

    def __post_init__(self):
        if not self.collection_start <= self.event_time <= self.collection_end:
            raise DataError(f"event {self.name!r}: times must satisfy start <= event <= end")


# Event metadata of the five Twitter case studies (times taken as UTC).
EVENTS = {
    "boston_marathon": EventSpec("2013 Boston Marathon", _utc("04/12/2013 00:00:00"),
                                 _utc("04/15/2013 14:49:00"), _utc("04/18/2013 23:59:59"),
                                 ("marathon", "#marathon")),
    "superbowl": EventSpec("2013 Superbowl", _utc("01/31/2013 00:00:00"),
                           _utc("02/03/2013 20:38:00"), _utc("02/06/2014 23:59:59"),
                           ("superbowl", "giants", "ravens", "harbaugh")),
    "oscar": EventSpec("2013 OSCAR", _utc("02/21/2013 00:00:00"), _utc("02/24/2013 20:30:00"),
                       _utc("02/27/2013 23:59:59"),
                       ("oscar", "#sethmacfarlane", "#academyawards")),
    "nba_allstar": EventSpec("2013 NBA AllStar", _utc("02/14/2013 00:00:00"),
                             _utc("02/17/2013 20:30:00"), _utc("02/20/2013 23:59:59"),
                             ("allstar", "all-star")),
    "zimmerman_trial": EventSpec("Zimmerman Trial", _utc("07/12/2013 11:30:00"),
                                 _utc("07/13/2013 22:00:00"), _utc("07/15/2013 11:30:00"),
                                 ("trayvon", "zimmerman")),
}


@dataclass
class IngestStats:
    kept: int = 0
    out_of_range: int = 0
    no_keyword: int = 0
    malformed: int = 0


def ingest(path, spec):
    """Keep records in the collection range whose text contains a keyword.

    Returns ``(records, IngestStats)``; record order is preserved.
    """
    keywords = [k.lower() for k in spec.keywords]
    stats = IngestStats()
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ts, text = int(obj["ts"]), str(obj["text"])
            except (ValueError, KeyError, TypeError):
                stats.malformed += 1
                continue
            if not spec.collection_start <= ts <= spec.collection_end:
                stats.out_of_range += 1
                continue
            low = text.lower()
            if keywords and not any(k in low for k in keywords):
                stats.no_keyword += 1
                continue
            records.append({"ts": ts, "text": text})
            stats.kept += 1
    if stats.malformed:
        logger.warning("skipped %d malformed lines in %s", stats.malformed, path)
    return records, stats


@dataclass
class GroundTruth:
    intervals: list = field(default_factory=list)  # [(start, end, label)], epoch seconds

    def __post_init__(self):
        for iv in self.intervals:
            if iv[0] > iv[1]:
                raise DataError(f"interval {iv} has start after end")

    def normalized(self):
        """Sorted, with overlapping intervals merged (labels joined by '|')."""
        out = []
        for s, e, lab in sorted(self.intervals, key=lambda iv: (iv[0], iv[1])):
            if out and s <= out[-1][1]:
                ps, pe, pl = out[-1]
                out[-1] = (ps, max(pe, e), pl if lab == pl or not lab else f"{pl}|{lab}")
            else:
                out.append((s, e, lab))
        return GroundTruth(out)

    def __len__(self):
        return len(self.intervals)


def _iso(ts):
    return datetime.fromtimestamp(ts, timezone.utc).isoformat()


def _parse_iso(s):
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def write_ground_truth(truth, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "end", "label"])
        for s, e, lab in truth.intervals:
            w.writerow([_iso(s), _iso(e), lab])


def read_ground_truth(path):
    intervals = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "start":
                continue
            try:
                intervals.append((_parse_iso(row[0]), _parse_iso(row[1]),
                                  row[2] if len(row) > 2 else ""))
            except (ValueError, IndexError) as exc:
                raise DataError(f"bad ground-truth row {row!r}: {exc}") from exc
    return GroundTruth(intervals).normalized()


@dataclass(frozen=True)
class DetectionMetrics:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float = None  # None when TP + FP == 0
    recall: float = None     # None when TP + FN == 0
    f1: float = None

    def to_dict(self):
        return {"true_positives": self.true_positives, "false_positives": self.false_positives,
                "false_negatives": self.false_negatives, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def flag_episodes(reports):
    """Maximal runs of consecutive flagged window indices."""
    episodes = []
    for r in reports:
        if not r.is_outlier:
            continue
        if episodes and r.window_index == episodes[-1][-1].window_index + 1:
            episodes[-1].append(r)
        else:
            episodes.append([r])
    return episodes


def evaluate(reports, truth, tolerance_windows=1, window_seconds=300.0):
    """Episode-level precision/recall against ground-truth intervals.

    Each interval is widened by ``tolerance_windows * window_seconds`` on both
    sides. An episode (run of consecutive flags) matches the earliest
    still-unmatched interval containing one of its window start times and
    counts as one true positive; otherwise it is a false positive.
    Intervals never matched are false negatives.
    """
    intervals = truth.normalized().intervals
    pad = tolerance_windows * window_seconds
    matched = [False] * len(intervals)
    tp = fp = 0
    for ep in flag_episodes(reports):
        times = [r.timestamp for r in ep]
        hit = None
        for k, (s, e, _) in enumerate(intervals):
            if not matched[k] and any(s - pad <= t <= e + pad for t in times):
                hit = k
                break
        if hit is None:
            fp += 1
        else:
            matched[hit] = True
            tp += 1
    fn = matched.count(False)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return DetectionMetrics(tp, fp, fn, precision, recall, f1)


# ---------------------------------------------------------------------------
# synthetic streams


@dataclass(frozen=True)
class SyntheticConfig:
    n_windows: int = 2000
    dim: int = 5
    sequence_len: int = 32
    hidden_dim: int = 8
    noise_std: float = 0.3
    recurrent_norm: float = 0.9
    n_outliers: int = 20
    magnitude: float = 8.0   # in marginal standard deviations of the base series
    min_gap: int = 2         # injected windows are at least this many indices apart
    clean_prefix: int = 0    # no injections before clean_prefix + sequence_len
    window_minutes: float = 5.0
    start_time: float = 0.0
    burn_in: int = 64


@dataclass(frozen=True)
class SyntheticStream:
    series: np.ndarray       # (T, d) with injections
    base: np.ndarray         # (T, d) negative control
    timestamps: np.ndarray
    truth: GroundTruth
    outlier_indices: np.ndarray
    generator_weights: np.ndarray
    generator_shape: LstmShape


def random_stable_lstm(shape, rng, recurrent_norm=0.9):
    """Random LSTM weights with every recurrent block's spectral norm set to
    ``recurrent_norm``."""
    p, h, q = shape.input_dim, shape.hidden_dim, shape.output_dim
    parts = {}
    for wx, wm, b in (("W_ix", "W_im", "b_i"), ("W_fx", "W_mf", "b_f"),
                      ("W_cx", "W_cm", "b_c"), ("W_ox", "W_om", "b_o")):
        parts[wx] = rng.standard_normal((h, p)) / np.sqrt(p)
        R = rng.standard_normal((h, h))
        parts[wm] = R * (recurrent_norm / np.linalg.norm(R, 2))
        parts[b] = 0.1 * rng.standard_normal(h)
    parts["W_ym"] = rng.standard_normal((q, h)) * (1.5 / np.sqrt(h))
    parts["b_y"] = 0.1 * rng.standard_normal(q)
    return pack(parts, shape)


def _pick_outliers(rng, lo, hi, count, min_gap):
    if count == 0:
        return np.array([], dtype=int)
    # place `count` points in [lo, hi) with spacing >= min_gap: sample
    # compressed positions, then re-expand
    slack = (hi - lo) - (count - 1) * (min_gap - 1)
    if slack < count:
        raise DataError(f"cannot place {count} outliers {min_gap} apart in {hi - lo} windows")
    base = np.sort(rng.choice(slack, size=count, replace=False))
    return lo + base + (min_gap - 1) * np.arange(count)


def generate_synthetic(config, rng):
    """Autoregressive series from a random stable LSTM plus Gaussian noise,
    with mean-shift outliers injected afterwards.

    Each window is the generator's prediction from the preceding
    ``sequence_len`` windows plus N(0, noise_std^2 I) noise. Injected windows
    are shifted by ``magnitude`` marginal standard deviations in every
    coordinate with a random sign per coordinate; the shift is not fed back
    into the dynamics, so ``magnitude = 0`` reproduces the base series.
    """
    c = config
    if c.n_outliers < 0 or c.n_windows <= c.sequence_len:
        raise DataError("n_windows must exceed sequence_len and n_outliers must be >= 0")
    if c.n_outliers > c.n_windows - c.sequence_len - c.clean_prefix:
        raise DataError("more outliers than available windows")
    shape = LstmShape(c.dim, c.hidden_dim, c.dim)
    w = random_stable_lstm(shape, rng, c.recurrent_norm).values
    total = c.burn_in + c.n_windows
    L = c.sequence_len
    series = np.zeros((total + L, c.dim))
    series[:L] = c.noise_std * rng.standard_normal((L, c.dim))
    noise = c.noise_std * rng.standard_normal((total, c.dim))
    for t in range(L, total + L):
        y = forward_ensemble(w[None], shape, series[None, t - L:t])[0, 0]
        series[t] = y + noise[t - L]
    base = series[L + c.burn_in:].copy()

    idx = _pick_outliers(rng, c.clean_prefix + L, c.n_windows, c.n_outliers, c.min_gap)
    std = base.std(axis=0, ddof=1)
    series_out = base.copy()
    signs = rng.choice([-1.0, 1.0], size=(idx.size, c.dim))
    if idx.size:
        series_out[idx] += c.magnitude * signs * std
    width = 60.0 * c.window_minutes
    ts = c.start_time + width * np.arange(c.n_windows)
    truth = GroundTruth([(float(ts[i]), float(ts[i]), f"injected_{k}") for k, i in enumerate(idx)])
    return SyntheticStream(series_out, base, ts, truth, idx, w, shape)


@dataclass(frozen=True)
class SyntheticTextConfig:
    n_windows: int = 120
    window_minutes: float = 5.0
    start_time: int = 1_365_984_000
    word_dim: int = 10
    n_topics: int = 3
    words_per_topic: int = 12
    tweets_per_window: float = 8.0
    tweet_len: tuple = (4, 9)
    topic_period: int = 6
    n_outliers: int = 4
    min_gap: int = 3


def generate_text_corpus(config, rng):
    """Toy tweet stream with its own word-vector table.

    Background tweets come from topic vocabularies; the dominant topic cycles
    every ``topic_period`` windows. Outlier windows are dominated by a burst
    vocabulary that never appears elsewhere. Returns
    ``(records, vectors, truth)`` where ``vectors`` maps token -> vector.
    """
    c = config
    n_vocab = c.n_topics + 1
    centers = 3.0 * rng.standard_normal((n_vocab, c.word_dim))
    vocab = []
    vectors = {}
    for k in range(n_vocab):
        words = [f"{'burst' if k == c.n_topics else 'topic'}{k}w{j}" for j in range(c.words_per_topic)]
        for wd in words:
            vectors[wd] = centers[k] + 0.5 * rng.standard_normal(c.word_dim)
        vocab.append(words)
    idx = _pick_outliers(rng, c.n_windows // 4, c.n_windows, c.n_outliers, c.min_gap)
    outliers = set(int(i) for i in idx)
    width = int(60 * c.window_minutes)
    records = []
    for k in range(c.n_windows):
        n = max(1, int(rng.poisson(c.tweets_per_window)))
        dominant = (k // c.topic_period) % c.n_topics
        offsets = np.sort(rng.integers(0, width, size=n))
        if k == 0:
            offsets[0] = 0
        for off in offsets:
            if k in outliers and rng.random() < 0.7:
                topic = c.n_topics
            elif rng.random() < 0.8:
                topic = dominant
            else:
                topic = int(rng.integers(c.n_topics))
            length = int(rng.integers(c.tweet_len[0], c.tweet_len[1] + 1))
            words = [vocab[topic][j] for j in rng.integers(c.words_per_topic, size=length)]
            if rng.random() < 0.3:
                words.append("@someone")
            if rng.random() < 0.2:
                words.append("http://t.co/x")
            if rng.random() < 0.3:
                words[0] = "#" + words[0]
            records.append({"ts": int(c.start_time + k * width + off), "text": " ".join(words)})
    truth = GroundTruth([(float(c.start_time + i * width), float(c.start_time + i * width),
                          f"burst_{j}") for j, i in enumerate(idx)])
    return records, vectors, truth


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"ts": int(r["ts"]), "text": r["text"]}) + "\n")


def write_word_vectors(vectors, path):
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in vectors.items():
            fh.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")
