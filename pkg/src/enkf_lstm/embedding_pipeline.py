"""Timestamped text -> fixed-length time windows -> d-dimensional embeddings.

A sentence embedding is the mean of the word vectors of its in-vocabulary
tokens; a window embedding is the mean of the sentence embeddings that fall
in the window. Window vectors are then reduced with probabilistic PCA.
"""

import csv
import json
import logging
import re
import string
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

_URL = re.compile(r"^(https?://|www\.)", re.IGNORECASE)
_STRIP = string.punctuation + "‘’“”…"


@dataclass
class WordVectorTable:
    dim: int
    entries: dict = field(default_factory=dict)
    skipped_lines: int = 0

    def __post_init__(self):
        for tok, vec in self.entries.items():
            if np.shape(vec) != (self.dim,):
                raise ShapeError(f"vector for {tok!r} has shape {np.shape(vec)}, expected ({self.dim},)")

    def get(self, token):
        return self.entries.get(token.lower())

    def __contains__(self, token):
        return token.lower() in self.entries

    def __len__(self):
        return len(self.entries)


def load_word_vectors(path):
    """Read a GloVe-style text file: ``token v1 v2 ... vD`` per line.

    The dimension is taken from the first well-formed line; lines that do not
    parse or have a different length are skipped and counted.
    """
    entries = {}
    dim = None
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                if line.strip():
                    skipped += 1
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            if dim is None:
                dim = vec.size
            if vec.size != dim or not np.all(np.isfinite(vec)):
                skipped += 1
                continue
            entries.setdefault(parts[0].lower(), vec)
    if dim is None:
        raise DataError(f"no word vectors found in {path}")
    if skipped:
        logger.warning("skipped %d malformed word-vector lines in %s", skipped, path)
    return WordVectorTable(dim, entries, skipped)


def tokenize(text):
    """Lowercase, whitespace split, drop URLs and @-mentions, strip surrounding
    punctuation (which also removes the '#' of hashtags)."""
    tokens = []
    for raw in text.lower().split():
        if raw.startswith("@") or _URL.match(raw):
            continue
        tok = raw.strip(_STRIP)
        if tok:
            tokens.append(tok)
    return tokens


def sentence_embedding(text, table):
    """Mean word vector of the in-vocabulary tokens, or None if there are none."""
    vecs = [table.entries[t] for t in tokenize(text) if t in table.entries]
    if not vecs:
        return None
    return np.mean(vecs, axis=0)


@dataclass(frozen=True)
class WindowEmbedding:
    index: int
    start_time: float
    vector: np.ndarray
    n_sentences: int


def window_embeddings(records, window_minutes, table):
    """Average sentence embeddings over contiguous windows.

    Window 0 starts at the earliest record timestamp; the last window is the
    one containing the latest record. Windows with no embeddable sentence get
    a zero vector and ``n_sentences = 0``.

    ``records`` is an iterable of ``(ts_seconds, text)`` pairs or dicts with
    ``ts`` and ``text`` keys.
    """
    if window_minutes <= 0:
        raise ValueError("window_minutes must be > 0")
    pairs = [(r["ts"], r["text"]) if isinstance(r, dict) else tuple(r) for r in records]
    if not pairs:
        raise DataError("no records to embed")
    width = 60.0 * window_minutes
    t0 = min(p[0] for p in pairs)
    t1 = max(p[0] for p in pairs)
    n_windows = int((t1 - t0) // width) + 1
    sums = np.zeros((n_windows, table.dim))
    counts = np.zeros(n_windows, dtype=np.int64)
    for ts, text in pairs:
        vec = sentence_embedding(text, table)
        if vec is None:
            continue
        k = int((ts - t0) // width)
        sums[k] += vec
        counts[k] += 1
    out = []
    for k in range(n_windows):
        vec = sums[k] / counts[k] if counts[k] else np.zeros(table.dim)
        out.append(WindowEmbedding(k, t0 + k * width, vec, int(counts[k])))
    return out


@dataclass(frozen=True)
class PpcaModel:
    mean: np.ndarray
    components: np.ndarray   # (D, d), orthonormal columns
    eigenvalues: np.ndarray  # top-d eigenvalues, non-increasing
    residual_variance: float
    all_eigenvalues: np.ndarray

    @property
    def d(self):
        return self.components.shape[1]

    @property
    def explained_variance_ratio(self):
        total = float(np.sum(self.all_eigenvalues))
        return self.eigenvalues / total if total > 0 else np.zeros_like(self.eigenvalues)

    def save(self, path):
        binfmt.write(path, {"kind": "ppca", "residual_variance": float(self.residual_variance)},
                     {"mean": self.mean, "components": self.components,
                      "eigenvalues": self.eigenvalues, "all_eigenvalues": self.all_eigenvalues})

    @classmethod
    def load(cls, path):
        header, a = binfmt.read(path)
        if header.get("kind") != "ppca":
            raise DataError(f"{path} is not a PPCA model file")
        return cls(a["mean"], a["components"], a["eigenvalues"], header["residual_variance"],
                   a["all_eigenvalues"])


def fit_ppca(vectors, d=None, min_explained=0.99):
    """Maximum-likelihood probabilistic PCA via eigendecomposition of the
    sample covariance (divisor M - 1).

    If ``d`` is None the smallest d reaching ``min_explained`` cumulative
    explained variance is used. The residual variance is the mean of the
    discarded eigenvalues.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("fit_ppca needs at least 2 rows of data")
    if not np.all(np.isfinite(X)):
        raise DataError("fit_ppca input contains non-finite values")
    M, D = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    S = Xc.T @ Xc / (M - 1)
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = float(evals.sum())
    if total <= 0.0 or not np.any(Xc):
        raise DataError("degenerate data: all rows are identical")
    if d is None:
        cum = np.cumsum(evals) / total
        d = int(np.searchsorted(cum, min_explained - 1e-12) + 1)
        d = min(d, D)
    if not 1 <= d <= D:
        raise ValueError(f"latent dimension must be in [1, {D}], got {d}")
    comps = evecs[:, :d].copy()
    # sign convention: largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(d)])
    signs[signs == 0] = 1.0
    comps *= signs
    resid = float(evals[d:].mean()) if d < D else 0.0
    return PpcaModel(mean, comps, evals[:d].copy(), resid, evals)


def transform(model, v):
    """Posterior-mean latent coordinates ``M^{-1} W^T (v - mean)``.

    ``v`` may be a single vector or an (n, D) stack. Components whose
    ``M`` entry is zero (zero eigenvalue and zero residual variance) map to 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.size:
        raise ShapeError(f"vector length {v.shape[-1]} does not match model ({model.mean.size})")
    s2 = model.residual_variance
    scale = np.sqrt(np.clip(model.eigenvalues - s2, 0.0, None))
    W = model.components * scale
    Mp = W.T @ W + s2 * np.eye(model.d)
    proj = (v - model.mean) @ W
    # Mp is diagonal because the components are orthonormal
    diag = np.diag(Mp)
    inv = np.divide(1.0, diag, out=np.zeros_like(diag), where=diag > 0)
    return proj * inv


@dataclass(frozen=True)
class PipelineConfig:
    window_minutes: float = 5.0
    latent_dim: int = 5   # None selects d automatically at 99% explained variance
    fit_on: str = "windows"


def pipeline(records, table, config=None, ppca=None):
    """Window, fit PPCA (unless ``ppca`` is given) and project.

    Returns ``(list of WindowEmbedding in latent space, PpcaModel)``.
    """
    config = config or PipelineConfig()
    raw = window_embeddings(records, config.window_minutes, table)
    V = np.stack([w.vector for w in raw])
    if ppca is None:
        if config.fit_on == "windows":
            data = V
        elif config.fit_on == "words":
            pairs = [(r["ts"], r["text"]) if isinstance(r, dict) else r for r in records]
            vocab = sorted({t for _, text in pairs for t in tokenize(text) if t in table.entries})
            data = np.stack([table.entries[t] for t in vocab]) if vocab else np.empty((0, table.dim))
        else:
            raise ValueError(f"fit_on must be 'windows' or 'words', got {config.fit_on!r}")
        d = config.latent_dim
        if d is not None:
            d = min(int(d), table.dim)
        ppca = fit_ppca(data, d)
    Z = transform(ppca, V)
    out = [WindowEmbedding(w.index, w.start_time, z, w.n_sentences) for w, z in zip(raw, Z)]
    return out, ppca


def write_windows_csv(windows, path):
    d = windows[0].vector.size if windows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "start_time", "n_sentences"] + [f"v{i + 1}" for i in range(d)])
        for win in windows:
            w.writerow([win.index, repr(float(win.start_time)), win.n_sentences]
                       + [repr(float(x)) for x in win.vector])


def read_windows_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["index", "start_time", "n_sentences"]:
            raise DataError(f"{path} is not a window-embedding CSV")
        for row in reader:
            out.append(WindowEmbedding(int(row[0]), float(row[1]),
                                       np.array([float(x) for x in row[3:]]), int(row[2])))
    return out


def read_records(path):
    """JSON-lines ``{"ts": int, "text": str}``; returns (records, n_skipped)."""
    records = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = {"ts": int(obj["ts"]), "text": str(obj["text"])}
            except (ValueError, KeyError, TypeError):
                skipped += 1
                continue
            records.append(rec)
    if skipped:
        logger.warning("skipped %d malformed record lines in %s", skipped, path)
    return records, skipped
