"""Run configuration: defaults, flat ``key = value`` files and CLI flags.

File grammar, one entry per line::

    # comment
    key = value

Blank lines and ``#`` comments are ignored; values are parsed according to
the key's type in ``DEFAULTS``. Booleans accept true/false/yes/no/1/0.
Every key has a command-line flag: ``--`` + key with ``.`` and ``_``
replaced by ``-`` (``synth.n_windows`` -> ``--synth-n-windows``).
Precedence: flags > file > defaults.
"""

from .errors import ConfigError

AUTO = "auto99"

# key -> (default, type, help)
DEFAULTS = {
    "seed": (0, int, "top-level random seed"),
    "out_dir": (".", str, "output directory"),
    "workers": (0, int, "member-propagation threads (0 = all cores); never changes results"),
    # embedding
    "records": ("records.jsonl", str, "input JSON-lines records"),
    "vectors": ("vectors.txt", str, "word vectors in GloVe text format"),
    "window_minutes": (5.0, float, "window length in minutes"),
    "latent_dim": ("5", str, f"PPCA latent dimension or '{AUTO}'"),
    "fit_on": ("windows", str, "fit PPCA on 'windows' or 'words'"),
    "ppca": ("", str, "existing PPCA model to reuse (empty = fit)"),
    "event": ("", str, "event preset used to filter records (empty = none)"),
    "keywords": ("", str, "comma-separated include keywords (empty = none)"),
    # training
    "windows": ("windows.csv", str, "window-embedding CSV used by train/detect"),
    "train_windows": (0, int, "use only the first n windows for training (0 = all)"),
    "sequence_len": (32, int, "windows per input sequence"),
    "batch_size": (16, int, "samples per EnKF update"),
    "members": (100, int, "ensemble size"),
    "hidden_dim": (32, int, "LSTM memory cells"),
    "sigma_w": (1.0, float, "prior weight standard deviation"),
    "sigma_eps": (1.0, float, "initial observation-noise variance"),
    "mle": (True, bool, "re-estimate the noise variance by maximum likelihood"),
    "mle_max_iter": (5, int, "maximum noise-MLE iterations"),
    "noise_estimator": ("exact", str, "observation-noise covariance in the gain: 'exact' or 'sample'"),
    "resume": ("", str, "model checkpoint to continue training from"),
    # detection / evaluation
    "model": ("model.bin", str, "model checkpoint"),
    "detect_from": (0, int, "first window of the detection stream"),
    "upper_tail": (0.05, float, "chi-squared upper-tail probability"),
    "reports": ("reports.csv", str, "outlier report CSV"),
    "truth": ("truth.csv", str, "ground-truth CSV"),
    "tolerance_windows": (1, int, "matching tolerance in windows"),
    # synthetic data
    "synth.kind": ("series", str, "'series' (window CSV) or 'text' (records + vectors)"),
    "synth.n_windows": (2000, int, "synthetic stream length"),
    "synth.dim": (5, int, "series dimension"),
    "synth.hidden_dim": (8, int, "generator LSTM cells"),
    "synth.noise_std": (0.3, float, "generator noise standard deviation"),
    "synth.n_outliers": (20, int, "injected outliers"),
    "synth.magnitude": (8.0, float, "injection size in marginal standard deviations"),
    "synth.clean_prefix": (0, int, "leading windows kept free of injections"),
}


def flag_name(key):
    return "--" + key.replace(".", "-").replace("_", "-")


def parse_bool(text):
    low = str(text).strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = DEFAULTS[key][1]
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    try:
        if typ is bool:
            return parse_bool(value)
        return typ(str(value).strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def parse_config_text(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def resolve(file_values=None, flag_values=None):
    cfg = {k: v[0] for k, v in DEFAULTS.items()}
    for layer in (file_values or {}, flag_values or {}):
        for k, v in layer.items():
            cfg[k] = coerce(k, v)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["members"] < 2:
        raise ConfigError("members must be >= 2")
    for key in ("sequence_len", "batch_size", "hidden_dim", "mle_max_iter"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("sigma_w", "sigma_eps", "window_minutes"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be > 0")
    if not 0 < cfg["upper_tail"] < 1:
        raise ConfigError("upper_tail must lie in (0, 1)")
    if cfg["fit_on"] not in ("windows", "words"):
        raise ConfigError("fit_on must be 'windows' or 'words'")
    if cfg["noise_estimator"] not in ("exact", "sample"):
        raise ConfigError("noise_estimator must be 'exact' or 'sample'")
    if cfg["synth.kind"] not in ("series", "text"):
        raise ConfigError("synth.kind must be 'series' or 'text'")
    if cfg["latent_dim"] != AUTO:
        try:
            if int(cfg["latent_dim"]) < 1:
                raise ValueError
        except ValueError:
            raise ConfigError(f"latent_dim must be a positive integer or '{AUTO}'") from None
    if cfg["workers"] < 0 or cfg["tolerance_windows"] < 0:
        raise ConfigError("workers and tolerance_windows must be >= 0")


def latent_dim(cfg):
    return None if cfg["latent_dim"] == AUTO else int(cfg["latent_dim"])


def dump_config(cfg):
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(cfg.items())]
    return "\n".join(lines) + "\n"
