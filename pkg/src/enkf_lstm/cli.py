"""Command-line entry point: ``enkf-lstm {embed,train,detect,eval,synth}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error,
5 I/O error. Failures also print ``{"error": {"category", "message"}}`` as
JSON on stderr.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bayes_lstm import PosteriorModel, TrainingConfig, make_samples, train
from .datasets import (
    EVENTS,
    EventSpec,
    SyntheticConfig,
    SyntheticTextConfig,
    evaluate,
    generate_synthetic,
    generate_text_corpus,
    ingest,
    read_ground_truth,
    write_ground_truth,
    write_records,
    write_word_vectors,
)
from .embedding_pipeline import (
    PipelineConfig,
    PpcaModel,
    WindowEmbedding,
    load_word_vectors,
    pipeline,
    read_records,
    read_windows_csv,
    write_windows_csv,
)
from .errors import ConfigError, DataError, EnkfLstmError, NumericalError
from .outlier_detect import DetectConfig, detect, read_report_csv, write_report_csv, write_summary_json

logger = logging.getLogger("enkf_lstm")

EXIT_CODES = {"config": 2, "data": 3, "numerical": 4, "io": 5}

# tags for deriving per-subsystem seeds from the top-level seed
_SYNTH_SERIES_STREAM = 3
_SYNTH_TEXT_STREAM = 4


def _out(cfg, name):
    return Path(cfg["out_dir"]) / name


def _echo_config(cfg, command):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.txt").write_text(cfgmod.dump_config(cfg))


@contextmanager
def _executor(cfg):
    n = cfg["workers"] or os.cpu_count() or 1
    if n <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            yield pool


def training_config(cfg):
    return TrainingConfig(
        sequence_len=cfg["sequence_len"], batch_size=cfg["batch_size"],
        n_members=cfg["members"], hidden_dim=cfg["hidden_dim"], sigma_w=cfg["sigma_w"],
        sigma_eps_init=cfg["sigma_eps"], mle_enabled=cfg["mle"],
        mle_max_iter=cfg["mle_max_iter"], noise_estimator=cfg["noise_estimator"],
        seed=cfg["seed"],
    )


def _load_windows(cfg):
    windows = read_windows_csv(cfg["windows"])
    if not windows:
        raise DataError(f"{cfg['windows']} contains no windows")
    return windows


def cmd_embed(cfg):
    table = load_word_vectors(cfg["vectors"])
    if cfg["event"] or cfg["keywords"]:
        if cfg["event"]:
            if cfg["event"] not in EVENTS:
                raise ConfigError(f"unknown event {cfg['event']!r}; choose from {sorted(EVENTS)}")
            spec = EVENTS[cfg["event"]]
        else:
            spec = EventSpec("custom", -np.inf, 0.0, np.inf)
        if cfg["keywords"]:
            kws = tuple(k.strip() for k in cfg["keywords"].split(",") if k.strip())
            spec = EventSpec(spec.name, spec.collection_start, spec.event_time,
                             spec.collection_end, kws)
        records, stats = ingest(cfg["records"], spec)
        logger.info("ingest kept %d records", stats.kept)
    else:
        records, _ = read_records(cfg["records"])
    if not records:
        raise DataError("no records left to embed")
    pc = PipelineConfig(cfg["window_minutes"], cfgmod.latent_dim(cfg), cfg["fit_on"])
    ppca = PpcaModel.load(cfg["ppca"]) if cfg["ppca"] else None
    windows, ppca = pipeline(records, table, pc, ppca=ppca)
    _echo_config(cfg, "embed")
    write_windows_csv(windows, _out(cfg, "windows.csv"))
    ppca.save(_out(cfg, "ppca.bin"))
    return {"windows": len(windows), "latent_dim": ppca.d,
            "explained_variance": float(np.sum(ppca.explained_variance_ratio))}


def cmd_train(cfg):
    windows = _load_windows(cfg)
    series = np.stack([w.vector for w in windows])
    if cfg["train_windows"]:
        series = series[:cfg["train_windows"]]
    tc = training_config(cfg)
    samples = make_samples(series, tc.sequence_len)
    resume = PosteriorModel.load(cfg["resume"]) if cfg["resume"] else None
    with _executor(cfg) as ex:
        model = train(samples, tc, resume=resume, executor=ex)
    _echo_config(cfg, "train")
    model.save(_out(cfg, "model.bin"))
    with open(_out(cfg, "train_log.jsonl"), "w") as fh:
        for rec in model.training_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {"samples": len(samples), "sigma_eps": model.sigma_eps, "step": model.step}


def cmd_detect(cfg):
    model = PosteriorModel.load(cfg["model"])
    windows = _load_windows(cfg)[cfg["detect_from"]:]
    series = np.stack([w.vector for w in windows]) if windows else np.empty((0, 0))
    if series.shape[0] < model.config.sequence_len + 1:
        raise DataError(f"detection stream has {series.shape[0]} windows; "
                        f"need at least {model.config.sequence_len + 1}")
    ts = np.array([w.start_time for w in windows])
    with _executor(cfg) as ex:
        reports = detect(series, model, DetectConfig(cfg["upper_tail"]), timestamps=ts,
                         executor=ex)
    _echo_config(cfg, "detect")
    write_report_csv(reports, _out(cfg, "reports.csv"))
    write_summary_json(reports, _out(cfg, "summary.json"))
    return {"windows": len(reports), "flagged": int(sum(r.is_outlier for r in reports))}


def cmd_eval(cfg):
    reports = read_report_csv(cfg["reports"])
    truth = read_ground_truth(cfg["truth"])
    metrics = evaluate(reports, truth, cfg["tolerance_windows"], 60.0 * cfg["window_minutes"])
    _echo_config(cfg, "eval")
    with open(_out(cfg, "metrics.json"), "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics.to_dict()


def cmd_synth(cfg):
    seed = cfg["seed"]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["synth.kind"] == "series":
        sc = SyntheticConfig(
            n_windows=cfg["synth.n_windows"], dim=cfg["synth.dim"],
            sequence_len=cfg["sequence_len"], hidden_dim=cfg["synth.hidden_dim"],
            noise_std=cfg["synth.noise_std"], n_outliers=cfg["synth.n_outliers"],
            magnitude=cfg["synth.magnitude"], clean_prefix=cfg["synth.clean_prefix"],
            window_minutes=cfg["window_minutes"],
        )
        st = generate_synthetic(sc, np.random.default_rng([seed, _SYNTH_SERIES_STREAM]))
        windows = [WindowEmbedding(i, float(t), v, 1)
                   for i, (t, v) in enumerate(zip(st.timestamps, st.series))]
        write_windows_csv(windows, out / "windows.csv")
        truth = st.truth
        result = {"windows": len(windows), "outliers": len(truth)}
    else:
        tc = SyntheticTextConfig(n_windows=cfg["synth.n_windows"],
                                 window_minutes=cfg["window_minutes"],
                                 n_outliers=cfg["synth.n_outliers"])
        records, vectors, truth = generate_text_corpus(
            tc, np.random.default_rng([seed, _SYNTH_TEXT_STREAM]))
        write_records(records, out / "records.jsonl")
        write_word_vectors(vectors, out / "vectors.txt")
        result = {"records": len(records), "outliers": len(truth)}
    write_ground_truth(truth, out / "truth.csv")
    _echo_config(cfg, "synth")
    return result


COMMANDS = {"embed": cmd_embed, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval, "synth": cmd_synth}


def build_parser():
    parser = argparse.ArgumentParser(prog="enkf-lstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (_, typ, help_) in cfgmod.DEFAULTS.items():
            dest = key.replace(".", "__")
            if typ is bool:
                p.add_argument(cfgmod.flag_name(key), dest=dest,
                               action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=help_)
            else:
                p.add_argument(cfgmod.flag_name(key), dest=dest, default=argparse.SUPPRESS,
                               help=help_)
    return parser


def _error(category, message):
    print(json.dumps({"error": {"category": category, "message": message}}), file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _error("config", "invalid command line (see usage above)")
    ns = vars(args)
    command = ns.pop("command")
    logging.basicConfig(level=logging.INFO if ns.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = ns.pop("config")
    flags = {k.replace("__", "."): v for k, v in ns.items()}
    try:
        file_values = cfgmod.load_config_file(config_path) if config_path else {}
        cfg = cfgmod.resolve(file_values, flags)
        result = COMMANDS[command](cfg)
    except EnkfLstmError as exc:
        return _error(exc.category, str(exc))
    except OSError as exc:
        return _error("io", str(exc))
    except (ValueError, ArithmeticError) as exc:
        category = "numerical" if isinstance(exc, ArithmeticError) else "data"
        return _error(category, str(exc))
    print(json.dumps({"command": command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
