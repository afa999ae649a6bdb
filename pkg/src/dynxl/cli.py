"""``dynxl`` command line: prep, train, collect-stats, eval, tune, report.

Exit codes: 0 ok, 2 bad config or input, 3 vocabulary fingerprint mismatch,
4 missing gradient statistics, 5 reports not comparable, 6 training diverged,
1 any other package error.

Set ``DYNXL_NUM_THREADS`` to pin the BLAS thread count; results are only
bit-reproducible under a fixed thread configuration.
"""

import os
import sys

_threads = os.environ.get("DYNXL_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import gzip  # noqa: E402
import logging  # noqa: E402
import tempfile  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from . import checkpoint as ckpt_io  # noqa: E402
from .checkpoint import Checkpoint  # noqa: E402
from .config import RunConfig, format_value  # noqa: E402
from .data import (build_word_stream, load_byte_corpus, read_stream, read_vocab,  # noqa: E402
                   reduce_to_char27, split_fractions, write_stream, write_vocab)
from .dyneval import AdaptState, collect_grad_stats, dynamic_eval, static_eval  # noqa: E402
from .errors import (ComparisonError, ConfigError, DataError, DynXLError, FingerprintError,  # noqa: E402
                     FormatError, MissingStatsError, TrainingDivergedError)
from .harness import compare_table, train, tune_dyneval  # noqa: E402
from .metrics import load_report  # noqa: E402

log = logging.getLogger("dynxl")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_FINGERPRINT, EXIT_STATS, EXIT_REPORT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6
SPLIT_FILES = {"train": "train.bin", "valid": "valid.bin", "test": "test.bin"}
VOCAB_FILE = "vocab.tsv"
MODES = {"static": None, "sgd": "sgd", "rms": "rms_decay"}


def _stamp(out_dir: Path, message: str) -> None:
    """Timestamps live only in this sidecar so every other output is reproducible."""
    if not out_dir.is_dir():
        return
    now = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(out_dir / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{now} {message}\n")


def _read_input(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _load_stream(path: Path, vocab_path: Path | None = None):
    vocab = read_vocab(vocab_path or path.parent / VOCAB_FILE)
    try:
        return read_stream(path, vocab)
    except OSError as exc:
        raise DataError(f"cannot read stream {path}: {exc.strerror}") from None


def _out_dir(cfg: RunConfig) -> Path:
    return cfg.path("out.dir", must_exist=False)


def _checkpoint_arg(args, cfg: RunConfig) -> Path:
    p = Path(args.checkpoint) if args.checkpoint else _out_dir(cfg) / "model.ckpt"
    if not p.exists():
        raise ConfigError("checkpoint", f"no checkpoint at {p}; run 'dynxl train' or pass --checkpoint")
    return p


def _stream_arg(args, cfg: RunConfig, split: str) -> Path:
    if args.stream:
        p = Path(args.stream)
        if not p.exists():
            raise ConfigError("stream", f"path does not exist: {p}")
        return p
    p = cfg.path("data.dir") / SPLIT_FILES[split]
    if not p.exists():
        raise ConfigError("data.dir", f"no prepared {split} stream at {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_prep(args, cfg: RunConfig) -> int:
    data = cfg.data
    src = cfg.path("data.input")
    out_dir = cfg.path("data.dir", must_exist=False) if data.dir else _out_dir(cfg)
    text_kinds = {"char27", "word"}
    if data.kind not in ("byte", *text_kinds):
        raise ConfigError("data.kind", "must be byte, char27 or word")
    raw = _read_input(src)
    if data.kind == "byte":
        vocab, stream = load_byte_corpus(raw, data.fractions)
    else:
        text = raw.decode("utf-8", errors="replace")
        if data.kind == "char27":
            vocab, stream = reduce_to_char27(text, data.fractions)
        else:
            vocab, stream = build_word_stream(text, data.vocab_limit, data.fractions)
    parts = split_fractions(stream, data.fractions)

    # Stage everything, then move into place: a failure leaves no partial output.
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out_dir) as tmp:
        tmp = Path(tmp)
        for part in parts:
            write_stream(tmp / SPLIT_FILES[part.split], part)
        write_vocab(tmp / VOCAB_FILE, vocab)
        for name in [*SPLIT_FILES.values(), VOCAB_FILE]:
            os.replace(tmp / name, out_dir / name)
    print(f"vocab_size = {vocab.size}")
    for part in parts:
        print(f"{part.split} = {len(part)}")
    print(f"vocab_fingerprint = {vocab.fingerprint()}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    train_stream = _load_stream(_stream_arg(args, cfg, "train"))
    valid_stream = _load_stream(cfg.path("data.dir") / SPLIT_FILES["valid"])
    vocab = train_stream.vocab
    extra = {}
    if cfg.raw.get("model.output_layer_kind") == "adaptive" and "model.adaptive_order" not in cfg.raw:
        extra["adaptive_order"] = tuple(vocab.frequency_order())
    model_cfg = cfg.model(vocab.size, **extra)
    tcfg = cfg.train
    out_dir = _out_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out_dir / "model.ckpt"
    (out_dir / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    fp = vocab.fingerprint()

    def save_best(step, params, point):
        Checkpoint(params, fp, None, tcfg.seed, step).save(ckpt_path)

    metrics = out_dir / "metrics.log"
    try:
        _, curve = train(model_cfg, tcfg, train_stream, valid_stream, callback=save_best)
    except TrainingDivergedError as exc:
        print(f"error: {exc}; last good checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_DIVERGED
    with open(metrics, "w", encoding="utf-8") as f:
        for p in curve:
            line = f"step = {p.step} train_loss = {p.train_loss!r} lr = {p.lr!r}"
            if p.valid_bpc is not None:
                line += f" valid_bpt = {p.valid_bpc!r}"
            f.write(line + "\n")
    best = min(p.valid_bpc for p in curve if p.valid_bpc is not None)
    print(f"checkpoint = {ckpt_path}")
    print(f"best_valid_bits_per_token = {best!r}")
    return EXIT_OK


def cmd_collect_stats(args, cfg: RunConfig) -> int:
    path = _checkpoint_arg(args, cfg)
    stream = _load_stream(_stream_arg(args, cfg, "train"))
    ck = ckpt_io.load(path, stream.vocab.fingerprint())
    ck.stats = collect_grad_stats(ck.params, stream, max_segments=cfg.stats.max_segments)
    ck.save(Path(args.output) if args.output else path)
    print(f"segments = {ck.stats.segments}")
    print(f"mean_rms = {ck.stats.mean_rms!r}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    path = _checkpoint_arg(args, cfg)
    stream = _load_stream(_stream_arg(args, cfg, args.split))
    ck = ckpt_io.load(path, stream.vocab.fingerprint())
    mode = args.mode or {"sgd": "sgd", "rms_decay": "rms"}.get(cfg.raw.get("dyneval.optimizer_kind"), "static")
    if mode == "static":
        seg = cfg.dyneval.segment_len
        report = static_eval(ck.params, stream, seg)
    else:
        if mode == "rms" and ck.stats is None:
            raise MissingStatsError(f"{path} has no gradient statistics; run 'dynxl collect-stats' first")
        cfg.update({"dyneval.optimizer_kind": MODES[mode]})
        dcfg = cfg.dyneval
        report = dynamic_eval(AdaptState.fresh(ck.params, ck.stats), stream, dcfg)
    if args.label:
        report.label = args.label
    out = Path(args.output) if args.output else _out_dir(cfg) / f"{mode}.report"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out, out.with_name(out.name + ".losses"))
    print(f"report = {out}")
    print(f"bits_per_token = {report.bits_per_token!r}")
    print(f"perplexity = {report.perplexity!r}")
    return EXIT_OK


def cmd_tune(args, cfg: RunConfig) -> int:
    path = _checkpoint_arg(args, cfg)
    stream = _load_stream(_stream_arg(args, cfg, "valid"))
    if stream.split == "test":
        raise DataError("refusing to tune on the test split")
    ck = ckpt_io.load(path, stream.vocab.fingerprint())
    tune = cfg.tune
    grid = tune.grid()
    if ck.stats is None and any(c.optimizer_kind == "rms_decay" for c in grid):
        raise MissingStatsError(f"{path} has no gradient statistics; run 'dynxl collect-stats' "
                                "first or set tune.kinds = sgd")
    if tune.max_tokens is not None and len(stream) > tune.max_tokens:
        stream = stream.slice(0, tune.max_tokens)
    result = tune_dyneval(ck.params, ck.stats, stream, grid, workers=tune.workers)
    out_dir = _out_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = result.table()
    (out_dir / "tune.txt").write_text(table, encoding="utf-8")
    best_lines = [f"dyneval.{k} = {format_value(getattr(result.best, k))}"
                  for k in ("optimizer_kind", "learning_rate", "decay_rate", "epsilon")]
    (out_dir / "best.cfg").write_text("\n".join(best_lines) + "\n", encoding="utf-8")
    kinds = sorted({c.optimizer_kind for c in grid})
    for kind in kinds:
        best = result.best_of(kind)
        lines = [f"dyneval.{k} = {format_value(getattr(best, k))}"
                 for k in ("optimizer_kind", "learning_rate", "decay_rate", "epsilon")]
        (out_dir / f"best_{kind}.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")
    sys.stdout.write(table)
    print(f"best = {result.best.describe()}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    if not args.reports:
        raise ConfigError("reports", "need at least one report file")
    reports = {}
    for p in map(Path, args.reports):
        if not p.exists():
            raise ConfigError("reports", f"no such file: {p}")
        losses = p.with_name(p.name + ".losses")
        name = p.name.removesuffix(".report")
        if name in reports:
            raise ConfigError("reports", f"duplicate report name {name!r}")
        reports[name] = load_report(p, losses if losses.exists() else None)
    table = compare_table(reports, args.baseline, args.metric)
    sys.stdout.write(table.to_text())
    if args.csv:
        Path(args.csv).write_text(table.to_csv(), encoding="utf-8")
    return EXIT_OK


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "collect-stats": cmd_collect_stats,
            "eval": cmd_eval, "tune": cmd_tune, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynxl", description=__doc__.split("\n")[0],
        epilog="Any config key can also be given as a flag, e.g. --model.d_model 64.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", default=[],
                       help="run config file (key = value lines); repeat to layer files, later ones win")
        if name == "report":
            p.add_argument("reports", nargs="*")
            p.add_argument("--baseline")
            p.add_argument("--metric", choices=("bpc", "ppl"), default="bpc")
            p.add_argument("--csv")
            continue
        if name != "prep":
            p.add_argument("--checkpoint", help="default: <out.dir>/model.ckpt")
            p.add_argument("--stream", help="token stream file (default: from data.dir)")
        if name == "collect-stats":
            p.add_argument("--output", help="write here instead of updating the checkpoint in place")
        if name == "eval":
            p.add_argument("--mode", choices=tuple(MODES),
                           help="default: from dyneval.optimizer_kind if set, else static")
            p.add_argument("--split", choices=("valid", "test"), default="test")
            p.add_argument("--output", help="report path (default: <out.dir>/<mode>.report)")
            p.add_argument("--label")
    return parser


def _overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "unexpected argument")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(key, "missing value") from None
        if not RunConfig.known_key(key):
            raise ConfigError(key, "unknown key")
        out[key] = value
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    out_dir = None
    try:
        cfg = RunConfig.load(args.config[0]) if args.config else RunConfig()
        for extra_cfg in args.config[1:]:
            cfg.update(RunConfig.load(extra_cfg).raw)
        cfg.update(_overrides(extra))
        out_dir = _out_dir(cfg)
        if args.command != "report":
            _stamp(out_dir, f"{args.command} start")
        code = COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except FingerprintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_FINGERPRINT
    except MissingStatsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_STATS
    except ComparisonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_REPORT
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    except DynXLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    if out_dir is not None and args.command != "report":
        _stamp(out_dir, f"{args.command} exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
