import numpy as np
import pytest

from dynxl import checkpoint
from dynxl.checkpoint import Checkpoint
from dynxl.config import RunConfig, parse_value
from dynxl.data import gen_repetition_corpus
from dynxl.dyneval import collect_grad_stats, static_eval
from dynxl.errors import ConfigError, FingerprintError, FormatError
from dynxl.model import ModelConfig, init_model

CFG = ModelConfig(vocab_size=12, n_layers=1, d_model=8, n_heads=2, d_head=4, d_ff=16, segment_len=8, mem_len=8)


def make(stats=False, **kw):
    p = init_model(CFG if not kw else ModelConfig(**{**CFG.to_dict(), **kw}), 3)
    ck = Checkpoint(p, "f" * 32, seed=3, step=17)
    if stats:
        ck.stats = collect_grad_stats(p, gen_repetition_corpus(1, p.config.vocab_size, 2, 4, 0.5, 64))
    return ck


@pytest.mark.parametrize("stats", [False, True])
def test_round_trip_bytes_identical(tmp_path, stats):
    ck = make(stats)
    ck.save(tmp_path / "a.ckpt")
    back = checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.config == ck.config and (back.seed, back.step) == (3, 17)
    assert back.params.names() == ck.params.names()
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()


def test_adaptive_config_round_trip():
    ck = make(output_layer_kind="adaptive", adaptive_cutoffs=(4, 8),
              adaptive_order=tuple(range(11, -1, -1)))
    back = checkpoint.from_bytes(ck.to_bytes())
    assert back.config == ck.config


def test_stats_embedding_leaves_params_untouched():
    plain = make()
    with_stats = make(stats=True)
    a, b = plain.to_bytes(), with_stats.to_bytes()
    assert b.startswith(a)
    assert b[len(a):len(a) + 4] == b"STAT"


def test_fingerprint_checked(tmp_path):
    make().save(tmp_path / "m.ckpt")
    checkpoint.load(tmp_path / "m.ckpt", "f" * 32)
    with pytest.raises(FingerprintError):
        checkpoint.load(tmp_path / "m.ckpt", "0" * 32)


def test_corrupt_files(tmp_path):
    data = make().to_bytes()
    with pytest.raises(FormatError):
        checkpoint.from_bytes(b"NOPE!" + data[5:])
    with pytest.raises(FormatError):
        checkpoint.from_bytes(data[:-3])
    with pytest.raises(FormatError):
        checkpoint.load(tmp_path / "missing.ckpt")


def test_reports_identical_after_reload():
    ck = make()
    data = gen_repetition_corpus(2, 12, 2, 4, 0.5, 50)
    back = checkpoint.from_bytes(ck.to_bytes())
    assert static_eval(ck.params, data).to_text() == static_eval(back.params, data).to_text()


# ---------------------------------------------------------------------------
# run config


def test_parse_and_sections(tmp_path):
    (tmp_path / "data").mkdir()
    text = """
    # comment
    data.dir = data
    model.d_model = 32
    model.n_heads = 2
    train.clip_norm = none
    tune.learning_rates = 1e-4, 1e-3
    """
    cfg = RunConfig.from_text(text, tmp_path)
    assert cfg.model(10).d_model == 32
    assert cfg.train.clip_norm is None
    assert cfg.tune.learning_rates == (1e-4, 1e-3)
    assert cfg.path("data.dir") == tmp_path / "data"


def test_unknown_key_named():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_text("model.width = 3")
    assert e.value.field == "model.width"
    with pytest.raises(ConfigError):
        RunConfig.from_text("nonsense line")
    with pytest.raises(ConfigError):
        RunConfig.from_text("train.steps = 1\ntrain.steps = 2")


def test_bad_values_and_paths(tmp_path):
    with pytest.raises(ConfigError) as e:
        RunConfig.from_text("train.steps = many").train
    assert e.value.field == "train.steps"
    with pytest.raises(ConfigError):
        RunConfig.from_text("data.dir = nowhere", tmp_path).path("data.dir")
    with pytest.raises(ConfigError):
        RunConfig().path("data.input")


def test_value_parsing():
    assert parse_value("1, 2", tuple[int, ...]) == (1, 2)
    assert parse_value("", tuple[int, ...]) == ()
    assert parse_value("none", int | None) is None
    assert parse_value("2.5", float | None) == 2.5


def test_text_round_trip():
    cfg = RunConfig.from_text("train.steps = 5\nmodel.d_model = 8")
    assert RunConfig.from_text(cfg.to_text()).raw == cfg.raw


def test_inline_comments():
    cfg = RunConfig.from_text("data.kind = char27   # reduced alphabet\n  # whole line\ndata.input = a#b.txt")
    assert cfg.raw == {"data.kind": "char27", "data.input": "a#b.txt"}
