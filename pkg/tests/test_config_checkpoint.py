import struct

import numpy as np
import pytest

from ocnet.checkpoint import (
    Checkpoint,
    decode_rng,
    dumps,
    encode_rng,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from ocnet.config import ConfigError, RunConfig, load_config, parse_config
from ocnet.data import generate_shapes
from ocnet.engine import Trainer, build_model
from ocnet.errors import DataError


# -- config ----------------------------------------------------------------------


def test_empty_config_is_all_defaults():
    assert parse_config("") == RunConfig()


def test_parse_values_lists_and_comments():
    cfg = parse_config(
        """
        # a comment line
        module = asp-oc
        aspp_rates = 6, 12, 18   # trailing comment
        flip = yes
        eval_scales = 0.75, 1.0, 1.25
        base_lr = 0.02
        """
    )
    assert cfg.module == "asp-oc"
    assert cfg.aspp_rates == (6, 12, 18)
    assert cfg.flip is True
    assert cfg.eval_scales == (0.75, 1.0, 1.25)
    assert cfg.base_lr == 0.02


def test_text_round_trip():
    cfg = RunConfig(module="pyramid-oc", ohem=True, eval_scales=(0.5, 1.0), seed=9, train_data="d/train")
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text,line,key",
    [
        ("seed = 1\ncolour = red\n", 2, None),
        ("seed = 1\nseed = 2\n", 2, None),
        ("\n\nmax_iter = many\n", 3, None),
        ("seed = 3\nmodule = psp\n", 2, "module"),
        ("batch_size = 0\n", 1, "batch_size"),
        ("just words\n", 1, None),
        ("flip = maybe\n", 1, None),
    ],
)
def test_rejections_name_the_line(text, line, key):
    with pytest.raises(ConfigError, match=rf"cfg.txt:{line}:") as info:
        parse_config(text, "cfg.txt")
    if key:
        assert info.value.key == key


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.conf")


def test_ohem_min_kept_defaults_to_quarter_of_batch():
    assert RunConfig(ohem=True).ohem_config(4000).min_kept == 1000
    assert RunConfig(ohem=True, ohem_min_kept=7).ohem_config(4000).min_kept == 7
    assert RunConfig().ohem_config(4000) is None


# -- checkpoint format ---------------------------------------------------------------


def _sample_checkpoint(rng):
    gen = np.random.default_rng(77)
    gen.random(3)
    return Checkpoint(
        tensors={"a.weight": rng.standard_normal((2, 3, 1, 1)).astype(np.float32), "b": np.float32([1.5])},
        velocities={"a.weight": rng.standard_normal((2, 3, 1, 1)).astype(np.float32)},
        iteration=123456789,
        rng_state=gen.bit_generator.state,
    )


def test_header_layout(rng):
    raw = dumps(_sample_checkpoint(rng))
    assert raw[:4] == b"OCN1"
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == 1 and count == 5
    (name_len,) = struct.unpack_from("<I", raw, 12)
    assert raw[16 : 16 + name_len] == b"a.weight"
    rank, *dims = struct.unpack_from("<5I", raw, 16 + name_len)
    assert rank == 4 and dims == [2, 3, 1, 1]


def test_round_trip_bitwise(rng, tmp_path):
    ckpt = _sample_checkpoint(rng)
    save_checkpoint(tmp_path / "a.ocn", ckpt)
    back = load_checkpoint(tmp_path / "a.ocn")
    for k, v in ckpt.tensors.items():
        assert np.array_equal(back.tensors[k], v)
    assert np.array_equal(back.velocities["a.weight"], ckpt.velocities["a.weight"])
    assert back.iteration == 123456789
    assert back.rng_state == ckpt.rng_state
    save_checkpoint(tmp_path / "b.ocn", back)
    assert (tmp_path / "a.ocn").read_bytes() == (tmp_path / "b.ocn").read_bytes()


def test_rng_state_survives_encoding():
    gen = np.random.default_rng(2024)
    gen.integers(0, 10, 5)
    restored = np.random.default_rng()
    restored.bit_generator.state = decode_rng(encode_rng(gen.bit_generator.state))
    assert np.array_equal(gen.random(8), restored.random(8))


def test_corrupt_files_rejected(rng):
    raw = dumps(_sample_checkpoint(rng))
    with pytest.raises(DataError):
        loads(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        loads(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(DataError):
        loads(raw[:-3])
    with pytest.raises(DataError):
        loads(raw + b"\x00")


# -- training persistence ---------------------------------------------------------------

TINY = dict(
    module="base-oc",
    max_iter=6,
    batch_size=2,
    backbone_stages=(4, 8, 8, 16),
    backbone_ch=16,
    mid_ch=8,
    out_ch=8,
    log_every=1,
    seed=3,
)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_shapes(5, 12, h=32, w=32)


def _params(trainer):
    return {k: v.copy() for k, v in trainer.model.state_dict().items()}


def test_zero_iterations_checkpoint_is_initialisation(tiny_data):
    cfg = RunConfig(**{**TINY, "max_iter": 0})
    trainer = Trainer(cfg, tiny_data)
    trainer.run()
    init = build_model(cfg).state_dict()
    ckpt = trainer.checkpoint()
    assert ckpt.iteration == 0
    for k, v in init.items():
        assert np.array_equal(ckpt.tensors[k], v)


def test_fixed_seed_training_is_bitwise_repeatable(tiny_data):
    cfg = RunConfig(**TINY)
    a, b = Trainer(cfg, tiny_data), Trainer(cfg, tiny_data)
    losses_a = [r.loss for r in a.run()]
    losses_b = [r.loss for r in b.run()]
    assert losses_a == losses_b
    pa, pb = _params(a), _params(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_resume_equals_uninterrupted(tiny_data, tmp_path):
    cfg = RunConfig(**TINY)
    full = Trainer(cfg, tiny_data)
    full.run()
    first = Trainer(cfg, tiny_data)
    first.run(until=3)
    save_checkpoint(tmp_path / "half.ocn", first.checkpoint())
    second = Trainer(cfg, tiny_data)
    second.restore(load_checkpoint(tmp_path / "half.ocn"))
    assert second.iteration == 3
    second.run()
    pf, ps = _params(full), _params(second)
    assert all(np.array_equal(pf[k], ps[k]) for k in pf)


def test_logged_lr_endpoints(tiny_data):
    cfg = RunConfig(**{**TINY, "base_lr": 0.03})
    records = Trainer(cfg, tiny_data).run()
    assert records[0].lr == 0.03
    assert records[-1].lr < 0.03 * (1 / 6) ** 0.9 + 1e-12
    assert records[0].line().split("\t")[:2] == ["0", "0.03"]
