import numpy as np
import pytest

from shatterlab import numerics as nx
from shatterlab.config import (
    ABLATION_LADDER,
    CLS,
    MODEL_PRESETS,
    PAD,
    ConfigError,
    ModelConfig,
    load_run_config,
    preset,
)
from shatterlab.encoder import (
    add_classifier,
    classify,
    encode,
    extend_max_length,
    init_params,
    load_checkpoint,
    mlm_logits,
    save_checkpoint,
)

SMALL = dict(num_layers=2, hidden=16, parts=4, ffn=32, vocab_size=12, max_len=8, rpe_clip=4)


def tokens(rng, b=2, l=8, vocab=12):
    t = rng.integers(4, vocab, size=(b, l))
    t[:, 0] = CLS
    return t


def shifted_pair(rng, cfg, content_len=6, l=16, offset=5):
    """Same content placed at position 0 and at ``offset``, padding elsewhere."""
    content = np.concatenate([[CLS], rng.integers(4, cfg.vocab_size, size=content_len - 1)])
    toks = np.full((2, l), PAD)
    toks[0, :content_len] = content
    toks[1, offset : offset + content_len] = content
    pad = toks != PAD
    return toks, pad


def encoder_grad_error(name, seed=0):
    cfg = preset(name, **SMALL)
    rng = np.random.default_rng(seed)
    with nx.precision("float64"):
        params, cfg = add_classifier(init_params(cfg, seed), cfg, 3, seed)
        for t in params.tensors.values():
            t.data += rng.normal(scale=0.05, size=t.shape)
        toks = tokens(rng)
        pad = np.ones_like(toks, dtype=bool)
        pad[1, 6:] = False
        labels = np.full(toks.shape, nx.IGNORE_INDEX)
        labels[0, 2], labels[1, 4] = 5, 7
        sel = labels != nx.IGNORE_INDEX

        def loss():
            states = encode(toks, pad, cfg, params)
            mlm = nx.cross_entropy(mlm_logits(states.last, sel, params), labels[sel])
            return mlm + nx.cross_entropy(classify(states, params, cfg, "pooled"), np.array([0, 2]))

        return nx.finite_diff_check(loss, params.tensors)


class TestConfig:
    def test_presets_valid(self):
        for name in MODEL_PRESETS:
            assert preset(name).name == name

    def test_ladder_has_seven(self):
        assert len(ABLATION_LADDER) == 7

    @pytest.mark.parametrize(
        "kw,field",
        [
            (dict(hidden=10, parts=4), "parts"),
            (dict(parts=3, hidden=12), "parts"),
            (dict(vocab_size=4), "vocab_size"),
            (dict(cls_strategy="mean"), "cls_strategy"),
            (dict(dropout=1.0), "dropout"),
        ],
    )
    def test_field_level_errors(self, kw, field):
        with pytest.raises(ConfigError) as exc:
            preset("shatter", **kw)
        assert exc.value.field == field

    def test_positions_not_allowed_for_shatter(self):
        with pytest.raises(ConfigError):
            ModelConfig(attention="shatter", use_position_embeddings=True)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="hiden"):
            ModelConfig.from_dict({"hiden": 4})

    def test_round_trip(self):
        cfg = preset("part_mask", alphas=(-1.0, -2.0), betas=(-0.5, -0.25))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_yaml_file(self, tmp_path):
        f = tmp_path / "run.yaml"
        f.write_text("model:\n  preset: shatter\n  hidden: 32\ntrain:\n  steps: 5\n")
        cfg, train = load_run_config(str(f))
        assert cfg.hidden == 32 and train == {"steps": 5}
        f.write_text("model:\n  preset: shatter\ntrain:\n  stepz: 5\n")
        with pytest.raises(ConfigError, match="train.stepz"):
            load_run_config(str(f))


class TestEncode:
    @pytest.mark.parametrize("name", sorted(MODEL_PRESETS))
    def test_shapes(self, name, rng):
        cfg = preset(name, **SMALL)
        states = encode(tokens(rng), None, cfg, init_params(cfg))
        assert len(states) == 3
        assert states.last.shape == (2, 8, 16)
        assert np.all(np.isfinite(states.last.data))

    def test_rejects_long_and_bad_ids(self, rng):
        cfg = preset("shatter", **SMALL)
        p = init_params(cfg)
        with pytest.raises(ValueError):
            encode(np.zeros((1, 9), dtype=int), None, cfg, p)
        with pytest.raises(ValueError):
            encode(np.full((1, 4), 12), None, cfg, p)

    def test_shatter_shift_invariant_bert_not(self, rng):
        shatter = preset("shatter", hidden=32, parts=4, ffn=64, vocab_size=20, max_len=16)
        bert = preset("bert", hidden=32, parts=4, ffn=64, vocab_size=20, max_len=16)
        toks, pad = shifted_pair(rng, shatter)
        hs = encode(toks, pad, shatter, init_params(shatter, 1)).last.data
        hb = encode(toks, pad, bert, init_params(bert, 1)).last.data
        assert np.max(np.abs(hs[0, :6] - hs[1, 5:11])) < 1e-5
        assert np.max(np.abs(hb[0, :6] - hb[1, 5:11])) > 1e-2

    def test_padded_rows_do_not_leak(self, rng):
        cfg = preset("shatter", **SMALL)
        p = init_params(cfg)
        toks = tokens(rng, b=1)
        pad = np.ones_like(toks, dtype=bool)
        pad[0, 5:] = False
        a = encode(toks, pad, cfg, p).last.data[0, :5]
        toks[0, 5:] = 11
        b = encode(toks, pad, cfg, p).last.data[0, :5]
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_dropout_only_with_rng(self, rng):
        cfg = preset("shatter", **SMALL, dropout=0.5)
        p = init_params(cfg)
        toks = tokens(rng)
        a = encode(toks, None, cfg, p).last.data
        b = encode(toks, None, cfg, p).last.data
        c = encode(toks, None, cfg, p, rng=np.random.default_rng(0)).last.data
        assert np.array_equal(a, b) and not np.allclose(a, c)


class TestHeads:
    def test_mlm_logits_rows(self, rng):
        cfg = preset("shatter", **SMALL)
        p = init_params(cfg)
        states = encode(tokens(rng), None, cfg, p)
        sel = np.zeros((2, 8), dtype=bool)
        sel[0, 3] = sel[1, 1] = sel[1, 7] = True
        assert mlm_logits(states.last, sel, p).shape == (3, 12)

    @pytest.mark.parametrize("strategy", ["cls", "pooled"])
    def test_classify(self, strategy, rng):
        cfg = preset("shatter", **SMALL)
        p, cfg = add_classifier(init_params(cfg), cfg, 3)
        out = classify(encode(tokens(rng), None, cfg, p), p, cfg, strategy)
        assert out.shape == (2, 3)

    def test_unknown_strategy(self, rng):
        cfg = preset("shatter", **SMALL)
        p, cfg = add_classifier(init_params(cfg), cfg, 3)
        with pytest.raises(ValueError):
            classify(encode(tokens(rng), None, cfg, p), p, cfg, "mean")


class TestGradients:
    @pytest.mark.parametrize("name", ["shatter", "bert", "rpe"])
    def test_full_encoder(self, name):
        assert encoder_grad_error(name) < 1e-4


class TestExtendAndCheckpoint:
    def test_extend_shatter_adds_nothing(self, rng):
        cfg = preset("shatter", **SMALL)
        p = init_params(cfg)
        p2, cfg2 = extend_max_length(p, cfg, 16)
        assert cfg2.max_len == 16 and p2.num_values() == p.num_values()
        assert encode(tokens(rng, l=16), None, cfg2, p2).last.shape == (2, 16, 16)

    def test_extend_bert_adds_rows_keeps_old(self):
        cfg = preset("bert", **SMALL)
        p = init_params(cfg)
        p2, _ = extend_max_length(p, cfg, 12, seed=3)
        assert p2.num_values() - p.num_values() == 4 * 16
        np.testing.assert_array_equal(p2["embed.pos"].data[:8], p["embed.pos"].data)

    def test_extend_rejects_shrink(self):
        cfg = preset("shatter", **SMALL)
        with pytest.raises(ValueError):
            extend_max_length(init_params(cfg), cfg, 4)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = preset("rab", **SMALL)
        p = init_params(cfg, 5)
        save_checkpoint(tmp_path / "c.bin", cfg, p, step=7, extra_manifest={"note": 1}, extra_blobs={"x": np.arange(3)})
        cfg2, p2, manifest, rest = load_checkpoint(tmp_path / "c.bin")
        assert cfg2 == cfg and manifest["step"] == 7 and manifest["note"] == 1
        np.testing.assert_array_equal(rest["x"], [0, 1, 2])
        for k in p:
            assert np.array_equal(p[k].data, p2[k].data)
