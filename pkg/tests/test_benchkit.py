import pytest
from hypothesis import given
from hypothesis import strategies as st

from shatterlab import benchkit
from shatterlab.config import MODEL_PRESETS, base_config, preset
from shatterlab.encoder import extend_max_length, init_params


class TestParams:
    @pytest.mark.parametrize(
        "name,count,human",
        [("bert", 84_934_656, "84.9M"), ("shatter", 77_967_360, "78.0M"), ("rpe", 87_284_736, "87.3M")],
    )
    def test_base_counts(self, name, count, human):
        total = benchkit.count_params(base_config(name))
        assert total == count and benchkit.millions(total) == human

    def test_xlnet_style(self):
        total = benchkit.count_params_xlnet(base_config("bert"))
        assert total == 92_012_544 and benchkit.millions(total) == "92.0M"

    def test_position_free_multihead_same_as_bert(self):
        assert benchkit.count_params(base_config("no_position")) == benchkit.count_params(base_config("bert"))

    def test_large_flagged(self):
        rep = benchkit.cost_report(base_config("bert", large=True), length=8)
        assert rep["totals"]["params"] == 24 * 12 * 1024**2
        assert rep["discrepancy"]["published_total"] == 151_000_000

    @given(
        st.sampled_from(sorted(MODEL_PRESETS)),
        st.integers(0, 3),
        st.sampled_from([(8, 2), (8, 4), (12, 2), (16, 4)]),
        st.integers(1, 40),
    )
    def test_formula_matches_allocated_walk(self, name, layers, dn, ffn):
        d, n = dn
        cfg = preset(name, num_layers=layers, hidden=d, parts=n, ffn=ffn, vocab_size=10, rpe_clip=3)
        assert benchkit.count_params(cfg) == benchkit.count_allocated(init_params(cfg))

    @given(st.integers(1, 6), st.sampled_from([(8, 2), (16, 4), (24, 6), (64, 8)]), st.integers(1, 64))
    def test_shatter_delta(self, layers, dn, ffn):
        d, n = dn
        kw = dict(num_layers=layers, hidden=d, parts=n, ffn=ffn)
        delta = benchkit.count_params(preset("shatter", **kw)) - benchkit.count_params(preset("bert", **kw))
        assert delta == -layers * d * d + layers * n * d

    def test_totals_equal_sum_of_parts(self):
        cfg = base_config("shatter")
        assert sum(benchkit.per_layer_params(cfg).values()) * cfg.num_layers == benchkit.count_params(cfg)

    def test_extend_keeps_count(self):
        cfg = preset("shatter", max_len=256)
        _, cfg2 = extend_max_length(init_params(cfg), cfg, 512)
        assert benchkit.count_params(cfg2) == benchkit.count_params(cfg)


class TestFlops:
    @pytest.mark.parametrize("l", [1, 128, 512])
    def test_shatter_vs_bert_accounting(self, l):
        s, b = base_config("shatter"), base_config("bert")
        ts, tb = benchkit.attention_flop_terms(s, l), benchkit.attention_flop_terms(b, l)
        d, n = 768, 12
        assert "key_projection" not in ts and tb["key_projection"] == 2 * l * d * d
        extra = ts["partition_bias"] + ts["partition_value"] + ts["mask_multiply"]
        assert extra <= 10 * (n * l * l + n * l * d) + 2 * n * d * d
        rep = benchkit.flop_report(s, l, reference=b)
        assert rep["delta_vs_reference"]["key_projection"] == -2 * l * d * d

    @pytest.mark.parametrize("l", [128, 512])
    def test_shatter_cheaper(self, l):
        assert benchkit.count_attention_flops(base_config("shatter"), l) < benchkit.count_attention_flops(
            base_config("bert"), l
        )

    def test_single_token_dominated_by_projections(self):
        t = benchkit.attention_flop_terms(base_config("bert"), 1)
        proj = sum(v for k, v in t.items() if k.endswith("projection"))
        assert proj > 0.99 * sum(t.values())

    @pytest.mark.parametrize("name", sorted(MODEL_PRESETS))
    def test_monotone_in_length(self, name):
        cfg = preset(name)
        vals = [benchkit.count_attention_flops(cfg, l) for l in (1, 2, 8, 32, 64)]
        assert vals == sorted(vals) and len(set(vals)) == len(vals)


class TestMemory:
    @pytest.mark.parametrize("name", ["bert", "shatter", "part_mask", "rpe", "rab"])
    def test_half_length_under_half(self, name):
        cfg = base_config(name)
        assert benchkit.estimate_activation_memory(cfg, 1, 256) / benchkit.estimate_activation_memory(cfg, 1, 512) < 0.5

    def test_batch_linear_without_masks(self):
        cfg = base_config("bert")
        m1, m4 = (benchkit.estimate_activation_memory(cfg, b, 128) for b in (1, 4))
        assert m4 == 4 * m1

    def test_monotone(self):
        cfg = base_config("shatter")
        assert benchkit.estimate_activation_memory(cfg, 2, 64) < benchkit.estimate_activation_memory(cfg, 2, 65)
        assert benchkit.estimate_activation_memory(cfg, 2, 64) < benchkit.estimate_activation_memory(
            base_config("shatter", parts=16), 2, 64
        )


class TestTiming:
    def test_zero_steps_empty(self):
        assert benchkit.time_steps(preset("shatter"), 2, 8, 0)["median_ms"] is None

    def test_reports_stats(self):
        stats = benchkit.time_steps(preset("shatter"), 2, 8, 3)
        assert stats["steps"] == 3 and stats["min_ms"] <= stats["median_ms"] <= stats["max_ms"]


def test_report_keys():
    rep = benchkit.cost_report(preset("shatter"), batch=2, length=16)
    assert {"convention", "per_layer", "totals", "flops", "memory_bytes", "ms_per_step"} <= set(rep)
    assert rep["ms_per_step"] is None
