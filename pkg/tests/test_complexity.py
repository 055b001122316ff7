import csv
import io
import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from aia.attention import AttentionConfig
from aia.complexity import (BN, ArchSpec, Attention, Bottleneck, Consensus, Conv, GlobalAvgPool, Linear, ReLU,
                            SpecError, TemporalShift, analyze, attention_cost, count_flops, count_params,
                            emit_report, resnet50_spec, spec_from_dict, spec_to_dict)
from aia.variants import AIA_LABELS, GATE_AXES

DATA = Path(__file__).parent / "data"
N_BLOCKS = 16

PARAMS_M = {v: "23.87M" for v in AIA_LABELS}
FLOPS_G = {
    "c": (32.88,), "st": (33.01,), "c_st_seq": (33.01,), "st_c_seq": (33.01,), "c_st_par": (33.01,),
    "cinst": (33.01, 33.02), "stinc": (33.01, 33.02),
    "cinst_stinc_seq": (33.15,), "stinc_cinst_seq": (33.15,), "cinst_stinc_par": (33.15,),
}
PER_BLOCK = {"c": 56, "st": 168, "c_st_seq": 224, "st_c_seq": 224, "c_st_par": 224, "cinst": 224,
             "stinc": 224, "cinst_stinc_seq": 448, "stinc_cinst_seq": 448, "cinst_stinc_par": 448}


@pytest.fixture(scope="module")
def plain():
    return analyze(resnet50_spec("TSN"))


def report(variant, mode="TSN", **kw):
    return analyze(resnet50_spec(mode, attention=variant), **kw)


class TestTableReproduction:
    def test_plain_backbone(self, plain):
        assert plain.params_m == "23.86M"
        assert plain.flops_g == "32.88G"

    @pytest.mark.parametrize("variant", list(AIA_LABELS))
    def test_params_column(self, variant):
        assert report(variant).params_m == PARAMS_M[variant]

    @pytest.mark.parametrize("variant", list(AIA_LABELS))
    def test_tsn_flops_column(self, variant):
        g = report(variant).total_flops / 1e9
        assert min(abs(g - t) for t in FLOPS_G[variant]) <= 0.02

    @pytest.mark.parametrize("variant", [None, "st", "cinst_stinc_par"])
    def test_tsm_matches_tsn(self, variant):
        a, b = report(variant, "TSN"), report(variant, "TSM")
        assert (a.total_params, a.total_flops) == (b.total_params, b.total_flops)

    def test_imagenet_head(self):
        # 2048*1000 + 1000 head instead of 2048*174 + 174
        assert analyze(resnet50_spec(classes=1000)).total_params == 25_557_032

    def test_c_flop_delta(self, plain):
        delta = report("c").total_flops - plain.total_flops
        assert abs(delta / 1e9 - 0.006) < 0.002

    def test_st_delta(self, plain):
        assert report("st").total_params - plain.total_params == 2688

    def test_se3d_full_width_coarse_check(self):
        # only the full-width insertion lands within 5% of 26.38M
        p = analyze(resnet50_spec(attention=AttentionConfig("se3d", width="full"))).total_params
        assert abs(p / 26.38e6 - 1) < 0.05

    def test_s3d_g_reduced_width(self):
        assert report("s3d_g").params_m == "25.13M"

    def test_ge_free(self, plain):
        assert report("ge3d_g").total_params == plain.total_params


class TestClosedForms:
    @pytest.mark.parametrize("variant", list(AIA_LABELS))
    def test_per_block_params(self, plain, variant):
        assert PER_BLOCK[variant] == 56 * len(GATE_AXES[variant])
        assert report(variant).total_params - plain.total_params == PER_BLOCK[variant] * N_BLOCKS

    def test_attention_flops_by_hand(self):
        # ST on C=64,T=8,H=W=56: each gate conv slides over the three remaining axes
        shape = (64, 8, 56, 56)
        vol = 64 * 8 * 56 * 56
        macs = 54 * (vol // 8 + vol // 56 + vol // 56)
        assert attention_cost(AttentionConfig("st"), shape, False) == (168, macs)
        assert attention_cost(AttentionConfig("st"), shape, True)[1] == macs + 2 * (macs // 54)

    def test_bypass_drops_bn(self):
        assert attention_cost(AttentionConfig("c", bn_mode="bypass"), (4, 2, 3, 3), True) == (54, 54 * 18)

    def test_mac_convention_drops_bn(self, plain):
        mac = analyze(resnet50_spec(), convention="mac")
        assert mac.total_params == plain.total_params
        assert mac.total_flops < plain.total_flops
        bn_elems = sum(r.flops for r in plain.rows if ".bn" in r.layer or r.layer == "bn1") // 2
        assert plain.total_flops - mac.total_flops == 2 * bn_elems

    def test_unknown_convention(self):
        with pytest.raises(ValueError):
            analyze(resnet50_spec(), convention="flops2x")


def toy_spec(extra=()):
    return ArchSpec("toy", 2, (5, 5), 3, 2, (Conv("conv", 3, 4, (1, 3, 3), bias=True), ReLU("relu"), *extra,
                                               GlobalAvgPool("pool"), Linear("fc", 4, 2), Consensus("cons")))


class TestSmallSpecs:
    def test_hand_count(self):
        r = analyze(toy_spec(), convention="mac")
        # conv: 3*4*9 weights + 4 biases; fc: 4*2 + 2
        assert r.total_params == 108 + 4 + 8 + 2
        # conv over 2 frames of 5x5 outputs; fc once per frame
        assert r.total_flops == 108 * 2 * 25 + 8 * 2

    def test_bn_counts_under_default(self):
        r = analyze(toy_spec((BN("bn", 4),)))
        row = next(x for x in r.rows if x.layer == "bn")
        assert (row.params, row.flops) == (8, 2 * 4 * 2 * 25)

    def test_additivity(self):
        r = analyze(resnet50_spec(attention="cinst_stinc_par"))
        assert r.total_params == sum(x.params for x in r.rows)
        assert r.total_flops == sum(x.flops for x in r.rows)

    def test_count_helpers(self):
        spec = toy_spec()
        assert count_params(spec).total_params == analyze(spec).total_params
        assert count_flops(spec, "mac").total_flops == analyze(spec, "mac").total_flops

    def test_empty(self):
        r = analyze(ArchSpec("empty", 1, (1, 1), 1, 1, ()))
        assert (r.total_params, r.total_flops) == (0, 0)
        assert emit_report(r, "csv").splitlines()[-1] == "total,0,0"

    def test_block_shape_mismatch(self):
        with pytest.raises(SpecError):
            analyze(ArchSpec("bad", 1, (8, 8), 3, 2, (Conv("a", 3, 4), Conv("b", 5, 4))))

    def test_linear_needs_pooled(self):
        with pytest.raises(SpecError):
            analyze(ArchSpec("bad", 1, (8, 8), 3, 2, (Linear("fc", 3, 2),)))

    def test_collapse(self):
        with pytest.raises(SpecError):
            analyze(ArchSpec("bad", 1, (2, 2), 3, 2, (Conv("a", 3, 4, (1, 7, 7), 1, 0),)))

    def test_bottleneck_downsample(self):
        r = analyze(ArchSpec("b", 1, (8, 8), 16, 1, (Bottleneck("blk", 16, 8, stride=2),)))
        names = [x.layer for x in r.rows]
        assert "blk.downsample.conv" in names and names[-1] == "blk.relu_out"


LAYER_CHOICES = st.sampled_from(["relu", "bn", "conv", "shift", "c", "cinst_stinc_seq", "se3d"])


def _make(kind, i):
    if kind == "relu":
        return ReLU(f"r{i}")
    if kind == "bn":
        return BN(f"bn{i}", 16)
    if kind == "conv":
        return Conv(f"conv{i}", 16, 16, (1, 3, 3))
    if kind == "shift":
        return TemporalShift(f"s{i}")
    return Attention(f"a{i}", AttentionConfig(kind))


class TestMonotonicity:
    @given(st.lists(LAYER_CHOICES, max_size=5), LAYER_CHOICES, st.integers(0, 5))
    def test_inserting_a_layer_never_decreases(self, base, extra, pos):
        layers = [_make(k, i) for i, k in enumerate(base)]
        head = (Conv("stem", 3, 16),)
        tail = (GlobalAvgPool("p"), Linear("fc", 16, 4), Consensus("c"))
        before = analyze(ArchSpec("m", 2, (6, 6), 3, 4, head + tuple(layers) + tail))
        layers.insert(min(pos, len(layers)), _make(extra, 99))
        after = analyze(ArchSpec("m", 2, (6, 6), 3, 4, head + tuple(layers) + tail))
        assert after.total_params >= before.total_params
        assert after.total_flops >= before.total_flops


class TestReports:
    def test_golden_csv(self):
        text = emit_report(report("cinst_stinc_seq"), "csv")
        assert text == (DATA / "tsn_cinst_stinc_seq.csv").read_text()
        assert text.splitlines()[-1] == "total,23871726,33147491968"

    def test_csv_row_count(self):
        r = report("st")
        rows = list(csv.reader(io.StringIO(emit_report(r, "csv"))))
        assert rows[0] == ["layer", "params", "flops"]
        assert len(rows) - 1 == len(r.rows) + 1

    def test_json_mirrors_report(self):
        r = report("c")
        d = json.loads(emit_report(r, "json"))
        assert d["totals"]["params"] == r.total_params
        assert d["totals"]["flops_rounded"] == "32.88G"
        assert len(d["rows"]) == len(r.rows)

    def test_table_has_both_precisions(self):
        last = emit_report(report("st"), "table").splitlines()[-1]
        assert str(report("st").total_params) in last and "23.87M" in last and "33.01G" in last

    def test_deterministic(self):
        assert emit_report(report("c_st_par"), "json") == emit_report(report("c_st_par"), "json")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(report(None), "xml")


class TestSpecRoundTrip:
    @pytest.mark.parametrize("variant", [None, "stinc", "cbam3d_377"])
    def test_round_trip(self, variant):
        spec = resnet50_spec("TSM", attention=variant)
        again = spec_from_dict(json.loads(json.dumps(spec_to_dict(spec))))
        assert again == spec

    def test_unknown_layer_type(self):
        with pytest.raises(SpecError, match="unknown layer type"):
            spec_from_dict({"name": "x", "frames": 1, "crop": 4, "in_channels": 1, "classes": 1,
                            "layers": [{"type": "Dropout", "name": "d"}]})

    def test_unknown_field(self):
        with pytest.raises(SpecError, match="unknown fields"):
            spec_from_dict({"name": "x", "frames": 1, "crop": 4, "in_channels": 1, "classes": 1,
                            "layers": [{"type": "ReLU", "name": "r", "inplace": True}]})

    def test_missing_field(self):
        with pytest.raises(SpecError, match="frames"):
            spec_from_dict({"name": "x", "crop": 4, "in_channels": 1, "classes": 1})

    def test_attention_by_name(self):
        spec = spec_from_dict({"name": "x", "frames": 2, "crop": [4, 4], "in_channels": 2, "classes": 1,
                               "layers": [{"type": "Attention", "name": "a", "config": "C->ST"}]})
        assert spec.layers[0].config.variant == "c_st_seq"
