import json

import pytest

from chunkasr.config import (ConfigError, ContextConfig, ModelConfig,
                             context_from_string, derive_l_conv, derive_r_rel,
                             load_config, required_lookahead, validate)


def test_r_rel_eleven_future_frames():
    assert derive_r_rel(ContextConfig(l_att=6, c=3, r=2), 4) == 11


def test_r_rel_single_layer_needs_only_r():
    assert derive_r_rel(ContextConfig(l_att=6, c=3, r=2), 1) == 2


def test_r_rel_large_config():
    # 128 + 128 * 16
    assert derive_r_rel(ContextConfig(l_att=128, c=64, r=128), 17) == 2176


def test_r_rel_matches_recurrence():
    import numpy as np
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(1, 200))
        r = int(rng.integers(0, 200))
        n = int(rng.integers(1, 40))
        acc = r
        for _ in range(n - 1):
            acc += max(c, r)
        assert derive_r_rel(ContextConfig(l_att=0, c=c, r=r), n) == acc


def test_r_rel_monotone_and_differences():
    base = ContextConfig(l_att=4, c=5, r=3)
    for n in range(2, 10):
        cur = derive_r_rel(base, n)
        prev = derive_r_rel(base, n - 1)
        assert cur - prev == max(base.c, base.r)
        assert derive_r_rel(ContextConfig(l_att=4, c=6, r=3), n) >= cur
        assert derive_r_rel(ContextConfig(l_att=4, c=5, r=4), n) >= cur


def test_r_rel_rejects_zero_layers():
    with pytest.raises(ConfigError):
        derive_r_rel(ContextConfig(), 0)


@pytest.mark.parametrize("kernel,expect", [(15, 7), (1, 0), (31, 15)])
def test_l_conv(kernel, expect):
    assert derive_l_conv(kernel) == expect


def test_l_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        derive_l_conv(14)


def test_required_lookahead_matches_r_rel_in_clean_regimes():
    # l_conv = 0 and (c >= r or r multiple of c)
    for c, r, n in [(3, 2, 4), (4, 2, 2), (2, 4, 3), (64, 128, 17), (5, 5, 6)]:
        ctx = ContextConfig(l_att=0, c=c, r=r)
        assert required_lookahead(ctx, n, 0) == derive_r_rel(ctx, n)


def test_required_lookahead_covers_conv_margin():
    ctx = ContextConfig(l_att=8, c=4, r=4)
    assert required_lookahead(ctx, 1, 0) == 4
    # one layer with kernel 15 needs the conv s support past the chunk end
    assert required_lookahead(ctx, 1, 7) == 4 + 4 * 2
    assert required_lookahead(ctx, 0, 7) == 0


def test_required_lookahead_shrink_consistency():
    # applying the per-layer shrink n times leaves at least r valid frames
    for c, r, n, l_conv in [(3, 2, 4, 0), (2, 5, 3, 0), (4, 4, 5, 7), (6, 2, 3, 1)]:
        ctx = ContextConfig(l_att=0, c=c, r=r)
        v = required_lookahead(ctx, n, l_conv)
        for _ in range(n - 1):
            v = c * ((v - r) // c) - l_conv
        assert v >= r


def test_validate_ok():
    model = ModelConfig(n_layers=4, d_model=64, n_heads=4, kernel_size=15)
    assert validate(model, ContextConfig(l_att=8, c=4, r=4)) == []


def test_validate_divisibility():
    problems = validate(ModelConfig(d_model=66, n_heads=4), ContextConfig())
    assert any("divisible" in p for p in problems)


def test_validate_l_max_range():
    problems = validate(ModelConfig(l_max=8), ContextConfig(l_att=8, c=4, r=4))
    assert any("l_max" in p for p in problems)


def test_validate_reports_every_violation():
    problems = validate(
        ModelConfig(d_model=65, n_heads=4, kernel_size=4, subsample_factor=2,
                    l_max=1),
        ContextConfig(l_att=-1, c=0, r=-2))
    assert len(problems) >= 6


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_layers": 2, "d_model": 16, "n_heads": 2,
                                "l_att": 6, "c": 3, "r": 2}))
    model, ctx = load_config(path)
    assert model.n_layers == 2 and model.d_model == 16
    assert (ctx.l_att, ctx.c, ctx.r) == (6, 3, 2)


def test_load_config_unknown_key(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_layer": 2}))
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(path)


def test_load_config_type_check(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"c": "four"}))
    with pytest.raises(ConfigError, match="integer"):
        load_config(path)


def test_context_from_string():
    assert context_from_string("128,64,128") == ContextConfig(128, 64, 128)
    with pytest.raises(ConfigError):
        context_from_string("1,2")
    with pytest.raises(ConfigError):
        context_from_string("a,b,c")
