from dataclasses import replace
from itertools import groupby

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermens.errors import ContractError
from dermens.imaging import MaskImage
from dermens.nettopo import (
    REPORTED_PARAMS,
    TABLE2,
    UNetConfig,
    conv_params,
    dense_params,
    early_stop_check,
    fuse_masks,
    infer_shapes,
    layer_table,
    param_count,
    schedule,
)


def test_row1_resolutions():
    shapes = infer_shapes(TABLE2[0])
    pools = [l.height for l in shapes if l.name.startswith("pool")]
    assert pools == [64, 32, 16]
    convs = [l.height for l in shapes if l.name.startswith("conv")]
    assert convs == [128] * 3 + [64] * 3 + [32] * 3
    assert shapes[-1].name == "output" and (shapes[-1].height, shapes[-1].out_channels) == (128, 1)


def test_decoder_mirrors_encoder():
    shapes = infer_shapes(TABLE2[0])
    enc = [(l.height, l.out_channels) for l in shapes if l.name.startswith("conv")]
    dec = [(l.height, l.out_channels) for l in shapes if l.name.startswith("deconv")]
    assert dec == enc[::-1]
    runs = [h for h, _ in groupby(l.height for l in shapes if l.name != "fc")]
    assert runs == [128, 64, 32, 16, 32, 64, 128]


def test_input_64_bottleneck():
    shapes = infer_shapes(UNetConfig(input_size=64))
    assert next(l for l in shapes if l.name == "fc_expand").height == 8


def test_non_divisible_input():
    with pytest.raises(ContractError):
        UNetConfig(input_size=100)
    with pytest.raises(ContractError):
        UNetConfig(dropout_a=1.0)
    with pytest.raises(ContractError):
        UNetConfig.from_dict({"depth": 4})


def test_unit_param_counts():
    assert conv_params(5, 6, 32) == 4_832
    assert dense_params(16 * 16 * 128, 8192) == 268_443_648
    first = infer_shapes(TABLE2[0])[1]
    assert (first.name, first.params) == ("conv1_1", 4_832)


def test_decoder_first_kernel_widened():
    shapes = {l.name: l for l in infer_shapes(TABLE2[0])}
    assert shapes["deconv3_1"].kernel == 11 and shapes["deconv3_2"].kernel == 5
    # 128 upsampled + 128 skip channels into 128 outputs with an 11x11 kernel
    assert shapes["deconv3_1"].params == conv_params(11, 256, 128)


def test_doubling_filters_quadruples_inner_convs():
    a = {l.name: l.params for l in infer_shapes(TABLE2[0])}
    b = {l.name: l.params for l in infer_shapes(replace(TABLE2[0], n_filters_stage1=64))}
    for name in a:
        if name.startswith(("conv", "deconv")) and name != "conv1_1":
            assert 3.9 < b[name] / a[name] < 4.01, name


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 4096))
def test_param_count_monotone(n, fc):
    c = UNetConfig(n_filters_stage1=n, fc_dim=fc)
    assert param_count(replace(c, fc_dim=fc + 1)) > param_count(c)
    assert param_count(replace(c, n_filters_stage1=n + 1)) > param_count(c)


def test_total_reported_with_discrepancy():
    total = param_count(TABLE2[0])
    assert total == 545_148_705
    assert total - REPORTED_PARAMS == 1_260_315
    assert layer_table(TABLE2[0]).splitlines()[-1].endswith("545,148,705")


def test_table2_rows():
    assert len(TABLE2) == 10
    assert TABLE2[0] == UNetConfig()
    assert TABLE2[9].input_size == 64


def test_schedule_endpoints_and_midpoint():
    c = TABLE2[0]
    assert schedule(1, c) == (0.01, 0.95)
    assert schedule(c.max_epochs, c) == pytest.approx((0.001, 0.99), abs=1e-15)
    mid = replace(c, max_epochs=2001)
    assert schedule(1001, mid) == pytest.approx((0.0055, 0.97), abs=1e-15)
    with pytest.raises(ContractError):
        schedule(0, c)
    with pytest.raises(ContractError):
        schedule(c.max_epochs + 1, c)


def test_schedule_monotone():
    c = replace(TABLE2[0], max_epochs=50)
    vals = [schedule(e, c) for e in range(1, 51)]
    assert all(b[0] <= a[0] and b[1] >= a[1] for a, b in zip(vals, vals[1:]))


def masks(*vals, shape=(3, 3)):
    return [MaskImage(np.full(shape, v, np.uint8)) for v in vals]


def test_fuse_examples():
    m = MaskImage(np.array([[0, 255], [255, 0]], np.uint8))
    assert np.array_equal(fuse_masks([m] * 10).values, m.values)
    assert not fuse_masks(masks(*([255] * 5 + [0] * 5))).values.any()
    assert np.all(fuse_masks(masks(128)).values == 255)
    assert not fuse_masks(masks(127)).values.any()


def test_fuse_contract():
    with pytest.raises(ContractError):
        fuse_masks([])
    with pytest.raises(ContractError):
        fuse_masks(masks(0) + masks(0, shape=(2, 2)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=10), st.randoms())
def test_fuse_binary_and_permutation_invariant(vals, rnd):
    ms = masks(*vals)
    out = fuse_masks(ms).values
    rnd.shuffle(ms)
    assert np.array_equal(out, fuse_masks(ms).values)
    assert set(np.unique(out)) <= {0, 255}
    assert (out[0, 0] == 255) == (np.mean(vals) >= 128)


def test_early_stop_examples():
    assert early_stop_check(np.arange(200, 0, -1)) == (False, 199)
    assert early_stop_check([1.0] * 101) == (True, 0)
    h = [5, 4, 3, 2, 1, 0] + [1] * 100
    assert early_stop_check(h) == (True, 5)
    assert early_stop_check(h[:-1]) == (False, 5)
    with pytest.raises(ContractError):
        early_stop_check([])
