import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobiletl.model import (
    BlockSpec, FormatError, ModelSpec, SpecError, block_param_count,
    build_model, bundled_spec_path, load_checkpoint, load_spec, param_count,
    save_checkpoint, output_spatial,
)
from mobiletl.tensor import Tape
from conftest import block, single_block_spec


def test_channel_chain_is_validated():
    with pytest.raises(SpecError):
        ModelSpec(input_shape=(1, 3, 8, 8),
                  blocks=[block(in_ch=4, out_ch=4)], num_classes=2)


def test_head_not_allowed_in_blocks():
    with pytest.raises(SpecError):
        ModelSpec(input_shape=(1, 3, 8, 8),
                  blocks=[BlockSpec(kind="head")], num_classes=2)


def test_block_spec_validation():
    with pytest.raises(SpecError):
        block(expansion=0.0)
    with pytest.raises(SpecError):
        block(stride=3)
    with pytest.raises(SpecError):
        block(kernel=2)


def test_residual_auto_rule():
    assert block(stride=1, in_ch=8, out_ch=8).residual
    assert not block(stride=2, in_ch=8, out_ch=8).residual
    assert not block(stride=1, in_ch=8, out_ch=16).residual
    assert not block(kind="conv", stride=1, in_ch=8, out_ch=8).residual


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["conv", "irb_v2", "irb_v3"]),
       st.sampled_from([4, 8, 16]), st.sampled_from([4, 8, 16]),
       st.sampled_from([1.0, 2.0, 4.0, 6.0]),
       st.sampled_from([1, 3, 5]), st.integers(1, 2))
def test_closed_form_param_count_matches_arrays(kind, cin, cout, exp, k, s):
    b = block(kind=kind, in_ch=cin, out_ch=cout, expansion=exp, kernel=k,
              stride=s)
    spec = single_block_spec(b, hw=9)
    model = build_model(spec, seed=1)
    actual = sum(int(np.prod(p.shape))
                 for layer in model.all_layers()
                 for p in layer.params().values())
    assert block_param_count(b) == actual
    assert param_count(model) == actual


def test_table_values_param_counts():
    at = dict(in_ch=96, out_ch=96, expansion=1.0, kernel=5, stride=1)
    assert block_param_count(block(kind="conv", **at)) == 230592
    assert block_param_count(block(kind="irb_v2", **at)) == 21408
    assert block_param_count(block(kind="irb_v3", **at)) == 26136


def test_forward_shapes_and_residual(rng):
    b = block(kind="irb_v3", in_ch=8, out_ch=8, stride=1)
    model = build_model(single_block_spec(b, batch=2, hw=7), seed=0)
    y = model.forward(rng.normal(size=(2, 8, 7, 7)).astype(np.float32))
    assert y.shape == (2, 8, 7, 7)


def test_forward_downsamples_with_stride(rng):
    b = block(kind="irb_v2", in_ch=4, out_ch=6, stride=2)
    model = build_model(single_block_spec(b, batch=1, hw=8), seed=0)
    y = model.forward(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
    assert y.shape == (1, 6, 4, 4)


def test_output_spatial_tracks_strides():
    spec = ModelSpec(input_shape=(1, 3, 16, 16),
                     blocks=[block(kind="conv", in_ch=3, out_ch=8, stride=2),
                             block(in_ch=8, out_ch=8, stride=2)],
                     num_classes=2)
    assert output_spatial(spec) == [(16, 16), (8, 8), (4, 4)]


def test_residual_contributes_to_output(rng):
    b = block(kind="irb_v2", in_ch=6, out_ch=6, stride=1)
    spec = single_block_spec(b, batch=1, hw=5)
    model = build_model(spec, seed=3)
    x = rng.normal(size=(1, 6, 5, 5)).astype(np.float32)
    y_res = model.forward(x).data
    spec2 = single_block_spec(
        block(kind="irb_v2", in_ch=6, out_ch=6, stride=1, use_residual=False),
        batch=1, hw=5)
    model2 = build_model(spec2, seed=3)
    y_plain = model2.forward(x).data
    np.testing.assert_allclose(y_res, y_plain + x, rtol=1e-4, atol=1e-5)


def test_build_is_deterministic_per_seed(rng):
    spec = single_block_spec(block(), num_classes=3, hw=7)
    x = rng.normal(size=(2, 8, 7, 7)).astype(np.float32)
    np.testing.assert_array_equal(build_model(spec, 5).forward(x).data,
                                  build_model(spec, 5).forward(x).data)
    assert not np.array_equal(build_model(spec, 5).forward(x).data,
                              build_model(spec, 6).forward(x).data)


def test_checkpoint_round_trip(tmp_path, rng):
    spec = single_block_spec(block(kind="irb_v3"), num_classes=4, hw=7)
    model = build_model(spec, seed=2)
    path = os.path.join(tmp_path, "m.ckpt")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    x = rng.normal(size=(2, 8, 7, 7)).astype(np.float32)
    np.testing.assert_array_equal(model.forward(x).data,
                                  loaded.forward(x).data)
    a, b = model.params(), loaded.params()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    spec = single_block_spec(block(), num_classes=2)
    model = build_model(spec, seed=0)
    path = os.path.join(tmp_path, "t.ckpt")
    save_checkpoint(model, path)
    data = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(data[:len(data) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_bundled_spec_loads_and_runs():
    spec = load_spec(bundled_spec_path("mobilenet_v3_small"))
    assert spec.num_classes == 1000
    assert tuple(spec.input_shape) == (8, 3, 224, 224)
    model = build_model(spec, seed=0)
    y = model.forward(np.zeros((1, 3, 32, 32), dtype=np.float32))
    assert y.shape == (1, 1000)


def test_forward_with_tape_backward_produces_grads(rng):
    from mobiletl.layers import softmax_cross_entropy
    spec = single_block_spec(block(kind="irb_v3"), num_classes=3, hw=7)
    model = build_model(spec, seed=0)
    tape = Tape()
    out = model.forward(rng.normal(size=(2, 8, 7, 7)).astype(np.float32),
                        tape, training=True)
    loss = softmax_cross_entropy(out, np.array([0, 1]), tape)
    grads = tape.backward(loss)
    names = set(model.trainable_params())
    assert names and names == set(grads)
