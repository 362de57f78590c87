import numpy as np
import pytest

from mobiletl.model import BlockSpec, ModelSpec


def block(kind="irb_v2", in_ch=8, out_ch=8, expansion=2.0, kernel=3, stride=1,
          activation=None, use_se=None, **kw):
    if activation is None:
        activation = "hswish" if kind == "irb_v3" else "relu6"
    if use_se is None:
        use_se = kind == "irb_v3"
    return BlockSpec(kind=kind, in_ch=in_ch, out_ch=out_ch,
                     expansion=expansion, kernel=kernel, stride=stride,
                     activation=activation, use_se=use_se, **kw)


def single_block_spec(b, batch=2, hw=7, num_classes=0):
    return ModelSpec(input_shape=(batch, b.in_ch, hw, hw), blocks=[b],
                     num_classes=num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
