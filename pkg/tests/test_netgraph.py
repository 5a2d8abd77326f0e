import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from actquant.fxcore import FxFormat
from actquant.netgraph import (
    DatasetError, FxTensor, LayerDef, ModelError, ModelGraph, QuantConfig,
    _conv2d, _fullyconnected, _maxpool, _rescale_to_master, evaluate, forward,
    forward_batch, load_dataset, load_model, save_model,
)
from actquant.quant import Codebook, LayerQuantSpec, requantize_codes

QM12 = FxFormat(12, 0)


def fx(codes, f_bits=0, q_bits=14):
    return FxTensor(codes=np.asarray(codes, dtype=np.int64), q_bits=q_bits,
                    f_bits=f_bits)


def rescale_oracle(acc: int, f_a: int, f_w: int, b: int | None, f_b: int) -> int:
    """Arbitrary-precision reference for the accumulator rescale."""
    d = max(f_a + f_w, f_b if b is not None else 0, f_a)
    n = acc * (1 << (d - f_a - f_w))
    if b is not None:
        n += b * (1 << (d - f_b))
    k = d - f_a
    if k == 0:
        return n
    q, r = divmod(n + (1 << (k - 1)), 1 << k)
    return q  # divmod floors for negative n too


# ---------------------------------------------------------------------------
# rescale

@given(acc=st.integers(-10**12, 10**12), f_a=st.integers(0, 8),
       f_w=st.integers(0, 14), b=st.integers(-8000, 8000), f_b=st.integers(0, 20))
def test_rescale_matches_big_int_oracle(acc, f_a, f_w, b, f_b):
    bias = fx([b], f_bits=f_b)
    got = _rescale_to_master(np.array([acc]), bias, f_a, f_w)
    assert int(got[0]) == rescale_oracle(acc, f_a, f_w, b, f_b)


def test_rescale_without_bias_is_round_half_up():
    got = _rescale_to_master(np.array([-3, -4, 3, 4, 5]), None, 0, 3)
    # codes carry scale 2^-3; -3/8 rounds to 0, -4/8 (tie) rounds up to 0
    assert got.tolist() == [0, 0, 0, 1, 1]


def test_rescale_bias_wider_than_product():
    # f_b=5 dominates d; acc must be raised before the single rounding shift
    bias = fx([3], f_bits=5)
    got = _rescale_to_master(np.array([7]), bias, 0, 1)
    assert int(got[0]) == rescale_oracle(7, 0, 1, 3, 5)== 4  # (7<<4 + 3 + 16) >> 5


# ---------------------------------------------------------------------------
# layer kernels vs nested-loop oracles

def conv_oracle(x, w, b, stride, pad, f_a, f_w, f_b):
    n, h, wd, c = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, oc), dtype=np.int64)
    for ni in range(n):
        for yo in range(ho):
            for xo in range(wo):
                for o in range(oc):
                    acc = 0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += int(xp[ni, yo * stride + i, xo * stride + j, ci]) * int(w[o, ci, i, j])
                    out[ni, yo, xo, o] = rescale_oracle(
                        acc, f_a, f_w, int(b[o]) if b is not None else None, f_b)
    return out


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_conv2d_matches_nested_loop_oracle(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    h = data.draw(st.integers(3, 7))
    wd = data.draw(st.integers(3, 7))
    c = data.draw(st.integers(1, 3))
    oc = data.draw(st.integers(1, 3))
    kh = data.draw(st.integers(1, min(3, h)))
    kw = data.draw(st.integers(1, min(3, wd)))
    stride = data.draw(st.integers(1, 2))
    pad = data.draw(st.integers(0, 1))
    f_a = data.draw(st.sampled_from([0, 2]))
    f_w = data.draw(st.integers(0, 6))
    f_b = data.draw(st.integers(0, 6))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        return
    x = rng.integers(0, 4096, size=(2, h, wd, c))
    w = rng.integers(-8192, 8192, size=(oc, c, kh, kw))
    b = rng.integers(-8192, 8192, size=oc)
    lay = LayerDef(name="c", kind="conv2d", output_dims=(ho, wo, oc),
                   kernel=(kh, kw), stride=stride, padding=pad,
                   in_channels=c, out_channels=oc,
                   weights=fx(w, f_bits=f_w), bias=fx(b, f_bits=f_b))
    got = _conv2d(x, lay, f_a)
    want = conv_oracle(x, w, b, stride, pad, f_a, f_w, f_b)
    assert np.array_equal(got, want)


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_fullyconnected_matches_oracle(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    fin = data.draw(st.integers(1, 20))
    fout = data.draw(st.integers(1, 5))
    f_w = data.draw(st.integers(0, 8))
    f_b = data.draw(st.integers(0, 8))
    x = rng.integers(0, 4096, size=(3, fin))
    w = rng.integers(-8192, 8192, size=(fout, fin))
    b = rng.integers(-8192, 8192, size=fout)
    lay = LayerDef(name="f", kind="fullyconnected", output_dims=(fout,),
                   in_features=fin, out_features=fout,
                   weights=fx(w, f_bits=f_w), bias=fx(b, f_bits=f_b))
    got = _fullyconnected(x, lay, 0)
    want = np.zeros((3, fout), dtype=np.int64)
    for ni in range(3):
        for o in range(fout):
            acc = sum(int(x[ni, i]) * int(w[o, i]) for i in range(fin))
            want[ni, o] = rescale_oracle(acc, 0, f_w, int(b[o]), f_b)
    assert np.array_equal(got, want)


def test_maxpool_matches_oracle():
    rng = np.random.default_rng(11)
    x = rng.integers(0, 4096, size=(2, 6, 6, 3))
    lay = LayerDef(name="p", kind="maxpool", output_dims=(3, 3, 3),
                   pool=(2, 2), stride=2)
    got = _maxpool(x, lay)
    for ni in range(2):
        for yo in range(3):
            for xo in range(3):
                for ci in range(3):
                    window = x[ni, 2 * yo:2 * yo + 2, 2 * xo:2 * xo + 2, ci]
                    assert got[ni, yo, xo, ci] == window.max()


# ---------------------------------------------------------------------------
# small end-to-end model

def affine_model():
    """1x1 conv computing exactly 2x + 1 on each input code, then ReLU."""
    w = fx(np.array([[[[4]]]]), f_bits=1)  # code 4 at f=1 is the value 2
    b = fx(np.array([2]), f_bits=1)  # value 1
    layers = (
        LayerDef(name="c1", kind="conv2d", output_dims=(2, 2, 1), kernel=(1, 1),
                 in_channels=1, out_channels=1, weights=w, bias=b),
        LayerDef(name="r1", kind="relu", output_dims=(2, 2, 1)),
    )
    return ModelGraph(layers=layers, input_dims=(2, 2, 1), name="affine")


def test_forward_exact_affine():
    model = affine_model()
    x = np.array([0, 1, 2, 100]).reshape(2, 2, 1)
    out = forward(model, x, QuantConfig(specs={}, qm=QM12))
    assert out.tolist() == [1.0, 3.0, 5.0, 201.0]


def test_forward_applies_quantizer_after_relu():
    model = affine_model()
    x = np.array([0, 1, 2, 100]).reshape(2, 2, 1)
    spec = LayerQuantSpec("enq", 4)
    out = forward(model, x, QuantConfig(specs={"c1": spec}, qm=QM12))
    plain = np.array([1, 3, 5, 201])
    want = requantize_codes(plain, spec, QM12)
    assert out.tolist() == want.astype(np.float64).tolist()


def test_tap_sees_pre_quantization_codes():
    model = affine_model()
    x = np.array([0, 1, 2, 100]).reshape(2, 2, 1)
    taps = {}
    forward(model, x, QuantConfig(specs={"c1": LayerQuantSpec("enq", 2)}, qm=QM12),
            tap=taps)
    assert taps["c1"].ravel().tolist() == [1, 3, 5, 201]


@given(e=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_maxpool_commutes_with_quantizers(e, seed):
    # the engine quantizes right after ReLU, before any pool; this is sound
    # because every scheme's code map is monotone
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5000, size=(1, 4, 4, 2))
    lay = LayerDef(name="p", kind="maxpool", output_dims=(2, 2, 2),
                   pool=(2, 2), stride=2)
    cb = Codebook(layer="x", bits=3,
                  entries=np.sort(rng.integers(0, 4096, size=8)), fmt=QM12)
    for spec in (LayerQuantSpec("enq", e), LayerQuantSpec("uniform", 12),
                 LayerQuantSpec("knq", 3, codebook=cb)):
        a = _maxpool(requantize_codes(x, spec, QM12), lay)
        b = requantize_codes(_maxpool(x, lay), spec, QM12)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# graph validation

def test_graph_rejects_dimension_mismatch():
    layers = (
        LayerDef(name="c1", kind="conv2d", output_dims=(3, 3, 1), kernel=(3, 3),
                 in_channels=1, out_channels=1),
    )
    with pytest.raises(ModelError):
        ModelGraph(layers=layers, input_dims=(4, 4, 1))


def test_graph_rejects_double_relu():
    w = fx(np.array([[[[1]]]]))
    conv = LayerDef(name="c1", kind="conv2d", output_dims=(2, 2, 1),
                    kernel=(1, 1), in_channels=1, out_channels=1, weights=w)
    relu = LayerDef(name="r1", kind="relu", output_dims=(2, 2, 1))
    relu2 = LayerDef(name="r2", kind="relu", output_dims=(2, 2, 1))
    with pytest.raises(ModelError):
        ModelGraph(layers=(conv, relu, relu2), input_dims=(2, 2, 1))
    # a leading relu has no weighted predecessor: identity on codes, allowed
    g = ModelGraph(layers=(relu, conv, relu2), input_dims=(2, 2, 1))
    assert g.quantizable_layers() == ["c1"]


def test_graph_rejects_softmax_before_end():
    layers = (
        LayerDef(name="s", kind="softmax", output_dims=(4,)),
        LayerDef(name="f", kind="fullyconnected", output_dims=(2,),
                 in_features=4, out_features=2),
    )
    with pytest.raises(ModelError):
        ModelGraph(layers=layers, input_dims=(1, 1, 4))


def test_graph_rejects_bad_fc_width():
    layers = (
        LayerDef(name="f", kind="fullyconnected", output_dims=(2,),
                 in_features=5, out_features=2),
    )
    with pytest.raises(ModelError):
        ModelGraph(layers=layers, input_dims=(1, 1, 4))


def test_quantizable_layers_need_following_relu(desk_model):
    assert desk_model.quantizable_layers() == ["conv1", "conv2", "conv3", "fc4"]
    assert desk_model.weighted_layers() == ["conv1", "conv2", "conv3", "fc4", "fc5"]
    assert desk_model.n_classes == 10


def test_config_validation(desk_model):
    QuantConfig(specs={"conv1": LayerQuantSpec("enq", 5)}, qm=QM12).validate(desk_model)
    with pytest.raises(ModelError):
        QuantConfig(specs={"fc5": LayerQuantSpec("enq", 5)}, qm=QM12).validate(desk_model)
    with pytest.raises(ModelError):
        QuantConfig(specs={"conv1": LayerQuantSpec("enq", 13)}, qm=QM12).validate(desk_model)
    with pytest.raises(ModelError):
        QuantConfig(specs={"conv1": LayerQuantSpec("uniform", 3)},
                    qm=FxFormat(12, 4)).validate(desk_model)


def test_forward_rejects_bad_inputs():
    model = affine_model()
    cfg = QuantConfig(specs={}, qm=QM12)
    with pytest.raises(ModelError):
        forward_batch(model, np.zeros((1, 3, 3, 1), dtype=np.int64), cfg)
    with pytest.raises(ModelError):
        forward_batch(model, np.full((1, 2, 2, 1), -1, dtype=np.int64), cfg)


def test_accumulator_guard_trips():
    w = FxTensor(codes=np.full((1, 4096), 8191, dtype=np.int64), q_bits=14, f_bits=0)
    b = FxTensor(codes=np.array([8191]), q_bits=14, f_bits=32)
    layers = (
        LayerDef(name="f", kind="fullyconnected", output_dims=(1,),
                 in_features=4096, out_features=1, weights=w, bias=b),
    )
    model = ModelGraph(layers=layers, input_dims=(1, 1, 4096), name="huge")
    x = np.full((1, 1, 1, 4096), 4095, dtype=np.int64)
    with pytest.raises(ModelError):
        forward_batch(model, x, QuantConfig(specs={}, qm=QM12))


# ---------------------------------------------------------------------------
# file formats

def test_model_round_trip(tmp_path, desk_model, eval_set):
    path = tmp_path / "copy.json"
    save_model(path, desk_model)
    back = load_model(path)
    assert back.name == desk_model.name
    assert back.input_dims == desk_model.input_dims
    assert [l.name for l in back.layers] == [l.name for l in desk_model.layers]
    for a, b in zip(back.layers, desk_model.layers):
        if a.weights is not None:
            assert np.array_equal(a.weights.codes, b.weights.codes)
            assert a.weights.f_bits == b.weights.f_bits
            assert np.array_equal(a.bias.codes, b.bias.codes)
    cfg = QuantConfig(specs={}, qm=QM12)
    small = eval_set.subset(4)
    assert np.array_equal(forward_batch(back, small.samples, cfg),
                          forward_batch(desk_model, small.samples, cfg))


def test_shape_only_model_loads_but_cannot_run():
    from pathlib import Path
    ref = Path(__file__).resolve().parent.parent / "paper_fixtures"
    model = load_model(ref / "vgg16_shapes.json")
    assert not model.has_weights
    assert len(model.quantizable_layers()) == 15
    x = np.zeros((1, *model.input_dims), dtype=np.int64)
    with pytest.raises(ModelError):
        forward_batch(model, x, QuantConfig(specs={}, qm=QM12))


def test_load_model_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text('{"schema": 9}')
    with pytest.raises(ModelError):
        load_model(wrong)


def test_load_model_rejects_truncated_blob(tmp_path, desk_model):
    path = tmp_path / "m.json"
    save_model(path, desk_model)
    blob = path.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(ModelError):
        load_model(path)


def test_dataset_loading(calib_set):
    assert calib_set.size == 120
    assert calib_set.fmt == QM12
    assert calib_set.samples.shape == (120, 32, 32, 1)
    assert calib_set.labels.min() >= 0 and calib_set.labels.max() <= 9
    sub = calib_set.subset(5)
    assert sub.size == 5
    assert sub.names == calib_set.names[:5]


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, (2, 2, 1))
    (tmp_path / "labels.csv").write_text("a.bin,0\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, (2, 2, 1))  # no format.json
    (tmp_path / "format.json").write_text('{"q_bits": 12, "f_bits": 0}')
    (tmp_path / "a.bin").write_bytes(b"\x00" * 6)  # needs 8 bytes
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, (2, 2, 1))
    (tmp_path / "a.bin").write_bytes(b"\x00" * 8)
    ds = load_dataset(tmp_path, (2, 2, 1))
    assert ds.size == 1
    (tmp_path / "labels.csv").write_text("a.bin,-1\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, (2, 2, 1))


def test_evaluate_basics(desk_model, eval_set):
    cfg = QuantConfig(specs={}, qm=QM12)
    small = eval_set.subset(40)
    top1 = evaluate(desk_model, small, cfg)
    top3 = evaluate(desk_model, small, cfg, k=3)
    assert 0.0 <= top1 <= top3 <= 1.0
    with pytest.raises(ValueError):
        evaluate(desk_model, small, cfg, k=0)
    with pytest.raises(DatasetError):
        evaluate(desk_model, eval_set.subset(0), cfg)


def test_evaluate_rejects_out_of_range_labels(desk_model, eval_set):
    from dataclasses import replace
    bad = replace(eval_set.subset(3),
                  labels=np.array([0, 1, 10], dtype=np.int64))
    with pytest.raises(DatasetError):
        evaluate(desk_model, bad, QuantConfig(specs={}, qm=QM12))
