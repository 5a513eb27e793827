import numpy as np
import pytest

from cephmark.codec import decode_dark, flip_average, GaussianSpec, HeatmapStack
from cephmark.gradcheck import numerical_grad, rel_error
from cephmark.model import (
    BackboneConfig,
    Fuse,
    HeadConfig,
    KeypointHead,
    ModelConfig,
    ParamFileError,
    SRPoseModel,
)
from cephmark.tensor import SeededRng, ShapeError, flip_horizontal


def tiny_config(**head):
    head.setdefault("num_keypoints", 2)
    return ModelConfig(BackboneConfig(input_size=(32, 32), stage_channels=(4, 6, 8, 8), stem_channels=4),
                       HeadConfig(**head), neck_width=6)


def test_backbone_strides():
    model = SRPoseModel(ModelConfig(), seed=0)
    feats = model.backbone.forward(np.random.default_rng(0).random((1, 1, 128, 128)))
    assert [f.shape[2:] for f in feats] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert [f.shape[1] for f in feats] == [16, 32, 64, 128]
    assert all(np.isfinite(f).all() for f in feats)


def test_backbone_rejects_indivisible_input():
    model = SRPoseModel(tiny_config(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 48, 32)))
    with pytest.raises(ValueError):
        BackboneConfig(input_size=(100, 128))


def test_deterministic_forward():
    x = np.random.default_rng(1).random((2, 1, 32, 32))
    a = SRPoseModel(tiny_config(), seed=5).forward(x)
    b = SRPoseModel(tiny_config(), seed=5).forward(x)
    for s in a:
        assert a[s].tobytes() == b[s].tobytes()


def test_fuse_shape_and_zero_weights():
    rng = SeededRng(0)
    fuse = Fuse(16, 40, 32, rng)
    f = np.random.default_rng(0).normal(size=(1, 16, 32, 32))
    m = np.random.default_rng(1).normal(size=(1, 40, 16, 16))
    assert fuse.forward(f, m).shape == (1, 32, 32, 32)
    for _, v, _ in fuse.parameters():
        v[...] = 0.0
    assert not fuse.forward(f, m).any()
    with pytest.raises(ShapeError):
        fuse.forward(f, m[:, :, :8, :8])


def test_fuse_gradient_reaches_both_inputs():
    rs = np.random.default_rng(2)
    fuse = Fuse(3, 4, 5, SeededRng(3))
    f = rs.normal(size=(2, 3, 8, 8))
    m = rs.normal(size=(2, 4, 4, 4))
    r = rs.normal(size=(2, 5, 8, 8))

    def loss():
        return float((fuse.forward(f, m) * r).sum())

    fuse.forward(f, m)
    gf, gm = fuse.backward(r)
    assert rel_error(gf, numerical_grad(loss, f)) < 1e-4
    assert rel_error(gm, numerical_grad(loss, m)) < 1e-4


def test_head_shape_and_keypoint_isolation():
    rs = np.random.default_rng(0)
    head = KeypointHead(32, 4, 4, 9, SeededRng(1))
    for layer in head.layers:
        if hasattr(layer, "p"):
            layer.p.weight[...] = rs.normal(size=layer.p.weight.shape)  # non-degenerate LKC
    m = rs.normal(size=(1, 32, 32, 32))
    out = head.forward(m)
    assert out.shape == (1, 4, 128, 128)
    lkc = head.layers[2].p
    lkc.weight[:16] += rs.normal(size=lkc.weight[:16].shape)  # keypoint 0's s*s kernels
    out2 = head.forward(m)
    assert not np.allclose(out2[0, 0], out[0, 0])
    np.testing.assert_array_equal(out2[0, 1:], out[0, 1:])


def test_head_gradcheck():
    rs = np.random.default_rng(4)
    head = KeypointHead(3, 2, 2, 5, SeededRng(2))
    head.layers[2].p.weight[...] = rs.normal(size=head.layers[2].p.weight.shape)
    m = rs.normal(size=(2, 3, 6, 6))
    r = rs.normal(size=head.forward(m).shape)

    def loss():
        return float((head.forward(m) * r).sum())

    head.forward(m)
    gm = head.backward(r)
    assert rel_error(gm, numerical_grad(loss, m)) < 1e-4
    for path, v, g in head.parameters():
        assert rel_error(g, numerical_grad(loss, v)) < 1e-4, path


def test_mirror_symmetric_head_flip_test_is_consistent():
    """A head whose weights respect the mirror (pixel-shuffle aware) on a
    mirror-symmetric feature map: flip-averaged decode equals direct decode."""
    rs = np.random.default_rng(5)
    s, n_kp = 4, 2
    head = KeypointHead(3, n_kp, s, 9, SeededRng(0))
    lkc = head.layers[2].p
    w = rs.normal(size=lkc.weight.shape).reshape(n_kp, s, s, 1, 9, 9)
    b = rs.normal(size=(n_kp, s, s))
    for dx in range(s // 2):
        w[:, :, s - 1 - dx] = w[:, :, dx, :, :, ::-1]
        b[:, :, s - 1 - dx] = b[:, :, dx]
    lkc.weight[...] = w.reshape(lkc.weight.shape)
    lkc.bias[...] = b.reshape(-1)
    half = rs.normal(size=(1, 3, 12, 6))
    feat = np.concatenate([half, half[..., ::-1]], axis=3)
    direct = head.forward(feat)
    mirrored = head.forward(flip_horizontal(feat))
    np.testing.assert_allclose(direct, flip_horizontal(direct), atol=1e-12)
    avg = flip_average(direct, mirrored)
    a = decode_dark(HeatmapStack(direct, 1.0), GaussianSpec())
    b = decode_dark(HeatmapStack(avg, 1.0), GaussianSpec())
    np.testing.assert_allclose(a.points, b.points, atol=1e-9)


@pytest.mark.parametrize("scales", [(2,), (2, 3), (3, 4), (2, 3, 4, 5), (5,)])
def test_output_resolution_per_scale(scales):
    cfg = tiny_config(supervised_scales=scales)
    out = SRPoseModel(cfg, 0).forward(np.zeros((1, 1, 32, 32)))
    assert sorted(out) == sorted(scales)
    for s, hm in out.items():
        assert hm.shape == (1, 2, 32, 32)
        assert cfg.heatmap_size(s) == (32, 32)


def test_custom_upscale_ratio():
    cfg = tiny_config(supervised_scales=(2, 3), upscale={2: 2, 3: 2})
    out = SRPoseModel(cfg, 0).forward(np.zeros((1, 1, 32, 32)))
    assert out[2].shape[2:] == (16, 16) and out[3].shape[2:] == (8, 8)


def test_default_emits_supervised_scales():
    assert sorted(SRPoseModel(ModelConfig(), 0).heads) == [2, 3]


def test_full_model_gradcheck():
    cfg = tiny_config()
    model = SRPoseModel(cfg, 7)
    rs = np.random.default_rng(8)
    for path, v, _ in model.parameters():
        if path.endswith("2.weight") and path.startswith("head"):
            v[...] = rs.normal(0, 0.3, size=v.shape)  # wake the LKC up from its tiny init
    x = rs.random((2, 1, 32, 32))
    r = {s: rs.normal(size=o.shape) for s, o in model.forward(x).items()}

    def loss():
        out = model.forward(x)
        return float(sum((out[s] * r[s]).sum() for s in out))

    model.zero_grad()
    model.forward(x)
    model.backward(r)
    params = [(p, v, g) for p, v, g in model.parameters()]
    sizes = np.array([v.size for _, v, _ in params])
    flat_ids = rs.choice(sizes.sum(), 20, replace=False)
    analytic, numeric = [], []
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for fid in flat_ids:
        k = np.searchsorted(offsets, fid, side="right") - 1
        _, v, g = params[k]
        i = fid - offsets[k]
        analytic.append(g.reshape(-1)[i])
        numeric.append(numerical_grad(loss, v, 1e-5, [i])[0])
    assert rel_error(analytic, numeric) < 1e-3


def test_backward_requires_matching_scales():
    model = SRPoseModel(tiny_config(), 0)
    out = model.forward(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeError):
        model.backward({2: out[2]})


def test_parameter_count_is_config_function():
    a = SRPoseModel(tiny_config(), 0).num_parameters()
    b = SRPoseModel(tiny_config(), 99).num_parameters()
    assert a == b
    assert SRPoseModel(tiny_config(num_keypoints=3), 0).num_parameters() != a


def _trained_ish(cfg, seed=1):
    model = SRPoseModel(cfg, seed)
    model.forward(np.random.default_rng(seed).random((2, 1, 32, 32)))  # move BN running stats
    return model


def test_save_load_roundtrip(tmp_path):
    cfg = tiny_config()
    model = _trained_ish(cfg)
    path = tmp_path / "p.srkp"
    model.save_params(path)
    assert path.read_bytes()[:6] == b"SRKPv1"
    other = SRPoseModel(cfg, seed=123)
    other.load_params(path)
    for (pa, a), (pb, b) in zip(model.state(), other.state()):
        assert pa == pb and a.tobytes() == b.tobytes()
    x = np.random.default_rng(3).random((1, 1, 32, 32))
    model.eval(), other.eval()
    for s, hm in model.forward(x).items():
        assert hm.tobytes() == other.forward(x)[s].tobytes()


def test_load_truncated_leaves_state_untouched(tmp_path):
    cfg = tiny_config()
    _trained_ish(cfg).save_params(tmp_path / "p.srkp")
    raw = (tmp_path / "p.srkp").read_bytes()
    (tmp_path / "t.srkp").write_bytes(raw[: len(raw) // 2])
    victim = SRPoseModel(cfg, seed=9)
    before = [v.copy() for _, v in victim.state()]
    with pytest.raises(ParamFileError, match="truncated"):
        victim.load_params(tmp_path / "t.srkp")
    for b, (_, v) in zip(before, victim.state()):
        assert b.tobytes() == v.tobytes()


def test_load_wrong_keypoint_count_names_head_param(tmp_path):
    _trained_ish(tiny_config(num_keypoints=2)).save_params(tmp_path / "p.srkp")
    other = SRPoseModel(tiny_config(num_keypoints=3), 0)
    with pytest.raises(ParamFileError, match=r"head2\.0\.weight"):
        other.load_params(tmp_path / "p.srkp")


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ParamFileError):
        SRPoseModel(tiny_config(), 0).load_params(tmp_path / "x")
