import numpy as np
import pytest

from viewhall import vtn as V
from viewhall.autodiff.checkpoint import load as load_checkpoint
from viewhall.autodiff.tensor import ShapeError, Tensor


def tiny_config(**kw):
    base = dict(layers=2, enc_channels=4, downsample=2, height=8, width=12, batch_size=4, epochs=2)
    return V.VTNConfig(**{**base, **kw})


def pairs(n, h=8, w=12, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(size=(h, w, 3)).astype(np.float32), rng.uniform(size=(h, w, 3)).astype(np.float32))
            for _ in range(n)]


# -- multi-layer loss weights ------------------------------------------------------

def test_layer_weights_schedule():
    np.testing.assert_array_equal(V.layer_weights(3), [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(V.layer_weights(3, "uniform"), [1, 1, 1])
    with pytest.raises(ValueError):
        V.layer_weights(3, "cosine")


def test_constant_layer_error_sums_geometrically():
    e, L = 0.3, 8
    target = np.zeros((1, 3, 2, 2))
    outs = [Tensor(target + e, dtype=np.float64) for _ in range(L)]
    total, per_layer = V.vtn_loss(outs, target)
    assert abs(float(total.data) - e * (2 - 2.0 ** -7)) < 1e-6
    np.testing.assert_allclose(per_layer, e)


def test_loss_single_layer_is_plain_l1():
    total, _ = V.vtn_loss([Tensor(np.full((1, 3, 2, 2), 0.75))], np.full((1, 3, 2, 2), 0.5))
    assert float(total.data) == pytest.approx(0.25)


# -- model --------------------------------------------------------------------------

def test_forward_shapes_and_range():
    cfg = tiny_config(layers=3)
    model = V.ViewTransformNet(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(2, 8, 12, 3))
    outs = V.vtn_forward(model, x, x, x)
    assert len(outs) == 3
    for o in outs:
        assert o.shape == (2, 8, 12, 3) and o.min() >= 0 and o.max() <= 1
    assert V.hallucinate(model, x[0], x[0], x[0]).shape == (8, 12, 3)


def test_hallucinate_matches_last_decoded_layer():
    model = V.ViewTransformNet(tiny_config(), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(3, 8, 12, 3)).astype(np.float32)
    np.testing.assert_allclose(V.hallucinate(model, x, x[::-1], x, batch=2), V.vtn_forward(model, x, x[::-1], x)[-1],
                               atol=1e-6)


def test_final_layer_query_key_updates_get_no_gradient():
    model = V.ViewTransformNet(tiny_config(), np.random.default_rng(0))
    x = V.to_nchw(np.random.default_rng(1).uniform(size=(1, 8, 12, 3)))
    loss, _ = V.vtn_loss(model(x, x, x), x.data)
    loss.backward()
    params = model.parameters()
    assert params["layers.1.ffn_q.down.weight"].grad is None
    assert params["layers.1.ffn_k.up.weight"].grad is None
    assert np.abs(params["layers.0.ffn_q.down.weight"].grad).sum() > 0


def test_wrong_input_size_rejected():
    model = V.ViewTransformNet(tiny_config(), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="x_Q"):
        model(V.to_nchw(np.zeros((1, 8, 12, 3))), V.to_nchw(np.zeros((1, 8, 12, 3))), V.to_nchw(np.zeros((1, 8, 8, 3))))


def test_attention_weights_are_recorded_per_layer():
    model = V.ViewTransformNet(tiny_config(), np.random.default_rng(0))
    x = V.to_nchw(np.zeros((1, 8, 12, 3)))
    record = []
    model(x, x, x, record)
    assert len(record) == 2 and record[0].shape == (1, 24, 24)


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        V.VTNConfig(layers=0)
    with pytest.raises(ValueError):
        V.VTNConfig(height=30, downsample=4)
    with pytest.raises(ValueError):
        V.VTNConfig.from_dict({"layers": 2, "heads": 4})
    cfg = tiny_config(use_attention=False)
    cfg.save(tmp_path / "c.json")
    assert V.VTNConfig.load(tmp_path / "c.json") == cfg


def test_profiles():
    desk, paper = V.default_config("desk"), V.default_config("paper")
    assert (desk.height, desk.width, desk.layers) == (32, 48, 2)
    assert (paper.height, paper.width, paper.layers, paper.lr, paper.batch_size) == (384, 512, 8, 1e-4, 16)
    with pytest.raises(ValueError):
        V.default_config("laptop")


# -- training ------------------------------------------------------------------------

def blocky(n, seed=0):
    rng = np.random.default_rng(seed)
    return [np.kron(rng.uniform(size=(2, 3, 3)), np.ones((4, 4, 1))).astype(np.float32) for _ in range(n)]


def test_training_reduces_loss():
    cfg = tiny_config(epochs=15, lr=1e-2)
    data = [(x, x) for x in blocky(8)]
    _, stats = V.train_vtn(cfg, data, seed=0)
    assert stats[-1]["mean_loss"] < 0.8 * stats[0]["mean_loss"]
    assert len(stats[0]["per_layer_loss"]) == 2


def test_training_is_deterministic(tmp_path):
    cfg = tiny_config()
    data = pairs(6)
    for name in ("a", "b"):
        model, _ = V.train_vtn(cfg, data, seed=11)
        V.save_model(model, tmp_path / name)
    assert (tmp_path / "a" / "weights.adla").read_bytes() == (tmp_path / "b" / "weights.adla").read_bytes()
    other, _ = V.train_vtn(cfg, data, seed=12)
    assert not np.array_equal(other.state_dict()["decoder.out.weight"],
                              load_checkpoint(tmp_path / "a" / "weights.adla")["decoder.out.weight"])


def test_save_load_round_trip(tmp_path):
    model = V.ViewTransformNet(tiny_config(positional="concat"), np.random.default_rng(3))
    V.save_model(model, tmp_path / "m")
    back = V.load_model(tmp_path / "m")
    assert back.config == model.config
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)


def test_empty_training_set():
    with pytest.raises(ValueError):
        V.train_vtn(tiny_config(), [], seed=0)


def test_on_epoch_callback():
    seen = []
    V.train_vtn(tiny_config(epochs=3), pairs(4), seed=0, on_epoch=seen.append)
    assert [s["epoch"] for s in seen] == [0, 1, 2]


def test_zero_epochs_returns_initialization():
    cfg = tiny_config(epochs=0)
    model, stats = V.train_vtn(cfg, pairs(2), seed=4)
    init = V.ViewTransformNet(cfg, np.random.default_rng(np.random.SeedSequence(4).spawn(2)[0]))
    assert stats == []
    for k, v in init.state_dict().items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_first_layer_weights_do_not_depend_on_the_value_image():
    model = V.ViewTransformNet(tiny_config(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x_s, x_t = rng.uniform(size=(2, 8, 12, 3)), rng.uniform(size=(2, 8, 12, 3))
    semantic = rng.integers(0, 2, size=(2, 8, 12, 3)).astype(float)
    rec_color, rec_sem = [], []
    out_c = model(V.to_nchw(x_s), V.to_nchw(x_s), V.to_nchw(x_t), rec_color)[-1].data
    out_s = model(V.to_nchw(semantic), V.to_nchw(x_s), V.to_nchw(x_t), rec_sem)[-1].data
    np.testing.assert_array_equal(rec_color[0], rec_sem[0])
    assert not np.allclose(out_c, out_s)
