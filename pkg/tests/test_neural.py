import numpy as np
import pytest
import torch
from scipy import stats

from piddpg.errors import ConfigError, NumericError, ShapeError
from piddpg.hexgrid import N_CHANNELS, GridMap
from piddpg.neural import (
    ConvLSTMState,
    HexConv,
    ParamSet,
    adam_step,
    convlstm_params,
    convlstm_sequence,
    convlstm_step,
    dense,
    grad_check,
    init_glorot,
    init_he_normal,
    init_uniform_bounded,
    load_checkpoint,
    relative_error,
    save_checkpoint,
)

D = torch.float64


def t(rng, *shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=D)


# initializers


def test_he_normal_moments():
    x = init_he_normal((1_000_000,), 2, np.random.default_rng(0)).numpy()
    assert abs(x.var() - 1.0) < 0.02
    assert abs(x.mean()) < 0.01
    with pytest.raises(ConfigError):
        init_he_normal((3,), 0, np.random.default_rng(0))


def test_glorot_moments():
    x = init_glorot((1_000_000,), 1, 1, np.random.default_rng(1)).numpy()
    assert abs(x.var() - 1.0) < 0.02
    assert abs(stats.skew(x)) < 0.02
    with pytest.raises(ConfigError):
        init_glorot((3,), 0, 0, np.random.default_rng(0))


def test_uniform_bounded():
    x = init_uniform_bounded((1_000_000,), np.random.default_rng(2)).numpy()
    assert x.min() >= -0.03 and x.max() <= 0.03
    assert abs(x.mean()) < 0.001
    with pytest.raises(ConfigError):
        init_uniform_bounded((3,), np.random.default_rng(0), 0.1, 0.1)


def test_initializers_are_float64_and_seeded():
    a = init_he_normal((4, 4), 4, np.random.default_rng(5))
    b = init_he_normal((4, 4), 4, np.random.default_rng(5))
    assert a.dtype == D and torch.equal(a, b)


# dense


def test_dense_trivial_cases():
    x = torch.ones(2, 3, dtype=D)
    assert not dense(x, torch.zeros(3, 4, dtype=D), torch.zeros(4, dtype=D), "relu").any()
    assert torch.equal(dense(x, torch.eye(3, dtype=D), torch.zeros(3, dtype=D)), x)
    with pytest.raises(ShapeError):
        dense(x, torch.zeros(4, 4, dtype=D), torch.zeros(4, dtype=D))
    with pytest.raises(ConfigError):
        dense(x, torch.eye(3, dtype=D), torch.zeros(3, dtype=D), "gelu")


@pytest.mark.parametrize("activation", ["relu", "tanh", "linear"])
def test_dense_gradient(activation):
    rng = np.random.default_rng(3)
    for _ in range(5):
        point = [t(rng, 2, 4), t(rng, 4, 3), t(rng, 3)]
        err = grad_check(lambda x, w, b: (dense(x, w, b, activation) ** 2).sum(), point)
        assert err < 1e-4


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(4)
    c = t(rng, 5)
    assert grad_check(lambda x: (c * x).sum(), [t(rng, 5)]) < 1e-8


def test_grad_check_dense_tanh_composite():
    rng = np.random.default_rng(5)
    point = [t(rng, 3, 4), t(rng, 4, 4), t(rng, 4), t(rng, 4, 1)]

    def fn(x, w1, b1, w2):
        return dense(dense(x, w1, b1, "tanh"), w2, torch.zeros(1, dtype=D)).sum()

    assert grad_check(fn, point) < 1e-4


def test_relative_error_ignores_round_off_at_zero():
    a = [torch.tensor([1.0, 0.0], dtype=D)]
    n = [torch.tensor([1.0, 1e-13], dtype=D)]
    assert relative_error(a, n) < 1e-9
    assert relative_error([torch.tensor([1.0], dtype=D)], [torch.tensor([2.0], dtype=D)]) == pytest.approx(0.5)


# hex convolution and ConvLSTM


def test_hexconv_matches_dense_conv2d():
    grid = GridMap.hexagon(2)
    geom = HexConv(grid)
    rng = np.random.default_rng(6)
    x = t(rng, 2, 3, grid.axial_rows, grid.axial_cols) * torch.from_numpy(grid.mask.copy())
    k = t(rng, 4, 3, 3, 3)
    ref = torch.nn.functional.conv2d(x, k, padding=1)
    ours = geom.to_grid(geom.apply(geom.to_cells(x), k))
    assert torch.allclose(ours, ref * torch.from_numpy(grid.mask.copy()), atol=1e-12)


def test_convlstm_zero_case():
    grid = GridMap.hexagon(1)
    geom = HexConv(grid)
    params = {k: torch.zeros_like(v) for k, v in convlstm_params(2, 3, np.random.default_rng(0)).items()}
    state = ConvLSTMState.zeros(3, grid.axial_rows, grid.axial_cols)
    out = convlstm_step(torch.zeros(2, grid.axial_rows, grid.axial_cols, dtype=D), state, params, geom)
    assert not out.hidden.any() and not out.cell.any()


def test_convlstm_shapes_and_mask():
    grid = GridMap.hexagon(2)
    geom = HexConv(grid)
    rng = np.random.default_rng(7)
    params = convlstm_params(N_CHANNELS, 5, rng)
    params["convlstm.b"] = t(rng, 20)
    state = ConvLSTMState.zeros(5, grid.axial_rows, grid.axial_cols)
    x = t(rng, N_CHANNELS, grid.axial_rows, grid.axial_cols)
    out = convlstm_step(x, state, params, geom)
    assert out.hidden.shape == (5, grid.axial_rows, grid.axial_cols)
    assert out.cell.shape == out.hidden.shape
    outside = ~torch.from_numpy(grid.mask.copy())
    assert not out.hidden[:, outside].any() and not out.cell[:, outside].any()
    assert out.hidden[:, ~outside].abs().sum() > 0


def test_convlstm_shape_errors():
    grid = GridMap.hexagon(1)
    geom = HexConv(grid)
    params = convlstm_params(2, 3, np.random.default_rng(0))
    state = ConvLSTMState.zeros(3, grid.axial_rows, grid.axial_cols)
    with pytest.raises(ShapeError):
        convlstm_step(torch.zeros(2, 4, 4, dtype=D), state, params, geom)
    with pytest.raises(ShapeError):
        convlstm_step(torch.zeros(5, grid.axial_rows, grid.axial_cols, dtype=D), state, params, geom)


def test_convlstm_gradient_every_gate_parameter():
    # 2-channel input on a map whose embedding is 3x3
    grid = GridMap.hexagon(1)
    geom = HexConv(grid)
    rng = np.random.default_rng(8)
    p = convlstm_params(2, 2, rng)
    xs = t(rng, 1, 3, 2, grid.n_cells)
    point = [p["convlstm.wx"], p["convlstm.wh"], t(rng, 8) * 0.3]

    def fn(wx, wh, b):
        return (convlstm_sequence(xs, wx, wh, b, geom, 2) ** 2).sum()

    assert grad_check(fn, point) < 1e-4


def test_convlstm_step_and_sequence_agree():
    grid = GridMap.hexagon(1)
    geom = HexConv(grid)
    rng = np.random.default_rng(9)
    params = convlstm_params(3, 2, rng)
    xs = t(rng, 1, 4, 3, grid.axial_rows, grid.axial_cols) * torch.from_numpy(grid.mask.copy())
    state = ConvLSTMState.zeros(2, grid.axial_rows, grid.axial_cols)
    for k in range(4):
        state = convlstm_step(xs[0, k], state, params, geom)
    seq = convlstm_sequence(geom.to_cells(xs), params["convlstm.wx"], params["convlstm.wh"], params["convlstm.b"], geom, 2)
    assert torch.allclose(geom.to_cells(state.hidden), seq[0], atol=1e-12)


# Adam


def test_adam_first_step():
    ps = ParamSet({"x": torch.zeros(1, dtype=D)})
    adam_step(ps, [torch.ones(1, dtype=D)], 0.1)
    assert float(ps["x"].detach()) == pytest.approx(-0.1, abs=1e-6)


def test_adam_zero_gradient_and_lr_zero():
    ps = ParamSet({"x": torch.full((2,), 3.0, dtype=D)})
    adam_step(ps, [torch.ones(2, dtype=D)], 0.1)
    before = ps["x"].detach().clone()
    m = ps.m["x"].clone()
    adam_step(ps, [torch.zeros(2, dtype=D)], 0.1)
    assert torch.allclose(ps.m["x"], 0.9 * m)
    # zero gradient still moves by the decayed first moment; lr=0 never moves
    frozen = ParamSet({"x": torch.ones(2, dtype=D)})
    for _ in range(5):
        adam_step(frozen, [torch.ones(2, dtype=D)], 0.0)
    assert torch.equal(frozen["x"].detach(), torch.ones(2, dtype=D))
    fresh = ParamSet({"x": torch.ones(2, dtype=D)})
    adam_step(fresh, [torch.zeros(2, dtype=D)], 0.1)
    assert torch.equal(fresh["x"].detach(), torch.ones(2, dtype=D))
    assert before.shape == ps["x"].shape


def test_adam_monotone_under_constant_gradient():
    ps = ParamSet({"x": torch.zeros(1, dtype=D)})
    last = 0.0
    for _ in range(10_000):
        adam_step(ps, [torch.ones(1, dtype=D)], 1e-3)
        now = float(ps["x"].detach())
        assert now < last
        last = now


def test_adam_errors():
    ps = ParamSet({"x": torch.zeros(2, dtype=D)})
    with pytest.raises(NumericError):
        adam_step(ps, [torch.tensor([np.nan, 0.0], dtype=D)], 0.1)
    with pytest.raises(ShapeError):
        adam_step(ps, [torch.zeros(3, dtype=D)], 0.1)
    with pytest.raises(ShapeError):
        adam_step(ps, [], 0.1)


def test_paramset_moments_match_shapes():
    ps = ParamSet({"a": torch.zeros(2, 3, dtype=D), "b": torch.zeros(4, dtype=D)})
    for name in ps:
        assert ps.m[name].shape == ps[name].shape == ps.v[name].shape
    cp = ps.copy()
    assert cp.equal(ps)
    with torch.no_grad():
        cp["a"].add_(1.0)
    assert not cp.equal(ps)


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    ps = ParamSet({"w": t(rng, 3, 2), "b": t(rng, 2)})
    adam_step(ps, [t(rng, 3, 2), t(rng, 2)], 0.01)
    path = save_checkpoint(tmp_path / "ck.npz", {"actor": ps}, {"note": "x"})
    sets, meta = load_checkpoint(path)
    back = sets["actor"]
    assert meta == {"note": "x"}
    assert back.equal(ps) and back.step_count == 1
    for name in ps:
        assert torch.equal(back.m[name], ps.m[name]) and torch.equal(back.v[name], ps.v[name])


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, __header__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
