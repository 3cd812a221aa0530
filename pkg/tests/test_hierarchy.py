"""Hierarchy tests: layer chains, recursive forecasting, persistence."""

import numpy as np
import pytest

from xsrc.errors import ChecksumError, ConfigError, CorruptHeaderError, UnsupportedVersionError
from xsrc.field import GridSeries, coarse_grain
from xsrc.hierarchy import (
    HierarchyConfig,
    LayerConfig,
    build_hierarchy,
    coarse_chain,
    forecast,
    load_model,
    save_model,
    sync_states,
    train_hierarchy,
)
from xsrc.layer import layer_forecast_step, sync_layer
from xsrc.reservoir import ReservoirHyperparams


def _hp(**kw):
    base = dict(d_r=30, g=0.7, p=0.3, g_in=0.4, g_l=0.4, tau=1.0, dt_step=1.0,
                noise_std=0.01, beta=1e-8, beta_mode="absolute", washout=20)
    base.update(kw)
    return ReservoirHyperparams(**base)


def _lc(tr, tc, **kw):
    hyper = kw.pop("hyper", None) or _hp(**kw)
    return LayerConfig(tile_rows=tr, tile_cols=tc, overlap=1,
                       boundary_row="clamp", boundary_col="periodic", hyper=hyper)


def _two_layer_cfg(**kw):
    return HierarchyConfig(
        layer_configs=(_lc(3, 3, **kw), _lc(3, 3, **kw)),
        refine_factors=(2,),
    )


def _wavy_series(n_time=260, rows=6, cols=6, seed=0, noise=0.05):
    gen = np.random.default_rng(seed)
    t = np.arange(n_time)[:, None, None]
    r = np.arange(rows)[None, :, None]
    c = np.arange(cols)[None, None, :]
    values = (
        np.sin(2 * np.pi * t / 40.0)
        + 0.4 * np.sin(2 * np.pi * (c - 0.2 * t) / 6.0)
        + 0.05 * np.cos(2 * np.pi * r / 5.0)
        + noise * gen.normal(size=(n_time, rows, cols))
    )
    return GridSeries(values)


def _fine_series(n_time=260, seed=0):
    return _wavy_series(n_time=n_time, rows=12, cols=12, seed=seed)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_layer_dims_chain():
    cfg = HierarchyConfig(
        layer_configs=(_lc(2, 2), _lc(3, 3), _lc(6, 6)),
        refine_factors=(3, 3),
    )
    assert cfg.layer_dims(36, 72) == [(4, 8), (12, 24), (36, 72)]


def test_refine_factor_must_be_integer_ge_two():
    cfg = HierarchyConfig(layer_configs=(_lc(2, 2), _lc(2, 2)), refine_factors=(1,))
    with pytest.raises(ConfigError):
        cfg.validate()


def test_paper_shape_reservoir_counts():
    # 10x10 tiles at 10x20 / 30x60 / 90x180 give 2 / 18 / 162 reservoirs
    hyper = _hp(d_r=1250, p=0.01)
    cfg = HierarchyConfig(
        layer_configs=(
            _lc(10, 10, hyper=hyper),
            _lc(10, 10, hyper=hyper),
            _lc(10, 10, hyper=hyper),
        ),
        refine_factors=(3, 3),
    )
    model = build_hierarchy(cfg, 90, 180, master_seed=1)
    assert [layer.n_reservoirs for layer in model.layers] == [2, 18, 162]
    assert all(
        r.hyper.d_r == 1250
        for layer in model.layers
        for r in layer.reservoirs.values()
    )


def test_coarse_chain_matches_manual():
    series = _fine_series(40)
    chain = coarse_chain(series, (2,))
    assert chain[1] is series
    np.testing.assert_array_equal(chain[0].values, coarse_grain(series, 2).values)


# ---------------------------------------------------------------------------
# training and forecasting
# ---------------------------------------------------------------------------

def test_depth1_equals_direct_layer_pipeline():
    from xsrc.layer import build_layer, train_layer

    series = _fine_series()
    cfg = HierarchyConfig(layer_configs=(_lc(6, 6),), refine_factors=())
    model = train_hierarchy(cfg, series.slice_time(0, 200), master_seed=42)

    direct = build_layer(1, 12, 12, 6, 6, 1, "clamp", "periodic", _hp(),
                         master_seed=42, mask=series.mask)
    train_layer(direct, series.slice_time(0, 200))
    for i in direct.active_indices():
        assert np.array_equal(
            model.layers[0].reservoirs[i].W_out, direct.reservoirs[i].W_out
        )

    warmup = series.slice_time(140, 200)
    result = forecast(model, warmup, horizon=30)
    states = sync_layer(direct, warmup.values)
    frame = warmup.values[-1]
    for t in range(30):
        frame, states, _ = layer_forecast_step(direct, states, frame)
        np.testing.assert_allclose(result.frames[0][t], frame, atol=1e-12, rtol=1e-12)


def test_forecast_h0_empty_but_synced():
    series = _fine_series()
    model = train_hierarchy(_two_layer_cfg(), series.slice_time(0, 200), master_seed=3)
    result = forecast(model, series.slice_time(150, 200), horizon=0)
    assert result.horizon == 0
    assert all(f.shape[0] == 0 for f in result.frames)
    with pytest.raises(ConfigError):
        result.finest_series


def test_constant_data_constant_forecast():
    values = np.full((200, 6, 6), 2.0)
    series = GridSeries(values)
    cfg = HierarchyConfig(
        layer_configs=(_lc(3, 3, noise_std=0.0), _lc(3, 3, noise_std=0.0)),
        refine_factors=(2,),
    )
    model = train_hierarchy(cfg, series.slice_time(0, 150), master_seed=9)
    result = forecast(model, series.slice_time(100, 150), horizon=100)
    for frames in result.frames:
        np.testing.assert_allclose(frames, 2.0, atol=1e-3)


def test_warmup_too_short():
    series = _fine_series()
    model = train_hierarchy(_two_layer_cfg(washout=40), series.slice_time(0, 200),
                            master_seed=3)
    with pytest.raises(ConfigError, match="washout"):
        forecast(model, series.slice_time(190, 200), horizon=5)


def test_causality_post_warmup_truth_is_ignored():
    series = _fine_series(300)
    cfg = _two_layer_cfg()
    model = train_hierarchy(cfg, series.slice_time(0, 200), master_seed=11)
    warmup = series.slice_time(150, 200)
    a = forecast(model, warmup, horizon=40)
    perturbed = series.values.copy()
    perturbed[200:] += np.random.default_rng(0).normal(0, 10.0, perturbed[200:].shape)
    series_p = GridSeries(perturbed)
    warmup_p = series_p.slice_time(150, 200)
    b = forecast(model, warmup_p, horizon=40)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_parent_timing_modes_differ_but_both_work():
    series = _fine_series(300, seed=5)
    model = train_hierarchy(_two_layer_cfg(), series.slice_time(0, 220), master_seed=7)
    warmup = series.slice_time(160, 220)
    same = forecast(model, warmup, horizon=30, parent_timing="same_step")
    prev = forecast(model, warmup, horizon=30, parent_timing="previous_step")
    assert not np.array_equal(same.frames[1], prev.frames[1])
    # the coarse layer never sees parent features: identical either way
    np.testing.assert_array_equal(same.frames[0], prev.frames[0])


def test_parent_signal_prediction_mode_trains():
    series = _fine_series(300, seed=6)
    cfg = HierarchyConfig(
        layer_configs=(_lc(3, 3), _lc(3, 3)),
        refine_factors=(2,),
        parent_signal="prediction",
    )
    model = train_hierarchy(cfg, series.slice_time(0, 220), master_seed=8)
    truth_cfg = _two_layer_cfg()
    truth_model = train_hierarchy(truth_cfg, series.slice_time(0, 220), master_seed=8)
    # the coarse layer is identical; the fine layer differs (different features)
    assert np.array_equal(
        model.layers[0].reservoirs[0].W_out, truth_model.layers[0].reservoirs[0].W_out
    )
    assert not np.array_equal(
        model.layers[1].reservoirs[0].W_out, truth_model.layers[1].reservoirs[0].W_out
    )
    result = forecast(model, series.slice_time(160, 220), horizon=10)
    assert np.isfinite(result.frames[1]).all()


def test_sync_states_matches_forecast_phase1():
    series = _fine_series(260, seed=7)
    model = train_hierarchy(_two_layer_cfg(), series.slice_time(0, 200), master_seed=13)
    warmup = series.slice_time(150, 200)
    states, warm = sync_states(model, warmup)
    chain = coarse_chain(warmup, model.refine_factors)
    for k, layer in enumerate(model.layers):
        parent = chain[k - 1].values if k > 0 else None
        expected = sync_layer(layer, chain[k].values, parent)
        for i in layer.active_indices():
            np.testing.assert_array_equal(states[k][i], expected[i])


def test_activity_recording():
    series = _fine_series()
    model = train_hierarchy(_two_layer_cfg(), series.slice_time(0, 200), master_seed=3)
    result = forecast(model, series.slice_time(150, 200), horizon=20, record_activity=True)
    assert len(result.activity) == 2
    for act in result.activity:
        assert act.shape == (20, 2)
        assert (act > 0).all()


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def saved_model(tmp_path_factory):
    series = _fine_series(seed=21)
    model = train_hierarchy(_two_layer_cfg(), series.slice_time(0, 200),
                            master_seed=77, provenance={"config_hash": "cafe"})
    path = tmp_path_factory.mktemp("ckpt") / "model.xsrc"
    save_model(model, path)
    return model, path, series


def test_checkpoint_roundtrip_forecasts_identically(saved_model):
    model, path, series = saved_model
    back = load_model(path)
    assert back.provenance["config_hash"] == "cafe"
    assert back.n_layers == model.n_layers
    warmup = series.slice_time(150, 200)
    a = forecast(model, warmup, horizon=25)
    b = forecast(back, warmup, horizon=25)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_checkpoint_tamper_detected(saved_model):
    _, path, _ = saved_model
    blob = bytearray(path.read_bytes())
    # flip one byte deep in the payload region (a W_out section)
    blob[len(blob) // 2] ^= 0xFF
    tampered = path.parent / "tampered.xsrc"
    tampered.write_bytes(bytes(blob))
    with pytest.raises((ChecksumError, CorruptHeaderError)):
        load_model(tampered)


def test_checkpoint_future_version_rejected(saved_model):
    _, path, _ = saved_model
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    future = path.parent / "future.xsrc"
    future.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersionError):
        load_model(future)


def test_checkpoint_not_a_container(tmp_path):
    path = tmp_path / "junk.xsrc"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(CorruptHeaderError):
        load_model(path)
