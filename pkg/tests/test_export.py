import json

import numpy as np
import pytest
from PIL import Image

from edgeclad.export import PNG_LEVELS, export_anomaly_map, read_anomaly_map_png, read_anomaly_map_raw


def test_roundtrip_png_and_raw(tmp_path):
    amap = np.random.default_rng(0).normal(size=(17, 23)).astype(np.float32)
    meta = export_anomaly_map(amap, tmp_path / "m")
    assert meta["min"] == float(amap.min()) and meta["max"] == float(amap.max())
    np.testing.assert_array_equal(read_anomaly_map_raw(tmp_path / "m"), amap)
    step = (amap.max() - amap.min()) / PNG_LEVELS
    assert np.abs(read_anomaly_map_png(tmp_path / "m") - amap).max() <= step / 2 + 1e-6


def test_png_is_16_bit_and_spans_full_range(tmp_path):
    amap = np.linspace(0, 3, 12, dtype=np.float32).reshape(3, 4)
    export_anomaly_map(amap, tmp_path / "m")
    with Image.open(tmp_path / "m.png") as im:
        px = np.asarray(im)
    assert px.dtype == np.uint16
    assert px.min() == 0 and px.max() == PNG_LEVELS
    assert json.loads((tmp_path / "m.json").read_text())["height"] == 3
    assert (tmp_path / "m.f32").stat().st_size == 12 * 4


def test_constant_map(tmp_path):
    amap = np.full((4, 4), 0.25, np.float32)
    export_anomaly_map(amap, tmp_path / "c")
    np.testing.assert_array_equal(read_anomaly_map_png(tmp_path / "c"), amap)


def test_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        export_anomaly_map(np.zeros((2, 3, 3)), tmp_path / "x")
