import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vicet.cloud import (
    CloudFormatError,
    CountMismatchError,
    HeaderError,
    PointCloud,
    RecordError,
    read_cloud,
    rewarp,
    scaled_time_from_azimuth,
    unwarp,
    write_cloud,
)
from vicet.geometry import make_state

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
times = st.floats(0.0, 1.0, exclude_max=True, allow_nan=False)


@st.composite
def clouds(draw):
    n = draw(st.integers(0, 40))
    pos = draw(arrays(float, (n, 3), elements=finite))
    s = draw(arrays(float, (n,), elements=times))
    frame = draw(st.sampled_from(["body", "map"]))
    period = draw(st.floats(1e-3, 10.0))
    return PointCloud(pos, s, frame, period)


@settings(max_examples=40, deadline=None)
@given(clouds())
def test_write_read_round_trip(tmp_path_factory, cloud):
    path = tmp_path_factory.mktemp("c") / "x.cloud"
    write_cloud(cloud, path)
    assert read_cloud(path) == cloud


def test_defaults_and_read_only():
    c = PointCloud(np.ones((3, 3)))
    assert c.frame == "body" and np.all(c.s == 0) and len(c) == 3
    with pytest.raises(ValueError):
        c.positions[0, 0] = 5.0


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(positions=np.zeros((2, 3)), s=[0.0, 1.0]),
        dict(positions=np.zeros((2, 3)), s=[0.0, -0.1]),
        dict(positions=np.zeros((2, 3)), s=[0.0]),
        dict(positions=[[np.inf, 0, 0]]),
        dict(positions=np.zeros((1, 3)), frame="world"),
    ],
)
def test_invalid_clouds(kwargs):
    with pytest.raises(ValueError):
        PointCloud(**kwargs)


def test_scaled_time_from_azimuth():
    assert scaled_time_from_azimuth(0.0) == 0.0
    assert scaled_time_from_azimuth(np.pi) == 0.5
    assert np.isnan(scaled_time_from_azimuth(2 * np.pi))
    assert np.isnan(scaled_time_from_azimuth(-0.1))
    out = scaled_time_from_azimuth(np.array([np.pi / 2, 7.0]))
    assert out[0] == 0.25 and np.isnan(out[1])


def _write(tmp_path, text):
    p = tmp_path / "c.cloud"
    p.write_text(text)
    return p


@pytest.mark.parametrize(
    "text, err, line",
    [
        ("", HeaderError, 1),
        ("hello\n", HeaderError, 1),
        ("vicet-cloud v1 frame=body count=1\n0 0 0 0\n", HeaderError, 1),
        ("vicet-cloud v1 frame=body period=0.1 count=2\n0 0 0 0\n", CountMismatchError, 2),
        ("vicet-cloud v1 frame=body period=0.1 count=1\n0 0 0 0\n1 1 1 0\n", CountMismatchError, 3),
        ("vicet-cloud v1 frame=body period=0.1 count=2\n0 0 0 0\n1 1 0\n", RecordError, 3),
        ("# note\nvicet-cloud v1 frame=body period=0.1 count=1\n\n1 b 1 0\n", RecordError, 4),
        ("vicet-cloud v1 frame=body period=0.1 count=1\n0 0 0 1.5\n", RecordError, 2),
    ],
)
def test_malformed_files_name_the_line(tmp_path, text, err, line):
    with pytest.raises(err) as info:
        read_cloud(_write(tmp_path, text))
    assert isinstance(info.value, CloudFormatError)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_empty_cloud_file(tmp_path):
    c = read_cloud(_write(tmp_path, "vicet-cloud v1 frame=map period=0.1 count=0\n"))
    assert len(c) == 0 and c.frame == "map"


def test_unwarp_then_rewarp_is_identity():
    rng = np.random.default_rng(0)
    X = make_state(rng.normal(size=3), rng.normal(size=3) * 0.5, rng.normal(size=3), rng.normal(size=3) * 0.3)
    c = PointCloud(rng.normal(size=(50, 3)) * 5, rng.uniform(0, 1, 50))
    m = unwarp(c, X)
    assert m.frame == "map"
    back = rewarp(m, X)
    assert np.allclose(back.positions, c.positions, atol=1e-12)
    with pytest.raises(ValueError):
        unwarp(m, X)


def test_unwarp_identity_state():
    c = PointCloud(np.arange(12.0).reshape(4, 3), [0, 0.2, 0.4, 0.9])
    assert np.array_equal(unwarp(c, np.zeros(12)).positions, c.positions)
