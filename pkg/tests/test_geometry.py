import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from regionsep.geometry import (
    MicArray,
    QueryParseError,
    QueryRegion,
    SourcePose,
    direction_vector,
    enumerate_pairs,
    format_query,
    make_pair,
    parse_query,
    region_contains,
    tdoa_distance,
    wrap_deg,
)

azimuths = st.floats(-180, 180, allow_nan=False)
elevations = st.floats(-90, 90, allow_nan=False)


def test_pair_counts():
    assert len(enumerate_pairs(MicArray.circular(8))) == 28
    assert len(enumerate_pairs(MicArray.circular(2))) == 1
    assert len(enumerate_pairs(MicArray.circular(8), [0, 2, 4, 6])) == 6


def test_pair_selection_errors():
    arr = MicArray.circular(4)
    with pytest.raises(ValueError):
        enumerate_pairs(arr, [0, 0, 1])
    with pytest.raises(ValueError):
        enumerate_pairs(arr, [0, 9])
    with pytest.raises(ValueError):
        enumerate_pairs(arr, "some")


def test_array_validation():
    with pytest.raises(ValueError):
        MicArray(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        MicArray(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        MicArray(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        MicArray.preset("nope")


def test_presets():
    circ = MicArray.preset("circ8_5cm")
    assert circ.num_mics == 8
    assert circ.aperture == pytest.approx(0.05)
    lin = MicArray.preset("lin8_22.5cm")
    assert lin.aperture == pytest.approx(0.225)


def test_array_from_text(tmp_path):
    path = tmp_path / "arr.txt"
    path.write_text("# two mics\n0 0 0\n0.1, 0, 0  # second\n")
    arr = MicArray.from_text(path)
    assert arr.num_mics == 2 and arr.aperture == pytest.approx(0.1)


def test_tdoa_examples():
    arr = MicArray(np.array([[0.05, 0, 0], [0, 0, 0]]))
    pair = make_pair(arr, 0, 1)
    assert tdoa_distance(pair, 0, 0) == pytest.approx(0.05)
    assert tdoa_distance(pair, 90, 0) == pytest.approx(0, abs=1e-15)
    assert tdoa_distance(pair, 90, 37) == pytest.approx(0, abs=1e-15)
    assert tdoa_distance(pair, 60, 0) == pytest.approx(0.025)


@given(azimuths, elevations)
def test_tdoa_bounded_by_spacing(az, el):
    pair = make_pair(MicArray.circular(8, 0.1), 1, 5)
    assert abs(tdoa_distance(pair, az, el)) <= pair.spacing + 1e-12


@given(azimuths, elevations)
def test_tdoa_antisymmetric_under_pair_reversal(az, el):
    pair = make_pair(MicArray.circular(6, 0.07), 0, 3)
    assert tdoa_distance(pair.reversed(), az, el) == pytest.approx(-tdoa_distance(pair, az, el), abs=1e-15)


@given(azimuths, elevations)
def test_planar_tdoa_closed_form(az, el):
    # pair in the horizontal plane along +x: spacing * cos(az) * cos(el)
    pair = make_pair(MicArray(np.array([[0.04, 0, 0], [-0.04, 0, 0]])), 0, 1)
    expect = 0.08 * math.cos(math.radians(az)) * math.cos(math.radians(el))
    assert tdoa_distance(pair, az, el) == pytest.approx(expect, abs=1e-14)


def test_region_contains_examples():
    assert region_contains(QueryRegion.angular(-30, 30), SourcePose(0, 0, 1))
    assert not region_contains(QueryRegion.spherical(0.5), SourcePose(0, 0, 0.9))
    assert region_contains(QueryRegion.angular(170, -170), SourcePose(179, 0, 1))
    assert region_contains(QueryRegion.angular(170, -170), SourcePose(-175, 0, 1))
    assert not region_contains(QueryRegion.angular(170, -170), SourcePose(0, 0, 1))


def test_wrapping_window_matches_dense_oracle():
    region = QueryRegion.angular(170, -170)
    for az in np.linspace(-180, 180, 3601):
        # shortest-arc distance from the window center at 180
        inside = abs(wrap_deg(az - 180.0)) <= 10.0 + 1e-9
        assert region_contains(region, SourcePose(float(az), 0, 1)) == inside


@given(st.floats(-180, 180), st.floats(0, 359), azimuths)
def test_angular_membership_is_arc_offset(lo, width, az):
    hi = float(wrap_deg(lo + width)) if width < 360 else lo + width
    region = QueryRegion.angular(lo, hi)
    offset = (az - lo) % 360.0
    expect = offset <= region.azimuth_width + 1e-9 or offset >= 360 - 1e-9
    assert region_contains(region, SourcePose(az, 0, 1)) == expect


@given(st.floats(0.05, 3), st.floats(0.06, 4), st.floats(0.01, 5))
def test_ring_is_outer_minus_inner(a, b, d):
    inner, outer = min(a, b), max(a, b)
    if inner == outer:
        return
    pose = SourcePose(0, 0, d)
    ring = region_contains(QueryRegion.ring(inner, outer), pose)
    diff = region_contains(QueryRegion.spherical(outer), pose) and not region_contains(
        QueryRegion.spherical(inner), pose)
    assert ring == diff


def test_region_validation():
    with pytest.raises(ValueError):
        QueryRegion("box")
    with pytest.raises(ValueError):
        QueryRegion.ring(0, 1)
    with pytest.raises(ValueError):
        QueryRegion.spherical(-1)
    with pytest.raises(ValueError):
        QueryRegion.angular(0, 10, 20, -20)
    with pytest.raises(ValueError):
        SourcePose(200, 0, 1)
    with pytest.raises(ValueError):
        SourcePose(0, 0, 0)


def test_region_dict_roundtrip():
    for q in [QueryRegion.angular(10, 80), QueryRegion.spherical(1.2),
              QueryRegion.conical(-40, 20, 1.5), QueryRegion.ring(0.5, 1.5)]:
        assert QueryRegion.from_dict(q.to_dict()) == q


@given(azimuths, st.floats(-89, 89), st.floats(0.1, 10))
def test_pose_cartesian_roundtrip(az, el, d):
    pose = SourcePose(az, el, d)
    back = SourcePose.from_cartesian(pose.to_cartesian())
    assert back.distance == pytest.approx(d)
    assert back.elevation == pytest.approx(el, abs=1e-6)
    assert abs(wrap_deg(back.azimuth - az)) < 1e-6


def test_direction_vector_unit():
    u = direction_vector(np.linspace(-180, 180, 7), 30)
    np.testing.assert_allclose(np.linalg.norm(u, axis=-1), 1.0)


@pytest.mark.parametrize("text, expect", [
    ("az:-30..30", QueryRegion.angular(-30, 30)),
    ("az:170..-170", QueryRegion.angular(170, -170)),
    ("az:0..90,el:-10..10", QueryRegion.angular(0, 90, -10, 10)),
    ("dist:0..1.5", QueryRegion.spherical(1.5)),
    ("dist:0.5..1.5", QueryRegion.ring(0.5, 1.5)),
    ("ring:0.5..1.5", QueryRegion.ring(0.5, 1.5)),
    ("cone:az:-45..45,dist:0..2", QueryRegion.conical(-45, 45, 2)),
])
def test_parse_query(text, expect):
    assert parse_query(text) == expect


@pytest.mark.parametrize("text", ["", "az:", "az:10..", "az:10..20x", "dist:2..1", "ring:0..1",
                                  "cone:az:0..10,dist:1..2", "bogus:1..2", "az:0..10,el:5..-5"])
def test_parse_errors_carry_position(text):
    with pytest.raises(QueryParseError) as info:
        parse_query(text)
    assert 0 <= info.value.pos <= len(text)
    assert "position" in str(info.value)


@given(st.sampled_from(["angular", "spherical", "conical", "ring"]),
       st.integers(-180, 180), st.integers(-180, 180), st.floats(0.1, 5).map(lambda x: round(x, 3)))
def test_format_parse_roundtrip(kind, lo, hi, r):
    q = {"angular": lambda: QueryRegion.angular(lo, hi),
         "spherical": lambda: QueryRegion.spherical(r),
         "conical": lambda: QueryRegion.conical(lo, hi, r),
         "ring": lambda: QueryRegion.ring(r, r + 0.5)}[kind]()
    assert parse_query(format_query(q)) == q
