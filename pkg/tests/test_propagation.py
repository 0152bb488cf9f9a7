import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracles
from cqdiff.propagation import (
    AOI,
    SPEED_OF_LIGHT,
    CitySize,
    Environment,
    FrequencyRangeError,
    LinkBudget,
    LinkGeometry,
    db_to_linear,
    fspl_db,
    hata_mobile_correction,
    hata_pl_db,
    linear_to_db,
    path_loss_db,
    received_power_dbm,
    winner2_pl_db,
)


class TestFreeSpace:
    def test_unit_distance_at_cancelling_frequency_is_zero(self):
        geom = LinkGeometry(d_m=1.0, ht_m=10, hr_m=1.5, fc_hz=SPEED_OF_LIGHT / (4 * math.pi))
        assert fspl_db(geom) == pytest.approx(0.0, abs=1e-12)

    def test_doubling_distance_adds_6db(self):
        a = fspl_db(LinkGeometry(250.0, 10, 1.5, 2.6e9))
        b = fspl_db(LinkGeometry(500.0, 10, 1.5, 2.6e9))
        assert b - a == pytest.approx(20 * math.log10(2), abs=1e-12)

    def test_spot_value(self):
        assert fspl_db(LinkGeometry(1000.0, 10, 1.5, 2.6e9)) == pytest.approx(
            100.74123914546503, abs=1e-9
        )

    @pytest.mark.parametrize("bad", [dict(d_m=0.0), dict(fc_hz=-1.0), dict(d_m=float("nan"))])
    def test_non_positive_inputs_rejected(self, bad):
        kwargs = dict(d_m=10.0, ht_m=10.0, hr_m=1.5, fc_hz=1e9) | bad
        with pytest.raises(ValueError):
            LinkGeometry(**kwargs)

    @given(
        st.floats(1.0, 1e5),
        st.floats(1e6, 1e10),
        st.floats(1.001, 10.0),
    )
    def test_strictly_increasing(self, d, f, factor):
        base = fspl_db(LinkGeometry(d, 10, 1.5, f))
        assert fspl_db(LinkGeometry(d * factor, 10, 1.5, f)) > base
        assert fspl_db(LinkGeometry(d, 10, 1.5, f * factor)) > base


class TestHata:
    def test_urban_big_city_spot(self):
        env = Environment(AOI.URBAN, CitySize.BIG)
        pl = hata_pl_db(env, LinkGeometry(1000.0, 30.0, 1.5, 900e6))
        assert pl == pytest.approx(126.42008735366150, abs=1e-9)

    def test_distance_term_vanishes_at_1km(self):
        env = Environment(AOI.URBAN, CitySize.BIG)
        a = hata_pl_db(env, LinkGeometry(1000.0, 30.0, 1.5, 900e6))
        b = hata_pl_db(env, LinkGeometry(1000.0, 60.0, 1.5, 900e6))
        # only the -13.82 log10(h_t) term changes at d = 1 km
        assert a - b == pytest.approx(13.82 * math.log10(2), abs=1e-12)

    def test_suburb_mid_small_spot(self):
        urban = hata_pl_db(Environment(AOI.URBAN, CitySize.MID_SMALL), LinkGeometry(1000.0, 30.0, 1.5, 900e6))
        sub = hata_pl_db(Environment(AOI.SUBURB, CitySize.MID_SMALL), LinkGeometry(1000.0, 30.0, 1.5, 900e6))
        assert urban == pytest.approx(126.40328648085746, abs=1e-9)
        assert sub == pytest.approx(115.53706324945068, abs=1e-9)
        assert sub == pytest.approx(urban - 2 * math.log10(45) ** 2 - 5.4, abs=1e-12)

    def test_rural_spot(self):
        pl = hata_pl_db(Environment(AOI.RURAL), LinkGeometry(1000.0, 30.0, 1.5, 900e6))
        assert pl == pytest.approx(102.91366926579977, abs=1e-9)

    @pytest.mark.parametrize("city", list(CitySize))
    def test_mobile_correction_near_zero_at_1p5m(self, city):
        assert abs(hata_mobile_correction(city, 1.5, 900.0)) < 0.05

    def test_out_of_band_names_band(self):
        with pytest.raises(FrequencyRangeError, match="150-1500 MHz"):
            hata_pl_db(Environment(), LinkGeometry(1000.0, 30.0, 1.5, 2.6e9))

    def test_k_range_enforced(self):
        with pytest.raises(ValueError):
            Environment(AOI.RURAL, hata_k=30.0)

    @given(st.floats(150e6, 1500e6), st.floats(10.0, 20000.0), st.sampled_from(list(CitySize)))
    def test_suburb_below_urban(self, f, d, city):
        geom = LinkGeometry(d, 30.0, 1.5, f)
        assert hata_pl_db(Environment(AOI.SUBURB, city), geom) < hata_pl_db(Environment(AOI.URBAN, city), geom)


class TestWinner2:
    def test_urban_spot(self):
        pl = winner2_pl_db(Environment(AOI.URBAN), LinkGeometry(100.0, 25.0, 1.5, 5e9))
        assert pl == pytest.approx(62.21925906831046, abs=1e-9)

    @pytest.mark.parametrize("aoi", list(AOI))
    def test_frequency_term_zero_at_5ghz(self, aoi):
        geom = LinkGeometry(300.0, 25.0, 1.5, 5e9)
        expected = float(_oracles.winner2(aoi.value, 300.0, 25.0, 1.5, 5e9))
        assert winner2_pl_db(Environment(aoi), geom) == pytest.approx(expected, abs=1e-9)

    def test_rural_minus_urban(self):
        ht, hr = 32.0, 1.7
        geom = LinkGeometry(420.0, ht, hr, 5e9)
        diff = winner2_pl_db(Environment(AOI.RURAL), geom) - winner2_pl_db(Environment(AOI.URBAN), geom)
        expected = (10.5 - 9.45) - (18.5 - 17.3) * math.log10(ht) - (18.5 - 17.3) * math.log10(hr)
        assert diff == pytest.approx(expected, abs=1e-12)

    def test_out_of_band(self):
        with pytest.raises(FrequencyRangeError):
            winner2_pl_db(Environment(), LinkGeometry(100.0, 25.0, 1.5, 700e6))


class TestDispatch:
    def test_700mhz_is_hata(self):
        env, geom = Environment(AOI.SUBURB), LinkGeometry(800.0, 30.0, 1.5, 700e6)
        assert path_loss_db(env, geom) == hata_pl_db(env, geom)

    def test_2p6ghz_is_winner(self):
        env, geom = Environment(AOI.RURAL), LinkGeometry(800.0, 30.0, 1.5, 2.6e9)
        assert path_loss_db(env, geom) == winner2_pl_db(env, geom)

    def test_gap_band_falls_back_with_warning(self, caplog):
        env, geom = Environment(), LinkGeometry(800.0, 30.0, 1.5, 1.8e9)
        with caplog.at_level(logging.WARNING, logger="cqdiff.propagation"):
            assert path_loss_db(env, geom) == fspl_db(geom)
        assert "free-space" in caplog.text

    def test_mixed_band_array_routes_elementwise(self):
        env = Environment(AOI.URBAN)
        f = np.array([700e6, 2.6e9, 4.9e9, 700e6])
        d = np.array([100.0, 200.0, 300.0, 400.0])
        out = path_loss_db(env, LinkGeometry(d, 30.0, 1.5, f))
        for i in range(4):
            assert out[i] == path_loss_db(env, LinkGeometry(d[i], 30.0, 1.5, f[i]))

    @settings(max_examples=200)
    @given(
        st.sampled_from(list(AOI)),
        st.sampled_from(list(CitySize)),
        st.floats(1.0, 20000.0),
        st.floats(5.0, 200.0),
        st.floats(1.0, 10.0),
        st.floats(1e8, 6e9),
    )
    def test_finite_over_parameter_box(self, aoi, city, d, ht, hr, f):
        assert np.isfinite(path_loss_db(Environment(aoi, city), LinkGeometry(d, ht, hr, f)))


class TestLinkBudget:
    def test_spot(self):
        assert received_power_dbm(LinkBudget(43.0), 126.42) == pytest.approx(-83.42, abs=1e-12)

    def test_zero_loss_is_identity(self):
        assert received_power_dbm(LinkBudget(30.0), 0.0) == 30.0

    def test_linear_in_path_loss(self):
        budget = LinkBudget(40.0, 3.0, 1.0)
        assert received_power_dbm(budget, 100.0) - received_power_dbm(budget, 103.0) == pytest.approx(3.0)

    def test_power_range_validated(self):
        with pytest.raises(ValueError):
            LinkBudget(95.0)

    @given(st.floats(1e-15, 1e6))
    def test_db_round_trip(self, x):
        assert db_to_linear(linear_to_db(x)) == pytest.approx(x, rel=1e-12)
