"""Config document round-trips and shipped preset regression."""

import pytest

from ultralink import configdoc
from ultralink.channel import ChannelModel, NoiseKind, NoiseProfile, PRESETS
from ultralink.link import LinkConfig
from ultralink.modem import ModemConfig


class TestRoundtrips:
    def test_modem_roundtrip(self):
        cfg = ModemConfig(f0=18200.0, f1=19100.0, bit_rate=42.5, gain=0.7)
        text = configdoc.dump({"modem": configdoc.modem_to_section(cfg)})
        assert configdoc.modem_from_sections(configdoc.parse(text)) == cfg

    def test_channel_roundtrip(self):
        model = ChannelModel(
            distance=4.5,
            angle_off_axis=30.0,
            base_snr_at_1m=17.25,
            noise=NoiseProfile(NoiseKind.SPEECH_LIKE, -3.0),
            seed=99,
            sample_shift_delay=True,
        )
        text = configdoc.dump(configdoc.channel_to_sections(model))
        assert configdoc.channel_from_sections(configdoc.parse(text)) == model

    def test_link_roundtrip(self):
        cfg = LinkConfig(modem=ModemConfig(bit_rate=50.0), t_max=7.5,
                         retask_latency=0.02, auto_rate=True)
        text = configdoc.dump(configdoc.link_to_sections(cfg))
        assert configdoc.link_from_sections(configdoc.parse(text)) == cfg

    def test_defaults_when_sections_missing(self):
        assert configdoc.modem_from_sections({}) == ModemConfig()
        assert configdoc.link_from_sections({}) == LinkConfig()

    def test_unknown_key_rejected(self):
        text = "[modem]\nf9 = 1.0\n"
        with pytest.raises(ValueError):
            configdoc.modem_from_sections(configdoc.parse(text))


class TestShippedPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_preset_file_matches_constants(self, name):
        assert configdoc.load_preset_document(name) == PRESETS[name]
