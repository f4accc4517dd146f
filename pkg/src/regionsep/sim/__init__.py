"""Room impulse responses, noise fields, corpora and scene synthesis."""
from .corpus import SyntheticCorpus, WavCorpus
from .rir import Rir, RoomSpec, measure_t60, simulate_rir, split_direct_early
from .scene import PROFILES, SceneMix, SceneSpec, get_profile, mix_scene, random_scene

__all__ = ["SyntheticCorpus", "WavCorpus", "Rir", "RoomSpec", "measure_t60", "simulate_rir",
           "split_direct_early", "PROFILES", "SceneMix", "SceneSpec", "get_profile", "mix_scene",
           "random_scene"]
