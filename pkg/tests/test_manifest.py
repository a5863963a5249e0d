"""
Tests for corpus manifests and frame alignments
"""
import json

import numpy as np
import pytest

from core.errors import DataError
from core.manifest import (Alignments, Manifest, Utterance, read_manifest, source_utt_id, speed_factor_of,
                           write_manifest)


class TestManifest:
    """Test JSON-lines manifests"""

    def test_write_then_read(self, temp_dir):
        manifest = Manifest([
            Utterance("s1-u1", "s1", "audio/s1-u1.wav", "w01 w02", duration_s=1.5),
            Utterance("s2-u1", "s2", "audio/s2-u1.wav", ["w03"], condition_tag="reverb", duration_s=2.0),
        ])
        path = write_manifest(manifest, temp_dir / "manifest.jsonl")
        loaded = read_manifest(path)

        assert [u.utt_id for u in loaded] == ["s1-u1", "s2-u1"]
        assert loaded.utterances[0].transcript == ("w01", "w02")
        assert loaded.root == temp_dir.resolve()
        assert loaded.resolve_audio(loaded.utterances[0]) == temp_dir.resolve() / "audio" / "s1-u1.wav"

    def test_records_have_exactly_six_fields(self, temp_dir):
        write_manifest(Manifest([Utterance("u", "s", "u.wav", "a")]), temp_dir / "m.jsonl")
        record = json.loads((temp_dir / "m.jsonl").read_text().splitlines()[0])
        assert sorted(record) == sorted(["utt_id", "speaker_id", "audio_path", "transcript",
                                         "condition_tag", "duration_s"])

    def test_unexpected_field(self, temp_dir):
        record = {"utt_id": "u", "speaker_id": "s", "audio_path": "u.wav", "transcript": ["a"],
                  "condition_tag": "clean", "duration_s": 1.0, "gender": "f"}
        (temp_dir / "m.jsonl").write_text(json.dumps(record) + "\n")
        with pytest.raises(DataError, match="gender"):
            read_manifest(temp_dir / "m.jsonl")

    def test_duplicate_ids(self):
        with pytest.raises(DataError, match="Duplicate"):
            Manifest([Utterance("u", "s", "a.wav", "a"), Utterance("u", "s", "b.wav", "b")])

    def test_invalid_json_line(self, temp_dir):
        (temp_dir / "m.jsonl").write_text("{not json}\n")
        with pytest.raises(DataError, match="m.jsonl:1"):
            read_manifest(temp_dir / "m.jsonl")

    def test_missing_manifest(self, temp_dir):
        with pytest.raises(DataError, match="not found"):
            read_manifest(temp_dir / "nope.jsonl")

    def test_speaker_helpers(self):
        manifest = Manifest([Utterance(f"{s}-{i}", s, "x.wav", "a", duration_s=1.0)
                             for s in ("b", "a") for i in range(2)])
        assert manifest.speakers() == ["a", "b"]
        assert len(manifest.for_speakers(["a"])) == 2
        assert manifest.total_duration() == 4.0
        assert manifest.condition_counts() == {"clean": 4}


class TestDerivedIds:
    """Test mapping augmented and perturbed ids back to the clean utterance"""

    @pytest.mark.parametrize("utt_id,source", [
        ("s1-u1", "s1-u1"),
        ("s1-u1-reverb", "s1-u1"),
        ("s1-u1-reverb_real_noise", "s1-u1"),
        ("s1-u1-sp0.9", "s1-u1"),
        ("s1-u1-reverb-sp1.1", "s1-u1"),
    ])
    def test_source_utt_id(self, utt_id, source):
        assert source_utt_id(utt_id) == source

    def test_speed_factor(self):
        assert speed_factor_of("u-reverb-sp0.9") == 0.9
        assert speed_factor_of("u-reverb") == 1.0


class TestAlignments:
    """Test per-frame phone targets"""

    def test_same_length_targets(self):
        alignments = Alignments({"u": [1, 2, 3]})
        np.testing.assert_array_equal(alignments.for_utterance("u-reverb", 3), [1, 2, 3])

    def test_stretched_for_slowed_speech(self):
        alignments = Alignments({"u": [1, 1, 2, 2]})
        np.testing.assert_array_equal(alignments.for_utterance("u-sp0.5", 8), [1, 1, 1, 1, 2, 2, 2, 2])

    def test_missing_alignment(self):
        with pytest.raises(DataError, match="No alignment"):
            Alignments().for_utterance("ghost", 4)

    def test_save_and_load(self, temp_dir):
        alignments = Alignments({"b": [0, 1], "a": [2]})
        loaded = Alignments.load(alignments.save(temp_dir / "ali.jsonl"))
        assert sorted(loaded.targets) == ["a", "b"]
        assert "a-reverb" in loaded
