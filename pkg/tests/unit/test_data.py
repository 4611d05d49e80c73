from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from diffdf.attacks import AttackConfig, AttackKind, Norm, PerturbationBudget
from diffdf.boxes import Box
from diffdf.data import (
    CropKind,
    CropSpec,
    DataConfig,
    PairDataset,
    PairEntry,
    PairManifest,
    SequenceAnnotation,
    audit_budgets,
    build_manifest,
    crop_region,
    depreprocess,
    ingest_external,
    load_sequences,
    make_synthetic_sequences,
    preprocess,
    sample_frames,
    save_png,
    write_sequences,
)
from diffdf.errors import ConfigError, DataError

SPECS = (
    CropSpec(CropKind.TEMPLATE, 1.0, 16),
    CropSpec(CropKind.SEARCH, 2.0, 16),
)
FRAME = np.zeros((4, 4, 3), np.uint8)


@pytest.fixture(scope="module")
def sequences():
    return make_synthetic_sequences(2, 12, canvas=48, seed=0, object_size=(8, 12))


def _gaussian_attack(seed: int = 0) -> AttackConfig:
    return AttackConfig(
        kind=AttackKind.GAUSSIAN,
        budget=PerturbationBudget(Norm.LINF, 0.06),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Image conversion
# ---------------------------------------------------------------------------


class TestConversion:
    def test_range_and_layout(self) -> None:
        """uint8 H x W x 3 becomes 3 x H x W in [-1, 1]."""
        arr = np.zeros((4, 5, 3), dtype=np.uint8)
        arr[0, 0] = 255
        x = preprocess(arr)
        assert x.shape == (3, 4, 5)
        assert float(x.min()) == -1.0
        assert float(x.max()) == 1.0

    def test_depreprocess_inverts_8bit(self) -> None:
        """Converting an 8-bit image to a tensor and back is lossless."""
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
        assert np.array_equal(depreprocess(preprocess(arr)), arr)

    def test_resize(self) -> None:
        """A size argument resizes bilinearly to a square."""
        arr = np.full((10, 20, 3), 128, dtype=np.uint8)
        x = preprocess(arr, 8)
        assert x.shape == (3, 8, 8)
        assert torch.allclose(x, torch.full_like(x, 128 / 127.5 - 1))

    def test_grayscale_is_expanded(self) -> None:
        """Grayscale arrays are repeated to three channels."""
        assert preprocess(np.zeros((4, 4), dtype=np.uint8)).shape == (3, 4, 4)

    def test_float_array_rejected(self) -> None:
        """Non-8-bit arrays raise DataError."""
        with pytest.raises(DataError, match=r"8-bit"):
            preprocess(np.zeros((4, 4, 3), dtype=np.float32))


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


class TestSequences:
    def test_synthetic_shapes(self, sequences) -> None:
        """Every frame is a canvas-sized image with a box inside it."""
        assert [s.name for s in sequences] == ["synthetic-000", "synthetic-001"]
        for seq in sequences:
            assert len(seq) == 12
            for index, box in enumerate(seq.boxes):
                assert seq.load_frame(index).shape == (48, 48, 3)
                assert 0 <= box.x and box.x + box.w <= 48
                assert 0 <= box.y and box.y + box.h <= 48
                assert 8 <= box.w <= 12

    def test_synthetic_is_seeded(self, sequences) -> None:
        """The same seed reproduces frames and boxes; another seed differs."""
        again = make_synthetic_sequences(2, 12, 48, 0, object_size=(8, 12))
        other = make_synthetic_sequences(2, 12, 48, 1, object_size=(8, 12))
        assert again[1].boxes == sequences[1].boxes
        assert np.array_equal(again[1].frames[5], sequences[1].frames[5])
        assert not np.array_equal(other[0].frames[0], sequences[0].frames[0])

    def test_object_size_must_fit(self) -> None:
        """Objects larger than the canvas are rejected."""
        with pytest.raises(ValueError, match=r"does not fit canvas"):
            make_synthetic_sequences(1, 2, canvas=16, object_size=(8, 20))

    def test_write_then_load(self, sequences, tmp_path) -> None:
        """Sequences written to disk load back with the same boxes and pixels."""
        write_sequences(sequences, tmp_path)
        loaded = load_sequences(tmp_path)
        assert [s.name for s in loaded] == [s.name for s in sequences]
        assert loaded[0].boxes == sequences[0].boxes
        assert np.array_equal(loaded[0].load_frame(3), sequences[0].frames[3])

    def test_missing_groundtruth(self, tmp_path) -> None:
        """A sequence directory without annotations raises DataError."""
        (tmp_path / "seq").mkdir()
        with pytest.raises(DataError, match=r"groundtruth.txt"):
            load_sequences(tmp_path)

    def test_frame_box_count_mismatch(self) -> None:
        """Frame and annotation counts must agree."""
        with pytest.raises(DataError, match=r"2 frames but 1 annotations"):
            SequenceAnnotation("s", [FRAME] * 2, [Box(0, 0, 2, 2)])

    def test_degenerate_box_rejected(self) -> None:
        """Zero-area boxes are rejected."""
        with pytest.raises(DataError, match=r"degenerate box at frame 0"):
            SequenceAnnotation("s", [FRAME], [Box(0, 0, 0, 2)])

    def test_sample_frames(self) -> None:
        """Every stride-th frame starting at 0."""
        seq = SequenceAnnotation("s", [None] * 25, [Box(0, 0, 1, 1)] * 25)
        assert sample_frames(seq, 10) == [0, 10, 20]
        with pytest.raises(ValueError):
            sample_frames(seq, 0)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


class TestCropRegion:
    def test_full_frame_crop_is_identity(self) -> None:
        """A box covering the frame at its own size reproduces the frame."""
        frame = torch.rand(3, 8, 8)
        out = crop_region(frame, Box(0, 0, 8, 8), CropSpec(CropKind.SEARCH, 1.0, 8))
        assert torch.allclose(out, frame, atol=1e-6)

    def test_context_factor_scales_side(self) -> None:
        """The covered side is sqrt(w*h) times the context factor."""
        spec = CropSpec(CropKind.SEARCH, 2.0, 16, context_amount=0.5)
        assert spec.side(Box(0, 0, 4, 4)) == pytest.approx(2.0 * 8.0)

    def test_outside_replicates_border(self) -> None:
        """Pixels beyond the frame repeat the nearest edge pixel."""
        frame = torch.zeros(1, 4, 4)
        frame[:, :, -1] = 1.0
        out = crop_region(frame, Box(3, 0, 4, 4), CropSpec(CropKind.SEARCH, 1.0, 4))
        assert torch.allclose(out[:, :, -1], torch.ones(1, 4))

    def test_degenerate_box_raises(self) -> None:
        """Zero-size boxes cannot be cropped."""
        with pytest.raises(ValueError, match=r"degenerate"):
            crop_region(torch.zeros(3, 4, 4), Box(0, 0, 0, 0), SPECS[0])


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


class TestBuildManifest:
    def test_layout_and_entries(self, sequences, tmp_path) -> None:
        """Each sampled frame yields one template and one search pair."""
        manifest = build_manifest(
            sequences, 5, SPECS, _gaussian_attack(), tmp_path, workers=2
        )
        assert len(manifest) == 2 * 3 * 2
        first = manifest.entries[0]
        assert first.clean_path == "clean/synthetic-000_00000_template.png"
        assert first.crop_kind is CropKind.TEMPLATE
        assert first.generator_meta["generator"] == "structured:gaussian"
        loaded = PairManifest.load(tmp_path)
        assert [e.to_dict() for e in loaded.entries] == [
            e.to_dict() for e in manifest.entries
        ]

    def test_deterministic_across_worker_counts(self, sequences, tmp_path) -> None:
        """Same seed gives byte-identical manifests and images for any pool size."""
        a = tmp_path / "a"
        b = tmp_path / "b"
        build_manifest(sequences, 5, SPECS, _gaussian_attack(3), a, workers=1)
        build_manifest(sequences, 5, SPECS, _gaussian_attack(3), b, workers=4)
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        for path in sorted((a / "adv").iterdir()):
            assert path.read_bytes() == (b / "adv" / path.name).read_bytes()

    def test_tracker_attack_pairs_pass_audit(self, sequences, tmp_path) -> None:
        """Tracker-attack pairs stay inside their budget after PNG storage."""
        attack = AttackConfig(
            kind=AttackKind.TRACKER,
            budget=PerturbationBudget(Norm.LINF, 0.06, steps=2, step_size=0.03),
        )
        manifest = build_manifest(sequences[:1], 10, SPECS, attack, tmp_path)
        audit = audit_budgets(manifest)
        assert audit.ok
        assert audit.checked == len(manifest)
        assert manifest.entries[1].generator_meta["target"] == "search"

    def test_gradient_attack_needs_extractor(self, sequences, tmp_path) -> None:
        """A gradient attack without a feature extractor is a config error."""
        attack = AttackConfig(kind=AttackKind.GRADIENT)
        with pytest.raises(ConfigError, match=r"feature extractor"):
            build_manifest(sequences[:1], 10, SPECS, attack, tmp_path)

    def test_external_missing_counterpart(self, sequences, tmp_path) -> None:
        """A missing external adversarial crop is reported before any work."""
        with pytest.raises(DataError, match=r"missing adversarial counterpart"):
            build_manifest(
                sequences,
                5,
                SPECS,
                _gaussian_attack(),
                tmp_path / "out",
                external_adv_dir=tmp_path,
            )

    def test_audit_detects_tampering(self, sequences, tmp_path) -> None:
        """Replacing an adversarial crop with another image is a violation."""
        manifest = build_manifest(
            sequences[:1], 10, SPECS, _gaussian_attack(), tmp_path
        )
        save_png(tmp_path / manifest.entries[0].adv_path, torch.ones(3, 16, 16))
        audit = audit_budgets(manifest)
        assert not audit.ok
        assert audit.violations == (manifest.entries[0].adv_path,)

    def test_dataset_tensors(self, sequences, tmp_path) -> None:
        """PairDataset stacks all pairs into N x C x H x W tensors."""
        manifest = build_manifest(
            sequences[:1], 10, SPECS, _gaussian_attack(), tmp_path
        )
        clean, adv = PairDataset(manifest).tensors()
        assert clean.shape == adv.shape == (4, 3, 16, 16)
        assert float((adv - clean).abs().max()) <= 0.06 + 1 / 127.5


class TestManifestIO:
    def test_wrong_schema_version(self, tmp_path) -> None:
        """Unknown schema versions are rejected."""
        (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 9}))
        with pytest.raises(DataError, match=r"schema_version 9"):
            PairManifest.load(tmp_path)

    def test_missing_manifest(self, tmp_path) -> None:
        """A directory without a manifest raises DataError."""
        with pytest.raises(DataError, match=r"does not exist"):
            PairManifest.load(tmp_path)

    def test_missing_file_fails_validation(self, tmp_path) -> None:
        """Entries pointing at missing files fail validation."""
        entry = PairEntry("clean/a.png", "adv/a.png", CropKind.SEARCH, "s", 0)
        PairManifest([entry]).write(tmp_path)
        with pytest.raises(DataError, match=r"missing file"):
            PairManifest.load(tmp_path)

    def test_malformed_entry(self) -> None:
        """An entry with a bad crop kind raises DataError."""
        with pytest.raises(DataError, match=r"malformed manifest entry"):
            PairEntry.from_dict({"clean_path": "a", "adv_path": "b", "crop_kind": "x"})


class TestIngestExternal:
    def test_parses_names(self, tmp_path) -> None:
        """Standard names are split into sequence, frame and crop kind."""
        clean, adv = tmp_path / "clean_in", tmp_path / "adv_in"
        for root in (clean, adv):
            save_png(root / "car_00010_template.png", torch.zeros(3, 8, 8))
            save_png(root / "loose.png", torch.zeros(3, 8, 8))
        manifest = ingest_external(clean, adv, tmp_path / "out")
        by_seq = {e.source_sequence: e for e in manifest.entries}
        assert by_seq["car"].frame_index == 10
        assert by_seq["car"].crop_kind is CropKind.TEMPLATE
        assert by_seq["loose"].crop_kind is CropKind.SEARCH
        assert audit_budgets(manifest).skipped == 2

    def test_missing_counterpart(self, tmp_path) -> None:
        """A clean image without an adversarial twin is a data error."""
        clean, adv = tmp_path / "c", tmp_path / "a"
        adv.mkdir()
        save_png(clean / "x.png", torch.zeros(3, 4, 4))
        with pytest.raises(DataError, match=r"missing adversarial counterpart x.png"):
            ingest_external(clean, adv, tmp_path / "out")


class TestDataConfig:
    def test_crop_specs_share_size(self) -> None:
        """Both crops use image_size; contexts differ."""
        template, search = DataConfig(image_size=24).crop_specs()
        assert template.output_size == search.output_size == 24
        assert search.context_factor == 2.0

    def test_object_range_checked(self) -> None:
        """object_min above object_max is rejected."""
        with pytest.raises(ConfigError, match=r"object_min"):
            DataConfig.from_dict({"object_min": 20, "object_max": 10})
