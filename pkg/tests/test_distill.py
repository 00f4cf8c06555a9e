"""Pseudo-label generation, cleanup, and serialization."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halo.backends import MockTextGen, TableTextGen
from halo.core_data import ImageMetadata
from halo.distill import (
    PROMPT_TEMPLATE,
    STATUS_FILTERED_EMPTY,
    STATUS_FILTERED_UNKNOWN,
    STATUS_VALID,
    GenerationError,
    PseudoLabel,
    build_prompt,
    clean_pseudolabel,
    common_labels,
    distill_scene,
    generate_pseudolabel,
    read_pseudolabels,
    write_pseudolabels,
)


class TestBuildPrompt:
    def test_question_then_metadata(self):
        meta = ImageMetadata(
            filename="img_12.jpg",
            caption="The western rose window",
            wiki_categories=("Windows", "Notre-Dame"),
        )
        prompt = build_prompt(meta, "Notre-Dame")
        question, description = prompt.split("\n", 1)
        assert question == PROMPT_TEMPLATE.format(building="Notre-Dame")
        assert description == "img_12.jpg; The western rose window; Windows; Notre-Dame"

    def test_empty_fields_skipped(self):
        meta = ImageMetadata(filename="", caption="only caption", wiki_categories=())
        assert build_prompt(meta, "B").endswith("\nonly caption")

    def test_empty_building_rejected(self):
        with pytest.raises(ValueError):
            build_prompt(ImageMetadata(caption="x"), "")


class TestCleanPseudolabel:
    def test_lowercases(self):
        assert clean_pseudolabel("Rose Window").cleaned == "rose window"

    def test_strips_leading_direction(self):
        assert clean_pseudolabel("West facade").cleaned == "facade"
        assert clean_pseudolabel("Northern tower").cleaned == "tower"

    def test_strips_stacked_directions(self):
        # compounds written as two words need repeated stripping
        assert clean_pseudolabel("north eastern minaret").cleaned == "minaret"
        assert clean_pseudolabel("southwestern portal").cleaned == "portal"

    @pytest.mark.parametrize(
        "word", ["unknown", "undefined", "undetermined", "unspecified", "unclear"]
    )
    def test_uncertainty_words_filtered(self, word):
        for raw in (word, word.capitalize(), f"{word}.", f"{word}, sorry"):
            pl = clean_pseudolabel(raw)
            assert pl.status == STATUS_FILTERED_UNKNOWN
            assert pl.cleaned == "" and not pl.valid

    def test_uncertainty_checked_after_direction_strip(self):
        assert clean_pseudolabel("west unknown").status == STATUS_FILTERED_UNKNOWN

    def test_uncertainty_first_token_only(self):
        assert clean_pseudolabel("unique portal").cleaned == "unique portal"

    def test_empty_and_direction_only(self):
        assert clean_pseudolabel("").status == STATUS_FILTERED_EMPTY
        assert clean_pseudolabel("   ").status == STATUS_FILTERED_EMPTY
        assert clean_pseudolabel("West").status == STATUS_FILTERED_EMPTY

    def test_raw_preserved_verbatim(self):
        pl = clean_pseudolabel("  North  Tower ")
        assert pl.raw == "  North  Tower "
        assert pl.cleaned == "tower"

    @given(st.text(max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, raw):
        first = clean_pseudolabel(raw)
        again = clean_pseudolabel(first.cleaned)
        if first.valid:
            assert again.cleaned == first.cleaned
        else:
            assert again.status == STATUS_FILTERED_EMPTY or not again.valid


class TestGenerate:
    def test_raw_verbatim(self):
        backend = TableTextGen({"west portal": "  The West Portal  "})
        assert generate_pseudolabel("west portal of X", backend) == "  The West Portal  "

    def test_backend_failure_wrapped(self):
        class Boom:
            beam_width = 4

            def generate(self, prompt):
                raise RuntimeError("no weights")

        with pytest.raises(GenerationError, match="img_3.jpg"):
            generate_pseudolabel("p", Boom(), image_id="img_3.jpg")


class TestDistillScene:
    def test_one_label_per_image_sorted(self, small_scene):
        _, _, manifest = small_scene
        labels = distill_scene(manifest, MockTextGen(seed=0))
        assert [pl.image_id for pl in labels] == sorted(r.id for r in manifest.images)

    def test_closeups_get_their_category(self, small_scene):
        _, spec, manifest = small_scene
        labels = {pl.image_id: pl for pl in distill_scene(manifest, MockTextGen())}
        for category in spec.categories:
            pl = labels[f"closeup_{category}_00.png"]
            assert pl.valid and pl.cleaned == category

    def test_deterministic(self, small_scene):
        _, _, manifest = small_scene
        a = distill_scene(manifest, MockTextGen(seed=0))
        b = distill_scene(manifest, MockTextGen(seed=0))
        assert a == b


class TestSerialization:
    def test_round_trip_includes_filtered(self, tmp_path):
        labels = [
            PseudoLabel("a.png", "West Portal", "portal", STATUS_VALID),
            PseudoLabel("b.png", "unknown", "", STATUS_FILTERED_UNKNOWN),
            PseudoLabel("c.png", "north", "", STATUS_FILTERED_EMPTY),
        ]
        path = tmp_path / "pl.jsonl"
        write_pseudolabels(labels, path)
        assert read_pseudolabels(path) == labels
        assert len(path.read_text().splitlines()) == 3


class TestCommonLabels:
    def test_top_n_by_count_then_lexicographic(self):
        labels = (
            [PseudoLabel(f"{i}", "x", "portal", STATUS_VALID) for i in range(3)]
            + [PseudoLabel(f"p{i}", "x", "dome", STATUS_VALID) for i in range(3)]
            + [PseudoLabel("q", "x", "window", STATUS_VALID)]
            + [PseudoLabel("r", "unknown", "", STATUS_FILTERED_UNKNOWN)]
        )
        assert common_labels(labels, top_n=2) == ["dome", "portal"]
        assert common_labels(labels, top_n=10) == ["dome", "portal", "window"]

    def test_filtered_excluded(self):
        labels = [PseudoLabel("a", "unknown", "", STATUS_FILTERED_UNKNOWN)]
        assert common_labels(labels) == []
