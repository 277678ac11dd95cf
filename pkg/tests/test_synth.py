"""Synthetic data: rendering rules, caption tagging, confusers, file layout."""

import numpy as np
import pytest

from mefa.data import tag_tokens
from mefa.synth import (
    ATTRIBUTE_SLOTS,
    AttributeCatalog,
    SyntheticSpec,
    attribute_regions,
    generate_dataset,
    identity_captions,
    load_dataset,
    render_identity_image,
    sample_identities,
    save_dataset,
)


def hamming(a, b):
    return sum(x != y for x, y in zip(a, b))


class TestIdentitySampling:
    def test_zero_confuser_rate_all_pairs_differ_in_two_slots(self):
        spec = SyntheticSpec(n_identities=30, confuser_rate=0.0, seed=5)
        idents = sample_identities(spec)
        assert len(idents) == 30
        for i in range(len(idents)):
            for j in range(i + 1, len(idents)):
                assert hamming(idents[i], idents[j]) >= 2

    def test_confuser_rate_adds_single_attribute_neighbors(self):
        spec = SyntheticSpec(n_identities=20, confuser_rate=0.2, seed=5)
        idents = sample_identities(spec)
        assert len(idents) == 20
        confusers = idents[16:]
        for conf in confusers:
            assert any(hamming(conf, base) == 1 for base in idents[:16])
        # no exact duplicates anywhere
        assert len(set(idents)) == 20

    def test_catalog_too_small_rejected(self):
        catalog = AttributeCatalog(upper_garments=["shirt"],
                                   lower_garments=["pants"],
                                   colors=["red", "blue"],
                                   accessories=["bag"],
                                   actions=["walking"])
        spec = SyntheticSpec(n_identities=50, catalog=catalog, seed=1)
        with pytest.raises(ValueError, match="too small"):
            sample_identities(spec)

    def test_deterministic_given_seed(self):
        a = sample_identities(SyntheticSpec(n_identities=12, seed=9))
        b = sample_identities(SyntheticSpec(n_identities=12, seed=9))
        assert a == b

    def test_swap_twins_exchange_colors_only(self):
        spec = SyntheticSpec(n_identities=20, confuser_rate=0.0,
                             swap_twin_rate=0.3, seed=4)
        idents = sample_identities(spec)
        twins = [(a, b) for i, a in enumerate(idents) for b in idents[:i]
                 if a == (b[2], b[1], b[0], b[3], b[4], b[5])]
        assert len(twins) == 6
        # base invariant still holds: every pair differs in >= 2 slots
        for i in range(len(idents)):
            for j in range(i + 1, len(idents)):
                assert hamming(idents[i], idents[j]) >= 2

    def test_twin_captions_share_token_multiset(self):
        base = ("red", "shirt", "blue", "pants", "bag", "walking")
        twin = ("blue", "shirt", "red", "pants", "bag", "walking")
        a = identity_captions(base, 0, 0)
        b = identity_captions(twin, 1, 0)
        assert sorted(a.tokens) == sorted(b.tokens)
        assert a.tokens != b.tokens


class TestRendering:
    def test_shirt_color_change_confined_to_upper_region(self):
        catalog = AttributeCatalog()
        base = ("red", "shirt", "blue", "pants", "bag", "walking")
        other = ("green", "shirt", "blue", "pants", "bag", "walking")
        img_a = render_identity_image(base, catalog)
        img_b = render_identity_image(other, catalog)
        diff = np.any(img_a != img_b, axis=2)
        rs, cs = attribute_regions()["upper"]
        outside = diff.copy()
        outside[rs, cs] = False
        assert diff[rs, cs].any()
        assert not outside.any()

    def test_values_in_unit_interval(self):
        catalog = AttributeCatalog()
        rng = np.random.Generator(np.random.PCG64(3))
        attrs = ("white", "coat", "black", "jeans", "hat", "running")
        img = render_identity_image(attrs, catalog, image_index=3, noise=0.3, rng=rng)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_noise_requires_generator(self):
        with pytest.raises(ValueError, match="generator"):
            render_identity_image(("red", "shirt", "blue", "pants", "bag", "walking"),
                                  AttributeCatalog(), noise=0.1)

    def test_different_garment_types_render_differently(self):
        catalog = AttributeCatalog()
        a = render_identity_image(("red", "shirt", "blue", "pants", "bag", "walking"),
                                  catalog)
        b = render_identity_image(("red", "jacket", "blue", "pants", "bag", "walking"),
                                  catalog)
        assert (a != b).any()


class TestCaptions:
    def test_pos_tags_match_catalog_roles(self):
        attrs = ("red", "shirt", "blue", "pants", "bag", "walking")
        for idx in (0, 1):
            cap = identity_captions(attrs, identity_id=3, caption_index=idx)
            for tok, tag in zip(cap.tokens, cap.pos_tags):
                if tok in ("red", "blue"):
                    assert tag == "ADJ"
                elif tok in ("shirt", "pants", "bag", "man"):
                    assert tag == "NOUN"
                elif tok == "walking":
                    assert tag == "VERB"

    def test_construction_tags_agree_with_builtin_tagger(self):
        attrs = ("red", "shirt", "blue", "pants", "bag", "walking")
        cap = identity_captions(attrs, identity_id=0, caption_index=0)
        assert cap.pos_tags == tag_tokens(cap.tokens)

    def test_two_templates_differ(self):
        attrs = ("red", "shirt", "blue", "pants", "bag", "walking")
        a = identity_captions(attrs, 0, 0)
        b = identity_captions(attrs, 0, 1)
        assert a.tokens != b.tokens


class TestDatasetGeneration:
    def test_counts_and_caption_alignment(self):
        spec = SyntheticSpec(n_identities=6, images_per_identity=3,
                             captions_per_image=2, seed=2)
        images, captions = generate_dataset(spec)
        assert len(images) == 18 and len(captions) == 36
        for j, cap in enumerate(captions):
            assert cap.identity_id == images[j // 2].identity_id

    def test_bit_identical_across_runs(self):
        spec = SyntheticSpec(n_identities=5, noise=0.1, seed=7)
        imgs_a, caps_a = generate_dataset(spec)
        imgs_b, caps_b = generate_dataset(spec)
        assert caps_a == caps_b
        for a, b in zip(imgs_a, imgs_b):
            np.testing.assert_array_equal(a.values, b.values)

    def test_noise_zero_images_exact(self):
        spec = SyntheticSpec(n_identities=3, noise=0.0, seed=7)
        images, _ = generate_dataset(spec)
        assert all(np.isfinite(img.values).all() for img in images)

    def test_save_load_roundtrip(self, tmp_path):
        spec = SyntheticSpec(n_identities=4, seed=3)
        images, captions = generate_dataset(spec)
        manifest = save_dataset(tmp_path / "data", images, captions, spec)
        got_images, got_captions, got_manifest = load_dataset(tmp_path / "data")
        assert got_captions == captions
        assert got_manifest["fingerprint"] == manifest["fingerprint"]
        for a, b in zip(got_images, images):
            np.testing.assert_array_equal(a.values, b.values)
            assert a.identity_id == b.identity_id

    def test_saved_files_byte_identical_across_runs(self, tmp_path):
        spec = SyntheticSpec(n_identities=4, noise=0.2, seed=3)
        for name in ("a", "b"):
            images, captions = generate_dataset(spec)
            save_dataset(tmp_path / name, images, captions, spec)
        for fname in ("images.npy", "image_ids.npy", "captions.jsonl",
                      "manifest.json"):
            assert ((tmp_path / "a" / fname).read_bytes()
                    == (tmp_path / "b" / fname).read_bytes()), fname

    def test_attribute_slots_cover_caption_words(self):
        assert len(ATTRIBUTE_SLOTS) == 6
