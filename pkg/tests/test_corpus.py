import logging
import sys
import textwrap

import numpy as np
import pytest

from istr.corpus import (Background, ImageRecord, Placement, ProvenanceStep, RenderError, Step, TextRegion,
                         apply_external_str, apply_str_oracle, erase_manual, import_external, load_corpus,
                         parse_annotation_line, render_background, render_scene, save_corpus, str_mask,
                         synthesize_corpus, write_image)
from istr.metrics import union_mask

CANVAS = (128, 128)


def scene(seed=7, texts=("TEA",), position="random"):
    return render_scene(Background(), [Placement(t, (14, 18), position) for t in texts], seed, CANVAS)


class TestRenderScene:
    def test_single_centered_placement(self):
        rec, twin = scene(texts=("TEA",), position="center")
        assert [r.transcript for r in rec.regions] == ["TEA"]
        assert twin.regions == []
        assert rec.steps == [Step.RENDERED_WITH_TEXT]
        assert twin.steps == [Step.RENDERED_TEXT_FREE]
        assert rec.twin is twin
        assert rec.pixels.shape == (128, 128, 3) and rec.pixels.dtype == np.uint8

    def test_deterministic(self):
        a, _ = scene(seed=7)
        b, _ = scene(seed=7)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        c, _ = scene(seed=8)
        assert a.pixels.tobytes() != c.pixels.tobytes()

    def test_three_placements(self):
        rec, twin = scene(texts=("TEA", "SHOP", "OK"))
        assert len(rec.regions) == 3 and len(twin.regions) == 0

    def test_twins_differ_only_inside_text_regions(self):
        rec, twin = scene(texts=("TEA", "SHOP", "OK"))
        diff = np.any(rec.pixels != twin.pixels, axis=2)
        inside = union_mask(rec.polygons(), rec.canvas)
        assert diff.any()
        assert not (diff & ~inside).any()

    def test_region_polygon_bounds_strokes(self):
        rec, twin = scene(texts=("WIDE",))
        diff = np.any(rec.pixels != twin.pixels, axis=2)
        ys, xs = np.nonzero(diff)
        poly = rec.regions[0].polygon
        assert poly[:, 0].min() <= xs.min() and xs.max() < poly[:, 0].max()
        assert poly[:, 1].min() <= ys.min() and ys.max() < poly[:, 1].max()

    def test_overflowing_placement_rejected(self, caplog):
        caplog.set_level(logging.WARNING, logger="istr.corpus")
        rec, _ = render_scene(None, [Placement("TEA", (14, 14)), Placement("X" * 40, (30, 30))], 1, CANVAS)
        assert len(rec.regions) == 1
        assert "larger than canvas" in caplog.text

    def test_no_valid_placement(self):
        with pytest.raises(RenderError):
            render_scene(None, [Placement("Y" * 50, (40, 40))], 1, CANVAS)
        with pytest.raises(RenderError):
            render_scene(None, [], 1, CANVAS)
        with pytest.raises(RenderError):
            render_scene(None, [Placement("TEA", (14, 14), position=(120, 120))], 1, CANVAS)

    def test_alphabet_enforced(self):
        with pytest.raises(RenderError):
            render_scene(None, [Placement("café", (14, 14))], 1, CANVAS, alphabet="abcdef")

    def test_default_canvas_is_512(self):
        rec, _ = render_scene(None, [Placement("TEA")], 1)
        assert rec.canvas == (512, 512)

    def test_image_background(self):
        bg = np.full((64, 64, 3), 90, np.uint8)
        rec, twin = render_scene(Background("image", image=bg), [Placement("A", (12, 12))], 0, (64, 64))
        assert (twin.pixels == 90).all()


class TestManualErase:
    def test_returns_twin_pixels(self):
        rec, twin = scene(texts=("TEA", "SHOP", "OK"))
        out = erase_manual(rec)
        assert np.array_equal(out.pixels, twin.pixels)
        assert out.steps == [Step.RENDERED_WITH_TEXT, Step.MANUAL_ERASE]
        assert len(out.regions) == 3 and all(r.erased for r in out.regions)
        assert rec.steps == [Step.RENDERED_WITH_TEXT]  # input untouched

    def test_missing_twin(self):
        rec, _ = scene()
        rec.twin = None
        with pytest.raises(ValueError, match="twin"):
            erase_manual(rec)

    def test_only_after_render(self):
        rec, _ = scene()
        with pytest.raises(ValueError):
            erase_manual(apply_str_oracle(rec))


class TestStrOracle:
    def test_text_free_input_unchanged(self):
        rec = render_background(None, 4, CANVAS)
        out = apply_str_oracle(rec, "diffusion_fill")
        assert np.array_equal(out.pixels, rec.pixels)
        assert out.steps[-1] == Step.STR_APPLIED
        assert out.provenance[-1].params["method"] == "diffusion_fill"

    def test_mean_fill_on_uniform_gray(self):
        gray = np.full((64, 64, 3), 128, np.uint8)
        rec, _ = render_scene(Background("image", image=gray), [Placement("TEA", (14, 14), "center")], 0, (64, 64))
        out = apply_str_oracle(rec, "mean_fill", mask_dilation=2)
        mask = str_mask(rec, 2)
        assert (out.pixels[mask] == 128).all()
        assert (out.pixels == 128).all()

    @pytest.mark.parametrize("method", ["mean_fill", "diffusion_fill", "patch_copy"])
    def test_locality_and_determinism(self, method):
        rec, _ = scene(texts=("TEA", "SHOP"))
        out = apply_str_oracle(rec, method, mask_dilation=2, seed=5)
        mask = str_mask(rec, 2)
        changed = np.any(out.pixels != rec.pixels, axis=2)
        assert not (changed & ~mask).any()
        assert changed.any()
        again = apply_str_oracle(rec, method, mask_dilation=2, seed=5)
        assert np.array_equal(out.pixels, again.pixels)
        assert all(r.erased for r in out.regions)

    def test_dilation_grows_mask(self):
        rec, _ = scene()
        assert str_mask(rec, 0).sum() < str_mask(rec, 2).sum() < str_mask(rec, 4).sum()

    def test_errors(self):
        rec, _ = scene()
        with pytest.raises(ValueError):
            apply_str_oracle(rec, "photoshop")
        with pytest.raises(ValueError):
            apply_str_oracle(rec, "mean_fill", mask_dilation=-1)

    def test_erased_regions_are_not_refilled(self):
        rec, _ = scene()
        erased = erase_manual(rec)
        out = apply_str_oracle(erased)
        assert np.array_equal(out.pixels, erased.pixels)
        assert out.steps == [Step.RENDERED_WITH_TEXT, Step.MANUAL_ERASE, Step.STR_APPLIED]

    def test_provenance_appends_one_step(self):
        rec, _ = scene()
        chain = [rec]
        for op in (erase_manual, apply_str_oracle, apply_str_oracle):
            chain.append(op(chain[-1]))
        for before, after in zip(chain, chain[1:]):
            assert after.provenance[:-1] == before.provenance
            assert len(after.provenance) == len(before.provenance) + 1


def test_external_str_hook(tmp_path):
    script = tmp_path / "eraser.py"
    script.write_text(textwrap.dedent("""
        import sys, cv2
        img = cv2.imread(sys.argv[1]); mask = cv2.imread(sys.argv[2], 0)
        img[mask > 0] = 0
        cv2.imwrite(sys.argv[3], img)
    """))
    rec, _ = scene(texts=("TEA",))
    out = apply_external_str(rec, [sys.executable, str(script), "{image}", "{mask}", "{output}"])
    mask = str_mask(rec, 2)
    assert (out.pixels[mask] == 0).all()
    assert np.array_equal(out.pixels[~mask], rec.pixels[~mask])
    assert out.provenance[-1].params["method"] == "external"


class TestImportExternal:
    def test_empty_directory(self, tmp_path):
        assert import_external(tmp_path) == []

    def test_parse_polygons(self, tmp_path):
        write_image(tmp_path / "images" / "a.png", np.zeros((40, 50, 3), np.uint8))
        write_image(tmp_path / "images" / "b.png", np.zeros((40, 50, 3), np.uint8))
        (tmp_path / "annotations").mkdir()
        (tmp_path / "annotations" / "a.txt").write_text(
            "1,1,10,1,10,8,1,8,TEA\n2,20,8,18,14,20,14,30,8,32,2,30,SHOP, INC\nnot,a,polygon\n")
        tally = {}
        recs = import_external(tmp_path, tally=tally)
        assert len(recs) == 2
        a = next(r for r in recs if r.id == "a")
        assert [len(r.polygon) for r in a.regions] == [4, 6]
        assert [r.transcript for r in a.regions] == ["TEA", "SHOP, INC"]
        assert sum(tally.values()) == 1
        b = next(r for r in recs if r.id == "b")
        assert b.regions == [] and b.steps == [Step.RENDERED_TEXT_FREE]

    def test_unreadable_image_skipped(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "images" / "broken.png").write_bytes(b"not a png")
        write_image(tmp_path / "images" / "ok.png", np.zeros((8, 8, 3), np.uint8))
        assert [r.id for r in import_external(tmp_path)] == ["ok"]

    def test_twins_and_resize(self, tmp_path):
        write_image(tmp_path / "all_images" / "a.png", np.full((100, 200, 3), 200, np.uint8))
        write_image(tmp_path / "all_gts" / "a.png", np.full((100, 200, 3), 10, np.uint8))
        (tmp_path / "all_labels").mkdir()
        (tmp_path / "all_labels" / "a.txt").write_text("0,0,100,0,100,50,0,50\n")
        (rec,) = import_external(tmp_path, canvas=(50, 50))
        assert rec.canvas == (50, 50)
        np.testing.assert_allclose(rec.regions[0].polygon, [[0, 0], [25, 0], [25, 25], [0, 25]])
        erased = erase_manual(rec)
        assert (erased.pixels == 10).all()

    def test_annotation_line_transcript_rules(self):
        r = parse_annotation_line("0,0,4,0,4,4,0,4")
        assert r.transcript == "" and len(r.polygon) == 4
        r = parse_annotation_line("0,0,4,0,4,4,0,4,7")
        assert r.transcript == "7"
        with pytest.raises(ValueError):
            parse_annotation_line("0,0,4,0")


def test_corpus_round_trip(tmp_path, small_corpus):
    recs = small_corpus[:3] + [apply_str_oracle(small_corpus[0])]
    save_corpus(recs, tmp_path)
    loaded = {r.id: r for r in load_corpus(tmp_path)}
    assert set(loaded) == {r.id for r in recs}
    for r in recs:
        got = loaded[r.id]
        assert np.array_equal(got.pixels, r.pixels)
        assert got.provenance == r.provenance
        assert [x.erased for x in got.regions] == [x.erased for x in r.regions]
        assert got.test_pool == r.test_pool
        assert (got.twin is None) == (r.twin is None)
    assert np.array_equal(loaded[recs[0].id].twin.pixels, recs[0].twin.pixels)


def test_synthesize_corpus_pools(small_corpus):
    with_text = [r for r in small_corpus if r.steps == [Step.RENDERED_WITH_TEXT]]
    free = [r for r in small_corpus if r.steps == [Step.RENDERED_TEXT_FREE]]
    assert len(with_text) == 16 and len(free) == 16
    assert sum(r.test_pool for r in with_text) == 4
    assert sum(r.test_pool for r in free) == 4
    assert all(r.twin is not None for r in with_text)
    assert len({r.id for r in small_corpus}) == len(small_corpus)


def test_image_record_invariants():
    rec = ImageRecord("x", np.zeros((4, 4, 3), np.uint8), [TextRegion([(0, 0), (1, 0), (1, 1)], "A")],
                      [ProvenanceStep(Step.RENDERED_WITH_TEXT)])
    assert rec.source_id == "x"
    assert isinstance(rec.provenance, tuple)
