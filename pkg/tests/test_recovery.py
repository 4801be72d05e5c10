import string
import sys
import textwrap

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from istr.corpus import Background, Placement, Step, apply_str_oracle, render_scene, str_mask
from istr.recovery import (DEFAULT_ALPHABET, RecognizerModel, Recognizer, RecoveryInstance, RecoveryTrainConfig,
                           SubprocessReader, build_recovery_set, crop_region, evaluate_recovery, filter_latin,
                           load_recovery_set, save_recovery_set, train_recovery)

UPPER = string.ascii_uppercase


@pytest.fixture(scope="module")
def pairs(small_corpus):
    with_text = [r for r in small_corpus if r.regions]
    return with_text, [apply_str_oracle(r, "mean_fill", 2) for r in with_text]


class EchoReader:
    """Looks up the label by crop bytes; stands in for a perfect recognizer."""

    def __init__(self, instances):
        self.table = {i.crop.tobytes(): i.pseudo_gt for i in instances}

    def read(self, crop):
        return self.table[crop.tobytes()], 1.0


def test_filter_latin_examples():
    assert filter_latin("TEA&SCONES")
    assert not filter_latin("café")
    assert filter_latin("")
    assert not filter_latin("店")


@given(st.text(alphabet=DEFAULT_ALPHABET + "éü店 ", max_size=12))
def test_filter_latin_is_characterwise(text):
    assert filter_latin(text) == all(filter_latin(ch) for ch in text)


def test_crop_geometry():
    img = np.zeros((100, 100, 3), np.uint8)
    poly = [(10, 10), (30, 10), (30, 20), (10, 20)]
    assert crop_region(img, poly, padding=0, target_height=32).shape == (32, 64, 3)
    assert crop_region(img, [(0, 0), (5, 0), (5, 5), (0, 5)], padding=4, target_height=None).shape == (9, 9, 3)
    with pytest.raises(ValueError):
        crop_region(img, [(120, 120), (130, 120), (130, 130)], padding=2)


def test_crops_differ_only_inside_mask():
    rec, _ = render_scene(Background(), [Placement("TEA", (14, 14), "center")], 2, (96, 96))
    out = apply_str_oracle(rec, "diffusion_fill", 2)
    poly = rec.regions[0].polygon
    before = crop_region(rec.pixels, poly, 4, None)
    after = crop_region(out.pixels, poly, 4, None)
    mask = crop_region(np.repeat(str_mask(rec, 2)[..., None], 3, axis=2).astype(np.uint8), poly, 4, None)[..., 0]
    diff = np.any(before != after, axis=2)
    assert diff.any() and not (diff & (mask == 0)).any()


def test_build_synthetic_truth(pairs):
    with_text, str_ed = pairs
    inst = build_recovery_set(with_text, str_ed, alphabet=UPPER, seed=1)
    by_key = {(r.source_id, i): reg.transcript for r in with_text for i, reg in enumerate(r.regions)}
    assert len(inst) == len(by_key)
    for i in inst:
        assert i.pseudo_gt == by_key[(i.source_image_id, i.region_index)]
        assert Step.STR_APPLIED.value in [p.kind.value for p in i.provenance]
        assert i.crop.shape[0] == 32
    test_ids = {r.source_id for r in with_text if r.test_pool}
    assert all((i.split == "test") == (i.source_image_id in test_ids) for i in inst)
    assert {i.split for i in inst} == {"train", "val", "test"}


def test_build_filters_and_tallies(pairs):
    with_text, str_ed = pairs

    class Reader:
        def __init__(self):
            self.n = 0

        def read(self, crop):
            self.n += 1
            if self.n % 4 == 1:
                return "店", 0.9
            if self.n % 4 == 2:
                return "", 0.1
            if self.n % 4 == 3:
                raise RuntimeError("ocr crashed")
            return "OK", 0.8

    tally = {}
    inst = build_recovery_set(with_text, str_ed, Reader(), tally=tally)
    n_regions = sum(len(r.regions) for r in with_text)
    assert tally["out_of_alphabet"] + tally["empty"] + tally["reader_failed"] + len(inst) == n_regions
    assert all(i.pseudo_gt == "OK" for i in inst)


def test_build_rejects_misaligned_or_unerased(pairs):
    with_text, str_ed = pairs
    with pytest.raises(ValueError, match="removed-text"):
        build_recovery_set(with_text, with_text)
    with pytest.raises(ValueError, match="source id"):
        build_recovery_set(with_text[1:], str_ed[:1])


def test_subprocess_reader(tmp_path):
    script = tmp_path / "ocr.py"
    script.write_text(textwrap.dedent("""
        import sys
        print("HELLO\\t0.75")
    """))
    reader = SubprocessReader([sys.executable, str(script), "{image}"])
    assert reader.read(np.zeros((8, 8, 3), np.uint8)) == ("HELLO", 0.75)
    failing = SubprocessReader([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(RuntimeError):
        failing.read(np.zeros((8, 8, 3), np.uint8))


def test_save_load_round_trip(tmp_path, pairs):
    inst = build_recovery_set(*pairs, alphabet=UPPER)
    save_recovery_set(inst, tmp_path)
    loaded = load_recovery_set(tmp_path)
    assert [(i.key, i.pseudo_gt, i.split) for i in loaded] == [(i.key, i.pseudo_gt, i.split) for i in inst]
    assert all(np.array_equal(a.crop, b.crop) for a, b in zip(inst, loaded))


def test_encode_decode_round_trip():
    cfg = RecoveryTrainConfig(alphabet=UPPER, max_len=6)
    model = RecognizerModel(Recognizer(26, 6), cfg)
    y = model.encode(["TEA", "SHOPS", ""])
    logits = torch.nn.functional.one_hot(y, 27).float() * 20
    assert [t for t, _ in model.decode(logits)] == ["TEA", "SHOPS", ""]


def test_train_recovery_short_run(pairs):
    inst = build_recovery_set(*pairs, alphabet=UPPER)
    cfg = RecoveryTrainConfig(learning_rate=1e-3, batch_size=8, epochs=3, alphabet=UPPER, max_len=8)
    res = train_recovery(inst, cfg)
    assert len(res.log) == 3
    assert res.best_id in {"epoch_0001", "epoch_0002", "epoch_0003"}
    assert res.last_id == "epoch_0003"
    val = res.log.column("val_score")
    assert max(val) == val[int(res.best_id[-4:]) - 1]
    report = evaluate_recovery(inst, res.best(), res.last())
    table = report.metrics["table"]
    assert table["val"]["best"]["text_accuracy"] >= table["val"]["last"]["text_accuracy"]
    for split in table.values():
        for cell in split.values():
            assert 0 <= cell["text_accuracy"] <= 100 and 0 <= cell["char_accuracy"] <= 100


def test_train_recovery_validates_alphabet(pairs):
    inst = build_recovery_set(*pairs, alphabet=UPPER)
    inst[0].pseudo_gt = "TEA4"
    inst[0].split = "train"
    with pytest.raises(ValueError, match=inst[0].key):
        train_recovery(inst, RecoveryTrainConfig(epochs=1, alphabet=UPPER))
    with pytest.raises(ValueError):
        train_recovery(inst[:1], RecoveryTrainConfig(epochs=1, alphabet=UPPER))


def test_echo_reader_scores_perfectly(pairs):
    inst = build_recovery_set(*pairs, alphabet=UPPER)
    echo = EchoReader(inst)
    report = evaluate_recovery(inst, echo, echo)
    for split in report.metrics["table"].values():
        for cell in split.values():
            assert cell["text_accuracy"] == 100.0 and cell["char_accuracy"] == 100.0


def test_config_validation():
    with pytest.raises(ValueError):
        RecoveryTrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        RecoveryTrainConfig(alphabet="AA")
    cfg = RecoveryTrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.optimizer) == (8.4e-5, 128, 200, "adamw")
