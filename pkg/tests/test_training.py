import pytest
import torch
from hypothesis import given, strategies as st

from istr.training import (CheckpointStore, EpochRecord, TrainLog, batch_indices, best_epoch, check_finite,
                           checkpoint_id, images_to_tensor, select_checkpoint)


def make_log(vals):
    log = TrainLog("accuracy")
    for i, v in enumerate(vals, start=1):
        log.append(EpochRecord(i, 1.0, 0.0, 1.0, v, checkpoint_id(i)))
    return log


@pytest.mark.parametrize("vals, expected", [([0.7, 0.9, 0.8], 2), ([0.9, 0.9], 1), ([0.1, 0.2, 0.3, 0.4], 4)])
def test_select_checkpoint_examples(vals, expected):
    assert select_checkpoint(make_log(vals)) == checkpoint_id(expected)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40))
def test_selected_epoch_dominates(vals):
    chosen = best_epoch(make_log(vals))
    assert all(chosen.val_score >= v for v in vals)
    assert chosen.epoch == vals.index(max(vals)) + 1


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        select_checkpoint(TrainLog())


def test_log_requires_consecutive_epochs():
    log = make_log([0.5])
    with pytest.raises(ValueError):
        log.append(EpochRecord(3, 0, 0, 0, 0))
    assert TrainLog.from_dict(log.to_dict()) == log


@pytest.mark.parametrize("on_disk", [False, True])
@given(vals=st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_store_keeps_best_and_last(tmp_path_factory, on_disk, vals):
    root = tmp_path_factory.mktemp("ck") if on_disk else None
    store = CheckpointStore(root)
    for i, v in enumerate(vals, start=1):
        store.put(checkpoint_id(i), {"epoch": i}, float(v))
    best = best_epoch(make_log(vals)).epoch
    assert store.best_id == checkpoint_id(best)
    assert store.last_id == checkpoint_id(len(vals))
    assert set(store.ids()) == {checkpoint_id(best), checkpoint_id(len(vals))}
    assert store.get(store.best_id)["epoch"] == best


def test_store_keep_all_and_missing():
    store = CheckpointStore(keep="all")
    for i in range(1, 4):
        store.put(checkpoint_id(i), {}, 0.0)
    assert len(store.ids()) == 3
    with pytest.raises(KeyError):
        store.get("epoch_9999")
    with pytest.raises(ValueError):
        CheckpointStore(keep="top3")


def test_check_finite():
    check_finite(torch.tensor(1.0), "ok")
    with pytest.raises(FloatingPointError):
        check_finite(torch.tensor(float("nan")), "step 3")


def test_batch_indices_cover_everything():
    g = torch.Generator().manual_seed(0)
    idx = torch.cat(list(batch_indices(10, 3, g)))
    assert sorted(idx.tolist()) == list(range(10))
    assert [len(b) for b in batch_indices(10, 3, shuffle=False)] == [3, 3, 3, 1]


def test_images_to_tensor():
    import numpy as np
    x = images_to_tensor([np.full((8, 6, 3), 255, np.uint8)], size=(4, 4))
    assert x.shape == (1, 3, 4, 4) and float(x.max()) == 1.0
    with pytest.raises(ValueError):
        images_to_tensor([np.zeros((4, 4), np.uint8)])
