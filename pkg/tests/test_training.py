from dataclasses import replace

import numpy as np
import pytest

from warmcap.corpus import build_vocab
from warmcap.decoder import DecoderConfig
from warmcap.encoder import PRESETS
from warmcap.training.checkpoint import CheckpointError, FingerprintMismatch
from warmcap.training.data import Split, batches, encode_reports, teacher_forcing_batch
from warmcap.training.finetune import (
    EarlyStopping,
    TrainConfig,
    build_captioner,
    epochs_to_reach,
    finetune,
    load_captioner,
    decode_split,
    parameter_groups,
    warm_start,
)
from warmcap.training.pretrain import (
    PretrainConfig,
    majority_accuracy,
    mask_tokens,
    perplexity,
    pretrain_decoder_lm,
    pretrain_decoder_mlm,
    pretrain_encoder_classification,
)

ENC = PRESETS["micro"]


@pytest.fixture(scope="module")
def splits(small_dataset):
    return Split.load(small_dataset, "train", ENC), Split.load(small_dataset, "val", ENC)


@pytest.fixture(scope="module")
def vocab(splits):
    return build_vocab(splits[0].reports)


@pytest.fixture(scope="module")
def dec(vocab):
    return DecoderConfig(vocab_size=len(vocab), layers=1, hidden=16, heads=2, ff_width=32, max_length=64, dropout=0.0)


# -- early stopping -----------------------------------------------------------


def test_early_stopping_on_a_plateau():
    stop = EarlyStopping(patience=3, min_delta=1e-4)
    flags = [stop.update(v) for v in [0.1, 0.2, 0.2, 0.20005, 0.19]]
    assert flags == [False, False, False, False, True]
    assert (stop.best, stop.best_epoch) == (0.2, 2)


def test_improvement_beyond_min_delta_resets_patience():
    stop = EarlyStopping(patience=2, min_delta=1e-4)
    flags = [stop.update(v) for v in [0.1, 0.1, 0.1002, 0.1002, 0.1002]]
    assert flags == [False, False, False, False, True]
    assert stop.best_epoch == 3


def test_epochs_to_reach():
    hist = [{"epoch": 1, "val_cider": 0.1}, {"epoch": 2, "val_cider": 0.3}]
    assert epochs_to_reach(hist, 0.25) == 2
    assert epochs_to_reach(hist, 0.5) is None


# -- config and parameter groups ----------------------------------------------


def test_train_config_checks():
    with pytest.raises(ValueError):
        TrainConfig(monitor="val_loss")
    with pytest.raises(ValueError):
        TrainConfig(lr_encoder=0)
    with pytest.raises(ValueError):
        TrainConfig(val_beam=0)


def test_encoder_gets_its_own_learning_rate(vocab, dec):
    model = build_captioner(ENC, dec, vocab, 0)
    groups = {g.name: g for g in parameter_groups(model, TrainConfig())}
    assert groups["encoder"].lr == 1e-5 and groups["other"].lr == 1e-4
    assert all(n.startswith("encoder.") for n, _ in groups["encoder"].params)
    names = {n for g in groups.values() for n, _ in g.params}
    assert names == {n for n, _ in model.named_parameters()}
    assert any(n.startswith("projection.") for n, _ in groups["other"].params)
    assert any("crossattention" in n for n, _ in groups["other"].params)


# -- data -----------------------------------------------------------------------


def test_split_images_shape_and_determinism(splits):
    train, _ = splits
    a = train.images([0, 1])
    assert a.shape == (2, 1, 3, 8, 8)
    assert np.array_equal(a, train.images([0, 1]))
    b = train.images([0, 1], np.random.default_rng(0))
    assert np.array_equal(b, train.images([0, 1], np.random.default_rng(0)))
    assert not np.array_equal(a, b)


def test_split_labels_match_annotations(splits):
    train, _ = splits
    y = train.labels()
    assert y.shape == (len(train), 14)
    assert set(np.unique(y)) <= {0.0, 1.0}


def test_subset_keeps_rows_aligned(splits):
    train, _ = splits
    sub = train.subset([3, 1])
    assert sub.ids == [train.ids[3], train.ids[1]]
    assert np.array_equal(sub.resized[0], train.resized[3])


def test_from_arrays_labels_reports(rng):
    images = rng.integers(0, 256, size=(2, 1, 20, 20)).astype(np.uint8)
    split = Split.from_arrays(images, ["No pneumothorax.", "There is a pneumothorax."], ENC)
    assert split.reports == ["no pneumothorax .", "there is a pneumothorax ."]
    assert split.labels()[:, 8].tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        Split.from_arrays(images, ["a"], ENC)


def test_teacher_forcing_shift(vocab):
    seqs = [[7, 8, 9], [7]]
    inputs, targets = teacher_forcing_batch(seqs, vocab, 64)
    b, e, p = vocab.bos_id, vocab.eos_id, vocab.pad_id
    assert inputs.tolist() == [[b, 7, 8, 9], [b, 7, p, p]]
    assert targets.tolist() == [[7, 8, 9, e], [7, e, p, p]]


def test_teacher_forcing_clips_to_context(vocab):
    inputs, targets = teacher_forcing_batch([list(range(10, 30))], vocab, 5)
    assert inputs.shape == (1, 5)
    assert targets[0, -1] == vocab.eos_id


def test_batches_partition_the_indices(rng):
    got = np.concatenate(list(batches(37, 16, rng)))
    assert sorted(got.tolist()) == list(range(37))
    assert [len(b) for b in batches(37, 16)] == [16, 16, 5]


def test_masking_leaves_bos_and_eos(vocab):
    seqs = [[7, 8, 9, 10]]
    inputs, targets = mask_tokens(seqs, vocab, 1.0, np.random.default_rng(0), 64)
    assert inputs[0].tolist() == [vocab.bos_id] + [vocab.mask_id] * 4 + [vocab.eos_id]
    assert targets[0].tolist() == [vocab.pad_id, 7, 8, 9, 10, vocab.pad_id]
    inputs, targets = mask_tokens(seqs, vocab, 0.0, np.random.default_rng(0), 64)
    assert (targets == vocab.pad_id).all()


# -- pretraining ------------------------------------------------------------------


def test_lm_pretraining_lowers_perplexity(splits, vocab, dec):
    train, val = splits
    before = pretrain_decoder_lm(dec, train.reports, vocab, PretrainConfig(epochs=0))
    after = pretrain_decoder_lm(dec, train.reports, vocab, PretrainConfig(epochs=3))
    seqs = encode_reports(val.reports, vocab)
    assert perplexity(after.model, seqs, vocab) < perplexity(before.model, seqs, vocab)
    ck = after.checkpoint
    assert ck.task == "lm" and ck.metadata["component"] == "decoder"
    assert not any("crossattention" in n for n in ck.params)
    assert len(after.history) == 3


def test_lm_pretraining_is_deterministic(splits, vocab, dec):
    a = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=1, seed=4))
    b = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=1, seed=4))
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


def test_mlm_pretraining_checkpoint(splits, vocab, dec):
    res = pretrain_decoder_mlm(dec, splits[0].reports, vocab, PretrainConfig(epochs=1), val_reports=splits[1].reports)
    assert res.checkpoint.task == "mlm"
    assert 0.0 <= res.history[0]["val_mask_accuracy"] <= 1.0


def test_pretraining_vocab_must_match(splits, vocab, dec):
    with pytest.raises(ValueError, match="vocab"):
        pretrain_decoder_lm(replace(dec, vocab_size=3), splits[0].reports, vocab, PretrainConfig(epochs=0))


def test_encoder_pretraining_checkpoint(splits):
    train, val = splits
    res = pretrain_encoder_classification(ENC, train, PretrainConfig(epochs=2), val=val)
    assert res.checkpoint.task == "classification"
    assert res.checkpoint.metadata["component"] == "encoder"
    assert not any(n.startswith("head") for n in res.checkpoint.params)
    assert 0.0 <= res.history[-1]["val_accuracy"] <= 1.0
    assert 0.5 <= majority_accuracy(val) <= 1.0


# -- warm starting --------------------------------------------------------------


def test_decoder_warm_start_keeps_fresh_cross_attention(splits, vocab, dec):
    ck = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=1)).checkpoint
    model = build_captioner(ENC, dec, vocab, 3)
    fresh = {n: p.data.copy() for n, p in model.named_parameters()}
    loaded = warm_start(model, vocab, decoder_ckpt=ck)
    assert set(loaded["decoder"]) == set(ck.params)
    for name, p in model.decoder.named_parameters():
        if "crossattention" in name or "ln_cross_attn" in name:
            assert np.array_equal(p.data, fresh["decoder." + name])
        else:
            assert np.array_equal(p.data, ck.params[name].astype(np.float64))
    assert np.array_equal(model.projection.weight.data, fresh["projection.weight"])


def test_encoder_warm_start(splits, vocab, dec):
    ck = pretrain_encoder_classification(ENC, splits[0], PretrainConfig(epochs=1)).checkpoint
    model = build_captioner(ENC, dec, vocab, 3)
    warm_start(model, vocab, encoder_ckpt=ck)
    for name, p in model.encoder.named_parameters():
        assert np.array_equal(p.data, ck.params[name].astype(np.float64))


def test_warm_start_refuses_the_wrong_architecture(splits, vocab, dec):
    ck = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=0)).checkpoint
    model = build_captioner(ENC, replace(dec, hidden=32), vocab, 0)
    with pytest.raises(FingerprintMismatch, match="hidden"):
        warm_start(model, vocab, decoder_ckpt=ck)


def test_warm_start_refuses_a_different_vocabulary(splits, vocab, dec):
    ck = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=0)).checkpoint
    other = build_vocab(splits[0].reports + ["zzz zzz zzz"])
    model = build_captioner(ENC, replace(dec, vocab_size=len(other)), other, 0)
    with pytest.raises(CheckpointError, match="vocabulary"):
        warm_start(model, other, decoder_ckpt=ck)


def test_warm_start_refuses_swapped_components(splits, vocab, dec):
    enc_ck = pretrain_encoder_classification(ENC, splits[0], PretrainConfig(epochs=0)).checkpoint
    with pytest.raises(CheckpointError, match="decoder"):
        warm_start(build_captioner(ENC, dec, vocab, 0), vocab, decoder_ckpt=enc_ck)


# -- fine-tuning -------------------------------------------------------------------


def test_finetune_bookkeeping(splits, vocab, dec, tmp_path):
    train, val = splits
    cfg = TrainConfig(max_epochs=3, seed=1, lr_other=1e-3)
    res = finetune(build_captioner(ENC, dec, vocab, 1), train, val, vocab, cfg, history_path=tmp_path / "h.jsonl")
    assert 1 <= len(res.history) <= 3
    ciders = [h["val_cider"] for h in res.history]
    assert res.best_epoch == int(np.argmax(ciders)) + 1
    assert res.best_val_cider == max(ciders)
    assert res.checkpoint.metadata["epoch"] == res.best_epoch
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == len(res.history)
    assert '"fingerprint"' in lines[0] and '"seed": 1' in lines[0]


def test_finetune_is_deterministic(splits, vocab, dec):
    train, val = splits
    cfg = TrainConfig(max_epochs=1, seed=2)
    a = finetune(build_captioner(ENC, dec, vocab, 2), train, val, vocab, cfg)
    b = finetune(build_captioner(ENC, dec, vocab, 2), train, val, vocab, cfg)
    assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


def test_finetune_stops_after_patience_on_a_plateau(splits, vocab, dec):
    train, val = splits
    # learning rates this small leave the greedy outputs unchanged, so validation CIDEr is flat
    cfg = TrainConfig(max_epochs=10, patience=2, lr_encoder=1e-14, lr_other=1e-14)
    res = finetune(build_captioner(ENC, dec, vocab, 0), train, val, vocab, cfg)
    assert len(set(h["val_cider"] for h in res.history)) == 1
    assert res.stopped_epoch == 3
    assert res.best_epoch == 1


def test_checkpoint_reloads_to_the_same_outputs(splits, vocab, dec):
    train, val = splits
    res = finetune(build_captioner(ENC, dec, vocab, 5), train, val, vocab, TrainConfig(max_epochs=1, lr_other=1e-3))
    model, vocab2 = load_captioner(res.checkpoint)
    assert vocab2 == vocab
    ref = build_captioner(ENC, dec, vocab, 5)
    from warmcap.training.checkpoint import load_into

    load_into(ref, res.checkpoint, ref.fingerprint)
    assert decode_split(model, val, vocab2) == decode_split(ref, val, vocab)


def test_load_captioner_needs_a_captioner_checkpoint(splits, vocab, dec):
    ck = pretrain_decoder_lm(dec, splits[0].reports, vocab, PretrainConfig(epochs=0)).checkpoint
    with pytest.raises(CheckpointError, match="captioner"):
        load_captioner(ck)
