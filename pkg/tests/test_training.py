"""Training stages, determinism, checkpointing, and protocols."""
import numpy as np
import pytest

from pointar import data as D
from pointar import training as TR
from pointar.exceptions import ConfigMismatchError, FormatError, NumericError
from pointar.model import ModelConfig
from pointar.nncore.optim import LRSchedule, cosine_lr
from pointar.sequencer import SequencerConfig


SEQ = SequencerConfig(num_points=128, num_patches=8, points_per_patch=8, channels=24)
MDL = ModelConfig(
    channels=24, heads=4, extractor_depth=2, generator_depth=1,
    points_per_patch=8, num_classes=5,
)


@pytest.fixture(scope="module")
def pool_a():
    return D.generate_dataset("A", 24, seed=7, num_points=128)


@pytest.fixture(scope="module")
def pool_b():
    return D.generate_dataset("B", 40, seed=8, num_points=128)


def fresh_state(seed=0, dtype="float64", mdl=MDL, seq=SEQ):
    return TR.new_state(mdl, seq, seed=seed, dtype=dtype)


def run_pretrain(records, epochs=2, seed=0, dtype="float64", **kw):
    state = fresh_state(seed=seed, dtype=dtype)
    cfg = TR.PretrainConfig(epochs=epochs, batch_size=8, dtype=dtype, **kw)
    return TR.pretrain(records, state, cfg)


# -- pretrain -----------------------------------------------------------------


def test_pretrain_zero_epochs_keeps_initialization(pool_a):
    state = fresh_state()
    before = {k: v.data.copy() for k, v in state.params.items()}
    out, log = TR.pretrain(pool_a, state, TR.PretrainConfig(epochs=0, batch_size=8, dtype="float64"))
    assert not log.steps
    for name, val in before.items():
        assert np.array_equal(out.params[name].data, val)


def test_pretrain_loss_decreases_at_small_scale(pool_a):
    state, log = run_pretrain(pool_a, epochs=6)
    losses = [r.loss_total for r in log.steps]
    assert np.mean(losses[-3:]) < 0.7 * np.mean(losses[:3])


def test_pretrain_vanilla_mask_run_completes(pool_a):
    state, log = run_pretrain(pool_a, epochs=1, dual_mask_ratio=0.0)
    assert len(log.steps) == 3
    assert all(np.isfinite(r.loss_total) for r in log.steps)


def test_pretrain_empty_dataset_rejected():
    with pytest.raises(ValueError):
        TR.pretrain([], fresh_state(), TR.PretrainConfig(dtype="float64"))


def test_pretrain_lr_trace_matches_cosine_schedule(pool_a):
    state, log = run_pretrain(pool_a, epochs=4)
    steps_per_epoch = 3
    sched = LRSchedule(
        base_lr=1e-3,
        warmup_steps=int(round(0.05 * 4 * steps_per_epoch)),
        total_steps=4 * steps_per_epoch,
    )
    for row in log.steps:
        assert row.lr == pytest.approx(cosine_lr(row.step - 1, sched), abs=0, rel=0)


def test_pretrain_metric_steps_strictly_increasing(pool_a):
    _, log = run_pretrain(pool_a, epochs=3)
    steps = [r.step for r in log.steps]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)


def test_pretrain_aborts_on_non_finite_loss(pool_a):
    state = fresh_state()
    state.params["pred.fc2.w"].data[:] = 1e200  # drives the loss to overflow
    with pytest.raises(NumericError) as err:
        TR.pretrain(pool_a, state, TR.PretrainConfig(epochs=1, batch_size=8, dtype="float64"))
    assert "batch records" in str(err.value)


def test_pretrain_max_steps_stops_early(pool_a):
    state, log = run_pretrain(pool_a, epochs=5, max_steps=4)
    assert len(log.steps) == 4


def test_pretrain_augment_runs_and_differs(pool_a):
    plain, plain_log = run_pretrain(pool_a, epochs=1)
    auged, aug_log = run_pretrain(pool_a, epochs=1, augment=True)
    assert len(aug_log.steps) == len(plain_log.steps)
    assert aug_log.steps[0].loss_total != plain_log.steps[0].loss_total


# -- determinism and persistence -----------------------------------------------


def test_twin_runs_bit_identical(tmp_path, pool_a):
    a, loga = run_pretrain(pool_a, epochs=3)
    b, logb = run_pretrain(pool_a, epochs=3)
    TR.save_checkpoint(tmp_path / "a.pgck", a)
    TR.save_checkpoint(tmp_path / "b.pgck", b)
    assert (tmp_path / "a.pgck").read_bytes() == (tmp_path / "b.pgck").read_bytes()
    loga.to_csv(tmp_path / "a.csv")
    logb.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_checkpoint_round_trip_byte_identical(tmp_path, pool_a):
    state, _ = run_pretrain(pool_a, epochs=2)
    TR.save_checkpoint(tmp_path / "one.pgck", state)
    loaded = TR.load_checkpoint(tmp_path / "one.pgck")
    TR.save_checkpoint(tmp_path / "two.pgck", loaded)
    assert (tmp_path / "one.pgck").read_bytes() == (tmp_path / "two.pgck").read_bytes()
    assert loaded.step == state.step
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state


def test_resume_equals_uninterrupted(tmp_path, pool_a):
    cfg = TR.PretrainConfig(epochs=4, batch_size=8, dtype="float64", checkpoint_every=2)
    full, full_log = TR.pretrain(pool_a, fresh_state(), cfg, outdir=tmp_path / "full")
    mid = TR.load_checkpoint(tmp_path / "full" / "checkpoint_epoch0002.pgck")
    resumed, resumed_log = TR.pretrain(pool_a, mid, cfg)
    for name in full.params.names():
        assert np.array_equal(full.params[name].data, resumed.params[name].data)
    tail = [(r.step, r.lr, r.loss_total) for r in full_log.steps[-6:]]
    cont = [(r.step, r.lr, r.loss_total) for r in resumed_log.steps]
    assert tail == cont


def test_checkpoint_config_mismatch_rejected(tmp_path, pool_a):
    state, _ = run_pretrain(pool_a, epochs=1)
    TR.save_checkpoint(tmp_path / "ck.pgck", state)
    other = ModelConfig(
        channels=48, heads=4, extractor_depth=2, generator_depth=1,
        points_per_patch=8, num_classes=5,
    )
    with pytest.raises(ConfigMismatchError):
        TR.load_checkpoint(tmp_path / "ck.pgck", expect_model=other)


def test_checkpoint_bad_magic_and_truncation(tmp_path, pool_a):
    state, _ = run_pretrain(pool_a, epochs=1)
    path = tmp_path / "ck.pgck"
    TR.save_checkpoint(path, state)
    raw = path.read_bytes()
    (tmp_path / "magic.pgck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        TR.load_checkpoint(tmp_path / "magic.pgck")
    (tmp_path / "trunc.pgck").write_bytes(raw[:-9])
    with pytest.raises(FormatError):
        TR.load_checkpoint(tmp_path / "trunc.pgck")


def test_metrics_csv_format(tmp_path, pool_a):
    _, log = run_pretrain(pool_a, epochs=1)
    log.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss_total,loss_cd1,loss_cd2,loss_ce"
    assert len(lines) == 1 + len(log.steps)
    first = lines[1].split(",")
    assert int(first[0]) == 1 and len(first) == 6


# -- supervised stages ------------------------------------------------------------


def test_post_pretrain_zero_epochs_identity(pool_a, pool_b):
    state, _ = run_pretrain(pool_a, epochs=1)
    out, _ = TR.post_pretrain(pool_b, state, TR.PostPretrainConfig(epochs=0, batch_size=8))
    for name in state.params.names():
        assert np.array_equal(out.params[name].data, state.params[name].data)
    # and the input state itself was not mutated by the clone
    assert out is not state


def test_post_pretrain_improves_over_step_zero(pool_b):
    state = fresh_state(seed=3)
    before = TR.evaluate(pool_b, state).accuracy
    out, log = TR.post_pretrain(
        pool_b, state, TR.PostPretrainConfig(epochs=8, batch_size=8, lr=1e-3)
    )
    after = TR.evaluate(pool_b, out).accuracy
    assert after > before
    assert all(r.loss_ce > 0 for r in log.steps)


def test_post_pretrain_class_count_mismatch(pool_a):
    state = fresh_state()
    bad = [D.CloudRecord(points=r.points, label=7) for r in pool_a[:8]]
    with pytest.raises(ValueError):
        TR.post_pretrain(bad, state, TR.PostPretrainConfig(epochs=1))


def test_finetune_lambda_zero_pure_classification(pool_b):
    state = fresh_state(seed=1)
    out, log = TR.finetune(pool_b, state, TR.FinetuneConfig(lam=0.0, epochs=1, batch_size=8))
    for r in log.steps:
        assert r.loss_cd1 == 0.0 and r.loss_cd2 == 0.0
        assert r.loss_total == pytest.approx(r.loss_ce)


def test_finetune_lambda_three_combines_losses(pool_b):
    state = fresh_state(seed=1)
    out, log = TR.finetune(pool_b, state, TR.FinetuneConfig(lam=3.0, epochs=1, batch_size=8))
    for r in log.steps:
        gen = r.loss_cd1 + r.loss_cd2
        assert gen > 0.0
        assert r.loss_total == pytest.approx(r.loss_ce + 3.0 * gen, rel=1e-12)


def test_finetune_frozen_everything_leaves_parameters(pool_b):
    state = fresh_state(seed=2)
    before = {k: v.data.copy() for k, v in state.params.items()}
    cfg = TR.FinetuneConfig(
        lam=3.0, epochs=2, batch_size=8,
        freeze=("embed", "extractor", "generator", "pred", "cls"),
    )
    out, _ = TR.finetune(pool_b, state, cfg)
    for name, val in before.items():
        assert np.array_equal(out.params[name].data, val)


def test_finetune_does_not_mutate_input_state(pool_b):
    state = fresh_state(seed=4)
    before = {k: v.data.copy() for k, v in state.params.items()}
    TR.finetune(pool_b, state, TR.FinetuneConfig(lam=0.0, epochs=1, batch_size=8))
    for name, val in before.items():
        assert np.array_equal(state.params[name].data, val)


# -- evaluation ----------------------------------------------------------------------


def test_evaluate_repeatability_and_per_class(pool_b):
    state = fresh_state()
    a = TR.evaluate(pool_b, state)
    b = TR.evaluate(pool_b, state)
    assert a.accuracy == b.accuracy
    assert a.per_class == b.per_class
    assert set(a.per_class) == set(range(5))
    assert a.count == len(pool_b)


def test_evaluate_empty_split_rejected():
    with pytest.raises(ValueError):
        TR.evaluate([], fresh_state())


def test_evaluate_overfit_train_split_reaches_full_accuracy(pool_b):
    subset = pool_b[:10]
    state = fresh_state(seed=6)
    out, _ = TR.finetune(
        subset, state, TR.FinetuneConfig(lam=0.0, epochs=40, batch_size=10, lr=2e-3)
    )
    assert TR.evaluate(subset, out).accuracy == 1.0


# -- few-shot ---------------------------------------------------------------------------


def test_few_shot_one_way_is_perfect(pool_b):
    state = fresh_state()
    res = TR.few_shot_eval(pool_b, state, ways=1, shots=2, trials=3, queries_per_class=2, seed=0)
    assert res.mean == 1.0 and res.std == 0.0


def test_few_shot_same_seed_reproducible(pool_b):
    state = fresh_state()
    a = TR.few_shot_eval(pool_b, state, ways=2, shots=2, trials=3, queries_per_class=2, seed=9)
    b = TR.few_shot_eval(pool_b, state, ways=2, shots=2, trials=3, queries_per_class=2, seed=9)
    assert a.per_trial == b.per_trial
    assert str(a) == str(b) and "±" in str(a)


def test_few_shot_insufficient_records_rejected(pool_b):
    state = fresh_state()
    with pytest.raises(ValueError):
        TR.few_shot_eval(pool_b, state, ways=5, shots=8, trials=1, queries_per_class=20)


def test_few_shot_never_reads_query_labels_before_evaluation(pool_b):
    """Access-tracking double: every query record's label is read exactly
    once, and only after that record's points were consumed for its
    prediction."""

    class TrackingRecord:
        def __init__(self, rec):
            self._rec = rec
            self.events = []

        @property
        def points(self):
            self.events.append("points")
            return self._rec.points

        @property
        def label(self):
            self.events.append("label")
            return self._rec.label

    wrapped = [TrackingRecord(r) for r in pool_b]
    state = fresh_state()
    labels = [r._rec.label for r in wrapped]  # manifest labels, not records
    res = TR.few_shot_eval(
        wrapped, state, ways=2, shots=2, trials=2, queries_per_class=3,
        seed=1, labels=labels,
    )
    assert 0.0 <= res.mean <= 1.0
    for rec in wrapped:
        label_reads = rec.events.count("label")
        if label_reads == 0:
            continue  # support or unused record
        # queries: label read exactly once per trial participation and
        # always after the points were consumed
        assert rec.events[-1] == "label"
        assert "points" in rec.events
        assert rec.events.index("label") > rec.events.index("points")


def test_few_shot_full_finetune_flag_runs(pool_b):
    state = fresh_state()
    res = TR.few_shot_eval(
        pool_b, state, ways=2, shots=2, trials=1, queries_per_class=2,
        seed=2, freeze_extractor=False,
    )
    assert 0.0 <= res.mean <= 1.0
