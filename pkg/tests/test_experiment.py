import filecmp
from math import comb

import numpy as np
import pytest
import torch

from turnterm.corpus import Corpus, Label, Sample, load_manifest
from turnterm.errors import NonFiniteLoss, TooFewSamples, TooFewShows
from turnterm.experiment import (
    EarlyStopping,
    EmbeddingSet,
    GridSpec,
    Job,
    ResultsStore,
    TrainConfig,
    enumerate_jobs,
    evaluate_model,
    evaluation_configs,
    fold_samples,
    grid_status,
    plan_folds,
    read_records,
    run_grid,
    split_train_val,
    train_model,
)
from turnterm.heads import HeadConfig, init_head, parameter_hash, save_head
from turnterm.pipeline import load_embeddings, stage_dir

from reconstructed import reconstructed_corpus

WORKED = [0.60, 0.70, 0.70, 0.69, 0.68, 0.68, 0.65]


def _toy_corpus(n_shows=3, per_show=10):
    return Corpus(tuple(
        Sample(f"s{k}-{i}", f"show{k}", "spk", "m.wav", i, i + 0.5, "Terminal" if i % 2 else "NonTerminal")
        for k in range(n_shows) for i in range(per_show)
    ))


def _toy_embeddings(corpus, cue=1.0, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([s.label.index for s in corpus])
    sign = np.where(labels == 0, 1.0, -1.0)
    audio = rng.normal(0, 0.1, (len(corpus), 768)).astype(np.float32)
    text = rng.normal(0, 0.1, (len(corpus), 768)).astype(np.float32)
    audio[:, 0] = sign * cue
    text[:, 0] = sign * cue
    return EmbeddingSet([s.sample_id for s in corpus], labels, audio, text)


# --- folds and splits ---------------------------------------------------------

def test_ten_folds_on_the_published_show_list():
    corpus = reconstructed_corpus()
    plan = plan_folds(corpus)
    assert len(plan) == 10
    fold = next(f for f in plan if f.test_show == "PlaneteShowbiz")
    train, test = fold_samples(corpus, fold)
    assert (len(test), len(train)) == (10, 1944)


def test_two_show_corpus():
    plan = plan_folds(_toy_corpus(2))
    assert [f.test_show for f in plan] == ["show0", "show1"]
    with pytest.raises(TooFewShows):
        plan_folds(_toy_corpus(1))


@pytest.mark.parametrize("n,n_val", [(100, 30), (10, 3), (5, 2), (4, 1), (1944, 583)])
def test_split_sizes(n, n_val):
    items = list(range(n))
    tr, va = split_train_val(items, seed=3)
    assert len(va) == n_val and len(tr) == n - n_val
    assert sorted(tr + va) == items


def test_split_deterministic():
    items = list(range(50))
    assert split_train_val(items, 11) == split_train_val(items, 11)
    assert split_train_val(items, 11) != split_train_val(items, 12)
    with pytest.raises(TooFewSamples):
        split_train_val([1, 2, 3], 0)


def test_stratified_split_keeps_label_shares():
    corpus = _toy_corpus(1, 40)
    tr, va = split_train_val(list(corpus), seed=0, stratify=True)
    assert sum(s.label is Label.TERMINAL for s in va) == 6 and len(va) == 12


# --- early stopping -----------------------------------------------------------

def test_early_stopping_worked_sequence():
    stop = EarlyStopping(5)
    flags = [stop.update(v) for v in WORKED]
    assert flags == [False] * 6 + [True]
    assert stop.best_epoch == 2


@pytest.mark.parametrize("seq,stop_at,best", [
    ([0.5] * 6, 6, 1),
    ([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], None, 6),
    ([0.9, 0.8, 0.9, 0.9, 0.9, 0.95], None, 6),
    ([0.5, 0.6, 0.5, 0.5, 0.5, 0.5, 0.61, 0.6], None, 7),
])
def test_early_stopping_rule(seq, stop_at, best):
    stop = EarlyStopping(5)
    stopped = None
    for i, v in enumerate(seq, 1):
        if stop.update(v):
            stopped = i
            break
    assert stopped == stop_at and stop.best_epoch == best


def _train_pair():
    corpus = _toy_corpus(2, 20)
    data = _toy_embeddings(corpus)
    return data.take(np.arange(0, 28)), data.take(np.arange(28, 40))


def test_train_model_follows_worked_sequence_and_restores_best_epoch():
    train, val = _train_pair()
    cfg = TrainConfig(seed=5, max_epochs=50)
    model, log = train_model(HeadConfig("TO", seed=5), cfg, train, val, val_hook=lambda e: WORKED[e - 1])
    assert log.stopped_early and log.stopped_epoch == 7 and log.best_epoch == 2
    assert len(log.train_loss) == 7
    # the same run cut after epoch 2 ends on exactly the parameters that were returned
    ref, _ = train_model(HeadConfig("TO", seed=5), TrainConfig(seed=5, max_epochs=2), train, val,
                         val_hook=lambda e: WORKED[e - 1])
    assert parameter_hash(model) == parameter_hash(ref)


def test_identical_seeds_give_byte_identical_checkpoints(tmp_path):
    train, val = _train_pair()
    paths = []
    for i in range(2):
        model, _ = train_model(HeadConfig("EF", seed=9), TrainConfig(seed=9, max_epochs=4), train, val)
        paths.append(tmp_path / f"m{i}.safetensors")
        save_head(model, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    other, _ = train_model(HeadConfig("EF", seed=10), TrainConfig(seed=10, max_epochs=4), train, val)
    assert parameter_hash(other) != parameter_hash(model)


def _perceptron_accuracy(x, y, epochs=20):
    # independent baseline: plain perceptron on the raw embedding
    w, b = np.zeros(x.shape[1]), 0.0
    t = np.where(y == 0, 1.0, -1.0)
    for _ in range(epochs):
        for xi, ti in zip(x, t):
            if ti * (xi @ w + b) <= 0:
                w += ti * xi
                b += ti
    return float(np.mean(np.sign(x @ w + b) == t))


def test_training_reaches_high_validation_accuracy_on_separable_data():
    # stub-contract embeddings at corpus scale: 1400 train / 600 validation
    corpus = _toy_corpus(2, 1000)
    data = _toy_embeddings(corpus)
    rng = np.random.default_rng(0)
    data.audio[:, 0] += rng.uniform(-0.09, 0.09, len(corpus))
    data.text[:, 0] += rng.uniform(-0.09, 0.09, len(corpus))
    idx = rng.permutation(len(corpus))
    tr, va = data.take(idx[:1400]), data.take(idx[1400:])
    assert _perceptron_accuracy(tr.audio, tr.labels) == 1.0
    for arch in ("TO", "AO", "EF"):
        _, log = train_model(HeadConfig(arch), TrainConfig(), tr, va)
        assert log.val_accuracy[log.best_epoch - 1] >= 0.95


def test_non_finite_loss_is_reported():
    train, val = _train_pair()
    train.audio[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_model(HeadConfig("AO"), TrainConfig(max_epochs=1), train, val)


def test_af_is_returned_untrained():
    train, val = _train_pair()
    to, ao = init_head(HeadConfig("TO")), init_head(HeadConfig("AO"))
    model, log = train_model(HeadConfig("AF"), TrainConfig(), train, val, text_model=to, audio_model=ao)
    assert log.train_loss == [] and len(log.val_accuracy) == 1


def test_lf_leaves_bases_untouched():
    train, val = _train_pair()
    to, ao = init_head(HeadConfig("TO", seed=1)), init_head(HeadConfig("AO", seed=2))
    before = parameter_hash(to), parameter_hash(ao)
    train_model(HeadConfig("LF"), TrainConfig(max_epochs=3), train, val, text_model=to, audio_model=ao)
    assert (parameter_hash(to), parameter_hash(ao)) == before


# --- grid ---------------------------------------------------------------------

def test_paper_grid_arithmetic():
    plan = plan_folds(reconstructed_corpus())
    jobs = enumerate_jobs(["TO", "AO", "EF", "LF", "AF"], ["ref_auto", "ref_man", "3s_auto"], plan, 10)
    assert len(jobs) == 1500
    assert len({j.key for j in jobs}) == 1500
    configs = evaluation_configs(jobs)
    for arch in ("TO", "AO", "EF", "LF", "AF"):
        assert len({(tr, te) for a, tr, te, _, _ in configs if a == arch}) == 9
    assert len(configs) == 4500
    one = enumerate_jobs(["EF"], ["ref_man"], plan, 1)
    assert len(evaluation_configs(one)) == 30


def test_job_seeds_are_stable_and_distinct():
    plan = plan_folds(_toy_corpus(3))
    a = enumerate_jobs(["TO", "AO"], ["ref_auto"], plan, 3, base_seed=1)
    b = enumerate_jobs(["TO", "AO"], ["ref_auto"], plan, 3, base_seed=1)
    assert [j.seed for j in a] == [j.seed for j in b]
    assert len({j.seed for j in a}) == len(a)


def test_evaluate_model_records():
    corpus = _toy_corpus(2, 20)
    data = _toy_embeddings(corpus)
    job = Job("TO", "ref_man", 0, "show0", 0, 1)
    test = [s for s in corpus if s.show_id == "show0"]

    class Oracle(torch.nn.Module):
        config = HeadConfig("TO")

        def forward(self, audio=None, text=None):
            # cue coordinate is +1 for Terminal: put it on logit 0
            return torch.stack([text[:, 0], -text[:, 0]], dim=1)

    recs = evaluate_model(Oracle(), test, data, "3s_auto", job)
    assert len(recs) == 20
    assert all(r.train_setting == "ref_man" and r.test_setting == "3s_auto" for r in recs)
    assert np.mean([r.correct for r in recs]) == 1.0


@pytest.fixture(scope="module")
def grid_inputs(small_run):
    config, _ = small_run
    corpus = load_manifest(config.manifest)
    return corpus, load_embeddings(config)


def test_grid_resume_matches_fresh_run(tmp_path, grid_inputs):
    corpus, emb = grid_inputs
    grid = GridSpec(("TO", "AO", "LF"), ("ref_auto",), ("ref_auto", "3s_auto"), n_seeds=1)
    train = {"max_epochs": 6}
    fresh = run_grid(corpus, emb, tmp_path / "fresh", grid, train_defaults=train)
    assert fresh["complete"] and fresh["ran"] == 12
    assert fresh["records"] == len(corpus) * 3 * 2

    # interrupted run: drop some finished jobs, then resume
    resumed_dir = tmp_path / "resumed"
    run_grid(corpus, emb, resumed_dir, grid, train_defaults=train)
    store = ResultsStore(resumed_dir)
    victims = sorted(store.records_dir.glob("*.jsonl"))[:4]
    for v in victims:
        v.unlink()
    status = grid_status(corpus, resumed_dir, grid)
    assert status["done"] == 8 and len(status["remaining"]) == 4
    again = run_grid(corpus, emb, resumed_dir, grid, train_defaults=train)
    assert again["ran"] == 4 and again["skipped"] == 8 and again["complete"]
    for sub in ("records", "checkpoints"):
        cmp = filecmp.dircmp(tmp_path / "fresh" / sub, resumed_dir / sub)
        assert not cmp.left_only and not cmp.right_only
        for name in cmp.common_files:
            assert (tmp_path / "fresh" / sub / name).read_bytes() == (resumed_dir / sub / name).read_bytes()


def test_no_leakage_in_any_job(small_run):
    config, _ = small_run
    corpus = load_manifest(config.manifest)
    store = ResultsStore(stage_dir(config, "train"))
    jobs = enumerate_jobs(config.architectures, config.train_settings, plan_folds(corpus), config.n_seeds,
                          config.seed)
    for job in jobs:
        split = store.read_log(job)["split"]
        assert job.test_show not in split["train_shows"]
        assert job.test_show not in split["val_shows"]
        assert split["n_train"] + split["n_val"] + split["n_test"] == len(corpus)
    for r in read_records(store.root):
        assert r.show_id == plan_folds(corpus).folds[r.fold].test_show


def test_record_count_matches_grid(small_run):
    config, results = small_run
    corpus = load_manifest(config.manifest)
    expected = len(corpus) * 5 * 1 * 3 * 1
    assert results["train"]["expected_records"] == expected
    assert len(read_records(stage_dir(config, "train"))) == expected
    ids = [(r.sample_id, r.architecture, r.test_setting) for r in read_records(stage_dir(config, "train"))]
    assert len(set(ids)) == expected
    assert comb(5, 2) == 10
