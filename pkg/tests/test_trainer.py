import math
from dataclasses import replace

import numpy as np
import pytest

from ltd_lab.budget import DecayShape, LRAxis, LRConfig, cumulative_layertokens
from ltd_lab.corpus import Corpus, CorpusKind, make_corpus, markov_unigram_entropy
from ltd_lab.model import BypassConfig, BypassMetric, TransformerConfig, TransformerModel
from ltd_lab.schedule import DropSchedule, ScheduleMode
from ltd_lab.trainer import (Method, MetricsRecord, OptimizerConfig,
                             TrainConfig, TrainError, TrainingDiverged,
                             accounting_schedule, evaluate,
                             experiment_compare, experiment_dropout_interplay,
                             matched_constant_kept_length, train)


def small_cfg(T=40, method=Method.BASELINE, l=3, d=32, s=32, batch=4,
              seed=1, lr_max=2e-3, axis=LRAxis.ITERATION, **kw):
    model = TransformerConfig(l=l, d=d, heads=2, s=s, vocab=0 or 25,
                              causal=True, dropout_rate=0.0, seed=seed)
    sched = DropSchedule.default_policy(
        s=s, b0=max(1, s // 4), s_dec=4, t_full=max(1, int(0.7 * T)),
        num_layers=l, seed=seed)
    lr = LRConfig(lr_max=lr_max, lr_min=1e-4, T=T, T_warmup=max(1, T // 10),
                  decay=DecayShape.COSINE, axis=axis)
    defaults = dict(model=model, sched=sched, lr=lr, method=method,
                    batch_size=batch, total_iters=T, eval_every=T // 2,
                    seed=seed, corpus_size=20_000, val_size=2_048)
    defaults.update(kw)
    return TrainConfig(**defaults)


def pattern_corpus(pattern, reps=2000, vocab=None):
    pattern = np.asarray(pattern, dtype=np.int64)
    stream = np.tile(pattern, reps)
    vocab = vocab or int(pattern.max()) + 2
    return Corpus(kind=CorpusKind.CHAR, train=stream,
                  val=np.tile(pattern, 40), vocab=vocab, mask_id=vocab - 1)


class TestValidation:
    def test_eval_every_must_divide(self):
        with pytest.raises(TrainError, match="divide"):
            small_cfg(T=40, eval_every=13)

    def test_lr_horizon_must_match(self):
        cfg = small_cfg(T=40)
        with pytest.raises(TrainError, match="lr.T"):
            replace(cfg, lr=replace(cfg.lr, T=50))

    def test_bypass_method_needs_config(self):
        with pytest.raises(TrainError, match="bypass"):
            small_cfg(method=Method.TOKENBYPASS)

    def test_sequence_lengths_must_agree(self):
        cfg = small_cfg()
        with pytest.raises(TrainError, match="disagree"):
            replace(cfg, sched=DropSchedule.no_drop(16, 3))

    def test_corpus_size_floor(self):
        with pytest.raises(TrainError, match="corpus_size"):
            small_cfg(corpus_size=100)


class TestAccountingSchedule:
    def test_baseline_consumes_full_length(self):
        cfg = small_cfg(method=Method.BASELINE)
        acct = accounting_schedule(cfg)
        assert cumulative_layertokens(acct, 3, 10) == 3 * 32 * 10

    def test_tokenbypass_constant_over_span(self):
        bcfg = BypassConfig(1, 1, keep_fraction=0.5,
                            metric=BypassMetric.RANDOM)
        cfg = small_cfg(method=Method.TOKENBYPASS, bypass=bcfg)
        acct = accounting_schedule(cfg)
        # layers 0 and 2 full, layer 1 at 16 of 32 tokens
        assert cumulative_layertokens(acct, 3, 1) == 2 * 32 + 16

    def test_random_ltd_uses_own_schedule(self):
        cfg = small_cfg(method=Method.RANDOM_LTD)
        assert accounting_schedule(cfg) is cfg.sched


class TestEvaluate:
    def test_untrained_model_log_vocab(self):
        corpus = make_corpus(CorpusKind.CHAR, 1, 20_000, 2_048)
        model = TransformerModel(
            TransformerConfig(l=2, d=32, heads=2, s=32, vocab=corpus.vocab,
                              causal=True, seed=0), dtype=np.float32)
        loss = evaluate(model, corpus.val, batch_size=4)
        assert loss == pytest.approx(math.log(corpus.vocab), abs=1e-6)

    def test_deterministic_and_pure(self):
        corpus = make_corpus(CorpusKind.CHAR, 1, 20_000, 2_048)
        model = TransformerModel(
            TransformerConfig(l=2, d=32, heads=2, s=32, vocab=corpus.vocab,
                              causal=True, dropout_rate=0.5, seed=0),
            dtype=np.float32)
        a = evaluate(model, corpus.val, batch_size=4)
        b = evaluate(model, corpus.val, batch_size=4)
        assert a == b  # dropout off, no RNG consumed

    def test_short_stream_rejected(self):
        model = TransformerModel(
            TransformerConfig(l=2, d=32, heads=2, s=32, vocab=25, seed=0))
        with pytest.raises(TrainError, match="window"):
            evaluate(model, np.arange(10), batch_size=4)


class TestTrain:
    def test_memorizes_repeated_pattern(self):
        rng = np.random.default_rng(0)
        pattern = rng.integers(0, 16, size=32)
        corpus = pattern_corpus(pattern, vocab=17)
        cfg = small_cfg(T=200, l=2, d=32, s=32, batch=8, lr_max=5e-3,
                        eval_every=50, sched=DropSchedule.no_drop(32, 2,
                                                                  seed=1))
        cfg = replace(cfg, lr=replace(cfg.lr, lr_min=0.0, T_warmup=10))
        records = train(cfg, corpus=corpus)
        assert records[-1].train_loss < 0.1
        assert records[-1].eval_loss < 0.1

    def test_bit_identical_reruns(self):
        cfg = small_cfg(T=40, method=Method.RANDOM_LTD)
        assert train(cfg) == train(cfg)

    def test_full_length_random_ltd_equals_baseline(self):
        sched = DropSchedule.no_drop(32, 3, seed=1)
        base = small_cfg(T=40, method=Method.BASELINE, sched=sched)
        ltd = replace(base, method=Method.RANDOM_LTD,
                      lr=replace(base.lr, axis=LRAxis.LAYERTOKEN))
        assert train(base) == train(ltd)

    def test_ledger_consistency(self):
        cfg = small_cfg(T=60, method=Method.RANDOM_LTD, eval_every=20)
        records = train(cfg)
        acct = accounting_schedule(cfg)
        for r in records:
            assert r.layertokens == cumulative_layertokens(
                acct, cfg.model.l, r.iteration + 1)
            assert r.ppl == math.exp(r.eval_loss)

    def test_markov_beats_unigram_entropy(self):
        corpus = make_corpus(CorpusKind.MARKOV, 3, 40_000, 2_048)
        bound = markov_unigram_entropy(3)
        cfg = small_cfg(T=400, l=2, d=32, s=32, batch=8, lr_max=3e-3,
                        eval_every=400, corpus_kind=CorpusKind.MARKOV,
                        corpus_size=40_000, val_size=2_048)
        records = train(cfg, corpus=corpus)
        assert records[-1].eval_loss < bound

    def test_divergence_raises_with_diagnostic(self):
        cfg = small_cfg(T=40, lr_max=1e8, eval_every=40,
                        optim=OptimizerConfig(grad_clip=1e9))
        with pytest.raises(TrainingDiverged) as exc:
            train(cfg)
        assert exc.value.records[-1].iteration == exc.value.iteration
        assert math.isnan(exc.value.records[-1].eval_loss)

    def test_tokenbypass_smoke(self):
        bcfg = BypassConfig(1, 1, keep_fraction=0.5,
                            metric=BypassMetric.LOSS_EMA)
        cfg = small_cfg(T=20, method=Method.TOKENBYPASS, bypass=bcfg,
                        eval_every=10)
        records = train(cfg)
        assert len(records) == 2
        assert all(math.isfinite(r.eval_loss) for r in records)

    def test_mlm_training_smoke(self):
        cfg = small_cfg(T=20, eval_every=10)
        cfg = replace(cfg, model=replace(cfg.model, causal=False))
        records = train(cfg)
        assert all(math.isfinite(r.train_loss) for r in records)

    def test_checkpoint_written(self, tmp_path):
        cfg = small_cfg(T=20, eval_every=10)
        train(cfg, save_model_to=tmp_path / "model")
        assert (tmp_path / "model.bin").exists()
        assert (tmp_path / "model.json").exists()


class TestExperiments:
    def test_compare_writes_cells_and_summary(self, tmp_path):
        cfg = small_cfg(T=20, eval_every=10)
        report = experiment_compare(
            cfg, methods=("baseline", "random_ltd"), seeds=(1,),
            out_dir=tmp_path)
        assert (tmp_path / "baseline_seed1.csv").exists()
        assert (tmp_path / "random_ltd_seed1.csv").exists()
        assert (tmp_path / "summary.json").exists()
        assert set(report["cells"]) == {"baseline", "random_ltd"}

    def test_compare_rerun_byte_identical(self, tmp_path):
        cfg = small_cfg(T=20, eval_every=10)
        kwargs = dict(methods=("baseline", "random_ltd", "tokenbypass"),
                      seeds=(1,))
        experiment_compare(cfg, out_dir=tmp_path / "a", **kwargs)
        experiment_compare(cfg, out_dir=tmp_path / "b", **kwargs)
        for name in ("baseline_seed1.csv", "random_ltd_seed1.csv",
                     "tokenbypass_seed1.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_matched_constant_kept_length(self):
        sched = DropSchedule.default_policy(s=64, b0=4, s_dec=4, t_full=3000,
                                            num_layers=4)
        assert matched_constant_kept_length(sched, 3000) == 32
        nodrop = DropSchedule.no_drop(64, 4)
        assert matched_constant_kept_length(nodrop, 100) == 64

    def test_dropout_grid_structure(self, tmp_path):
        cfg = small_cfg(T=20, eval_every=10)
        report = experiment_dropout_interplay(cfg, seeds=(1,),
                                              out_dir=tmp_path)
        assert set(report["cells"]) == {
            "baseline_dropout", "baseline_nodropout",
            "random_ltd_dropout", "random_ltd_nodropout"}
        for entry in report["cells"].values():
            assert math.isfinite(entry["mean_overfit_gap"])
