"""Embedding-MSE distillation: loss oracles, frozen-teacher guarantees,
step dispatch, and bit-exact run resumption."""

import copy
import shutil

import numpy as np
import pytest

from disco import tensor as T
from disco.checkpoint import DigestMismatch, save_checkpoint
from disco.config import config_digest, merge_config, teacher_digest
from disco.contrastive import (MemoryQueue, MomentumEncoderPair,
                               bundle_records, contrastive_step,
                               encoder_config_from)
from disco.data import AugmentationPolicy, two_views
from disco.distill import (DiscoConfig, FrozenTeacher, disco_total_loss,
                           disco_train_step, distill_step,
                           embedding_distill_loss, load_teacher,
                           run_distillation, run_hidden_sweep)
from disco.models import build_bundle, checksum
from disco.optim import SGD
from disco.runs import read_metrics, read_run_tags
from disco.tensor import Tensor


def tiny_config(**disco_overrides) -> dict:
    """Full experiment config shrunk to the session dataset geometry."""
    cfg = merge_config({
        "data": {"classes": 4, "per_class": 40, "test_per_class": 15,
                 "height": 16, "width": 16},
        "teacher": {"arch": "mlp-small", "head_hidden": 32, "embed_dim": 16,
                    "epochs": 2, "batch_size": 16},
        "student": {"arch": "mlp-small", "head_hidden": 16, "embed_dim": 16},
        "contrastive": {"queue_size": 32},
        "disco": {"epochs": 2, "batch_size": 16, "checkpoint_every": 1,
                  **disco_overrides},
    })
    return cfg


def fake_teacher_ckpt(cfg: dict, path) -> FrozenTeacher:
    """A teacher checkpoint without the pretraining run: random weights
    saved under the config's teacher digest."""
    t = cfg["teacher"]
    bundle = build_bundle(encoder_config_from(t, cfg["data"]),
                          t["head_hidden"], t["embed_dim"], seed=t["seed"])
    save_checkpoint(path, bundle_records(bundle, "query"), teacher_digest(cfg))
    return FrozenTeacher.wrap(bundle)


def student_setup(cfg: dict):
    bundle = build_bundle(encoder_config_from(cfg["student"], cfg["data"]),
                          cfg["student"]["head_hidden"],
                          cfg["student"]["embed_dim"], seed=cfg["seed"])
    pair = MomentumEncoderPair(bundle, cfg["contrastive"]["ema_momentum"])
    queue = MemoryQueue(cfg["contrastive"]["queue_size"],
                        cfg["student"]["embed_dim"],
                        dtype=bundle.parameters()[0].dtype)
    opt = SGD(pair.query.parameters(), lr=0.05, momentum=0.9)
    return pair, queue, opt


def batch_views(split, n, seed=0):
    policy = AugmentationPolicy(0.6, 1.0, 0.5, 0.02, 0.1)
    return two_views(split, np.arange(n), policy, seed)


class TestEmbeddingDistillLoss:
    def test_unit_gap_oracle(self):
        s = Tensor(np.array([[1.0, 0.0]], dtype=T.default_dtype()))
        t = np.array([[0.0, 1.0]], dtype=T.default_dtype())
        assert embedding_distill_loss(s, t, normalize=False).item() == 1.0

    def test_numpy_oracle(self):
        rng = np.random.default_rng(0)
        with T.precision("f64"):
            s = rng.standard_normal((5, 7))
            t = rng.standard_normal((5, 7))
            got = embedding_distill_loss(Tensor(s), t, normalize=True).item()
            sn = s / np.linalg.norm(s, axis=1, keepdims=True)
            tn = t / np.linalg.norm(t, axis=1, keepdims=True)
            np.testing.assert_allclose(got, ((sn - tn) ** 2).mean(),
                                       atol=1e-12)

    def test_identity_is_exact_zero(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal((4, 8)).astype(T.default_dtype())
        assert embedding_distill_loss(Tensor(e), e.copy(), True).item() == 0.0
        assert embedding_distill_loss(Tensor(e), e.copy(), False).item() == 0.0

    def test_normalized_form_ignores_power_of_two_rescaling(self):
        rng = np.random.default_rng(2)
        e = rng.standard_normal((4, 8)).astype(T.default_dtype())
        assert embedding_distill_loss(Tensor(e), 4.0 * e, True).item() == 0.0

    def test_normalized_form_ignores_arbitrary_rescaling(self):
        rng = np.random.default_rng(3)
        with T.precision("f64"):
            e = rng.standard_normal((4, 8))
            assert embedding_distill_loss(Tensor(e), 5.0 * e, True).item() \
                < 1e-12

    def test_shape_mismatch_rejected(self):
        s = Tensor(np.zeros((2, 4), dtype=T.default_dtype()))
        with pytest.raises(ValueError):
            embedding_distill_loss(s, np.zeros((2, 5), np.float32))

    def test_gradient_reaches_student_not_teacher(self):
        rng = np.random.default_rng(4)
        s = Tensor(rng.standard_normal((3, 6)).astype(T.default_dtype()),
                   requires_grad=True)
        t = Tensor(rng.standard_normal((3, 6)).astype(T.default_dtype()),
                   requires_grad=True)
        embedding_distill_loss(s, t).backward()
        assert np.abs(s.grad).sum() > 0
        assert t.grad is None


class TestTotalLoss:
    def _terms(self):
        l_co = Tensor(np.array(2.0, dtype=T.default_dtype()))
        l_dis = Tensor(np.array(0.5, dtype=T.default_dtype()))
        return l_co, l_dis

    def test_weighted_sum(self):
        l_co, l_dis = self._terms()
        cfg = DiscoConfig(lambda_dis=3.0)
        assert disco_total_loss(l_co, l_dis, cfg).item() == pytest.approx(3.5)

    def test_distill_only(self):
        _, l_dis = self._terms()
        cfg = DiscoConfig(lambda_dis=2.0, use_co=False)
        assert disco_total_loss(None, l_dis, cfg).item() == pytest.approx(1.0)

    def test_contrastive_only(self):
        l_co, _ = self._terms()
        cfg = DiscoConfig(use_dis=False)
        assert disco_total_loss(l_co, None, cfg) is l_co

    def test_missing_terms_rejected(self):
        l_co, l_dis = self._terms()
        with pytest.raises(ValueError):
            disco_total_loss(None, l_dis, DiscoConfig())
        with pytest.raises(ValueError):
            disco_total_loss(l_co, None, DiscoConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DiscoConfig(lambda_dis=-0.5)
        with pytest.raises(ValueError):
            DiscoConfig(use_co=False, use_dis=False)
        with pytest.raises(ValueError):
            DiscoConfig(distill_views="three_views")

    def test_from_experiment_mapping(self):
        cfg = tiny_config(lambda_dis=7.0, distill_views="both_views")
        dcfg = DiscoConfig.from_experiment(cfg)
        assert dcfg.lambda_dis == 7.0
        assert dcfg.student_hidden_dim == 16
        assert dcfg.distill_views == "both_views"
        assert dcfg.epochs == 2 and dcfg.batch_size == 16
        assert dcfg.seed == cfg["seed"]


class TestDiscoStep:
    def test_requires_frozen_teacher(self, tiny_dataset):
        cfg = tiny_config()
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 8)
        queue.enqueue(pair.embed_key(views.view_k))
        dcfg = DiscoConfig.from_experiment(cfg)
        with pytest.raises(ValueError, match="teacher"):
            disco_train_step(pair, None, queue, views, dcfg, opt, 0.2)

        t = cfg["teacher"]
        loose = build_bundle(encoder_config_from(t, cfg["data"]),
                             t["head_hidden"], t["embed_dim"], seed=3)
        unfrozen = FrozenTeacher(bundle=loose, checksum=checksum(loose))
        with pytest.raises(ValueError, match="frozen"):
            disco_train_step(pair, unfrozen, queue, views, dcfg, opt, 0.2)

    def test_embed_dim_mismatch_rejected(self, tiny_dataset):
        cfg = tiny_config()
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 8)
        queue.enqueue(pair.embed_key(views.view_k))
        t = cfg["teacher"]
        wide = build_bundle(encoder_config_from(t, cfg["data"]),
                            t["head_hidden"], 24, seed=3)
        teacher = FrozenTeacher.wrap(wide)
        with pytest.raises(ValueError, match="embed dim"):
            disco_train_step(pair, teacher, queue, views,
                             DiscoConfig.from_experiment(cfg), opt, 0.2)

    def test_contrastive_mode_matches_contrastive_step_bitwise(self,
                                                               tiny_dataset):
        cfg = tiny_config()
        pair_a, queue_a, opt_a = student_setup(cfg)
        pair_b, queue_b, opt_b = student_setup(cfg)
        assert checksum(pair_a.query) == checksum(pair_b.query)
        dcfg = DiscoConfig(use_co=True, use_dis=False, seed=cfg["seed"])
        for step in range(3):
            views = batch_views(tiny_dataset.train, 8, seed=step)
            if step == 0:
                queue_a.enqueue(pair_a.embed_key(views.view_k))
                queue_b.enqueue(pair_b.embed_key(views.view_k))
            contrastive_step(pair_a, queue_a, views, opt_a, 0.2)
            disco_train_step(pair_b, None, queue_b, views, dcfg, opt_b, 0.2)
        assert checksum(pair_a.query) == checksum(pair_b.query)
        assert checksum(pair_a.key) == checksum(pair_b.key)
        np.testing.assert_array_equal(queue_a.negatives(),
                                      queue_b.negatives())

    def test_teacher_untouched_and_gradient_free(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        before = checksum(teacher.bundle)
        dcfg = DiscoConfig.from_experiment(cfg)
        for step in range(5):
            views = batch_views(tiny_dataset.train, 8, seed=step)
            if step == 0:
                queue.enqueue(pair.embed_key(views.view_k))
            out = disco_train_step(pair, teacher, queue, views, dcfg, opt, 0.2)
            assert out["l_dis"] > 0.0
        assert checksum(teacher.bundle) == before
        for p in teacher.bundle.parameters():
            assert not p.requires_grad and p.grad is None

    def test_both_views_averages_the_two_gaps(self, tiny_dataset, tmp_path):
        cfg = tiny_config(distill_views="both_views")
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 8)
        queue.enqueue(pair.embed_key(views.view_k))

        # expected value from the pre-step parameters
        def gap(view):
            from disco.models import forward_embed
            _, emb = forward_embed(pair.query, Tensor(view))
            return embedding_distill_loss(emb, teacher.embed(view)).item()

        expect = 0.5 * (gap(views.view_q) + gap(views.view_k))
        out = disco_train_step(pair, teacher, queue, views,
                               DiscoConfig.from_experiment(cfg), opt, 0.2)
        np.testing.assert_allclose(out["l_dis"], expect, rtol=1e-6)

    def test_distill_only_step_still_reports_contrastive(self, tiny_dataset,
                                                         tmp_path):
        cfg = tiny_config(use_co=False)
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 8)
        queue.enqueue(pair.embed_key(views.view_k))
        out = disco_train_step(pair, teacher, queue, views,
                               DiscoConfig.from_experiment(cfg), opt, 0.2)
        assert out["l_co"] > 0.0
        assert out["total"] == pytest.approx(out["l_dis"], rel=1e-6)


class TestDispatch:
    @pytest.mark.parametrize("method", ["at", "rkd", "seed"])
    def test_baselines_require_teacher(self, method, tiny_dataset):
        cfg = tiny_config()
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 8)
        with pytest.raises(ValueError, match="teacher"):
            distill_step(method, pair, None, queue, None, views,
                         DiscoConfig.from_experiment(cfg), opt, 0.2,
                         dict(cfg["baselines"]))

    def test_seed_step_uses_teacher_queue_only(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        t_queue = MemoryQueue(32, 16, dtype=T.default_dtype())
        views = batch_views(tiny_dataset.train, 8)
        boot = teacher.embed(views.view_k)
        t_queue.enqueue(boot / np.linalg.norm(boot, axis=1, keepdims=True))
        key_before = checksum(pair.key)
        out = distill_step("seed", pair, teacher, queue, t_queue, views,
                           DiscoConfig.from_experiment(cfg), opt, 0.2,
                           dict(cfg["baselines"]))
        assert out["l_seed"] > 0.0
        assert queue.filled == 0  # student queue untouched
        assert t_queue.filled == 16  # teacher keys accumulated
        assert checksum(pair.key) == key_before  # no EMA update either

    @pytest.mark.parametrize("method,key", [("at", "l_at"), ("rkd", "l_rkd")])
    def test_conv_baselines_report_their_term(self, method, key, tiny_dataset,
                                              tmp_path):
        # attention transfer needs spatial stages, so conv encoders here
        cfg = tiny_config()
        cfg["teacher"]["arch"] = "conv-small"
        cfg["student"]["arch"] = "conv-small"
        cfg["seed"] = 2  # seed 1 would mirror the teacher weights exactly
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 4)
        queue.enqueue(pair.embed_key(views.view_k))
        out = distill_step(method, pair, teacher, queue, None, views,
                           DiscoConfig.from_experiment(cfg), opt, 0.2,
                           dict(cfg["baselines"]))
        assert out[key] > 0.0
        assert out["total"] > out["l_co"]

        combo = distill_step(method + "+disco", pair, teacher, queue, None,
                             batch_views(tiny_dataset.train, 4, seed=1),
                             DiscoConfig.from_experiment(cfg), opt, 0.2,
                             dict(cfg["baselines"]))
        assert combo["l_dis"] > 0.0

    def test_unknown_method_rejected(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        teacher = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        pair, queue, opt = student_setup(cfg)
        views = batch_views(tiny_dataset.train, 4)
        with pytest.raises(ValueError, match="unknown method"):
            distill_step("fitnets", pair, teacher, queue, None, views,
                         DiscoConfig.from_experiment(cfg), opt, 0.2,
                         dict(cfg["baselines"]))


class TestLoadTeacher:
    def test_roundtrip_and_digest_guard(self, tmp_path):
        cfg = tiny_config()
        built = fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        loaded = load_teacher(tmp_path / "t.ckpt",
                              expect_digest=teacher_digest(cfg))
        assert loaded.checksum == built.checksum
        assert loaded.bundle.frozen
        with pytest.raises(DigestMismatch):
            load_teacher(tmp_path / "t.ckpt", expect_digest=12345)


class TestRunDistillation:
    def test_run_artifacts(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        out = run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt",
                               tmp_path / "run")
        run_dir = tmp_path / "run"
        tags = read_run_tags(run_dir)
        assert tags["kind"] == "distill"
        assert tags["method"] == "disco"
        assert tags["head_hidden"] == 16
        assert tags["seed"] == cfg["seed"]
        assert tags["config_digest"] == f"{config_digest(cfg):016x}"
        assert tags["teacher_digest"] == f"{teacher_digest(cfg):016x}"
        rows = read_metrics(run_dir / "metrics.jsonl")
        assert [r["epoch"] for r in rows] == [0, 1]
        for r in rows:
            for key in ("l_co", "l_dis", "total", "lr"):
                assert key in r["metrics"]
        ckpts = sorted(p.name for p in (run_dir / "checkpoints").iterdir())
        assert ckpts == ["student_epoch0000.ckpt", "student_epoch0001.ckpt",
                         "student_epoch0002.ckpt", "student_final.ckpt"]
        assert out["checksum"]

    def test_wrong_teacher_checkpoint_refused(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        other = copy.deepcopy(cfg)
        other["teacher"]["seed"] = 99
        fake_teacher_ckpt(other, tmp_path / "t.ckpt")
        with pytest.raises(DigestMismatch):
            run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt",
                             tmp_path / "run")

    def test_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        cfg = tiny_config(epochs=4)
        fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt",
                         tmp_path / "full")

        # replay the first half, then resume from its last checkpoint
        shutil.copytree(tmp_path / "full", tmp_path / "half")
        half = tmp_path / "half"
        for name in ("student_epoch0003.ckpt", "student_epoch0004.ckpt",
                     "student_final.ckpt"):
            (half / "checkpoints" / name).unlink()
        kept = [line for line in
                (half / "metrics.jsonl").read_text().splitlines()
                if '"epoch": 0' in line or '"epoch": 1' in line]
        (half / "metrics.jsonl").write_text("\n".join(kept) + "\n")

        run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt", half,
                         resume=True)
        a = (tmp_path / "full" / "checkpoints" / "student_final.ckpt")
        b = (half / "checkpoints" / "student_final.ckpt")
        assert a.read_bytes() == b.read_bytes()

    def test_reruns_are_deterministic(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt",
                         tmp_path / "a")
        run_distillation(cfg, tiny_dataset.train, tmp_path / "t.ckpt",
                         tmp_path / "b")
        fa = tmp_path / "a" / "checkpoints" / "student_final.ckpt"
        fb = tmp_path / "b" / "checkpoints" / "student_final.ckpt"
        assert fa.read_bytes() == fb.read_bytes()


class TestHiddenSweep:
    def test_sweep_layout_and_config_isolation(self, tiny_dataset, tmp_path):
        cfg = tiny_config(epochs=1)
        fake_teacher_ckpt(cfg, tmp_path / "t.ckpt")
        results = run_hidden_sweep(cfg, tiny_dataset.train,
                                   tmp_path / "t.ckpt", tmp_path / "sweep",
                                   widths=[None, 8])
        assert (tmp_path / "sweep" / "width_absent").is_dir()
        assert (tmp_path / "sweep" / "width_8").is_dir()
        assert [r["head_hidden"] for r in results] == [None, 8]
        tags = read_run_tags(tmp_path / "sweep" / "width_8")
        assert tags["head_hidden"] == 8
        absent = read_run_tags(tmp_path / "sweep" / "width_absent")
        assert absent["head_hidden"] is None
        assert cfg["student"]["head_hidden"] == 16  # caller config untouched
