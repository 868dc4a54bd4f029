import numpy as np
import pytest
import torch

from ville.model import ViLLE
from ville.trainer import (
    IntegrityError,
    MigrationError,
    Sample,
    StageConfig,
    StagePipelineError,
    build_optimizer,
    checkpoint_from_model,
    load_checkpoint,
    lr_schedule,
    model_from_checkpoint,
    perturb_caption,
    prepare_stage,
    run_stage,
    save_checkpoint,
    stage12_step,
)

from conftest import tiny_model_config


def fresh(seed=0, **head):
    torch.manual_seed(seed)
    return ViLLE(tiny_model_config(**head))


def quick(stage=1, **kw):
    return StageConfig.default(stage, **{"steps": 2, "warmup_steps": 1, "batch_size": 4, "adapter_rank": 2, **kw})


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            StageConfig(stage=4)
        with pytest.raises(ValueError):
            StageConfig(steps=0)
        with pytest.raises(ValueError):
            StageConfig(steps=5, warmup_steps=6)
        with pytest.raises(ValueError):
            StageConfig(tasks=("cap", "dance"))

    def test_defaults_per_stage(self):
        assert StageConfig.default(2).detailed_captions
        assert set(StageConfig.default(3).tasks) == {"cap", "qa", "ret", "loc", "match", "compose"}
        assert StageConfig.default(1, steps=7, warmup_steps=2).steps == 7
        assert StageConfig(loss_weights={"ret": 2.0}).loss_weights["cap"] == 1.0


def test_lr_schedule():
    assert lr_schedule(0, 10, 1.0) == 0.0
    assert lr_schedule(5, 10, 1.0) == 0.5
    assert lr_schedule(10, 10, 1.0) == 1.0
    assert lr_schedule(500, 10, 1.0) == 1.0
    assert lr_schedule(0, 0, 0.3) == 0.3
    with pytest.raises(ValueError):
        lr_schedule(-1, 10, 1.0)


def test_one_step_means_one_update(tiny_corpus):
    model = fresh()
    before = params(model)
    res = run_stage(quick(steps=1), tiny_corpus, model, seed=0)
    assert res.steps_done == 1 and len(res.metrics) == 1
    states = [s for s in res.optimizer.state.values() if "step" in s]
    assert states and all(int(s["step"]) == 1 for s in states)
    changed = [k for k, v in params(model).items() if not torch.equal(v, before[k])]
    assert changed


def test_grad_accum_counts_outer_steps(tiny_corpus):
    res = run_stage(quick(steps=2, grad_accum=3), tiny_corpus, fresh(), seed=0)
    assert len(res.metrics) == 2
    assert all(int(s["step"]) == 2 for s in res.optimizer.state.values() if "step" in s)


def test_accumulated_gradient_equals_full_batch_gradient(tiny_corpus):
    # captioning is a per-sample mean, so halves averaged equal the whole batch
    vocab, stride = tiny_corpus.vocab, tiny_corpus.config.frame_stride
    samples = [Sample(v, v.input_frames(stride), v.caption(vocab)) for v in tiny_corpus.videos[:6]]
    cfg = quick(tasks=("cap",))
    model = fresh()

    def grads(batches):
        model.zero_grad()
        for b in batches:
            loss, _ = stage12_step(model, b, cfg)
            (loss / len(batches)).backward()
        return {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}

    full, accum = grads([samples]), grads([samples[:3], samples[3:]])
    assert full.keys() == accum.keys()
    for n in full:
        assert torch.allclose(full[n], accum[n], atol=1e-6), n


def test_deterministic(tiny_corpus):
    a = run_stage(quick(), tiny_corpus, fresh(), seed=5)
    b = run_stage(quick(), tiny_corpus, fresh(), seed=5)
    assert a.metrics == b.metrics
    pa, pb = params(a.model), params(b.model)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)


def test_stage_guard(tiny_corpus):
    with pytest.raises(StagePipelineError):
        run_stage(quick(stage=3), tiny_corpus, fresh())
    run_stage(quick(stage=2, steps=1), tiny_corpus, fresh(), from_scratch=True)


def test_stage3_runs_every_task(tiny_corpus):
    res = run_stage(quick(stage=3, steps=2, batch_size=12, match_perturbed=1), tiny_corpus, fresh(), previous_stage=1)
    row = res.metrics[-1]
    for k in ("cap", "ret", "match", "loc", "qa"):
        assert row[k] > 0, k
    assert all(np.isfinite(v) for v in row.values())


def test_adapters_reinitialised_at_stage_rank_and_merged(tiny_corpus):
    model = fresh()
    prepare_stage(model, quick(adapter_rank=3))
    ranks = {p.shape[0] for n, p in model.named_parameters() if n.endswith("lora_A")}
    assert ranks == {3}
    prepare_stage(model, quick(adapter_rank=5))
    ranks = {p.shape[0] for n, p in model.named_parameters() if n.endswith("lora_A")}
    assert ranks == {5}
    res = run_stage(quick(steps=1), tiny_corpus, model)
    assert res.model.backbone.adapter is None
    assert not any("lora_" in n for n in res.model.state_dict())


def test_freeze_base_and_weight_decay_groups():
    model = fresh()
    cfg = quick(freeze_base=True, weight_decay=0.1)
    prepare_stage(model, cfg)
    opt = build_optimizer(model, cfg)
    plain, decay = opt.param_groups
    head_ids = {id(p) for p in model.head.parameters()}
    assert decay["weight_decay"] == 0.1 and plain["weight_decay"] == 0.0
    assert {id(p) for p in decay["params"]} == head_ids
    assert not any(id(p) == id(model.backbone.tok_emb.weight) for p in plain["params"])


def test_perturb_caption_differs():
    from ville.vocab import Vocab

    vocab = Vocab(n_time=4, n_symbols=10)
    rng = np.random.default_rng(0)
    cap = [vocab.symbol_token(s) for s in (1, 4, 7)]
    for _ in range(100):
        out = perturb_caption(cap, vocab, rng)
        assert out != cap and abs(len(out) - len(cap)) <= 1


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, tiny_corpus):
        model = fresh()
        res = run_stage(quick(steps=1), tiny_corpus, model)
        p1 = save_checkpoint(tmp_path / "a.ckpt", checkpoint_from_model(model, 1, 1, res.optimizer))
        loaded = model_from_checkpoint(load_checkpoint(p1))
        frames = [tiny_corpus.videos[0].input_frames(2)]
        e1, c1 = model.embed_videos(frames)
        e2, c2 = loaded.embed_videos(frames)
        assert torch.equal(e1, e2) and c1 == c2
        p2 = save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_adapter_state_survives(self, tmp_path):
        model = fresh()
        prepare_stage(model, quick(adapter_rank=2))
        ck = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", checkpoint_from_model(model, 1, 0)))
        assert model_from_checkpoint(ck).backbone.adapter.rank == 2

    def test_truncated(self, tmp_path):
        p = save_checkpoint(tmp_path / "a.ckpt", checkpoint_from_model(fresh(), 1, 0))
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(IntegrityError):
            load_checkpoint(p)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"hello" * 20)
        with pytest.raises(IntegrityError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        p = save_checkpoint(tmp_path / "a.ckpt", checkpoint_from_model(fresh(), 1, 0))
        raw = bytearray(p.read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(MigrationError):
            load_checkpoint(p)
