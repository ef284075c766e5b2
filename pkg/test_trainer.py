import json
import math

import pytest
import torch

from App.core.config import TrainConfig
from App.core.errors import (
    BatchTooSmallError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NonFiniteLossError,
)
from App.services.checkpoint import load_checkpoint, save_checkpoint
from App.services.gradcheck import grad_check
from App.services.synthdata import generate_records
from App.services.trainer import Trainer, latent_noise, make_batch, total_loss, train


def _snapshot(model):
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def test_untrained_losses(model, batch):
    losses = total_loss(model, batch, latent_noise(model.config, len(batch), 0))
    assert float(losses.components["L_AR"]) == pytest.approx(math.log(8))
    assert float(losses.components["L_KL"]) == 0.0


def test_total_loss_combines_enabled_terms(jittered, batch):
    config = jittered.config
    c = total_loss(jittered, batch, latent_noise(config, len(batch), 0)).components
    expected = c["L_AR"] + config.lambda1 * c["L_MAER"] + config.lambda2 * c["L_KL"]
    torch.testing.assert_close(c["L_total"], expected)
    assert float(c["L_MAER"]) >= 0 and float(c["L_KL"]) > 0


def test_baseline_reports_exact_zero_extras(tiny_config, batch):
    config = tiny_config.model_copy(update={"use_maer": False, "use_ambiguity": False})
    trainer = Trainer(config)
    report = trainer.train_step(batch)
    assert report.L_MAER == 0.0 and report.L_KL == 0.0 and report.realized_KL == 0.0
    assert report.L_total == report.L_AR


def test_maer_needs_two_records(model, records):
    with pytest.raises(BatchTooSmallError):
        total_loss(model, make_batch(records[:1]))


def test_single_record_batch_without_maer(tiny_config, records):
    config = tiny_config.model_copy(update={"use_maer": False})
    from App.services.generator import build_model

    losses = total_loss(build_model(config), make_batch(records[:1]))
    assert float(losses.components["L_MAER"]) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1, use_maer=True)
    with pytest.raises(ValueError):
        TrainConfig(lambda1=-1.0)
    assert TrainConfig(batch_size=1, use_maer=False).batch_size == 1


def test_train_step_updates_only_trainable_enabled_parameters(tiny_config, batch):
    config = tiny_config.model_copy(update={"use_ambiguity": False})
    trainer = Trainer(config)
    before = _snapshot(trainer.model)
    report = trainer.train_step(batch)
    after = _snapshot(trainer.model)
    assert report.step == 0 and trainer.step == 1
    assert report.grad_norm > 0
    for name in trainer.model.frozen_parameter_names():
        assert torch.equal(before[name], after[name]), name
    for name in before:
        if name.startswith("ambiguity."):
            assert torch.equal(before[name], after[name]), name
    assert not torch.equal(before["backbone.lr_stage.head.weight"], after["backbone.lr_stage.head.weight"])


def test_variants_share_initial_weights(tiny_config):
    from App.services.generator import build_model

    models = [build_model(tiny_config.model_copy(update={"use_maer": m, "use_ambiguity": a}))
              for m in (False, True) for a in (False, True)]
    reference = _snapshot(models[0])
    for model in models[1:]:
        for name, value in _snapshot(model).items():
            assert torch.equal(value, reference[name]), name


def test_realized_kl(tiny_config, batch):
    from App.services.gradcheck import jitter_parameters

    trainer = Trainer(tiny_config)
    jitter_parameters(trainer.model, seed=2)
    report = trainer.train_step(batch)
    assert report.L_KL > 0
    assert report.realized_KL == pytest.approx(tiny_config.lambda2 * report.L_KL)


def test_training_is_deterministic(tiny_config, records):
    config = tiny_config.model_copy(update={"steps": 3, "log_interval": 1})
    first = train(config, records)
    second = train(config, records)
    assert [r.model_dump() for r in first.reports] == [r.model_dump() for r in second.reports]


def test_batch_indices_cover_each_epoch(tiny_config):
    trainer = Trainer(tiny_config.model_copy(update={"batch_size": 4}))
    seen = [i for step in range(2) for i in trainer.batch_indices(8, step)]
    assert sorted(seen) == list(range(8))


def test_metrics_log(tmp_path, tiny_config, records):
    config = tiny_config.model_copy(update={"steps": 5, "log_interval": 2})
    path = tmp_path / "metrics.jsonl"
    result = train(config, records, metrics_path=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line["step"] for line in lines] == [0, 2, 4]
    assert set(lines[0]) == {"step", "L_AR", "L_MAER", "L_KL", "L_total", "grad_norm", "realized_KL"}
    assert len(result.reports) == 3


def test_non_finite_loss_is_reported(tiny_config, batch):
    trainer = Trainer(tiny_config)
    with torch.no_grad():
        trainer.model.backbone.hr_stage.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step(batch)
    assert info.value.component == "L_AR"


def test_memorizes_a_single_record(tiny_config):
    from App.services.evaluation import eval_alignment
    from App.models.schemas import DatasetRecord
    from App.services.synthdata import downsample_lr, make_prompt, render_scene
    from App.services.vocabulary import vocabulary

    spec = make_prompt(vocabulary.encode_prompt("blue", "checker"))
    hr = render_scene(spec.interpretations[0])
    record = DatasetRecord(prompt=list(spec.tokens), lr=list(downsample_lr(hr).cells), hr=list(hr.cells),
                           interpretation=spec.interpretations[0])
    config = tiny_config.model_copy(update={
        "use_maer": False, "use_ambiguity": False, "learning_rate": 1e-2, "weight_decay": 0.0, "steps": 300,
    })
    model = train(config, [record]).model
    assert eval_alignment(model, [record]).mean_score == 1.0


def test_checkpoint_is_byte_stable(tmp_path, tiny_config, records):
    trainer = train(tiny_config.model_copy(update={"steps": 2}), records).trainer
    a = save_checkpoint(trainer, tmp_path / "a.bin")
    b = save_checkpoint(trainer, tmp_path / "b.bin")
    assert a.read_bytes() == b.read_bytes()
    restored = load_checkpoint(a)
    assert restored.step == 2
    for name, value in _snapshot(restored.model).items():
        assert torch.equal(value, dict(trainer.model.named_parameters())[name].detach()), name


def test_resumed_run_matches_uninterrupted_run(tmp_path, tiny_config, records):
    full = train(tiny_config.model_copy(update={"steps": 4}), records).trainer

    half = train(tiny_config.model_copy(update={"steps": 2}), records).trainer
    path = save_checkpoint(half, tmp_path / "half.bin")
    rest = tiny_config.model_copy(update={"steps": 2})
    resumed = train(rest, records, trainer=load_checkpoint(path, rest)).trainer

    assert resumed.step == full.step == 4
    reference = _snapshot(full.model)
    for name, value in _snapshot(resumed.model).items():
        assert torch.equal(value, reference[name]), name


def test_checkpoint_errors(tmp_path, tiny_config, records):
    trainer = Trainer(tiny_config)
    path = save_checkpoint(trainer, tmp_path / "ckpt.bin")
    blob = path.read_bytes()

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(blob[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(truncated)

    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(foreign)

    with pytest.raises(CheckpointShapeError) as info:
        load_checkpoint(path, tiny_config.model_copy(update={"latent_dim": 4}))
    assert info.value.parameter.startswith("ambiguity.")


def test_grad_check_passes_on_tiny_model(tiny_config, batch):
    report = grad_check(tiny_config, batch)
    assert report.passed, [e for e in report.entries if not e.passed]
    frozen = {e.parameter for e in report.entries if e.frozen}
    assert "backbone.text_encoder.table" in frozen and "maer.embedder.weight" in frozen
    assert report.max_error("L_KL") <= 1e-6


def test_grad_check_flags_a_wrong_gradient(tiny_config, batch, monkeypatch):
    from App.services import trainer as trainer_module

    real_kl = trainer_module.kl_loss

    def kl_with_a_bad_gradient(mu, log_var):
        # forward value unchanged, backward doubled
        value = real_kl(mu, log_var)
        return value + (value - value.detach())

    monkeypatch.setattr(trainer_module, "kl_loss", kl_with_a_bad_gradient)
    report = grad_check(tiny_config, batch, max_entries=2)
    assert not report.passed
    assert report.max_error("L_KL") > 1e-6


def test_lambda1_enters_linearly(jittered, batch):
    eps = latent_noise(jittered.config, len(batch), 0)
    base = total_loss(jittered, batch, eps).components
    jittered.config = jittered.config.model_copy(update={"lambda1": 2 * jittered.config.lambda1})
    doubled = total_loss(jittered, batch, eps).components
    delta = float(doubled["L_total"] - base["L_total"])
    assert delta == pytest.approx(float(base["L_MAER"]) * jittered.config.lambda1 / 2, rel=1e-9, abs=1e-15)


def test_zero_steps_keeps_initialization(tiny_config, records):
    from App.services.generator import build_model

    trained = train(tiny_config.model_copy(update={"steps": 0}), records)
    assert trained.reports == [] and trained.trainer.step == 0
    reference = _snapshot(build_model(tiny_config))
    for name, value in _snapshot(trained.model).items():
        assert torch.equal(value, reference[name]), name


def test_fixed_batch_loss_survives_checkpoint(tmp_path, tiny_config, records, batch):
    from App.services.trainer import evaluate_losses

    trainer = train(tiny_config.model_copy(update={"steps": 2}), records).trainer
    before = evaluate_losses(trainer.model, batch, step=7)
    restored = load_checkpoint(save_checkpoint(trainer, tmp_path / "c.bin"))
    assert evaluate_losses(restored.model, batch, step=7) == before
