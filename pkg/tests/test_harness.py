import json
from dataclasses import replace

import numpy as np
import pytest

from gnplab.attacks import AdversarialBatch, AttackConfig, attack
from gnplab.data import Dataset, select_correctly_classified, synth_dataset
from gnplab.errors import ComparisonError, InputError
from gnplab.harness import TransferReport, ablate, asr, compare, compare_rows, evaluate_transfer, write_report
from gnplab import zoo


@pytest.fixture(scope="module")
def setup():
    train = synth_dataset(4, 600, classes=3, size=8, split="train", contrast=0.4)
    test = synth_dataset(4, 200, classes=3, size=8, split="test", contrast=0.4)
    specs = [
        zoo.ArchSpec("c", [{"type": "conv2d", "out": 4, "kernel": 3}, {"type": "relu"}, {"type": "avgpool2"},
                           {"type": "flatten"}, {"type": "affine", "out": 3}], (1, 8, 8), 3),
        zoo.ArchSpec("m", [{"type": "flatten"}, {"type": "affine", "out": 16}, {"type": "relu"},
                           {"type": "affine", "out": 3}], (1, 8, 8), 3),
        zoo.ArchSpec("l", [{"type": "flatten"}, {"type": "affine", "out": 3}], (1, 8, 8), 3),
    ]
    cfg = zoo.TrainConfig(epochs=5, learning_rate=0.02)
    models = [zoo.train(zoo.build(s, 0), train, cfg).model for s in specs]
    samples = select_correctly_classified(models, test, 30, seed=0)
    return models, samples


def _batch(perturbed, labels):
    return AdversarialBatch(perturbed, perturbed, np.asarray(labels), np.zeros(len(labels), bool))


def test_asr_extremes_and_oracle(setup):
    models, samples = setup
    assert asr(models[0], _batch(samples.images, samples.labels)) == 0.0
    wrong = (samples.labels + 1) % 3
    assert asr(models[0], _batch(samples.images, wrong)) == 1.0
    adv = attack(models[0], samples.images, samples.labels, AttackConfig(epsilon=16 / 255, steps=5))
    logits = models[1].forward(adv.perturbed)
    manual = sum(int(np.argmax(logits[i]) != adv.labels[i]) for i in range(len(adv))) / len(adv)
    assert abs(asr(models[1], adv) - manual) < 1e-12
    with pytest.raises(InputError):
        asr(models[0], _batch(np.zeros((0, 1, 8, 8)), []))


def test_transfer_report_examples(setup):
    models, samples = setup
    cfgs = [AttackConfig(epsilon=0.0, steps=2), AttackConfig(epsilon=16 / 255, steps=5)]
    rep = evaluate_transfer(models[0], models, cfgs, samples)
    assert rep.columns == ["c", "m", "l"]
    np.testing.assert_array_equal(rep.cells[0], 0.0)
    adv = attack(models[0], samples.images, samples.labels, cfgs[1])
    assert rep.cells[1, 0] == asr(models[0], adv)
    assert rep.mean_target_asr()[1] == pytest.approx(rep.cells[1, 1:].mean())
    again = evaluate_transfer(models[0], models[1:], cfgs, samples, workers=3)
    assert again.to_json() == rep.to_json()
    back = TransferReport.from_dict(json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()
    assert rep.to_csv().splitlines()[0].startswith("attack,epsilon,c*,m,l,mean_target")
    assert "c*" in rep.format_table()


def test_report_validation():
    with pytest.raises(InputError):
        TransferReport([("a", 0.1)], ["x"], "x", np.array([[1.5]]), 1)
    with pytest.raises(InputError):
        TransferReport([("a", 0.1)], ["x", "y"], "x", np.array([[0.5]]), 1)


def test_ablation_anchor_and_dedupe(setup):
    models, samples = setup
    base = AttackConfig(epsilon=8 / 255, steps=3)
    grid = ablate(models[0], models[1:], base, [0.01, 0.01, 0.02], [0.0, 0.8, 0.8], samples)
    assert grid.cells.shape == (2, 2)
    assert grid.cell(0.01, 0.0) == grid.baseline
    assert grid.cell(0.02, 0.0) == grid.baseline
    lines = grid.to_long_csv().splitlines()
    assert lines[0] == "r,beta,lambda,mean_target_asr,source_asr" and len(lines) == 5
    d = json.loads(grid.to_json())
    assert d["kind"] == "ablation"
    with pytest.raises(InputError):
        ablate(models[0], models[1:], base, [], [0.0], samples)


def test_compare_properties(setup):
    models, samples = setup
    a = evaluate_transfer(models[0], models[1:], [AttackConfig(steps=3)], samples)
    b = evaluate_transfer(models[0], models[1:], [AttackConfig(steps=3, gnp=True)], samples)
    b.rows = a.rows
    zero = compare(a, a)
    np.testing.assert_array_equal(zero.delta, 0.0)
    assert zero.summary == 0.0
    np.testing.assert_array_equal(compare(a, b).delta, -compare(b, a).delta)
    other = Dataset(samples.images[:10], samples.labels[:10], 3)
    c = evaluate_transfer(models[0], models[1:], [AttackConfig(steps=3)], other)
    with pytest.raises(ComparisonError):
        compare(a, c)
    d = evaluate_transfer(models[1], [models[0], models[2]], [AttackConfig(steps=3)], samples)
    with pytest.raises(ComparisonError):
        compare(a, d)


def test_compare_rows(setup):
    models, samples = setup
    cfgs = [AttackConfig(steps=3), AttackConfig(steps=3, gnp=True)]
    rep = evaluate_transfer(models[0], models[1:], cfgs, samples)
    m = rep.mean_target_asr()
    assert compare_rows(rep, "I-FGSM+GNP", "I-FGSM", cfgs[0].epsilon) == m[1] - m[0]


def test_write_report_is_content_addressed(tmp_path):
    p1 = write_report("hello\n", tmp_path, "r", "txt")
    p2 = write_report("hello\n", tmp_path, "r", "txt")
    p3 = write_report("other\n", tmp_path, "r", "txt")
    assert p1 == p2 != p3
    assert p1.read_text() == "hello\n"
