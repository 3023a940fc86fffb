import math

import pytest
import torch
import torch.nn.functional as F

from continual_repr.config import ObjectiveConfig
from continual_repr.errors import (
    DegenerateBatchError,
    LabelOutOfRangeError,
    NoPositiveError,
    ShapeMismatchError,
    ZeroVectorError,
)
from continual_repr.objectives import (
    ViewOutputs,
    barlow_twins_loss,
    ce_loss,
    cosine_distill_loss,
    cosine_softmax_loss,
    objective_loss,
    simclr_loss,
    supcon_loss,
)

TRIALS = 100


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _supcon_oracle(z: torch.Tensor, labels: list[int], tau: float) -> float:
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(n) if a != i)
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        log_probs = [math.log(math.exp(float(z[i] @ z[p]) / tau) / denom) for p in positives]
        total += -sum(log_probs) / len(log_probs)
    return total / n


def _simclr_oracle(z1: torch.Tensor, z2: torch.Tensor, tau: float) -> float:
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    n = z.shape[0]
    b = n // 2
    total = 0.0
    for i in range(n):
        pos = (i + b) % n
        denom = sum(math.exp(float(z[i] @ z[k]) / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(float(z[i] @ z[pos]) / tau) / denom)
    return total / n


def _barlow_oracle(z1: torch.Tensor, z2: torch.Tensor, lambd: float) -> float:
    b, d = z1.shape

    def standardize(z: torch.Tensor) -> list[list[float]]:
        cols = []
        for j in range(d):
            col = [float(z[i, j]) for i in range(b)]
            mean = sum(col) / b
            std = math.sqrt(sum((v - mean) ** 2 for v in col) / b)
            cols.append([(v - mean) / std for v in col])
        return cols

    a, c = standardize(z1), standardize(z2)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            cij = sum(a[i][k] * c[j][k] for k in range(b)) / b
            loss += (1 - cij) ** 2 if i == j else lambd * cij**2
    return loss


def test_ce_loss_reference_values() -> None:
    uniform = float(ce_loss(torch.zeros(3, 10), torch.tensor([0, 4, 9])))
    assert uniform == pytest.approx(math.log(10))
    big = torch.tensor([[1000.0, 0.0, 0.0]])
    assert float(ce_loss(big, torch.tensor([0]))) == pytest.approx(0.0, abs=1e-6)
    value = float(ce_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0])))
    assert value == pytest.approx(0.313262, abs=1e-6)


def test_ce_loss_label_range() -> None:
    with pytest.raises(LabelOutOfRangeError):
        ce_loss(torch.zeros(2, 3), torch.tensor([0, 3]))
    with pytest.raises(LabelOutOfRangeError):
        ce_loss(torch.zeros(2, 3), torch.tensor([-1, 0]))


def test_cosine_softmax_reference_values() -> None:
    weights = torch.eye(3)[:2]
    orthogonal = torch.tensor([[0.0, 0.0, 2.0]])
    value = float(cosine_softmax_loss(orthogonal, weights, torch.tensor([1]), 0.1))
    assert value == pytest.approx(math.log(2), abs=1e-6)

    on_target = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    value = float(cosine_softmax_loss(on_target, weights.double(), torch.tensor([0]), 0.1))
    assert value == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-6)
    assert value == pytest.approx(4.54e-5, rel=1e-2)


def test_cosine_softmax_is_scale_invariant() -> None:
    g = _gen(0)
    feats = torch.randn(6, 5, generator=g, dtype=torch.float64)
    weights = torch.randn(3, 5, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    base = float(cosine_softmax_loss(feats, weights, labels, 0.1))
    scaled = float(cosine_softmax_loss(5 * feats, weights, labels, 0.1))
    assert scaled == pytest.approx(base, abs=1e-9)
    scaled_rows = weights * torch.tensor([[2.0], [0.5], [7.0]], dtype=torch.float64)
    scaled = float(cosine_softmax_loss(feats, scaled_rows, labels, 0.1))
    assert scaled == pytest.approx(base, abs=1e-9)


def test_cosine_softmax_zero_vectors() -> None:
    with pytest.raises(ZeroVectorError):
        cosine_softmax_loss(torch.zeros(1, 3), torch.eye(3), torch.tensor([0]), 0.1)
    weights = torch.eye(3)
    weights[1] = 0
    with pytest.raises(ZeroVectorError):
        cosine_softmax_loss(torch.ones(1, 3), weights, torch.tensor([0]), 0.1)


def test_supcon_analytic_cases() -> None:
    e1 = torch.tensor([1.0, 0.0])
    same = torch.stack([e1, e1])
    assert float(supcon_loss(same, torch.tensor([3, 3]), 0.1)) == pytest.approx(0.0, abs=1e-6)

    e2 = torch.tensor([0.0, 1.0])
    four = torch.stack([e1, e1, e2, e2])
    value = float(supcon_loss(four, torch.tensor([0, 0, 1, 1]), 1.0))
    assert value == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-6)
    assert value == pytest.approx(0.551444, abs=1e-6)


def test_supcon_needs_positives() -> None:
    z = F.normalize(torch.randn(3, 4), dim=1)
    with pytest.raises(NoPositiveError):
        supcon_loss(z, torch.tensor([0, 0, 1]), 0.1)


def test_supcon_matches_oracle() -> None:
    for trial in range(TRIALS):
        g = _gen(trial)
        n = 2 * int(torch.randint(2, 5, (1,), generator=g))
        z = F.normalize(torch.randn(n, 8, generator=g, dtype=torch.float64), dim=1)
        half = torch.randint(0, 3, (n // 2,), generator=g)
        labels = torch.cat([half, half])
        expected = _supcon_oracle(z, labels.tolist(), 0.5)
        assert float(supcon_loss(z, labels, 0.5)) == pytest.approx(expected, abs=1e-5)


def test_simclr_analytic_cases() -> None:
    z = torch.tensor([[0.3, 0.4]])
    assert float(simclr_loss(z, z.clone(), 0.1)) == pytest.approx(0.0, abs=1e-6)

    pair = torch.eye(2)
    value = float(simclr_loss(pair, pair.clone(), 1.0))
    assert value == pytest.approx(math.log(1 + 2 / math.e), abs=1e-6)


def test_simclr_matches_oracle() -> None:
    for trial in range(TRIALS):
        g = _gen(1000 + trial)
        b = int(torch.randint(1, 9, (1,), generator=g))
        z1 = torch.randn(b, 16, generator=g, dtype=torch.float64)
        z2 = torch.randn(b, 16, generator=g, dtype=torch.float64)
        expected = _simclr_oracle(z1, z2, 0.2)
        assert float(simclr_loss(z1, z2, 0.2)) == pytest.approx(expected, abs=1e-5)


def test_supcon_with_one_positive_reduces_to_simclr() -> None:
    for trial in range(10):
        g = _gen(2000 + trial)
        z1 = F.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1)
        z2 = F.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1)
        ids = torch.arange(5)
        sup = supcon_loss(torch.cat([z1, z2]), torch.cat([ids, ids]), 0.3)
        assert float(sup) == pytest.approx(float(simclr_loss(z1, z2, 0.3)), abs=1e-9)


def test_barlow_analytic_cases() -> None:
    a = torch.tensor([1.0, 1.0, -1.0, -1.0])
    b = torch.tensor([1.0, -1.0, 1.0, -1.0])
    z = torch.stack([a, b], dim=1)
    assert float(barlow_twins_loss(z, z.clone(), 0.005)) == pytest.approx(0.0, abs=1e-6)

    c = a * b  # orthogonal to a, b and the constant vector
    uncorrelated = torch.stack([c, c], dim=1)
    assert float(barlow_twins_loss(z, uncorrelated, 0.005)) == pytest.approx(2.0, abs=1e-6)


def test_barlow_degenerate_batches() -> None:
    with pytest.raises(DegenerateBatchError):
        barlow_twins_loss(torch.randn(1, 4), torch.randn(1, 4), 0.005)
    z = torch.randn(6, 3)
    z[:, 1] = 2.0
    with pytest.raises(DegenerateBatchError):
        barlow_twins_loss(z, torch.randn(6, 3), 0.005)


def test_barlow_matches_oracle() -> None:
    for trial in range(TRIALS):
        g = _gen(3000 + trial)
        z1 = torch.randn(8, 4, generator=g, dtype=torch.float64)
        z2 = torch.randn(8, 4, generator=g, dtype=torch.float64)
        expected = _barlow_oracle(z1, z2, 0.005)
        assert float(barlow_twins_loss(z1, z2, 0.005)) == pytest.approx(expected, abs=1e-5)


def test_losses_are_permutation_invariant() -> None:
    g = _gen(7)
    z1 = torch.randn(6, 8, generator=g, dtype=torch.float64)
    z2 = torch.randn(6, 8, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    perm = torch.randperm(6, generator=g)

    assert float(simclr_loss(z1[perm], z2[perm], 0.1)) == pytest.approx(
        float(simclr_loss(z1, z2, 0.1)), abs=1e-6
    )
    assert float(barlow_twins_loss(z1[perm], z2[perm], 0.005)) == pytest.approx(
        float(barlow_twins_loss(z1, z2, 0.005)), abs=1e-6
    )
    z = F.normalize(z1, dim=1)
    assert float(supcon_loss(z[perm], labels[perm], 0.1)) == pytest.approx(
        float(supcon_loss(z, labels, 0.1)), abs=1e-6
    )


def test_losses_are_non_negative() -> None:
    g = _gen(11)
    for _ in range(20):
        z1 = torch.randn(4, 6, generator=g)
        z2 = torch.randn(4, 6, generator=g)
        assert float(simclr_loss(z1, z2, 0.1)) >= 0
        assert float(barlow_twins_loss(z1, z2, 0.005)) >= 0
        z = F.normalize(torch.cat([z1, z2]), dim=1)
        assert float(supcon_loss(z, torch.tensor([0, 1, 0, 1] * 2), 0.1)) >= 0


def test_shape_checks() -> None:
    with pytest.raises(ShapeMismatchError):
        simclr_loss(torch.randn(4, 3), torch.randn(5, 3), 0.1)
    with pytest.raises(ShapeMismatchError):
        barlow_twins_loss(torch.randn(4, 3), torch.randn(4, 2), 0.005)


def test_cosine_distill_range() -> None:
    x = torch.tensor([[1.0, 0.0]])
    assert float(cosine_distill_loss(x, x)) == pytest.approx(0.0)
    assert float(cosine_distill_loss(x, torch.tensor([[0.0, 3.0]]))) == pytest.approx(1.0)
    assert float(cosine_distill_loss(x, -x)) == pytest.approx(2.0)


def test_objective_dispatch() -> None:
    g = _gen(5)
    labels = torch.tensor([0, 1, 0, 1])
    logits = torch.randn(4, 2, generator=g)
    sl = ObjectiveConfig(name="sl")
    outputs = ViewOutputs(features=(torch.randn(4, 3),), projected=(None,), logits=logits)
    value = objective_loss(sl, outputs, labels, local_labels=labels)
    assert torch.equal(value, ce_loss(logits, labels))

    z1, z2 = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
    two = ViewOutputs(features=(z1, z2), projected=(z1, z2))
    barlow = ObjectiveConfig(name="barlow")
    assert torch.equal(objective_loss(barlow, two, labels), barlow_twins_loss(z1, z2, 0.005))
    simclr = ObjectiveConfig(name="simclr")
    assert torch.equal(objective_loss(simclr, two, labels), simclr_loss(z1, z2, 0.1))

    trex = ObjectiveConfig(name="trex")
    head_in = torch.randn(4, 6, generator=g)
    weights = torch.randn(2, 6, generator=g)
    out = ViewOutputs(features=(z1,), projected=(z1,), head_input=head_in)
    value = objective_loss(trex, out, labels, local_labels=labels, class_weights=weights)
    assert torch.equal(value, cosine_softmax_loss(head_in, weights, labels, 0.1))

    with pytest.raises(ValueError):
        objective_loss(barlow, ViewOutputs(features=(z1,), projected=(z1, None)), labels)
