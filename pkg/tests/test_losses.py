import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from wrimnet.backbone import IR, VIS
from wrimnet.losses import (LossConfig, check_cmkic_batch, cls_loss, cmkic_directional, cmkic_loss,
                            id_loss_p4, select_key_instances, total_loss, triplet_batch_hard)


def unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def make_batch(rng, n_ids, per_mod, d=8):
    """Random unit z with ``per_mod`` VIS and IR samples per identity, shuffled."""
    ids = np.repeat(np.arange(n_ids), 2 * per_mod)
    mods = np.tile(np.repeat([VIS, IR], per_mod), n_ids)
    perm = rng.permutation(len(ids))
    return unit(rng, len(ids), d), ids[perm], mods[perm]


def oracle_directional(z, ids, mods, anchor_mod, tau, top_k):
    """Term-by-term transcription with plain Python loops and a full sort."""
    total = 0.0
    n = len(ids)
    for i in range(n):
        if mods[i] != anchor_mod:
            continue
        others = [j for j in range(n) if mods[j] != anchor_mod]
        same = [j for j in others if ids[j] == ids[i]]
        sims = {j: sum(z[i][d] * z[j][d] for d in range(len(z[i]))) for j in others}
        ranked = sorted(same, key=lambda j: (sims[j], j))
        pos = ranked[:top_k]
        A = [j for j in others if ids[j] != ids[i]] + pos
        denom = sum(math.exp(sims[a] / tau) for a in A)
        total += (-1.0 / top_k) * sum(math.log(math.exp(sims[p] / tau) / denom) for p in pos)
    return total


def oracle_cmkic(z, ids, mods, tau, top_k):
    return 0.5 * (oracle_directional(z, ids, mods, IR, tau, top_k) +
                  oracle_directional(z, ids, mods, VIS, tau, top_k))


# -- key-instance selection ---------------------------------------------------


def test_select_least_similar():
    sims = [0.9, 0.8, 0.2, 0.4, 0.6, 0.1]
    anchor = torch.tensor([1.0, 0.0])
    cand = torch.tensor([[s, math.sqrt(1 - s * s)] for s in sims], dtype=torch.float64)
    idx = select_key_instances(anchor, cand, [3] * 6, 3, top_k=4)
    assert sorted(idx.tolist()) == [2, 3, 4, 5]
    assert idx.tolist() == [5, 2, 3, 4]


def test_select_exhaustive_case(rng):
    cand = torch.from_numpy(unit(rng, 7, 4))
    ids = [1, 2, 1, 1, 2, 2, 1]
    idx = select_key_instances(cand[0], cand, ids, 1, top_k=4)
    assert sorted(idx.tolist()) == [0, 2, 3, 6]


def test_select_ties_prefer_lower_index():
    cand = torch.tensor([[0.5], [0.2], [0.2], [0.2], [0.9]])
    idx = select_key_instances(torch.tensor([1.0]), cand, [0] * 5, 0, top_k=2)
    assert idx.tolist() == [1, 2]


def test_select_rejects_too_few():
    with pytest.raises(ValueError):
        select_key_instances(torch.ones(2), torch.ones(3, 2), [0, 1, 1], 0, top_k=2)


# -- CMKIC --------------------------------------------------------------------


def test_cmkic_no_negatives_is_zero():
    z = torch.tensor([[1.0, 0.0], [0.6, 0.8]], dtype=torch.float64)
    cfg = LossConfig(tau=1.0, top_k=1)
    assert cmkic_directional(z, [0, 0], [VIS, IR], VIS, cfg).item() == 0.0
    assert cmkic_loss(z, [0, 0], [VIS, IR], cfg).item() == 0.0


def test_cmkic_small_batch_matches_oracle(rng):
    z, ids, mods = make_batch(rng, 2, 2)
    cfg = LossConfig(tau=1.0, top_k=1)
    got = cmkic_directional(torch.from_numpy(z), ids, mods, VIS, cfg).item()
    assert got == pytest.approx(oracle_directional(z, ids, mods, VIS, 1.0, 1), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_cmkic_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    n_ids, per = int(rng.integers(2, 5)), int(rng.integers(2, 7))
    top_k = int(rng.integers(1, per + 1))
    tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
    z, ids, mods = make_batch(rng, n_ids, per)
    got = cmkic_loss(torch.from_numpy(z), ids, mods, LossConfig(tau=tau, top_k=top_k)).item()
    assert got == pytest.approx(oracle_cmkic(z, ids, mods, tau, top_k), rel=1e-9)


def test_cmkic_is_mean_of_directions(rng):
    z, ids, mods = make_batch(rng, 3, 3)
    cfg = LossConfig(tau=0.5, top_k=2)
    zt = torch.from_numpy(z)
    a = cmkic_directional(zt, ids, mods, IR, cfg)
    b = cmkic_directional(zt, ids, mods, VIS, cfg)
    assert cmkic_loss(zt, ids, mods, cfg).item() == (0.5 * (a + b)).item()


def test_cmkic_modality_swap_symmetry(rng):
    z, ids, mods = make_batch(rng, 3, 3)
    cfg = LossConfig(tau=0.3, top_k=2)
    zt = torch.from_numpy(z)
    swapped = 1 - mods
    assert cmkic_directional(zt, ids, mods, VIS, cfg).item() == pytest.approx(
        oracle_directional(z, ids, swapped, IR, 0.3, 2), rel=1e-12)
    assert cmkic_directional(zt, ids, swapped, IR, cfg).item() == pytest.approx(
        cmkic_directional(zt, ids, mods, VIS, cfg).item(), rel=1e-12)
    assert cmkic_loss(zt, ids, swapped, cfg).item() == pytest.approx(cmkic_loss(zt, ids, mods, cfg).item())


def test_cmkic_permutation_invariant(rng):
    z, ids, mods = make_batch(rng, 3, 4)
    cfg = LossConfig(tau=0.2, top_k=3)
    base = cmkic_loss(torch.from_numpy(z), ids, mods, cfg).item()
    perm = rng.permutation(len(ids))
    permuted = cmkic_loss(torch.from_numpy(z[perm]), ids[perm], mods[perm], cfg).item()
    assert permuted == pytest.approx(base, rel=1e-6)


def test_cmkic_temperature_scaling(rng):
    z, ids, mods = make_batch(rng, 3, 3)
    zt = torch.from_numpy(z)
    c = 2.5
    # tau * c on z  ==  tau on z / sqrt(c)-scaled pairs: compare against the oracle on scaled sims
    a = cmkic_loss(zt, ids, mods, LossConfig(tau=0.4 * c, top_k=2)).item()
    b = oracle_cmkic(z / math.sqrt(c), ids, mods, 0.4, 2)
    assert a == pytest.approx(b, rel=1e-9)


def test_cmkic_mean_flag(rng):
    z, ids, mods = make_batch(rng, 2, 3)
    zt = torch.from_numpy(z)
    summed = cmkic_directional(zt, ids, mods, VIS, LossConfig(top_k=2))
    mean = cmkic_directional(zt, ids, mods, VIS, LossConfig(top_k=2, cmkic_mean=True))
    assert mean.item() == pytest.approx(summed.item() / 6)


def test_cmkic_nonnegative_and_monotone(rng):
    # one VIS anchor so that moving a negative changes exactly one similarity
    z = unit(rng, 5, 6)
    ids = np.array([0, 0, 0, 1, 1])
    mods = np.array([VIS, IR, IR, IR, IR])
    cfg = LossConfig(tau=0.5, top_k=1)
    losses = []
    for t in np.linspace(0, 0.95, 8):
        moved = z.copy()
        moved[3] = (1 - t) * z[3] + t * z[0]
        moved[3] /= np.linalg.norm(moved[3])
        losses.append(cmkic_directional(torch.from_numpy(moved), ids, mods, VIS, cfg).item())
    assert min(losses) >= 0
    assert all(b >= a for a, b in zip(losses, losses[1:]))


def test_cmkic_rejects_short_batch():
    z = torch.eye(4, dtype=torch.float64)
    with pytest.raises(ValueError):
        cmkic_loss(z, [0, 0, 0, 1], [VIS, IR, VIS, IR], LossConfig(top_k=1))
    with pytest.raises(ValueError):
        check_cmkic_batch([0, 0, 0], [VIS, IR, IR], top_k=3)


def test_cmkic_rejects_missing_anchor_modality():
    with pytest.raises(ValueError):
        cmkic_directional(torch.eye(2), [0, 0], [IR, IR], VIS, LossConfig(top_k=1))


def test_cmkic_gradcheck(rng):
    z, ids, mods = make_batch(rng, 2, 4)
    cfg = LossConfig(tau=1.0, top_k=2)
    zt = torch.from_numpy(z).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda t: cmkic_loss(t, ids, mods, cfg), (zt,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


# -- classification / triplet / totals ---------------------------------------


def test_cls_loss_arithmetic():
    # three heads whose CE values are 1.2, 0.9, 0.9 via two-class logits
    def logits_for(ce):
        return torch.tensor([[0.0, math.log(math.exp(ce) - 1)]], dtype=torch.float64)

    got = cls_loss([logits_for(1.2), logits_for(0.9), logits_for(0.9)], [0])
    assert got.item() == pytest.approx(1.0, abs=1e-12)


def test_cls_loss_uniform_logits():
    assert cls_loss([torch.zeros(4, 7)] * 3, [0, 1, 2, 6]).item() == pytest.approx(math.log(7), rel=1e-6)


def test_cls_loss_matches_direct(rng):
    logits = [rng.standard_normal((5, 4)) for _ in range(3)]
    labels = rng.integers(0, 4, size=5)
    expected = 0.0
    for lg in logits:
        ce = [-(lg[b, labels[b]] - math.log(sum(math.exp(v) for v in lg[b]))) for b in range(5)]
        expected += sum(ce) / 5
    expected /= 3
    got = cls_loss([torch.from_numpy(l) for l in logits], labels).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_cls_loss_label_range():
    with pytest.raises(ValueError):
        cls_loss([torch.zeros(2, 3)], [0, 3])


def test_cls_loss_gradcheck(rng):
    lg = [torch.from_numpy(rng.standard_normal((4, 5))).requires_grad_(True) for _ in range(3)]
    labels = [0, 3, 1, 4]
    assert torch.autograd.gradcheck(lambda a, b, c: cls_loss([a, b, c], labels), tuple(lg), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def triplet_oracle(x, ids, margin):
    n = len(ids)
    d = lambda a, b: math.sqrt(sum((x[a][k] - x[b][k]) ** 2 for k in range(len(x[a]))))
    total = 0.0
    for a in range(n):
        hp = max(d(a, p) for p in range(n) if p != a and ids[p] == ids[a])
        hn = min(d(a, q) for q in range(n) if ids[q] != ids[a])
        total += max(0.0, margin + hp - hn)
    return total / n


def test_triplet_identical_features_give_margin():
    x = torch.ones(6, 3, dtype=torch.float64)
    assert triplet_batch_hard(x, [0, 0, 1, 1, 2, 2], 0.3).item() == pytest.approx(0.3, abs=1e-9)


def test_triplet_well_separated_is_zero():
    x = torch.tensor([[0.0, 0], [0.1, 0], [10, 0], [10.1, 0]], dtype=torch.float64)
    assert triplet_batch_hard(x, [0, 0, 1, 1], 0.3).item() == 0.0


def test_triplet_matches_exhaustive_scan(rng):
    x = rng.standard_normal((8, 5))
    ids = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    got = triplet_batch_hard(torch.from_numpy(x), ids, 0.3).item()
    assert got == pytest.approx(triplet_oracle(x, ids, 0.3), rel=1e-12)


def test_triplet_gradcheck(rng):
    x = torch.from_numpy(rng.standard_normal((8, 4))).requires_grad_(True)
    ids = [0, 0, 1, 1, 2, 2, 3, 3]
    assert torch.autograd.gradcheck(lambda t: triplet_batch_hard(t, ids, 5.0), (x,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def test_triplet_precondition():
    with pytest.raises(ValueError):
        triplet_batch_hard(torch.randn(3, 2), [0, 1, 2], 0.3)


def test_id_loss_p4_composition(rng):
    qg = torch.from_numpy(rng.standard_normal((6, 4)))
    ids = [0, 0, 1, 1, 2, 2]
    lg = [torch.from_numpy(rng.standard_normal((6, 3))) for _ in range(2)]
    cfg = LossConfig(margin=0.3)
    expected = cls_loss(lg, ids) + triplet_batch_hard(qg, ids, 0.3)
    assert id_loss_p4(qg, lg, ids, cfg).item() == pytest.approx(expected.item(), rel=1e-12)
    # M = 0: the CE part is CE on Qg's head alone
    single = id_loss_p4(qg, lg[:1], ids, cfg) - triplet_batch_hard(qg, ids, 0.3)
    assert single.item() == pytest.approx(F.cross_entropy(lg[0], torch.tensor(ids)).item(), rel=1e-12)


def test_total_loss_weights():
    cfg = LossConfig(lambda1=0.5, lambda2=0.1)
    assert float(total_loss(torch.tensor(1.0, dtype=torch.float64), 2.0, 3.0, cfg)) == pytest.approx(2.3)
    assert float(total_loss(1.5, 2.0, 3.0, LossConfig(lambda1=0, lambda2=0))) == 1.5
    assert float(total_loss(0.0, 0.0, 0.0, cfg)) == 0.0
    with pytest.raises(FloatingPointError):
        total_loss(float("nan"), 0.0, 0.0, cfg)


def test_default_weights():
    cfg = LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.top_k, cfg.tau, cfg.margin) == (0.5, 0.1, 4, 0.1, 0.3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_selection_is_full_sort_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    ids = rng.integers(0, 3, size=n)
    ids[0] = 0
    k = int(rng.integers(1, int((ids == 0).sum()) + 1))
    # coarse values make ties common
    sims = rng.integers(-3, 4, size=n) / 4.0
    cand = torch.from_numpy(sims[:, None])
    got = select_key_instances(torch.tensor([1.0], dtype=torch.float64), cand, ids, 0, k).tolist()
    expected = sorted((j for j in range(n) if ids[j] == 0), key=lambda j: (sims[j], j))[:k]
    assert got == expected
