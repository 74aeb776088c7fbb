import math

import pytest
import torch

from fdcheck import central_difference
from gdpose.graphs import build_pose_chain_graph
from gdpose.model import relative_messages
from gdpose.objective import BalanceParams, absolute_pose_loss, relative_pose_loss, total_loss

pytestmark = pytest.mark.usefixtures("float64")


def decoded_from(poses_by_layer, chain):
    out = {}
    for layer, p in poses_by_layer.items():
        rel, pairs = relative_messages(p, chain)
        out[layer] = {"absolute": p, "relative": rel, "pairs": pairs}
    return out


def test_absolute_examples():
    p = torch.randn(6)
    assert absolute_pose_loss(p, p, BalanceParams(0, 0, 0, 0)).item() == 0.0
    assert absolute_pose_loss(p, p, BalanceParams(0.7, -1.2, 0, 0)).item() == pytest.approx(0.7 - 1.2, abs=1e-15)
    target = torch.zeros(6)
    pred = torch.tensor([1.0, 0, 0, 0, 0, 0])
    value = absolute_pose_loss(pred, target, BalanceParams(math.log(2), 0, 0, 0)).item()
    assert value == pytest.approx(1.193147, abs=1e-6)


def test_relative_examples():
    p = torch.randn(6)
    assert relative_pose_loss(p, p, BalanceParams(0, 0, 0, 0)).item() == 0.0
    assert relative_pose_loss(p, p, BalanceParams(5, 5, 0.25, -0.5)).item() == pytest.approx(-0.25, abs=1e-15)
    pred = torch.tensor([2.0, 0, 0, 0, -1.0, 0])
    assert relative_pose_loss(pred, torch.zeros(6), BalanceParams(9, 9, 0, 0)).item() == 3.0


def test_l2_norm_option():
    pred = torch.tensor([3.0, 4.0, 0, 0, 0, 0])
    assert absolute_pose_loss(pred, torch.zeros(6), BalanceParams(0, 0, 0, 0), norm="l2").item() == pytest.approx(5.0)


def test_single_frame_has_no_relative_terms():
    chain = build_pose_chain_graph(1)
    bp = BalanceParams(0.1, 0.2, 0.3, 0.4)
    targets = torch.randn(1, 6)
    preds = {"3": torch.randn(1, 6), "L": torch.randn(1, 6)}
    br = total_loss(decoded_from(preds, chain), targets, bp, chain)
    assert br.relative == {}
    expected = sum(absolute_pose_loss(p, targets, bp).sum() for p in preds.values())
    assert br.total.item() == pytest.approx(expected.item(), abs=1e-12)


def test_perfect_prediction_zero_and_alpha_beta_sum():
    chain = build_pose_chain_graph(3)
    targets = torch.randn(3, 6)
    preds = {l: targets.clone() for l in ("3", "4", "L")}
    assert total_loss(decoded_from(preds, chain), targets, BalanceParams(0, 0, 0, 0), chain).total.item() == 0.0
    bp = BalanceParams(0.5, -0.25, 0.125, 0.75)
    br = total_loss(decoded_from(preds, chain), targets, bp, chain)
    # 3 layers x (3 frames x (a + b) + 4 directed pairs x (g + l))
    assert br.total.item() == 3 * (3 * 0.25 + 4 * 0.875)


def test_two_frame_hand_sum():
    chain = build_pose_chain_graph(2)
    targets = torch.tensor([[0.0, 0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0, 0]])
    pred = torch.tensor([[0.5, 0, 0, 0, 0.1, 0], [1.0, -1.0, 0, 0, 0, 0]])
    bp = BalanceParams(0.0, 0.0, 0.0, 0.0)
    # absolute: frame0 |0.5| + |0.1|; frame1 |1| -> 1.6
    # relative (1-0): pred (0.5,-1,0 | 0,-0.1,0) vs target (1,0,0 | 0,0,0): 0.5+1 + 0.1 = 1.6; both directions -> 3.2
    br = total_loss(decoded_from({"L": pred}, chain), targets, bp, chain)
    assert br.absolute["L"].item() == pytest.approx(1.6, abs=1e-12)
    assert br.relative["L"].item() == pytest.approx(3.2, abs=1e-12)
    assert br.total.item() == pytest.approx(4.8, abs=1e-12)


def test_total_is_sum_of_parts_and_layer_removal():
    torch.manual_seed(0)
    chain = build_pose_chain_graph(4)
    targets = torch.randn(2, 4, 6)
    preds = {l: torch.randn(2, 4, 6) for l in ("3", "4", "L")}
    bp = BalanceParams()
    full = total_loss(decoded_from(preds, chain), targets, bp, chain)
    assert full.total.item() == (sum(full.absolute.values()) + sum(full.relative.values())).item()
    partial = total_loss(decoded_from(preds, chain), targets, bp, chain, layers=("4", "L"))
    assert (full.total - partial.total).item() == pytest.approx((full.absolute["3"] + full.relative["3"]).item(), abs=1e-12)


def test_missing_layer_raises():
    chain = build_pose_chain_graph(2)
    with pytest.raises(KeyError):
        total_loss(decoded_from({"L": torch.zeros(2, 6)}, chain), torch.zeros(2, 6), BalanceParams(), chain, layers=("3", "L"))


def test_alpha_gradient_is_one_at_perfect_prediction():
    chain = build_pose_chain_graph(1)
    targets = torch.randn(1, 6)
    bp = BalanceParams(0.3, -1.0, 0.0, 0.0)

    def loss():
        return total_loss(decoded_from({"L": targets.clone()}, chain), targets, bp, chain).total

    loss().backward()
    assert float(bp.alpha.grad) == pytest.approx(1.0, abs=1e-12)
    assert central_difference(loss, bp.alpha.data, 0) == pytest.approx(1.0, abs=1e-6)


def test_reordering_frames_with_targets_is_invariant():
    torch.manual_seed(1)
    chain = build_pose_chain_graph(5)
    targets, pred = torch.randn(5, 6), torch.randn(5, 6)
    bp = BalanceParams()
    base = total_loss(decoded_from({"L": pred}, chain), targets, bp, chain).total
    rev = torch.arange(4, -1, -1)
    flipped = total_loss(decoded_from({"L": pred[rev]}, chain), targets[rev], bp, chain).total
    assert base.item() == pytest.approx(flipped.item(), rel=1e-14)


def test_non_negative_for_non_negative_balances():
    torch.manual_seed(2)
    chain = build_pose_chain_graph(3)
    for _ in range(20):
        bp = BalanceParams(*torch.rand(4).tolist())
        out = total_loss(decoded_from({"L": torch.randn(3, 6)}, chain), torch.randn(3, 6), bp, chain).total
        assert out.item() >= 0
    bp = BalanceParams(-2, -3, -2, -3)
    assert torch.isfinite(total_loss(decoded_from({"L": torch.randn(3, 6)}, chain), torch.randn(3, 6), bp, chain).total)
