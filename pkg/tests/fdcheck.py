"""Central finite differences, independent of autograd."""

import torch


def central_difference(fn, tensor: torch.Tensor, index, eps: float = 1e-6) -> float:
    with torch.no_grad():
        flat = tensor.view(-1)
        orig = flat[index].item()
        flat[index] = orig + eps
        plus = float(fn())
        flat[index] = orig - eps
        minus = float(fn())
        flat[index] = orig
    return (plus - minus) / (2 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
