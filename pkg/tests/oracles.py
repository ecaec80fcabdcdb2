"""Independent reference computations used by the tests."""
import math

import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (every coordinate)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_agreement(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8, rtol: float = 1e-4):
    """Fraction of coordinates with |g| > floor whose relative error is below rtol."""
    a, n = analytic.flatten(), numeric.flatten()
    keep = a.abs() > floor
    rel = (a[keep] - n[keep]).abs() / torch.maximum(a[keep].abs(), n[keep].abs())
    return float((rel < rtol).double().mean()), int(keep.sum())


def contrastive_by_enumeration(sim, positives, temperature, num_anchors=None):
    """Per-anchor -log(exp(s_ip/t) / sum_{k != i} exp(s_ik/t)) with plain loops."""
    rows = len(sim) if num_anchors is None else num_anchors
    out = []
    for i in range(rows):
        denom = sum(math.exp(float(sim[i][k]) / temperature) for k in range(len(sim[i])) if k != i)
        num = math.exp(float(sim[i][int(positives[i])]) / temperature)
        out.append(-math.log(num / denom))
    return out


def binary_logistic_fgsm(x, w, b, label, eps):
    """Closed-form FGSM for p(y=1) = sigmoid(w.x + b): the loss gradient sign is -sign(w) for y=1, +sign(w) for y=0."""
    direction = -torch.sign(w) if label == 1 else torch.sign(w)
    return torch.clamp(x + eps * direction, 0, 1)
