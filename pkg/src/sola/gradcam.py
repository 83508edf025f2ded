"""Gradient-weighted class activation maps for qualitative inspection."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def list_target_layers(model: nn.Module) -> list[str]:
    """Module names that make sense as Grad-CAM targets (conv activations)."""
    names = []
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Sequential)) and name:
            names.append(name)
    return names


def grad_cam(model: nn.Module, image: torch.Tensor, target_layer: str) -> np.ndarray:
    """Class-gradient-weighted activation map, upsampled and normalized to [0, 1].

    The scalar driving the gradients is the forgery logit (first batch
    element). Works on any model whose forward returns logits or a
    (maps, logits) pair.
    """
    modules = dict(model.named_modules())
    if target_layer not in modules or not target_layer:
        raise ValueError(
            f"unknown layer {target_layer!r}; valid layers: {', '.join(list_target_layers(model))}"
        )
    x = image[None] if image.dim() == 3 else image
    x = x.clone().requires_grad_(True)

    captured = {}

    def hook(_module, _inputs, output):
        captured["activation"] = output

    handle = modules[target_layer].register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        out = model(x)
        logits = out[1] if isinstance(out, tuple) else out
        logit = logits.reshape(-1)[0]
        activation = captured.get("activation")
        grad = (
            torch.autograd.grad(logit, activation, allow_unused=True)[0]
            if activation is not None
            else None
        )
    finally:
        handle.remove()
        model.train(was_training)
    if grad is None:
        raise ValueError(f"layer {target_layer!r} does not influence the forgery logit")

    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activation).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach().numpy()
    cam -= cam.min()
    peak = cam.max()
    if peak > 0:
        cam /= peak
    return cam


def _jet(t: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay_heatmap(image: np.ndarray, cam: np.ndarray, mix: float = 0.5) -> np.ndarray:
    """Blend a [0,1] heat map over a (H, W, 3) [0,1] image; returns uint8 RGB."""
    if image.shape[:2] != cam.shape:
        raise ValueError(f"image {image.shape[:2]} and cam {cam.shape} sizes differ")
    blended = (1 - mix) * image + mix * _jet(cam)
    return (np.clip(blended, 0, 1) * 255).round().astype(np.uint8)
