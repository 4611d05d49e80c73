"""Differentiable normalized cross-correlation of a template over a search region."""

from __future__ import annotations

import torch
import torch.nn.functional as F

# Patches with less variance than this count as flat and score 0.
FLAT_VARIANCE = 1e-10


def ncc_response(template: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """NCC score of *template* at every valid offset of *search*.

    Both inputs are ``C x h x w`` / ``C x H x W``; the result is
    ``(H - h + 1) x (W - w + 1)`` with values in ``[-1, 1]``. Flat patches
    (or a flat template) score exactly 0.
    """
    if template.ndim != 3 or search.ndim != 3:
        raise ValueError("template and search must be C x H x W tensors")
    if template.shape[0] != search.shape[0]:
        raise ValueError(
            f"channel mismatch: template {template.shape[0]}, search {search.shape[0]}"
        )
    c, th, tw = template.shape
    if th > search.shape[1] or tw > search.shape[2]:
        raise ValueError(
            f"template {th}x{tw} does not fit in search {tuple(search.shape[1:])}"
        )
    template = template.to(search.dtype)
    n = c * th * tw
    centered = template - template.mean()
    template_norm = centered.pow(2).sum().sqrt()

    s = search.unsqueeze(0)
    ones = torch.ones(1, c, th, tw, dtype=search.dtype, device=search.device)
    patch_sum = F.conv2d(s, ones)[0, 0]
    patch_sq_sum = F.conv2d(s * s, ones)[0, 0]
    cross = F.conv2d(s, centered.unsqueeze(0))[0, 0]
    patch_var = (patch_sq_sum - patch_sum * patch_sum / n).clamp_min(0.0)

    denom = patch_var.clamp_min(FLAT_VARIANCE).sqrt() * template_norm
    flat = (patch_var <= FLAT_VARIANCE) | (template_norm.pow(2) <= FLAT_VARIANCE)
    score = cross / denom.clamp_min(FLAT_VARIANCE)
    return torch.where(flat, torch.zeros_like(score), score)


def response_peak(response: torch.Tensor) -> tuple[int, int]:
    """Row/column of the maximum; ties resolve to the first row-major index."""
    index = int(torch.argmax(response.reshape(-1)))
    return divmod(index, response.shape[1])
