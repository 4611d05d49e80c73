from __future__ import annotations

import pytest
import torch

from diffdf.ncc import ncc_response, response_peak


def _search(seed: int = 0, shape=(3, 12, 14)) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1


def test_response_shape() -> None:
    """Response covers every valid offset."""
    assert ncc_response(_search()[:, :4, :5], _search()).shape == (9, 10)


def test_exact_match_scores_one_at_its_offset() -> None:
    """A template cut from the search region peaks at 1 where it was cut."""
    search = _search()
    template = search[:, 3:8, 6:10].clone()
    response = ncc_response(template, search)
    assert float(response[3, 6]) == pytest.approx(1.0, abs=1e-9)
    assert response_peak(response) == (3, 6)


def test_negated_match_scores_minus_one() -> None:
    """An inverted patch has correlation -1."""
    search = _search()
    template = -search[:, 0:4, 0:4]
    assert float(ncc_response(template, search)[0, 0]) == pytest.approx(-1.0)


def test_affine_invariance() -> None:
    """Scaling and shifting the template leaves the score unchanged."""
    search = _search()
    template = search[:, 2:6, 2:6]
    a = ncc_response(template, search)
    b = ncc_response(0.5 * template + 0.2, search)
    assert torch.allclose(a, b, atol=1e-9)


def test_values_bounded() -> None:
    """Scores stay within [-1, 1]."""
    response = ncc_response(_search(1, (3, 4, 4)), _search(2))
    assert float(response.abs().max()) <= 1.0 + 1e-9


def test_flat_search_scores_zero() -> None:
    """A constant search region gives an all-zero response."""
    response = ncc_response(_search()[:, :3, :3], torch.full((3, 8, 8), 0.3))
    assert torch.equal(response, torch.zeros_like(response))


def test_flat_template_scores_zero() -> None:
    """A constant template gives an all-zero response."""
    response = ncc_response(torch.zeros(3, 3, 3), _search())
    assert torch.equal(response, torch.zeros_like(response))


def test_peak_ties_resolve_to_first_index() -> None:
    """Ties resolve to the first row-major maximum."""
    response = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert response_peak(response) == (0, 1)


def test_template_larger_than_search_raises() -> None:
    """A template that does not fit raises ValueError."""
    with pytest.raises(ValueError, match=r"does not fit"):
        ncc_response(torch.zeros(3, 9, 9), torch.zeros(3, 8, 8))


def test_channel_mismatch_raises() -> None:
    """Template and search need the same channels."""
    with pytest.raises(ValueError, match=r"channel mismatch"):
        ncc_response(torch.zeros(1, 2, 2), torch.zeros(3, 8, 8))


def test_gradcheck() -> None:
    """Gradients w.r.t. the search region match finite differences."""
    template = _search(1, (1, 3, 3))
    search = _search(2, (1, 5, 5)).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda s: ncc_response(template, s), (search,))
