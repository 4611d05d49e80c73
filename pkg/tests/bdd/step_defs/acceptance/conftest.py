"""Shared step definitions for the acceptance scenarios."""

from pytest_bdd import given, parsers, then

from diffdf.schedule import NoiseSchedule, build_linear_schedule


@given(
    parsers.parse("a linear noise schedule with {T:d} steps"),
    target_fixture="schedule",
)
def linear_schedule(T: int) -> NoiseSchedule:
    return build_linear_schedule(T)


@then(parsers.parse("the largest absolute difference is below {tolerance:g}"))
def max_abs_difference_below(context: dict, tolerance: float) -> None:
    diff = context["max_abs_diff"]
    assert diff < tolerance, f"max |diff| {diff:.3g} >= {tolerance:g}"
