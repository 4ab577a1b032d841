import pytest

from app.gradcheck import KERNELS, GradcheckConfig, run_kernel, run_suite


def test_suite_passes_with_defaults():
    report = run_suite()
    failing = [k.name for k in report.kernels if not k.passed]
    assert report.passed, failing
    assert [k.name for k in report.kernels] == list(KERNELS)
    assert all(k.checked > 0 for k in report.kernels)


@pytest.mark.parametrize("kernel", ["photometric", "multi_head_attention"])
def test_planted_bug_is_reported(kernel):
    report = run_suite(GradcheckConfig(plant_bug=kernel))
    assert not report.passed
    assert [k.name for k in report.kernels if not k.passed] == [kernel]


def test_kernel_reports_are_deterministic():
    cfg = GradcheckConfig(seed=3)
    assert run_kernel("encoder_layer", cfg) == run_kernel("encoder_layer", cfg)


def test_unknown_planted_kernel_is_rejected():
    with pytest.raises(ValueError):
        GradcheckConfig(plant_bug="no_such_kernel")
