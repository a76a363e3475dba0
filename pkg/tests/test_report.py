import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from exposome_kit.report import (ModelBlock, bar_chart, csv_text, fmt2, fmt_p,
                                 model_block_markdown, models_csv, scatter, stacked_bars)
from exposome_kit.stats.lmm import LmmSpec, fit_random_intercept


@pytest.mark.parametrize("x, s", [(0.456, "0.46"), (-0.001, "0.00"), (2.0, "2.00"),
                                  (math.nan, "NA"), (None, "NA")])
def test_fmt2(x, s):
    assert fmt2(x) == s


@pytest.mark.parametrize("p, s", [(0.0004, "<0.001"), (0.001, "0.001"), (0.04567, "0.046"),
                                  (math.inf, "NA")])
def test_fmt_p(p, s):
    assert fmt_p(p) == s


def test_csv_keeps_full_precision():
    text = csv_text(("a", "b", "c"), [(0.1 + 0.2, 3, np.float64(math.nan))])
    assert text == "a,b,c\n0.30000000000000004,3,NA\n"


@pytest.fixture(scope="module")
def block():
    rng = np.random.default_rng(0)
    g = np.repeat(np.arange(10), 5)
    x = rng.normal(size=50)
    y = 1 + 0.5 * x + rng.normal(size=10)[g] + rng.normal(size=50)
    spec = LmmSpec(y, np.column_stack([np.ones(50), x]), g, ("(Intercept)", "x"))
    return ModelBlock("greenness", "Subjective greenness", fit_random_intercept(spec))


def test_model_block_rows(block):
    md = model_block_markdown(block)
    f = block.fit
    for needle in ("σ²", "τ00 participant", "ICC", f"| {fmt2(f.sigma2)} |", "| 50 |", "| 10 participant |"):
        assert needle in md
    assert f"{f.r2_marginal:.3f}" in md


def test_models_csv_shape(block):
    lines = models_csv([block]).splitlines()
    assert len(lines) == 1 + 2
    assert lines[1].startswith("greenness,Subjective greenness,(Intercept),")


@pytest.mark.parametrize("svg", [
    lambda: bar_chart(["a", "b <&>"], [0.2, -0.4], "T", "r", "#3b6fb6", ["*", ""]),
    lambda: scatter([1, 2, 3, 4], [2, 1, 4, 3], "S", "x", "y", "#e17fa8"),
    lambda: stacked_bars(["g1", "g2"], [("hit", "#000", [1, 2]), ("miss", "#fff", [3, 0])], "B", "n"),
    lambda: bar_chart([], [], "empty", "r", "#000"),
    lambda: scatter([1.0, 1.0], [2.0, 2.0], "flat", "x", "y", "#000"),
])
def test_svgs_are_valid_and_stable(svg):
    a = svg()
    assert ET.fromstring(a).tag.endswith("svg")
    assert a == svg()
