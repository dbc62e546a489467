import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hetshadow.model import ck_model, nonhamiltonian_example
from hetshadow.render import (classify_equilibrium, line_chart_svg, mass_cascade_svg, portrait, portrait_svg,
                              reduced_equilibria, write_portrait)


def kinds(eqs):
    out = {}
    for e in eqs:
        out[e["kind"]] = out.get(e["kind"], 0) + 1
    return out


def test_classify_equilibrium():
    assert classify_equilibrium(np.diag([1.0, -1.0])) == "saddle"
    assert classify_equilibrium(np.diag([-1.0, -2.0])) == "attractor"
    assert classify_equilibrium(np.diag([1.0, 2.0])) == "repeller"
    assert classify_equilibrium(np.array([[0.0, 1.0], [-1.0, 0.0]])) == "center"


@pytest.fixture(scope="module")
def ck_portrait():
    return portrait(ck_model(3), 1, 2)


def test_ck_neighbour_portrait(ck_portrait):
    eqs = ck_portrait["equilibria"]
    assert kinds(eqs) == {"saddle": 5, "center": 4}
    centres = [e["c"] for e in eqs if e["kind"] == "center"]
    assert np.allclose(np.abs(centres), 1 / np.sqrt(2), atol=1e-8)
    origin = [e for e in eqs if e["kind"] == "saddle" and not e.get("boundary")]
    assert len(origin) == 1 and abs(origin[0]["c"]) < 1e-10
    assert len(ck_portrait["lines"]) == 2


def test_dissipative_portrait_has_attractors():
    eqs = reduced_equilibria(nonhamiltonian_example(3), 1, 2)
    assert kinds(eqs) == {"saddle": 5, "attractor": 4}


def test_far_pair_has_centre_and_ring():
    eqs = reduced_equilibria(ck_model(3), 1, 3)
    assert kinds(eqs) == {"center": 1, "ring": 1}
    ring = [e for e in eqs if e["kind"] == "ring"][0]
    assert ring["radius"] == pytest.approx(1 / np.sqrt(2), abs=1e-5)


def test_portrait_files(ck_portrait, tmp_path):
    svg, table = tmp_path / "p.svg", tmp_path / "p.csv"
    write_portrait(svg, table, ck_portrait)
    root = ET.parse(svg).getroot()
    assert root.tag.endswith("svg")
    assert len(list(root.iter("{http://www.w3.org/2000/svg}polyline"))) >= 10
    rows = list(csv.reader(open(table)))
    assert rows[0] == ["re_c", "im_c", "re_dc", "im_dc"]
    assert len(rows) > 1 and all(len(r) == 4 for r in rows)
    assert np.all(np.abs(np.array(rows[1:], dtype=float)[:, :2]) <= 1.0 + 1e-12)
    ET.fromstring(portrait_svg(ck_portrait))


def test_line_charts(tmp_path):
    x = np.linspace(0, 1, 50)
    svg = line_chart_svg(x, [x, x ** 2], ["a", "b<c"], title="t & u")
    root = ET.fromstring(svg)
    assert len(list(root.iter("{http://www.w3.org/2000/svg}polyline"))) >= 2
    p = tmp_path / "m.svg"
    mass_cascade_svg(p, x, np.column_stack([1 - x, x]))
    ET.parse(p)
