import csv
import io
import json
import xml.etree.ElementTree as ET

import pytest

from procdiff.core import InvalidConfigError
from procdiff.evaluation import EvalReport
from procdiff.report import render_reports

SVG = "{http://www.w3.org/2000/svg}"


def _write(tmp_path, name, top1, cats):
    r = EvalReport("forecast", "val", top1, {str(c): {"count": 4, "accuracy": top1} for c in cats},
                   extras={"oracle_k": 5}, provenance={"mode": "approximate"})
    path = tmp_path / f"{name}.json"
    path.write_text(r.to_json())
    return path


def test_three_reports(tmp_path):
    paths = [_write(tmp_path, n, v, range(c)) for n, v, c in (("a", 0.5, 3), ("b", 0.7, 4), ("c", 0.9, 5))]
    files = render_reports(paths)
    rows = list(csv.DictReader(io.StringIO(files["comparison.csv"])))
    assert [r["run"] for r in rows] == ["a", "b", "c"]
    assert rows[1]["top1"] == "0.7" and rows[0]["oracle_k"] == "5"
    for name, count in (("a", 3), ("b", 4), ("c", 5)):
        root = ET.fromstring(files[f"{name}.per_category.svg"])
        bars = [e for e in root.iter(f"{SVG}rect") if e.get("class") == "bar"]
        assert len(bars) == count
    root = ET.fromstring(files["comparison.svg"])
    assert len([e for e in root.iter(f"{SVG}rect") if e.get("class") == "bar"]) == 3


def test_schema_mismatch(tmp_path):
    path = _write(tmp_path, "a", 0.5, [0])
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(InvalidConfigError, match="schema"):
        render_reports([path])
    with pytest.raises(InvalidConfigError):
        render_reports([])
