import numpy as np
import pytest

from fbsdeplab.errors import SpecError
from fbsdeplab.lq import LqCoefficients
from fbsdeplab.linear import LinearCoefficients
from fbsdeplab.filtering import LinearFilterSystem
from fbsdeplab.specs import SPEC_DIR, load_spec, parse_spec, shipped_specs

LQ_TEXT = (SPEC_DIR / "lq_default.yaml").read_text()


def _line_of(text, needle):
    return next(i for i, ln in enumerate(text.splitlines(), 1) if needle in ln)


def test_shipped_specs_load():
    assert shipped_specs() == ["coupled_example", "filter_linear", "linear_benchmark", "lq_default"]
    built = {"lq": LqCoefficients, "linear": LinearCoefficients, "filter-linear": LinearFilterSystem}
    for name in shipped_specs():
        spec = load_spec(name)
        obj = {"lq": spec.lq, "linear": spec.linear, "filter-linear": spec.filter_system}[spec.kind]()
        assert isinstance(obj, built[spec.kind])


def test_spec_values_round_trip():
    co = load_spec("lq_default").lq()
    c = co.at(0.5)
    assert c.g17 == pytest.approx(-0.5)
    assert np.allclose(c.g16, [0.2, -0.1, 0.1])
    assert co.x0 == 2.0 and co.phi11 == 1.0


def test_missing_required_coefficient_names_field_and_line():
    text = LQ_TEXT.replace("  l11: 1.0\n", "  other: 1.0\n")
    with pytest.raises(SpecError, match=r"cost\.l11: line \d+: missing required coefficient"):
        parse_spec(text)


def test_missing_section_reports_fields():
    text = LQ_TEXT.replace("cost:\n  l11: 1.0\n", "")
    with pytest.raises(SpecError, match=r"cost\.l11"):
        parse_spec(text)


def test_tilt_error_carries_line():
    text = LQ_TEXT.replace("lam11: [0.8, 0.9, 0.95]", "lam11: [0.8, 1.2, 0.95]")
    line = _line_of(text, "lam11")
    with pytest.raises(SpecError) as exc:
        parse_spec(text)
    assert f"observation.lam11: line {line}: tilt must lie in [l,1)" in str(exc.value)


def test_parse_error_line():
    text = LQ_TEXT.replace("  b12: 1.0\n", "  b12: [1.0\n")
    with pytest.raises(SpecError, match=r"line \d+: parse error"):
        parse_spec(text)


def test_all_violations_collected():
    text = LQ_TEXT.replace("  l11: 1.0\n", "").replace("b11: -0.5", "b11: abc")
    with pytest.raises(SpecError) as exc:
        parse_spec(text)
    assert len(exc.value.violations) >= 2


@pytest.mark.parametrize("header", ["schema_version: 2\n", ""])
def test_schema_header_required(header):
    text = LQ_TEXT.replace("schema_version: 1\n", header)
    with pytest.raises(SpecError, match="schema_version"):
        parse_spec(text)


def test_unknown_kind():
    with pytest.raises(SpecError):
        parse_spec(LQ_TEXT.replace("kind: lq", "kind: quadratic"))


def test_poly_and_piecewise_coefficients():
    text = LQ_TEXT.replace("b11: -0.5", "b11: {piecewise: {breaks: [0.5], values: [1.0, 2.0]}}")
    co = parse_spec(text).lq()
    assert co.at(0.25).b11 == 1.0 and co.at(0.75).b11 == 2.0
    assert co.at(0.0).g17 == 1.0 and co.at(1.0).g17 == pytest.approx(-2.0)


def test_broadcast_mark_entry():
    text = LQ_TEXT.replace("f11: [0.1, -0.1, 0.05]", "f11: 0.3")
    assert np.allclose(parse_spec(text).lq().at(0.0).f11, 0.3)


def test_mark_length_mismatch():
    text = LQ_TEXT.replace("f11: [0.1, -0.1, 0.05]", "f11: [0.1, 0.2]")
    with pytest.raises(SpecError, match=r"state\.f11"):
        parse_spec(text)


def test_missing_file():
    with pytest.raises(SpecError, match="not found"):
        load_spec("/nonexistent/spec.yaml")


def test_experiment_options():
    spec = load_spec("lq_default")
    assert len(spec.options("maxcond")["test_values"]) == 11
    assert spec.options("nothing") == {}
