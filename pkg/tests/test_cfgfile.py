import pytest

from splitfed.cfgfile import ConfigError, load, parse


def test_sections_keys_and_entries():
    cf = parse("# top\n[model]\nname = x  # trailing\n\n[layers]\nconv1d in=1 out=2\nrelu\n")
    assert cf.sections["model"].values == {"name": "x"}
    assert cf.sections["model"].lines["name"] == 3
    entries = cf.sections["layers"].entries
    assert [(e.kind, e.options, e.line) for e in entries] == [("conv1d", {"in": "1", "out": "2"}, 6), ("relu", {}, 7)]


@pytest.mark.parametrize(
    "text,line",
    [
        ("key = 1\n", 1),
        ("[a]\nno equals here\n", 2),
        ("[a]\nx = 1\nx = 2\n", 3),
        ("[a]\n[a]\n", 2),
        ("[a\n", 1),
        ("[layers]\nconv1d in\n", 2),
    ],
)
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse(text, path="f.cfg")
    assert exc.value.line == line
    assert f"f.cfg:{line}:" in str(exc.value)


def test_missing_file():
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        load("nope.cfg")
