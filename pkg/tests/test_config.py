import pytest

from regisforge.config import load_config
from regisforge.errors import ConfigInvalid

BASE = """
sources:
  - {tag: A, path: a.csv, core: true}
  - {tag: B, path: b.csv}
frames:
  - {frame_id: f, as_of: 2020-12-31, strata: [region]}
linkages:
  - {name: ab, left: A, right: B, key_map: [nin, nin]}
  - {name: a_reg, left: A, right: REGISTER, method: admin-key}
paths:
  - {name: p, steps: [ab, a_reg]}
"""


def write(tmp_path, text, files=True):
    if files:
        (tmp_path / "a.csv").write_text("entity_key,event_date,nin,region\n")
        (tmp_path / "b.csv").write_text("entity_key,event_date,nin\n")
    p = tmp_path / "p.yaml"
    p.write_text(text)
    return p


def test_load_and_validate(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    cfg.validate_inputs()
    assert [s.tag for s in cfg.core_sources] == ["A"]
    assert cfg.linkage("ab").key_map == ("nin", "nin")
    assert cfg.workspace == tmp_path / "workspace"
    assert len(cfg.revision) == 64
    assert load_config(tmp_path / "p.yaml", tmp_path / "ws").workspace == tmp_path / "ws"


@pytest.mark.parametrize("patch", [
    ("[ab, a_reg]", "[ab, nope]"),
    ("right: B, key", "right: Z, key"),
    ("method: admin-key}", "method: fuzzy}"),
    ("{tag: B,", "{tag: A,"),
    ("{tag: B,", "{tag: REGISTER,"),
    ("- {tag: A, path: a.csv, core: true}", "- {path: a.csv}"),
])
def test_bad_references(tmp_path, patch):
    with pytest.raises(ConfigInvalid):
        load_config(write(tmp_path, BASE.replace(*patch)))


def test_admin_key_needs_core_source(tmp_path):
    text = BASE.replace("{tag: A, path: a.csv, core: true}", "{tag: A, path: a.csv}")
    with pytest.raises(ConfigInvalid):
        load_config(write(tmp_path, text))


def test_validate_inputs(tmp_path):
    cfg = load_config(write(tmp_path, BASE, files=False))
    with pytest.raises(ConfigInvalid):
        cfg.validate_inputs()
    write(tmp_path, BASE)
    (tmp_path / "b.csv").write_text("entity_key,event_date\n")
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "p.yaml").validate_inputs()


def test_unparseable(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("sources: [\n")
    with pytest.raises(ConfigInvalid):
        load_config(p)
