"""Project configuration: one YAML file fully specifies a run.

Relative paths are resolved against the config file's directory.  The
config revision is the SHA-256 of the file's bytes.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigInvalid
from .linkage import REGISTER
from .registry import RuleSet
from .util import file_digest


@dataclass
class SourceConfig:
    tag: str
    path: Path
    key_field: str = "entity_key"
    date_field: str = "event_date"
    core: bool = False
    entity_type: str = "person"
    duplicates: Path = None
    namespace: dict = None
    load_date_field: str = None
    checklist: dict = field(default_factory=dict)

    def header(self):
        with open(self.path, encoding="utf-8", newline="") as fh:
            return next(csv.reader(fh), [])

    def as_dict(self):
        return {"tag": self.tag, "checklist": self.checklist,
                "load_date_field": self.load_date_field}


@dataclass
class LinkageSpec:
    name: str
    left: str
    right: str
    method: str = "exact"
    key_map: tuple = ("entity_key", "entity_key")
    blocking_fields: tuple = ()
    compare_fields: tuple = ()
    threshold: float = 0.9


@dataclass
class FrameSpec:
    frame_id: str
    as_of: str
    strata: tuple = ()
    rules: RuleSet = field(default_factory=RuleSet)


@dataclass
class CalibrationSpec:
    name: str
    frame: str
    path: str
    mode: str = "poststratify"
    dimensions: tuple = None
    tol: float = 1e-6
    max_iter: int = 100
    attach: tuple = ()


@dataclass
class EstimateSpec:
    name: str
    calibration: str
    y_source: str
    y_field: str


@dataclass
class CoverageSpec:
    name: str
    frame: str
    path: str
    sources: tuple = ()
    frame_links: dict = field(default_factory=dict)
    strata: tuple = None


@dataclass
class ProjectConfig:
    root: Path
    revision: str
    workspace: Path
    sources: list
    birth_rules: dict
    hierarchy: dict
    entity_links: Path
    hierarchy_links: Path
    frames: list
    linkages: list
    paths: dict
    calibrations: list
    estimates: list
    coverage: list
    synth: dict
    raw: dict

    def source(self, tag):
        for s in self.sources:
            if s.tag == tag:
                return s
        raise ConfigInvalid(f"unknown source {tag!r}")

    @property
    def core_sources(self):
        return [s for s in self.sources if s.core]

    def linkage(self, name):
        for l in self.linkages:
            if l.name == name:
                return l
        raise ConfigInvalid(f"unknown linkage {name!r}")

    def frame(self, frame_id):
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise ConfigInvalid(f"unknown frame {frame_id!r}")

    def calibration(self, name):
        for c in self.calibrations:
            if c.name == name:
                return c
        raise ConfigInvalid(f"unknown calibration {name!r}")

    def input_files(self):
        """Every input file the config references, relative to the config root."""
        files = [s.path for s in self.sources]
        files += [s.duplicates for s in self.sources if s.duplicates]
        files += [p for p in (self.entity_links, self.hierarchy_links) if p]
        return sorted(files)

    def validate_inputs(self):
        """Check referenced files exist and named fields are in their headers."""
        headers = {}
        for s in self.sources:
            if not s.path.exists():
                raise ConfigInvalid(f"source {s.tag}: file not found: {s.path}")
            cols = s.header()
            for needed in (s.key_field, s.date_field):
                if needed not in cols:
                    raise ConfigInvalid(f"source {s.tag}: column {needed!r} not in header")
            payload = set(cols) - {s.key_field, s.date_field}
            headers[s.tag] = payload | {"entity_key"}
        for l in self.linkages:
            for side, fields in ((l.left, self._linkage_fields(l, 0)),
                                 (l.right, self._linkage_fields(l, 1))):
                if side == REGISTER:
                    continue
                unknown = [f for f in fields if f not in headers[side]]
                if unknown:
                    raise ConfigInvalid(f"linkage {l.name}: {side} has no field(s) {unknown}")
        for c in self.calibrations:
            for a in c.attach:
                unknown = [f for f in a["fields"] if f not in headers[a["source"]]]
                if unknown:
                    raise ConfigInvalid(f"calibration {c.name}: {a['source']} lacks {unknown}")
        for e in self.estimates:
            if e.y_field not in headers[e.y_source]:
                raise ConfigInvalid(f"estimate {e.name}: {e.y_source} lacks {e.y_field!r}")

    @staticmethod
    def _linkage_fields(l, side):
        if l.method == "exact":
            return [l.key_map[side]]
        if l.method == "blocked":
            names = [c if isinstance(c, str) else c["field"] for c in l.compare_fields]
            return list(l.blocking_fields) + names
        return []


def _path(root, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (root / p)


def load_config(path, workspace=None):
    path = Path(path).resolve()
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    root = path.parent
    try:
        return _build(raw, root, file_digest(path), workspace)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{path}: {exc!r}") from None


def _build(raw, root, revision, workspace):
    sources = []
    for s in raw.get("sources") or []:
        sources.append(SourceConfig(
            tag=s["tag"], path=_path(root, s["path"]),
            key_field=s.get("key_field", "entity_key"), date_field=s.get("date_field", "event_date"),
            core=bool(s.get("core", False)), entity_type=s.get("entity_type", "person"),
            duplicates=_path(root, s.get("duplicates")), namespace=s.get("namespace"),
            load_date_field=s.get("load_date_field"), checklist=s.get("checklist") or {}))
    tags = [s.tag for s in sources]
    if len(set(tags)) != len(tags):
        raise ConfigInvalid(f"duplicate source tags in {tags}")
    if REGISTER in tags:
        raise ConfigInvalid(f"{REGISTER!r} is reserved")

    birth = {tag: RuleSet.from_config(rules) for tag, rules in (raw.get("birth_rules") or {}).items()}
    frames = [FrameSpec(f["frame_id"], str(f["as_of"]), tuple(f.get("strata") or ()),
                        RuleSet(RuleSet.from_config(f.get("rules") or []).rules,
                                f.get("retention_years")))
              for f in raw.get("frames") or []]
    linkages = []
    for l in raw.get("linkages") or []:
        km = l.get("key_map") or ["entity_key", "entity_key"]
        linkages.append(LinkageSpec(
            l["name"], l["left"], l["right"], l.get("method", "exact"), tuple(km),
            tuple(l.get("blocking_fields") or ()), tuple(l.get("compare_fields") or ()),
            float(l.get("threshold", 0.9))))
    paths = {p["name"]: list(p["steps"]) for p in raw.get("paths") or []}
    calibs = [CalibrationSpec(c["name"], c["frame"], c["path"], c.get("mode", "poststratify"),
                              tuple(c["dimensions"]) if c.get("dimensions") else None,
                              float(c.get("tol", 1e-6)), int(c.get("max_iter", 100)),
                              tuple(c.get("attach") or ()))
              for c in raw.get("calibrations") or []]
    ests = [EstimateSpec(e["name"], e["calibration"], e["y_source"], e["y_field"])
            for e in raw.get("estimates") or []]
    covs = [CoverageSpec(c.get("name", c["path"]), c["frame"], c["path"], tuple(c.get("sources") or ()),
                         dict(c.get("frame_links") or {}),
                         tuple(c["strata"]) if c.get("strata") else None)
            for c in raw.get("coverage") or []]
    ws = workspace if workspace is not None else raw.get("workspace", "workspace")
    cfg = ProjectConfig(
        root=root, revision=revision, workspace=_path(root, ws) if not Path(ws).is_absolute() else Path(ws),
        sources=sources, birth_rules=birth, hierarchy=dict(raw.get("hierarchy") or {}),
        entity_links=_path(root, raw.get("entity_links")),
        hierarchy_links=_path(root, raw.get("hierarchy_links")),
        frames=frames, linkages=linkages, paths=paths, calibrations=calibs, estimates=ests,
        coverage=covs, synth=dict(raw.get("synth") or {}), raw=raw)
    _check_refs(cfg)
    return cfg


def _check_refs(cfg):
    tags = {s.tag for s in cfg.sources} | {REGISTER}
    for tag in cfg.birth_rules:
        if tag not in tags:
            raise ConfigInvalid(f"birth rules for unknown source {tag!r}")
    for l in cfg.linkages:
        for side in (l.left, l.right):
            if side not in tags:
                raise ConfigInvalid(f"linkage {l.name}: unknown source {side!r}")
        if l.method not in ("exact", "blocked", "admin-key"):
            raise ConfigInvalid(f"linkage {l.name}: unknown method {l.method!r}")
        if l.method == "admin-key" and (l.right != REGISTER or not cfg.source(l.left).core):
            raise ConfigInvalid(f"linkage {l.name}: admin-key links a core source to {REGISTER}")
        if l.method == "blocked" and not 0 < l.threshold <= 1:
            raise ConfigInvalid(f"linkage {l.name}: threshold must be in (0, 1]")
    names = {l.name for l in cfg.linkages}
    for p, steps in cfg.paths.items():
        unknown = [s for s in steps if s not in names]
        if unknown or not steps:
            raise ConfigInvalid(f"path {p}: unknown or missing linkage(s) {unknown}")
    frame_ids = {f.frame_id for f in cfg.frames}
    for c in cfg.calibrations:
        if c.frame not in frame_ids or c.path not in cfg.paths:
            raise ConfigInvalid(f"calibration {c.name}: unknown frame or path")
        if c.mode not in ("poststratify", "rake"):
            raise ConfigInvalid(f"calibration {c.name}: mode must be poststratify or rake")
    calib = {c.name for c in cfg.calibrations}
    for e in cfg.estimates:
        if e.calibration not in calib or e.y_source not in tags:
            raise ConfigInvalid(f"estimate {e.name}: unknown calibration or source")
    for c in cfg.coverage:
        if c.frame not in frame_ids or c.path not in cfg.paths:
            raise ConfigInvalid(f"coverage {c.name}: unknown frame or path")
        for s, l in c.frame_links.items():
            if l not in names:
                raise ConfigInvalid(f"coverage {c.name}: unknown linkage {l!r}")
