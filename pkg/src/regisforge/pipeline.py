"""File-based pipeline stages over a workspace directory.

Each stage reads only persisted files (config inputs or earlier stages'
outputs) and records what it read and wrote in ``manifest.json``.  Layout::

    state/svid_seq.txt                  generator state (one per workspace)
    timelines/<SRC>.ndjson              per-source timeline databases
    registers/admin/<SRC>.ndjson        admin registers (core sources)
    registers/admin/<SRC>.meta.json     metadata descriptor (every source)
    registers/entity.ndjson             population register
    frames/<frame_id>@<as_of>.csv       frame snapshots (+ .json sidecar)
    linkage/<name>.tsv                  linkage relations
    integrated/<path>.csv               integrated datasets (+ .json)
    weights/<calibration>.csv           weight sets (+ .check.json)
    estimates/<estimate>.csv            estimate tables (+ .json)
    reports/                            coverage and TSE reports
"""

import csv
import fcntl
import io
import json
import os
from contextlib import contextmanager
from pathlib import Path

from . import idforge
from .config import SourceConfig
from .errors import (
    BirthRejected,
    ConfigInvalid,
    ConflictingAlias,
    CycleDetected,
    IncompleteRun,
    MissingPrerequisite,
    RegisforgeError,
    TypeMismatch,
)
from .estimate import (
    FULL_CROSS,
    MARGINS,
    DomainSpec,
    WeightSet,
    check_calibration,
    estimate_table,
    poststratify,
    rake,
)
from .linkage import (
    REGISTER,
    IntegratedDataset,
    LinkageRelation,
    admin_key_linkage,
    build_blocked_linkage,
    build_exact_linkage,
    register_profiles,
    step_through,
)
from .quality import build_meta_descriptor, linked_coverage_report, render_coverage_text, render_tse_text, tse_report
from .registry import AdminRegister, EntityRegister, Frame, build_frame, init_entity_register, namespace_source_key
from .synth import SyntheticScenario, write_scenario
from .timeline import TimelineDB, group_events, make_event
from .util import atomic_write_text, file_digest, is_missing, parse_date, read_json, write_json, write_ndjson

MANIFEST = "manifest.json"
LOCK = ".lock"

STAGES = ("ingest", "register-build", "frame", "link", "calibrate", "estimate", "coverage", "tse-report")


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel):
        return self.root / rel

    def rel(self, path):
        return Path(path).relative_to(self.root).as_posix()

    def manifest(self):
        p = self.path(MANIFEST)
        if not p.exists():
            return {"stages": {}}
        return read_json(p)

    @contextmanager
    def lock(self):
        """Advisory lock: one stage at a time per workspace."""
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.path(LOCK), "w")
        try:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise RegisforgeError(f"workspace {self.root} is locked by another stage") from None
            yield self
        finally:
            fh.close()

    def require(self, stage, *paths):
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            raise MissingPrerequisite(stage, f"run `regisforge {stage}` first")
        for p in paths:
            if not self.path(p).exists():
                raise MissingPrerequisite(stage, f"{p} is missing")
        return entry

    def record(self, stage, cfg, inputs, outputs):
        """Register a stage's inputs (digests) and outputs in the manifest."""
        m = self.manifest()
        m["config_revision"] = cfg.revision
        m["stages"][stage] = {
            "config_revision": cfg.revision,
            "inputs": dict(sorted(inputs.items())),
            "outputs": {self.rel(p): file_digest(p) for p in sorted(outputs)},
        }
        write_json(self.path(MANIFEST), m)


class _Run:
    """Per-stage bookkeeping of files read and written."""

    def __init__(self, cfg, ws):
        self.cfg, self.ws = cfg, ws
        self.inputs, self.outputs = {}, []

    def read_input(self, path):
        path = Path(path)
        self.inputs["config:" + os.path.relpath(path, self.cfg.root)] = file_digest(path)
        return path

    def read(self, rel):
        p = self.ws.path(rel)
        self.inputs["workspace:" + rel] = file_digest(p)
        return p

    def write_text(self, rel, text):
        p = self.ws.path(rel)
        atomic_write_text(p, text)
        self.outputs.append(p)
        return p

    def write_json(self, rel, obj):
        p = self.ws.path(rel)
        write_json(p, obj)
        self.outputs.append(p)
        return p

    def write_ndjson(self, rel, rows):
        p = self.ws.path(rel)
        write_ndjson(p, rows)
        self.outputs.append(p)
        return p

    def done(self, stage):
        self.ws.record(stage, self.cfg, self.inputs, self.outputs)


# -- helpers -----------------------------------------------------------------

STATE = "state/svid_seq.txt"
ENTITY = "registers/entity.ndjson"


def admin_rel(tag):
    return f"registers/admin/{tag}.ndjson"


def timeline_rel(tag):
    return f"timelines/{tag}.ndjson"


def frame_key(spec):
    return f"{spec.frame_id}@{parse_date(spec.as_of).isoformat()}"


def read_source_events(src: SourceConfig):
    """Events of one source CSV, keys namespaced when configured."""
    ns = src.namespace or {}
    events = []
    with open(src.path, encoding="utf-8", newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            key = row[src.key_field]
            if ns:
                inst = row.get(ns["institution_field"], "") if "institution_field" in ns else ns.get("institution", "")
                period = row.get(ns["period_field"], "") if "period_field" in ns else ns.get("period", "")
                key = namespace_source_key(key, inst, period)
            payload = {k: v for k, v in row.items() if k not in (src.key_field, src.date_field)}
            events.append(make_event(key, row[src.date_field], i, payload))
    return events


def _load_timeline(run, tag):
    return TimelineDB.load(tag, run.read(timeline_rel(tag)))


def _load_register(run):
    cfg = run.cfg
    return EntityRegister.load(run.read(ENTITY), [s.tag for s in cfg.core_sources], cfg.hierarchy)


def _load_integrated(run, name):
    meta = read_json(run.read(f"integrated/{name}.json"))
    text = run.read(f"integrated/{name}.csv").read_text(encoding="utf-8")
    return IntegratedDataset.from_csv(text, meta["path"])


def _load_frame(run, frame_id):
    key = frame_key(run.cfg.frame(frame_id))
    run.read(f"frames/{key}.json")
    return Frame.load(run.read(f"frames/{key}.csv"))


def _read_table(path, columns):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or ())]
        if missing:
            raise ConfigInvalid(f"{path}: missing column(s) {missing}")
        return list(reader)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- stages ------------------------------------------------------------------

def ingest(cfg, ws):
    """Timelines for every source; admin registers for core sources."""
    cfg.validate_inputs()
    run = _Run(cfg, ws)
    state_path = ws.path(STATE)
    gen = idforge.IdGenerator(path=state_path)
    summary = {}
    registers = {}
    for src in cfg.sources:
        events = read_source_events(src)
        run.read_input(src.path)
        db = group_events(src.tag, events)
        run.write_ndjson(timeline_rel(src.tag), [e.to_json() for e in db.events()])
        meta = build_meta_descriptor(src.as_dict(), db)
        run.write_json(f"registers/admin/{src.tag}.meta.json", meta.to_dict())
        info = {"events": db.n_events, "entities": len(db), "core": src.core}
        if src.core:
            rel = admin_rel(src.tag)
            rules = cfg.birth_rules.get(src.tag)
            if ws.path(rel).exists():
                # incremental: the previous register is this stage's own output
                admin = AdminRegister.load(src.tag, ws.path(rel), rules)
            else:
                admin = AdminRegister(src.tag, rules)
            for e in sorted(events, key=lambda e: e.sort_key):
                attrs = {k: v for k, v in e.payload.items() if not is_missing(v)}
                try:
                    admin.ingest_transaction(gen, e.entity_key, attrs, e.event_date)
                except BirthRejected:
                    pass
            dup_groups, dup_unknown = 0, []
            if src.duplicates:
                run.read_input(src.duplicates)
                groups = {}
                for row in _read_table(src.duplicates, ["group", "source_key"]):
                    groups.setdefault(row["group"], []).append(row["source_key"])
                for g in sorted(groups):
                    svids = []
                    for k in groups[g]:
                        if k in admin.records:
                            svids.append(admin.records[k].svid)
                        else:
                            dup_unknown.append(k)
                    if len(svids) > 1:
                        admin.mark_source_duplicates(svids)
                        dup_groups += 1
            registers[src.tag] = admin
            info.update(records=len(admin),
                        representatives=len(admin.representatives()),
                        rejected_births=len(admin.rejected),
                        duplicate_groups=dup_groups, duplicate_keys_unknown=sorted(dup_unknown))
            run.write_ndjson(f"registers/admin/{src.tag}.rejected.ndjson", admin.rejected)
        summary[src.tag] = info
    # IDs are committed before any register holding them is written
    gen.commit()
    if state_path.exists():
        run.outputs.append(state_path)
    for tag, admin in registers.items():
        run.write_ndjson(admin_rel(tag), admin.to_lines())
    run.write_json("registers/ingest_summary.json", summary)
    run.done("ingest")
    return summary


def register_build(cfg, ws):
    ws.require("ingest")
    run = _Run(cfg, ws)
    admins = {s.tag: AdminRegister.load(s.tag, run.read(admin_rel(s.tag))) for s in cfg.core_sources}
    reg = init_entity_register([admins[s.tag] for s in cfg.core_sources],
                               {s.tag: s.entity_type for s in cfg.core_sources}, cfg.hierarchy)

    def resolve(tag, key):
        admin = admins.get(tag)
        if admin is None or key not in admin.records:
            return None
        return admin.records[key].alias_id

    applied, conflicts, unresolved = 0, [], []
    if cfg.entity_links:
        run.read_input(cfg.entity_links)
        for row in _read_table(cfg.entity_links, ["source_a", "key_a", "source_b", "key_b"]):
            a, b = resolve(row["source_a"], row["key_a"]), resolve(row["source_b"], row["key_b"])
            if a is None or b is None:
                unresolved.append(row)
                continue
            try:
                reg.link_entities(a, b)
                applied += 1
            except ConflictingAlias as exc:
                conflicts.append({**row, "error": str(exc)})
    parents, rejected = 0, []
    if cfg.hierarchy_links:
        run.read_input(cfg.hierarchy_links)
        cols = ["child_source", "child_key", "parent_source", "parent_key"]
        for row in _read_table(cfg.hierarchy_links, cols):
            c, p = resolve(row["child_source"], row["child_key"]), resolve(row["parent_source"], row["parent_key"])
            if c is None or p is None:
                unresolved.append(row)
                continue
            try:
                reg.link_child_to_parent(c, p)
                parents += 1
            except (TypeMismatch, CycleDetected) as exc:
                rejected.append({**row, "error": f"{type(exc).__name__}: {exc}"})
    run.write_ndjson(ENTITY, reg.to_lines())
    summary = {"records": len(reg), "unique": len(reg.unique_view()), "links_applied": applied,
               "conflicts": conflicts, "unresolved": unresolved,
               "hierarchy_links": parents, "hierarchy_rejected": rejected}
    run.write_json("registers/entity_summary.json", summary)
    run.done("register-build")
    return summary


def frame(cfg, ws):
    ws.require("register-build", ENTITY)
    run = _Run(cfg, ws)
    reg = _load_register(run)
    out = {}
    for spec in cfg.frames:
        fr = build_frame(reg, spec.rules, spec.as_of, spec.strata, spec.frame_id)
        csv_path = fr.save(ws.path("frames"))
        run.outputs += [csv_path, csv_path.with_suffix(".json")]
        out[fr.key] = fr.size
    run.done("frame")
    return out


def link(cfg, ws):
    ws.require("ingest")
    needs_register = any(REGISTER in (l.left, l.right) for l in cfg.linkages)
    if needs_register:
        ws.require("register-build", ENTITY)
    run = _Run(cfg, ws)
    dbs = {}
    reg = _load_register(run) if needs_register else None
    reg_profiles = None

    def side(tag):
        nonlocal reg_profiles
        if tag == REGISTER:
            if reg_profiles is None:
                reg_profiles = register_profiles(reg)
            return (REGISTER, reg_profiles)
        if tag not in dbs:
            dbs[tag] = _load_timeline(run, tag)
        return dbs[tag]

    summary = {}
    for l in cfg.linkages:
        if l.method == "exact":
            rel = build_exact_linkage(side(l.left), side(l.right), l.key_map)
        elif l.method == "blocked":
            rel = build_blocked_linkage(side(l.left), side(l.right), l.blocking_fields,
                                        l.compare_fields, l.threshold)
        else:
            admin = AdminRegister.load(l.left, run.read(admin_rel(l.left)))
            rel = admin_key_linkage(admin, reg)
        run.write_text(f"linkage/{l.name}.tsv", rel.to_tsv())
        summary[l.name] = rel.descriptor()
    for name, steps in sorted(cfg.paths.items()):
        rels = [LinkageRelation.from_tsv(ws.path(f"linkage/{s}.tsv").read_text(encoding="utf-8"))
                for s in steps]
        integ = step_through(rels)
        run.write_text(f"integrated/{name}.csv", integ.to_csv())
        run.write_json(f"integrated/{name}.json",
                       {"name": name, "steps": steps, "sources": list(integ.sources),
                        "path": list(integ.path), "rows": len(integ), "exact": integ.exact})
        summary[name] = {"rows": len(integ), "sources": list(integ.sources)}
    run.done("link")
    return summary


def _attach(run, integ, attach):
    for a in attach:
        if a["source"] not in integ.sources:
            raise ConfigInvalid(f"cannot attach {a['source']}: not on path {integ.sources}")
        db = _load_timeline(run, a["source"])
        integ = integ.with_attributes(a["source"], db.profiles(a["fields"]), a["fields"])
    return integ


def calibrate(cfg, ws):
    ws.require("link")
    ws.require("frame")
    run = _Run(cfg, ws)
    out = {}
    for c in cfg.calibrations:
        fr = _load_frame(run, c.frame)
        integ = _attach(run, _load_integrated(run, c.path), c.attach)
        if c.mode == "poststratify":
            spec = DomainSpec.from_frame(fr, c.dimensions, FULL_CROSS)
            weights = poststratify(fr, integ, spec)
        else:
            spec = DomainSpec.from_frame(fr, c.dimensions, MARGINS)
            weights = rake(None, integ, spec, c.tol, c.max_iter, frame=fr)
        check = check_calibration(weights, integ, fr, spec, c.tol)
        run.write_text(f"weights/{c.name}.csv", weights.to_csv())
        run.write_json(f"weights/{c.name}.check.json",
                       {"calibration": c.name, "path": c.path, "frame_ref": fr.key,
                        "diagnostics": weights.diagnostics, "check": check})
        out[c.name] = {"passed": check["passed"], "max_residual": check["max_residual"]}
    run.done("calibrate")
    return out


def estimate(cfg, ws):
    ws.require("calibrate")
    run = _Run(cfg, ws)
    out = {}
    for e in cfg.estimates:
        c = cfg.calibration(e.calibration)
        weights = WeightSet.from_csv(run.read(f"weights/{c.name}.csv").read_text(encoding="utf-8"))
        fr = _load_frame(run, c.frame)
        integ = _attach(run, _load_integrated(run, c.path),
                        [{"source": e.y_source, "fields": [e.y_field]}])
        table = estimate_table(weights, integ, fr, e.y_field)
        cols = ["domain", "estimate", "n_d", "N_d", "coverage", "n_missing_y"]
        rows = [[r[k] if r[k] is not None else "" for k in cols] for r in table]
        run.write_text(f"estimates/{e.name}.csv", _csv_text(cols, rows))
        run.write_json(f"estimates/{e.name}.json",
                       {"estimate": e.name, "calibration": c.name, "y_source": e.y_source,
                        "y_field": e.y_field, "method": weights.method, "table": table})
        out[e.name] = table[-1]["estimate"]
    run.done("estimate")
    return out


def coverage(cfg, ws):
    ws.require("link")
    ws.require("frame")
    run = _Run(cfg, ws)
    reg = None
    out = {}
    for c in cfg.coverage:
        fr = _load_frame(run, c.frame)
        integ = _load_integrated(run, c.path)
        tags = list(c.sources) or [s for s in integ.sources if s != REGISTER]
        sources = {}
        for tag in tags:
            keys = _load_timeline(run, tag).keys()
            if tag in c.frame_links:
                name = c.frame_links[tag]
                rel = LinkageRelation.from_tsv(run.read(f"linkage/{name}.tsv").read_text(encoding="utf-8"))
                if rel.right_source == tag:
                    rel = rel.flipped()
                if rel.left_source != tag or rel.right_source != REGISTER:
                    raise ConfigInvalid(f"coverage {c.name}: {name} does not link {tag} to {REGISTER}")
            elif cfg.source(tag).core:
                if reg is None:
                    ws.require("register-build", ENTITY)
                    reg = _load_register(run)
                rel = admin_key_linkage(AdminRegister.load(tag, run.read(admin_rel(tag))), reg)
            else:
                continue
            sources[tag] = (keys, rel)
        composite = linked_coverage_report(sources, integ, fr, c.strata, f"integrated/{c.path}.csv")
        composite["name"] = c.name
        run.write_json(f"reports/coverage/{c.name}.json", composite)
        run.write_text(f"reports/coverage/{c.name}.txt", render_coverage_text(composite))
        # the integrated dataset's coverage profile
        run.write_json(f"integrated/{c.path}.coverage.json", composite)
        out[c.name] = composite
    run.done("coverage")
    return out


def _maybe_json(ws, rel):
    p = ws.path(rel)
    return read_json(p) if p.exists() else None


def tse(cfg, ws):
    """Quality collage over whatever stages have run."""
    run = _Run(cfg, ws)
    stages = ws.manifest()["stages"]
    record = {"config_revision": cfg.revision,
              "input_digests": {k: v for k, v in stages.get("ingest", {}).get("inputs", {}).items()
                                if k.startswith("config:")}}
    sources = []
    summary = _maybe_json(ws, "registers/ingest_summary.json") if "ingest" in stages else None
    if summary:
        run.read("registers/ingest_summary.json")
        for src in cfg.sources:
            meta = read_json(run.read(f"registers/admin/{src.tag}.meta.json"))
            sources.append({"tag": src.tag, **summary.get(src.tag, {}),
                            "auto_fields": meta["auto_fields"],
                            "not_assessed": sum(1 for qs in meta["sections"].values()
                                                for q in qs if q["answer"] == "not assessed")})
    linkages = []
    if "link" in stages:
        for l in cfg.linkages:
            rel = LinkageRelation.from_tsv(run.read(f"linkage/{l.name}.tsv").read_text(encoding="utf-8"))
            linkages.append({"name": l.name, **rel.descriptor()})
        for name in sorted(cfg.paths):
            meta = read_json(run.read(f"integrated/{name}.json"))
            linkages.append({"name": f"path:{name}", "steps": meta["steps"], "rows": meta["rows"],
                             "exact": meta["exact"]})
    frames = []
    if "frame" in stages:
        ent = _maybe_json(ws, "registers/entity_summary.json")
        for spec in cfg.frames:
            meta = read_json(run.read(f"frames/{frame_key(spec)}.json"))
            frames.append({**meta, "register": ent})
    estimation = None
    if "calibrate" in stages:
        estimation = {"name": "estimation", "calibrations": {}, "estimates": {}}
        for c in cfg.calibrations:
            estimation["calibrations"][c.name] = read_json(run.read(f"weights/{c.name}.check.json"))
        if "estimate" in stages:
            for e in cfg.estimates:
                estimation["estimates"][e.name] = read_json(run.read(f"estimates/{e.name}.json"))["table"]
    cov = None
    if "coverage" in stages:
        cov = {c.name: read_json(run.read(f"reports/coverage/{c.name}.json")) for c in cfg.coverage}
    record.update(sources=sources, linkages=linkages, frames=frames,
                  estimation=estimation, coverage=cov)
    try:
        report = tse_report(record)
        error = None
    except IncompleteRun as exc:
        report, error = exc.report, exc
    run.write_json("reports/tse.json", report)
    run.write_text("reports/tse.txt", render_tse_text(report))
    run.done("tse-report")
    if error is not None:
        raise error
    return report


def synth(cfg, seed):
    """Write the configured synthetic scenario's CSVs (outside the workspace)."""
    if not cfg.synth:
        raise ConfigInvalid("config has no synth section")
    scenario = SyntheticScenario.from_config(cfg.synth)
    out = cfg.root / cfg.synth.get("output", "synth_data")
    seed = cfg.synth.get("seed", 0) if seed is None else seed
    return write_scenario(scenario, seed, out)


# -- audit -------------------------------------------------------------------

def audit(ws, cfg=None):
    """Every artifact with its stage and status: current, stale, orphaned, corrupt, missing."""
    m = ws.manifest() if ws.path(MANIFEST).exists() else {"stages": {}}
    artifacts, owned = [], set()
    try:
        stages = m["stages"]
    except (KeyError, TypeError):
        stages = {}
    for stage, entry in sorted(stages.items()):
        stale_inputs = []
        for key, digest in entry.get("inputs", {}).items():
            kind, _, rel = key.partition(":")
            base = cfg.root if (kind == "config" and cfg is not None) else ws.root
            if kind == "config" and cfg is None:
                continue
            p = base / rel
            if not p.exists() or file_digest(p) != digest:
                stale_inputs.append(key)
        revision_changed = cfg is not None and entry.get("config_revision") != cfg.revision
        for rel, digest in entry.get("outputs", {}).items():
            owned.add(rel)
            p = ws.path(rel)
            item = {"path": rel, "stage": stage, "config_revision": entry.get("config_revision"),
                    "inputs": entry.get("inputs", {})}
            if not p.exists():
                item["status"] = "missing"
            elif not _readable(p) or file_digest(p) != digest:
                item["status"] = "corrupt"
            elif stale_inputs or revision_changed:
                item["status"] = "stale"
                item["changed_inputs"] = stale_inputs
                if revision_changed:
                    item["config_changed"] = True
            else:
                item["status"] = "current"
            artifacts.append(item)
    if ws.root.exists():
        for p in sorted(ws.root.rglob("*")):
            rel = ws.rel(p)
            if p.is_file() and rel not in owned and rel not in (MANIFEST, LOCK):
                artifacts.append({"path": rel, "stage": None,
                                  "status": "orphaned" if _readable(p) else "corrupt"})
    return {"workspace_manifest": MANIFEST, "config_revision": m.get("config_revision"),
            "artifacts": artifacts,
            "clean": all(a["status"] == "current" for a in artifacts)}


def _readable(p):
    """Structured files must parse; everything must decode as UTF-8."""
    try:
        text = p.read_text(encoding="utf-8")
        if p.suffix == ".json":
            json.loads(text)
        elif p.suffix == ".ndjson":
            for line in text.splitlines():
                if line.strip():
                    json.loads(line)
        return True
    except (OSError, UnicodeDecodeError, ValueError):
        return False


RUNNERS = {
    "ingest": ingest,
    "register-build": register_build,
    "frame": frame,
    "link": link,
    "calibrate": calibrate,
    "estimate": estimate,
    "coverage": coverage,
    "tse-report": tse,
}


def run_all(cfg, ws):
    for stage in STAGES:
        if stage == "calibrate" and not cfg.calibrations:
            continue
        if stage == "estimate" and not cfg.estimates:
            continue
        if stage == "coverage" and not cfg.coverage:
            continue
        RUNNERS[stage](cfg, ws)

