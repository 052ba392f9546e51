"""Recipe-driven experiment runner: layered YAML specs, result files, manifests."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import calibration as cal
from . import mash
from . import signalcore as sc
from . import theory
from .readout import MetastabilityModel, gradient_pw_errors
from .vcomodel import InnerGrid, stage1_curve, stage2_curve, stage2_nl_curve

log = logging.getLogger(__name__)

SPEC_SCHEMA = 1
MANIFEST_SCHEMA = 1
OUTPUT_ROOT_ENV = "MASHVCO_OUTPUT_ROOT"
KINDS = ("theory", "variants", "sweep", "calibration")
TOP_FIELDS = ("schema", "name", "kind", "description", "recipe", "config", "sweep", "variants",
              "analysis", "calibration", "evaluate", "theory", "output_dir")

DEFAULT_PARAMS = {
    "architecture": "mash_cc",
    "fs": 3.5e9,
    "osr": 16,
    "n_phi1": 32,
    "n_phi2": 32,
    "n_samples": 131072,
    "seed": 0,
    "f_in": 31.25e6,
    "amplitude": 0.375,
    "tones": None,
    "f0_1": 1.0e9,
    "f_range1": 1.21e9,
    "stage1_nl": [],
    "f0_2": 0.9e9,
    "f_range2": 1.57e9,
    "stage2_preset": "ideal",
    "pw_max_skew": 0.0,
    "thermal_snr_target_db": None,
    "dyn_tau": 0.0,
    "dyn_poly": [],
    "g_rel_mismatch": 0.0,
    "metastability_tau": 0.0,
    "grid_points": 32,
    "differential_stage1": False,
}


class SpecError(ValueError):
    """Invalid experiment spec; the message carries file/line/field context."""


# --------------------------------------------------------------------------
# recipes and layering


def _recipe_dir():
    return resources.files("mashvco") / "recipes"


def recipe_names() -> list[str]:
    return sorted(p.name[:-5] for p in _recipe_dir().iterdir() if p.name.endswith(".yaml"))


def recipe_text(name: str) -> str:
    p = _recipe_dir() / f"{name}.yaml"
    if not p.is_file():
        raise SpecError(f"unknown recipe {name!r}; see `list`")
    return p.read_text()


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line of that key."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                out[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def _parse(text: str, origin: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{origin}:{mark.line + 1}" if mark else origin
        raise SpecError(f"{where}: YAML parse error: {getattr(exc, 'problem', exc)}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise SpecError(f"{origin}: expected a mapping at top level")
    return doc


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_dotted(doc: dict, key: str, value):
    parts = key.split(".")
    if len(parts) == 1 and parts[0] not in TOP_FIELDS:
        parts = ["config", parts[0]]
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise SpecError(f"<command line>: field {key!r}: {p!r} is not a section")
    node[parts[-1]] = value
    return ".".join(parts)


def parse_overrides(items) -> list[tuple[str, object]]:
    out = []
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise SpecError(f"<command line>: expected key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw) if raw else None
        except yaml.YAMLError:
            value = raw
        out.append((key.strip(), value))
    return out


def _as_pairs(overrides) -> list[tuple[str, object]]:
    if isinstance(overrides, dict):
        return list(overrides.items())
    strs = [o for o in overrides or () if isinstance(o, str)]
    pairs = [o for o in overrides or () if not isinstance(o, str)]
    return parse_overrides(strs) + [tuple(p) for p in pairs]


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    config: dict
    sweep: dict | None = None
    variants: list = field(default_factory=list)
    analysis: dict = field(default_factory=dict)
    calibration: dict | None = None
    evaluate: dict | None = None
    theory: dict | None = None
    output_dir: str | None = None
    description: str = ""

    def to_dict(self) -> dict:
        d = {"schema": SPEC_SCHEMA, "name": self.name, "kind": self.kind,
             "description": self.description, "config": self.config}
        for key in ("sweep", "variants", "analysis", "calibration", "evaluate", "theory"):
            v = getattr(self, key)
            if v:
                d[key] = v
        return d


def load_spec(source, overrides=()) -> ExperimentSpec:
    """Resolve recipe defaults < user file < ``key=value`` overrides.

    ``source`` is a bundled recipe name or a path to a YAML file; a file may
    name a bundled ``recipe:`` to inherit from.
    """
    lines: list[tuple[str, dict]] = []
    path = Path(str(source))
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.is_file():
            raise SpecError(f"{path}: no such spec file")
        text = path.read_text()
        doc = _parse(text, str(path))
        lines.append((str(path), _line_map(text)))
        base_name = doc.get("recipe")
        if base_name is not None:
            rtext = recipe_text(str(base_name))
            lines.append((f"recipe {base_name}", _line_map(rtext)))
            doc = _merge(_parse(rtext, f"recipe {base_name}"), {k: v for k, v in doc.items() if k != "recipe"})
    else:
        rtext = recipe_text(str(source))
        doc = _parse(rtext, f"recipe {source}")
        lines.append((f"recipe {source}", _line_map(rtext)))
    cli_paths = set()
    for key, value in _as_pairs(overrides):
        cli_paths.add(_set_dotted(doc, key, value))
    if cli_paths:
        lines.insert(0, ("<command line>", {p: None for p in cli_paths}))
    try:
        return validate_spec(doc)
    except SpecError as exc:
        raise SpecError(_locate(str(exc), lines)) from None


def _locate(msg: str, lines) -> str:
    if msg.startswith("field "):
        path = msg.split("'")[1]
        for origin, lm in lines:
            if path in lm:
                return f"{origin}: {msg}" if lm[path] is None else f"{origin}:{lm[path]}: {msg}"
        return f"{lines[0][0] if lines else '<spec>'}: {msg}"
    return msg


def _field(path: str, msg: str) -> SpecError:
    return SpecError(f"field '{path}': {msg}")


def validate_spec(doc: dict) -> ExperimentSpec:
    for k in doc:
        if k not in TOP_FIELDS:
            raise _field(k, "unknown field")
    if doc.get("schema", SPEC_SCHEMA) != SPEC_SCHEMA:
        raise _field("schema", f"unsupported schema {doc.get('schema')!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise _field("name", "must be a non-empty string")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise _field("kind", f"must be one of {KINDS}")
    config = doc.get("config") or {}
    if not isinstance(config, dict):
        raise _field("config", "must be a mapping")
    spec = ExperimentSpec(
        name=name, kind=kind, config=config, sweep=doc.get("sweep"),
        variants=doc.get("variants") or [], analysis=doc.get("analysis") or {},
        calibration=doc.get("calibration"), evaluate=doc.get("evaluate"),
        theory=doc.get("theory"), output_dir=doc.get("output_dir"),
        description=doc.get("description", ""),
    )
    base = build_config(config, "config")
    if kind == "sweep":
        sw = spec.sweep
        if not isinstance(sw, dict):
            raise _field("sweep", "a sweep recipe needs a sweep section")
        for k in sw:
            if k not in ("param", "values", "seeds", "unit"):
                raise _field(f"sweep.{k}", "unknown field")
        if sw.get("param") not in mash.SWEEP_PARAMS:
            raise _field("sweep.param", f"must be one of {mash.SWEEP_PARAMS}")
        if not isinstance(sw.get("values", []), list):
            raise _field("sweep.values", "must be a list")
        if sw.get("unit", "native") not in ("native", "dbfs"):
            raise _field("sweep.unit", "must be 'native' or 'dbfs'")
        if sw.get("unit") == "dbfs" and sw["param"] != "amplitude":
            raise _field("sweep.unit", "dbfs applies to amplitude sweeps only")
        seeds = sw.get("seeds", [base.seed])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise _field("sweep.seeds", "must be a non-empty list of integers")
        try:
            for v in sw.get("values", []):
                mash.apply_sweep_value(base, sw["param"], _native_value(base, sw, v)).validate()
        except (mash.ConfigError, TypeError, ValueError) as exc:
            raise _field("sweep.values", str(exc)) from None
    if kind == "variants":
        if not isinstance(spec.variants, list) or not spec.variants:
            raise _field("variants", "must be a non-empty list")
        names = set()
        for i, v in enumerate(spec.variants):
            if not isinstance(v, dict) or not isinstance(v.get("name"), str):
                raise _field(f"variants.{i}", "each variant needs a name")
            if v["name"] in names:
                raise _field(f"variants.{i}", f"duplicate variant name {v['name']!r}")
            names.add(v["name"])
            build_config({**config, **(v.get("config") or {})}, f"variants.{i}.config")
        for pair in spec.analysis.get("losses", []):
            if not (isinstance(pair, list) and len(pair) == 2 and set(pair) <= names):
                raise _field("analysis.losses", f"{pair!r} must name two variants")
    if kind == "calibration":
        c = spec.calibration or {}
        orders = c.get("orders", [5, 5, 2])
        if not (isinstance(orders, list) and len(orders) == 3 and all(isinstance(o, int) and o >= 1 for o in orders)):
            raise _field("calibration.orders", "must be three positive integers")
        if spec.evaluate:
            build_config({**config, **(spec.evaluate.get("config") or {})}, "evaluate.config")
    if kind == "theory":
        t = spec.theory or {}
        osr = t.get("osr", [])
        if not isinstance(osr, list) or not all(isinstance(v, (int, float)) and v > 0 for v in osr):
            raise _field("theory.osr", "must be a list of positive numbers")
    return spec


def build_config(params: dict, where: str = "config") -> mash.SimConfig:
    """Flat recipe parameters on top of the nominal design defaults -> SimConfig."""
    for k in params:
        if k not in DEFAULT_PARAMS:
            raise _field(f"{where}.{k}", "unknown config field")
    p = {**DEFAULT_PARAMS, **params}
    try:
        fs = float(p["fs"])
        n = int(p["n_samples"])
        n_phi1 = int(p["n_phi1"])
        curve1 = stage1_curve(float(p["f0_1"]), float(p["f_range1"]),
                              nl_poly=tuple(float(v) for v in p["stage1_nl"] or ()))
        preset = p["stage2_preset"]
        if preset == "ideal":
            curve2 = stage2_curve(float(p["f0_2"]), float(p["f_range2"]), n_phi1)
        elif preset in ("nl18", "nl3"):
            curve2 = stage2_nl_curve(preset, float(p["f_range2"]), n_phi1, fs)
        else:
            raise _field(f"{where}.stage2_preset", "must be ideal, nl18 or nl3")
        if p["tones"]:
            tones = tuple(mash.Tone(float(t[0]), sc.coherent_bin_frequency(float(t[1]), fs, n),
                                    float(t[2]) if len(t) > 2 else 0.0) for t in p["tones"])
        else:
            tones = (mash.Tone(float(p["amplitude"]), sc.coherent_bin_frequency(float(p["f_in"]), fs, n)),)
        skew = float(p["pw_max_skew"])
        pw = gradient_pw_errors(n_phi1, skew) if skew else mash.PulseWidthErrors()
        tau = float(p["metastability_tau"])
        thermal = p["thermal_snr_target_db"]
        cfg = mash.SimConfig(
            fs=fs, osr=int(p["osr"]), n_phi1=n_phi1, n_phi2=int(p["n_phi2"]),
            curve1=curve1, curve2=curve2, architecture=p["architecture"],
            differential_stage1=bool(p["differential_stage1"]), stimulus=tones, n_samples=n,
            pw_errors=pw, metastability=MetastabilityModel(tau=tau, enabled=tau > 0),
            thermal_snr_target_db=None if thermal is None else float(thermal),
            seed=int(p["seed"]), grid=InnerGrid(int(p["grid_points"])),
            g_scale=1.0 + float(p["g_rel_mismatch"]), dyn_tau=float(p["dyn_tau"]),
            dyn_poly=tuple(float(v) for v in p["dyn_poly"] or ()),
        )
        return cfg.validate()
    except SpecError:
        raise
    except (mash.ConfigError, ValueError, TypeError, IndexError) as exc:
        # messages from config validation usually open with the parameter name
        head = str(exc).split(" ", 1)[0].rstrip(":")
        raise _field(f"{where}.{head}" if head in DEFAULT_PARAMS else where, str(exc)) from None


def _native_value(base: mash.SimConfig, sw: dict, v):
    if sw.get("unit") == "dbfs":
        return base.curve1.half * 10 ** (float(v) / 20)
    return v


# --------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    recipe: str
    timestamp: str
    seed: int
    config_hash: str
    files: list[str]
    headline: dict[str, float]
    schema: int = MANIFEST_SCHEMA
    output_dir: str = ""

    def to_dict(self) -> dict:
        return {
            "schema": self.schema, "recipe": self.recipe, "timestamp": self.timestamp,
            "seed": self.seed, "config_hash": self.config_hash, "files": self.files,
            "headline": self.headline,
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"{path}: cannot read manifest ({exc})") from None
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise SpecError(f"{path}: unsupported manifest schema {doc.get('schema')!r}")
        return cls(doc["recipe"], doc["timestamp"], doc["seed"], doc["config_hash"],
                   doc["files"], doc["headline"], doc["schema"], str(path.parent))


def config_hash(spec: ExperimentSpec) -> str:
    base = build_config(spec.config)
    doc = {"spec": spec.to_dict(), "config": mash.config_to_dict(base)}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------
# execution


class _Out:
    """Collects files written into the staging directory."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def json(self, name: str, doc):
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header: list[str], rows):
        with self.path(name).open("w") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run(source, overrides=(), output_dir=None, workers: int = 1, plots: bool = True) -> RunManifest:
    """Execute a spec and write its result directory.

    Files are staged next to the destination and moved into place only when
    the whole run succeeds, so a failed run leaves nothing behind.
    """
    spec = source if isinstance(source, ExperimentSpec) else load_spec(source, overrides)
    dest = Path(output_dir or spec.output_dir or default_output_root() / spec.name)
    dest.parent.mkdir(parents=True, exist_ok=True)
    if not os.access(dest.parent, os.W_OK):
        raise SpecError(f"field 'output_dir': {dest.parent} is not writable")
    stage = Path(tempfile.mkdtemp(prefix=f".{dest.name}.partial-", dir=dest.parent))
    try:
        out = _Out(stage)
        handler = {"theory": _run_theory, "variants": _run_variants,
                   "sweep": _run_sweep, "calibration": _run_calibration}[spec.kind]
        headline = handler(spec, out, workers, plots)
        base = build_config(spec.config)
        manifest = RunManifest(
            recipe=spec.name,
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            seed=base.seed,
            config_hash=config_hash(spec),
            files=sorted(out.files) + ["manifest.json", "spec.yaml"],
            headline={k: float(v) for k, v in headline.items()},
        )
        (stage / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
        (stage / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
        if dest.exists():
            shutil.rmtree(dest)
        stage.rename(dest)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    manifest.output_dir = str(dest)
    return manifest


def _plot(plots: bool, out: "_Out", name: str, fn, *args, **kwargs):
    """Render ``name`` only when plotting is on, so skipped figures stay unlisted."""
    if not plots:
        return
    from . import plotting

    getattr(plotting, fn)(*args, path=out.path(name), **kwargs)


def _run_theory(spec, out, workers, plots):
    cfg = build_config(spec.config)
    t = spec.theory or {}
    params = theory.TheoryParams(
        fs=cfg.fs, osr=cfg.osr, n_phi1=cfg.n_phi1, n_phi2=cfg.n_phi2,
        f_range1=cfg.curve1.f_range, f_range2=cfg.curve2.f_range,
        f0_1=cfg.curve1.f0, f0_2=cfg.curve2.f0,
        amplitude_fraction=float(t.get("amplitude_fraction", 1.0)))
    rows = theory.sqnr_curve(params, t.get("osr", [2, 4, 8, 16, 32, 64, 128]))
    theory.write_curve_csv(rows, out.path("theory.csv"))
    _plot(plots, out, "theory.png", "plot_theory", rows)
    head = {"sqnr_mash_db": theory.sqnr_mash(params), "sqnr_single_db": theory.sqnr_single(params)}
    return head


def _metrics_row(m: sc.Metrics) -> list:
    return [m.snr_db, m.sndr_db, m.sfdr_db, m.thd_db, m.enob_bits]


METRIC_COLUMNS = ["snr_db", "sndr_db", "sfdr_db", "thd_db", "enob_bits"]


def _sim_task(args):
    cfg, osr, n_harm = args
    res = mash.simulate(cfg)
    return res, mash.analyze(res, osr, n_harm)


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _run_variants(spec, out, workers, plots):
    seeds = spec.analysis.get("seeds") or [int(spec.config.get("seed", 0))]
    osr = spec.analysis.get("osr")
    n_harm = int(spec.analysis.get("n_harmonics", 5))
    tasks, keys = [], []
    for v in spec.variants:
        cfg = build_config({**spec.config, **(v.get("config") or {})})
        for s in seeds:
            tasks.append((replace(cfg, seed=int(s)), osr, n_harm))
            keys.append((v["name"], int(s)))
    results = _map(_sim_task, tasks, workers)
    rows, per_variant, metrics_doc = [], {}, {}
    for (name, s), (res, m) in zip(keys, results):
        rows.append([name, s, *_metrics_row(m)])
        per_variant.setdefault(name, []).append(m)
        metrics_doc.setdefault(name, {})[str(s)] = m.to_dict()
        if s == seeds[0]:
            sc.write_raw(res.d, out.path(f"d_{name}.f64"))
            out.files.append(f"d_{name}.f64.json")
            spec_d = sc.spectrum(res.d, res.config.n_samples, 1, "rectangular")
            sc.spectrum_csv(spec_d, out.path(f"spectrum_{name}.csv"))
            _plot(plots, out, f"spectrum_{name}.png", "plot_spectrum", spec_d, title=name,
                  band_edge=res.config.fs / (2 * (osr or res.config.osr)))
    out.csv("variants.csv", ["variant", "seed", *METRIC_COLUMNS], rows)
    out.json("metrics.json", metrics_doc)
    head = {}
    for name, ms in per_variant.items():
        head[f"{name}.snr_db"] = float(np.mean([m.snr_db for m in ms]))
        head[f"{name}.sndr_db"] = float(np.mean([m.sndr_db for m in ms]))
    for a, b in spec.analysis.get("losses", []):
        head[f"loss.{a}_vs_{b}_db"] = head[f"{b}.snr_db"] - head[f"{a}.snr_db"]
    _plot(plots, out, "variants.png", "plot_bars", {n: head[f"{n}.snr_db"] for n in per_variant})
    return head


def _cal_point_task(args):
    cfg, osr, n_harm, lut_doc, dec = args
    res = mash.simulate(cfg)
    raw = mash.analyze(res, osr, n_harm)
    if lut_doc is None:
        return raw, None
    lut = cal.CorrectionLUT.from_dict(lut_doc)
    _, mid = cal.correct(res.d, lut, dec, keep_intermediate=True)
    f = cfg.stimulus[0].freq
    return raw, sc.metrics(sc.spectrum(mid, len(mid), 1, "rectangular"), f, dec.post_factor, n_harm)


def _run_sweep(spec, out, workers, plots):
    sw = spec.sweep
    base = build_config(spec.config)
    seeds = [int(s) for s in sw.get("seeds", [base.seed])]
    values = list(sw.get("values", []))
    osr = spec.analysis.get("osr")
    n_harm = int(spec.analysis.get("n_harmonics", 5))
    lut_doc = dec = None
    head = {}
    if spec.calibration:
        run_c = _calibrate_capture(spec)
        lut_doc, dec = run_c.lut.to_dict(), run_c.dec
        cal.save_model(run_c.model, out.path("model.json"), run_c.lut, _dec_params(spec))
    tasks, keys = [], []
    for v in values:
        cfg = mash.apply_sweep_value(base, sw["param"], _native_value(base, sw, v))
        for s in seeds:
            tasks.append((replace(cfg, seed=s), osr, n_harm, lut_doc, dec))
            keys.append((float(v), s))
    results = _map(_safe_cal_point, tasks, workers)
    rows, metrics_doc = [], []
    cols = ["value", "seed", *METRIC_COLUMNS, "error"]
    if lut_doc is not None:
        cols[-1:-1] = ["snr_cal_db", "sndr_cal_db"]
    by_value: dict[float, list] = {}
    for (v, s), (raw, corr, err) in zip(keys, results):
        row = [v, s, *(_metrics_row(raw) if raw else [None] * 5)]
        if lut_doc is not None:
            row += [corr.snr_db, corr.sndr_db] if corr else [None, None]
        rows.append(row + [err or ""])
        metrics_doc.append({"value": v, "seed": s, "error": err,
                            "metrics": raw.to_dict() if raw else None,
                            "corrected": corr.to_dict() if corr else None})
        if raw is not None:
            by_value.setdefault(v, []).append((raw, corr))
    out.csv("sweep.csv", cols, rows)
    out.json("metrics.json", metrics_doc)
    mean_rows = []
    for v, ms in by_value.items():
        snr = float(np.mean([m.snr_db for m, _ in ms]))
        sndr = float(np.mean([m.sndr_db for m, _ in ms]))
        row = [v, snr, sndr]
        head[f"snr_db@{v:g}"] = snr
        head[f"sndr_db@{v:g}"] = sndr
        if lut_doc is not None:
            sndr_c = float(np.mean([c.sndr_db for _, c in ms]))
            head[f"sndr_cal_db@{v:g}"] = sndr_c
            row.append(sndr_c)
        mean_rows.append(row)
    mcols = [sw["param"], "snr_db_mean", "sndr_db_mean"] + (["sndr_cal_db_mean"] if lut_doc else [])
    out.csv("sweep_mean.csv", mcols, mean_rows)
    head["n_points"] = len(rows)
    head["n_failed"] = sum(1 for r in rows if r[-1])
    if sw.get("unit") == "dbfs" and mean_rows:
        for label, col in (("", 2), ("_cal", 3)):
            if col < len(mean_rows[0]):
                dr = dynamic_range([r[0] for r in mean_rows], [r[col] for r in mean_rows])
                if dr is not None:
                    head[f"dr{label}_db"] = dr
                head[f"peak_sndr{label}_db"] = max(r[col] for r in mean_rows)
    if mean_rows:
        _plot(plots, out, "sweep.png", "plot_sweep", mean_rows, mcols)
    return head


def _safe_cal_point(args):
    try:
        raw, corr = _cal_point_task(args)
        return raw, corr, None
    except (mash.ConfigError, ValueError, ArithmeticError, np.linalg.LinAlgError, sc.FitError) as exc:
        return None, None, f"{type(exc).__name__}: {exc}"


def dynamic_range(level_dbfs, sndr_db, linear_below: float = -20.0) -> float | None:
    """Input range from the extrapolated 0 dB SNDR level to full scale.

    Uses points at or below ``linear_below`` dBFS, where SNDR tracks the
    input level one-for-one above a flat noise floor.
    """
    pts = [(a, s) for a, s in zip(level_dbfs, sndr_db) if a <= linear_below]
    if not pts:
        return None
    return float(np.mean([s - a for a, s in pts]))


def _dec_params(spec) -> dict:
    c = spec.calibration or {}
    cfg = build_config({**spec.config, **(c.get("config") or {})})
    return {"osr": cfg.osr, "pre_factor": int(c.get("pre_factor", 4))}


def _calibrate_capture(spec) -> cal.CalibrationRun:
    c = spec.calibration or {}
    capture_cfg = build_config({**spec.config, **(c.get("config") or {})})
    res = mash.simulate(capture_cfg)
    return cal.calibrate(res.d, capture_cfg.stimulus[0].freq, tuple(c.get("orders", [5, 5, 2])),
                         capture_cfg.osr, int(c.get("pre_factor", 4)))


def _eval_metrics(stream, tones, osr, n_harm):
    spec = sc.spectrum(stream, len(stream), 1, "rectangular")
    if len(tones) == 1:
        return spec, sc.metrics(spec, tones[0].freq, osr, n_harm).to_dict()
    return spec, two_tone_metrics(spec, tones[0].freq, tones[1].freq, osr)


def two_tone_metrics(spec: sc.Spectrum, f1: float, f2: float, osr: int) -> dict:
    """Third-order intermodulation relative to the weaker tone, and SNDR-like ratio."""
    p = spec.power
    rate = spec.rate
    n = spec.n_fft

    def bin_of(f):
        k = int(round(f / rate * n)) % n
        return min(k, n - k)

    band = int(np.floor(n / (2 * osr)))
    k1, k2 = bin_of(f1), bin_of(f2)
    im = [bin_of(2 * f1 - f2), bin_of(2 * f2 - f1)]
    p1, p2 = p[k1], p[k2]
    p_im = max(p[k] for k in im)
    inband = p[1:band + 1].sum() - p1 - p2
    return {
        "tone1_dbfs": 10 * np.log10(p1) if p1 > 0 else -np.inf,
        "tone2_dbfs": 10 * np.log10(p2) if p2 > 0 else -np.inf,
        "imd3_dbc": float(10 * np.log10(max(p_im, 1e-300) / min(p1, p2))),
        "sndr_db": float(10 * np.log10((p1 + p2) / max(inband, 1e-300))),
    }


def _run_calibration(spec, out, workers, plots):
    base = build_config(spec.config)
    run_c = _calibrate_capture(spec)
    cal.save_model(run_c.model, out.path("model.json"), run_c.lut, _dec_params(spec))
    a, b = cal.write_lut_hex(run_c.lut, out.root / "correction")
    out.files += [a.name, b.name]
    n_harm = int(spec.analysis.get("n_harmonics", 9))
    dec = run_c.dec
    eval_osr = dec.post_factor
    head = {"iterations": run_c.model.iterations}
    if spec.evaluate:
        cfg = build_config({**spec.config, **(spec.evaluate.get("config") or {})})
        d = mash.simulate(cfg).d
    else:
        cfg, d = base, run_c.capture
    tones = cfg.stimulus
    pre = cal.decimate(d, dec.pre_factor, dec.pre) if dec.pre else d
    stats = cal.CorrectionStats()
    out_f, mid_f = cal.correct(d, run_c.model, dec, keep_intermediate=True)
    out_l, mid_l = cal.correct(d, run_c.lut, dec, stats=stats, keep_intermediate=True)
    doc = {}
    spectra = {}
    for label, stream in (("uncal", pre), ("float", mid_f), ("lut", mid_l)):
        spectra[label], doc[label] = _eval_metrics(stream, tones, eval_osr, n_harm)
        sc.spectrum_csv(spectra[label], out.path(f"spectrum_{label}.csv"))
        for k, v in doc[label].items():
            if k in ("snr_db", "sndr_db", "sfdr_db", "imd3_dbc"):
                head[f"{k.rsplit('_', 1)[0]}_{label}_{k.rsplit('_', 1)[1]}"] = v
    doc["lut_stats"] = {"n_clamped": stats.n_clamped, "n_saturated": stats.n_saturated}
    doc["model"] = {"iterations": run_c.model.iterations, "residual": run_c.model.residual}
    out.json("metrics.json", doc)
    sc.write_raw(out_l, out.path("d_corrected.f64"))
    out.files.append("d_corrected.f64.json")
    _plot(plots, out, "calibration.png", "plot_calibration", spectra["uncal"], spectra["lut"],
          band_edge=d.rate / dec.pre_factor / (2 * eval_osr))
    return head


# --------------------------------------------------------------------------
# listing and comparison


def list_experiments() -> list[tuple[str, str, str]]:
    """``(name, kind, description)`` for every bundled recipe."""
    rows = []
    for name in recipe_names():
        doc = _parse(recipe_text(name), f"recipe {name}")
        rows.append((name, doc.get("kind", ""), " ".join(str(doc.get("description", "")).split())))
    return rows


def _is_db(key: str) -> bool:
    return key.split("@")[0].endswith(("_db", "_dbc"))


@dataclass
class Comparison:
    recipe: str
    rows: list[tuple[str, float | None, float | None, float | None]]
    tolerance_db: float

    @property
    def breaches(self) -> list[str]:
        return [k for k, a, b, d in self.rows
                if _is_db(k) and (d is None or abs(d) > self.tolerance_db)]

    @property
    def ok(self) -> bool:
        return not self.breaches


def compare(manifest_a, manifest_b, tolerance_db: float = 0.5) -> Comparison:
    a = manifest_a if isinstance(manifest_a, RunManifest) else RunManifest.load(manifest_a)
    b = manifest_b if isinstance(manifest_b, RunManifest) else RunManifest.load(manifest_b)
    if a.recipe != b.recipe:
        raise SpecError(f"recipe mismatch: {a.recipe!r} vs {b.recipe!r}")
    rows = []
    for k in sorted(set(a.headline) | set(b.headline)):
        va, vb = a.headline.get(k), b.headline.get(k)
        d = None if va is None or vb is None else vb - va
        rows.append((k, va, vb, d))
    return Comparison(a.recipe, rows, tolerance_db)
