"""Pipeline configuration and stage orchestration.

One JSON config drives every stage; sections mirror the module configs
(scene / train / export / count / eval) plus a global seed and output
directory. Validation reports every violation at once with dotted paths
(e.g. count.dbscan.eps). Each stage reads its inputs from the artifacts of
the previous stage inside the output directory and refuses to run with a
clear error if they are missing. Every run updates manifest.json with the
config hash, the seed, and sha256 checksums of the artifacts it wrote.

Stage seeds are derived from the global seed: scene = seed, cameras =
seed + 1, training = seed + 2, mask corruption = seed + 3.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import count as count_mod
from . import evaluation, export, field, scenegen, train
from .count import CountConfig
from .export import ExportConfig
from .train import TrainConfig

DATASET_DIR = "dataset"
GRID_FILE = "field_grid.fvgrid"
LOSS_CSV = "loss_curve.csv"
CLOUD_PLY = "fruit_cloud.ply"
COUNT_JSON = "count_report.json"
EVAL_JSON = "eval_report.json"
SWEEP_CSV = "sweep.csv"
MANIFEST = "manifest.json"

SEED_CAMERAS = 1
SEED_TRAIN = 2
SEED_CORRUPTION = 3


class MissingArtifactError(FileNotFoundError):
    """An upstream stage's output is absent; names the stage to run first."""

    def __init__(self, artifact, stage_to_run):
        super().__init__(f"missing artifact {artifact!r}; run the {stage_to_run!r} stage first")
        self.artifact = artifact
        self.stage_to_run = stage_to_run


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        super().__init__("invalid config:\n" + "\n".join(f"  {d}" for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass
class Diagnostic:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/out",
    "scene": {
        "fruit_count": 50,
        "fruit_radius": 0.03,
        "crown_center": [0.5, 0.5, 0.62],
        "crown_radius": 0.24,
        "cluster_fraction": 0.2,
        "trunk_radius": 0.018,
        "trunk_height": 0.58,
        "foliage_amplitude": 6.0,
        "fruit_density": 60.0,
        "trunk_density": 80.0,
        "frames": 60,
        "image_size": 256,
        "camera_radius": 1.05,
        "focal_factor": 1.2,
        "elevation_deg": [2.0, 72.0],
        "render_steps": 256,
        "corruptions": [],
    },
    "train": {
        "iterations": 1000,
        "rays_per_batch": 4096,
        "learning_rate": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "samples_per_ray": 128,
        "grid_resolution": 128,
        "grid_bounds": None,
    },
    "export": {
        "lateral_resolution": 256,
        "steps": 256,
        "density_threshold": 1.0,
        "semantic_threshold": 0.9,
        "axis": "z",
        "roi": None,
    },
    "count": {
        "outlier": {"radius": 0.012, "min_neighbors": 8},
        "dbscan": {"eps": 0.012, "min_pts": 10},
        "template": {"radius": 0.03, "samples": 256},
        "volume_band": {"lo": 0.3, "hi": 1.8},
        "max_fruits_per_cluster": 6,
        "hull_vertices_only": False,
        "refine_tie_tolerance": 0.0,
    },
    "eval": {
        "match_radius": None,
        "optimal_assignment": False,
        "sweep": None,
    },
}


def _merge(base, override, path, diags):
    """Recursive dict merge; flags keys that do not exist in the schema."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            diags.append(Diagnostic(here, "unknown config key"))
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here, diags)
        else:
            out[key] = value
    return out


def _expect_number(cfg, path, diags, lo=None, hi=None, integer=False,
                   strict_lo=False, allow_none=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node is None and allow_none:
        return None
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        diags.append(Diagnostic(path, f"expected a number, got {node!r}"))
        return None
    if integer and int(node) != node:
        diags.append(Diagnostic(path, f"expected an integer, got {node!r}"))
        return None
    if lo is not None and (node <= lo if strict_lo else node < lo):
        op = ">" if strict_lo else ">="
        diags.append(Diagnostic(path, f"must be {op} {lo}, got {node!r}"))
        return None
    if hi is not None and node > hi:
        diags.append(Diagnostic(path, f"must be <= {hi}, got {node!r}"))
        return None
    return node


def validate_config(raw: dict):
    """Merge onto defaults and collect every invariant violation.

    Returns (merged_config_dict, [Diagnostic]); the dict is usable only when
    the diagnostics list is empty.
    """
    diags: list[Diagnostic] = []
    if not isinstance(raw, dict):
        return None, [Diagnostic("", "config root must be a JSON object")]
    cfg = _merge(DEFAULT_CONFIG, raw, "", diags)

    _expect_number(cfg, "seed", diags, integer=True)
    _expect_number(cfg, "scene.fruit_count", diags, lo=0, integer=True)
    _expect_number(cfg, "scene.fruit_radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "scene.crown_radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "scene.cluster_fraction", diags, lo=0, hi=1)
    _expect_number(cfg, "scene.trunk_radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "scene.foliage_amplitude", diags, lo=0)
    _expect_number(cfg, "scene.frames", diags, lo=1, integer=True)
    _expect_number(cfg, "scene.image_size", diags, lo=8, integer=True)
    _expect_number(cfg, "scene.camera_radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "scene.render_steps", diags, lo=1, integer=True)
    if not (isinstance(cfg["scene"]["crown_center"], list) and len(cfg["scene"]["crown_center"]) == 3):
        diags.append(Diagnostic("scene.crown_center", "expected a 3-vector"))
    for i, corr in enumerate(cfg["scene"]["corruptions"] or []):
        here = f"scene.corruptions[{i}]"
        if not isinstance(corr, dict) or "mode" not in corr or "magnitude" not in corr:
            diags.append(Diagnostic(here, "expected {mode, magnitude}"))
            continue
        if corr["mode"] not in ("soft_edges", "dropout", "dilate_erode"):
            diags.append(Diagnostic(f"{here}.mode", f"unknown mode {corr['mode']!r}"))
        if not isinstance(corr["magnitude"], (int, float)) or corr["magnitude"] < 0:
            diags.append(Diagnostic(f"{here}.magnitude", "must be a nonnegative number"))

    _expect_number(cfg, "train.iterations", diags, lo=0, integer=True)
    _expect_number(cfg, "train.rays_per_batch", diags, lo=1, integer=True)
    _expect_number(cfg, "train.learning_rate", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "train.beta1", diags, lo=0, hi=1)
    _expect_number(cfg, "train.beta2", diags, lo=0, hi=1)
    _expect_number(cfg, "train.samples_per_ray", diags, lo=1, integer=True)
    res = cfg["train"]["grid_resolution"]
    if isinstance(res, list):
        if len(res) != 3 or not all(isinstance(v, int) and v >= 2 for v in res):
            diags.append(Diagnostic("train.grid_resolution",
                                    "expected an integer >= 2 or a list of three"))
    else:
        _expect_number(cfg, "train.grid_resolution", diags, lo=2, integer=True)
    gb = cfg["train"]["grid_bounds"]
    if gb is not None:
        ok = (isinstance(gb, list) and len(gb) == 2
              and all(isinstance(side, list) and len(side) == 3 for side in gb))
        if ok:
            lo_b, hi_b = (np.asarray(side, dtype=np.float64) for side in gb)
            ok = bool((lo_b < hi_b).all())
        if not ok:
            diags.append(Diagnostic("train.grid_bounds",
                                    "expected null or [[lo_x,lo_y,lo_z],[hi_x,hi_y,hi_z]] with lo < hi"))

    _expect_number(cfg, "export.lateral_resolution", diags, lo=2, integer=True)
    _expect_number(cfg, "export.steps", diags, lo=2, integer=True)
    _expect_number(cfg, "export.density_threshold", diags, lo=0)
    _expect_number(cfg, "export.semantic_threshold", diags, lo=0, hi=1)
    if cfg["export"]["axis"] not in ("x", "y", "z"):
        diags.append(Diagnostic("export.axis", f"must be x, y, or z, got {cfg['export']['axis']!r}"))

    _expect_number(cfg, "count.outlier.radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "count.outlier.min_neighbors", diags, lo=1, integer=True)
    _expect_number(cfg, "count.dbscan.eps", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "count.dbscan.min_pts", diags, lo=1, integer=True)
    _expect_number(cfg, "count.template.radius", diags, lo=0, strict_lo=True)
    _expect_number(cfg, "count.template.samples", diags, lo=4, integer=True)
    lo_v = _expect_number(cfg, "count.volume_band.lo", diags, lo=0, strict_lo=True)
    hi_v = _expect_number(cfg, "count.volume_band.hi", diags, lo=1, strict_lo=True)
    if lo_v is not None and lo_v >= 1.0:
        diags.append(Diagnostic("count.volume_band.lo", f"must be < 1, got {lo_v!r}"))
    _expect_number(cfg, "count.max_fruits_per_cluster", diags, lo=2, integer=True)
    _expect_number(cfg, "count.refine_tie_tolerance", diags, lo=0)

    _expect_number(cfg, "eval.match_radius", diags, lo=0, strict_lo=True, allow_none=True)
    sweep = cfg["eval"]["sweep"]
    if sweep is not None:
        if not isinstance(sweep, dict):
            diags.append(Diagnostic("eval.sweep", "expected an object with frame_counts/resolutions"))
        else:
            for key in ("frame_counts", "resolutions"):
                vals = sweep.get(key)
                if not (isinstance(vals, list) and vals and
                        all(isinstance(v, int) and v > 0 for v in vals)):
                    diags.append(Diagnostic(f"eval.sweep.{key}", "expected a non-empty list of positive integers"))
            fc = sweep.get("frame_counts")
            if isinstance(fc, list) and fc != sorted(fc):
                diags.append(Diagnostic("eval.sweep.frame_counts", "must be sorted ascending"))

    return cfg, diags


def load_config(path):
    """Read, merge, and validate a JSON config file; raises ConfigError."""
    with open(path) as fh:
        raw = json.load(fh)
    cfg, diags = validate_config(raw)
    if diags:
        raise ConfigError([str(d) for d in diags])
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides (e.g. {'count.dbscan.eps': 0.02})."""
    out = copy.deepcopy(raw)
    for path, value in overrides.items():
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{path}: cannot override inside non-object"])
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# config -> module objects


def scene_spec_from(cfg) -> scenegen.SceneSpec:
    s = cfg["scene"]
    return scenegen.SceneSpec(
        seed=cfg["seed"],
        fruit_count=s["fruit_count"],
        fruit_radius=s["fruit_radius"],
        crown_center=np.asarray(s["crown_center"], dtype=np.float64),
        crown_radius=s["crown_radius"],
        cluster_fraction=s["cluster_fraction"],
        trunk_radius=s["trunk_radius"],
        trunk_height=s["trunk_height"],
        foliage_amplitude=s["foliage_amplitude"],
        fruit_density=s["fruit_density"],
        trunk_density=s["trunk_density"],
    )


def train_config_from(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        iterations=t["iterations"],
        rays_per_batch=t["rays_per_batch"],
        learning_rate=t["learning_rate"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        epsilon=t["epsilon"],
        seed=cfg["seed"] + SEED_TRAIN,
        samples_per_ray=t["samples_per_ray"],
    )


def export_config_from(cfg) -> ExportConfig:
    e = cfg["export"]
    roi = e["roi"]
    return ExportConfig(
        lateral_resolution=e["lateral_resolution"],
        steps=e["steps"],
        density_threshold=e["density_threshold"],
        semantic_threshold=e["semantic_threshold"],
        axis=e["axis"],
        roi_lo=None if roi is None else np.asarray(roi[0], dtype=np.float64),
        roi_hi=None if roi is None else np.asarray(roi[1], dtype=np.float64),
    )


def count_config_from(cfg) -> CountConfig:
    c = cfg["count"]
    return CountConfig(
        outlier_radius=c["outlier"]["radius"],
        outlier_min_neighbors=c["outlier"]["min_neighbors"],
        dbscan_eps=c["dbscan"]["eps"],
        dbscan_min_pts=c["dbscan"]["min_pts"],
        template_radius=c["template"]["radius"],
        template_samples=c["template"]["samples"],
        band_lo=c["volume_band"]["lo"],
        band_hi=c["volume_band"]["hi"],
        max_fruits_per_cluster=c["max_fruits_per_cluster"],
        hull_vertices_only=c["hull_vertices_only"],
        refine_tie_tolerance=c["refine_tie_tolerance"],
    )


# ---------------------------------------------------------------------------
# stages


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _update_manifest(outdir: Path, cfg, stage, artifacts):
    path = outdir / MANIFEST
    manifest = {"config_sha256": config_hash(cfg), "seed": cfg["seed"], "stages": {}}
    if path.exists():
        with open(path) as fh:
            old = json.load(fh)
        if old.get("config_sha256") == manifest["config_sha256"]:
            manifest["stages"] = old.get("stages", {})
    checks = {}
    for rel in artifacts:
        target = outdir / rel
        if target.is_dir():
            for sub in sorted(target.rglob("*")):
                if sub.is_file():
                    checks[str(sub.relative_to(outdir))] = _sha256_file(sub)
        else:
            checks[rel] = _sha256_file(target)
    manifest["stages"][stage] = {"artifacts": checks}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _require(outdir: Path, rel, stage_to_run) -> Path:
    path = outdir / rel
    if not path.exists():
        raise MissingArtifactError(rel, stage_to_run)
    return path


def run_synth(cfg, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    spec = scene_spec_from(cfg)
    scene = scenegen.generate_scene(spec)
    s = cfg["scene"]
    cams = scenegen.sample_hemisphere_cameras(
        s["frames"], s["camera_radius"], spec.crown_center, cfg["seed"] + SEED_CAMERAS,
        width=s["image_size"], height=s["image_size"],
        focal_px=s["focal_factor"] * s["image_size"],
        elevation_deg=tuple(s["elevation_deg"]),
    )
    frames = scenegen.render_frames(scene, cams, steps=s["render_steps"])
    for i, corr in enumerate(s["corruptions"] or []):
        frames = scenegen.corrupt_masks(frames, corr["mode"], corr["magnitude"],
                                        cfg["seed"] + SEED_CORRUPTION + i)
    scenegen.save_dataset(frames, scene, outdir / DATASET_DIR)
    _update_manifest(outdir, cfg, "synth", [DATASET_DIR])
    return scene


def make_grid(cfg):
    t = cfg["train"]
    bounds = t["grid_bounds"]
    if bounds is None:
        bounds = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    return field.init_grid(t["grid_resolution"], bounds=bounds)


def run_train(cfg, outdir: Path):
    dataset = _require(outdir, DATASET_DIR, "synth")
    _require(outdir, f"{DATASET_DIR}/transforms.json", "synth")
    frames, _ = scenegen.load_dataset(dataset)
    grid = make_grid(cfg)
    grid, reports = train.train(frames, train_config_from(cfg), grid=grid)
    field.save_grid(grid, outdir / GRID_FILE)
    train.write_loss_csv(reports, outdir / LOSS_CSV)
    _update_manifest(outdir, cfg, "train", [GRID_FILE, LOSS_CSV])
    return grid, reports


def run_export(cfg, outdir: Path):
    grid_path = _require(outdir, GRID_FILE, "train")
    grid = field.load_grid(grid_path)
    cloud = export.sample_volume(grid, export_config_from(cfg))
    export.write_ply(cloud, outdir / CLOUD_PLY)
    _update_manifest(outdir, cfg, "export", [CLOUD_PLY])
    return cloud

def run_count(cfg, outdir: Path):
    ply_path = _require(outdir, CLOUD_PLY, "export")
    cloud = export.read_ply(ply_path)
    report = count_mod.count(cloud, count_config_from(cfg))
    (outdir / COUNT_JSON).write_text(report.to_json() + "\n")
    _update_manifest(outdir, cfg, "count", [COUNT_JSON])
    return report


def run_eval(cfg, outdir: Path):
    count_path = _require(outdir, COUNT_JSON, "count")
    gt_path = _require(outdir, f"{DATASET_DIR}/gt_fruits.json", "synth")
    with open(count_path) as fh:
        report = count_mod.report_from_dict(json.load(fh))
    with open(gt_path) as fh:
        gt = json.load(fh)
    tau = cfg["eval"]["match_radius"]
    if tau is None:
        tau = cfg["count"]["template"]["radius"]
    ev = evaluation.match(report.centers, np.asarray(gt["centers"]), tau,
                          cfg["eval"]["optimal_assignment"])
    (outdir / EVAL_JSON).write_text(ev.to_json() + "\n")
    _update_manifest(outdir, cfg, "eval", [EVAL_JSON])
    return ev


def run_sweep(cfg, outdir: Path):
    sweep = cfg["eval"]["sweep"]
    if sweep is None:
        raise ConfigError(["eval.sweep: sweep requested but not configured"])
    outdir.mkdir(parents=True, exist_ok=True)
    scene = scenegen.generate_scene(scene_spec_from(cfg))
    s = cfg["scene"]
    sweep_cfg = evaluation.SweepConfig(
        train=train_config_from(cfg),
        export=export_config_from(cfg),
        count=count_config_from(cfg),
        grid_resolution=cfg["train"]["grid_resolution"],
        grid_bounds=cfg["train"]["grid_bounds"],
        camera_radius=s["camera_radius"],
        focal_factor=s["focal_factor"],
        camera_seed=cfg["seed"] + SEED_CAMERAS,
        elevation_deg=tuple(s["elevation_deg"]),
        render_steps=s["render_steps"],
        match_radius=cfg["eval"]["match_radius"],
        optimal_assignment=cfg["eval"]["optimal_assignment"],
    )
    rows = evaluation.frame_sweep(scene, sweep["frame_counts"], sweep["resolutions"],
                                  sweep_cfg, csv_path=outdir / SWEEP_CSV)
    _update_manifest(outdir, cfg, "sweep", [SWEEP_CSV])
    return rows


def run_e2e(cfg, outdir: Path):
    run_synth(cfg, outdir)
    run_train(cfg, outdir)
    run_export(cfg, outdir)
    run_count(cfg, outdir)
    return run_eval(cfg, outdir)


STAGES = {
    "synth": run_synth,
    "train": run_train,
    "export": run_export,
    "count": run_count,
    "eval": run_eval,
    "sweep": run_sweep,
    "e2e": run_e2e,
}
