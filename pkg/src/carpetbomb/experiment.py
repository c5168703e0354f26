"""Reproducible experiment orchestration.

A JSON experiment config fully determines an attack run. Its digest is
the SHA-256 of the canonical serialization (sorted keys, no insignificant
whitespace) and is embedded in every output artifact; `verify` re-hashes
and confirms. Craft artifacts are byte-identical across reruns of the
same config and seed. A per-output-directory lock file serializes
experiment processes; the ledger (JSON lines) is append-only, and a
config whose digest already appears there is skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import forensics as forensics_mod
from .core import (
    Noise,
    NoiseBudget,
    Patch,
    Placement,
    load_attack,
    save_noise,
    save_patch,
)
from .errors import CraftRuntimeError, ValidationError
from .evaluate import (
    EvalConfig,
    EvalReport,
    eval_classification,
    eval_detection_contextual,
    eval_segmentation,
)
from .forge import (
    CraftConfig,
    NoiseCraftConfig,
    craft_carpet_patch,
    craft_feature_noise_tmifgsm,
    craft_forced,
    craft_task_patch,
)
from .losses import CombinedLossConfig, FeatureTargetSpec
from .manifest import ManifestImageSource, check_disjoint, load_manifest
from .models import build_model

ATTACK_KINDS = ("carpet_patch", "task_patch", "tmifgsm_noise", "forced")

LOCK_NAME = ".carpetbomb.lock"
LEDGER_NAME = "ledger.jsonl"


def canonical_json(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_digest(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _placement_from(raw: dict) -> Placement:
    return Placement(
        mode=raw.get("mode", "top_left_offset"),
        patch_h=int(raw["height"]),
        patch_w=int(raw["width"]),
        offset_row=int(raw.get("offset_row", 0)),
        offset_col=int(raw.get("offset_col", 0)),
    )


def _spec_from(raw: dict) -> FeatureTargetSpec:
    channels = raw.get("channels")
    if isinstance(channels, dict):
        channels = {
            layer: (None if v in (None, "all") else tuple(int(c) for c in v))
            for layer, v in channels.items()
        }
    elif channels is not None:
        raise ValidationError("feature_target.channels must be a per-layer mapping")
    return FeatureTargetSpec(
        layers=tuple(raw["layers"]),
        channels=channels,
        per_layer_weight=raw.get("weights"),
        squared=bool(raw.get("squared", False)),
    )


def _craft_cfg_from(raw: dict, seed: int) -> CraftConfig:
    return CraftConfig(
        steps=int(raw.get("steps", 100)),
        iterations_per_step=int(raw.get("iterations_per_step", 1000)),
        updates_per_image=int(raw.get("updates_per_image", 10)),
        minibatch=int(raw.get("minibatch", 1)),
        momentum=float(raw.get("momentum", 0.9)),
        learning_rate=float(raw.get("learning_rate", 0.01)),
        optimizer_kind=raw.get("optimizer_kind", "sgd_momentum"),
        adam_lr=float(raw.get("adam_lr", 0.5)),
        init=raw.get("init", "zeros"),
        seed=seed,
    )


def _noise_cfg_from(raw: dict, seed: int) -> NoiseCraftConfig:
    return NoiseCraftConfig(
        epsilon=float(raw.get("epsilon", 8 / 255)),
        step_size=raw.get("step_size"),
        steps=int(raw.get("steps", 100)),
        momentum_decay=float(raw.get("momentum_decay", 1.0)),
        seed=seed,
    )


@dataclass
class ExperimentConfig:
    raw: dict
    path: Path | None = None

    def __post_init__(self):
        if "model" not in self.raw or "attack" not in self.raw:
            raise ValidationError("experiment config needs 'model' and 'attack' sections")
        if self.attack_kind not in ATTACK_KINDS:
            raise ValidationError(
                f"unknown attack kind {self.attack_kind!r}; expected one of {ATTACK_KINDS}"
            )
        if self.attack_kind in ("carpet_patch", "forced") and "feature_target" not in self.raw:
            raise ValidationError(f"attack kind {self.attack_kind!r} needs a feature_target")
        if self.attack_kind == "tmifgsm_noise" and "feature_target" not in self.raw:
            raise ValidationError("tmifgsm_noise needs a feature_target")
        if self.is_patch_attack and "placement" not in self.raw:
            raise ValidationError(f"attack kind {self.attack_kind!r} needs a placement")
        if "train_manifest" not in self.raw:
            raise ValidationError("experiment config needs a train_manifest")

    @property
    def digest(self) -> str:
        return config_digest(self.raw)

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def attack_kind(self) -> str:
        return self.raw["attack"]["kind"]

    @property
    def is_patch_attack(self) -> bool:
        if self.attack_kind in ("carpet_patch", "task_patch"):
            return True
        if self.attack_kind == "forced":
            return "placement" in self.raw
        return False

    @property
    def placement(self) -> Placement:
        return _placement_from(self.raw["placement"])

    @property
    def feature_target(self) -> FeatureTargetSpec:
        return _spec_from(self.raw["feature_target"])

    @property
    def craft_cfg(self) -> CraftConfig:
        return _craft_cfg_from(self.raw.get("craft", {}), self.seed)

    @property
    def noise_cfg(self) -> NoiseCraftConfig:
        return _noise_cfg_from(self.raw.get("noise_craft", {}), self.seed)

    @property
    def eval_cfg(self) -> EvalConfig:
        raw = self.raw.get("eval", {})
        return EvalConfig(
            conf_threshold=float(raw.get("conf_threshold", 0.0005)),
            nms_iou=float(raw.get("nms_iou", 0.45)),
            match_iou=float(raw.get("match_iou", 0.5)),
            ap_method=raw.get("ap_method", "area"),
        )

    def build_model(self):
        spec = self.raw["model"]
        kwargs = {k: v for k, v in spec.items() if k not in ("backbone", "task", "checkpoint")}
        return build_model(
            spec["backbone"],
            task=spec.get("task", "classification"),
            checkpoint=spec.get("checkpoint"),
            **kwargs,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig(raw, self.path)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return ExperimentConfig(raw, path)


class DirectoryLock:
    """One experiment process at a time per output directory."""

    def __init__(self, directory: str | Path):
        self.path = Path(directory) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CraftRuntimeError(
                f"output directory is locked by {self.path}; remove the file if the "
                "previous run is dead"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class Ledger:
    """Append-only JSON-lines record of completed runs."""

    def __init__(self, directory: str | Path):
        self.path = Path(directory) / LEDGER_NAME

    def rows(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def find(self, digest: str, kind: str) -> dict | None:
        for row in self.rows():
            if row.get("digest") == digest and row.get("kind") == kind:
                return row
        return None

    def append(self, digest: str, kind: str, artifact_paths: list[str], metrics=None) -> dict:
        row = {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "digest": digest,
            "kind": kind,
            "artifact_paths": artifact_paths,
        }
        if metrics is not None:
            row["metrics"] = metrics
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        return row


def _train_images(config: ExperimentConfig):
    manifest = load_manifest(config.raw["train_manifest"])
    if "eval_manifest" in config.raw:
        eval_manifest = load_manifest(config.raw["eval_manifest"])
        check_disjoint(manifest, eval_manifest)
    limit = config.raw.get("craft", {}).get("n_images")
    source = ManifestImageSource(manifest)
    if limit is not None:
        source = [source[i] for i in range(min(int(limit), len(source)))]
    return manifest, source


def run_craft(
    config: ExperimentConfig, out_dir: str | Path, *, force: bool = False
) -> dict:
    """Craft the configured attack; writes the perturbation binary, PNG
    preview, and loss trace, then appends a ledger row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config.digest
    ledger = Ledger(out_dir)
    existing = ledger.find(digest, "craft")
    if existing is not None and not force:
        return {"skipped": True, **existing}
    with DirectoryLock(out_dir):
        model = config.build_model()
        manifest, images = _train_images(config)
        kind = config.attack_kind
        short = digest[:12]
        meta = {"created_by": digest, "attack_kind": kind, "seed": config.seed}
        if kind == "carpet_patch":
            artifact, trace = craft_carpet_patch(
                model, images, config.placement, config.feature_target, config.craft_cfg,
                created_by=digest,
            )
        elif kind == "task_patch":
            artifact, trace = craft_task_patch(
                model, images, list(manifest.labels[: len(images)]), config.placement,
                config.craft_cfg, created_by=digest,
            )
        elif kind == "tmifgsm_noise":
            combined = None
            labels = None
            if "combined" in config.raw["attack"]:
                raw_combined = config.raw["attack"]["combined"]
                combined = CombinedLossConfig(
                    eta=float(raw_combined.get("eta", 1.0)),
                    task_loss_kind=raw_combined.get("task_loss_kind", "none"),
                )
                if combined.task_loss_kind != "none":
                    labels = list(manifest.labels[: len(images)])
            artifact, trace = craft_feature_noise_tmifgsm(
                model, images, config.feature_target, config.noise_cfg,
                labels=labels, combined=combined, created_by=digest,
            )
        else:  # forced
            if config.is_patch_attack:
                target = config.placement
                cfg = config.craft_cfg
            else:
                cfg = config.noise_cfg
                target = NoiseBudget(cfg.epsilon)
            artifact, trace = craft_forced(
                model, images, target, config.feature_target, cfg, created_by=digest
            )
        if isinstance(artifact, Patch):
            artifact_path = save_patch(artifact, out_dir / f"patch_{short}.cbp", metadata=meta)
        else:
            artifact_path = save_noise(artifact, out_dir / f"noise_{short}.cbn", metadata=meta)
        trace_path = trace.save(out_dir / f"trace_{short}.json")
    paths = [str(artifact_path), str(artifact_path.with_suffix(".png")), str(trace_path)]
    row = ledger.append(digest, "craft", paths)
    return {"skipped": False, "artifact": str(artifact_path), "trace": str(trace_path), **row}


def _load_verified_attack(config: ExperimentConfig, attack_path: str | Path, force: bool):
    artifact, meta = load_attack(attack_path)
    recorded = meta.get("created_by", "")
    if recorded != config.digest and not force:
        raise ValidationError(
            f"attack artifact {attack_path} was produced by config {recorded[:12]}..., "
            f"not {config.digest[:12]}...; pass --force to evaluate anyway"
        )
    return artifact


def run_eval(
    config: ExperimentConfig,
    attack_path: str | Path,
    out_dir: str | Path,
    *,
    force: bool = False,
) -> Path:
    """Clean and attacked task metrics with the training placement."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifact = _load_verified_attack(config, attack_path, force)
    model = config.build_model()
    manifest = load_manifest(config.raw.get("eval_manifest", config.raw["train_manifest"]))
    source = ManifestImageSource(manifest)
    limit = config.raw.get("eval", {}).get("n_images")
    n = min(int(limit), len(source)) if limit is not None else len(source)
    images = [source[i] for i in range(n)]
    placement = config.placement if config.is_patch_attack else None
    attack_digest = file_digest(attack_path)

    if manifest.task == "classification":
        report = eval_classification(
            model, images, manifest.labels[:n], artifact, placement,
            attack_digest=attack_digest, config_digest=config.digest,
        )
    elif manifest.task == "detection":
        if not isinstance(artifact, Patch):
            raise ValidationError("contextual detection evaluation expects a patch artifact")
        report = eval_detection_contextual(
            model, images, manifest.boxes[:n], artifact, config.placement, config.eval_cfg,
            attack_digest=attack_digest, config_digest=config.digest,
        )
    else:
        if not isinstance(artifact, Patch):
            raise ValidationError("segmentation evaluation expects a patch artifact")
        masks = [source.seg_map(i) for i in range(n)]
        report = eval_segmentation(
            model, images, masks, artifact, config.placement,
            attack_digest=attack_digest, config_digest=config.digest,
        )
    path = out_dir / f"report_{config.digest[:12]}.json"
    report.save(path)
    Ledger(out_dir).append(
        config.digest, "eval", [str(path)],
        metrics={"clean": report.clean, "attacked": report.attacked},
    )
    return path


def run_forensics(
    config: ExperimentConfig,
    attack_path: str | Path,
    out_dir: str | Path,
    *,
    forced_path: str | Path | None = None,
    force: bool = False,
) -> Path:
    """Figure-data bundle: selection-frequency bins, sorted distance
    profile with highlights, impact map, optional forced-vs-unforced
    relative profile, and optional checkpoint-drift trace."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifact = _load_verified_attack(config, attack_path, force)
    model = config.build_model()
    manifest = load_manifest(config.raw.get("eval_manifest", config.raw["train_manifest"]))
    source = ManifestImageSource(manifest)
    fx = config.raw.get("forensics", {})
    n = min(int(fx.get("n_images", 64)), len(source))
    images = [source[i] for i in range(n)]
    spec = config.feature_target
    layer = fx.get("layer", spec.layers[-1])
    k = int(fx.get("k", 50))
    threshold = float(fx.get("threshold", 0.5))

    if isinstance(artifact, Patch):
        applier = forensics_mod.patch_applier(artifact, config.placement)
    else:
        applier = forensics_mod.noise_applier(artifact)

    bundle = out_dir / f"forensics_{config.digest[:12]}"
    bundle.mkdir(parents=True, exist_ok=True)
    bins = forensics_mod.frequency_bins(model, layer, images, applier, k=k, threshold=threshold)
    profile = forensics_mod.channel_distance_profile(model, layer, images, applier)
    highlight = fx.get("highlight")
    if highlight is None:
        highlight = [int(c) for c in np.flatnonzero(bins.p >= threshold)]
    impact = forensics_mod.spatial_impact_map(model, layer, images, applier)

    files = {
        "frequency_bins": str(forensics_mod.write_bins_csv(bundle / "frequency_bins.csv", bins)),
        "profile": str(
            forensics_mod.write_profile_csv(bundle / "profile_sorted.csv", profile, highlight)
        ),
        "impact_map": str(forensics_mod.write_map_json(bundle / "impact_map.json", impact)),
    }
    summary: dict[str, Any] = {
        "digest": config.digest,
        "attack_digest": file_digest(attack_path),
        "layer": layer,
        "k": k,
        "threshold": threshold,
        "n_images": n,
        "bins": {
            "frequent": bins.frequent,
            "occasional": bins.occasional,
            "never": bins.never,
        },
        "highlight": [int(c) for c in highlight],
    }

    if forced_path is not None:
        forced_artifact, _ = load_attack(forced_path)
        if isinstance(forced_artifact, Patch):
            forced_applier = forensics_mod.patch_applier(forced_artifact, config.placement)
        else:
            forced_applier = forensics_mod.noise_applier(forced_artifact)
        forced_profile = forensics_mod.channel_distance_profile(model, layer, images, forced_applier)
        ratios = forensics_mod.relative_profile(forced_profile, profile)
        files["relative_profile"] = str(
            forensics_mod.write_relative_csv(bundle / "relative_profile.csv", ratios, highlight)
        )
        summary["forced_attack_digest"] = file_digest(forced_path)

    checkpoints = fx.get("checkpoints")
    if checkpoints:
        if not isinstance(artifact, Patch):
            raise ValidationError("checkpoint drift is defined for patch artifacts")
        from .models import load_checkpoint_sequence

        handles = load_checkpoint_sequence(checkpoints)
        baseline = profile.top_channels(min(k, len(profile.values)))
        points = forensics_mod.checkpoint_drift(
            handles, layer, images, artifact, config.placement, baseline
        )
        files["drift"] = str(forensics_mod.write_drift_json(bundle / "drift.json", points))
        summary["drift_overlaps"] = [p.overlap for p in points]

    summary["files"] = {k: str(Path(v).name) for k, v in files.items()}
    (bundle / "bundle.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    Ledger(out_dir).append(config.digest, "forensics", [str(bundle)])
    return bundle


# ---------------------------------------------------------------------------
# Artifact verification.
# ---------------------------------------------------------------------------


def verify_artifact(path: str | Path, config: ExperimentConfig | None = None) -> tuple[bool, str]:
    """Structural check plus config-digest confirmation for one artifact:
    a perturbation binary, an evaluation report, or a forensics bundle."""
    path = Path(path)
    try:
        if path.is_dir():
            summary = json.loads((path / "bundle.json").read_text())
            recorded = summary.get("digest", "")
            for name in summary.get("files", {}).values():
                if not (path / name).exists():
                    return False, f"{path}: bundle file {name} is missing"
        elif path.suffix == ".json":
            report = EvalReport.from_json(path.read_text())
            recorded = report.config_digest
        else:
            artifact, meta = load_attack(path)
            recorded = meta.get("created_by", "")
    except (ValidationError, OSError, json.JSONDecodeError, KeyError) as exc:
        return False, f"{path}: unreadable artifact ({exc})"
    if config is None:
        return True, f"{path}: structurally valid (produced by {recorded[:12] or 'unknown'})"
    if recorded != config.digest:
        return False, (
            f"{path}: digest mismatch (artifact {recorded[:12] or 'unknown'}..., "
            f"config {config.digest[:12]}...)"
        )
    return True, f"{path}: digest confirmed ({config.digest[:12]}...)"
