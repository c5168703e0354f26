"""Command-line interface.

Subcommands: craft, eval, forensics, verify, manifest-check.
Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CraftRuntimeError, ValidationError
from .experiment import load_config, run_craft, run_eval, run_forensics, verify_artifact
from .manifest import load_manifest

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carpetbomb",
        description=(
            "Craft universal task-agnostic adversarial patches that disrupt encoder "
            "feature maps, evaluate them across tasks, and analyze their feature-space "
            "footprint."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_seed=True, with_force=True):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        if with_seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if with_force:
            p.add_argument("--force", action="store_true", help="ignore ledger/digest guards")

    p_craft = sub.add_parser("craft", help="optimize the configured perturbation")
    common(p_craft)

    p_eval = sub.add_parser("eval", help="clean vs attacked task metrics")
    common(p_eval)
    p_eval.add_argument("--attack", required=True, help="perturbation artifact path")

    p_forensics = sub.add_parser("forensics", help="emit the figure-data bundle")
    common(p_forensics)
    p_forensics.add_argument("--attack", required=True, help="perturbation artifact path")
    p_forensics.add_argument(
        "--forced", default=None, help="channel-forced artifact for the relative profile"
    )
    p_forensics.add_argument(
        "--plots", action="store_true", help="also render static PNG plots (needs matplotlib)"
    )

    p_verify = sub.add_parser("verify", help="re-hash artifacts and confirm their digests")
    p_verify.add_argument("--config", default=None, help="config to confirm digests against")
    p_verify.add_argument("artifacts", nargs="+", help="artifact files or bundle directories")

    p_check = sub.add_parser("manifest-check", help="validate a dataset manifest")
    p_check.add_argument("manifest", help="manifest JSONL path")
    return parser


def _configured(args) -> "ExperimentConfig":
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _cmd_craft(args) -> int:
    config = _configured(args)
    result = run_craft(config, args.out, force=args.force)
    if result.get("skipped"):
        print(f"config {config.digest[:12]} already crafted; artifacts: "
              f"{', '.join(result['artifact_paths'])} (use --force to redo)")
    else:
        print(f"crafted {result['artifact']} (config {config.digest[:12]})")
        print(f"loss trace: {result['trace']}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _configured(args)
    path = run_eval(config, args.attack, args.out, force=args.force)
    report = json.loads(Path(path).read_text())
    print(f"report: {path}")
    print(f"clean: {report['clean']}  attacked: {report['attacked']}")
    return EXIT_OK


def _cmd_forensics(args) -> int:
    config = _configured(args)
    bundle = run_forensics(
        config, args.attack, args.out, forced_path=args.forced, force=args.force
    )
    print(f"figure-data bundle: {bundle}")
    if args.plots:
        _render_plots(bundle)
    return EXIT_OK


def _render_plots(bundle: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ValidationError("--plots needs matplotlib (pip install carpetbomb[plots])")
    import csv as csv_mod

    import numpy as np

    bundle = Path(bundle)
    profile_path = bundle / "profile_sorted.csv"
    if profile_path.exists():
        with profile_path.open() as fh:
            rows = list(csv_mod.DictReader(fh))
        values = [float(r["value"]) for r in rows]
        colors = ["tab:red" if r["highlight"] == "1" else "tab:blue" for r in rows]
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.bar(range(len(values)), values, color=colors, width=1.0)
        ax.set_xlabel("channel (sorted)")
        ax.set_ylabel("mean L2 distance")
        fig.tight_layout()
        fig.savefig(bundle / "profile_sorted.png", dpi=120)
        plt.close(fig)
    map_path = bundle / "impact_map.json"
    if map_path.exists():
        payload = json.loads(map_path.read_text())
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(np.asarray(payload["values"]), cmap="viridis")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title("impact map")
        fig.tight_layout()
        fig.savefig(bundle / "impact_map.png", dpi=120)
        plt.close(fig)
    print(f"plots rendered into {bundle}")


def _cmd_verify(args) -> int:
    config = load_config(args.config) if args.config else None
    all_ok = True
    for artifact in args.artifacts:
        ok, message = verify_artifact(artifact, config)
        print(("OK   " if ok else "FAIL ") + message)
        all_ok = all_ok and ok
    return EXIT_OK if all_ok else EXIT_VALIDATION


def _cmd_manifest_check(args) -> int:
    manifest = load_manifest(args.manifest)
    print(
        f"{args.manifest}: valid {manifest.task} manifest ({manifest.split} split, "
        f"{len(manifest)} entries"
        + (f", resize {manifest.resize[0]}x{manifest.resize[1]}" if manifest.resize else "")
        + ")"
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "craft": _cmd_craft,
        "eval": _cmd_eval,
        "forensics": _cmd_forensics,
        "verify": _cmd_verify,
        "manifest-check": _cmd_manifest_check,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CraftRuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
