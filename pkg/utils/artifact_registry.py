import json
from pathlib import Path

from loguru import logger

import config
from services.errors import ValidationError
from utils.io import write_json


def manifest_path(out_dir: Path) -> Path:
    return Path(out_dir) / config.MANIFEST_FILE


def load_manifest(out_dir: Path) -> dict:
    """Stage entries recorded in the output directory, empty when there are none"""
    path = manifest_path(out_dir)
    if not path.exists():
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Artifact manifest {path} is corrupt: {e}") from e


def save_manifest(out_dir: Path, manifest: dict) -> None:
    write_json(manifest_path(out_dir), manifest)


def record_stage(cfg: "config.PipelineConfig", stage: str, files: list[Path]) -> dict:
    """Stamp a finished stage with the config hash, seed and its artifact names"""
    manifest = load_manifest(cfg.out)
    entry = {
        "config_hash": config.config_hash(cfg),
        "seed": cfg.seed,
        "version": config.VERSION,
        "files": sorted(Path(f).name for f in files),
    }
    if manifest.get(stage) != entry:
        manifest[stage] = entry
        save_manifest(cfg.out, manifest)
    logger.info(f"{stage}: wrote {', '.join(entry['files']) or 'no files'}")
    return entry


def stage_status(cfg: "config.PipelineConfig", stage: str) -> str:
    """'missing', 'stale' (other config hash or missing files) or 'fresh'"""
    entry = load_manifest(cfg.out).get(stage)
    if entry is None:
        return "missing"
    if entry.get("config_hash") != config.config_hash(cfg):
        return "stale"
    if not all((cfg.out / name).exists() for name in entry.get("files", [])):
        return "stale"
    return "fresh"
