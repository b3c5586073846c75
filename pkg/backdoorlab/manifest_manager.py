"""
Results manifest persistence.

Each results directory holds one manifest.json describing the experiment
(config digest, seeds, per-arm status and outputs). Writes are atomic and
locked; previous versions are kept as rolling backups. A COMPLETE marker
is written last, only once every arm has finished.
"""

import logging
import shutil
from pathlib import Path
from typing import Any, Literal, Optional

import orjson
from filelock import FileLock
from pydantic import BaseModel, Field, ValidationError


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
COMPLETE_MARKER = "COMPLETE"

Status = Literal["running", "complete", "failed"]


class ManifestError(Exception):
    """Base exception for manifest errors."""
    pass


class ManifestCorruptedError(ManifestError):
    """Raised when manifest.json cannot be parsed."""
    pass


class ManifestIncompleteError(ManifestError):
    """Raised when a results directory has not finished."""
    pass


class ArmRecord(BaseModel):
    """
    Record of one experiment arm.

    Attributes:
        name: Arm name
        status: running, complete or failed
        seed: Arm seed
        defense: Defense kind
        outputs: Output kind -> path relative to the results directory
        details: Extra data needed to rebuild reports (schedule, steps per epoch)
        error: Failure text
        partial: Outputs exist but the arm did not finish
    """
    name: str
    status: Status = "running"
    seed: int
    defense: str
    outputs: dict[str, str] = Field(default_factory=dict)
    details: dict[str, Any] = Field(default_factory=dict)
    error: Optional[str] = None
    partial: bool = False


class ManifestData(BaseModel):
    """Complete manifest structure."""
    version: str = "1.0"
    config_digest: str
    config_path: str
    config: dict[str, Any] = Field(default_factory=dict)
    scenario: str = "standalone"
    seeds: list[int] = Field(default_factory=list)
    status: Status = "running"
    arms: dict[str, ArmRecord] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    error: Optional[str] = None


class ManifestManager:
    """
    Manage manifest.json for one results directory.

    Attributes:
        results_dir: Experiment results directory
        manifest_path: Path to manifest.json
        lock_path: Lock file guarding manifest writes
        backup_dir: Rolling backups of earlier manifest versions
        marker_path: COMPLETE marker
        manifest: Current manifest, None before begin() or load()
    """

    MAX_BACKUPS = 5

    def __init__(self, results_dir: Path) -> None:
        self.results_dir = results_dir
        self.manifest_path = results_dir / MANIFEST_NAME
        self.lock_path = results_dir / f"{MANIFEST_NAME}.lock"
        self.backup_dir = results_dir / ".manifest_backups"
        self.marker_path = results_dir / COMPLETE_MARKER
        self.manifest: Optional[ManifestData] = None

        self.results_dir.mkdir(parents=True, exist_ok=True)
        self.backup_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def is_complete(results_dir: Path) -> bool:
        return (results_dir / COMPLETE_MARKER).exists()

    def load(self) -> ManifestData:
        """
        Read manifest.json.

        Raises:
            ManifestError: If the manifest does not exist
            ManifestCorruptedError: If it cannot be parsed
        """
        if not self.manifest_path.exists():
            raise ManifestError(f"No manifest found in {self.results_dir}")
        try:
            data = orjson.loads(self.manifest_path.read_bytes())
            self.manifest = ManifestData(**data)
        except orjson.JSONDecodeError as e:
            raise ManifestCorruptedError(
                f"Manifest corrupted (invalid JSON): {e}\n"
                f"File: {self.manifest_path}\n"
                f"Consider restoring from backup in {self.backup_dir}"
            ) from e
        except ValidationError as e:
            raise ManifestCorruptedError(
                f"Manifest has invalid structure: {e}\n"
                f"File: {self.manifest_path}\n"
                f"Consider restoring from backup in {self.backup_dir}"
            ) from e
        return self.manifest

    def load_complete(self) -> ManifestData:
        """
        Raises:
            ManifestIncompleteError: If the COMPLETE marker or a complete status is missing
        """
        if not self.is_complete(self.results_dir):
            raise ManifestIncompleteError(
                f"{self.results_dir} has no {COMPLETE_MARKER} marker; the run is unfinished or failed.\n"
                f"Rerun the experiment before emitting reports."
            )
        manifest = self.load()
        if manifest.status != "complete":
            raise ManifestIncompleteError(f"manifest in {self.results_dir} has status {manifest.status!r}")
        return manifest

    def begin(self, config_digest: str, config_path: Path, config: dict[str, Any],
              scenario: str, seeds: list[int]) -> None:
        """Start a run: drop any COMPLETE marker, then write a fresh running manifest."""
        with FileLock(str(self.lock_path)):
            if self.marker_path.exists():
                self.marker_path.unlink()
            self.manifest = ManifestData(
                config_digest=config_digest,
                config_path=str(config_path),
                config=config,
                scenario=scenario,
                seeds=seeds,
            )
            self._save()
        logger.info("Manifest started", extra={"results_dir": str(self.results_dir), "digest": config_digest})

    def record_arm(self, record: ArmRecord) -> None:
        with FileLock(str(self.lock_path)):
            self._require().arms[record.name] = record
            self._save()
        logger.info("Arm recorded", extra={"arm": record.name, "status": record.status})

    def record_output(self, kind: str, path: Path) -> None:
        with FileLock(str(self.lock_path)):
            self._require().outputs[kind] = str(path.relative_to(self.results_dir))
            self._save()

    def mark_complete(self) -> None:
        """Set status complete, then write the COMPLETE marker last."""
        with FileLock(str(self.lock_path)):
            manifest = self._require()
            unfinished = [a.name for a in manifest.arms.values() if a.status != "complete"]
            if unfinished:
                raise ManifestError(f"cannot complete with unfinished arms: {', '.join(unfinished)}")
            manifest.status = "complete"
            manifest.error = None
            self._save()
            self.marker_path.write_text(manifest.config_digest + "\n", encoding="utf-8")
        logger.info("Manifest complete", extra={"results_dir": str(self.results_dir)})

    def mark_failed(self, error: str) -> None:
        """Set status failed and flag every unfinished arm's outputs as partial."""
        with FileLock(str(self.lock_path)):
            manifest = self._require()
            manifest.status = "failed"
            manifest.error = error
            for arm in manifest.arms.values():
                if arm.status != "complete":
                    arm.status = "failed"
                    arm.partial = True
            self._save()
        logger.error("Manifest marked failed", extra={"results_dir": str(self.results_dir), "error": error})

    def _require(self) -> ManifestData:
        if self.manifest is None:
            raise ManifestError("manifest not started; call begin() or load() first")
        return self.manifest

    def _save(self) -> None:
        """
        Save the manifest atomically.

        Uses atomic write (write to temp, then rename) and backs up the
        previous version first.
        """
        if self.manifest_path.exists():
            self._create_backup()

        temp_path = self.results_dir / f"{MANIFEST_NAME}.tmp"
        try:
            temp_path.write_bytes(orjson.dumps(
                self._require().model_dump(mode="json"),
                option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS,
            ))
            temp_path.replace(self.manifest_path)
            logger.debug("Manifest saved")
        except Exception as e:
            if temp_path.exists():
                temp_path.unlink()
            raise ManifestError(f"Failed to save manifest: {e}") from e

    def _backups(self) -> list[Path]:
        return sorted(self.backup_dir.glob("manifest_*.json"))

    def _create_backup(self) -> None:
        """Copy the current manifest into the next numbered backup slot."""
        existing = self._backups()
        index = int(existing[-1].stem.split("_")[1]) + 1 if existing else 0
        backup_path = self.backup_dir / f"manifest_{index:06d}.json"
        try:
            shutil.copy2(self.manifest_path, backup_path)
            self._cleanup_old_backups()
        except OSError as e:
            logger.warning("Failed to create manifest backup", extra={"error": str(e)})

    def _cleanup_old_backups(self) -> None:
        """Remove old backups, keeping only the last MAX_BACKUPS."""
        for backup in self._backups()[:-self.MAX_BACKUPS]:
            try:
                backup.unlink()
            except OSError as e:
                logger.warning("Failed to remove backup", extra={"backup": str(backup), "error": str(e)})

    def restore_from_backup(self, backup_name: Optional[str] = None) -> ManifestData:
        """
        Restore manifest.json from a backup (latest by default).

        Raises:
            ManifestError: If the backup does not exist
        """
        if backup_name:
            backup_path = self.backup_dir / backup_name
        else:
            backups = self._backups()
            if not backups:
                raise ManifestError("No manifest backups found")
            backup_path = backups[-1]
        if not backup_path.exists():
            raise ManifestError(f"Backup not found: {backup_path}")
        shutil.copy2(backup_path, self.manifest_path)
        logger.info("Manifest restored from backup", extra={"backup": str(backup_path)})
        return self.load()
