"""Run directories: resolved config copy, CSV tables, tensors and a checksummed manifest."""
import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from ..core.config import settings
from ..schemas.experiment import ExperimentConfig
from ..schemas.reports import ManifestEntry
from .checkpoint import Checkpoint, encode_checkpoint
from .tensor_io import encode_tensor

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG_COPY = "config.json"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class RunDirectory:
    """Collects every artifact a command writes; ``finalize`` records them in the manifest."""

    def __init__(self, root: Union[str, Path], command: str, config: ExperimentConfig):
        self.path = Path(root)
        self.path.mkdir(parents=True, exist_ok=True)
        self.provenance: Dict[str, object] = {
            "command": command,
            "seed": config.data.seed,
            "version": settings.VERSION,
        }
        self._entries: Dict[str, ManifestEntry] = {}
        self._write(CONFIG_COPY, config.model_dump_json(indent=2).encode("utf-8"), "config")

    def _write(self, name: str, payload: bytes, kind: str) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload)
        self._entries[name] = ManifestEntry(path=name, sha256=sha256_hex(payload), size=len(payload), kind=kind)
        logger.info(f"wrote {kind} artifact {target}")
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        """CSV preceded by ``# key=value`` provenance lines (seed included)."""
        lines = [f"# {key}={value}" for key, value in self.provenance.items()]
        body = _csv_text(header, rows)
        return self._write(name, ("\n".join(lines) + "\n" + body).encode("utf-8"), "csv")

    def write_tensor(self, name: str, data) -> Path:
        return self._write(name, encode_tensor(data), "dcat")

    def write_checkpoint(self, name: str, checkpoint: Checkpoint) -> Path:
        return self._write(name, encode_checkpoint(checkpoint), "dcac")

    def finalize(self) -> Path:
        entries = [self._entries[k].model_dump() for k in sorted(self._entries)]
        target = self.path / MANIFEST
        target.write_text(json.dumps({"artifacts": entries}, indent=2), encoding="utf-8")
        logger.info(f"run directory {self.path} complete ({len(entries)} artifacts)")
        return target


def read_csv(path: Union[str, Path]) -> Tuple[Dict[str, str], List[str], List[List[str]]]:
    """Inverse of :meth:`RunDirectory.write_csv`: (provenance, header, rows)."""
    provenance: Dict[str, str] = {}
    data_lines = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            provenance[key] = value
        elif line:
            data_lines.append(line)
    rows = list(csv.reader(data_lines))
    return provenance, rows[0], rows[1:]


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([_cell(v) for v in row] for row in rows)
    return buf.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)
