import json
import os
import tempfile
from typing import Any, Dict, Iterable, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .config import Config
from .core import AtomicSystem, build_system
from .core.elements import atomic_number
from .errors import ParseError, SchemaVersionError, UnknownElement, ValidationFailure
from .logger import get_logger
from .utils import canonical_json

logger = get_logger(__name__)


class DatasetRecord(BaseModel):
    """One JSON-lines dataset entry"""
    model_config = ConfigDict(extra="forbid")

    version: str = Config.DATASET_FORMAT_VERSION
    id: str
    domain: Literal["molecule", "material"]
    atomic_numbers: List[int]
    cart_coords: Optional[List[List[float]]] = None
    frac_coords: Optional[List[List[float]]] = None
    lattice_lengths: Optional[List[float]] = None
    lattice_angles: Optional[List[float]] = None
    properties: Optional[List[Optional[float]]] = None
    energy: Optional[float] = None
    forces: Optional[List[List[float]]] = None

    def to_system(self) -> AtomicSystem:
        return build_system(
            id=self.id,
            domain=self.domain,
            atomic_numbers=self.atomic_numbers,
            cart_coords=self.cart_coords,
            frac_coords=self.frac_coords,
            lattice_lengths=self.lattice_lengths,
            lattice_angles=self.lattice_angles,
            properties=self.properties,
            energy=self.energy,
            forces=self.forces,
        )

    @classmethod
    def from_system(cls, system: AtomicSystem) -> "DatasetRecord":
        def _listed(arr):
            return None if arr is None else np.asarray(arr, dtype=np.float64).tolist()

        labels = system.labels
        properties = None
        if labels.properties is not None:
            properties = [None if np.isnan(p) else float(p) for p in labels.properties]
        return cls(
            id=system.id,
            domain=system.domain.value,
            atomic_numbers=[int(z) for z in system.atomic_numbers],
            cart_coords=_listed(system.cart_coords),
            frac_coords=_listed(system.frac_coords),
            lattice_lengths=_listed(system.lattice_lengths),
            lattice_angles=_listed(system.lattice_angles),
            properties=properties,
            energy=labels.energy,
            forces=_listed(labels.forces),
        )


def check_version(found: Any, supported: str):
    """Reject files whose major format version differs from ours"""
    try:
        major = Config.major_version(found)
    except (TypeError, ValueError):
        raise SchemaVersionError(str(found), supported) from None
    if major != Config.major_version(supported):
        raise SchemaVersionError(str(found), supported)


io_retry = retry(
    stop=stop_after_attempt(Config.IO_MAX_RETRIES),
    wait=wait_exponential(multiplier=Config.IO_RETRY_BACKOFF),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)


class DatasetFileManager:
    """Reads and writes datasets, structure files, reports and raw blobs"""

    @staticmethod
    def ensure_directory_exists(file_path: str):
        """Create the parent directory if it doesn't exist"""
        directory = os.path.dirname(os.path.abspath(file_path))
        if not os.path.exists(directory):
            os.makedirs(directory, exist_ok=True)
            logger.info(f"📌 创建目录: {directory}")

    @staticmethod
    @io_retry
    def write_bytes(file_path: str, content: bytes):
        """Write through a temp file and rename, retrying transient OS errors"""
        DatasetFileManager.ensure_directory_exists(file_path)
        directory = os.path.dirname(os.path.abspath(file_path))
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as file:
                file.write(content)
            os.replace(tmp_path, file_path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
        logger.debug(f"💾 写入文件: {file_path} ({len(content)} 字节)")

    @staticmethod
    def write_json(payload: Any, file_path: str):
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        DatasetFileManager.write_bytes(file_path, text.encode("utf-8"))

    @staticmethod
    def read_json(file_path: str) -> Any:
        try:
            with open(file_path, "r", encoding="utf-8") as file:
                return json.load(file)
        except json.JSONDecodeError as e:
            raise ParseError(f"Invalid JSON: {e.msg}", path=file_path, line=e.lineno) from None

    @staticmethod
    def read_dataset(file_path: str) -> List[AtomicSystem]:
        """Parse a JSON-lines dataset; every bad line is reported with its number"""
        systems = []
        with open(file_path, "r", encoding="utf-8") as file:
            for line_no, line in enumerate(file, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"Invalid JSON: {e.msg}", path=file_path, line=line_no) from None
                if not isinstance(raw, dict):
                    raise ParseError("Each line must be a JSON object", path=file_path, line=line_no)
                check_version(raw.get("version", Config.DATASET_FORMAT_VERSION), Config.DATASET_FORMAT_VERSION)
                try:
                    systems.append(DatasetRecord.model_validate(raw).to_system())
                except ValidationError as e:
                    raise ParseError(f"Invalid record: {e.errors()[0]['msg']}", path=file_path, line=line_no) from None
                except ValidationFailure as e:
                    raise ParseError(str(e), path=file_path, line=line_no) from None
        logger.info(f"📂 读取数据集: {file_path} ({len(systems)} 个体系)")
        return systems

    @staticmethod
    def dataset_text(systems: Iterable[AtomicSystem]) -> str:
        lines = [canonical_json(DatasetRecord.from_system(s).model_dump()) for s in systems]
        return "".join(line + "\n" for line in lines)

    @staticmethod
    def write_dataset(systems: Iterable[AtomicSystem], file_path: str):
        systems = list(systems)
        DatasetFileManager.write_bytes(file_path, DatasetFileManager.dataset_text(systems).encode("utf-8"))
        logger.info(f"💾 保存数据集: {file_path} ({len(systems)} 个体系)")

    @staticmethod
    def import_xyz(file_path: str) -> List[AtomicSystem]:
        """Read one or more concatenated XYZ frames as molecules"""
        with open(file_path, "r", encoding="utf-8") as file:
            lines = file.read().splitlines()

        systems = []
        stem = os.path.splitext(os.path.basename(file_path))[0]
        cursor = 0
        while cursor < len(lines):
            if not lines[cursor].strip():
                cursor += 1
                continue
            header_line = cursor + 1
            try:
                count = int(lines[cursor].split()[0])
            except ValueError:
                raise ParseError(f"Expected an atom count, got {lines[cursor]!r}", path=file_path,
                                 line=header_line) from None
            if count < 1:
                raise ParseError(f"Atom count must be positive, got {count}", path=file_path, line=header_line)
            rows = lines[cursor + 2: cursor + 2 + count]
            if len(rows) < count or any(not row.strip() for row in rows):
                raise ParseError(f"Frame declares {count} atoms but has fewer coordinate rows",
                                 path=file_path, line=header_line)

            numbers, coords = [], []
            for offset, row in enumerate(rows):
                row_line = cursor + 3 + offset
                fields = row.split()
                if len(fields) < 4:
                    raise ParseError(f"Expected 'element x y z', got {row!r}", path=file_path, line=row_line)
                try:
                    numbers.append(atomic_number(fields[0]))
                except UnknownElement as e:
                    raise UnknownElement(e.message, path=file_path, line=row_line) from None
                try:
                    coords.append([float(v) for v in fields[1:4]])
                except ValueError:
                    raise ParseError(f"Non-numeric coordinates in {row!r}", path=file_path, line=row_line) from None

            cursor += 2 + count
            # A row beyond the declared count that is not a new frame header is a count mismatch
            if cursor < len(lines) and lines[cursor].strip() and len(lines[cursor].split()) >= 4:
                raise ParseError(f"Frame declares {count} atoms but has more coordinate rows",
                                 path=file_path, line=cursor + 1)
            frame_id = f"{stem}-{len(systems)}"
            try:
                systems.append(build_system(frame_id, "molecule", numbers, cart_coords=coords))
            except ValidationFailure as e:
                raise ParseError(str(e), path=file_path, line=header_line) from None

        logger.info(f"📂 导入XYZ: {file_path} ({len(systems)} 帧)")
        return systems

    @staticmethod
    def atom_count_histogram(systems: Iterable[AtomicSystem]) -> Dict[str, Dict[int, int]]:
        """Per-domain histogram of atom counts, used to draw N at sampling time"""
        histogram: Dict[str, Dict[int, int]] = {}
        for system in systems:
            counts = histogram.setdefault(system.domain.value, {})
            counts[system.num_atoms] = counts.get(system.num_atoms, 0) + 1
        return histogram
