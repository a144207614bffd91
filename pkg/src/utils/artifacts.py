"""
Deterministic artifact I/O.

Every file a stage writes goes through this module so that two runs with the
same configuration and seed produce byte-identical trees: canonical JSON,
LF-terminated CSV and zip archives with fixed member timestamps.
"""

import io
import json
import os
import zipfile
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from models.errors import ArtifactNotFoundError, FingerprintMismatchError
from utils.logger import setup_logger

logger = setup_logger(__name__)

FORMAT_VERSION = 1

# earliest timestamp a zip member can carry
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_HEADER_MEMBER = 'header.json'


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, set, frozenset)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def dumps_canonical(document: Any) -> str:
    """Sorted keys, 2-space indent, no NaN/Infinity, trailing newline."""
    return json.dumps(
        document, sort_keys=True, indent=2, ensure_ascii=False,
        allow_nan=False, default=_json_default,
    ) + '\n'


def write_json(path: str, document: Any) -> str:
    _ensure_parent(path)
    text = dumps_canonical(document)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(text)
    return path


def read_json(path: str, what: str = 'artifact') -> Any:
    if not os.path.exists(path):
        raise ArtifactNotFoundError(f"{what} not found: {path}", {'path': path})
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


def write_csv(path: str, frame: pd.DataFrame) -> str:
    _ensure_parent(path)
    frame.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')
    return path


def read_csv(path: str, what: str = 'artifact', **kwargs) -> pd.DataFrame:
    if not os.path.exists(path):
        raise ArtifactNotFoundError(f"{what} not found: {path}", {'path': path})
    return pd.read_csv(path, float_precision='round_trip', **kwargs)


def write_npz(path: str, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> str:
    """
    Write arrays plus a JSON header into a zip archive whose bytes depend
    only on the content.
    """
    _ensure_parent(path)
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_DEFLATED) as archive:
        _write_member(archive, _HEADER_MEMBER, dumps_canonical(header).encode('utf-8'))
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _write_member(archive, f"{name}.npy", buffer.getvalue())
    return path


def read_npz(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise ArtifactNotFoundError(f"model artifact not found: {path}", {'path': path})
    arrays: Dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as archive:
        header = json.loads(archive.read(_HEADER_MEMBER).decode('utf-8'))
        for name in archive.namelist():
            if name.endswith('.npy'):
                with archive.open(name) as member:
                    arrays[name[:-4]] = np.lib.format.read_array(
                        io.BytesIO(member.read()), allow_pickle=False
                    )
    return header, arrays


def check_fingerprint(found: Optional[str], expected: str, where: str, force: bool = False) -> None:
    """
    Refuse to combine artifacts produced under different configurations.

    Raises:
        FingerprintMismatchError: fingerprints differ and ``force`` is unset
    """
    if found == expected:
        return
    details = {'artifact': where, 'found': found, 'expected': expected}
    if force:
        logger.warning("Fingerprint mismatch ignored (--force)", extra=details)
        return
    raise FingerprintMismatchError(
        f"{where} was produced with fingerprint {found}, current run is {expected}", details
    )


class StageOutputs:
    """
    Track the files a stage writes; remove all of them if the stage fails.

    Usage::

        with StageOutputs() as outputs:
            write_json(outputs.add(path), doc)
    """

    def __init__(self):
        self.paths: List[str] = []

    def add(self, path: str) -> str:
        self.paths.append(path)
        return path

    def __enter__(self) -> 'StageOutputs':
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            self.cleanup()
        return False

    def cleanup(self) -> None:
        for path in reversed(self.paths):
            try:
                os.remove(path)
            except FileNotFoundError:
                continue
            logger.info("Removed partial output", extra={'path': path})
        self.paths.clear()


def _write_member(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
