"""
Scenario loading, validation and the bundled figure presets
"""
import json
import logging
import re
from pathlib import Path
from typing import List, Union

from pydantic import ValidationError as PydanticValidationError

from errors import ValidationError
from models import Scenario, ValidationReport

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"


def list_presets() -> List[str]:
    """Bundled preset names in figure order"""
    names = [p.stem for p in PRESET_DIR.glob("*.json")]
    return sorted(names, key=lambda n: (int(re.sub(r"\D", "", n) or 0), n))


def format_errors(exc: PydanticValidationError) -> List[str]:
    """One '<dotted.key>: <message>' line per pydantic error"""
    lines = []
    for err in exc.errors():
        key = ".".join(str(part) for part in err["loc"]) or "scenario"
        lines.append(f"{key}: {err['msg']}")
    return lines


def _resolve(ref: Union[str, Path]) -> Path:
    ref_str = str(ref)
    if ref_str in list_presets():
        return PRESET_DIR / f"{ref_str}.json"
    path = Path(ref_str)
    if not path.is_file():
        raise ValidationError(f"no preset or file named '{ref_str}' (presets: {', '.join(list_presets())})")
    return path


def _read(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """
    Load a preset by name or a scenario file by path

    Raises:
        ValidationError: unreadable file or schema violation, one line per key
    """
    path = _resolve(ref)
    try:
        scenario = Scenario.model_validate(_read(path))
    except PydanticValidationError as exc:
        raise ValidationError("\n".join(format_errors(exc))) from exc
    logger.debug(f"Loaded scenario {scenario.name} ({scenario.stage}) from {path}")
    return scenario


def validate(ref: Union[str, Path]) -> ValidationReport:
    """Schema validation without running anything"""
    try:
        path = _resolve(ref)
        data = _read(path)
    except ValidationError as exc:
        return ValidationReport(source=str(ref), ok=False, errors=[exc.message])
    try:
        scenario = Scenario.model_validate(data)
    except PydanticValidationError as exc:
        return ValidationReport(source=str(path), ok=False, errors=format_errors(exc))
    return ValidationReport(source=str(path), ok=True, name=scenario.name, stage=scenario.stage)
