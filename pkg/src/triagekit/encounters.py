"""Triage encounter data model, JSON Lines parsing, and record-conditioning filters.

The encounter file format is UTF-8 JSON Lines, one encounter per line, with
snake_case field names matching :class:`TriageEncounter`. Absent keys mean
missing values. ``docs/encounter_schema.md`` is the normative description.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional

VITAL_FIELDS = ("heart_rate", "respiratory_rate", "systolic_bp",
                "diastolic_bp", "temperature", "spo2")

SEX_VALUES = ("male", "female", "unknown")
DISPOSITION_VALUES = ("discharge", "admit", "other")

#: Physiologic plausibility bounds. Values outside a bound are treated as
#: missing and tallied as outliers. Deliberately loose; override per site.
DEFAULT_PLAUSIBILITY = {
    "heart_rate": (20.0, 300.0),
    "respiratory_rate": (2.0, 80.0),
    "systolic_bp": (40.0, 300.0),
    "diastolic_bp": (10.0, 200.0),
    "temperature": (30.0, 45.0),
    "spo2": (50.0, 100.0),
}


@dataclass(frozen=True)
class VitalSigns:
    heart_rate: Optional[float] = None
    respiratory_rate: Optional[float] = None
    systolic_bp: Optional[float] = None
    diastolic_bp: Optional[float] = None
    temperature: Optional[float] = None
    spo2: Optional[float] = None

    def missing_count(self) -> int:
        return sum(1 for f in VITAL_FIELDS if getattr(self, f) is None)


@dataclass(frozen=True)
class TriageEncounter:
    """One patient presentation as documented at triage."""

    id: str
    age_years: float
    sex: str = "unknown"
    arrival_mode: str = ""
    arrived_from: str = ""
    vitals: VitalSigns = field(default_factory=VitalSigns)
    pain_score: Optional[int] = None
    acceptable_pain_level: Optional[int] = None
    gcs: Optional[int] = None
    reason_for_visit: str = ""
    medical_history: str = ""
    surgical_history: str = ""
    social_history: str = ""
    medications: str = ""
    risk_factors: tuple[str, ...] = ()
    nurse_esi: Optional[int] = None
    verified_esi: Optional[int] = None
    gold_esi: Optional[int] = None
    disposition: Optional[str] = None
    site: str = ""
    # Parse bookkeeping: how many raw vital values fell outside the
    # plausibility bounds and were nulled. Not part of the wire schema.
    n_vital_outliers: int = 0

    def training_label(self) -> Optional[int]:
        """The label used for model training: verified when present, else nurse."""
        return self.verified_esi if self.verified_esi is not None else self.nurse_esi


@dataclass(frozen=True)
class ParseError:
    line_no: int
    message: str


@dataclass
class ParseOutcome:
    encounters: list[TriageEncounter]
    errors: list[ParseError]
    n_vital_outliers: int = 0


@dataclass(frozen=True)
class Removal:
    encounter: TriageEncounter
    reason: str


# Removal reasons, checked in this fixed order so reporting is deterministic.
REASON_AGE = "age under 1"
REASON_ESI = "missing ESI"
REASON_RFV = "missing reason for visit"
REASON_VITALS = "missing vitals"


class SchemaError(ValueError):
    pass


def _opt_number(obj: dict, key: str, lo: float, hi: float) -> Optional[float]:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise SchemaError(f"{key} must be a finite number, got {value!r}")
    if not (lo <= value <= hi):
        raise SchemaError(f"{key}={value} outside allowed range [{lo}, {hi}]")
    return float(value)


def _opt_int(obj: dict, key: str, lo: int, hi: int) -> Optional[int]:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError(f"{key} must be an integer, got {value!r}")
    if not (lo <= value <= hi):
        raise SchemaError(f"{key}={value} outside allowed range [{lo}, {hi}]")
    return value


def _text(obj: dict, key: str) -> str:
    value = obj.get(key, "")
    if value is None:
        return ""
    if not isinstance(value, str):
        raise SchemaError(f"{key} must be a string, got {value!r}")
    return value


def sanitize_vitals(raw: dict, plausibility: dict | None = None) -> tuple[VitalSigns, int]:
    """Build VitalSigns from a raw mapping, nulling implausible values.

    Returns the sanitized vitals and the count of values nulled as outliers.
    """
    bounds = plausibility or DEFAULT_PLAUSIBILITY
    values: dict[str, Optional[float]] = {}
    outliers = 0
    for name in VITAL_FIELDS:
        value = raw.get(name)
        if value is None:
            values[name] = None
            continue
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
            raise SchemaError(f"vitals.{name} must be a finite number, got {value!r}")
        lo, hi = bounds[name]
        if lo <= value <= hi:
            values[name] = float(value)
        else:
            values[name] = None
            outliers += 1
    return VitalSigns(**values), outliers


def encounter_from_dict(obj: dict, plausibility: dict | None = None) -> tuple[TriageEncounter, int]:
    """Validate one decoded record and return (encounter, n_vital_outliers)."""
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object")
    rec_id = obj.get("id")
    if not isinstance(rec_id, str) or not rec_id:
        raise SchemaError("id must be a non-empty string")
    age = obj.get("age_years")
    if not isinstance(age, (int, float)) or isinstance(age, bool) or not math.isfinite(age) or age < 0:
        raise SchemaError(f"age_years must be a non-negative number, got {age!r}")
    sex = obj.get("sex", "unknown")
    if sex not in SEX_VALUES:
        raise SchemaError(f"sex must be one of {SEX_VALUES}, got {sex!r}")
    disposition = obj.get("disposition")
    if disposition is not None and disposition not in DISPOSITION_VALUES:
        raise SchemaError(f"disposition must be one of {DISPOSITION_VALUES}, got {disposition!r}")
    risk_factors = obj.get("risk_factors", [])
    if not isinstance(risk_factors, list) or any(not isinstance(x, str) for x in risk_factors):
        raise SchemaError("risk_factors must be a list of strings")
    vitals_raw = obj.get("vitals", {})
    if not isinstance(vitals_raw, dict):
        raise SchemaError("vitals must be an object")
    vitals, outliers = sanitize_vitals(vitals_raw, plausibility)

    enc = TriageEncounter(
        id=rec_id,
        age_years=float(age),
        sex=sex,
        arrival_mode=_text(obj, "arrival_mode"),
        arrived_from=_text(obj, "arrived_from"),
        vitals=vitals,
        pain_score=_opt_int(obj, "pain_score", 0, 10),
        acceptable_pain_level=_opt_int(obj, "acceptable_pain_level", 0, 10),
        gcs=_opt_int(obj, "gcs", 3, 15),
        reason_for_visit=_text(obj, "reason_for_visit"),
        medical_history=_text(obj, "medical_history"),
        surgical_history=_text(obj, "surgical_history"),
        social_history=_text(obj, "social_history"),
        medications=_text(obj, "medications"),
        risk_factors=tuple(risk_factors),
        nurse_esi=_opt_int(obj, "nurse_esi", 1, 5),
        verified_esi=_opt_int(obj, "verified_esi", 1, 5),
        gold_esi=_opt_int(obj, "gold_esi", 1, 5),
        disposition=disposition,
        site=_text(obj, "site"),
        n_vital_outliers=outliers,
    )
    return enc, outliers


def encounter_to_dict(enc: TriageEncounter) -> dict:
    """Inverse of :func:`encounter_from_dict` (bookkeeping fields excluded)."""
    obj: dict = {
        "id": enc.id,
        "age_years": enc.age_years,
        "sex": enc.sex,
    }
    for key in ("arrival_mode", "arrived_from", "reason_for_visit", "medical_history",
                "surgical_history", "social_history", "medications", "site"):
        value = getattr(enc, key)
        if value:
            obj[key] = value
    vitals = {f: getattr(enc.vitals, f) for f in VITAL_FIELDS if getattr(enc.vitals, f) is not None}
    if vitals:
        obj["vitals"] = vitals
    for key in ("pain_score", "acceptable_pain_level", "gcs", "nurse_esi",
                "verified_esi", "gold_esi", "disposition"):
        value = getattr(enc, key)
        if value is not None:
            obj[key] = value
    if enc.risk_factors:
        obj["risk_factors"] = list(enc.risk_factors)
    return obj


def parse_encounters(stream: Iterable[str] | IO[str],
                     plausibility: dict | None = None) -> ParseOutcome:
    """Parse a JSON Lines encounter stream.

    Malformed lines are reported with their 1-based line number and never
    silently dropped. Blank lines are skipped.
    """
    encounters: list[TriageEncounter] = []
    errors: list[ParseError] = []
    total_outliers = 0
    for line_no, line in enumerate(stream, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            errors.append(ParseError(line_no, f"invalid JSON: {exc.msg}"))
            continue
        try:
            enc, outliers = encounter_from_dict(obj, plausibility)
        except SchemaError as exc:
            errors.append(ParseError(line_no, str(exc)))
            continue
        encounters.append(enc)
        total_outliers += outliers
    return ParseOutcome(encounters, errors, total_outliers)


def load_encounters(path: str, plausibility: dict | None = None) -> ParseOutcome:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_encounters(fh, plausibility)


def count_missing_vitals(vitals: VitalSigns) -> int:
    """Number of absent values among the six vital signs."""
    return vitals.missing_count()


def removal_reason(enc: TriageEncounter) -> Optional[str]:
    """First matching removal reason, in the fixed order age / ESI / reason / vitals."""
    if enc.age_years < 1.0:
        return REASON_AGE
    if enc.nurse_esi is None:
        return REASON_ESI
    if not enc.reason_for_visit.strip():
        return REASON_RFV
    if count_missing_vitals(enc.vitals) >= 4:
        return REASON_VITALS
    return None


def filter_usable(encounters: Iterable[TriageEncounter]) -> tuple[list[TriageEncounter], list[Removal]]:
    """Partition encounters into usable records and removals with reasons.

    A record is removed when the patient is under 1 year of age, the nurse ESI
    is missing, the reason for visit is empty, or four or more of the six
    vital signs are missing.
    """
    usable: list[TriageEncounter] = []
    removed: list[Removal] = []
    for enc in encounters:
        reason = removal_reason(enc)
        if reason is None:
            usable.append(enc)
        else:
            removed.append(Removal(enc, reason))
    return usable, removed


def with_verified(enc: TriageEncounter, verified_esi: int) -> TriageEncounter:
    return replace(enc, verified_esi=verified_esi)
