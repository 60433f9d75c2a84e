from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from ..config import Config
from ..core import AtomicSystem, DomainClass
from ..errors import AtomFlowError, EmptyInput
from ..logger import get_logger
from .checks import molecule_sanity, novel_flags, structural_validity, unique_flags

logger = get_logger(__name__)


class SampleFlags(BaseModel):
    """Pass/fail flags of one evaluated system; checks that do not apply stay None"""
    model_config = ConfigDict(extra="forbid")

    id: str
    domain: str
    structurally_valid: Optional[bool] = None
    connected: Optional[bool] = None
    bond_lengths_ok: Optional[bool] = None
    no_clash: Optional[bool] = None
    all_checks: Optional[bool] = None
    unique: bool = True
    novel: Optional[bool] = None
    error: Optional[str] = None


class MaterialSummary(BaseModel):
    count: int = 0
    valid_count: int = 0
    structural_validity_rate: Optional[float] = None


class MoleculeSummary(BaseModel):
    count: int = 0
    connected_count: int = 0
    bond_lengths_count: int = 0
    no_clash_count: int = 0
    all_checks_count: int = 0
    connected_rate: Optional[float] = None
    bond_lengths_rate: Optional[float] = None
    no_clash_rate: Optional[float] = None
    all_checks_rate: Optional[float] = None


class EvalReport(BaseModel):
    version: str = Config.REPORT_FORMAT_VERSION
    num_samples: int
    materials: MaterialSummary
    molecules: MoleculeSummary
    unique_count: int
    uniqueness_rate: float
    novel_count: Optional[int] = None
    novelty_rate: Optional[float] = None
    per_sample: List[SampleFlags]
    metadata: Dict[str, Any] = Field(default_factory=dict)


def _rate(count: int, total: int) -> Optional[float]:
    return count / total if total else None


def _flags_for(system: AtomicSystem) -> SampleFlags:
    flags = SampleFlags(id=system.id, domain=system.domain.value)
    try:
        if system.domain is DomainClass.MATERIAL:
            flags.structurally_valid = structural_validity(system)
        else:
            checks = molecule_sanity(system)
            flags.connected = checks.connected
            flags.bond_lengths_ok = checks.bond_lengths_ok
            flags.no_clash = checks.no_clash
            flags.all_checks = checks.all_pass
    except AtomFlowError as e:
        logger.warning(f"⚠️ 样本 {system.id} 评估失败: {e}")
        flags.error = str(e)
        if system.domain is DomainClass.MATERIAL:
            flags.structurally_valid = False
        else:
            flags.connected = flags.bond_lengths_ok = flags.no_clash = flags.all_checks = False
    return flags


def evaluate(samples: Sequence[AtomicSystem], reference: Optional[Sequence[AtomicSystem]] = None,
             metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Per-domain validity and sanity rates plus uniqueness (and novelty against ``reference``).

    Every rate is a count of per-sample flags divided by the matching sample
    count, so the report can be recounted from ``per_sample`` exactly.
    """
    if not samples:
        raise EmptyInput("evaluate needs at least one sample")

    per_sample = [_flags_for(system) for system in samples]
    for flags, unique in zip(per_sample, unique_flags(samples)):
        flags.unique = unique
    if reference is not None:
        for flags, novel in zip(per_sample, novel_flags(samples, reference)):
            flags.novel = novel

    materials = [f for f in per_sample if f.domain == DomainClass.MATERIAL.value]
    molecules = [f for f in per_sample if f.domain == DomainClass.MOLECULE.value]

    valid = sum(bool(f.structurally_valid) for f in materials)
    material_summary = MaterialSummary(count=len(materials), valid_count=valid,
                                       structural_validity_rate=_rate(valid, len(materials)))

    counts = {key: sum(bool(getattr(f, key)) for f in molecules)
              for key in ("connected", "bond_lengths_ok", "no_clash", "all_checks")}
    molecule_summary = MoleculeSummary(
        count=len(molecules),
        connected_count=counts["connected"],
        bond_lengths_count=counts["bond_lengths_ok"],
        no_clash_count=counts["no_clash"],
        all_checks_count=counts["all_checks"],
        connected_rate=_rate(counts["connected"], len(molecules)),
        bond_lengths_rate=_rate(counts["bond_lengths_ok"], len(molecules)),
        no_clash_rate=_rate(counts["no_clash"], len(molecules)),
        all_checks_rate=_rate(counts["all_checks"], len(molecules)),
    )

    unique_count = sum(f.unique for f in per_sample)
    novel_count = None if reference is None else sum(bool(f.novel) for f in per_sample)
    report = EvalReport(
        num_samples=len(per_sample),
        materials=material_summary,
        molecules=molecule_summary,
        unique_count=unique_count,
        uniqueness_rate=unique_count / len(per_sample),
        novel_count=novel_count,
        novelty_rate=None if novel_count is None else novel_count / len(per_sample),
        per_sample=per_sample,
        metadata=metadata or {},
    )
    logger.info(f"📊 评估完成: {report.num_samples} 个样本, 唯一性 {report.uniqueness_rate:.3f}")
    return report
