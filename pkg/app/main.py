import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from .checkpoint import decode_histogram, load_checkpoint
from .config import Config
from .core import DomainClass
from .errors import AtomFlowError, UnsupportedDomain, UsageError, exit_code_for
from .file_manager import DatasetFileManager
from .logger import get_logger, setup_logger
from .metrics.report import evaluate
from .models.registry import build_model
from .sampler.generate import generate
from .sampler.schedule import G_MODES, SampleRequest, SampleSchedule
from .schemas import FinetuneConfig, TftConfig, TrainConfig
from .training.finetune import Finetuner
from .training.pretrain import Trainer
from .utils import configure_runtime, reproducibility_stamp

logger = get_logger(__name__)

META_SUFFIX = ".meta.json"


class CliParser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors share the exit-code mapping"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="atomflow", description=f"{Config.APP_NAME} {Config.APP_VERSION}: "
                       "flow-matching generation of molecules and materials")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="override LOG_LEVEL for this run")
    commands = parser.add_subparsers(dest="command", parser_class=CliParser)
    commands.required = True

    train = commands.add_parser("train", help="flow pretraining")
    train.add_argument("--config", required=True, help="TrainConfig JSON document")
    train.add_argument("--out", required=True, help="checkpoint directory (best/ and last/ are written inside)")

    sample = commands.add_parser("sample", help="generate systems from a checkpoint")
    sample.add_argument("--ckpt", required=True)
    sample.add_argument("--n", type=int, default=1, help="number of samples")
    sample.add_argument("--domain", required=True, choices=[d.value for d in DomainClass])
    sample.add_argument("--steps", type=int, default=100, help="integration steps")
    sample.add_argument("--num-atoms", type=int, default=None, help="fixed N (default: draw from the histogram)")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--preset", choices=["default", "small_molecule"], default="default",
                        help="churn preset")
    sample.add_argument("--g-mode", choices=list(G_MODES), default="inverse")
    sample.add_argument("--no-ema", action="store_true", help="use raw instead of EMA weights")
    sample.add_argument("--out", required=True, help="output dataset (JSON lines)")
    sample.add_argument("--report", default=None, help="optional metrics report path")

    finetune = commands.add_parser("finetune", help="predictive finetuning on a frozen trunk")
    finetune.add_argument("--config", required=True, help="FinetuneConfig JSON document")
    finetune.add_argument("--ckpt", required=True, help="pretrained checkpoint directory")
    finetune.add_argument("--out", required=True)

    evaluate_cmd = commands.add_parser("eval", help="score a dataset of generated systems")
    evaluate_cmd.add_argument("--in", dest="input", required=True)
    evaluate_cmd.add_argument("--reference", default=None, help="reference dataset for novelty")
    evaluate_cmd.add_argument("--report", default=None, help="report path (default: print to stdout)")

    inspect = commands.add_parser("inspect", help="config, parameter counts and tensor table")
    source = inspect.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt")
    source.add_argument("--config")
    return parser


def _emit(payload: Any):
    print(json.dumps(payload, indent=2, ensure_ascii=False))


def run_train(args) -> Dict[str, Any]:
    config = TrainConfig.model_validate(DatasetFileManager.read_json(args.config))
    return Trainer(config, args.out).run(progress=args.progress)


def run_sample(args) -> Dict[str, Any]:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    loaded = load_checkpoint(args.ckpt, use_ema=not args.no_ema)
    model = loaded.model
    domain = DomainClass(args.domain)
    if model.config.variant == "tfp" and domain is DomainClass.MATERIAL:
        raise UnsupportedDomain("Variant 'tfp' only generates molecules (--domain material)")

    histogram = decode_histogram(loaded.metadata, domain.value)
    if args.num_atoms is None and not histogram:
        raise UsageError(f"--num-atoms is required: the checkpoint has no {domain.value} atom-count histogram")
    schedule_cls = SampleSchedule.small_molecule if args.preset == "small_molecule" else SampleSchedule
    schedule = schedule_cls(num_steps=args.steps, g_mode=args.g_mode, seed=args.seed)
    request = SampleRequest(domain=domain, num_samples=args.n, num_atoms=args.num_atoms, schedule=schedule,
                            atom_count_histogram=histogram or None)
    result = generate(model, request, progress=args.progress)

    settings = {
        "model": loaded.manifest["model"],
        "checkpoint_step": loaded.step,
        "ema": loaded.ema_applied,
        "domain": domain.value,
        "n": args.n,
        "steps": args.steps,
        "num_atoms": args.num_atoms,
        "preset": args.preset,
        "g_mode": args.g_mode,
    }
    meta = {
        "version": Config.REPORT_FORMAT_VERSION,
        "stamp": reproducibility_stamp(settings, args.seed),
        "settings": settings,
        "num_written": len(result.systems),
        "records": result.records,
    }
    DatasetFileManager.write_dataset(result.systems, args.out)
    DatasetFileManager.write_json(meta, args.out + META_SUFFIX)

    summary = {"written": len(result.systems), "failed": len(result.failures), "out": args.out}
    if args.report:
        if result.systems:
            report = evaluate(result.systems, metadata=meta)
            DatasetFileManager.write_json(report.model_dump(), args.report)
            summary["report"] = args.report
        else:
            logger.warning("⚠️ 所有样本均失败, 跳过评估报告")
    return summary


def run_finetune(args) -> Dict[str, Any]:
    config = FinetuneConfig.model_validate(DatasetFileManager.read_json(args.config))
    return Finetuner(config, args.ckpt, args.out).run(progress=args.progress)


def run_eval(args) -> Optional[Dict[str, Any]]:
    samples = DatasetFileManager.read_dataset(args.input)
    reference = DatasetFileManager.read_dataset(args.reference) if args.reference else None
    metadata: Dict[str, Any] = {}
    meta_path = args.input + META_SUFFIX
    if os.path.exists(meta_path):
        metadata = DatasetFileManager.read_json(meta_path)
        logger.info(f"📂 合并采样元数据: {meta_path}")
    metadata["eval_stamp"] = reproducibility_stamp(
        {"input": os.path.basename(args.input), "reference": args.reference is not None}, 0)

    report = evaluate(samples, reference, metadata).model_dump()
    if args.report:
        DatasetFileManager.write_json(report, args.report)
        return {"report": args.report, "num_samples": report["num_samples"],
                "uniqueness_rate": report["uniqueness_rate"]}
    return report


def run_inspect(args) -> Dict[str, Any]:
    payload: Dict[str, Any] = {}
    if args.ckpt:
        loaded = load_checkpoint(args.ckpt)
        model = loaded.model
        payload.update(step=loaded.step, ema=loaded.manifest.get("ema", False),
                       stamp=loaded.metadata.get("stamp"), run_config=loaded.manifest.get("run_config"))
    else:
        raw = DatasetFileManager.read_json(args.config)
        if isinstance(raw, dict) and "train_path" in raw:
            config = TrainConfig.model_validate(raw).model
        else:
            config = TftConfig.model_validate(raw)
        model = build_model(config)
    payload.update(
        config=model.config.model_dump(),
        parameters={"total": model.parameter_count(), "trainable": model.parameter_count(trainable_only=True)},
        tensors=model.parameter_table(),
    )
    return payload


COMMANDS = {
    "train": run_train,
    "sample": run_sample,
    "finetune": run_finetune,
    "eval": run_eval,
    "inspect": run_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Exit code 0 on success, 1 on validation errors, 2 on runtime failures"""
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            setup_logger(level=args.log_level)
        configure_runtime(num_threads=args.threads)
        _emit(COMMANDS[args.command](args))
        return 0
    except (AtomFlowError, ValidationError, FileNotFoundError) as e:
        code = exit_code_for(e)
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return code
    except Exception as e:
        logger.opt(exception=e).error(f"💥 运行失败: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
