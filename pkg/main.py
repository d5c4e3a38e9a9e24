import argparse
import json
import logging
import os
import sys
import time
import uuid
from typing import Optional

import psutil

from src.dao.checkpoint_repository import CheckpointRepository, CheckpointRepositoryException
from src.dao.experiment_config import ExperimentConfig, ExperimentConfigException
from src.dao.run_record_repository import RunRecordRepository, RunRecordRepositoryException
from src.dao.synthetic_data import SyntheticDataException, generate

from src.model.block import BlockException
from src.model.feedforward import FeedForwardException
from src.model.fp8 import Fp8Exception
from src.model.moe import MoeException
from src.model.tensor import TensorException
from src.model.tokenizer import TokenizerException
from src.parallel.token_parallel import ParallelException

from src.services.ablation_service import TABLES, AblationException, AblationService, resolve_presets
from src.services.gradcheck_service import GradCheckService
from src.services.metrics import MetricsException
from src.services.quantization_service import QuantizationService
from src.services.report_service import (
    ReportException, render_ablation, render_fidelity, render_gradcheck, render_reports,
    render_runs, render_simulation, render_sparsify
)
from src.services.simulation_service import SimulationService
from src.services.sparsify_service import SparsifyException, SparsifyService
from src.services.training_service import TrainingException, TrainingService

from opentelemetry.sdk.resources import Resource
from opentelemetry import metrics, _logs
from opentelemetry.sdk.metrics import MeterProvider
from opentelemetry.sdk.metrics.export import PeriodicExportingMetricReader
from opentelemetry.exporter.otlp.proto.http.metric_exporter import OTLPMetricExporter
from opentelemetry.sdk._logs import LoggerProvider, LoggingHandler
from opentelemetry.sdk._logs.export import BatchLogRecordProcessor
from opentelemetry.exporter.otlp.proto.http._log_exporter import OTLPLogExporter

DOMAIN_EXCEPTIONS = (
    TensorException, TokenizerException, FeedForwardException, BlockException, MoeException, Fp8Exception,
    ParallelException, ExperimentConfigException, SyntheticDataException, CheckpointRepositoryException,
    RunRecordRepositoryException, MetricsException, TrainingException, SparsifyException, AblationException,
    ReportException
)
FP8_MAX_AUC_DROP = 0.002
SPLIT_TOLERANCES = {"float64": 1e-10, "float32": 1e-4}

# logging level #
logging.basicConfig(level=logging.INFO)
process_started_at = time.time()

# OpenTelemetry Settings #
if os.getenv("TokenMixer") == "test":
    environ = "local"
else:
    environ = "desk"
OTEL_RESOURCE_ATTRIBUTES = {
    "service.instance.id": str(uuid.uuid1()),
    "environment": environ
}
# exporters are attached only when a collector is configured
EXPORT_TELEMETRY = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT") is not None

# OTEL Metrics #
metrics.set_meter_provider(
    MeterProvider(
        resource=Resource.create(OTEL_RESOURCE_ATTRIBUTES),
        metric_readers=[PeriodicExportingMetricReader(OTLPMetricExporter())] if EXPORT_TELEMETRY else []
    )
)
train_step_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="tokenmixer.train.step.duration",
    description="measures the duration of one optimizer step.",
    unit="ms"
)
checkpoint_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="tokenmixer.checkpoint.duration",
    description="measures the duration of saving or loading a checkpoint.",
    unit="ms"
)
all2all_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="tokenmixer.parallel.all2all.bytes",
    description="measures the payload of a simulated all-to-all exchange.",
    unit="By"
)
process_uptime_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="service.process.uptime",
    description="measures the uptime of the current python process.",
    unit="sec"
)
cpu_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="service.cpu",
    description="measures CPU usage of the current python process.",
    unit="percent"
)
memory_recorder = metrics.get_meter("opentelemetry.instrumentation.custom").create_histogram(
    name="service.memory",
    description="measures memory usage of the current python process.",
    unit="percent"
)

# Logs #
if EXPORT_TELEMETRY:
    _logs.set_logger_provider(LoggerProvider(resource=Resource.create(OTEL_RESOURCE_ATTRIBUTES)))
    logging.getLogger().addHandler(
        LoggingHandler(
            logger_provider=_logs.get_logger_provider().add_log_record_processor(BatchLogRecordProcessor(OTLPLogExporter()))
        )
    )


def report_process_usage(command: str) -> None:
    """Reports the uptime, CPU and memory usage of the process."""
    attributes = {"pid": os.getpid(), "command": command}
    process_uptime_recorder.record(amount=time.time() - process_started_at, attributes=attributes)
    cpu_recorder.record(amount=psutil.cpu_percent(), attributes=attributes)
    memory_recorder.record(amount=psutil.virtual_memory().percent, attributes=attributes)


def get_checkpoints(directory: str) -> CheckpointRepository:
    """ Returns a properly set up CheckpointRepository instance. """
    return CheckpointRepository(directory=directory, histogram=checkpoint_recorder)


def run_directory(config: ExperimentConfig, output: Optional[str]) -> str:
    return output if output is not None else os.path.join(config.output_dir, config.name)


def eval_dataset(config: ExperimentConfig, seed: Optional[int]):
    """The held-out split of the experiment, or a fresh one drawn with `seed`."""
    spec = config.synthetic_spec
    return generate(spec, spec.seed + 2 if seed is None else seed, spec.eval_examples)


def command_train(args) -> int:
    config = ExperimentConfig(args.config)
    directory = run_directory(config, args.output)
    service = TrainingService(
        config,
        run_records=RunRecordRepository(directory),
        histogram=train_step_recorder,
        comm_histogram=all2all_recorder
    )
    report, model = service.train()
    get_checkpoints(os.path.join(directory, "checkpoint")).save(model, config, report.steps)
    print(render_runs([report]))
    return 0


def command_gradcheck(args) -> int:
    report = GradCheckService(seed=args.seed, coordinates_per_tensor=args.coordinates).run()
    print(render_gradcheck(report.to_dict()))
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def command_ablate(args) -> int:
    config = ExperimentConfig(args.config)
    seeds = [int(seed) for seed in args.seeds.split(",") if seed.strip()]
    names = [name.strip() for name in args.presets.split(",") if name.strip()]
    directory = run_directory(config, args.output)
    service = AblationService(config, workers=args.workers, output_dir=os.path.join(directory, "ablation"))
    records = RunRecordRepository(directory)

    reports = [(name, service.run_table(name, seeds)) for name in names if name in TABLES]
    presets = [name for name in names if name not in TABLES]
    if presets or not reports:
        reports.append(("presets", service.run_ablation(resolve_presets(presets), seeds)))
    for name, report in reports:
        records.save_report(report.to_dict(), name=f"ablation-{name}.json")
        print(render_ablation(report))
        print()
    return 0


def command_sim_parallel(args) -> int:
    service = SimulationService(histogram=all2all_recorder, threads=args.threads)
    report = service.run(
        args.devices, args.layers, tokens=args.tokens, dim=args.dim, heads=args.heads,
        naive=args.naive, batch=args.batch, seed=args.seed
    )
    for event in report.events:
        print(json.dumps(event, sort_keys=True))
    print(render_simulation(report.to_dict()))
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def command_quantize_eval(args) -> int:
    checkpoint = get_checkpoints(os.path.dirname(args.checkpoint)).load(args.checkpoint)
    granularity = args.granularity or checkpoint.config.quant_config.granularity
    report = QuantizationService(granularity).evaluate(checkpoint.model, eval_dataset(checkpoint.config, args.eval_seed))
    RunRecordRepository(os.path.dirname(args.checkpoint)).save_report(report.to_dict(), name=f"fp8-{granularity}.json")
    print(render_fidelity(report.to_dict()))
    passed = report.auc_delta >= -FP8_MAX_AUC_DROP
    print("PASS" if passed else "FAIL")
    return 0 if passed else 1


def command_sparsify(args) -> int:
    checkpoint = get_checkpoints(os.path.dirname(args.checkpoint)).load(args.checkpoint)
    service = SparsifyService(experts=args.experts, active=args.active, shared=not args.no_shared, alpha=args.alpha)
    _, report = service.evaluate(checkpoint.model, eval_dataset(checkpoint.config, args.eval_seed))
    RunRecordRepository(os.path.dirname(args.checkpoint)).save_report(
        report.to_dict(), name=f"sparsify-{args.experts}-{args.active}.json"
    )
    print(render_sparsify(report.to_dict()))
    passed = report.equivalence_error < SPLIT_TOLERANCES[checkpoint.config.settings["experiment"]["precision"]]
    print("PASS" if passed else "FAIL")
    return 0 if passed else 1


def command_report(args) -> int:
    print(render_reports([RunRecordRepository.load_report(path) for path in args.reports]))
    return 0


def _alpha(value: str):
    return value if value == "auto" else float(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Desk-scale TokenMixer-Large experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model and write its checkpoint, metrics and report")
    train.add_argument("--config", default="configs/desk_default.toml", help="experiment file")
    train.add_argument("--output", default=None, help="run directory (default: <output_dir>/<name>)")
    train.set_defaults(handler=command_train)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference checks of primitives and toy models")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--coordinates", type=int, default=None, help="coordinates checked per parameter (default: all)")
    gradcheck.set_defaults(handler=command_gradcheck)

    ablate = commands.add_parser("ablate", help="train a base and its variants with common seeds")
    ablate.add_argument("--config", default="configs/desk_default.toml", help="experiment file")
    ablate.add_argument("--presets", default="", help=f"comma-separated presets or table groups {tuple(TABLES)}")
    ablate.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    ablate.add_argument("--workers", type=int, default=1, help="runs trained at the same time")
    ablate.add_argument("--output", default=None, help="run directory (default: <output_dir>/<name>)")
    ablate.set_defaults(handler=command_ablate)

    sim = commands.add_parser("sim-parallel", help="simulate Token Parallel on a toy model")
    sim.add_argument("--devices", type=int, required=True)
    sim.add_argument("--layers", type=int, required=True)
    sim.add_argument("--tokens", type=int, default=4)
    sim.add_argument("--dim", type=int, default=8)
    sim.add_argument("--heads", type=int, default=4)
    sim.add_argument("--batch", type=int, default=None, help="examples (default: 2 per device)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--naive", action="store_true", help="exchange around every stage")
    sim.add_argument("--threads", action="store_true", help="one thread per simulated device")
    sim.set_defaults(handler=command_sim_parallel)

    quantize = commands.add_parser("quantize-eval", help="simulated FP8 inference against full precision")
    quantize.add_argument("--checkpoint", required=True, help="a .npz checkpoint written by train")
    quantize.add_argument("--eval-seed", type=int, default=None)
    quantize.add_argument("--granularity", choices=("tensor", "channel"), default=None)
    quantize.set_defaults(handler=command_quantize_eval)

    sparsify = commands.add_parser("sparsify", help="split a trained dense model into S-P MoE stages")
    sparsify.add_argument("--checkpoint", required=True, help="a .npz checkpoint written by train")
    sparsify.add_argument("--experts", type=int, default=4)
    sparsify.add_argument("--active", type=int, default=2)
    sparsify.add_argument("--alpha", type=_alpha, default="auto")
    sparsify.add_argument("--no-shared", action="store_true", help="route every expert")
    sparsify.add_argument("--eval-seed", type=int, default=None)
    sparsify.set_defaults(handler=command_sparsify)

    report = commands.add_parser("report", help="render report files as tables")
    report.add_argument("reports", nargs="+")
    report.set_defaults(handler=command_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        status = args.handler(args)
    except DOMAIN_EXCEPTIONS as e:
        logging.error(f"{args.command} failed: {e}")
        status = 1
    report_process_usage(args.command)
    return status


if __name__ == "__main__":
    sys.exit(main())
