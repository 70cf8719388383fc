"""Experiment runner: synth | analyze | simulate | sweep | export-sdpa.

Every command writes into ``--out`` (default ``out/``) and dumps the resolved
configuration next to its results. Exit codes: 0 success, 1 usage or I/O
error, 2 solver failure or empty certificate, 3 failed verification.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable
from os import getenv
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from munch import Munch
from pydantic import BaseModel

from hjb import dynamics
from hjb.config import ExperimentConfig, apply_overrides, load_config
from hjb.control import ValueController
from hjb.dynamics import Benchmark, lqr_controller
from hjb.errors import SynthesisError, UsageError
from hjb.hybrid import HybridPusherSystem, PusherParams, synth_under_hybrid
from hjb.models import ValueApproxModel
from hjb.poly import SemialgebraicSet
from hjb.region import gap_slice, roa, rogcp_over, rogcp_under, slice_grid, sublevel_cloud
from hjb.sdpa import export_sdpa
from hjb.sim import run_many, simulate, simulate_hybrid, trajectory_frame
from hjb.synth import (
    ValueApprox,
    over_program,
    over_residual,
    precheck_controller,
    refine_over_with_under,
    synth_over,
    synth_under,
    under_program,
    under_residual,
)
from lib.utils import code_version, make_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVER = 2
EXIT_VERIFICATION = 3

RESIDUAL_SAMPLES = 10_000
PUSHER_START = (-0.28, 0.28, 0.0)

BENCHMARKS: dict[str, Callable[..., Benchmark]] = {
    "pendulum": dynamics.pendulum,
    "cartpole": dynamics.cartpole,
    "quadrotor": dynamics.quadrotor,
    "double_integrator": dynamics.double_integrator,
}


# -- benchmarks and bundles ------------------------------------------------------


def build_benchmark(config: ExperimentConfig) -> Benchmark:
    if config.benchmark not in BENCHMARKS:
        raise UsageError(f"benchmark {config.benchmark} is not a smooth system")
    kwargs: dict[str, Any] = dict(config.parameters)
    if config.cost.q_diag is not None:
        kwargs["q_diag"] = config.cost.q_diag
    if config.cost.r_diag is not None:
        kwargs["r_diag"] = config.cost.r_diag
    try:
        benchmark = BENCHMARKS[config.benchmark](**kwargs)
    except TypeError as e:
        raise UsageError(f"bad parameters for {config.benchmark}: {e}") from e
    return Benchmark(benchmark.system, benchmark.cost, benchmark.regions.with_bounds(config.X, config.Xh))


def build_pusher(config: ExperimentConfig) -> HybridPusherSystem:
    kwargs: dict[str, Any] = {}
    for key, value in config.parameters.items():
        if key == "allowed_faces":
            kwargs[key] = tuple(int(v) for v in value)  # type: ignore[union-attr]
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    if config.cost.q_diag is not None:
        kwargs["q_diag"] = tuple(config.cost.q_diag)
    if config.cost.r_diag is not None:
        kwargs["r_diag"] = tuple(config.cost.r_diag)
    try:
        return HybridPusherSystem(PusherParams(**kwargs))
    except TypeError as e:
        raise UsageError(f"bad parameters for pusher: {e}") from e


def write_json(path: Path, payload: BaseModel | dict[str, Any] | list[Any]) -> None:
    text = payload.model_dump_json(indent=2) if isinstance(payload, BaseModel) else json.dumps(payload, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def write_config(out: Path, config: ExperimentConfig) -> None:
    write_json(out / "config.json", {"version": code_version(), "config": config.model_dump(mode="json")})


def load_bundle(path: str | Path) -> Munch:
    """A synth bundle: its config and the value approximations it holds."""
    path = Path(path)
    if not (path / "config.json").is_file():
        raise UsageError(f"no synth bundle at {path}")
    data = json.loads((path / "config.json").read_text(encoding="utf-8"))
    values = {}
    for kind in ("under", "over"):
        file = path / f"value_{kind}.json"
        if file.is_file():
            model = ValueApproxModel.model_validate_json(file.read_text(encoding="utf-8"))
            values[kind] = ValueApprox.from_model(model)
    if not values:
        raise UsageError(f"bundle {path} holds no value functions")
    config = ExperimentConfig.model_validate(data["config"])
    return Munch(path=path, version=data.get("version"), config=config, values=values)


def _residual_samples(X: SemialgebraicSet, Xh: SemialgebraicSet, seed: int) -> np.ndarray:
    region = Xh if Xh.is_bounded else X
    return region.sample(RESIDUAL_SAMPLES, make_rng(seed))


# -- commands --------------------------------------------------------------------


def cmd_synth(config: ExperimentConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, config)
    if config.benchmark == "pusher":
        if config.kind != "under":
            raise UsageError("the pusher supports under-approximations only")
        approx = synth_under_hybrid(build_pusher(config), config.degree_under, config.solver, config.multiplier_degree)
        values = {"under": approx}
    else:
        values = _synth_smooth(config)

    timing = {}
    residuals = {}
    for kind, approx in values.items():
        write_json(out / f"value_{kind}.json", approx.to_model())
        if approx.certificate is not None:
            write_json(out / f"certificate_{kind}.json", approx.certificate.to_model())
        timing[kind] = approx.seconds
    if config.benchmark != "pusher":
        residuals = _residuals(config, values)
    write_json(out / "timing.json", timing)
    if residuals:
        write_json(out / "residuals.json", residuals)

    failed = [kind for kind, approx in values.items() if not approx.verification.passed]
    if failed:
        logger.error(f"certificate verification failed for {', '.join(failed)}")
        return EXIT_VERIFICATION
    logger.info(f"bundle written to {out}")
    return EXIT_OK


def _synth_smooth(config: ExperimentConfig) -> dict[str, ValueApprox]:
    system, cost, (X, Xh) = build_benchmark(config)
    values: dict[str, ValueApprox] = {}
    need_under = config.kind in ("under", "both") or config.initial_controller == "under"
    if need_under:
        values["under"] = synth_under(system, cost, X, Xh, config.degree_under, config.solver, config.multiplier_degree)
    if config.kind in ("over", "both"):
        if config.initial_controller == "under":
            over = refine_over_with_under(
                system, cost, X, Xh, config.degree_over, values["under"], config.solver, config.multiplier_degree
            )
        else:
            controller = lqr_controller(system, cost)
            if Xh.is_bounded and config.simulation.precheck_samples > 0:
                precheck_controller(system, controller, Xh, config.simulation)
            over = synth_over(
                system, cost, X, Xh, config.degree_over, controller, config.solver, config.multiplier_degree
            )
        values["over"] = over
    if config.kind == "over":
        values.pop("under", None)
    return values


def _residuals(config: ExperimentConfig, values: dict[str, ValueApprox]) -> dict[str, dict[str, float]]:
    system, cost, (X, Xh) = build_benchmark(config)
    samples = _residual_samples(X, Xh, config.simulation.seed)
    report = {}
    for kind, approx in values.items():
        if kind == "under":
            residual = under_residual(approx.J, system, cost, samples)
        else:
            assert approx.initial_controller is not None
            residual = over_residual(approx.J, system, cost, approx.initial_controller, samples)
        report[kind] = {"min": residual.minimum, "max": residual.maximum, "scale": residual.scale}
        logger.info(f"{kind} sampled HJB residual in [{residual.minimum:.3g}, {residual.maximum:.3g}]")
    return report


def _default_axes(
    system_names: tuple[str, ...], circles: tuple[tuple[int, int], ...], manifold: frozenset[int]
) -> list[str]:
    axes = [system_names[s] for s, _ in circles] + [n for i, n in enumerate(system_names) if i not in manifold]
    return axes[:2]


def cmd_analyze(config: ExperimentConfig, bundle: Munch) -> int:
    if config.benchmark == "pusher":
        raise UsageError("regional analysis is available for smooth benchmarks only")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, config)
    system, cost, (X, Xh) = build_benchmark(config)
    produced = 0
    for kind, approx in bundle.values.items():
        controller = ValueController(approx.J, system, cost.R).saturating()
        certificates = []
        if kind == "over":
            certificates.append(rogcp_over(approx.J, X, config.region, config.solver, config.simulation.seed))
        else:
            certificates.append(
                rogcp_under(approx.J, system, controller, X, config.region, config.solver, seed=config.simulation.seed)
            )
        certificates.append(roa(approx.J, system, controller, config.region, config.solver))
        for cert in certificates:
            stem = f"{kind}_{cert.kind}"
            write_json(out / f"region_{stem}.json", cert.to_model())
            if not cert.feasible:
                continue
            produced += 1
            cloud = sublevel_cloud(
                approx.J, cert.level, X, system.x_d, config.region.cloud_budget, config.simulation.seed
            )
            pd.DataFrame(cloud, columns=list(system.registry.names)).to_csv(out / f"cloud_{stem}.csv", index=False)
    if "under" in bundle.values and "over" in bundle.values:
        registry = system.registry
        axes = config.simulation.axes or _default_axes(registry.names, registry.circles, registry.manifold_vars)
        under, over = bundle.values["under"].J, bundle.values["over"].J
        frame = gap_slice(under, over, X, system.x_d, axes, config.simulation.grid)
        frame.to_csv(out / "gap_slice.csv", index=False)
    if not produced:
        logger.error("no region certificate has a positive level")
        return EXIT_SOLVER
    return EXIT_OK


def _pick(bundle: Munch, kind: str) -> ValueApprox:
    if kind in bundle.values:
        return bundle.values[kind]
    if kind == "both":
        return bundle.values.get("under") or bundle.values["over"]
    raise UsageError(f"bundle has no {kind} value function")


def cmd_simulate(config: ExperimentConfig, bundle: Munch) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, config)
    approx = _pick(bundle, config.kind)
    settings = config.simulation

    if config.benchmark == "pusher":
        system = build_pusher(config)
        x, y, theta = PUSHER_START
        x0 = settings.x0 or [-system.params.a, 0.0, x, y, float(np.sin(theta)), float(np.cos(theta))]
        trajectory = simulate_hybrid(system, approx.J, x0, settings=settings, region=system.regions().Xh)
        trajectory_frame(trajectory, system.registry.names, ("vn", "vt")).to_csv(out / "trajectory.csv", index=False)
        write_json(out / "summary.json", trajectory.summary(approx.J))
        return EXIT_OK if trajectory.converged else EXIT_SOLVER

    system, cost, (X, Xh) = build_benchmark(config)
    controller = ValueController(approx.J, system, cost.R)
    region = Xh if Xh.is_bounded else None
    if settings.x0 is not None:
        trajectory = simulate(system, controller, settings.x0, settings, region, approx.J, cost)
        frame = trajectory_frame(trajectory, system.registry.names, system.input_names)
        frame.to_csv(out / "trajectory.csv", index=False)
        write_json(out / "summary.json", trajectory.summary(approx.J))
        return EXIT_OK

    starts = X.sample(settings.starts, make_rng(settings.seed))
    trajectories = run_many(system, controller, starts, settings, region, approx.J, cost)
    summaries = [t.summary(approx.J).model_dump(mode="json") for t in trajectories]
    write_json(out / "summary.json", summaries)
    rate = float(np.mean([t.converged for t in trajectories]))
    logger.info(f"{system.name}: {rate:.1%} of {len(starts)} sampled starts reached the goal")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, bundle: Munch) -> int:
    """Grid of starts on a 2-D slice, labelled by success of the SOS and LQR controllers."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, config)
    system, cost, (X, Xh) = build_benchmark(config)
    approx = _pick(bundle, config.kind)
    settings = config.simulation
    registry = system.registry
    axes = settings.axes or _default_axes(registry.names, registry.circles, registry.manifold_vars)
    params, starts = slice_grid(X, system.x_d, axes, settings.grid)
    region = Xh if Xh.is_bounded else None
    sos = run_many(system, ValueController(approx.J, system, cost.R), starts, settings, region)
    lqr = run_many(system, lqr_controller(system, cost), starts, settings, region)
    frame = pd.DataFrame(
        {
            axes[0]: params[:, 0],
            axes[1]: params[:, 1],
            "sos_success": [t.converged for t in sos],
            "lqr_success": [t.converged for t in lqr],
        }
    )
    frame.to_csv(out / "sweep.csv", index=False)
    logger.info(
        f"{system.name} sweep: SOS {frame['sos_success'].mean():.1%}, LQR {frame['lqr_success'].mean():.1%} "
        f"of {len(frame)} starts"
    )
    return EXIT_OK


def cmd_export_sdpa(config: ExperimentConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, config)
    system, cost, (X, Xh) = build_benchmark(config)
    if config.kind == "over":
        controller = lqr_controller(system, cost)
        program, _ = over_program(system, cost, X, Xh, config.degree_over, controller, config.multiplier_degree)
    else:
        program, _ = under_program(system, cost, X, Xh, config.degree_under, config.multiplier_degree)
    compiled = program.compile()
    path = export_sdpa(compiled.problem, out / f"{config.benchmark}_{program.name.split('.')[-1]}.dat-s")
    logger.info(f"wrote {path} ({compiled.problem.m} constraints, blocks {list(compiled.problem.block_sizes)})")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


class _Parser(argparse.ArgumentParser):
    """Exits with EXIT_USAGE on bad arguments instead of argparse's 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hjbsos", description="SOS value-function synthesis and analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON or YAML experiment config", default=None)
        p.add_argument("--benchmark", choices=[*BENCHMARKS, "pusher"], default=None)
        p.add_argument("--kind", choices=["under", "over", "both"], default=None)
        p.add_argument("--degree", type=int, default=None, help="Degree of both approximations")
        p.add_argument("--degree-under", type=int, default=None)
        p.add_argument("--degree-over", type=int, default=None)
        p.add_argument("--multiplier-degree", type=int, default=None)
        p.add_argument("--initial-controller", choices=["lqr", "under"], default=None)
        p.add_argument("--backend", choices=["auto", "internal", "external"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="Output directory")

    def with_bundle(p: argparse.ArgumentParser) -> None:
        p.add_argument("--bundle", required=True, help="Directory written by the synth command")

    common(sub.add_parser("synth", help="Synthesize value-function approximations"))
    common(sub.add_parser("export-sdpa", help="Write the synthesis program in SDPA sparse format"))
    p = sub.add_parser("analyze", help="Certify sublevel regions of a synthesized bundle")
    common(p)
    with_bundle(p)
    for name in ("simulate", "sweep"):
        text = "Simulate from one or many starts" if name == "simulate" else "Simulate a 2-D grid of starts"
        p = sub.add_parser(name, help=text)
        common(p)
        with_bundle(p)
        p.add_argument("--x0", type=_floats, default=None, help="Comma-separated start state")
        p.add_argument("--starts", type=int, default=None)
        p.add_argument("--grid", type=int, default=None)
        p.add_argument("--axes", type=lambda s: s.split(","), default=None, help="Two state names, comma-separated")
        p.add_argument("--horizon", type=float, default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "benchmark": args.benchmark,
        "kind": args.kind,
        "degree_under": args.degree_under if args.degree_under is not None else args.degree,
        "degree_over": args.degree_over if args.degree_over is not None else args.degree,
        "multiplier_degree": args.multiplier_degree,
        "initial_controller": args.initial_controller,
        "solver.backend": args.backend,
        "simulation.seed": args.seed,
        "out": args.out,
        "simulation.x0": getattr(args, "x0", None),
        "simulation.starts": getattr(args, "starts", None),
        "simulation.grid": getattr(args, "grid", None),
        "simulation.axes": getattr(args, "axes", None),
        "simulation.horizon": getattr(args, "horizon", None),
    }
    bundle = getattr(args, "bundle", None)
    path = args.config
    if path is None and bundle is not None and (Path(bundle) / "config.json").is_file():
        base = json.loads((Path(bundle) / "config.json").read_text(encoding="utf-8"))["config"]
        base.pop("out", None)
        return apply_overrides(base, overrides)
    return load_config(path, overrides)


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    logging.basicConfig(level=getenv("LOG_LEVEL", "INFO").upper())
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "export-sdpa":
            return cmd_export_sdpa(config)
        bundle = load_bundle(args.bundle)
        command = {"analyze": cmd_analyze, "simulate": cmd_simulate, "sweep": cmd_sweep}[args.command]
        return command(config, bundle)
    except SynthesisError:
        logger.exception(f"{args.command} failed")
        return EXIT_SOLVER
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
