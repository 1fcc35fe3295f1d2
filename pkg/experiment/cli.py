""" isac-coop: batch front end for simulation, estimation, bounds and RMSE runs. """

import argparse
import math
import os
import sys
from functools import wraps
from typing import Callable, Optional, Sequence

import pandas as pd

from experiment.harness import (
    Reception,
    run_experiment,
    stream_seed,
    symbol_source,
    synthesize_receptions,
)
from experiment.scenario_loader import Scenario
from experiment.src import plotting, serialization
from experiment.src.setup import prepare_scenario, resolve_threads
from sensing.crlb import peb_map, position_bound
from sensing.estimator import two_stage_estimate
from sensing.otfs_core import (
    DEFAULT_SUPPORT_HALFWIDTH,
    ChannelOperator,
    DelayDopplerFrame,
    apply_G,
)
from sensing.scene import (
    link_budget,
    nominal_snr,
    radial_params,
    radar_gain,
    received_snr,
)
from sensing.src.exceptions import ConfigurationError, SensingError
from sensing.src.helpers import config_section, configure_logger

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SIMULATION_KEY = (0,)

logger = configure_logger(__name__)


def _raising_module(error: BaseException) -> str:
    trace = error.__traceback__
    while trace is not None and trace.tb_next is not None:
        trace = trace.tb_next
    if trace is None:
        return type(error).__module__
    return trace.tb_frame.f_globals.get("__name__", "?")


def handle_command_errors(func: Callable):
    """Decorator mapping command failures to messages and exit codes."""

    @wraps(func)
    def wrapper(args: argparse.Namespace) -> int:
        try:
            return func(args)
        except ValueError as e:
            logger.error("Validation error in %s.", args.command)
            print(f"{args.command}: {_raising_module(e)}: {e}", file=sys.stderr)
            return EXIT_INVALID
        except (SensingError, RuntimeError, OSError) as e:
            logger.error("Runtime error in %s.", args.command)
            print(f"{args.command}: {_raising_module(e)}: {e}", file=sys.stderr)
            return EXIT_RUNTIME

    return wrapper


def _db(value: float) -> float:
    return 10 * math.log10(value) if value > 0 else -math.inf


def _load(args: argparse.Namespace) -> Scenario:
    return prepare_scenario(args.scenario, args.scale)


def _output_dir(args: argparse.Namespace) -> str:
    return serialization.ensure_directory(args.out)


def _seed(args: argparse.Namespace, scenario: Scenario) -> int:
    return scenario.seed if args.seed is None else args.seed


@handle_command_errors
def cmd_validate(args: argparse.Namespace) -> int:
    """Parses the scenario and prints derived quantities; writes nothing."""
    scenario = _load(args)
    scene, params = scenario.scene, scenario.scene.params
    beam = scene.beamformer

    print(f"scenario: {scenario.path} (valid)")
    print(f"M x N: {params.M} x {params.N}, N_T = {params.n_tx}, N_R = {params.n_rx}")
    print(f"bandwidth B = {params.bandwidth:.6g} Hz")
    print(f"Doppler resolution 1/(N T) = {params.doppler_resolution:.6g} Hz")
    print(f"delay resolution 1/(M delta_f) = {params.delay_resolution:.6g} s")
    print(f"noise variance N0 delta_f = {params.noise_var:.6g} W")
    print(f"P_avg = P_T / M = {params.p_avg:.6g} W")
    print(
        f"beamformer: mean {beam.mean_gain_db:.2f} dB, min {beam.min_gain_db:.2f} dB, "
        f"max {beam.max_gain_db:.2f} dB, ripple {beam.ripple_db:.2f} dB"
    )
    ny, nx = scene.roi.shape
    print(f"RoI: {nx} x {ny} pixels, n_trials = {scenario.n_trials}")

    for waypoint in scenario.waypoints:
        target = scene.target.moved_to(waypoint)
        for site in scene.sites:
            radial = radial_params(target, site, params)
            link = link_budget(params, site, target, beam)
            snr = nominal_snr(params, link)
            print(
                f"waypoint ({waypoint[0]:.2f}, {waypoint[1]:.2f}) BS {site.index}: "
                f"r = {radial.r:.3f} m, phi = {radial.phi:+.4f} rad, "
                f"f_D = {radial.f_D:+.1f} Hz, SNR {_db(snr):.2f} dB per sample, "
                f"{_db(snr * params.frame_size * params.n_rx):.2f} dB integrated"
            )
    return EXIT_OK


def _reception_manifest(scenario: Scenario, receptions, seed: int, noiseless: bool):
    params = scenario.scene.params
    target = scenario.scene.target
    per_bs = []
    for reception in receptions:
        radial = radial_params(target, reception.site, params)
        clean = reception.link.h * apply_G(
            ChannelOperator.exact(params, radial.f_D, radial.tau, radial.phi),
            reception.frame,
        )
        per_bs.append(
            {
                "index": int(reception.site.index),
                "origin_m": list(reception.site.origin),
                "rotation_rad": reception.site.rotation,
                "f_d_hz": float(radial.f_D),
                "tau_s": float(radial.tau),
                "phi_rad": float(radial.phi),
                "range_m": float(radial.r),
                "alpha_mag_sq": float(radar_gain(params, target.rcs, radial.r)),
                "alpha_phase_rad": float(reception.link.alpha_phase),
                "h": [float(reception.link.h.real), float(reception.link.h.imag)],
                "snr_db": _db(received_snr(params, clean)),
                "rx_file": f"rx_bs{reception.site.index}.npy",
                "tx_file": f"tx_bs{reception.site.index}.npy",
            }
        )
    return {
        "scenario": os.path.abspath(scenario.path),
        "seed": int(seed),
        "noiseless": noiseless,
        "M": params.M,
        "N": params.N,
        "n_rx": params.n_rx,
        "doppler_resolution_hz": params.doppler_resolution,
        "delay_resolution_s": params.delay_resolution,
        "noise_var_w": params.noise_var,
        "p_avg_w": params.p_avg,
        "target_m": list(target.position),
        "bs": per_bs,
    }


@handle_command_errors
def cmd_simulate(args: argparse.Namespace) -> int:
    """Writes per-BS received and transmitted frames plus a manifest."""
    scenario = _load(args)
    out_dir = _output_dir(args)
    seed = _seed(args, scenario)
    receptions = synthesize_receptions(
        scenario.scene, scenario.scene.sites, seed, SIMULATION_KEY, args.noiseless
    )

    for reception in receptions:
        index = reception.site.index
        serialization.write_array(
            os.path.join(out_dir, f"rx_bs{index}.npy"), reception.y
        )
        serialization.write_array(
            os.path.join(out_dir, f"tx_bs{index}.npy"), reception.frame.symbols
        )
    serialization.write_manifest(
        os.path.join(out_dir, "manifest.yaml"),
        _reception_manifest(scenario, receptions, seed, args.noiseless),
    )
    logger.info("Simulated %d receptions into %s", len(receptions), out_dir)
    return EXIT_OK


def _receptions_from_dir(scenario: Scenario, input_dir: str) -> list[Reception]:
    manifest = serialization.read_manifest(os.path.join(input_dir, "manifest.yaml"))
    params = scenario.scene.params
    shape = (manifest["M"], manifest["N"], manifest["n_rx"])
    if shape != (params.M, params.N, params.n_rx):
        raise ConfigurationError(
            f"Simulation in {input_dir} was made for M={manifest['M']}, "
            f"N={manifest['N']}, N_R={manifest['n_rx']}, not this scenario"
        )

    receptions = []
    for entry in manifest["bs"]:
        site = scenario.scene.site(entry["index"])
        frame = DelayDopplerFrame(
            serialization.read_array(os.path.join(input_dir, entry["tx_file"]))
        )
        y = serialization.read_array(os.path.join(input_dir, entry["rx_file"]))
        link = link_budget(
            params, site, scenario.scene.target, scenario.scene.beamformer
        )
        receptions.append(Reception(site, frame, y, link))
    return receptions


def _map_label(label) -> str:
    return label if label == "fused" else f"bs{label}"


@handle_command_errors
def cmd_estimate(args: argparse.Namespace) -> int:
    """Two-stage estimation over the declared RoI; writes maps and estimates."""
    scenario = _load(args)
    out_dir = _output_dir(args)
    scene, params = scenario.scene, scenario.scene.params
    threads = resolve_threads(args.threads)

    if args.input:
        receptions = _receptions_from_dir(scenario, args.input)
    else:
        receptions = synthesize_receptions(
            scene, scene.sites, _seed(args, scenario), SIMULATION_KEY, args.noiseless
        )
    sites = [reception.site for reception in receptions]
    grids = [scenario.coarse.grid_for(params, scene.roi, site) for site in sites]

    record, fusion = two_stage_estimate(
        [r.y for r in receptions],
        [r.frame for r in receptions],
        grids,
        scene.roi,
        sites,
        params,
        args.support_halfwidth,
        threads,
    )

    roi = scene.roi
    sections = []
    for radar_map in [fusion.fused, *fusion.per_bs]:
        name = f"radar_map_{_map_label(radar_map.label)}.csv"
        serialization.write_raster(os.path.join(out_dir, name), roi, radar_map.values)
        sections.append(
            plotting.raster_plot(
                name,
                f"Radar map ({radar_map.label})",
                roi.x_min,
                roi.y_min,
                roi.dx,
                roi.dy,
            )
        )
    serialization.write_table(
        os.path.join(out_dir, "estimates.csv"), serialization.estimate_table(record)
    )
    plotting.write_script(os.path.join(out_dir, "plot_estimate.gp"), sections)

    error = math.dist(record.position, scene.target.position)
    print(
        f"position estimate ({record.position[0]:.4f}, {record.position[1]:.4f}) m, "
        f"error {error:.4f} m"
    )
    return EXIT_OK


def _subset_label(subset: Sequence[int]) -> str:
    return "bs" + "-".join(str(index) for index in subset)


@handle_command_errors
def cmd_crlb(args: argparse.Namespace) -> int:
    """PEB maps over the RoI and bound sweeps over the waypoints."""
    scenario = _load(args)
    out_dir = _output_dir(args)
    scene, params = scenario.scene, scenario.scene.params
    threads = resolve_threads(args.threads)
    seed = _seed(args, scenario)

    max_pixels = int(config_section("crlb").get("map_max_pixels", 2601))
    roi = scene.roi
    if roi.size > max_pixels:
        roi = roi.rescaled(math.ceil(math.sqrt(roi.size / max_pixels)))
        logger.info("PEB maps evaluated on a %d x %d raster", *roi.shape[::-1])

    frame = symbol_source(stream_seed(seed, 0), params.M, params.N)
    sections = []
    for subset in scenario.bs_subsets:
        name = f"peb_map_{_subset_label(subset)}.csv"
        bound_map = peb_map(
            roi, scene.subset(subset), scene, frame, args.support_halfwidth, threads
        )
        serialization.write_raster(os.path.join(out_dir, name), roi, bound_map.values)
        sections.append(
            plotting.raster_plot(
                name,
                f"PEB [m], BSs {list(subset)}",
                roi.x_min,
                roi.y_min,
                roi.dx,
                roi.dy,
            )
        )

    rows = []
    for w, waypoint in enumerate(scenario.waypoints):
        moved = scene.with_target(scene.target.moved_to(waypoint))
        reference = symbol_source(stream_seed(seed, w), params.M, params.N)
        for subset in scenario.bs_subsets:
            bound = position_bound(
                moved, moved.subset(subset), reference, args.support_halfwidth
            )
            rows.append(
                {
                    "waypoint_x": waypoint[0],
                    "waypoint_y": waypoint[1],
                    "n_bs": len(subset),
                    "crb_range_m": bound.reference.efim_range_m,
                    "crb_angle_rad": bound.reference.efim_angle_rad,
                    "crb_range_full_m": bound.reference.full_range_m,
                    "crb_angle_full_rad": bound.reference.full_angle_rad,
                    "peb_m": bound.peb_m,
                }
            )
    serialization.write_table(os.path.join(out_dir, "crlb.csv"), pd.DataFrame(rows))
    plotting.write_script(os.path.join(out_dir, "plot_crlb.gp"), sections)
    return EXIT_OK


@handle_command_errors
def cmd_rmse(args: argparse.Namespace) -> int:
    """Monte Carlo RMSE table with matching bounds."""
    scenario = _load(args)
    out_dir = _output_dir(args)
    plan = scenario.plan(args.support_halfwidth, args.seed, args.noiseless)
    progress = not args.quiet and sys.stderr.isatty()
    result = run_experiment(plan, resolve_threads(args.threads), progress=progress)

    serialization.write_table(os.path.join(out_dir, "rmse.csv"), result.table)
    plotting.write_script(
        os.path.join(out_dir, "plot_rmse.gp"),
        [plotting.rmse_plot("rmse.csv", sorted({len(s) for s in scenario.bs_subsets}))],
    )
    logger.info("RMSE run finished in %.1f s", result.wall_time_s)
    with pd.option_context("display.width", 160, "display.max_columns", 12):
        print(result.table[["waypoint_x", "n_bs", "rmse_pos_m", "peb_m", "n_failed"]])
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "crlb": cmd_crlb,
    "rmse": cmd_rmse,
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of the isac-coop command line."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="Scenario YAML file")
    common.add_argument("--out", default="out", help="Output directory (default: out)")
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (env ISAC_COOP_THREADS)",
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Override the master seed"
    )
    common.add_argument(
        "--support-halfwidth",
        type=int,
        default=DEFAULT_SUPPORT_HALFWIDTH,
        help="Frequency-offset truncation radius of the channel operator",
    )
    common.add_argument(
        "--scale", type=float, default=None, help="Desk-scale factor in (0, 1]"
    )
    common.add_argument(
        "--noiseless", action="store_true", help="Synthesize without noise"
    )
    common.add_argument("--quiet", action="store_true", help="No progress bar")

    parser = argparse.ArgumentParser(
        prog="isac-coop",
        description="Cooperative ML target localization with MIMO-OTFS ISAC BSs",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sub = commands.add_parser(name, parents=[common], help=func.__doc__)
        if name == "estimate":
            sub.add_argument(
                "--input", default=None, help="Directory written by simulate"
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if not hasattr(args, "input"):
        args.input = None
    logger.info("isac-coop %s %s", args.command, args.scenario)
    code = COMMANDS[args.command](args)
    logger.info("isac-coop %s finished with exit code %d", args.command, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
