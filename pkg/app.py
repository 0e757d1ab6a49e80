import argparse
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from services import __version__
from services.coefficient_service import CSV_HEADER, compute, proof_constants
from services.config_service import ConfigError, from_mapping, load_config, merge_overrides
from services.experiment_service import (RunManifest, Stopwatch, file_digest, run_equivalence,
                                         sample_report, write_csv, write_json, write_ndjson)
from services.gci_service import GciService, k_node_residual, ode_residual
from services.hydro_service import HydroSolver, PdeConfig
from services.particle_service import ParticleSimulator, SimConfig, snapshot_header, snapshot_rows

load_dotenv()

THREADS = int(os.getenv('BODYATT_THREADS', '1'))
CACHE_DIR = os.getenv('BODYATT_CACHE_DIR', os.path.join('data', 'gci_cache'))
OUTPUT_DIR = os.getenv('BODYATT_OUTPUT_DIR', 'output')
LOG_LEVEL = os.getenv('BODYATT_LOG_LEVEL', 'INFO').upper()

logging.basicConfig(level=LOG_LEVEL)
logging.getLogger().setLevel(LOG_LEVEL)
logger = logging.getLogger('bodyatt')

EXPERIMENT_KEYS = ('seeds', 'burn_in', 'snapshots', 'snapshot_every')

# Initialize services
gci_service = GciService(CACHE_DIR)


def _positive(name: str, value, kind=float):
    if value is None:
        raise ConfigError(name, 'required field is missing')
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f'must be a number, got {value!r}')
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(name, f'must be positive, got {value!r}')
    return value


def _with_threads(data: Dict[str, Any], flag: Optional[int]) -> Dict[str, Any]:
    if flag is not None:
        data['threads'] = flag
    elif 'threads' not in data:
        data['threads'] = THREADS
    return data


# ----------------------------------------------------------------------------
# coeffs
# ----------------------------------------------------------------------------

def resolve_coeffs(args) -> Dict[str, Any]:
    return {
        'd': [_positive('d', d) for d in args.d],
        'nodes': _positive('nodes', args.nodes, int),
        'proof': bool(args.proof),
    }


def execute_coeffs(config: Dict[str, Any], output_dir: str) -> List[str]:
    rows, proofs = [], {}
    for d in config['d']:
        table = gci_service.get_table(d, config['nodes'])
        rows.append([repr(float(x)) for x in compute(d, table).as_row()])
        if config.get('proof'):
            proofs[repr(float(d))] = proof_constants(d, table)
    outputs = [write_csv(os.path.join(output_dir, 'coeffs.csv'), CSV_HEADER, rows)]
    if proofs:
        outputs.append(write_json(os.path.join(output_dir, 'proof_constants.json'), proofs))
    return outputs


# ----------------------------------------------------------------------------
# gci
# ----------------------------------------------------------------------------

def resolve_gci(args) -> Dict[str, Any]:
    return {'d': _positive('d', args.d), 'nodes': _positive('nodes', args.nodes, int)}


def execute_gci(config: Dict[str, Any], output_dir: str) -> List[str]:
    d = config['d']
    table = gci_service.get_table(d, config['nodes'])
    rows = [[repr(float(r)), repr(float(h)), repr(float(hp))] for r, h, hp in zip(table.grid, table.h, table.hprime)]
    summary = {
        'd': d,
        'nodes': config['nodes'],
        'max_ode_residual': float(np.max(np.abs(ode_residual(table)))),
        'max_matrix_ode_residual': k_node_residual(table),
        'h_at_1': float(table.h[-1]),
    }
    return [
        write_csv(os.path.join(output_dir, 'gci_table.csv'), ['r', 'h', 'hprime'], rows),
        write_json(os.path.join(output_dir, 'gci_summary.json'), summary),
    ]


# ----------------------------------------------------------------------------
# sample
# ----------------------------------------------------------------------------

def resolve_sample(args) -> Dict[str, Any]:
    qbar = [1.0, 0.0, 0.0, 0.0] if args.qbar is None else [float(x) for x in args.qbar]
    if np.linalg.norm(qbar) == 0.0:
        raise ConfigError('qbar', 'must be a nonzero quaternion')
    seed = 0 if args.seed is None else int(args.seed)
    if seed < 0:
        raise ConfigError('seed', f'must be nonnegative, got {seed}')
    return {'d': _positive('d', args.d), 'n': _positive('n', args.n, int), 'seed': seed, 'qbar': qbar}


def execute_sample(config: Dict[str, Any], output_dir: str) -> List[str]:
    q, summary = sample_report(config['d'], config['qbar'], config['n'], config['seed'])
    rows = ([repr(float(c)) for c in row] for row in q)
    return [
        write_csv(os.path.join(output_dir, 'samples.csv'), ['w', 'x', 'y', 'z'], rows),
        write_json(os.path.join(output_dir, 'sample_summary.json'), summary),
    ]


# ----------------------------------------------------------------------------
# simulate / equivalence
# ----------------------------------------------------------------------------

def _sim_overrides(args) -> Dict[str, Any]:
    return {
        'n_particles': args.n_particles,
        'v0': args.v0,
        'nu': args.nu,
        'D': args.D,
        'dt': args.dt,
        't_end': args.t_end,
        'seed': args.seed,
        'representation': args.representation,
        'initial': args.initial,
        'output_stride': args.output_stride,
        'snapshot_stride': args.snapshot_stride,
        'all_pairs': True if args.all_pairs else None,
    }


def _sim_config_dict(args) -> Dict[str, Any]:
    data = merge_overrides(load_config(args.config), _sim_overrides(args))
    if args.kernel_type is not None or args.radius is not None:
        kernel = dict(data.get('kernel') or {})
        kernel.update({k: v for k, v in (('type', args.kernel_type), ('radius', args.radius)) if v is not None})
        data['kernel'] = kernel
    return _with_threads(data, args.threads)


def resolve_simulate(args) -> Dict[str, Any]:
    return asdict(from_mapping(SimConfig, _sim_config_dict(args)))


def execute_simulate(config: Dict[str, Any], output_dir: str) -> List[str]:
    cfg = from_mapping(SimConfig, config)
    simulator = ParticleSimulator(cfg)
    snapshots: List[List[Any]] = []
    observables = [obs.to_dict() for obs in simulator.run(snapshot=lambda s: snapshots.extend(snapshot_rows(s)))]
    outputs = [write_ndjson(os.path.join(output_dir, 'observables.ndjson'), observables)]
    if cfg.snapshot_stride:
        outputs.append(write_csv(os.path.join(output_dir, 'snapshots.csv'), snapshot_header(cfg.representation), snapshots))
    return outputs


def resolve_equivalence(args) -> Dict[str, Any]:
    data = _sim_config_dict(args)
    experiment = {key: data.pop(key) for key in EXPERIMENT_KEYS if key in data}
    flags = {'seeds': args.seeds, 'burn_in': args.burn_in, 'snapshots': args.snapshots,
             'snapshot_every': args.snapshot_every}
    experiment = merge_overrides({'seeds': 16, 'burn_in': 3.0, 'snapshots': 5, 'snapshot_every': 1.0}, experiment)
    experiment = merge_overrides(experiment, flags)
    data.setdefault('representation', 'quaternion')
    cfg = from_mapping(SimConfig, data)
    if cfg.nu <= 0.0:
        raise ConfigError('nu', 'must be positive for an equilibrium comparison')
    resolved = asdict(cfg)
    resolved.update({
        'seeds': _positive('seeds', experiment['seeds'], int),
        'burn_in': float(experiment['burn_in']),
        'snapshots': _positive('snapshots', experiment['snapshots'], int),
        'snapshot_every': _positive('snapshot_every', experiment['snapshot_every']),
    })
    return resolved


def execute_equivalence(config: Dict[str, Any], output_dir: str) -> List[str]:
    config = dict(config)
    experiment = {key: config.pop(key) for key in EXPERIMENT_KEYS}
    cfg = from_mapping(SimConfig, config)
    report, pooled = run_equivalence(cfg, experiment['seeds'], experiment['burn_in'],
                                     experiment['snapshots'], experiment['snapshot_every'])
    rows = ([repr(float(a)), repr(float(b))] for a, b in zip(pooled['quaternion'], pooled['matrix']))
    return [
        write_json(os.path.join(output_dir, 'equivalence_report.json'), report.to_dict()),
        write_csv(os.path.join(output_dir, 'alignment_samples.csv'), ['quaternion', 'matrix'], rows),
    ]


# ----------------------------------------------------------------------------
# pde
# ----------------------------------------------------------------------------

def resolve_pde(args) -> Dict[str, Any]:
    overrides = {'n_cells': args.n_cells, 'dx': args.dx, 'dt': args.dt, 't_end': args.t_end, 'd': args.d,
                 'frame_stride': args.frame_stride}
    data = _with_threads(merge_overrides(load_config(args.config), overrides), args.threads)
    return asdict(from_mapping(PdeConfig, data))


def execute_pde(config: Dict[str, Any], output_dir: str) -> List[str]:
    cfg = from_mapping(PdeConfig, config)
    coeffs = compute(cfg.d, gci_service.get_table(cfg.d, cfg.gci_nodes))
    solver = HydroSolver(cfg, coeffs)
    outputs, last = [], None
    for frame in solver.run():
        path = os.path.join(output_dir, 'frames', f'frame_{frame.step:06d}.csv')
        outputs.append(write_csv(path, ['cell', 'rho', 'w', 'qx', 'qy', 'qz'], frame.rows()))
        last = frame
    summary = {'coefficients': coeffs.to_dict(), 'final_time': last.time, 'final_mass': last.mass,
               'vacuum_skips': last.skipped, 'frames': len(outputs)}
    outputs.append(write_json(os.path.join(output_dir, 'pde_summary.json'), summary))
    return outputs


COMMANDS: Dict[str, Tuple[Callable, Callable]] = {
    'coeffs': (resolve_coeffs, execute_coeffs),
    'gci': (resolve_gci, execute_gci),
    'sample': (resolve_sample, execute_sample),
    'simulate': (resolve_simulate, execute_simulate),
    'equivalence': (resolve_equivalence, execute_equivalence),
    'pde': (resolve_pde, execute_pde),
}


# ----------------------------------------------------------------------------
# Parser and dispatch
# ----------------------------------------------------------------------------

def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', help='JSON file whose keys mirror SimConfig')
    p.add_argument('--n-particles', type=int)
    p.add_argument('--v0', type=float)
    p.add_argument('--nu', type=float)
    p.add_argument('--D', type=float)
    p.add_argument('--dt', type=float)
    p.add_argument('--t-end', type=float)
    p.add_argument('--kernel-type', choices=['indicator', 'smooth'])
    p.add_argument('--radius', type=float)
    p.add_argument('--representation', choices=['quaternion', 'matrix'])
    p.add_argument('--initial', choices=['uniform', 'aligned'])
    p.add_argument('--output-stride', type=int)
    p.add_argument('--snapshot-stride', type=int)
    p.add_argument('--all-pairs', action='store_true')
    p.add_argument('--seed', type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='bodyatt', description='Quaternion body-attitude coordination toolkit')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--output', help='output folder (default: $BODYATT_OUTPUT_DIR/<command>)')
    common.add_argument('--threads', type=int)

    p = sub.add_parser('coeffs', parents=[common], help='hydrodynamic coefficients')
    p.add_argument('--d', type=float, nargs='+', required=True)
    p.add_argument('--nodes', type=int, default=512)
    p.add_argument('--proof', action='store_true', help='also write the intermediate constants C2..C5')

    p = sub.add_parser('gci', parents=[common], help='GCI profile table')
    p.add_argument('--d', type=float, required=True)
    p.add_argument('--nodes', type=int, default=512)

    p = sub.add_parser('sample', parents=[common], help='equilibrium samples')
    p.add_argument('--d', type=float, required=True)
    p.add_argument('--n', type=int, default=100000)
    p.add_argument('--seed', type=int)
    p.add_argument('--qbar', type=float, nargs=4)

    p = sub.add_parser('simulate', parents=[common], help='particle simulation')
    _add_sim_flags(p)

    p = sub.add_parser('equivalence', parents=[common], help='quaternion vs matrix equivalence in law')
    _add_sim_flags(p)
    p.add_argument('--seeds', type=int)
    p.add_argument('--burn-in', type=float)
    p.add_argument('--snapshots', type=int)
    p.add_argument('--snapshot-every', type=float)

    p = sub.add_parser('pde', parents=[common], help='1D macroscopic solver')
    p.add_argument('--config', help='JSON file whose keys mirror PdeConfig')
    p.add_argument('--n-cells', type=int)
    p.add_argument('--dx', type=float)
    p.add_argument('--dt', type=float)
    p.add_argument('--t-end', type=float)
    p.add_argument('--d', type=float)
    p.add_argument('--frame-stride', type=int)

    p = sub.add_parser('replay', help='re-run a command from its manifest and compare outputs')
    p.add_argument('manifest')
    p.add_argument('--output', help='folder for the replayed outputs (default: the manifest folder)')
    return parser


def run_command(command: str, config: Dict[str, Any], output_dir: str) -> RunManifest:
    """Execute a resolved command and write its manifest next to the outputs."""
    _, execute = COMMANDS[command]
    os.makedirs(output_dir, exist_ok=True)
    with Stopwatch() as watch:
        paths = execute(config, output_dir)
    outputs = [os.path.relpath(p, output_dir) for p in paths]
    manifest = RunManifest(
        command=command,
        config=config,
        seed=config.get('seed'),
        outputs=outputs,
        digests={rel: file_digest(os.path.join(output_dir, rel)) for rel in outputs},
        duration=watch.elapsed,
        threads=int(config.get('threads', 1)),
    )
    manifest.save(output_dir)
    logger.info(f"{command} finished in {watch.elapsed:.2f}s; wrote {len(outputs)} file(s) to {output_dir}")
    return manifest


def replay(args) -> int:
    try:
        original = RunManifest.load(args.manifest)
        if original.command not in COMMANDS:
            raise ConfigError('command', f'unknown command {original.command!r} in manifest')
    except (OSError, ValueError, TypeError) as e:
        print(f'error: {e}', file=sys.stderr)
        return 2

    output_dir = args.output or os.path.dirname(os.path.abspath(args.manifest))
    try:
        replayed = run_command(original.command, original.config, output_dir)
    except Exception as e:
        logger.error(f"Replay failed: {str(e)}")
        return 1
    mismatched = [name for name, digest in original.digests.items() if replayed.digests.get(name) != digest]
    if mismatched:
        logger.error(f"Replay differs from the manifest in: {', '.join(mismatched)}")
        return 1
    logger.info(f"Replay of {original.command} reproduced {len(original.digests)} file(s) bit for bit")
    return 0


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse, validate and run one command

    Returns:
        int: 0 on success, 2 for usage or configuration errors, 1 for runtime failures
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    if args.command == 'replay':
        return replay(args)

    resolve, _ = COMMANDS[args.command]
    try:
        config = resolve(args)
    except (ConfigError, ValueError) as e:
        logger.error(f"Invalid configuration: {str(e)}")
        print(f'error: {e}', file=sys.stderr)
        return 2

    output_dir = args.output or os.path.join(OUTPUT_DIR, args.command)
    try:
        run_command(args.command, config, output_dir)
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f'error: {e}', file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
