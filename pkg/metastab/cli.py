"""
Command-line interface
======================

python -m metastab <subcommand> [flags]

    synth-data     procedural (or supplied) videos shaken into stable/unstable pairs
    train-affine   pretrain the rigid-motion regressor on synthetic flows
    meta-train     meta-train the synthesis network on a synth-data directory
    stabilize      adapt a model to one video and write the stabilized frames
    evaluate       stability / cropping / distortion report for a video pair
    ablate         adaptation-trend, loss-weight and meta-vs-finetune experiments

Exit codes: 0 success, 1 runtime or I/O failure (one JSON line on stderr),
2 usage error. Every run writes a manifest next to its outputs.

Data layout written by synth-data and read by meta-train / ablate:

    <dir>/<video_id>/unstable/000000.png ...
    <dir>/<video_id>/stable/000000.png ...
    <dir>/<video_id>/transforms.json
    <dir>/<video_id>/profile.json
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple


from metastab import autodiff as ad
from metastab.autodiff import ParamVector
from metastab.errors import CheckpointFormatError, ConfigError, FrameSequenceError, MetaStabError
from metastab.exporters import (
    JsonLinesLog,
    export_profile,
    export_report_json,
    export_transforms,
    load_profile,
    load_transforms,
    summarize_report,
)
from metastab.frames import FrameSequence, load_sequence, save_sequence
from metastab.settings_manager import (
    ARCHITECTURE_PRESETS,
    CATEGORY_WEIGHTS,
    apply_overrides,
    get_setting,
    load_settings_file,
    loss_weights_from_settings,
    meta_config_from_settings,
    reset_settings,
    shake_profile_from_settings,
    snapshot_settings,
)
from metastab.losses import LossWeights

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('synth-data', 'train-affine', 'meta-train', 'stabilize', 'evaluate', 'ablate')
EXPERIMENTS = ('trend', 'weights', 'finetune')


def configure_logging(level: str = 'INFO'):
    """One stderr handler on the package logger"""
    root = logging.getLogger('metastab')
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    root.addHandler(handler)
    root.setLevel(level.upper())


def _adapt_samples(value: str):
    if value == 'all':
        return value
    try:
        count = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'all', got '{value}'")
    if count < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'all', got '{value}'")
    return count


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='metastab', description='Test-time adapted full-frame video stabilization')
    parser.add_argument('--seed', type=int, help='Global seed (default: runtime.seed)')
    parser.add_argument('--workers', type=int, help='Worker threads (default: available parallelism)')
    parser.add_argument('--config', type=Path, help='TOML or JSON settings file; flags override it')
    parser.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--precision', choices=['float32', 'float64'], help='Tensor scalar width')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars')
    sub = parser.add_subparsers(dest='subcommand', required=True, metavar='{' + ','.join(SUBCOMMANDS) + '}')

    p = sub.add_parser('synth-data', help='Generate stable/unstable training pairs')
    p.add_argument('--out', type=Path, required=True, help='Output dataset directory')
    p.add_argument('--videos', type=int, default=4)
    p.add_argument('--frames', type=int, help='Frames per video (default: synthetic.frames)')
    p.add_argument('--height', type=int)
    p.add_argument('--width', type=int)
    p.add_argument('--sprites', type=int, help='Independently moving objects per scene')
    p.add_argument('--source', type=Path, help='Shake this frame directory instead of rendering scenes')
    p.add_argument('--profile', type=Path, help='ShakeProfile JSON (default: synthetic settings)')
    p.add_argument('--rotation-std', type=float)
    p.add_argument('--translation-std', type=float)
    p.add_argument('--jitter-correlation', type=float)

    p = sub.add_parser('train-affine', help='Pretrain the rigid-motion regressor')
    p.add_argument('--out', type=Path, required=True, help='Output MSTB file')
    p.add_argument('--steps', type=int)
    p.add_argument('--samples', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--learning-rate', type=float)
    p.add_argument('--frame-size', type=int)
    p.add_argument('--flow-source', choices=['analytic', 'estimated'])
    p.add_argument('--eval-count', type=int, default=200, help='Held-out warps for the error report')

    p = sub.add_parser('meta-train', help='Meta-train the synthesis network')
    p.add_argument('--data', type=Path, required=True, help='synth-data directory')
    p.add_argument('--out', type=Path, required=True, help='Output MSTB model')
    p.add_argument('--arch', choices=sorted(ARCHITECTURE_PRESETS), help='Window/recurrence preset')
    p.add_argument('--init', type=Path, help='Start from this model instead of a fresh initialization')
    p.add_argument('--regressor', type=Path, help='MSTB file with regressor parameters')
    p.add_argument('--steps', type=int, help='Outer steps')
    p.add_argument('--meta-batch', type=int)
    p.add_argument('--adapt-steps', type=int, help='Inner steps M')
    p.add_argument('--alpha', type=float)
    p.add_argument('--beta', type=float)
    p.add_argument('--patch', type=int)
    p.add_argument('--frames-per-task', type=int)
    p.add_argument('--base-width', type=int)
    p.add_argument('--lambda-s', type=float)
    p.add_argument('--lambda-p', type=float)
    p.add_argument('--second-order', action='store_true', help='Full meta-gradient (tiny networks only)')
    p.add_argument('--disjoint-outer', action='store_true', help='Outer loss on windows disjoint from the inner task')
    p.add_argument('--conventional', action='store_true', help='Train on the outer loss without adaptation (baseline)')
    p.add_argument('--checkpoint-dir', type=Path)
    p.add_argument('--resume', action='store_true', help='Continue from the newest checkpoint in --checkpoint-dir')
    p.add_argument('--log', type=Path, help='JSON-lines training log (default: <out>.jsonl)')

    p = sub.add_parser('stabilize', help='Adapt to one video and stabilize it')
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--video', type=Path, required=True, help='Directory of numbered frames')
    p.add_argument('--out', type=Path, required=True, help='Output frame directory')
    p.add_argument('--k', type=int, help='Expected half-window; must match the model')
    p.add_argument('--recurrent', action='store_true', default=None, help='Feed synthesized frames back into windows')
    p.add_argument('--adapt-steps', type=int, default=1, help='Adaptation passes M')
    p.add_argument('--adapt-samples', type=_adapt_samples, default=None, help="Sampled tasks S, or 'all'")
    p.add_argument('--lambda-s', type=float)
    p.add_argument('--lambda-p', type=float)
    p.add_argument('--category', choices=sorted(CATEGORY_WEIGHTS), help='Loss-weight preset')
    p.add_argument('--regressor', type=Path, help='MSTB file with regressor parameters')
    p.add_argument('--alpha', type=float)
    p.add_argument('--patch', type=int, help='Adaptation patch size')

    p = sub.add_parser('evaluate', help='Score a stabilized video against its original')
    p.add_argument('--original', type=Path, required=True)
    p.add_argument('--stabilized', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True, help='Report JSON')
    p.add_argument('--stability-reduce', choices=['mean', 'min'])
    p.add_argument('--distortion-reduce', choices=['mean', 'min'])
    p.add_argument('--flow-dir', type=Path, help='Cache of MSFL global flows for the stabilized video (reused while its frames are unchanged)')

    p = sub.add_parser('ablate', help='Run the trend experiments')
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--data', type=Path, required=True, help='Directory of <video>/unstable frame folders')
    p.add_argument('--out', type=Path, required=True, help='Summary JSON')
    p.add_argument('--experiments', default=','.join(EXPERIMENTS), help=f"Comma list of {', '.join(EXPERIMENTS)}")
    p.add_argument('--baseline', type=Path, help='Conventionally trained model (finetune experiment)')
    p.add_argument('--regressor', type=Path)
    p.add_argument('--videos', type=int, default=4)
    p.add_argument('--tasks', type=int, default=20, help='Held-out tasks for the finetune experiment')
    p.add_argument('--adapt-samples', type=_adapt_samples, default=None)
    return parser


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _manifest_path(output: Path) -> Path:
    if output.suffix:
        return output.with_name(output.name + '.manifest.json')
    return output / 'manifest.json'


def _write_manifest(args, inputs: Sequence[Path], outputs: Sequence[Path], extra: Optional[Dict] = None) -> Path:
    from metastab.session_manager import save_manifest

    return save_manifest(
        _manifest_path(Path(args.out)),
        args.subcommand,
        snapshot_settings(),
        int(get_setting('runtime', 'seed')),
        inputs=inputs,
        outputs=outputs,
        extra=extra,
    )


def _progress() -> bool:
    return bool(get_setting('runtime', 'progress')) and sys.stderr.isatty()


def load_model(path: Path):
    """SynthesisNet, θ and the optional bundled regressor from an MSTB model"""
    from metastab.rigid import AffineRegressor
    from metastab.session_manager import load_parameters, split_parameters
    from metastab.synthesis import SynthesisNet

    arrays = load_parameters(path)
    net_arrays = split_parameters(arrays, 'net')
    if not net_arrays:
        raise CheckpointFormatError(f"{path}: no 'net.' parameters")
    net = SynthesisNet.from_parameters(net_arrays, leaky_slope=float(get_setting('synthesis', 'leaky_slope')))
    regressor_arrays = split_parameters(arrays, 'regressor')
    regressor = AffineRegressor.from_parameters(regressor_arrays) if regressor_arrays else None
    return net, ParamVector.from_arrays(net_arrays), regressor


def load_regressor(path: Path):
    from metastab.rigid import AffineRegressor
    from metastab.session_manager import load_parameters, split_parameters

    arrays = split_parameters(load_parameters(path), 'regressor')
    if not arrays:
        raise CheckpointFormatError(f"{path}: no 'regressor.' parameters")
    return AffineRegressor.from_parameters(arrays)


def video_directories(root: Path) -> List[Path]:
    if not root.is_dir():
        raise FrameSequenceError(f"not a directory: {root}")
    videos = sorted(d for d in root.iterdir() if (d / 'unstable').is_dir())
    if not videos:
        raise FrameSequenceError(f"no <video>/unstable directories in {root}")
    return videos


def load_dataset(root: Path, with_stable: bool, workers: Optional[int] = None) -> List[Tuple[str, FrameSequence, Optional[FrameSequence]]]:
    dataset = []
    for folder in video_directories(root):
        unstable = load_sequence(folder / 'unstable', 'unstable', workers)
        stable = load_sequence(folder / 'stable', 'stable', workers) if with_stable else None
        sidecar = folder / 'transforms.json'
        if sidecar.exists():
            jitter = load_transforms(sidecar)['jitter']
            if len(jitter) != len(unstable):
                raise FrameSequenceError(f"{sidecar}: {len(jitter)} transforms for {len(unstable)} frames")
        dataset.append((folder.name, unstable, stable))
    return dataset


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_synth_data(args) -> int:
    from metastab.synthetic import ShakeProfile, make_dataset, synthesize_pair

    apply_overrides({'synthetic': {
        'frames': args.frames, 'height': args.height, 'width': args.width, 'sprites': args.sprites,
        'rotation_std': args.rotation_std, 'translation_std': args.translation_std,
        'jitter_correlation': args.jitter_correlation,
    }})
    seed = int(get_setting('runtime', 'seed'))
    profile = load_profile(args.profile) if args.profile else shake_profile_from_settings(seed)
    if args.source:
        source = load_sequence(args.source, 'stable', args.workers)
        pairs = [
            synthesize_pair(source, ShakeProfile(**{**profile.to_dict(), 'seed': profile.seed * 1000 + i}),
                            video_id=f'video_{i:03d}')
            for i in range(args.videos)
        ]
    else:
        pairs = make_dataset(
            args.videos,
            int(get_setting('synthetic', 'frames')),
            int(get_setting('synthetic', 'height')),
            int(get_setting('synthetic', 'width')),
            profile,
        )

    for pair in pairs:
        folder = args.out / pair.video_id
        save_sequence(pair.stable, folder / 'stable', args.workers)
        save_sequence(pair.unstable, folder / 'unstable', args.workers)
        export_transforms(folder / 'transforms.json', pair.jitter, pair.smooth_path,
                          {'video_id': pair.video_id, 'frames': len(pair)})
        export_profile(pair.profile, folder / 'profile.json')
        logger.info("Wrote %s (%d frames)", folder, len(pair))

    _write_manifest(args, [args.source] if args.source else [], [args.out],
                    {'videos': [p.video_id for p in pairs], 'profile': profile.to_dict()})
    return 0


def cmd_train_affine(args) -> int:
    from metastab.rigid import evaluate_regressor, train_affine_regressor
    from metastab.session_manager import merge_parameters, save_parameters

    apply_overrides({'regressor': {
        'steps': args.steps, 'samples': args.samples, 'batch_size': args.batch_size,
        'learning_rate': args.learning_rate, 'frame_size': args.frame_size, 'flow_source': args.flow_source,
    }})
    seed = int(get_setting('runtime', 'seed'))
    result = train_affine_regressor(seed=seed, progress=_progress())
    errors = evaluate_regressor(result.regressor, count=args.eval_count,
                                frame_size=int(get_setting('regressor', 'frame_size')), seed=seed + 1)
    logger.info("Held-out error: %.3f° rotation, %.3f px translation", errors['theta_deg'], errors['translation_px'])
    save_parameters(merge_parameters(regressor=result.regressor.params), args.out)
    _write_manifest(args, [], [args.out], {
        'initial_loss': result.initial_loss, 'final_loss': result.final_loss, 'held_out': errors,
    })
    return 0


def cmd_meta_train(args) -> int:
    from metastab.meta import TaskSampler, meta_train, pretrain_supervised
    from metastab.session_manager import merge_parameters, save_parameters
    from metastab.synthesis import SynthesisNet

    synthesis = dict(ARCHITECTURE_PRESETS[args.arch]) if args.arch else {}
    synthesis['base_width'] = args.base_width
    apply_overrides({
        'synthesis': synthesis,
        'meta': {
            'outer_steps': args.steps, 'meta_batch': args.meta_batch, 'adaptation_steps': args.adapt_steps,
            'alpha': args.alpha, 'beta': args.beta, 'patch': args.patch, 'frames_per_task': args.frames_per_task,
            'first_order': False if args.second_order else None,
            'disjoint_outer_windows': True if args.disjoint_outer else None,
        },
        'losses': {'lambda_s': args.lambda_s, 'lambda_p': args.lambda_p},
    })
    config = meta_config_from_settings()
    weights = loss_weights_from_settings()

    if args.init:
        net, params, bundled = load_model(args.init)
        if net.k != config.k:
            raise ConfigError(f"--init model has k={net.k}, settings ask for k={config.k}")
    else:
        net = SynthesisNet(config.k, config.base_width, float(get_setting('synthesis', 'leaky_slope')))
        params, bundled = net.init_parameters(seed=config.seed), None
    regressor = load_regressor(args.regressor) if args.regressor else bundled
    params, start_step, resumed = _resume(args, net, params)

    dataset = load_dataset(args.data, with_stable=True, workers=args.workers)
    sampler = TaskSampler(dataset, config.T, config.k, config.patch, config.seed)
    logger.info("Training on %d videos, %d parameters, %s", len(dataset), params.num_parameters,
                'conventional' if args.conventional else ('first-order' if config.first_order else 'second-order'))

    extra: Dict = {'meta_config': config.to_dict(), 'lambda_s': weights.lambda_s, 'lambda_p': weights.lambda_p}
    if resumed:
        extra['resumed_from'] = {'step': resumed['step'], 'filename': resumed['filename'], 'hash': resumed['hash']}
    if args.conventional:
        params = pretrain_supervised(net, params, sampler, config.outer_steps, config.beta,
                                     batch=config.meta_batch, progress=_progress())
        extra['mode'] = 'conventional'
    else:
        log_path = args.log or args.out.with_name(args.out.name + '.jsonl')
        result = meta_train(net, params, sampler, config, weights, regressor=regressor, log_path=log_path,
                            checkpoint_dir=args.checkpoint_dir, workers=args.workers, progress=_progress(),
                            start_step=start_step)
        params = result.params
        extra.update({'mode': 'meta', 'outer_losses': result.outer_losses, 'skipped_steps': result.skipped_steps})

    groups = {'net': params}
    if regressor is not None:
        groups['regressor'] = regressor.params
    save_parameters(merge_parameters(**groups), args.out)
    inputs = [args.data] + [p for p in (args.init, args.regressor, args.config) if p]
    _write_manifest(args, inputs, [args.out], extra)
    return 0


def _resume(args, net, params: ParamVector):
    """θ and the step count of the newest readable checkpoint when --resume is set"""
    from metastab.session_manager import latest_checkpoint, load_parameters
    from metastab.synthesis import SynthesisNet

    if not args.resume:
        return params, 0, None
    if args.checkpoint_dir is None:
        raise ConfigError("--resume needs --checkpoint-dir")
    if args.conventional:
        raise ConfigError("--resume applies to meta-training, not --conventional")
    newest = latest_checkpoint(args.checkpoint_dir)
    if newest is None:
        logger.warning("No readable checkpoint in %s; starting from step 0", args.checkpoint_dir)
        return params, 0, None
    arrays = load_parameters(newest['path'])
    if SynthesisNet.from_parameters(arrays).layer_shapes() != net.layer_shapes():
        raise ConfigError(f"{newest['filename']} does not match the configured architecture")
    logger.info("Resuming from %s (step %d)", newest['filename'], newest['step'])
    return ParamVector.from_arrays(arrays), newest['step'], newest


def _weights_for(args) -> LossWeights:
    base = loss_weights_from_settings(args.category)
    return LossWeights(
        base.lambda_s if args.lambda_s is None else args.lambda_s,
        base.lambda_p if args.lambda_p is None else args.lambda_p,
    )


def cmd_stabilize(args) -> int:
    from metastab.meta import meta_inference

    apply_overrides({
        'meta': {'alpha': args.alpha, 'inference_patch': args.patch, 'adapt_samples': args.adapt_samples},
        'synthesis': {'recurrent': args.recurrent},
    })
    net, params, regressor = load_model(args.model)
    if args.k is not None and args.k != net.k:
        raise ConfigError(f"--k {args.k} does not match the model's k={net.k}")
    if args.regressor:
        regressor = load_regressor(args.regressor)
    weights = _weights_for(args)
    video = load_sequence(args.video, 'unstable', args.workers)

    result = meta_inference(
        net, params, video, args.adapt_steps, get_setting('meta', 'adapt_samples'), weights,
        regressor=regressor, recurrent=bool(get_setting('synthesis', 'recurrent')),
        seed=int(get_setting('runtime', 'seed')), workers=args.workers, progress=_progress(),
    )
    save_sequence(result.video.with_role('synthesized'), args.out, args.workers)
    with JsonLinesLog(args.out / 'adapt_log.jsonl') as log:
        for record in result.history:
            log.write(record)
    inputs = [args.model, args.video] + [p for p in (args.regressor, args.config) if p]
    _write_manifest(args, inputs, [args.out], {
        'adapt_steps': args.adapt_steps, 'tasks': result.tasks,
        'lambda_s': weights.lambda_s, 'lambda_p': weights.lambda_p, 'k': net.k,
    })
    return 0


def _cached_flows(args, stabilized: FrameSequence):
    """Global flows of the stabilized video from --flow-dir, recomputed when its manifest is stale"""
    from metastab.exporters import read_flow, write_flow
    from metastab.metrics import global_flows
    from metastab.session_manager import content_hash, save_manifest, validate_manifest

    cache = args.flow_dir
    manifest_file = cache / 'manifest.json'
    current = content_hash([args.stabilized])['combined']
    files = sorted(cache.glob('*.msfl'))
    if manifest_file.exists():
        manifest = json.loads(manifest_file.read_text())
        if validate_manifest(manifest) and manifest['inputs']['combined'] == current \
                and len(files) == len(stabilized) - 1:
            logger.info("Reusing %d cached flows from %s", len(files), cache)
            return [read_flow(f) for f in files]
        logger.info("Flow cache %s is stale; recomputing", cache)

    for stale in files:
        stale.unlink()
    flows = global_flows(stabilized, args.workers)
    for t, flow in enumerate(flows):
        write_flow(cache / f'{t:06d}.msfl', flow)
    save_manifest(manifest_file, args.subcommand, snapshot_settings(), int(get_setting('runtime', 'seed')),
                  inputs=[args.stabilized], outputs=[cache], extra={'pairs': len(flows)})
    return flows


def cmd_evaluate(args) -> int:
    from metastab.metrics import evaluate

    original = load_sequence(args.original, 'unstable', args.workers)
    stabilized = load_sequence(args.stabilized, 'synthesized', args.workers)
    flows = _cached_flows(args, stabilized) if args.flow_dir else None
    report = evaluate(original, stabilized, args.stability_reduce, args.distortion_reduce, args.workers, flows=flows)
    export_report_json(report, args.out)
    for row in summarize_report(report):
        print(f"{row['status']} {row['metric']:<11} {row['value']:.4f}")
    _write_manifest(args, [args.original, args.stabilized], [args.out],
                    {'stability': report.stability, 'cropping': report.cropping, 'distortion': report.distortion})
    return 0


def cmd_ablate(args) -> int:
    from metastab import experiments
    from metastab.meta import TaskSampler

    wanted = [e.strip() for e in args.experiments.split(',') if e.strip()]
    unknown = sorted(set(wanted) - set(EXPERIMENTS))
    if unknown:
        raise ConfigError(f"unknown experiments {unknown}; expected {list(EXPERIMENTS)}")
    if 'finetune' in wanted and not args.baseline:
        raise ConfigError("the finetune experiment needs --baseline (meta-train --conventional)")
    apply_overrides({'meta': {'adapt_samples': args.adapt_samples}})

    net, params, regressor = load_model(args.model)
    if args.regressor:
        regressor = load_regressor(args.regressor)
    videos = [u for _, u, _ in load_dataset(args.data, with_stable=False, workers=args.workers)][:args.videos]
    seed = int(get_setting('runtime', 'seed'))
    samples = get_setting('meta', 'adapt_samples')
    summary: Dict = {}

    if 'trend' in wanted:
        summary['adaptation_trend'] = experiments.adaptation_trend(
            net, params, videos, adapt_samples=samples, weights=loss_weights_from_settings(),
            regressor=regressor, seed=seed, workers=args.workers)
    if 'weights' in wanted:
        summary['loss_weights'] = experiments.loss_weight_sweep(
            net, params, videos, adapt_samples=samples, regressor=regressor, seed=seed, workers=args.workers)
    if 'finetune' in wanted:
        baseline_net, baseline, _ = load_model(args.baseline)
        if baseline_net.layer_shapes() != net.layer_shapes():
            raise ConfigError("--baseline architecture differs from --model")
        sampler = TaskSampler([(v, None) for v in videos], int(get_setting('meta', 'frames_per_task')),
                              net.k, int(get_setting('meta', 'patch')), seed + 1)
        summary['meta_vs_finetune'] = experiments.meta_vs_finetune(
            net, params, baseline, sampler.sample(args.tasks), float(get_setting('meta', 'alpha')),
            weights=loss_weights_from_settings(), regressor=regressor)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(summary, indent=2))
    inputs = [args.model, args.data] + [p for p in (args.baseline, args.regressor, args.config) if p]
    _write_manifest(args, inputs, [args.out], {'experiments': wanted})
    return 0


COMMANDS = {
    'synth-data': cmd_synth_data,
    'train-affine': cmd_train_affine,
    'meta-train': cmd_meta_train,
    'stabilize': cmd_stabilize,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    reset_settings()
    try:
        if args.config:
            load_settings_file(args.config)
        apply_overrides({'runtime': {
            'seed': args.seed, 'workers': args.workers, 'precision': args.precision,
            'log_level': args.log_level, 'progress': False if args.no_progress else None,
        }})
        configure_logging(get_setting('runtime', 'log_level'))
        precision = get_setting('runtime', 'precision')
        if precision not in ('float32', 'float64'):
            raise ConfigError(f"runtime.precision must be float32 or float64, got '{precision}'")
        with ad.default_dtype(precision):
            return COMMANDS[args.subcommand](args)
    except (MetaStabError, OSError) as e:
        record = {'error': type(e).__name__, 'message': str(e), 'subcommand': args.subcommand}
        diagnostics = getattr(e, 'diagnostics', None)
        if diagnostics:
            record['diagnostics'] = diagnostics
        print(json.dumps(record, default=str), file=sys.stderr)
        return 1


def main():
    sys.exit(run())
