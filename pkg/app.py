"""
Sketch/Patch Splat Codec - Command Line
Entry point for encode, decode, eval, sweep, synth, extract-lines and convert-lines
"""

import argparse
import logging
import sys

from errors import PipelineStageError, SketchPatchError
from harness import (SweepSpec, cmd_convert_lines, cmd_decode, cmd_encode, cmd_eval, cmd_extract_lines,
                     cmd_sweep, cmd_synth)
from image_metrics import LossConfig
from line_prior import ExtractionConfig
from logging_setup import configure_logging
from partition import PartitionConfig
from patch_codec import QuantizeConfig
from pipeline import METHODS, EncodeConfig
from retrain import RetrainConfig
from run_ledger import RunLedger
from synth import SynthSpec

logger = logging.getLogger(__name__)


def _common_options():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parent.add_argument('--log-json', action='store_true', help='structured JSON log lines')
    parent.add_argument('--ledger', default=':memory:', help='sqlite run ledger path')
    return parent


def _codec_options():
    """Every EncodeConfig knob as a flag"""
    parent = argparse.ArgumentParser(add_help=False)

    group = parent.add_argument_group('partition')
    group.add_argument('--radius', type=float, default=None, help='search radius (default 0.005 x bbox diagonal)')
    group.add_argument('--eta', type=float, default=PartitionConfig.eta)
    group.add_argument('--ransac-iters', type=int, default=PartitionConfig.ransac_iters)
    group.add_argument('--refit-rounds', type=int, default=PartitionConfig.refit_rounds)
    group.add_argument('--min-group-size', type=int, default=PartitionConfig.min_group_size)
    group.add_argument('--fit-degree', type=int, default=PartitionConfig.fit_degree)
    group.add_argument('--iqr-multiplier', type=float, default=PartitionConfig.iqr_multiplier)
    group.add_argument('--alignment-cos-min', type=float, default=PartitionConfig.alignment_cos_min)
    group.add_argument('--partition-seed', type=int, default=PartitionConfig.seed)
    group.add_argument('--workers', type=int, default=1, help='parallel line/codebook workers')

    group = parent.add_argument_group('patch')
    group.add_argument('--method', choices=METHODS, default='sketch_patch')
    group.add_argument('--line-fraction', type=float, default=1.0, help='keep the longest fraction of lines')
    group.add_argument('--prune-factor', type=float, default=1.0)
    group.add_argument('--prune-seed', type=int, default=0)
    group.add_argument('--codebook-size', type=int, default=QuantizeConfig.codebook_size)
    group.add_argument('--kmeans-iters', type=int, default=QuantizeConfig.kmeans_iters)
    group.add_argument('--kmeans-init', type=int, default=QuantizeConfig.n_init)
    group.add_argument('--quantize-seed', type=int, default=QuantizeConfig.seed)

    group = parent.add_argument_group('retraining')
    group.add_argument('--retrain', action='store_true', help='retrain Patch splats (needs --cameras/--images)')
    group.add_argument('--steps', type=int, default=RetrainConfig.steps)
    group.add_argument('--lr-position', type=float, default=RetrainConfig.lr_position)
    group.add_argument('--lr-opacity', type=float, default=RetrainConfig.lr_opacity)
    group.add_argument('--lr-scale', type=float, default=RetrainConfig.lr_scale)
    group.add_argument('--lr-rotation', type=float, default=RetrainConfig.lr_rotation)
    group.add_argument('--lr-sh-dc', type=float, default=RetrainConfig.lr_sh_dc)
    group.add_argument('--lr-sh-rest', type=float, default=RetrainConfig.lr_sh_rest)
    group.add_argument('--lr-final-ratio', type=float, default=RetrainConfig.lr_final_ratio,
                       help='learning rates decay to this fraction by the last step')
    group.add_argument('--eval-every', type=int, default=RetrainConfig.eval_every,
                       help='steps between full-view loss checks (0 keeps the last iterate)')
    group.add_argument('--retrain-seed', type=int, default=RetrainConfig.seed)
    group.add_argument('--progress', action='store_true', help='show progress bars')

    group = parent.add_argument_group('loss')
    group.add_argument('--lambda-l1', type=float, default=LossConfig.lambda_l1)
    group.add_argument('--ssim-window', type=int, default=LossConfig.ssim_window)
    group.add_argument('--ssim-sigma', type=float, default=LossConfig.ssim_sigma)
    return parent


def build_parser():
    common = _common_options()
    codec = _codec_options()
    parser = argparse.ArgumentParser(prog='app.py', description='Sketch/Patch hybrid compression for Gaussian splats')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('encode', parents=[common, codec], help='PLY -> SKPH')
    p.add_argument('--ply', required=True)
    p.add_argument('--lines')
    p.add_argument('--cameras')
    p.add_argument('--images')
    p.add_argument('--out', required=True)
    p.add_argument('--report')

    p = sub.add_parser('decode', parents=[common], help='SKPH -> PLY')
    p.add_argument('--skph', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', parents=[common], help='per-view PSNR/SSIM CSV')
    p.add_argument('--ply', required=True)
    p.add_argument('--cameras', required=True)
    p.add_argument('--images', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--ssim-window', type=int, default=LossConfig.ssim_window)
    p.add_argument('--ssim-sigma', type=float, default=LossConfig.ssim_sigma)

    p = sub.add_parser('sweep', parents=[common, codec], help='rate-distortion sweep CSV')
    p.add_argument('--ply', required=True)
    p.add_argument('--lines')
    p.add_argument('--cameras')
    p.add_argument('--images')
    p.add_argument('--out', required=True)
    p.add_argument('--factors', type=float, nargs='+', default=[2, 4, 6, 8, 10, 15, 20])
    p.add_argument('--line-fractions', type=float, nargs='+', default=[1.0])
    p.add_argument('--sweep-workers', type=int, default=1)

    defaults = SynthSpec()
    p = sub.add_parser('synth', parents=[common], help='synthetic box-room scene')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--edges', type=int, default=defaults.edges)
    p.add_argument('--splats-per-edge', type=int, default=defaults.splats_per_edge)
    p.add_argument('--curve-degree', type=int, default=defaults.curve_degree)
    p.add_argument('--outlier-fraction', type=float, default=defaults.outlier_fraction)
    p.add_argument('--filler', type=int, default=defaults.filler)
    p.add_argument('--resolution', type=int, default=defaults.resolution)
    p.add_argument('--views', type=int, default=defaults.cameras)
    p.add_argument('--seed', type=int, default=defaults.seed)
    p.add_argument('--radius', type=float, default=defaults.radius)
    p.add_argument('--noise-sigma', type=float, default=defaults.noise_sigma)
    p.add_argument('--sh-degree', type=int, default=defaults.sh_degree)

    extraction = ExtractionConfig()
    p = sub.add_parser('extract-lines', parents=[common], help='segments from collinear splat runs')
    p.add_argument('--ply', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--inlier-radius', type=float, default=extraction.inlier_radius)
    p.add_argument('--min-inliers', type=int, default=extraction.min_inliers)
    p.add_argument('--max-lines', type=int, default=extraction.max_lines)
    p.add_argument('--iterations', type=int, default=extraction.iterations)
    p.add_argument('--seed', type=int, default=extraction.seed)

    p = sub.add_parser('convert-lines', parents=[common], help='OBJ line reconstruction -> segment file')
    p.add_argument('--obj', required=True)
    p.add_argument('--out', required=True)
    return parser


def encode_config(args):
    """EncodeConfig from parsed codec flags"""
    return EncodeConfig(
        partition=PartitionConfig(radius_r=args.radius, eta=args.eta, ransac_iters=args.ransac_iters,
                                  refit_rounds=args.refit_rounds,
                                  min_group_size=args.min_group_size, fit_degree=args.fit_degree,
                                  iqr_multiplier=args.iqr_multiplier, alignment_cos_min=args.alignment_cos_min,
                                  seed=args.partition_seed, workers=args.workers),
        quantize=QuantizeConfig(codebook_size=args.codebook_size, kmeans_iters=args.kmeans_iters,
                                n_init=args.kmeans_init, seed=args.quantize_seed, workers=args.workers),
        retrain=RetrainConfig(steps=args.steps, lr_position=args.lr_position, lr_opacity=args.lr_opacity,
                              lr_scale=args.lr_scale, lr_rotation=args.lr_rotation, lr_sh_dc=args.lr_sh_dc,
                              lr_sh_rest=args.lr_sh_rest, lr_final_ratio=args.lr_final_ratio,
                              eval_every=args.eval_every, seed=args.retrain_seed, show_progress=args.progress),
        loss=LossConfig(lambda_l1=args.lambda_l1, ssim_window=args.ssim_window, ssim_sigma=args.ssim_sigma),
        prune_factor=args.prune_factor,
        prune_seed=args.prune_seed,
        line_fraction=args.line_fraction,
        retrain_enabled=args.retrain,
        method=args.method,
    )


def dispatch(args, ledger):
    if args.command == 'encode':
        report = cmd_encode(args.ply, args.out, args.lines, encode_config(args), args.cameras, args.images,
                            args.report, ledger)
        counts = report['counts']
        print(f"✅ {counts['input_splats']} splats -> {report['bytes']['total_bytes']} bytes "
              f"({counts['sketch_splats']} sketch, {counts['patch_kept']} patch, "
              f"sketch ratio {report['sketch_ratio']:.3f})")
    elif args.command == 'decode':
        count = cmd_decode(args.skph, args.out)
        print(f"✅ Decoded {count} splats to {args.out}")
    elif args.command == 'eval':
        rows = cmd_eval(args.ply, args.cameras, args.images, args.out,
                        LossConfig(ssim_window=args.ssim_window, ssim_sigma=args.ssim_sigma))
        if rows:
            print(f"✅ Mean PSNR {rows[-1]['psnr']:.2f} dB, SSIM {rows[-1]['ssim']:.4f}")
    elif args.command == 'sweep':
        spec = SweepSpec(factors=args.factors, line_fractions=args.line_fractions, method=args.method,
                         workers=args.sweep_workers, show_progress=args.progress)
        rows = cmd_sweep(args.ply, args.lines, args.cameras, args.images, spec, encode_config(args), args.out)
        failed = sum(1 for r in rows if r['error'])
        print(f"✅ Sweep wrote {len(rows)} points to {args.out}" + (f" ({failed} failed)" if failed else ""))
    elif args.command == 'synth':
        spec = SynthSpec(edges=args.edges, splats_per_edge=args.splats_per_edge, curve_degree=args.curve_degree,
                         outlier_fraction=args.outlier_fraction, filler=args.filler, resolution=args.resolution,
                         cameras=args.views, seed=args.seed, radius=args.radius, noise_sigma=args.noise_sigma,
                         sh_degree=args.sh_degree)
        paths = cmd_synth(spec, args.out_dir)
        print(f"✅ Synthetic scene written to {args.out_dir} ({paths['ply']})")
    elif args.command == 'extract-lines':
        cfg = ExtractionConfig(inlier_radius=args.inlier_radius, min_inliers=args.min_inliers,
                               max_lines=args.max_lines, iterations=args.iterations, seed=args.seed)
        count = cmd_extract_lines(args.ply, args.out, cfg)
        print(f"✅ Extracted {count} segments to {args.out}")
    elif args.command == 'convert-lines':
        count = cmd_convert_lines(args.obj, args.out)
        print(f"✅ Converted {count} segments to {args.out}")


def run(argv=None):
    """
    Parse arguments and run one command

    Returns:
        Process exit code: 0 on success, 1 with "[stage] message" on stderr otherwise
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_json)
    ledger = RunLedger(args.ledger)
    try:
        dispatch(args, ledger)
        return 0
    except PipelineStageError as e:
        print(f"❌ {e}", file=sys.stderr)
    except (SketchPatchError, OSError, ValueError, KeyError, TypeError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"❌ [{args.command}] {e}", file=sys.stderr)
    finally:
        ledger.close()
    return 1


if __name__ == '__main__':
    sys.exit(run())
