"""
Evaluation Harness
File-level commands behind the CLI: encode, decode, eval, R-D sweep,
synthetic scenes and line-file tooling. Tabular output is CSV.
"""

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm

from errors import ImageMismatchError
from gaussian_model import load_cameras, load_ply, save_ply
from image_metrics import psnr, read_png, ssim
from line_prior import ExtractionConfig, convert_obj_lines, extract_lines_from_points, load_lines, save_lines
from pipeline import METHODS, EncodeConfig, decode_bytes, encode_scene
from renderer import render
from run_ledger import RunLedger
from synth import SynthSpec, generate_scene, image_name, write_scene

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ['view', 'psnr', 'ssim']
SWEEP_COLUMNS = ['method', 'factor', 'line_fraction', 'sketch_ratio', 'sketch_bytes', 'patch_bytes',
                 'total_bytes', 'psnr', 'ssim', 'error']


@dataclass
class SweepSpec:
    factors: list = field(default_factory=lambda: [2, 4, 6, 8, 10, 15, 20])
    line_fractions: list = field(default_factory=lambda: [1.0])
    method: str = 'sketch_patch'
    workers: int = 1
    show_progress: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}', expected one of {METHODS}")
        if not self.factors or any(not f >= 1 for f in self.factors):
            raise ValueError(f"pruning factors must be >= 1, got {self.factors}")
        if not self.line_fractions or any(not 0 < f <= 1 for f in self.line_fractions):
            raise ValueError(f"line fractions must be in (0, 1], got {self.line_fractions}")

    def points(self):
        """(factor, line_fraction) pairs in sweep order"""
        factors = [1.0] if self.method == 'sketch_only' else self.factors
        fractions = [1.0] if self.method == 'prune_retrain' else self.line_fractions
        return [(float(f), float(lf)) for lf in fractions for f in factors]


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def write_bytes(path, data):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(data)


def load_truth_images(images_dir, count):
    """Reference images view_000.png .. for `count` cameras"""
    images = []
    for i in range(count):
        path = os.path.join(images_dir, image_name(i))
        if not os.path.exists(path):
            raise ImageMismatchError(f"missing reference image {path} for camera {i}")
        images.append(read_png(read_bytes(path)))
    return images


def load_views(cameras_path, images_dir):
    """Paired (cameras, images), or ([], None) when no cameras are given"""
    if not cameras_path:
        return [], None
    cameras = load_cameras(read_bytes(cameras_path))
    if not images_dir:
        raise ImageMismatchError("cameras given without a reference image directory")
    return cameras, load_truth_images(images_dir, len(cameras))


def rows_to_csv(rows, columns):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction='ignore', lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def write_csv(path, rows, columns):
    write_bytes(path, rows_to_csv(rows, columns).encode('utf-8'))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_views(cloud, cameras, truths, loss_cfg=None):
    """
    Per-view PSNR/SSIM of a cloud against reference images

    Returns:
        One row per view followed by a 'mean' row
    """
    if len(cameras) != len(truths):
        raise ImageMismatchError(f"{len(cameras)} cameras but {len(truths)} reference images")
    rows = []
    for i, (cam, truth) in enumerate(zip(cameras, truths)):
        if (truth.width, truth.height) != (cam.width, cam.height):
            raise ImageMismatchError(f"view {i}: image is {truth.width}x{truth.height}, "
                                     f"camera is {cam.width}x{cam.height}")
        image = render(cloud, cam)
        rows.append({'view': i, 'psnr': psnr(image, truth), 'ssim': ssim(image, truth, loss_cfg)})
    if rows:
        rows.append({'view': 'mean',
                     'psnr': float(np.mean([r['psnr'] for r in rows])),
                     'ssim': float(np.mean([r['ssim'] for r in rows]))})
    return rows


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_encode(ply_path, out_path, lines_path=None, cfg=None, cameras_path=None, images_dir=None,
               report_path=None, ledger=None):
    """
    Encode a PLY scene into an SKPH file and write its JSON report

    Args:
        ply_path: Input 3DGS PLY
        out_path: SKPH output path
        lines_path: Optional segment file
        cfg: EncodeConfig
        cameras_path: Camera JSON (needed when retraining)
        images_dir: Reference images paired with the cameras
        report_path: Report JSON path (defaults to out_path + '.json')
        ledger: RunLedger

    Returns:
        Report dict
    """
    cfg = cfg or EncodeConfig()
    cloud = load_ply(read_bytes(ply_path))
    lines = load_lines(read_bytes(lines_path)) if lines_path else []
    cameras, truths = load_views(cameras_path, images_dir)

    result = encode_scene(cloud, lines, cfg, cameras, truths, ledger)
    write_bytes(out_path, result.data)
    report_path = report_path or out_path + '.json'
    write_bytes(report_path, json.dumps(result.report, indent=2, sort_keys=True, default=str).encode('utf-8'))
    logger.info(f"✅ Wrote {out_path} ({len(result.data)} bytes) and {report_path}")
    return result.report


def cmd_decode(skph_path, out_path):
    """SKPH file to a standard 3DGS PLY; returns the decoded splat count"""
    cloud = decode_bytes(read_bytes(skph_path))
    write_bytes(out_path, save_ply(cloud))
    logger.info(f"✅ Decoded {len(cloud)} splats to {out_path}")
    return len(cloud)


def cmd_eval(ply_path, cameras_path, images_dir, out_csv=None, loss_cfg=None):
    """Render a PLY model from each camera and score it against the reference images"""
    cloud = load_ply(read_bytes(ply_path))
    cameras, truths = load_views(cameras_path, images_dir)
    rows = evaluate_views(cloud, cameras, truths, loss_cfg)
    if out_csv:
        write_csv(out_csv, rows, EVAL_COLUMNS)
    if rows:
        logger.info(f"📋 Mean PSNR {rows[-1]['psnr']:.2f} dB, SSIM {rows[-1]['ssim']:.4f} over {len(cameras)} views")
    return rows


def _sweep_point(job):
    cloud, lines, cameras, truths, cfg, factor, line_fraction = job
    row = {'method': cfg.method, 'factor': factor, 'line_fraction': line_fraction,
           'sketch_ratio': '', 'sketch_bytes': '', 'patch_bytes': '', 'total_bytes': '',
           'psnr': '', 'ssim': '', 'error': ''}
    try:
        point_cfg = replace(cfg, prune_factor=factor, line_fraction=line_fraction)
        result = encode_scene(cloud, lines, point_cfg, cameras, truths, RunLedger())
        sizes = result.report['bytes']
        row.update(sketch_ratio=result.report['sketch_ratio'], sketch_bytes=sizes['sketch_bytes'],
                   patch_bytes=sizes['patch_bytes'], total_bytes=sizes['total_bytes'])
        if cameras:
            mean = evaluate_views(decode_bytes(result.data), cameras, truths, cfg.loss)[-1]
            row.update(psnr=mean['psnr'], ssim=mean['ssim'])
    except Exception as e:
        logger.error(f"❌ Sweep point factor={factor} line_fraction={line_fraction} failed: {e}")
        row['error'] = str(e)
    return row


def cmd_sweep(ply_path, lines_path=None, cameras_path=None, images_dir=None, spec=None, cfg=None, out_csv=None):
    """
    Rate-distortion sweep over pruning factors and line fractions

    Returns:
        One row per point; failed points carry the error and the sweep continues
    """
    spec = spec or SweepSpec()
    cfg = replace(cfg or EncodeConfig(), method=spec.method)
    cloud = load_ply(read_bytes(ply_path))
    lines = load_lines(read_bytes(lines_path)) if lines_path else []
    cameras, truths = load_views(cameras_path, images_dir)

    jobs = [(cloud, lines, cameras, truths, cfg, f, lf) for f, lf in spec.points()]
    logger.info(f"📋 Sweeping {len(jobs)} points ({spec.method})")
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(tqdm(pool.map(_sweep_point, jobs), total=len(jobs), desc="sweep",
                             disable=not spec.show_progress))
    else:
        rows = [_sweep_point(job) for job in tqdm(jobs, desc="sweep", disable=not spec.show_progress)]

    failed = sum(1 for r in rows if r['error'])
    if failed:
        logger.warning(f"⚠️  {failed} of {len(rows)} sweep points failed")
    if out_csv:
        write_csv(out_csv, rows, SWEEP_COLUMNS)
    return rows


def cmd_synth(spec, out_dir):
    """Generate a synthetic scene into out_dir; returns the written paths"""
    scene = generate_scene(spec or SynthSpec())
    return write_scene(scene, out_dir)


def cmd_extract_lines(ply_path, out_path, cfg=None):
    """Extract segments from dense collinear splat runs and write the segment file"""
    cloud = load_ply(read_bytes(ply_path))
    lines = extract_lines_from_points(cloud, cfg or ExtractionConfig())
    write_bytes(out_path, save_lines(lines).encode('utf-8'))
    logger.info(f"✅ Extracted {len(lines)} segments to {out_path}")
    return len(lines)


def cmd_convert_lines(obj_path, out_path):
    """Convert an OBJ line reconstruction into the segment file format"""
    lines = convert_obj_lines(read_bytes(obj_path).decode('utf-8'))
    write_bytes(out_path, save_lines(lines).encode('utf-8'))
    logger.info(f"✅ Converted {len(lines)} segments to {out_path}")
    return len(lines)


def load_csv(path):
    """CSV rows as dicts of strings"""
    with open(path, newline='') as f:
        return list(csv.DictReader(f))

