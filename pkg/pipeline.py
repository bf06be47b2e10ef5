"""
Encode Pipeline
partition -> sketch encode -> IQR reclassification -> prune -> retrain -> quantize -> container
"""

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from container import HybridModel, decode_full, read_hybrid, storage_breakdown, write_hybrid
from errors import CodecError, PipelineStageError
from gaussian_model import GaussianCloud, raw_ply_nbytes, sh_rest_width
from image_metrics import LossConfig
from line_prior import filter_short_segments, select_longest
from partition import PartitionConfig, PartitionResult, SketchGroup, iqr_scale_filter, partition
from patch_codec import QuantizeConfig, prune_uniform, quantize_patch
from retrain import RetrainConfig, retrain_patch
from run_ledger import RunLedger
from sketch_codec import decode_group, encode_group

logger = logging.getLogger(__name__)

METHODS = ('sketch_patch', 'prune_retrain', 'sketch_only')

# knobs that never change the encoded bytes
_RUNTIME_ONLY = {'workers', 'show_progress'}


def raw_splat_nbytes(sh_degree=3):
    """binary32 storage of one splat without normals (236 bytes at degree 3)"""
    return 4 * (3 + 3 + 4 + 1 + 3 + sh_rest_width(sh_degree))


@dataclass
class EncodeConfig:
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    quantize: QuantizeConfig = field(default_factory=QuantizeConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    prune_factor: float = 1.0
    prune_seed: int = 0
    line_fraction: float = 1.0
    retrain_enabled: bool = False
    method: str = 'sketch_patch'

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}', expected one of {METHODS}")
        if not self.prune_factor >= 1:
            raise ValueError(f"prune_factor must be >= 1, got {self.prune_factor}")
        if not 0 < self.line_fraction <= 1:
            raise ValueError(f"line_fraction must be in (0, 1], got {self.line_fraction}")

    def to_header(self):
        """Canonical dict of every setting that affects the output bytes"""
        def section(config):
            return {k: v for k, v in asdict(config).items() if k not in _RUNTIME_ONLY}

        return {
            'method': self.method,
            'line_fraction': self.line_fraction,
            'prune_factor': self.prune_factor,
            'prune_seed': self.prune_seed,
            'retrain_enabled': self.retrain_enabled,
            'partition': section(self.partition),
            'quantize': section(self.quantize),
            'retrain': section(self.retrain),
            'loss': section(self.loss),
        }

    @classmethod
    def from_header(cls, header):
        def build(kind, values):
            known = {f.name for f in fields(kind)}
            return kind(**{k: v for k, v in values.items() if k in known})

        return cls(
            partition=build(PartitionConfig, header.get('partition', {})),
            quantize=build(QuantizeConfig, header.get('quantize', {})),
            retrain=build(RetrainConfig, header.get('retrain', {})),
            loss=build(LossConfig, header.get('loss', {})),
            prune_factor=header.get('prune_factor', 1.0),
            prune_seed=header.get('prune_seed', 0),
            line_fraction=header.get('line_fraction', 1.0),
            retrain_enabled=header.get('retrain_enabled', False),
            method=header.get('method', 'sketch_patch'),
        )


@dataclass
class EncodeResult:
    model: HybridModel
    data: bytes
    report: dict
    partition: PartitionResult = None


@contextmanager
def pipeline_stage(ledger, name, **details):
    """Run one stage under the ledger; any failure becomes PipelineStageError(name)"""
    try:
        with ledger.stage(name, **details) as stage_details:
            yield stage_details
    except PipelineStageError:
        raise
    except Exception as e:
        logger.error(f"❌ Stage {name} failed: {e}")
        raise PipelineStageError(name, e) from e


def refine_groups(cloud, groups, lines_by_id, cfg):
    """
    Encode every group, apply the decoded-scale IQR filter and re-encode the survivors

    Returns:
        (blocks, final groups, indices moved to Patch)
    """
    blocks = []
    kept_groups = []
    moved = []
    for group in groups:
        seg = lines_by_id[group.line_id]
        block = encode_group(cloud, group, seg, cfg.min_group_size)
        kept, reclassified = iqr_scale_filter(cloud, group, decode_group(block, cloud.sh_degree), seg, cfg)
        if reclassified:
            if len(kept) < cfg.min_group_size:
                moved.extend(group.member_indices)
                continue
            position = {index: t for index, t in zip(group.member_indices, group.member_t)}
            group = SketchGroup(group.line_id, kept, [position[i] for i in kept])
            block = encode_group(cloud, group, seg, cfg.min_group_size)
            moved.extend(reclassified)
        blocks.append(block)
        kept_groups.append(group)
    return blocks, kept_groups, moved


def encode_scene(cloud, lines, cfg=None, cameras=None, truths=None, ledger=None):
    """
    Encode a splat scene into the SKPH hybrid format

    Args:
        cloud: GaussianCloud
        lines: LineSegment3D priors (may be empty)
        cfg: EncodeConfig
        cameras: Training cameras, required when retraining
        truths: Reference images paired with cameras
        ledger: RunLedger recording each stage

    Returns:
        EncodeResult with the model, file bytes and report
    """
    cfg = cfg or EncodeConfig()
    ledger = ledger or RunLedger()
    cloud.validate()
    lines = list(lines or [])

    if cfg.method == 'prune_retrain':
        lines = []
    if lines:
        lines = select_longest(filter_short_segments(lines, cloud.bounding_box_diagonal()), cfg.line_fraction)

    with pipeline_stage(ledger, 'partition', lines=len(lines), splats=len(cloud)) as details:
        if lines:
            parts = partition(cloud, lines, cfg.partition)
        else:
            parts = PartitionResult(groups=[], patch_indices=list(range(len(cloud))))
        parts.validate(len(cloud))
        details['groups'] = len(parts.groups)
        details['sketch_splats'] = parts.sketch_count

    with pipeline_stage(ledger, 'sketch_encode', groups=len(parts.groups)) as details:
        lines_by_id = {}
        for seg in lines:
            lines_by_id.setdefault(seg.id, seg)
        blocks, groups, moved = refine_groups(cloud, parts.groups, lines_by_id, cfg.partition)
        details['reclassified'] = len(moved)

    sketch_count = sum(len(g) for g in groups)
    patch_indices = sorted(set(parts.patch_indices) | set(moved))

    factor = 1.0 if cfg.method == 'sketch_only' else cfg.prune_factor
    with pipeline_stage(ledger, 'prune', factor=factor, candidates=len(patch_indices)) as details:
        kept_patch = prune_uniform(patch_indices, factor, cfg.prune_seed)
        details['kept'] = len(kept_patch)

    patch_cloud = cloud.subset(kept_patch)
    retrain_losses = []
    if cfg.retrain_enabled and cfg.method != 'sketch_only':
        with pipeline_stage(ledger, 'retrain', steps=cfg.retrain.steps) as details:
            if not cameras or truths is None:
                raise CodecError("retraining requires cameras and reference images")
            sketch_decoded = GaussianCloud.concat([decode_group(b, cloud.sh_degree) for b in blocks],
                                                  sh_degree=cloud.sh_degree)
            result = retrain_patch(sketch_decoded, patch_cloud, cameras, truths, cfg.retrain, cfg.loss)
            patch_cloud = result.patch
            retrain_losses = result.losses
            details['best_step'] = result.best_step
            if retrain_losses:
                details['first_loss'] = retrain_losses[0]
                details['last_loss'] = retrain_losses[-1]

    with pipeline_stage(ledger, 'quantize', splats=len(patch_cloud)):
        patch_block = quantize_patch(patch_cloud, np.arange(len(patch_cloud)), cfg.quantize.seed, cfg.quantize)

    with pipeline_stage(ledger, 'container') as details:
        model = HybridModel.assemble(blocks, patch_block, cfg.to_header(), cloud.sh_degree)
        data = write_hybrid(model)
        details['bytes'] = len(data)

    report = build_report(cloud, model, data, sketch_count, len(patch_indices), len(moved), retrain_losses)
    report['run_id'] = ledger.run_id
    report['ledger'] = ledger.get_trail(run_id=ledger.run_id)
    logger.info(f"✅ Encoded {len(cloud)} splats into {len(data)} bytes "
                f"({report['bytes']['total_ratio']:.2%} of the PLY, sketch ratio {report['sketch_ratio']:.3f})")
    return EncodeResult(model, data, report, parts)


def build_report(cloud, model, data, sketch_count, patch_candidates, reclassified, retrain_losses=()):
    """Counts, byte breakdown and digest of one encode"""
    per_splat = raw_splat_nbytes(cloud.sh_degree)
    patch_kept = model.patch_block.count
    breakdown = storage_breakdown(model)
    raw_ply = raw_ply_nbytes(len(cloud), cloud.sh_degree)

    def ratio(part, whole):
        return part / whole if whole else 0.0

    total = sketch_count + patch_kept
    report = {
        'counts': {
            'input_splats': len(cloud),
            'sketch_blocks': len(model.sketch_blocks),
            'sketch_splats': sketch_count,
            'patch_splats': patch_candidates,
            'patch_kept': patch_kept,
            'reclassified': reclassified,
            'decoded_splats': model.splat_count,
        },
        'sketch_ratio': ratio(sketch_count, total),
        'bytes': {
            'raw_ply_bytes': raw_ply,
            'raw_sketch_bytes': sketch_count * per_splat,
            'sketch_bytes': breakdown['sketch_bytes'],
            'raw_patch_bytes': patch_candidates * per_splat,
            'pruned_patch_raw_bytes': patch_kept * per_splat,
            'patch_bytes': breakdown['patch_bytes'],
            'header_bytes': breakdown['header_bytes'],
            'overhead_bytes': breakdown['overhead_bytes'],
            'total_bytes': len(data),
            'sketch_ratio_of_raw': ratio(breakdown['sketch_bytes'], sketch_count * per_splat),
            'patch_ratio_of_raw': ratio(breakdown['patch_bytes'], patch_candidates * per_splat),
            'total_ratio': ratio(len(data), raw_ply),
        },
        'sha256': hashlib.sha256(data).hexdigest(),
        'config': model.header.config,
    }
    if retrain_losses:
        head = retrain_losses[:100]
        tail = retrain_losses[-100:]
        report['retrain'] = {'steps': len(retrain_losses), 'leading_mean_loss': float(np.mean(head)),
                             'trailing_mean_loss': float(np.mean(tail))}
    if breakdown['total_bytes'] != len(data):
        logger.warning(f"⚠️  Byte accounting {breakdown['total_bytes']} differs from file size {len(data)}")
    return report


def decode_bytes(data):
    """SKPH bytes to a GaussianCloud"""
    return decode_full(read_hybrid(data))
