"""
SKPH Hybrid Container
Bit-exact serialisation of the header, all Sketch line blocks and the quantized Patch block
(see format.md for the byte layout)
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from errors import (BadMagicError, ChecksumError, CorruptBlockError, TruncatedSectionError,
                    VersionMismatchError)
from gaussian_model import GaussianCloud, MAX_SH_DEGREE
from patch_codec import (CODEBOOK_SIZE, TAGS, Codebook, QuantizedPatchBlock, dequantize_patch,
                         from_half_array, patch_block_nbytes, tag_widths, to_half_array)
from sketch_codec import ATTRIBUTE_MODELS, MAX_DEGREE, PolyModel, SketchLineBlock, block_nbytes, decode_group

logger = logging.getLogger(__name__)

MAGIC = b'SKPH'
VERSION = 1
# magic + version + sh_degree + header length + CRC32 trailer
OVERHEAD_BYTES = 4 + 1 + 1 + 2 + 4
MAX_HEADER_BYTES = 0xFFFF


@dataclass
class HybridHeader:
    sh_degree: int = 3
    config: dict = field(default_factory=dict)
    sketch_blocks: int = 0
    sketch_splats: int = 0
    patch_splats: int = 0
    version: int = VERSION

    def payload(self):
        """Canonical key-sorted JSON text of the configuration snapshot and counts"""
        document = {
            'config': self.config,
            'counts': {'patch_splats': self.patch_splats, 'sketch_blocks': self.sketch_blocks,
                       'sketch_splats': self.sketch_splats},
        }
        return json.dumps(document, sort_keys=True, separators=(',', ':'), allow_nan=False).encode('utf-8')

    @classmethod
    def from_payload(cls, payload, sh_degree, version=VERSION):
        document = json.loads(payload.decode('utf-8'))
        counts = document['counts']
        return cls(sh_degree=sh_degree, config=document['config'], sketch_blocks=int(counts['sketch_blocks']),
                   sketch_splats=int(counts['sketch_splats']), patch_splats=int(counts['patch_splats']),
                   version=version)


@dataclass(eq=False)
class HybridModel:
    header: HybridHeader
    sketch_blocks: list
    patch_block: QuantizedPatchBlock

    @classmethod
    def assemble(cls, sketch_blocks, patch_block, config=None, sh_degree=3):
        """Build a model whose header counts match its blocks"""
        header = HybridHeader(
            sh_degree=sh_degree,
            config=dict(config or {}),
            sketch_blocks=len(sketch_blocks),
            sketch_splats=sum(b.count for b in sketch_blocks),
            patch_splats=patch_block.count,
        )
        return cls(header, list(sketch_blocks), patch_block)

    @property
    def splat_count(self):
        return sum(b.count for b in self.sketch_blocks) + self.patch_block.count

    def validate(self):
        h = self.header
        if h.sketch_blocks != len(self.sketch_blocks):
            raise CorruptBlockError(f"header lists {h.sketch_blocks} sketch blocks, found {len(self.sketch_blocks)}")
        if h.sketch_splats != sum(b.count for b in self.sketch_blocks):
            raise CorruptBlockError("header sketch splat count does not match the blocks")
        if h.patch_splats != self.patch_block.count:
            raise CorruptBlockError("header patch splat count does not match the patch block")
        if self.patch_block.sh_degree != h.sh_degree:
            raise CorruptBlockError("patch block sh_degree differs from the header")
        for block in self.sketch_blocks:
            block.validate()
        self.patch_block.validate()
        return self

    def equals(self, other):
        return (self.header == other.header
                and len(self.sketch_blocks) == len(other.sketch_blocks)
                and all(a.equals(b) for a, b in zip(self.sketch_blocks, other.sketch_blocks))
                and self.patch_block.equals(other.patch_block))


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _pack_block(block, out):
    if not 0 <= block.line_id <= 0xFFFFFFFF:
        raise ValueError(f"line id {block.line_id} does not fit in u32")
    out += struct.pack('<I', block.line_id)
    out += np.concatenate([block.p_start, block.p_end]).astype('<f4').tobytes()
    out += struct.pack('<I', block.count)
    out += block.t_q.astype('<u2').tobytes()
    for model in block.models:
        out += struct.pack('<BB', model.degree, model.k)
        out += model.coeffs.astype('<f4').tobytes()


def _pack_patch(block, out):
    out += struct.pack('<I', block.count)
    out += block.positions.astype('<u2').tobytes()
    for position, tag in enumerate(TAGS):
        entries = block.codebooks[tag].entries
        out += struct.pack('<BH', position, len(entries))
        out += to_half_array(entries).astype('<u2').tobytes()
    for tag in TAGS:
        out += block.indices[tag].astype(np.uint8).tobytes()


def write_hybrid(model):
    """
    Serialise a model

    Args:
        model: HybridModel

    Returns:
        SKPH bytes ending in the CRC32 of everything before it
    """
    model.validate()
    payload = model.header.payload()
    if len(payload) > MAX_HEADER_BYTES:
        raise ValueError(f"header payload of {len(payload)} bytes exceeds {MAX_HEADER_BYTES}")

    out = bytearray(MAGIC)
    out += struct.pack('<BBH', model.header.version, model.header.sh_degree, len(payload))
    out += payload
    out += struct.pack('<I', len(model.sketch_blocks))
    for block in model.sketch_blocks:
        _pack_block(block, out)
    _pack_patch(model.patch_block, out)
    out += struct.pack('<I', zlib.crc32(out) & 0xFFFFFFFF)

    logger.debug(f"Wrote SKPH: {len(model.sketch_blocks)} blocks, {model.patch_block.count} patch splats, "
                 f"{len(out)} bytes")
    return bytes(out)


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

class _Reader:
    """Bounded little-endian cursor; running past the end raises TruncatedSectionError"""

    def __init__(self, data, offset, limit):
        self.data = data
        self.offset = offset
        self.limit = limit

    def take(self, size, section):
        if self.offset + size > self.limit:
            raise TruncatedSectionError(section, self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, section):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def array(self, dtype, count, section):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count, section), dtype=dtype, count=count)


def _read_block(reader, index):
    section = f'sketch block {index}'
    start = reader.offset
    line_id, = reader.unpack('<I', section)
    endpoints = reader.array('<f4', 6, section).astype(np.float64)
    count, = reader.unpack('<I', section)
    t_q = reader.array('<u2', count, section).astype(np.uint16)

    models = []
    for name, expected_k in ATTRIBUTE_MODELS:
        degree, k = reader.unpack('<BB', f'{section} {name} model')
        if k != expected_k or degree > MAX_DEGREE:
            raise CorruptBlockError(f"{section}: {name} model has degree {degree}, k {k}", reader.offset - 2)
        coeffs = reader.array('<f4', (degree + 1) * k, f'{section} {name} model').astype(np.float64)
        if not np.all(np.isfinite(coeffs)):
            raise CorruptBlockError(f"{section}: non-finite {name} coefficients", start)
        models.append(PolyModel(degree, coeffs.reshape(degree + 1, k)))

    if not (np.all(np.isfinite(endpoints)) and np.linalg.norm(endpoints[3:] - endpoints[:3]) > 0):
        raise CorruptBlockError(f"{section}: invalid endpoints", start + 4)
    return SketchLineBlock(line_id, endpoints[:3], endpoints[3:], t_q, *models)


def _read_patch(reader, sh_degree):
    count, = reader.unpack('<I', 'patch block')
    start = reader.offset
    positions = reader.array('<u2', 3 * count, 'patch positions').reshape(count, 3).astype(np.uint16)
    if not np.all(np.isfinite(from_half_array(positions))):
        raise CorruptBlockError("patch positions hold non-finite half floats", start)

    codebooks = {}
    for position, tag in enumerate(TAGS):
        start = reader.offset
        tag_byte, size = reader.unpack('<BH', f'{tag} codebook')
        if tag_byte != position or not 1 <= size <= CODEBOOK_SIZE:
            raise CorruptBlockError(f"{tag} codebook has tag {tag_byte}, size {size}", start)
        entries = from_half_array(reader.array('<u2', size, f'{tag} codebook'))
        if not np.all(np.isfinite(entries)) or np.any(np.diff(entries) <= 0):
            raise CorruptBlockError(f"{tag} codebook entries are not finite and ascending", start + 3)
        codebooks[tag] = Codebook(tag, entries)

    widths = tag_widths(sh_degree)
    indices = {}
    for tag in TAGS:
        start = reader.offset
        values = reader.array(np.uint8, count * widths[tag], f'{tag} indices').reshape(count, widths[tag])
        if values.size and int(values.max()) >= len(codebooks[tag]):
            raise CorruptBlockError(f"{tag} index outside its codebook", start)
        indices[tag] = values.copy()

    return QuantizedPatchBlock(positions, codebooks, indices, sh_degree)


def read_hybrid(data):
    """
    Parse SKPH bytes

    Args:
        data: File bytes

    Returns:
        HybridModel; the CRC is verified before any payload is parsed
    """
    data = bytes(data)
    if len(data) < len(MAGIC) or data[:4] != MAGIC:
        raise BadMagicError("not an SKPH file", 0)
    if len(data) < 5:
        raise TruncatedSectionError('version', 4)
    if data[4] != VERSION:
        raise VersionMismatchError(f"unsupported version {data[4]}, expected {VERSION}", 4)
    if len(data) < OVERHEAD_BYTES:
        raise TruncatedSectionError('header', len(data))

    limit = len(data) - 4
    stored, = struct.unpack_from('<I', data, limit)
    computed = zlib.crc32(data[:limit]) & 0xFFFFFFFF
    if stored != computed:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:08x}, computed {computed:08x}", limit)

    reader = _Reader(data, 5, limit)
    sh_degree, header_length = reader.unpack('<BH', 'header')
    if sh_degree > MAX_SH_DEGREE:
        raise CorruptBlockError(f"sh_degree {sh_degree} out of range", 5)
    payload_offset = reader.offset
    payload = reader.take(header_length, 'header payload')
    try:
        header = HybridHeader.from_payload(payload, sh_degree)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CorruptBlockError(f"unreadable header payload: {e}", payload_offset)

    block_count, = reader.unpack('<I', 'sketch block count')
    blocks = [_read_block(reader, i) for i in range(block_count)]
    patch = _read_patch(reader, sh_degree)

    if reader.offset != limit:
        raise CorruptBlockError(f"{limit - reader.offset} trailing bytes before the CRC", reader.offset)

    model = HybridModel(header, blocks, patch)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Decoding and accounting
# ---------------------------------------------------------------------------

def decode_full(model):
    """
    Decode every splat of a model

    Args:
        model: HybridModel

    Returns:
        GaussianCloud: Sketch groups in block order, then the Patch splats
    """
    sh_degree = model.header.sh_degree
    parts = [decode_group(block, sh_degree) for block in model.sketch_blocks]
    parts.append(dequantize_patch(model.patch_block))
    return GaussianCloud.concat(parts, sh_degree=sh_degree)


def storage_breakdown(model):
    """
    Byte accounting of a model's serialised form

    Returns:
        Dict with header_bytes, sketch_bytes, patch_bytes, overhead_bytes and total_bytes;
        the first four sum to the total
    """
    header_bytes = len(model.header.payload())
    sketch_bytes = 4 + sum(block_nbytes(b) for b in model.sketch_blocks)
    patch_bytes = patch_block_nbytes(model.patch_block)
    return {
        'header_bytes': header_bytes,
        'sketch_bytes': sketch_bytes,
        'patch_bytes': patch_bytes,
        'overhead_bytes': OVERHEAD_BYTES,
        'total_bytes': header_bytes + sketch_bytes + patch_bytes + OVERHEAD_BYTES,
    }


def expected_file_size(model):
    return storage_breakdown(model)['total_bytes']
