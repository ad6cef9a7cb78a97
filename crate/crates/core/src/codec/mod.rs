//! The `.c3gs` container: a fixed little-endian header followed by seven
//! independently zlib-compressed sections. See `docs/format.md` for the
//! byte-level layout.

mod bitpack;
mod morton;

pub use bitpack::{index_bits, packed_len, BitReader, BitWriter};
pub use morton::{grid_coords, morton_key, morton_order, Aabb, MORTON_BITS};

use std::fmt;
use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use thiserror::Error;

use crate::quant::{CompressedScene, QuantError, QuantRange, QuantRanges};
use crate::scene::sh::{basis_count, degree_for_basis};

pub const MAGIC: &[u8; 4] = b"C3GS";
pub const VERSION: u16 = 1;
/// Flag bit set when Gaussians are stored in Morton order.
pub const FLAG_MORTON: u16 = 1;
/// Header size in bytes, trailing CRC included.
pub const HEADER_LEN: usize = 196;
const SECTION_ENTRY_LEN: usize = 13;
const TABLE_OFFSET: usize = 101;
/// Scalars per Gaussian in the uncompressed 3DGS layout.
pub const BASELINE_SCALARS: usize = 59;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Section {
    Positions = 1,
    Opacity = 2,
    Eta = 3,
    ColorIndex = 4,
    ShapeIndex = 5,
    ColorCodebook = 6,
    ShapeCodebook = 7,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Positions,
        Section::Opacity,
        Section::Eta,
        Section::ColorIndex,
        Section::ShapeIndex,
        Section::ColorCodebook,
        Section::ShapeCodebook,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Positions => "positions",
            Section::Opacity => "opacity",
            Section::Eta => "eta",
            Section::ColorIndex => "color_index",
            Section::ShapeIndex => "shape_index",
            Section::ColorCodebook => "color_codebook",
            Section::ShapeCodebook => "shape_codebook",
        }
    }

    fn from_id(id: u8) -> Option<Section> {
        Section::ALL.into_iter().find(|s| *s as u8 == id)
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not a c3gs container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0} (expected {VERSION})")]
    Version(u16),
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("checksum mismatch in section {0}")]
    SectionChecksum(Section),
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated { what: String, needed: usize, available: usize },
    #[error("section {section}: {reason}")]
    Section { section: Section, reason: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Scene(#[from] QuantError),
}

/// One entry of the section table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionInfo {
    pub section: Section,
    pub raw_len: u32,
    pub compressed_len: u32,
    pub crc32: u32,
}

/// Decoded fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub flags: u16,
    pub count: u32,
    pub color_clustered: u32,
    pub color_total: u32,
    pub shape_clustered: u32,
    pub shape_total: u32,
    pub sh_degree: u8,
    pub color_index_bits: u8,
    pub shape_index_bits: u8,
    pub aabb_min: [f32; 3],
    pub aabb_max: [f32; 3],
    pub ranges: QuantRanges,
    pub sections: Vec<SectionInfo>,
}

impl Header {
    pub fn morton_ordered(&self) -> bool {
        self.flags & FLAG_MORTON != 0
    }

    pub fn payload_len(&self) -> usize {
        self.sections.iter().map(|s| s.compressed_len as usize).sum()
    }
}

/// Order of the Gaussians written by [`encode_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Morton,
    AsIs,
}

fn deflate(raw: &[u8]) -> Vec<u8> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(9));
    enc.write_all(raw).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

fn inflate(section: Section, data: &[u8], raw_len: usize) -> Result<Vec<u8>, CodecError> {
    if raw_len == 0 {
        if !data.is_empty() {
            return Err(CodecError::Section { section, reason: "empty section carries data".into() });
        }
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(raw_len);
    ZlibDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| CodecError::Section { section, reason: format!("inflate failed: {e}") })?;
    if out.len() != raw_len {
        return Err(CodecError::Section {
            section,
            reason: format!("inflated to {} bytes, header says {raw_len}", out.len()),
        });
    }
    Ok(out)
}

fn pack_codes(codes: &[u16], width: u8) -> Vec<u8> {
    let mut w = BitWriter::new();
    w.write_all(codes.iter().map(|&c| c as u32), width);
    w.finish()
}

fn pack_indices(idx: &[u32], width: u8) -> Vec<u8> {
    let mut w = BitWriter::new();
    w.write_all(idx.iter().copied(), width);
    w.finish()
}

/// Raw (uncompressed) section payloads of a scene, in table order.
fn raw_sections(c: &CompressedScene, color_bits: u8, shape_bits: u8) -> Vec<Vec<u8>> {
    let r = &c.ranges;
    let mut positions = Vec::with_capacity(c.len() * 6);
    for axis in 0..3 {
        for p in &c.positions {
            positions.extend_from_slice(&p[axis].to_le_bytes());
        }
    }
    let mut shape = BitWriter::new();
    shape.write_all(c.shape_rotation.iter().map(|&v| v as u32), r.rotation.bits);
    shape.write_all(c.shape_scale.iter().map(|&v| v as u32), r.scale.bits);
    vec![
        positions,
        pack_codes(&c.opacity, r.opacity.bits),
        pack_codes(&c.eta, r.eta.bits),
        pack_indices(&c.color_index, color_bits),
        pack_indices(&c.shape_index, shape_bits),
        pack_codes(&c.color_codebook, r.color.bits),
        shape.finish(),
    ]
}

fn push_range(out: &mut Vec<u8>, r: &QuantRange) {
    out.extend_from_slice(&r.min.to_le_bytes());
    out.extend_from_slice(&r.max.to_le_bytes());
}

/// Serializes `c` in Morton order.
pub fn encode(c: &CompressedScene) -> Result<Vec<u8>, CodecError> {
    encode_with(c, Ordering::Morton)
}

pub fn encode_with(c: &CompressedScene, ordering: Ordering) -> Result<Vec<u8>, CodecError> {
    c.validate()?;
    let degree = degree_for_basis(c.sh_basis)
        .ok_or_else(|| CodecError::Header(format!("{} SH basis functions is not a full degree", c.sh_basis)))?;
    let decoded = c.decoded_positions();
    let aabb = Aabb::from_points(&decoded);
    let (c, flags) = match ordering {
        Ordering::Morton => (c.permuted(&morton_order(&decoded, &aabb)), FLAG_MORTON),
        Ordering::AsIs => (c.clone(), 0),
    };
    let color_bits = index_bits(c.color_count());
    let shape_bits = index_bits(c.shape_count());
    let raw = raw_sections(&c, color_bits, shape_bits);
    let compressed: Vec<Vec<u8>> = raw.par_iter().map(|r| deflate(r)).collect();

    let r = &c.ranges;
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&flags.to_le_bytes());
    for v in [c.len(), c.color_clustered, c.color_count(), c.shape_clustered, c.shape_count()] {
        h.extend_from_slice(&(v as u32).to_le_bytes());
    }
    h.push(degree as u8);
    h.extend_from_slice(&[r.opacity.bits, r.eta.bits, r.color.bits, r.rotation.bits, r.scale.bits]);
    h.extend_from_slice(&[color_bits, shape_bits]);
    for v in aabb.min.iter().chain(&aabb.max) {
        h.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for range in [&r.opacity, &r.eta, &r.color, &r.rotation, &r.scale] {
        push_range(&mut h, range);
    }
    h.push(Section::ALL.len() as u8);
    debug_assert_eq!(h.len(), TABLE_OFFSET);
    for ((s, raw), comp) in Section::ALL.iter().zip(&raw).zip(&compressed) {
        h.push(*s as u8);
        h.extend_from_slice(&(raw.len() as u32).to_le_bytes());
        h.extend_from_slice(&(comp.len() as u32).to_le_bytes());
        h.extend_from_slice(&crc32fast::hash(comp).to_le_bytes());
    }
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(h.len(), HEADER_LEN);
    for comp in compressed {
        h.extend_from_slice(&comp);
    }
    Ok(h)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

/// Parses and verifies the fixed header.
pub fn decode_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() < 8 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CodecError::BadMagic);
        }
        return Err(CodecError::Truncated { what: "header".into(), needed: HEADER_LEN, available: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CodecError::Version(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated { what: "header".into(), needed: HEADER_LEN, available: bytes.len() });
    }
    let stored = u32::from_le_bytes(bytes[HEADER_LEN - 4..HEADER_LEN].try_into().unwrap());
    if crc32fast::hash(&bytes[..HEADER_LEN - 4]) != stored {
        return Err(CodecError::HeaderChecksum);
    }
    let mut cur = Cursor { bytes, pos: 6 };
    let flags = cur.u16();
    let count = cur.u32();
    let color_clustered = cur.u32();
    let color_total = cur.u32();
    let shape_clustered = cur.u32();
    let shape_total = cur.u32();
    let sh_degree = cur.u8();
    if sh_degree > 3 {
        return Err(CodecError::Header(format!("SH degree {sh_degree} above 3")));
    }
    let bits: [u8; 5] = cur.take();
    let color_index_bits = cur.u8();
    let shape_index_bits = cur.u8();
    let aabb_min = [cur.f32(), cur.f32(), cur.f32()];
    let aabb_max = [cur.f32(), cur.f32(), cur.f32()];
    let mut range = |b: u8| -> Result<QuantRange, CodecError> {
        let (min, max) = (cur.f32(), cur.f32());
        Ok(QuantRange::new(b, min, max)?)
    };
    let ranges = QuantRanges {
        opacity: range(bits[0])?,
        eta: range(bits[1])?,
        color: range(bits[2])?,
        rotation: range(bits[3])?,
        scale: range(bits[4])?,
    };
    let section_count = cur.u8() as usize;
    if section_count != Section::ALL.len() {
        return Err(CodecError::Header(format!("{section_count} sections, expected {}", Section::ALL.len())));
    }
    let mut sections = Vec::with_capacity(section_count);
    for expected in Section::ALL {
        let id = cur.u8();
        let section = Section::from_id(id).ok_or_else(|| CodecError::Header(format!("unknown section id {id}")))?;
        if section != expected {
            return Err(CodecError::Header(format!("section {section} out of order")));
        }
        sections.push(SectionInfo { section, raw_len: cur.u32(), compressed_len: cur.u32(), crc32: cur.u32() });
    }
    debug_assert_eq!(cur.pos, TABLE_OFFSET + SECTION_ENTRY_LEN * Section::ALL.len());
    if color_clustered > color_total || shape_clustered > shape_total {
        return Err(CodecError::Header("clustered count exceeds codebook size".into()));
    }
    if color_index_bits != index_bits(color_total as usize) || shape_index_bits != index_bits(shape_total as usize) {
        return Err(CodecError::Header("index width does not match codebook size".into()));
    }
    Ok(Header {
        version,
        flags,
        count,
        color_clustered,
        color_total,
        shape_clustered,
        shape_total,
        sh_degree,
        color_index_bits,
        shape_index_bits,
        aabb_min,
        aabb_max,
        ranges,
        sections,
    })
}

fn read_codes(section: Section, raw: &[u8], count: usize, width: u8) -> Result<Vec<u32>, CodecError> {
    let mut r = BitReader::new(raw);
    (0..count)
        .map(|_| r.read(width).ok_or_else(|| CodecError::Section { section, reason: "too few codes".into() }))
        .collect()
}

fn expect_len(section: Section, raw: &[u8], expected: usize) -> Result<(), CodecError> {
    if raw.len() == expected {
        Ok(())
    } else {
        Err(CodecError::Section { section, reason: format!("{} bytes, expected {expected}", raw.len()) })
    }
}

/// Inverse of [`encode`]; Gaussians come back in stored order.
pub fn decode(bytes: &[u8]) -> Result<CompressedScene, CodecError> {
    let h = decode_header(bytes)?;
    let mut offset = HEADER_LEN;
    let mut slices = Vec::with_capacity(h.sections.len());
    for info in &h.sections {
        let len = info.compressed_len as usize;
        if bytes.len() < offset + len {
            return Err(CodecError::Truncated {
                what: format!("section {}", info.section),
                needed: offset + len,
                available: bytes.len(),
            });
        }
        let data = &bytes[offset..offset + len];
        if crc32fast::hash(data) != info.crc32 {
            return Err(CodecError::SectionChecksum(info.section));
        }
        slices.push((info, data));
        offset += len;
    }
    if offset != bytes.len() {
        return Err(CodecError::Header(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let raw: Vec<Vec<u8>> = slices
        .par_iter()
        .map(|(info, data)| inflate(info.section, data, info.raw_len as usize))
        .collect::<Result<_, _>>()?;

    let n = h.count as usize;
    let basis = basis_count(h.sh_degree as usize);
    let d = basis * 3;
    let kc = h.color_total as usize;
    let ks = h.shape_total as usize;
    let r = &h.ranges;
    let narrow = |v: Vec<u32>| v.into_iter().map(|x| x as u16).collect::<Vec<u16>>();

    expect_len(Section::Positions, &raw[0], n * 6)?;
    let axis = |a: usize, i: usize| u16::from_le_bytes([raw[0][(a * n + i) * 2], raw[0][(a * n + i) * 2 + 1]]);
    let positions = (0..n).map(|i| [axis(0, i), axis(1, i), axis(2, i)]).collect();
    expect_len(Section::Opacity, &raw[1], packed_len(n, r.opacity.bits))?;
    expect_len(Section::Eta, &raw[2], packed_len(n, r.eta.bits))?;
    expect_len(Section::ColorIndex, &raw[3], packed_len(n, h.color_index_bits))?;
    expect_len(Section::ShapeIndex, &raw[4], packed_len(n, h.shape_index_bits))?;
    expect_len(Section::ColorCodebook, &raw[5], packed_len(kc * d, r.color.bits))?;
    let shape_bits = ks * 4 * r.rotation.bits as usize + ks * 3 * r.scale.bits as usize;
    expect_len(Section::ShapeCodebook, &raw[6], shape_bits.div_ceil(8))?;

    let mut shape = BitReader::new(&raw[6]);
    let mut shape_read = |count: usize, width: u8| -> Result<Vec<u16>, CodecError> {
        (0..count)
            .map(|_| {
                shape.read(width).map(|v| v as u16).ok_or(CodecError::Section {
                    section: Section::ShapeCodebook,
                    reason: "too few codes".into(),
                })
            })
            .collect()
    };
    let shape_rotation = shape_read(ks * 4, r.rotation.bits)?;
    let shape_scale = shape_read(ks * 3, r.scale.bits)?;

    let scene = CompressedScene {
        sh_basis: basis,
        positions,
        opacity: narrow(read_codes(Section::Opacity, &raw[1], n, r.opacity.bits)?),
        eta: narrow(read_codes(Section::Eta, &raw[2], n, r.eta.bits)?),
        color_index: read_codes(Section::ColorIndex, &raw[3], n, h.color_index_bits)?,
        shape_index: read_codes(Section::ShapeIndex, &raw[4], n, h.shape_index_bits)?,
        color_codebook: narrow(read_codes(Section::ColorCodebook, &raw[5], kc * d, r.color.bits)?),
        color_clustered: h.color_clustered as usize,
        shape_rotation,
        shape_scale,
        shape_clustered: h.shape_clustered as usize,
        ranges: h.ranges,
    };
    scene.validate()?;
    Ok(scene)
}

/// Compressed size breakdown of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub header_bytes: usize,
    pub sections: Vec<SectionInfo>,
    pub total_bytes: usize,
    /// `original_count × 59 × 4` bytes.
    pub uncompressed_bytes: usize,
    /// `uncompressed_bytes / total_bytes`.
    pub ratio: f64,
}

/// Size statistics of an encoded container against the uncompressed 3DGS
/// layout of a scene with `original_count` Gaussians.
pub fn report(container: &[u8], original_count: usize) -> Result<SizeReport, CodecError> {
    let h = decode_header(container)?;
    let total = HEADER_LEN + h.payload_len();
    let uncompressed = original_count * BASELINE_SCALARS * 4;
    Ok(SizeReport {
        header_bytes: HEADER_LEN,
        sections: h.sections,
        total_bytes: total,
        uncompressed_bytes: uncompressed,
        ratio: uncompressed as f64 / total as f64,
    })
}
