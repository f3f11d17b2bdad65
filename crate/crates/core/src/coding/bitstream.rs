//! Bitstream container: header plus per-level, per-channel RLGR segments.
//!
//! All multi-byte fields are little-endian; the full layout is documented
//! in `docs/FORMATS.md`. Geometry is not carried in the stream; the header
//! stores a checksum of the sorted voxel codes so a decode against the
//! wrong geometry fails loudly.

use crate::coding::rlgr;
use crate::error::{Error, Result};
use crate::predictor::PredictorKind;

pub const MAGIC: [u8; 4] = *b"PCAC";
pub const FORMAT_VERSION: u16 = 1;

/// Quantized coefficient symbols: root first, then one vector per level.
/// Within a level, symbols are coefficient-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPyramid {
    pub channels: usize,
    pub root: Vec<i64>,
    pub high: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub depth: u8,
    pub root_level: u8,
    pub predictor: PredictorKind,
    pub channels: u8,
    pub step: f64,
    pub channel_scale: Vec<f64>,
    pub geometry_checksum: u64,
    pub point_count: u64,
    /// Per-level coefficient counts per channel, root first.
    pub level_counts: Vec<u64>,
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Checksum binding a stream to its geometry: depth byte followed by the
/// sorted Morton codes.
pub fn geometry_checksum(depth: u8, sorted_codes: &[u64]) -> u64 {
    fnv1a64(
        std::iter::once(depth)
            .chain(sorted_codes.iter().flat_map(|c| c.to_le_bytes())),
    )
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serializes header and RLGR-coded payload. Also returns the payload bit
/// count per level (segment prefixes included, header excluded).
pub fn write_bitstream(
    header: &StreamHeader,
    pyramid: &QuantizedPyramid,
) -> Result<(Vec<u8>, Vec<u64>)> {
    let channels = header.channels as usize;
    if pyramid.channels != channels {
        return Err(Error::Shape(format!(
            "pyramid has {} channels, header says {channels}",
            pyramid.channels
        )));
    }
    let expected_levels = (header.depth - header.root_level) as usize + 1;
    if header.level_counts.len() != expected_levels || pyramid.high.len() + 1 != expected_levels {
        return Err(Error::Shape(format!(
            "expected {expected_levels} levels, header has {} and pyramid {}",
            header.level_counts.len(),
            pyramid.high.len() + 1
        )));
    }
    let per_channel: u64 = header.level_counts.iter().sum();
    if per_channel != header.point_count {
        return Err(Error::Shape(format!(
            "level counts sum to {per_channel}, expected {} (critical sampling)",
            header.point_count
        )));
    }

    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(header.depth);
    w.u8(header.root_level);
    w.u8(header.predictor.id());
    w.u8(header.channels);
    w.u16(0); // reserved
    w.f64(header.step);
    for c in 0..channels {
        w.f64(header.channel_scale.get(c).copied().unwrap_or(1.0));
    }
    w.u64(header.geometry_checksum);
    w.u64(header.point_count);
    w.u16(expected_levels as u16);
    for &count in &header.level_counts {
        w.u64(count);
    }

    let symbols_of_channel = |level: &[i64], count: usize, c: usize| -> Vec<i64> {
        (0..count).map(|k| level[k * channels + c]).collect()
    };
    let mut per_level_bits = Vec::with_capacity(header.level_counts.len());
    for (li, count) in header.level_counts.iter().enumerate() {
        let count = *count as usize;
        let level = if li == 0 { &pyramid.root } else { &pyramid.high[li - 1] };
        if level.len() != count * channels {
            return Err(Error::Shape(format!(
                "level {li} has {} symbols, header count says {}",
                level.len(),
                count * channels
            )));
        }
        let mut level_bits = 0u64;
        for c in 0..channels {
            let symbols = symbols_of_channel(level, count, c);
            let seg = rlgr::rlgr_encode(&symbols);
            w.u32(seg.len() as u32);
            w.u32(fnv1a64(seg.iter().copied()) as u32);
            level_bits += 8 * (seg.len() as u64 + 8);
            w.bytes.extend_from_slice(&seg);
        }
        per_level_bits.push(level_bits);
    }
    Ok((w.bytes, per_level_bits))
}

/// Parses and validates a stream header without decoding the payload.
pub fn read_header(bytes: &[u8]) -> Result<(StreamHeader, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            msg: format!("bad magic {magic:02x?}"),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let depth = r.u8("depth")?;
    let root_level = r.u8("root level")?;
    if root_level >= depth {
        return Err(Error::Decode {
            offset: 7,
            msg: format!("root level {root_level} not below depth {depth}"),
        });
    }
    let predictor_id = r.u8("predictor id")?;
    let predictor = PredictorKind::from_id(predictor_id).ok_or(Error::Decode {
        offset: 8,
        msg: format!("unknown predictor id {predictor_id}"),
    })?;
    let channels = r.u8("channel count")?;
    if channels == 0 {
        return Err(Error::Decode {
            offset: 9,
            msg: "zero channels".into(),
        });
    }
    r.u16("reserved")?;
    let step = r.f64("step")?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Decode {
            offset: 12,
            msg: format!("invalid quantizer step {step}"),
        });
    }
    let mut channel_scale = Vec::with_capacity(channels as usize);
    for _ in 0..channels {
        channel_scale.push(r.f64("channel scale")?);
    }
    let geometry_checksum = r.u64("geometry checksum")?;
    let point_count = r.u64("point count")?;
    let levels = r.u16("level count")? as usize;
    if levels != (depth - root_level) as usize + 1 {
        return Err(Error::Decode {
            offset: r.pos - 2,
            msg: format!("level count {levels} inconsistent with depth/root"),
        });
    }
    let mut level_counts = Vec::with_capacity(levels);
    for _ in 0..levels {
        level_counts.push(r.u64("level coefficient count")?);
    }
    let sum: u64 = level_counts.iter().sum();
    if sum != point_count {
        return Err(Error::Decode {
            offset: r.pos,
            msg: format!("level counts sum to {sum}, expected {point_count}"),
        });
    }
    Ok((
        StreamHeader {
            depth,
            root_level,
            predictor,
            channels,
            step,
            channel_scale,
            geometry_checksum,
            point_count,
            level_counts,
        },
        r.pos,
    ))
}

/// Decodes header and payload; the inverse of [`write_bitstream`].
pub fn read_bitstream(bytes: &[u8]) -> Result<(StreamHeader, QuantizedPyramid)> {
    let (header, mut pos) = read_header(bytes)?;
    let channels = header.channels as usize;
    let mut r = Reader { bytes, pos };
    let mut root = Vec::new();
    let mut high = Vec::new();
    for (li, count) in header.level_counts.iter().enumerate() {
        let count = *count as usize;
        let mut level = vec![0i64; count * channels];
        for c in 0..channels {
            let len = r.u32("segment length")? as usize;
            let checksum = r.u32("segment checksum")?;
            let seg_offset = r.pos;
            let seg = r.take(len, "segment payload")?;
            if fnv1a64(seg.iter().copied()) as u32 != checksum {
                return Err(Error::Decode {
                    offset: seg_offset,
                    msg: format!("segment checksum mismatch at level {li} channel {c}"),
                });
            }
            let symbols = rlgr::rlgr_decode(seg, count).map_err(|e| match e {
                Error::Decode { offset, msg } => Error::Decode {
                    offset: seg_offset + offset,
                    msg,
                },
                other => other,
            })?;
            for (k, s) in symbols.into_iter().enumerate() {
                level[k * channels + c] = s;
            }
        }
        if li == 0 {
            root = level;
        } else {
            high.push(level);
        }
    }
    pos = r.pos;
    if pos != bytes.len() {
        return Err(Error::Decode {
            offset: pos,
            msg: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok((
        header,
        QuantizedPyramid {
            channels,
            root,
            high,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_header(counts: Vec<u64>, channels: u8) -> StreamHeader {
        StreamHeader {
            depth: 6,
            root_level: 6 - (counts.len() as u8 - 1),
            predictor: PredictorKind::Linear,
            channels,
            step: 4.0,
            channel_scale: vec![1.0; channels as usize],
            geometry_checksum: 0xfeedbeef,
            point_count: counts.iter().sum(),
            level_counts: counts,
        }
    }

    #[test]
    fn round_trip_random_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let counts = vec![7u64, 15, 40, 100];
        let channels = 3usize;
        let header = sample_header(counts.clone(), channels as u8);
        let pyramid = QuantizedPyramid {
            channels,
            root: (0..counts[0] as usize * channels)
                .map(|_| rng.random_range(-50..50))
                .collect(),
            high: counts[1..]
                .iter()
                .map(|&c| {
                    (0..c as usize * channels)
                        .map(|_| rng.random_range(-10..10))
                        .collect()
                })
                .collect(),
        };
        let (bytes, _) = write_bitstream(&header, &pyramid).unwrap();
        let (h2, p2) = read_bitstream(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, pyramid);
    }

    #[test]
    fn minimal_single_point_stream() {
        let header = StreamHeader {
            depth: 3,
            root_level: 0,
            predictor: PredictorKind::None,
            channels: 3,
            step: 1.0,
            channel_scale: vec![1.0; 3],
            geometry_checksum: 1,
            point_count: 1,
            level_counts: vec![1, 0, 0, 0],
        };
        let pyramid = QuantizedPyramid {
            channels: 3,
            root: vec![5, -2, 0],
            high: vec![vec![], vec![], vec![]],
        };
        let (bytes, _) = write_bitstream(&header, &pyramid).unwrap();
        let (h2, p2) = read_bitstream(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, pyramid);
    }

    #[test]
    fn corruption_is_detected() {
        let header = sample_header(vec![4, 12], 1);
        let pyramid = QuantizedPyramid {
            channels: 1,
            root: vec![3, -1, 0, 9],
            high: vec![vec![1, 0, 0, -2, 0, 0, 0, 4, 0, 1, -1, 7]],
        };
        let (mut bytes, _) = write_bitstream(&header, &pyramid).unwrap();
        // tampered magic
        let mut tampered = bytes.clone();
        tampered[0] ^= 0xff;
        assert!(matches!(read_bitstream(&tampered), Err(Error::Decode { .. })));
        // corrupted payload byte
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        assert!(matches!(read_bitstream(&bytes), Err(Error::Decode { .. })));
        // truncation
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_bitstream(short), Err(Error::Decode { .. })));
    }
}
