//! Voxelized point cloud ingestion: PLY reading/writing and color transforms.
//!
//! Positions are integer voxel coordinates in `[0, 2^depth)^3`; attributes are
//! kept as 64-bit reals end to end so the transform cascade never accumulates
//! format-dependent error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::morton;

/// Integer-voxel point cloud with one multi-channel attribute vector per
/// occupied voxel. Points are kept sorted by Morton code.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizedCloud {
    /// Bits per axis; coordinates live in `[0, 2^depth)`.
    pub depth: u8,
    /// Voxel positions, unique, Morton-sorted.
    pub positions: Vec<[u32; 3]>,
    /// Row-major attributes, `positions.len() * channels` entries.
    pub attributes: Vec<f64>,
    /// Attribute channel count (3 for color).
    pub channels: usize,
}

impl VoxelizedCloud {
    /// Builds a cloud from raw points, sorting by Morton code and averaging
    /// the attributes of duplicate voxels.
    pub fn from_points(
        depth: u8,
        points: Vec<([u32; 3], Vec<f64>)>,
        channels: usize,
    ) -> Result<Self> {
        if depth == 0 || depth > morton::MAX_DEPTH {
            return Err(Error::Parameter(format!(
                "depth must be in 1..={}, got {depth}",
                morton::MAX_DEPTH
            )));
        }
        let limit = 1u32 << depth;
        let mut keyed: Vec<(u64, usize)> = Vec::with_capacity(points.len());
        for (i, (p, attr)) in points.iter().enumerate() {
            if p[0] >= limit || p[1] >= limit || p[2] >= limit {
                return Err(Error::CoordinateRange {
                    index: i,
                    x: p[0] as i64,
                    y: p[1] as i64,
                    z: p[2] as i64,
                    depth,
                });
            }
            if attr.len() != channels {
                return Err(Error::ChannelCount {
                    expected: channels,
                    got: attr.len(),
                });
            }
            keyed.push((morton::encode(p[0], p[1], p[2]), i));
        }
        keyed.sort_unstable();

        let mut positions = Vec::new();
        let mut attributes = Vec::new();
        let mut run_start = 0;
        while run_start < keyed.len() {
            let code = keyed[run_start].0;
            let mut run_end = run_start + 1;
            while run_end < keyed.len() && keyed[run_end].0 == code {
                run_end += 1;
            }
            let mut acc = vec![0.0; channels];
            for &(_, src) in &keyed[run_start..run_end] {
                for c in 0..channels {
                    acc[c] += points[src].1[c];
                }
            }
            let n = (run_end - run_start) as f64;
            let (x, y, z) = morton::decode(code);
            positions.push([x, y, z]);
            attributes.extend(acc.iter().map(|v| v / n));
            run_start = run_end;
        }
        Ok(VoxelizedCloud {
            depth,
            positions,
            attributes,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Morton codes of all positions, in storage order (ascending).
    pub fn morton_codes(&self) -> Vec<u64> {
        self.positions
            .iter()
            .map(|p| morton::encode(p[0], p[1], p[2]))
            .collect()
    }

    /// Clone with the same geometry and the given attribute buffer.
    pub fn with_attributes(&self, attributes: Vec<f64>, channels: usize) -> Result<Self> {
        if attributes.len() != self.len() * channels {
            return Err(Error::Shape(format!(
                "attribute buffer has {} entries, expected {}",
                attributes.len(),
                self.len() * channels
            )));
        }
        Ok(VoxelizedCloud {
            depth: self.depth,
            positions: self.positions.clone(),
            attributes,
            channels,
        })
    }
}

// BT.709 full-range analysis coefficients.
const KR: f64 = 0.2126;
const KG: f64 = 0.7152;
const KB: f64 = 0.0722;
const U_SCALE: f64 = 1.8556; // 2 (1 - KB)
const V_SCALE: f64 = 1.5748; // 2 (1 - KR)
const CHROMA_OFFSET: f64 = 128.0;

/// BT.709 full-range RGB -> YUV. Chroma is offset to 128 so all channels
/// stay in `[0, 255]` for 8-bit input.
pub fn rgb_to_yuv(cloud: &VoxelizedCloud) -> Result<VoxelizedCloud> {
    if cloud.channels != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            got: cloud.channels,
        });
    }
    let mut out = cloud.clone();
    for px in out.attributes.chunks_exact_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let y = KR * r + KG * g + KB * b;
        px[0] = y;
        px[1] = (b - y) / U_SCALE + CHROMA_OFFSET;
        px[2] = (r - y) / V_SCALE + CHROMA_OFFSET;
    }
    Ok(out)
}

/// Inverse of [`rgb_to_yuv`].
pub fn yuv_to_rgb(cloud: &VoxelizedCloud) -> Result<VoxelizedCloud> {
    if cloud.channels != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            got: cloud.channels,
        });
    }
    let mut out = cloud.clone();
    for px in out.attributes.chunks_exact_mut(3) {
        let (y, u, v) = (px[0], px[1] - CHROMA_OFFSET, px[2] - CHROMA_OFFSET);
        let b = y + U_SCALE * u;
        let r = y + V_SCALE * v;
        px[0] = r;
        px[1] = (y - KR * r - KB * b) / KG;
        px[2] = b;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

struct VertexLayout {
    /// (scalar type, slot): slot 0..3 = x,y,z; 3..6 = r,g,b; None = skipped.
    props: Vec<(ScalarType, Option<usize>)>,
    stride: usize,
}

/// Loads a voxelized cloud from an ASCII or binary-little-endian PLY file
/// with `x,y,z` positions and `red,green,blue` attributes. Duplicate voxels
/// are merged by averaging their attributes.
pub fn load_ply(path: impl AsRef<Path>, depth: u8) -> Result<VoxelizedCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let parse_err = |line: usize, msg: String| Error::PlyParse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    struct Lines<'a> {
        reader: &'a mut BufReader<File>,
        line_no: usize,
    }
    impl Lines<'_> {
        fn next(&mut self, path: &Path) -> Result<String> {
            let mut buf = Vec::new();
            self.reader
                .read_until(b'\n', &mut buf)
                .map_err(|e| Error::io(path, e))?;
            self.line_no += 1;
            if buf.is_empty() {
                return Err(Error::PlyParse {
                    path: path.to_path_buf(),
                    line: self.line_no,
                    msg: "unexpected end of file".into(),
                });
            }
            Ok(String::from_utf8_lossy(&buf).trim_end().to_string())
        }
    }
    let mut lines = Lines {
        reader: &mut reader,
        line_no: 0,
    };

    if lines.next(path)?.trim() != "ply" {
        return Err(parse_err(1, "missing `ply` magic".into()));
    }

    let mut format = None;
    let mut vertex_count: Option<usize> = None;
    let mut layout = VertexLayout {
        props: Vec::new(),
        stride: 0,
    };
    let mut in_vertex_element = false;
    let mut vertex_seen = false;
    let mut trailing_elements = false;

    loop {
        let line = lines.next(path)?;
        let current = lines.line_no;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => match tok.next() {
                Some("ascii") => format = Some(PlyFormat::Ascii),
                Some("binary_little_endian") => format = Some(PlyFormat::BinaryLe),
                other => {
                    return Err(parse_err(
                        current,
                        format!("unsupported format `{}`", other.unwrap_or("")),
                    ))
                }
            },
            Some("element") => {
                let name = tok.next().unwrap_or("");
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(current, "bad element count".into()))?;
                if name == "vertex" {
                    if vertex_seen {
                        return Err(parse_err(current, "duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                    in_vertex_element = true;
                    vertex_seen = true;
                } else {
                    if !vertex_seen && count > 0 {
                        return Err(parse_err(
                            current,
                            format!("element `{name}` with data before vertex element"),
                        ));
                    }
                    in_vertex_element = false;
                    trailing_elements = trailing_elements || count > 0;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                let first = tok.next().unwrap_or("");
                if first == "list" {
                    return Err(parse_err(
                        current,
                        "list property in vertex element is unsupported".into(),
                    ));
                }
                let ty = ScalarType::parse(first)
                    .ok_or_else(|| parse_err(current, format!("unknown type `{first}`")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(current, "property missing name".into()))?;
                let slot = match name {
                    "x" => Some(0),
                    "y" => Some(1),
                    "z" => Some(2),
                    "red" | "r" => Some(3),
                    "green" | "g" => Some(4),
                    "blue" | "b" => Some(5),
                    _ => None,
                };
                layout.stride += ty.size();
                layout.props.push((ty, slot));
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(parse_err(current, format!("unknown header keyword `{other}`")));
            }
        }
    }

    let header_end = lines.line_no;
    let format = format.ok_or_else(|| parse_err(header_end, "missing format line".into()))?;
    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(header_end, "missing vertex element".into()))?;
    let have: Vec<usize> = layout.props.iter().filter_map(|p| p.1).collect();
    for slot in 0..6 {
        if !have.contains(&slot) {
            let name = ["x", "y", "z", "red", "green", "blue"][slot];
            return Err(parse_err(header_end, format!("missing property `{name}`")));
        }
    }

    let mut points: Vec<([u32; 3], Vec<f64>)> = Vec::with_capacity(vertex_count);
    let limit = if depth == 0 || depth > morton::MAX_DEPTH {
        return Err(Error::Parameter(format!(
            "depth must be in 1..={}, got {depth}",
            morton::MAX_DEPTH
        )));
    } else {
        1i64 << depth
    };

    let mut push_vertex = |index: usize, raw: [f64; 6]| -> Result<()> {
        let mut pos = [0u32; 3];
        for axis in 0..3 {
            let v = raw[axis].round();
            let vi = v as i64;
            if raw[axis].is_nan() || vi < 0 || vi >= limit {
                return Err(Error::CoordinateRange {
                    index,
                    x: raw[0].round() as i64,
                    y: raw[1].round() as i64,
                    z: raw[2].round() as i64,
                    depth,
                });
            }
            pos[axis] = vi as u32;
        }
        points.push((pos, vec![raw[3], raw[4], raw[5]]));
        Ok(())
    };

    match format {
        PlyFormat::Ascii => {
            for i in 0..vertex_count {
                let line = lines.next(path)?;
                let current = lines.line_no;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() < layout.props.len() {
                    return Err(parse_err(
                        current,
                        format!(
                            "vertex {} has {} values, expected {}",
                            i,
                            toks.len(),
                            layout.props.len()
                        ),
                    ));
                }
                let mut raw = [0f64; 6];
                for (tok, (_, slot)) in toks.iter().zip(layout.props.iter()) {
                    if let Some(s) = slot {
                        raw[*s] = tok
                            .parse::<f64>()
                            .map_err(|_| parse_err(current, format!("bad number `{tok}`")))?;
                    }
                }
                push_vertex(i, raw)?;
            }
        }
        PlyFormat::BinaryLe => {
            let mut buf = vec![0u8; layout.stride];
            for i in 0..vertex_count {
                lines.reader.read_exact(&mut buf).map_err(|e| Error::PlyParse {
                    path: path.to_path_buf(),
                    line: header_end,
                    msg: format!("truncated vertex {i}: {e}"),
                })?;
                let mut offset = 0;
                let mut raw = [0f64; 6];
                for (ty, slot) in &layout.props {
                    if let Some(s) = slot {
                        raw[*s] = ty.read_le(&buf[offset..]);
                    }
                    offset += ty.size();
                }
                push_vertex(i, raw)?;
            }
        }
    }
    let _ = trailing_elements; // data after the vertex element is ignored

    VoxelizedCloud::from_points(depth, points, 3)
}

/// Writes a cloud as binary-little-endian PLY with float positions and
/// uchar colors (attributes clamped and rounded to `[0, 255]`).
pub fn write_ply(cloud: &VoxelizedCloud, path: impl AsRef<Path>) -> Result<()> {
    if cloud.channels != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            got: cloud.channels,
        });
    }
    let path = path.as_ref();
    let tmp = crate::temp_sibling(path);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n",
            cloud.len()
        );
        w.write_all(header.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        for (p, attr) in cloud.positions.iter().zip(cloud.attributes.chunks(3)) {
            for axis in 0..3 {
                w.write_all(&(p[axis] as f32).to_le_bytes())
                    .map_err(|e| Error::io(&tmp, e))?;
            }
            for c in 0..3 {
                let v = attr[c].round().clamp(0.0, 255.0) as u8;
                w.write_all(&[v]).map_err(|e| Error::io(&tmp, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
