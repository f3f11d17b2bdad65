//! Morton (z-order) linearization of 3D integer coordinates.
//!
//! Bit layout: bit `3i + 2` of the code holds bit `i` of x, `3i + 1` holds
//! bit `i` of y, `3i` holds bit `i` of z. Sorting codes gives the octree
//! traversal order; `code >> 3` is the parent node, `code & 7` the child
//! octant within its parent.

/// Maximum supported octree depth (21 × 3 = 63 bits).
pub const MAX_DEPTH: u8 = 21;

#[inline]
fn spread(v: u64) -> u64 {
    // Interleave bits of a 21-bit value with two zero bits.
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

#[inline]
fn compact(v: u64) -> u64 {
    let mut x = v & 0x1249249249249249;
    x = (x | (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x | (x >> 4)) & 0x100f00f00f00f00f;
    x = (x | (x >> 8)) & 0x1f0000ff0000ff;
    x = (x | (x >> 16)) & 0x1f00000000ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

#[inline]
pub fn encode(x: u32, y: u32, z: u32) -> u64 {
    (spread(x as u64) << 2) | (spread(y as u64) << 1) | spread(z as u64)
}

#[inline]
pub fn decode(code: u64) -> (u32, u32, u32) {
    (
        compact(code >> 2) as u32,
        compact(code >> 1) as u32,
        compact(code) as u32,
    )
}

/// Child octant index in `{0,..,7}`: `(dx << 2) | (dy << 1) | dz`.
#[inline]
pub fn octant(code: u64) -> usize {
    (code & 7) as usize
}

/// Offset vector `(dx, dy, dz)` of a child octant index.
#[inline]
pub fn octant_offset(d: usize) -> (u32, u32, u32) {
    (((d >> 2) & 1) as u32, ((d >> 1) & 1) as u32, (d & 1) as u32)
}
