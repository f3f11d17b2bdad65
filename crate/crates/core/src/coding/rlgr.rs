//! Adaptive run-length Golomb-Rice coder for signed integer sequences.
//!
//! Two modes, switched by the run parameter `k`:
//!
//! * `k == 0`: each zigzag-mapped symbol `u` is Golomb-Rice coded with
//!   parameter `kR`.
//! * `k >= 1`: a complete run of `2^k` zeros costs a single `0` bit; a run
//!   broken after `m < 2^k` zeros by a nonzero symbol costs a `1` bit, `m`
//!   in `k` bits, and the Golomb-Rice code of `u - 1`.
//!
//! Both parameters adapt through fractional counters shared bit-exactly by
//! encoder and decoder; the constants are frozen in `docs/FORMATS.md`.
//! A quotient escape keeps the code length bounded for arbitrary `i64`
//! input. Bits are packed MSB-first.

use crate::error::{Error, Result};

/// Fractional bits of the adaptation counters.
const SHIFT: u32 = 4;
/// Initial run parameter `k` (counter units).
const K_INIT: u32 = 1 << SHIFT;
/// Initial Golomb-Rice parameter `kR` (counter units).
const KR_INIT: u32 = 1 << SHIFT;
/// Counter increment after a complete zero run.
const K_UP_RUN: u32 = 4;
/// Counter decrement when a zero run is broken.
const K_DOWN_RUN: u32 = 5;
/// Counter increment for a zero symbol in Golomb-Rice mode.
const K_UP_GR: u32 = 3;
/// Counter decrement for a nonzero symbol in Golomb-Rice mode.
const K_DOWN_GR: u32 = 3;
/// Cap on `k` (runs of at most 2^20 zeros per bit).
const K_MAX: u32 = 20 << SHIFT;
/// Cap on `kR`.
const KR_MAX: u32 = 48 << SHIFT;
/// Unary quotient limit; larger quotients escape to 64 raw bits.
const Q_ESCAPE: u64 = 40;

#[inline]
fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

#[inline]
fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

/// Shared adaptation state; encoder and decoder step it identically.
#[derive(Debug, Clone)]
struct State {
    k_counter: u32,
    kr_counter: u32,
}

impl State {
    fn new() -> Self {
        State {
            k_counter: K_INIT,
            kr_counter: KR_INIT,
        }
    }

    fn k(&self) -> u32 {
        self.k_counter >> SHIFT
    }

    fn kr(&self) -> u32 {
        self.kr_counter >> SHIFT
    }

    fn after_full_run(&mut self) {
        self.k_counter = (self.k_counter + K_UP_RUN).min(K_MAX);
    }

    fn after_broken_run(&mut self, coded: u64) {
        self.k_counter = self.k_counter.saturating_sub(K_DOWN_RUN);
        self.adapt_kr(coded);
    }

    fn after_gr_symbol(&mut self, u: u64) {
        if u == 0 {
            self.k_counter = (self.k_counter + K_UP_GR).min(K_MAX);
        } else {
            self.k_counter = self.k_counter.saturating_sub(K_DOWN_GR);
        }
        self.adapt_kr(u);
    }

    fn adapt_kr(&mut self, coded: u64) {
        let q = coded >> self.kr();
        if q == 0 {
            self.kr_counter = self.kr_counter.saturating_sub(2);
        } else if q > 1 {
            let up = (q + 1).min(1 << 16) as u32;
            self.kr_counter = (self.kr_counter + up).min(KR_MAX);
        }
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    #[inline]
    fn push_bit(&mut self, b: bool) {
        if self.bit == 0 {
            self.bytes.push(0);
        }
        if b {
            let last = self.bytes.last_mut().unwrap();
            *last |= 1 << (7 - self.bit);
        }
        self.bit = (self.bit + 1) & 7;
    }

    #[inline]
    fn push_bits(&mut self, value: u64, count: u32) {
        for i in (0..count).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    #[inline]
    fn read_bit(&mut self) -> Result<bool> {
        let byte = self.pos >> 3;
        if byte >= self.bytes.len() {
            return Err(Error::Decode {
                offset: byte,
                msg: "bit stream exhausted".into(),
            });
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos & 7))) & 1;
        self.pos += 1;
        Ok(bit == 1)
    }

    #[inline]
    fn read_bits(&mut self, count: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..count {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    /// Remaining bits must be zero padding within the final byte, with no
    /// full bytes left over.
    fn expect_only_padding(&self) -> Result<()> {
        let byte = self.pos >> 3;
        let bit = self.pos & 7;
        if bit != 0 {
            let mask = 0xffu8 >> bit;
            if self.bytes[byte] & mask != 0 {
                return Err(Error::Decode {
                    offset: byte,
                    msg: "nonzero padding bits".into(),
                });
            }
            if byte + 1 != self.bytes.len() {
                return Err(Error::Decode {
                    offset: byte + 1,
                    msg: "trailing bytes after coded data".into(),
                });
            }
        } else if byte != self.bytes.len() {
            return Err(Error::Decode {
                offset: byte,
                msg: "trailing bytes after coded data".into(),
            });
        }
        Ok(())
    }
}

fn write_golomb_rice(w: &mut BitWriter, u: u64, kr: u32) {
    let q = u >> kr;
    if q < Q_ESCAPE {
        for _ in 0..q {
            w.push_bit(true);
        }
        w.push_bit(false);
        w.push_bits(u & ((1u64 << kr) - 1).min(u64::MAX), kr);
    } else {
        for _ in 0..Q_ESCAPE {
            w.push_bit(true);
        }
        w.push_bit(false);
        w.push_bits(u, 64);
    }
}

fn read_golomb_rice(r: &mut BitReader, kr: u32) -> Result<u64> {
    let mut q = 0u64;
    while r.read_bit()? {
        q += 1;
        if q > Q_ESCAPE {
            return Err(Error::Decode {
                offset: r.pos >> 3,
                msg: "unary run exceeds escape limit".into(),
            });
        }
    }
    if q == Q_ESCAPE {
        r.read_bits(64)
    } else {
        Ok((q << kr) | r.read_bits(kr)?)
    }
}

/// Encodes a signed integer sequence. Decoding requires the element count.
pub fn rlgr_encode(symbols: &[i64]) -> Vec<u8> {
    let mut state = State::new();
    let mut w = BitWriter::new();
    let mut i = 0usize;
    while i < symbols.len() {
        let k = state.k();
        if k == 0 {
            let u = zigzag(symbols[i]);
            write_golomb_rice(&mut w, u, state.kr());
            state.after_gr_symbol(u);
            i += 1;
        } else {
            let max_run = 1u64 << k;
            let mut run = 0u64;
            while run < max_run && i + (run as usize) < symbols.len()
                && symbols[i + run as usize] == 0
            {
                run += 1;
            }
            if run == max_run {
                w.push_bit(false);
                state.after_full_run();
                i += run as usize;
            } else if i + (run as usize) == symbols.len() {
                // Input ends inside a run: emit a full-run marker; the
                // decoder truncates at the known symbol count.
                w.push_bit(false);
                i += run as usize;
            } else {
                let u = zigzag(symbols[i + run as usize]);
                debug_assert!(u > 0);
                w.push_bit(true);
                w.push_bits(run, k);
                write_golomb_rice(&mut w, u - 1, state.kr());
                state.after_broken_run(u - 1);
                i += run as usize + 1;
            }
        }
    }
    w.finish()
}

/// Decodes `count` signed integers produced by [`rlgr_encode`].
pub fn rlgr_decode(bytes: &[u8], count: usize) -> Result<Vec<i64>> {
    let mut state = State::new();
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = state.k();
        if k == 0 {
            let u = read_golomb_rice(&mut r, state.kr())?;
            out.push(unzigzag(u));
            state.after_gr_symbol(u);
        } else {
            let remaining = count - out.len();
            if r.read_bit()? {
                let run = r.read_bits(k)? as usize;
                if run >= remaining {
                    return Err(Error::Decode {
                        offset: r.pos >> 3,
                        msg: format!("broken run of {run} zeros exceeds remaining {remaining}"),
                    });
                }
                let u = read_golomb_rice(&mut r, state.kr())? + 1;
                out.extend(std::iter::repeat_n(0, run));
                out.push(unzigzag(u));
                state.after_broken_run(u - 1);
            } else {
                let run = (1usize << k).min(remaining);
                out.extend(std::iter::repeat_n(0, run));
                if run == 1usize << k {
                    state.after_full_run();
                }
            }
        }
    }
    r.expect_only_padding()?;
    Ok(out)
}
