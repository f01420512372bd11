//! Bit-exact views of IEEE-754 binary32 words.
//!
//! Bits are numbered `b32 … b1` from the most significant end: `b32` is the
//! sign, `b31 … b24` the biased exponent `E`, and `b23 … b1` the mantissa.
//! All operations act on the raw `u32` pattern, so NaN payloads, signed
//! zeros, subnormals and infinities pass through untouched.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

pub const MANTISSA_BITS: u32 = 23;
pub const EXPONENT_BITS: u32 = 8;
const MANTISSA_MASK: u32 = (1 << MANTISSA_BITS) - 1;

/// An ordered bit string, most significant bit first.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Bits(Vec<bool>);

impl Bits {
    pub fn new() -> Self {
        Bits(Vec::new())
    }

    pub fn with_capacity(n: usize) -> Self {
        Bits(Vec::with_capacity(n))
    }

    /// Expands bytes into bits, most significant bit of each byte first.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut bits = Vec::with_capacity(bytes.len() * 8);
        for &byte in bytes {
            for shift in (0..8).rev() {
                bits.push((byte >> shift) & 1 == 1);
            }
        }
        Bits(bits)
    }

    /// Packs bits into bytes, MSB first. A trailing partial byte is padded
    /// with zero bits on the right.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
            })
            .collect()
    }

    /// The low `width` bits of `value`, most significant first.
    pub fn from_uint(value: u32, width: u32) -> Self {
        Bits((0..width).rev().map(|i| (value >> i) & 1 == 1).collect())
    }

    /// Interprets the string as an unsigned integer, MSB first. Length must be ≤ 32.
    pub fn to_uint(&self) -> u32 {
        debug_assert!(self.0.len() <= 32);
        self.0.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.0.get(i).copied()
    }

    pub fn push(&mut self, bit: bool) {
        self.0.push(bit);
    }

    pub fn extend_from(&mut self, other: &Bits) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn slice(&self, start: usize, end: usize) -> Bits {
        Bits(self.0[start..end].to_vec())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + Clone + '_ {
        self.0.iter().copied()
    }
}

impl From<Vec<bool>> for Bits {
    fn from(v: Vec<bool>) -> Self {
        Bits(v)
    }
}

impl FromIterator<bool> for Bits {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Bits(iter.into_iter().collect())
    }
}

impl FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Argument(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Bits)
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits(\"{self}\")")
    }
}

/// A float32 word held as its raw bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Float32Word(pub u32);

impl Float32Word {
    pub fn from_f32(v: f32) -> Self {
        Float32Word(v.to_bits())
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits(self.0)
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    /// Bit `b_i`, `1 ≤ i ≤ 32`.
    pub fn bit(self, i: u32) -> bool {
        assert!((1..=32).contains(&i), "bit index {i} out of range");
        (self.0 >> (i - 1)) & 1 == 1
    }

    pub fn with_bit(self, i: u32, value: bool) -> Self {
        assert!((1..=32).contains(&i), "bit index {i} out of range");
        let mask = 1u32 << (i - 1);
        Float32Word(if value { self.0 | mask } else { self.0 & !mask })
    }

    pub fn flip(self, i: u32) -> Self {
        self.with_bit(i, !self.bit(i))
    }

    pub fn sign(self) -> bool {
        self.bit(32)
    }

    /// Biased exponent `E = (b31 … b24)₂`.
    pub fn exponent(self) -> u32 {
        (self.0 >> MANTISSA_BITS) & 0xFF
    }

    pub fn mantissa(self) -> u32 {
        self.0 & MANTISSA_MASK
    }

    /// The 32 bits as a string, `b32` first.
    pub fn to_bits(self) -> Bits {
        Bits::from_uint(self.0, 32)
    }

    pub fn from_bits(bits: &Bits) -> Result<Self> {
        if bits.len() != 32 {
            return Err(Error::Argument(format!("expected 32 bits, got {}", bits.len())));
        }
        Ok(Float32Word(bits.to_uint()))
    }
}

impl fmt::Debug for Float32Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Float32Word({:#010x})", self.0)
    }
}

/// Decodes the word's real value from its sign, exponent and mantissa
/// fields. Normal numbers use `(−1)^s · 2^(E−127) · (1 + Σ b_(24−i)·2^(−i))`;
/// subnormals, infinities and NaN follow IEEE-754.
pub fn decode_value(w: Float32Word) -> f64 {
    let sign = if w.sign() { -1.0 } else { 1.0 };
    let e = w.exponent();
    if e == 0xFF {
        return if w.mantissa() == 0 { sign * f64::INFINITY } else { f64::NAN };
    }
    let fraction: f64 = (1..=MANTISSA_BITS)
        .filter(|&i| w.bit(24 - i))
        .map(|i| 2f64.powi(-(i as i32)))
        .sum();
    if e == 0 {
        sign * 2f64.powi(-126) * fraction
    } else {
        sign * 2f64.powi(e as i32 - 127) * (1.0 + fraction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    /// `b_X … b_1`, confined to the mantissa.
    Xlsb,
    /// `b_31 … b_(32−X)`, confined to the exponent.
    Xmsb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitRegion {
    kind: RegionKind,
    width: u32,
}

impl BitRegion {
    pub fn xlsb(width: u32) -> Result<Self> {
        if !(1..=MANTISSA_BITS).contains(&width) {
            return Err(Error::RegionBounds { kind: "XLSB", width, max: MANTISSA_BITS });
        }
        Ok(BitRegion { kind: RegionKind::Xlsb, width })
    }

    pub fn xmsb(width: u32) -> Result<Self> {
        if !(1..=EXPONENT_BITS).contains(&width) {
            return Err(Error::RegionBounds { kind: "XMSB", width, max: EXPONENT_BITS });
        }
        Ok(BitRegion { kind: RegionKind::Xmsb, width })
    }

    pub fn kind(self) -> RegionKind {
        self.kind
    }

    pub fn width(self) -> u32 {
        self.width
    }

    /// Index of the region's most significant bit.
    fn top(self) -> u32 {
        match self.kind {
            RegionKind::Xlsb => self.width,
            RegionKind::Xmsb => 31,
        }
    }

    /// Bit indices covered by the region, most significant first.
    pub fn positions(self) -> impl Iterator<Item = u32> {
        let top = self.top();
        (0..self.width).map(move |k| top - k)
    }
}

/// Reads the region's bits, most significant first.
pub fn read_region(w: Float32Word, r: BitRegion) -> Bits {
    let shift = r.top() - r.width;
    Bits::from_uint((w.0 >> shift) & ((1u32 << r.width) - 1), r.width)
}

/// Overwrites the top `bits.len()` positions of an XLSB region (`b_X`
/// downward). Every other bit of the word is preserved.
pub fn write_region(w: Float32Word, r: BitRegion, bits: &Bits) -> Result<Float32Word> {
    if r.kind != RegionKind::Xlsb {
        return Err(Error::UnsupportedRegion);
    }
    let n = bits.len() as u32;
    if n > r.width {
        return Err(Error::RegionOverflow { len: bits.len(), width: r.width });
    }
    if n == 0 {
        return Ok(w);
    }
    let shift = r.width - n;
    let mask = (((1u64 << n) - 1) as u32) << shift;
    Ok(Float32Word((w.0 & !mask) | (bits.to_uint() << shift)))
}

/// Strict upper bound on `|v̂ − v|` for any rewrite of the `x` lowest
/// mantissa bits: `2^(E−127) · 2^(x−23)`. Subnormals use the effective
/// exponent `E = 1`. Only meaningful for finite words.
pub fn xlsb_perturbation_bound(w: Float32Word, x: u32) -> f64 {
    let e = w.exponent().max(1) as i32;
    2f64.powi(e - 127) * 2f64.powi(x as i32 - 23)
}
