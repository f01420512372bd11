//! The X-LSB attack: hide a bit string in the `X` lowest mantissa bits of
//! every weight, in flatten order.
//!
//! Weight `i` (0-based) receives payload bits `[i·X, (i+1)·X)`, with the
//! first bit of each segment landing on `b_X`. When the payload length is
//! not a multiple of `X`, the trailing `r` bits fill `b_X … b_(X−r+1)` of the
//! next weight and its lower bits are left alone.
//!
//! Other orientations (e.g. segment LSB-first, or payload written across
//! columns) are equally valid steganographically; extraction only works with
//! the orientation used here.

use sha2::{Digest, Sha256};

use crate::bitview::{read_region, write_region, BitRegion, Bits, Float32Word, MANTISSA_BITS};
use crate::rng;
use crate::tensorstore::{ModelRecord, WeightVector};
use crate::{Error, Result};
use rand::RngCore;

pub const META_LABEL: &str = "label";
pub const META_X_LSB: &str = "x_lsb";
pub const LABEL_BENIGN: &str = "benign";
pub const LABEL_MALICIOUS: &str = "malicious";

/// A payload bit string. Bytes expand MSB first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Payload {
    bits: Bits,
}

impl Payload {
    pub fn from_bits(bits: Bits) -> Self {
        Payload { bits }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Payload { bits: Bits::from_bytes(bytes) }
    }

    /// `n_bytes` pseudorandom bytes from `seed`.
    pub fn random(n_bytes: usize, seed: u64) -> Self {
        let mut bytes = vec![0u8; n_bytes];
        rng::seeded(seed).fill_bytes(&mut bytes);
        Payload::from_bytes(&bytes)
    }

    pub fn bits(&self) -> &Bits {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.to_bytes()
    }

    /// Hex SHA-256 of the packed bytes, prefixed with the bit length.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update(self.to_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Exact,
    Fill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackSpec {
    x: u32,
    pub mode: AttackMode,
}

impl AttackSpec {
    pub fn new(x: u32, mode: AttackMode) -> Result<Self> {
        if !(1..=MANTISSA_BITS).contains(&x) {
            return Err(Error::Argument(format!("X must satisfy 1 ≤ X ≤ 23, got {x}")));
        }
        Ok(AttackSpec { x, mode })
    }

    pub fn x(self) -> u32 {
        self.x
    }

    pub fn region(self) -> BitRegion {
        BitRegion::xlsb(self.x).expect("validated width")
    }
}

pub fn capacity(n_weights: usize, x: u32) -> usize {
    n_weights * x as usize
}

/// Writes `bits` into consecutive XLSB regions of `w`. Caller guarantees capacity.
fn splice(w: &mut WeightVector, region: BitRegion, bits: &Bits) -> Result<()> {
    let x = region.width() as usize;
    for (i, start) in (0..bits.len()).step_by(x).enumerate() {
        let end = (start + x).min(bits.len());
        let word = write_region(Float32Word::from_f32(w.0[i]), region, &bits.slice(start, end))?;
        w.0[i] = word.to_f32();
    }
    Ok(())
}

fn mark_malicious(m: &mut ModelRecord, x: u32) {
    m.meta.insert(META_LABEL.into(), LABEL_MALICIOUS.into());
    m.meta.insert(META_X_LSB.into(), x.to_string());
}

/// Embeds `s` once. Fails when `n_s > n_W·X`.
pub fn embed(m: &ModelRecord, spec: AttackSpec, s: &Payload) -> Result<ModelRecord> {
    let mut w = m.flatten();
    let cap = capacity(w.len(), spec.x);
    if s.len() > cap {
        return Err(Error::Capacity { needed: s.len(), capacity: cap });
    }
    splice(&mut w, spec.region(), s.bits())?;
    let mut out = m.with_weights(&w)?;
    mark_malicious(&mut out, spec.x);
    Ok(out)
}

/// The payload repeated (and truncated) to exactly `capacity` bits.
pub fn fill_stream(s: &Payload, capacity: usize) -> Result<Bits> {
    if s.is_empty() {
        return Err(Error::Argument("fill attack needs a non-empty payload".into()));
    }
    Ok(s.bits().as_slice().iter().copied().cycle().take(capacity).collect())
}

/// Embeds `s·s·s…` truncated to the full `n_W·X` capacity, so every weight's
/// XLSB region is overwritten.
pub fn embed_fill(m: &ModelRecord, spec: AttackSpec, s: &Payload) -> Result<ModelRecord> {
    let mut w = m.flatten();
    let stream = fill_stream(s, capacity(w.len(), spec.x))?;
    splice(&mut w, spec.region(), &stream)?;
    let mut out = m.with_weights(&w)?;
    mark_malicious(&mut out, spec.x);
    Ok(out)
}

/// Dispatches on `spec.mode`.
pub fn attack(m: &ModelRecord, spec: AttackSpec, s: &Payload) -> Result<ModelRecord> {
    match spec.mode {
        AttackMode::Exact => embed(m, spec, s),
        AttackMode::Fill => embed_fill(m, spec, s),
    }
}

/// Reads the first `n_bits` of the concatenated XLSB regions.
pub fn extract(m: &ModelRecord, x: u32, n_bits: usize) -> Result<Payload> {
    let region = BitRegion::xlsb(x)?;
    let w = m.flatten();
    let cap = capacity(w.len(), x);
    if n_bits > cap {
        return Err(Error::Capacity { needed: n_bits, capacity: cap });
    }
    let mut bits = Bits::with_capacity(n_bits);
    for word in w.words() {
        if bits.len() >= n_bits {
            break;
        }
        let segment = read_region(word, region);
        let take = (n_bits - bits.len()).min(segment.len());
        bits.extend_from(&segment.slice(0, take));
    }
    Ok(Payload::from_bits(bits))
}

/// Number of weights whose full 32-bit pattern is identical in both models.
pub fn count_unchanged(original: &ModelRecord, attacked: &ModelRecord) -> Result<usize> {
    if original.arch() != attacked.arch() {
        return Err(Error::ArchMismatch(format!("{} vs {}", original.arch(), attacked.arch())));
    }
    Ok(original
        .flatten()
        .0
        .iter()
        .zip(&attacked.flatten().0)
        .filter(|(a, b)| a.to_bits() == b.to_bits())
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::Arch;
    use std::collections::BTreeMap;

    /// A 1-1 identity-activated model has n_W = 2; 2-2 has n_W = 6.
    fn model(values: &[f32]) -> ModelRecord {
        let arch: Arch = match values.len() {
            2 => "1-1:identity".parse().unwrap(),
            6 => "2-2:identity".parse().unwrap(),
            n => panic!("no test arch with {n} weights"),
        };
        ModelRecord::unflatten(arch, &WeightVector(values.to_vec()), BTreeMap::new()).unwrap()
    }

    fn bits(s: &str) -> Payload {
        Payload::from_bits(s.parse().unwrap())
    }

    const SIX: [f32; 6] = [0.75, -0.3, 0.125, 1.5, -2.25, 0.01];

    #[test]
    fn spec_range_guard() {
        assert!(AttackSpec::new(0, AttackMode::Exact).is_err());
        assert!(AttackSpec::new(24, AttackMode::Fill).is_err());
        assert!(AttackSpec::new(23, AttackMode::Fill).is_ok());
    }

    #[test]
    fn empty_payload_leaves_weights_identical() {
        let m = model(&SIX);
        let spec = AttackSpec::new(5, AttackMode::Exact).unwrap();
        let out = embed(&m, spec, &Payload::from_bits(Bits::new())).unwrap();
        assert!(out.flatten().bit_eq(&m.flatten()));
        assert_eq!(out.meta.get(META_LABEL).map(String::as_str), Some(LABEL_MALICIOUS));
        assert_eq!(out.meta.get(META_X_LSB).map(String::as_str), Some("5"));
    }

    #[test]
    fn one_bit_per_weight_matches_splice_oracle() {
        let m = model(&SIX);
        let spec = AttackSpec::new(1, AttackMode::Exact).unwrap();
        let out = embed(&m, spec, &bits("101011")).unwrap();
        let expected_b1 = [1u32, 0, 1, 0, 1, 1];
        for ((orig, new), b) in m.flatten().0.iter().zip(&out.flatten().0).zip(expected_b1) {
            assert_eq!(new.to_bits(), (orig.to_bits() & !1) | b);
        }
    }

    #[test]
    fn remainder_goes_to_top_of_next_region() {
        let m = model(&SIX);
        let spec = AttackSpec::new(3, AttackMode::Exact).unwrap();
        // q = 1 full segment "110", r = 2 bits "01" into b3 b2 of weight 2
        let out = embed(&m, spec, &bits("11001")).unwrap().flatten();
        let w = m.flatten();
        assert_eq!(out.0[0].to_bits(), (w.0[0].to_bits() & !0b111) | 0b110);
        assert_eq!(out.0[1].to_bits(), (w.0[1].to_bits() & !0b110) | 0b010);
        for i in 2..6 {
            assert_eq!(out.0[i].to_bits(), w.0[i].to_bits());
        }
    }

    #[test]
    fn capacity_boundary() {
        let m = model(&SIX);
        let spec = AttackSpec::new(2, AttackMode::Exact).unwrap();
        assert!(embed(&m, spec, &bits(&"1".repeat(12))).is_ok());
        match embed(&m, spec, &bits(&"1".repeat(13))) {
            Err(Error::Capacity { needed: 13, capacity: 12 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fill_repeats_and_truncates() {
        let m = model(&SIX);
        let spec = AttackSpec::new(2, AttackMode::Fill).unwrap();
        let s = bits("10110001");
        let out = embed_fill(&m, spec, &s).unwrap();
        let stream = extract(&out, 2, 12).unwrap();
        assert_eq!(stream.bits().to_string(), "101100011011");
    }

    #[test]
    fn fill_with_oversized_payload_uses_prefix() {
        let m = model(&[0.5, 0.25]);
        let spec = AttackSpec::new(3, AttackMode::Fill).unwrap();
        let out = embed_fill(&m, spec, &bits("1110001011")).unwrap();
        assert_eq!(extract(&out, 3, 6).unwrap().bits().to_string(), "111000");
    }

    #[test]
    fn fill_at_exact_capacity_equals_exact_embed() {
        let m = model(&SIX);
        let s = bits("101100011011010110");
        let a = embed(&m, AttackSpec::new(3, AttackMode::Exact).unwrap(), &s).unwrap();
        let b = embed_fill(&m, AttackSpec::new(3, AttackMode::Fill).unwrap(), &s).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn fill_rejects_empty_payload() {
        let m = model(&SIX);
        let spec = AttackSpec::new(2, AttackMode::Fill).unwrap();
        assert!(matches!(embed_fill(&m, spec, &Payload::from_bits(Bits::new())), Err(Error::Argument(_))));
    }

    #[test]
    fn extract_edges() {
        let m = model(&SIX);
        assert!(extract(&m, 4, 0).unwrap().is_empty());
        assert_eq!(extract(&m, 4, 24).unwrap().len(), 24);
        assert!(matches!(extract(&m, 4, 25), Err(Error::Capacity { .. })));
        assert!(extract(&m, 24, 1).is_err());
    }

    #[test]
    fn unchanged_counts() {
        let m = model(&SIX);
        assert_eq!(count_unchanged(&m, &m).unwrap(), 6);
        // Two weights whose b1 already equals the payload bit stay identical.
        let w = m.flatten();
        let carrier: String = w.0.iter().map(|v| if v.to_bits() & 1 == 1 { '1' } else { '0' }).collect();
        let flipped: String = carrier
            .chars()
            .enumerate()
            .map(|(i, c)| if i < 2 { c } else if c == '1' { '0' } else { '1' })
            .collect();
        let out = embed(&m, AttackSpec::new(1, AttackMode::Exact).unwrap(), &bits(&flipped)).unwrap();
        assert_eq!(count_unchanged(&m, &out).unwrap(), 2);

        let other = model(&[1.0, 2.0]);
        assert!(matches!(count_unchanged(&m, &other), Err(Error::ArchMismatch(_))));
    }

    #[test]
    fn payload_bytes_and_digest() {
        let p = Payload::from_bytes(b"\x80\x01");
        assert_eq!(p.bits().to_string(), "1000000000000001");
        assert_eq!(p.to_bytes(), b"\x80\x01");
        assert_eq!(Payload::random(16, 3), Payload::random(16, 3));
        assert_ne!(Payload::random(16, 3).digest(), Payload::random(16, 4).digest());
    }
}
