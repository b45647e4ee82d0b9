//! Binary keep-masks over the prunable-parameter registry.
//!
//! Bit 1 means the weight is kept. Each prunable parameter owns a packed
//! bitset; global operations see the bitsets concatenated in registry
//! order, which also defines the canonical flat index used for
//! tie-breaking.

use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl RegistryEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Names and shapes of the prunable parameters, in model order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    entries: Vec<RegistryEntry>,
    fingerprint: u64,
}

impl Registry {
    pub fn new(entries: Vec<RegistryEntry>) -> Self {
        let mut h = Sha256::new();
        for e in &entries {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update((e.shape.len() as u64).to_le_bytes());
            for &d in &e.shape {
                h.update((d as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        let fingerprint = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Self {
            entries,
            fingerprint,
        }
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(RegistryEntry::numel).sum()
    }
}

/// Fixed-length packed bitset. Bits past `len` are always zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bits {
    len: usize,
    words: Vec<u64>,
}

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Self {
            len,
            words: vec![u64::MAX; len.div_ceil(64)],
        };
        b.clear_tail();
        b
    }

    fn clear_tail(&mut self) {
        let r = self.len % 64;
        if r != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << r) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn zip(&self, other: &Bits, f: impl Fn(u64, u64) -> u64) -> Bits {
        let mut out = Bits {
            len: self.len,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        };
        out.clear_tail();
        out
    }

    pub fn and_count(&self, other: &Bits) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + tz)
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Bits,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    fingerprint: u64,
    layers: Vec<MaskLayer>,
}

/// Exact kept/total counts of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub total: usize,
    pub kept: usize,
    pub per_parameter: Vec<(String, usize, usize)>,
    pub sparsity: f64,
}

const MASK_MAGIC: &[u8; 8] = b"ISPMASK\0";
const MASK_VERSION: u32 = 1;

impl Mask {
    fn filled(registry: &Registry, keep: bool) -> Self {
        let layers = registry
            .entries()
            .iter()
            .map(|e| MaskLayer {
                name: e.name.clone(),
                shape: e.shape.clone(),
                bits: if keep {
                    Bits::ones(e.numel())
                } else {
                    Bits::zeros(e.numel())
                },
            })
            .collect();
        Self {
            fingerprint: registry.fingerprint(),
            layers,
        }
    }

    pub fn ones(registry: &Registry) -> Self {
        Self::filled(registry, true)
    }

    pub fn zeros(registry: &Registry) -> Self {
        Self::filled(registry, false)
    }

    /// Builds a mask from a flat keep vector in canonical order.
    pub fn from_flat(registry: &Registry, keep: &[bool]) -> Result<Self> {
        if keep.len() != registry.total() {
            return Err(Error::ShapeMismatch {
                name: "mask".into(),
                expected: vec![registry.total()],
                actual: vec![keep.len()],
            });
        }
        let mut m = Self::zeros(registry);
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            m.set_flat(i, true);
        }
        Ok(m)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn layers(&self) -> &[MaskLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.bits.len()).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.bits.count_ones()).sum()
    }

    /// Splits a canonical flat index into `(layer, offset)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if flat < l.bits.len() {
                return (li, flat);
            }
            flat -= l.bits.len();
        }
        panic!("flat index out of range");
    }

    pub fn get_flat(&self, flat: usize) -> bool {
        let (l, o) = self.locate(flat);
        self.layers[l].bits.get(o)
    }

    pub fn set_flat(&mut self, flat: usize, keep: bool) {
        let (l, o) = self.locate(flat);
        self.layers[l].bits.set(o, keep);
    }

    /// Canonical flat indices of kept weights, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.kept());
        let mut base = 0;
        for l in &self.layers {
            out.extend(l.bits.iter_ones().map(|i| base + i));
            base += l.bits.len();
        }
        out
    }

    pub fn to_flat(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.bits.iter()).collect()
    }

    pub fn density(&self) -> SparsityReport {
        let per_parameter: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.bits.count_ones(), l.bits.len()))
            .collect();
        let kept = per_parameter.iter().map(|p| p.1).sum();
        let total = self.total();
        let sparsity = if total == 0 {
            0.0
        } else {
            1.0 - kept as f64 / total as f64
        };
        SparsityReport {
            total,
            kept,
            per_parameter,
            sparsity,
        }
    }

    pub fn sparsity(&self) -> f64 {
        self.density().sparsity
    }

    fn check(&self, other: &Mask) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                actual: other.fingerprint,
            });
        }
        Ok(())
    }

    fn combine(&self, other: &Mask, f: impl Fn(u64, u64) -> u64 + Copy) -> Result<Mask> {
        self.check(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| MaskLayer {
                name: a.name.clone(),
                shape: a.shape.clone(),
                bits: a.bits.zip(&b.bits, f),
            })
            .collect();
        Ok(Mask {
            fingerprint: self.fingerprint,
            layers,
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a | b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a & b)
    }

    /// The pruned-bit view of this mask.
    pub fn complement(&self) -> Mask {
        let layers = self
            .layers
            .iter()
            .map(|l| MaskLayer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                bits: l.bits.zip(&l.bits, |a, _| !a),
            })
            .collect();
        Mask {
            fingerprint: self.fingerprint,
            layers,
        }
    }

    /// `true` when every weight kept by `self` is kept by `other`.
    pub fn is_subset(&self, other: &Mask) -> Result<bool> {
        self.check(other)?;
        Ok(self.layers.iter().zip(&other.layers).all(|(a, b)| {
            a.bits
                .words
                .iter()
                .zip(&b.bits.words)
                .all(|(x, y)| x & !y == 0)
        }))
    }

    fn dot(&self, other: &Mask) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.bits.and_count(&b.bits))
            .sum()
    }

    /// Cosine similarity of the flattened keep-bit vectors.
    pub fn cosine_similarity(&self, other: &Mask) -> Result<f64> {
        self.check(other)?;
        let (na, nb) = (self.kept(), other.kept());
        if na == 0 || nb == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.dot(other) as f64 / ((na as f64) * (nb as f64)).sqrt())
    }

    /// Cosine similarity of the flattened prune-bit vectors.
    pub fn prune_cosine_similarity(&self, other: &Mask) -> Result<f64> {
        self.check(other)?;
        self.complement().cosine_similarity(&other.complement())
    }

    /// Serializes to the versioned run-length-encoded mask format:
    ///
    /// ```text
    /// magic "ISPMASK\0" | u32 version | u64 fingerprint | u64 layer count
    /// per layer: str name | u64 ndim | u64 dims.. | u64 numel
    ///            | u8 first bit | u64 run count | u64 run lengths..
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(MASK_MAGIC, MASK_VERSION);
        w.u64(self.fingerprint);
        w.u64(self.layers.len() as u64);
        for l in &self.layers {
            w.str(&l.name);
            w.usizes(&l.shape);
            w.u64(l.bits.len() as u64);
            let mut runs: Vec<u64> = Vec::new();
            let mut prev = None;
            for b in l.bits.iter() {
                if Some(b) == prev {
                    *runs.last_mut().expect("run started") += 1;
                } else {
                    runs.push(1);
                    prev = Some(b);
                }
            }
            w.u8(u8::from(!l.bits.is_empty() && l.bits.get(0)));
            w.u64(runs.len() as u64);
            runs.iter().for_each(|&r| w.u64(r));
        }
        w.into_bytes()
    }

    /// Parses a mask and checks it against `registry`.
    pub fn from_bytes(bytes: &[u8], registry: &Registry) -> Result<Mask> {
        let (mut r, _) = Reader::with_header(bytes, "mask", MASK_MAGIC, MASK_VERSION)?;
        let fingerprint = r.u64()?;
        if fingerprint != registry.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: registry.fingerprint(),
                actual: fingerprint,
            });
        }
        let n = r.count()?;
        if n != registry.entries().len() {
            return Err(Error::format("mask", "layer count differs from registry"));
        }
        let mut layers = Vec::with_capacity(n);
        for entry in registry.entries() {
            let name = r.str()?;
            let shape = r.usizes()?;
            if name != entry.name || shape != entry.shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: entry.shape.clone(),
                    actual: shape,
                });
            }
            let numel = r.u64()? as usize;
            if numel != entry.numel() {
                return Err(Error::format("mask", "numel differs from shape"));
            }
            let mut bit = r.u8()? == 1;
            let runs = r.count()?;
            let mut bits = Bits::zeros(numel);
            let mut pos = 0usize;
            for _ in 0..runs {
                let run = r.u64()? as usize;
                if pos + run > numel {
                    return Err(Error::format("mask", "run overflows layer"));
                }
                if bit {
                    (pos..pos + run).for_each(|i| bits.set(i, true));
                }
                pos += run;
                bit = !bit;
            }
            if pos != numel {
                return Err(Error::format("mask", "runs do not cover layer"));
            }
            layers.push(MaskLayer { name, shape, bits });
        }
        r.finish()?;
        Ok(Mask {
            fingerprint,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(n: usize) -> Registry {
        Registry::new(vec![RegistryEntry {
            name: "w".into(),
            shape: vec![n],
        }])
    }

    fn m(bits: &[u8]) -> Mask {
        let keep: Vec<bool> = bits.iter().map(|&b| b == 1).collect();
        Mask::from_flat(&reg(bits.len()), &keep).unwrap()
    }

    #[test]
    fn density_counts() {
        assert_eq!(m(&[1, 1, 1, 1]).sparsity(), 0.0);
        assert_eq!(m(&[0, 0, 0, 0]).sparsity(), 1.0);
        let r = m(&[1, 0, 1, 0, 0, 1, 0, 0]).density();
        assert_eq!((r.kept, r.total), (3, 8));
        assert_eq!(r.sparsity, 0.625);
    }

    #[test]
    fn union_and_intersect_examples() {
        let a = m(&[1, 0, 1, 0]);
        let b = m(&[0, 0, 1, 1]);
        assert_eq!(a.union(&b).unwrap(), m(&[1, 0, 1, 1]));
        assert_eq!(a.intersect(&b).unwrap(), m(&[0, 0, 1, 0]));
        assert_eq!(a.union(&a).unwrap(), a);
        assert_eq!(a.union(&m(&[0; 4])).unwrap(), a);
        assert_eq!(a.intersect(&a).unwrap(), a);
        assert_eq!(a.intersect(&m(&[1; 4])).unwrap(), a);
    }

    #[test]
    fn cosine_examples() {
        let a = m(&[1, 1, 0, 0]);
        assert_eq!(a.cosine_similarity(&a).unwrap(), 1.0);
        assert_eq!(a.cosine_similarity(&m(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(a.cosine_similarity(&m(&[1, 0, 1, 0])).unwrap(), 0.5);
        assert!(matches!(
            a.cosine_similarity(&m(&[0; 4])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn subset_examples() {
        let a = m(&[1, 1, 0, 0]);
        assert!(m(&[0; 4]).is_subset(&a).unwrap());
        assert!(a.is_subset(&a).unwrap());
        assert!(!a.is_subset(&m(&[1, 0, 1, 0])).unwrap());
    }

    #[test]
    fn mismatched_registries_rejected() {
        let a = m(&[1, 0, 1, 0]);
        let other = Registry::new(vec![RegistryEntry {
            name: "v".into(),
            shape: vec![4],
        }]);
        let b = Mask::ones(&other);
        assert!(matches!(
            a.union(&b),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(matches!(
            Mask::from_bytes(&a.to_bytes(), &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let r = Registry::new(vec![
            RegistryEntry {
                name: "a".into(),
                shape: vec![3, 5],
            },
            RegistryEntry {
                name: "b".into(),
                shape: vec![70],
            },
        ]);
        let zeros = Mask::zeros(&r);
        assert_eq!(Mask::from_bytes(&zeros.to_bytes(), &r).unwrap(), zeros);
        let mut mixed = Mask::ones(&r);
        for i in [0, 4, 5, 6, 20, 63, 64, 84] {
            mixed.set_flat(i, false);
        }
        assert_eq!(Mask::from_bytes(&mixed.to_bytes(), &r).unwrap(), mixed);
    }

    #[test]
    fn tail_bits_stay_clear() {
        let b = Bits::ones(70);
        assert_eq!(b.count_ones(), 70);
        let c = b.zip(&b, |x, _| !x);
        assert_eq!(c.count_ones(), 0);
        assert_eq!(Bits::ones(70).iter_ones().last(), Some(69));
    }
}
