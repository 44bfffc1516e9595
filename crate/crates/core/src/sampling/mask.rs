use std::io::{Read, Write};

use crate::error::{DressError, Result};
use crate::net::params::read_u32;
use crate::net::spec::NetworkSpec;

/// Binary mask over one weight tensor, flat in row-major weight order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(len: usize) -> Self {
        Mask { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Mask { bits: vec![false; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set bit of `other` is also set here.
    pub fn contains(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Bits set here but not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Ones per row when viewed as `[rows, row_len]`.
    pub fn row_counts(&self, row_len: usize) -> Vec<usize> {
        self.bits
            .chunks(row_len.max(1))
            .map(|r| r.iter().filter(|&&b| b).count())
            .collect()
    }
}

/// Masks of one subnet: an entry per network layer, `Some` for sampled layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubnetMask {
    layers: Vec<Option<Mask>>,
}

impl SubnetMask {
    pub fn new(layers: Vec<Option<Mask>>) -> Self {
        SubnetMask { layers }
    }

    /// All-ones mask on every sampled layer.
    pub fn dense(net: &NetworkSpec) -> Self {
        SubnetMask {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.weight_shape()
                        .map(|s| Mask::ones(s.iter().product()))
                })
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> Option<&Mask> {
        self.layers.get(i).and_then(|m| m.as_ref())
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut Mask> {
        self.layers.get_mut(i).and_then(|m| m.as_mut())
    }

    pub fn layers(&self) -> &[Option<Mask>] {
        &self.layers
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().flatten().map(Mask::count_ones).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().flatten().map(Mask::len).sum()
    }

    /// Fraction of zeros over all sampled weights.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            1.0 - self.nnz() as f64 / total as f64
        }
    }

    pub fn contains(&self, other: &SubnetMask) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.contains(b),
                (None, None) => true,
                _ => false,
            })
    }

    pub fn check_shapes(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(DressError::shape("mask layer count differs from network"));
        }
        for (i, (m, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            let want = l.weight_shape().map(|s| s.iter().product::<usize>());
            if m.as_ref().map(Mask::len) != want {
                return Err(DressError::shape(format!(
                    "mask of layer {} ({}) is not congruent with its weights",
                    i, l.name
                )));
            }
        }
        Ok(())
    }
}

/// The K nested subnet masks, lowest sparsity first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    levels: Vec<SubnetMask>,
}

const MASK_MAGIC: &[u8; 4] = b"DRSM";
const MASK_VERSION: u32 = 1;

impl MaskSet {
    pub fn new(levels: Vec<SubnetMask>) -> Self {
        MaskSet { levels }
    }

    /// Number of levels K.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Subnet `k`, counted from 1.
    pub fn level(&self, k: usize) -> Result<&SubnetMask> {
        if k == 0 || k > self.levels.len() {
            return Err(DressError::LevelOutOfRange {
                level: k,
                levels: self.levels.len(),
            });
        }
        Ok(&self.levels[k - 1])
    }

    pub fn levels(&self) -> &[SubnetMask] {
        &self.levels
    }

    /// Nesting: each level contains every later one.
    pub fn is_nested(&self) -> bool {
        self.levels.windows(2).all(|w| w[0].contains(&w[1]))
    }

    /// Bit-packed binary dump: magic `DRSM`, version, K, layer count, then per
    /// layer a presence flag, weight count and K packed masks.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let layers = self.levels.first().map_or(0, |l| l.layers.len());
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        w.write_all(&(layers as u32).to_le_bytes())?;
        for i in 0..layers {
            match self.levels[0].layer(i) {
                None => w.write_all(&[0u8])?,
                Some(first) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&(first.len() as u32).to_le_bytes())?;
                    for level in &self.levels {
                        let m = level
                            .layer(i)
                            .ok_or_else(|| DressError::invariant("levels disagree on sampled layers"))?;
                        let mut packed = vec![0u8; m.len().div_ceil(8)];
                        for (j, &b) in m.bits().iter().enumerate() {
                            if b {
                                packed[j / 8] |= 1 << (j % 8);
                            }
                        }
                        w.write_all(&packed)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(DressError::format("bad mask file magic"));
        }
        if read_u32(r)? != MASK_VERSION {
            return Err(DressError::format("unsupported mask file version"));
        }
        let k = read_u32(r)? as usize;
        let layers = read_u32(r)? as usize;
        let mut levels = vec![Vec::with_capacity(layers); k];
        for _ in 0..layers {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            if flag[0] == 0 {
                levels.iter_mut().for_each(|l| l.push(None));
                continue;
            }
            let len = read_u32(r)? as usize;
            for level in levels.iter_mut() {
                let mut packed = vec![0u8; len.div_ceil(8)];
                r.read_exact(&mut packed)?;
                let bits = (0..len).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect();
                level.push(Some(Mask::from_bits(bits)));
            }
        }
        let set = MaskSet::new(levels.into_iter().map(SubnetMask::new).collect());
        if !set.is_nested() {
            return Err(DressError::invariant("mask levels are not nested"));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment() {
        let a = Mask::from_bits(vec![true, true, false, true]);
        let b = Mask::from_bits(vec![false, true, false, true]);
        assert!(a.contains(&b));
        assert!(!b.contains(&a));
        assert_eq!(a.minus(&b).bits(), &[true, false, false, false]);
        assert_eq!(a.row_counts(2), vec![2, 1]);
    }

    #[test]
    fn file_roundtrip() {
        let l1 = SubnetMask::new(vec![
            Some(Mask::from_bits(vec![true; 11])),
            None,
            Some(Mask::from_bits(vec![true, false, true])),
        ]);
        let mut bits = vec![true; 11];
        bits[3] = false;
        let l2 = SubnetMask::new(vec![
            Some(Mask::from_bits(bits)),
            None,
            Some(Mask::from_bits(vec![false, false, true])),
        ]);
        let set = MaskSet::new(vec![l1, l2]);
        assert!(set.is_nested());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(MaskSet::read_from(&mut buf.as_slice()).unwrap(), set);
        assert!(set.level(0).is_err());
        assert!(set.level(3).is_err());
    }
}
