//! Word-packed bit-planes and xnor-popcount arithmetic.
//!
//! Layout: element `j` lives in word `j / 64`, bit `j % 64` (LSB first). Each
//! plane carries a sign bitmap (1 = positive) and an activity bitmap (1 =
//! element takes part in this plane). Sign bits are 0 wherever activity is 0
//! and padding bits past `element_count` are 0 in both.
//!
//! For one plane pair with common activity `c = act_w & act_a`, the ±1 dot
//! product over the common elements is `2·popcount(!(s_w ^ s_a) & c) −
//! popcount(c)`; the full dot product is the scale-weighted sum over all plane
//! pairs.

use crate::binarize::{BitMask, BitPlane, HeterogeneousBinaryTensor};
use crate::bitalloc::BitDistribution;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(n: usize) -> usize {
    n.div_ceil(WORD_BITS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedPlane {
    pub scale: f64,
    pub signs: Vec<u64>,
    pub active: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedPlanes {
    element_count: usize,
    planes: Vec<PackedPlane>,
}

fn padding_mask(n: usize) -> u64 {
    match n % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl PackedPlanes {
    /// Builds from raw words, checking the layout invariants.
    pub fn from_raw(element_count: usize, planes: Vec<PackedPlane>) -> Result<Self> {
        let words = words_for(element_count);
        let tail = padding_mask(element_count);
        for (i, p) in planes.iter().enumerate() {
            if p.signs.len() != words || p.active.len() != words {
                return Err(Error::InvalidInput(format!(
                    "plane {}: expected {words} words",
                    i + 1
                )));
            }
            if !(p.scale.is_finite() && p.scale >= 0.0) {
                return Err(Error::InvalidInput(format!("plane {}: scale {}", i + 1, p.scale)));
            }
            for w in 0..words {
                if p.signs[w] & !p.active[w] != 0 {
                    return Err(Error::InvalidInput(format!(
                        "plane {}: sign bit set on inactive element",
                        i + 1
                    )));
                }
                if i > 0 && p.active[w] & !planes[i - 1].active[w] != 0 {
                    return Err(Error::InvalidInput(format!(
                        "plane {}: activity not contained in previous plane",
                        i + 1
                    )));
                }
            }
            if words > 0 && (p.active[words - 1] & !tail != 0) {
                return Err(Error::InvalidInput(format!("plane {}: padding bits set", i + 1)));
            }
        }
        Ok(Self {
            element_count,
            planes,
        })
    }

    pub fn element_count(&self) -> usize {
        self.element_count
    }

    pub fn planes(&self) -> &[PackedPlane] {
        &self.planes
    }

    pub fn word_count(&self) -> usize {
        words_for(self.element_count)
    }

    pub fn pack(h: &HeterogeneousBinaryTensor) -> Self {
        pack(h)
    }

    /// Per-element bitwidths read back from the activity maps (0 for
    /// elements active in no plane, e.g. gathered padding).
    pub fn widths(&self) -> Vec<u8> {
        (0..self.element_count)
            .map(|j| {
                let (w, b) = (j / WORD_BITS, j % WORD_BITS);
                self.planes
                    .iter()
                    .take_while(|p| p.active[w] >> b & 1 == 1)
                    .count() as u8
            })
            .collect()
    }

    /// Inverse of [`pack`]. `shape` must have `element_count` elements.
    pub fn unpack(&self, shape: Vec<usize>) -> Result<HeterogeneousBinaryTensor> {
        let mask = BitMask::new(shape, self.widths())?;
        let planes = self
            .planes
            .iter()
            .map(|p| BitPlane {
                scale: p.scale,
                signs: (0..self.element_count)
                    .map(|j| {
                        let (w, b) = (j / WORD_BITS, j % WORD_BITS);
                        match (p.active[w] >> b & 1, p.signs[w] >> b & 1) {
                            (0, _) => 0,
                            (_, 1) => 1,
                            _ => -1,
                        }
                    })
                    .collect(),
            })
            .collect();
        HeterogeneousBinaryTensor::from_parts(mask, planes)
    }

    /// Selects elements by index; `None` yields an element inactive in every
    /// plane (contributes nothing to dot products), used for zero padding.
    pub fn gather(&self, indices: &[Option<usize>]) -> Result<PackedPlanes> {
        let n = indices.len();
        let words = words_for(n);
        let mut planes: Vec<PackedPlane> = self
            .planes
            .iter()
            .map(|p| PackedPlane {
                scale: p.scale,
                signs: vec![0; words],
                active: vec![0; words],
            })
            .collect();
        for (dst, src) in indices.iter().enumerate() {
            let Some(src) = *src else { continue };
            if src >= self.element_count {
                return Err(Error::InvalidInput(format!(
                    "gather index {src} out of range {}",
                    self.element_count
                )));
            }
            let (sw, sb) = (src / WORD_BITS, src % WORD_BITS);
            let (dw, db) = (dst / WORD_BITS, dst % WORD_BITS);
            for (out, p) in planes.iter_mut().zip(&self.planes) {
                out.active[dw] |= (p.active[sw] >> sb & 1) << db;
                out.signs[dw] |= (p.signs[sw] >> sb & 1) << db;
            }
        }
        Ok(PackedPlanes {
            element_count: n,
            planes,
        })
    }

    /// Contiguous element range `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<PackedPlanes> {
        let idx: Vec<Option<usize>> = (start..start + len).map(Some).collect();
        self.gather(&idx)
    }

    /// Dense value of each element, `Σ μ_i · (±1)` over active planes.
    pub fn dense_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.element_count];
        for p in &self.planes {
            for (j, o) in out.iter_mut().enumerate() {
                let (w, b) = (j / WORD_BITS, j % WORD_BITS);
                if p.active[w] >> b & 1 == 1 {
                    *o += if p.signs[w] >> b & 1 == 1 { p.scale } else { -p.scale };
                }
            }
        }
        out
    }
}

pub fn pack(h: &HeterogeneousBinaryTensor) -> PackedPlanes {
    let n = h.len();
    let words = words_for(n);
    let planes = h
        .planes()
        .iter()
        .map(|p| {
            let mut signs = vec![0u64; words];
            let mut active = vec![0u64; words];
            for (j, &s) in p.signs.iter().enumerate() {
                let (w, b) = (j / WORD_BITS, j % WORD_BITS);
                if s != 0 {
                    active[w] |= 1 << b;
                }
                if s > 0 {
                    signs[w] |= 1 << b;
                }
            }
            PackedPlane {
                scale: p.scale,
                signs,
                active,
            }
        })
        .collect();
    PackedPlanes {
        element_count: n,
        planes,
    }
}

fn check_len(w: &PackedPlanes, a: &PackedPlanes) -> Result<()> {
    if w.element_count != a.element_count {
        return Err(Error::ShapeMismatch {
            left: vec![w.element_count],
            right: vec![a.element_count],
        });
    }
    Ok(())
}

/// Signed agreement count of one plane pair: `Σ_j s_w[j]·s_a[j]` over the
/// elements active in both.
#[inline]
pub fn plane_pair_dot(w: &PackedPlane, a: &PackedPlane) -> i64 {
    let mut agree = 0u64;
    let mut common_total = 0u64;
    for ((ws, wa), (as_, aa)) in w.signs.iter().zip(&w.active).zip(a.signs.iter().zip(&a.active)) {
        let common = wa & aa;
        agree += (!(ws ^ as_) & common).count_ones() as u64;
        common_total += common.count_ones() as u64;
    }
    2 * agree as i64 - common_total as i64
}

/// `dot(reconstruct(w), reconstruct(a))` computed with xnor and popcount.
/// Plane pairs accumulate in `(i, k)` order; each pair's integer count is
/// exact.
pub fn xnor_dot(w: &PackedPlanes, a: &PackedPlanes) -> Result<f64> {
    check_len(w, a)?;
    let mut total = 0.0;
    for wp in &w.planes {
        for ap in &a.planes {
            let count = plane_pair_dot(wp, ap);
            total += wp.scale * ap.scale * count as f64;
        }
    }
    Ok(total)
}

pub fn xnor_matvec(rows: &[PackedPlanes], a: &PackedPlanes) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("xnor_matvec"));
    }
    let out = rows
        .iter()
        .map(|r| xnor_dot(r, a))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Tensor::from_vec(out))
}

/// Number of element-level bit pairs both operands actually evaluate,
/// `Σ_j M_w[j] · M_a[j]`.
pub fn active_bit_pairs(w: &PackedPlanes, a: &PackedPlanes) -> Result<u64> {
    check_len(w, a)?;
    let mut total = 0u64;
    for wp in &w.planes {
        for ap in &a.planes {
            total += wp
                .active
                .iter()
                .zip(&ap.active)
                .map(|(x, y)| (x & y).count_ones() as u64)
                .sum::<u64>();
        }
    }
    Ok(total)
}

/// Expected cost of a packed dot product between operands with the given
/// input (`m`) and weight (`n`) bit distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitOpCount {
    /// Average input bits times average weight bits.
    pub mn_factor: f64,
    /// `ceil(N/64) · m · n` word operations.
    pub word_ops: f64,
    /// Multiplications saved relative to `N` floating-point products,
    /// `64 / (m·n)`.
    pub reduction: f64,
}

pub fn bitop_count(m_dist: &BitDistribution, n_dist: &BitDistribution, n: usize) -> BitOpCount {
    let mn = m_dist.average() * n_dist.average();
    BitOpCount {
        mn_factor: mn,
        word_ops: words_for(n) as f64 * mn,
        reduction: WORD_BITS as f64 / mn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::{hetero_binarize, residual_binarize};
    use crate::bitalloc::{dist_from_avg, DistPolicy};

    fn example_weights() -> HeterogeneousBinaryTensor {
        let t = Tensor::from_vec(vec![0.1, -0.5, 0.9, -0.2]);
        hetero_binarize(&t, &BitMask::new(vec![4], vec![2, 1, 2, 1]).unwrap()).unwrap()
    }

    #[test]
    fn pack_example_words() {
        let p = pack(&example_weights());
        assert_eq!(p.planes()[0].active, vec![0b1111]);
        assert_eq!(p.planes()[0].signs, vec![0b0101]);
        assert_eq!(p.planes()[1].active, vec![0b0101]);
        assert_eq!(p.planes()[1].signs, vec![0b0100]);
    }

    #[test]
    fn word_counts_at_boundary() {
        let t = Tensor::gaussian(vec![64], 1).unwrap();
        let p = pack(&residual_binarize(&t, 1).unwrap());
        assert_eq!(p.planes()[0].active.len(), 1);
        assert_eq!(p.planes()[0].active[0], u64::MAX);

        let t = Tensor::gaussian(vec![65], 1).unwrap();
        let p = pack(&residual_binarize(&t, 1).unwrap());
        assert_eq!(p.planes()[0].active.len(), 2);
        assert_eq!(p.planes()[0].active[1], 1);
        assert_eq!(p.planes()[0].signs[1] & !1, 0);
    }

    #[test]
    fn unpack_round_trip() {
        let h = example_weights();
        assert_eq!(pack(&h).unpack(vec![4]).unwrap(), h);
    }

    #[test]
    fn xnor_dot_example() {
        let w = pack(&example_weights());
        let a_src = Tensor::from_vec(vec![0.5, 0.5, -0.5, 0.5]);
        let a = pack(&residual_binarize(&a_src, 1).unwrap());
        let d = xnor_dot(&w, &a).unwrap();
        assert!((d - (-0.825)).abs() < 1e-12, "{d}");
    }

    #[test]
    fn xnor_dot_all_positive_unit_is_sum() {
        let h = example_weights();
        let a = pack(&residual_binarize(&Tensor::from_vec(vec![1.0; 4]), 1).unwrap());
        let sum: f64 = h.reconstruct().data().iter().sum();
        assert!((xnor_dot(&pack(&h), &a).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn all_equal_signs_give_mu_nu_n() {
        let n = 130;
        let w = pack(&residual_binarize(&Tensor::from_vec(vec![0.75; n]), 1).unwrap());
        let a = pack(&residual_binarize(&Tensor::from_vec(vec![2.0; n]), 1).unwrap());
        assert_eq!(xnor_dot(&w, &a).unwrap(), 0.75 * 2.0 * n as f64);
    }

    #[test]
    fn length_mismatch() {
        let w = pack(&example_weights());
        let a = pack(&residual_binarize(&Tensor::from_vec(vec![1.0; 5]), 1).unwrap());
        assert!(matches!(xnor_dot(&w, &a), Err(Error::ShapeMismatch { .. })));
        assert!(xnor_matvec(&[w], &a).is_err());
    }

    #[test]
    fn identity_rows_select_elements() {
        let a_src = Tensor::gaussian(vec![10], 3).unwrap();
        let a_h = residual_binarize(&a_src, 2).unwrap();
        let a = pack(&a_h);
        let rows: Vec<PackedPlanes> = (0..10)
            .map(|r| {
                let mut words = vec![0u64; 1];
                words[0] = 1 << r;
                PackedPlanes::from_raw(
                    10,
                    vec![PackedPlane { scale: 1.0, signs: words.clone(), active: words }],
                )
                .unwrap()
            })
            .collect();
        let out = xnor_matvec(&rows, &a).unwrap();
        for (x, y) in out.data().iter().zip(a_h.reconstruct().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_with_padding() {
        let p = pack(&example_weights());
        let g = p.gather(&[Some(2), None, Some(0)]).unwrap();
        assert_eq!(g.dense_values()[1], 0.0);
        assert_eq!(g.dense_values()[0], p.dense_values()[2]);
        assert_eq!(g.widths(), vec![2, 0, 2]);
        assert!(g.unpack(vec![3]).is_err());
    }

    #[test]
    fn from_raw_rejects_bad_layout() {
        let bad_sign = PackedPlane { scale: 1.0, signs: vec![0b10], active: vec![0b01] };
        assert!(PackedPlanes::from_raw(2, vec![bad_sign]).is_err());
        let pad = PackedPlane { scale: 1.0, signs: vec![0], active: vec![0b111] };
        assert!(PackedPlanes::from_raw(2, vec![pad]).is_err());
        let p1 = PackedPlane { scale: 1.0, signs: vec![0], active: vec![0b01] };
        let p2 = PackedPlane { scale: 1.0, signs: vec![0], active: vec![0b10] };
        assert!(PackedPlanes::from_raw(2, vec![p1, p2]).is_err());
    }

    #[test]
    fn bitop_factors() {
        let d14 = dist_from_avg(1.4, &DistPolicy::Adjacent).unwrap();
        let c = bitop_count(&d14, &d14, 640);
        assert!((c.mn_factor - 1.96).abs() < 1e-9);
        assert!(c.mn_factor < 2.0);
        assert!((c.word_ops - 19.6).abs() < 1e-9);
        let d1 = dist_from_avg(1.0, &DistPolicy::Adjacent).unwrap();
        let c = bitop_count(&d1, &d1, 64);
        assert_eq!(c.mn_factor, 1.0);
        assert_eq!(c.reduction, 64.0);
        let d2 = dist_from_avg(2.0, &DistPolicy::Adjacent).unwrap();
        assert_eq!(bitop_count(&d2, &d2, 64).mn_factor, 4.0);
    }

    #[test]
    fn active_pairs_match_mask_products() {
        let w = pack(&example_weights());
        let a = pack(&residual_binarize(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]), 3).unwrap());
        // widths [2,1,2,1] against uniform 3
        assert_eq!(active_bit_pairs(&w, &a).unwrap(), 18);
    }
}
