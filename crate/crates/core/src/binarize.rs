//! Binarization functions.
//!
//! Residual error binarization approximates a tensor as `Σ μ_i · s_i`, where
//! plane `i` holds the signs of the residual left by planes `1..i` and `μ_i`
//! is the mean magnitude of that residual. The heterogeneous variant adds a
//! per-element bitwidth mask: element `j` only takes part in planes
//! `1..=M_j`, and each plane's scale is averaged over its active elements.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{mean_abs, Tensor};

/// Largest supported per-element bitwidth.
pub const MAX_BITS: u8 = 8;

/// `+1` for `x >= 0`, `-1` otherwise. Zero maps to `+1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn sign_i8(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Per-element bitwidth assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    shape: Vec<usize>,
    widths: Vec<u8>,
}

impl BitMask {
    pub fn new(shape: Vec<usize>, widths: Vec<u8>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(shape));
        }
        let n: usize = shape.iter().product();
        if n != widths.len() {
            return Err(Error::DataLength {
                shape,
                len: widths.len(),
            });
        }
        if let Some(&w) = widths.iter().find(|&&w| w == 0 || w > MAX_BITS) {
            return Err(Error::UnsupportedBitwidth(w as usize));
        }
        Ok(Self { shape, widths })
    }

    pub fn uniform(shape: Vec<usize>, bits: usize) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS as usize {
            return Err(Error::UnsupportedBitwidth(bits));
        }
        let n = shape.iter().product();
        Self::new(shape, vec![bits as u8; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn widths(&self) -> &[u8] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn max_bits(&self) -> u8 {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Number of sign bits stored, `Σ M_j`.
    pub fn total_bits(&self) -> usize {
        self.widths.iter().map(|&w| w as usize).sum()
    }

    pub fn average(&self) -> f64 {
        self.total_bits() as f64 / self.widths.len() as f64
    }
}

/// One bit position across the tensor. `signs[j]` is `±1` where element `j`
/// is active at this plane and `0` where it is not.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlane {
    pub scale: f64,
    pub signs: Vec<i8>,
}

impl BitPlane {
    pub fn is_active(&self, j: usize) -> bool {
        self.signs[j] != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousBinaryTensor {
    shape: Vec<usize>,
    planes: Vec<BitPlane>,
    mask: BitMask,
}

impl HeterogeneousBinaryTensor {
    /// Assembles a tensor from stored parts, checking that the planes agree
    /// with the mask (element `j` has a sign exactly in planes `1..=M_j`).
    pub fn from_parts(mask: BitMask, planes: Vec<BitPlane>) -> Result<Self> {
        if planes.len() != mask.max_bits() as usize {
            return Err(Error::InvalidInput(format!(
                "{} planes for a mask with max bitwidth {}",
                planes.len(),
                mask.max_bits()
            )));
        }
        for (i, plane) in planes.iter().enumerate() {
            if plane.signs.len() != mask.len() {
                return Err(Error::InvalidInput(format!(
                    "plane {} has {} signs, expected {}",
                    i + 1,
                    plane.signs.len(),
                    mask.len()
                )));
            }
            if !(plane.scale >= 0.0 && plane.scale.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "plane {} has invalid scale {}",
                    i + 1,
                    plane.scale
                )));
            }
            for (j, (&s, &w)) in plane.signs.iter().zip(mask.widths()).enumerate() {
                let active = (w as usize) > i;
                let ok = if active { s == 1 || s == -1 } else { s == 0 };
                if !ok {
                    return Err(Error::InvalidInput(format!(
                        "plane {} element {j}: sign {s} inconsistent with width {w}",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self {
            shape: mask.shape().to_vec(),
            planes,
            mask,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn max_bits(&self) -> usize {
        self.planes.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.planes.iter().map(|p| p.scale).collect()
    }

    pub fn reconstruct(&self) -> Tensor {
        reconstruct(self)
    }
}

/// `max(0, min(1, (x + 1) / 2))`.
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `+1` with probability `hard_sigmoid(t_j)`, else `-1`.
pub fn stochastic_binarize(t: &Tensor, rng: &mut RngStream) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&x| if rng.uniform() < hard_sigmoid(x) { 1.0 } else { -1.0 })
        .collect();
    t.like(data)
}

pub fn sign_binarize(t: &Tensor) -> Tensor {
    t.map(sign)
}

/// Returns `(alpha, signs)` with `alpha = mean(|t|)`.
pub fn scaled_sign_binarize(t: &Tensor) -> Result<(f64, Tensor)> {
    let alpha = mean_abs(t.data())?;
    Ok((alpha, sign_binarize(t)))
}

/// Homogeneous residual error binarization to `bits` planes.
pub fn residual_binarize(t: &Tensor, bits: usize) -> Result<HeterogeneousBinaryTensor> {
    if bits == 0 || bits > MAX_BITS as usize {
        return Err(Error::UnsupportedBitwidth(bits));
    }
    t.ensure_finite()?;
    let mut residual = t.data().to_vec();
    let mut planes = Vec::with_capacity(bits);
    for _ in 0..bits {
        let scale = mean_abs(&residual)?;
        let signs: Vec<i8> = residual.iter().map(|&e| sign_i8(e)).collect();
        for (e, &s) in residual.iter_mut().zip(&signs) {
            *e -= scale * s as f64;
        }
        planes.push(BitPlane { scale, signs });
    }
    Ok(HeterogeneousBinaryTensor {
        shape: t.shape().to_vec(),
        planes,
        mask: BitMask::uniform(t.shape().to_vec(), bits)?,
    })
}

/// Heterogeneous residual binarization: plane `n` is computed only over the
/// elements with `mask_j >= n`, and its scale is the mean residual magnitude
/// over those elements.
pub fn hetero_binarize(t: &Tensor, mask: &BitMask) -> Result<HeterogeneousBinaryTensor> {
    if t.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            left: t.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    t.ensure_finite()?;
    let widths = mask.widths();
    let max_bits = mask.max_bits() as usize;
    let mut residual = t.data().to_vec();
    let mut planes = Vec::with_capacity(max_bits);
    for level in 1..=max_bits {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (e, &w) in residual.iter().zip(widths) {
            if w as usize >= level {
                sum += e.abs();
                count += 1;
            }
        }
        assert!(count > 0, "plane {level} has no active elements");
        let scale = sum / count as f64;
        let mut signs = vec![0i8; residual.len()];
        for ((e, &w), s) in residual.iter_mut().zip(widths).zip(signs.iter_mut()) {
            if w as usize >= level {
                *s = sign_i8(*e);
                *e -= scale * *s as f64;
            }
        }
        planes.push(BitPlane { scale, signs });
    }
    Ok(HeterogeneousBinaryTensor {
        shape: t.shape().to_vec(),
        planes,
        mask: mask.clone(),
    })
}

/// `Σ_i μ_i · s_i` over each element's active planes.
pub fn reconstruct(h: &HeterogeneousBinaryTensor) -> Tensor {
    let mut out = vec![0.0; h.len()];
    for plane in &h.planes {
        for (o, &s) in out.iter_mut().zip(&plane.signs) {
            if s != 0 {
                *o += plane.scale * s as f64;
            }
        }
    }
    Tensor::new(h.shape.clone(), out).expect("shape validated at construction")
}

/// Straight-through estimator: passes `upstream` where `|t| <= 1`, zero
/// elsewhere.
pub fn ste_gradient(t: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    t.ensure_same_shape(upstream)?;
    let data = t
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    Ok(t.like(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EX: [f64; 4] = [0.1, -0.5, 0.9, -0.2];

    fn ex() -> Tensor {
        Tensor::from_vec(EX.to_vec())
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn hard_sigmoid_clamps() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(3.0), 1.0);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
        assert_eq!(hard_sigmoid(-1.0), 0.0);
        assert_eq!(hard_sigmoid(1.0), 1.0);
    }

    #[test]
    fn stochastic_extremes_are_deterministic() {
        let t = Tensor::from_vec(vec![5.0; 100]);
        let mut rng = RngStream::new(1);
        assert!(stochastic_binarize(&t, &mut rng).data().iter().all(|&x| x == 1.0));
        let t = Tensor::from_vec(vec![-5.0; 100]);
        assert!(stochastic_binarize(&t, &mut rng).data().iter().all(|&x| x == -1.0));
    }

    #[test]
    fn stochastic_at_zero_is_fair() {
        let t = Tensor::from_vec(vec![0.0; 100_000]);
        let b = stochastic_binarize(&t, &mut RngStream::new(11));
        let frac = b.data().iter().filter(|&&x| x > 0.0).count() as f64 / 1e5;
        // 3.2 sigma of a Binomial(1e5, 0.5) proportion is ~0.005
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn stochastic_mean_tracks_hard_sigmoid() {
        for &x in &[-0.6, -0.2, 0.3, 0.8] {
            let n = 50_000;
            let t = Tensor::from_vec(vec![x; n]);
            let b = stochastic_binarize(&t, &mut RngStream::new(5));
            let mean = b.data().iter().sum::<f64>() / n as f64;
            let p = hard_sigmoid(x);
            let sd = 2.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((mean - (2.0 * p - 1.0)).abs() < 5.0 * sd, "{x}: {mean}");
        }
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_binarize(&Tensor::from_vec(vec![0.1, -0.5])).data(), &[1.0, -1.0]);
        assert_eq!(sign_binarize(&Tensor::from_vec(vec![0.0])).data(), &[1.0]);
        let t = ex();
        assert_eq!(sign_binarize(&t.scale(3.7)), sign_binarize(&t));
    }

    #[test]
    fn scaled_sign_examples() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, -2.0]);
        let (alpha, s) = scaled_sign_binarize(&t).unwrap();
        assert_eq!(alpha, 2.0);
        assert_eq!(s.scale(alpha).data(), &[2.0, 2.0, 2.0, -2.0]);
        assert_eq!(alpha, t.mean_abs().unwrap());

        let c = Tensor::from_vec(vec![0.7, 0.7]);
        let (alpha, s) = scaled_sign_binarize(&c).unwrap();
        assert_eq!(s.scale(alpha), c);
        assert!(scaled_sign_binarize(&Tensor::from_vec(vec![])).is_err());
    }

    #[test]
    fn residual_one_and_two_bits() {
        let h1 = residual_binarize(&ex(), 1).unwrap();
        assert!((h1.planes()[0].scale - 0.425).abs() < 1e-12);
        assert_eq!(h1.planes()[0].signs, vec![1, -1, 1, -1]);
        assert_close(h1.reconstruct().data(), &[0.425, -0.425, 0.425, -0.425], 1e-12);

        let h2 = residual_binarize(&ex(), 2).unwrap();
        // E_1 = [-0.325, -0.075, 0.475, 0.225]
        assert!((h2.planes()[1].scale - 0.275).abs() < 1e-12);
        assert_eq!(h2.planes()[1].signs, vec![-1, -1, 1, 1]);
        assert_close(h2.reconstruct().data(), &[0.15, -0.7, 0.7, -0.15], 1e-12);
    }

    #[test]
    fn residual_exact_for_symmetric_pair() {
        let t = Tensor::from_vec(vec![0.3, -0.3]);
        for n in 1..=4 {
            let h = residual_binarize(&t, n).unwrap();
            assert_eq!(h.planes()[0].scale, 0.3);
            assert!(h.planes()[1..].iter().all(|p| p.scale == 0.0));
            assert_eq!(h.reconstruct(), t);
        }
    }

    #[test]
    fn residual_rejects_bad_bitwidth() {
        assert_eq!(residual_binarize(&ex(), 0), Err(Error::UnsupportedBitwidth(0)));
        assert_eq!(residual_binarize(&ex(), 9), Err(Error::UnsupportedBitwidth(9)));
    }

    #[test]
    fn hetero_example() {
        let mask = BitMask::new(vec![4], vec![2, 1, 2, 1]).unwrap();
        let h = hetero_binarize(&ex(), &mask).unwrap();
        assert!((h.planes()[0].scale - 0.425).abs() < 1e-12);
        // active residuals at plane 2: -0.325 and 0.475
        assert!((h.planes()[1].scale - 0.4).abs() < 1e-12);
        assert_eq!(h.planes()[1].signs, vec![-1, 0, 1, 0]);
        assert_close(h.reconstruct().data(), &[0.025, -0.425, 0.825, -0.425], 1e-12);
        assert_eq!(mask.average(), 1.5);
        assert_eq!(mask.total_bits(), 6);
        let stored: usize = h
            .planes()
            .iter()
            .map(|p| p.signs.iter().filter(|&&s| s != 0).count())
            .sum();
        assert_eq!(stored, 6);
    }

    #[test]
    fn hetero_shape_mismatch() {
        let mask = BitMask::uniform(vec![3], 1).unwrap();
        assert!(matches!(
            hetero_binarize(&ex(), &mask),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert_eq!(residual_binarize(&t, 1), Err(Error::NonFinite(1)));
    }

    #[test]
    fn zero_scale_plane_reconstructs_zero() {
        let t = Tensor::from_vec(vec![0.0; 5]);
        let h = residual_binarize(&t, 1).unwrap();
        assert_eq!(h.planes()[0].scale, 0.0);
        assert!(h.reconstruct().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn distinct_values_bounded() {
        let t = Tensor::gaussian(vec![4096], 3).unwrap();
        let widths: Vec<u8> = (0..4096).map(|j| (j % 3 + 1) as u8).collect();
        let mask = BitMask::new(vec![4096], widths).unwrap();
        let r = hetero_binarize(&t, &mask).unwrap().reconstruct();
        let mut vals: Vec<u64> = r.data().iter().map(|x| x.to_bits()).collect();
        vals.sort_unstable();
        vals.dedup();
        // 2 + 4 + 8
        assert!(vals.len() <= 14, "{}", vals.len());
        assert!(vals.len() > 8);
    }

    #[test]
    fn ste_examples() {
        let t = Tensor::from_vec(vec![0.5, 1.5, -1.0]);
        let up = Tensor::from_vec(vec![2.0, 2.0, 3.0]);
        assert_eq!(ste_gradient(&t, &up).unwrap().data(), &[2.0, 0.0, 3.0]);
        assert!(ste_gradient(&t, &Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn from_parts_validates() {
        let mask = BitMask::new(vec![2], vec![2, 1]).unwrap();
        let good = vec![
            BitPlane { scale: 1.0, signs: vec![1, -1] },
            BitPlane { scale: 0.5, signs: vec![-1, 0] },
        ];
        assert!(HeterogeneousBinaryTensor::from_parts(mask.clone(), good.clone()).is_ok());
        let mut bad = good.clone();
        bad[1].signs = vec![-1, 1];
        assert!(HeterogeneousBinaryTensor::from_parts(mask.clone(), bad).is_err());
        assert!(HeterogeneousBinaryTensor::from_parts(mask, good[..1].to_vec()).is_err());
    }

    /// Every element's reconstruction must be one of the `2^{M_j}` prefix
    /// sums `±μ_1 ± … ± μ_{M_j}`.
    fn brute_force_member(value: f64, scales: &[f64], width: usize) -> bool {
        (0..1u32 << width).any(|choice| {
            let v: f64 = (0..width)
                .map(|i| if choice >> i & 1 == 1 { scales[i] } else { -scales[i] })
                .sum();
            (v - value).abs() <= 1e-9 * (1.0 + v.abs())
        })
    }

    proptest! {
        #[test]
        fn reconstruction_values_enumerable(
            data in prop::collection::vec(-3.0f64..3.0, 1..16),
            seed in 0u64..1000,
        ) {
            let mut rng = RngStream::new(seed);
            let widths: Vec<u8> = data.iter().map(|_| 1 + rng.below(3) as u8).collect();
            let mask = BitMask::new(vec![data.len()], widths.clone()).unwrap();
            let h = hetero_binarize(&Tensor::from_vec(data), &mask).unwrap();
            let scales = h.scales();
            for (v, &w) in h.reconstruct().data().iter().zip(&widths) {
                prop_assert!(brute_force_member(*v, &scales, w as usize));
            }
        }

        #[test]
        fn residual_error_non_increasing(
            data in prop::collection::vec(-5.0f64..5.0, 1..64),
        ) {
            let t = Tensor::from_vec(data);
            let mut prev = f64::INFINITY;
            for n in 1..=6 {
                let r = residual_binarize(&t, n).unwrap().reconstruct();
                let err = t.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(err <= prev + 1e-12);
                prev = err;
            }
        }

        #[test]
        fn scales_are_active_residual_means(
            data in prop::collection::vec(-2.0f64..2.0, 1..40),
            seed in 0u64..1000,
        ) {
            let mut rng = RngStream::new(seed);
            let widths: Vec<u8> = data.iter().map(|_| 1 + rng.below(4) as u8).collect();
            let t = Tensor::from_vec(data.clone());
            let mask = BitMask::new(vec![data.len()], widths.clone()).unwrap();
            let h = hetero_binarize(&t, &mask).unwrap();
            let mut partial = vec![0.0; data.len()];
            for (i, plane) in h.planes().iter().enumerate() {
                let active: Vec<usize> = (0..data.len()).filter(|&j| widths[j] as usize > i).collect();
                let mean = active.iter().map(|&j| (data[j] - partial[j]).abs()).sum::<f64>() / active.len() as f64;
                prop_assert!(plane.scale >= 0.0);
                prop_assert!((plane.scale - mean).abs() < 1e-12);
                for &j in &active {
                    partial[j] += plane.scale * plane.signs[j] as f64;
                }
            }
        }

        #[test]
        fn ste_idempotent(data in prop::collection::vec(-3.0f64..3.0, 1..32)) {
            let t = Tensor::from_vec(data);
            let ones = t.map(|_| 1.0);
            let once = ste_gradient(&t, &ones).unwrap();
            let twice = ste_gradient(&t, &once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
