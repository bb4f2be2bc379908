//! Asymmetric affine fake-quantization with a quantized zero point.
//!
//! A tensor element `x` in channel `c` maps to
//! `s·(clamp(⌊x/s − ⌊z/s⌉⌉, 0, 2^b−1) + ⌊z/s⌉)` where `⌊·⌉` rounds half to
//! even. The arithmetic runs in `f64` and the dequantized value is rounded
//! back to `f32` once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::count_backward;
use crate::tensor::Tensor;

/// Bit-width that disables quantization entirely.
pub const PASSTHROUGH_BITS: u32 = 32;

/// Smallest step; also assigned to a channel whose values are all zero.
pub const DEGENERATE_STEP: f32 = 1e-8;

/// Number of grid points of the MSE step search.
pub const MSE_GRID_POINTS: usize = 200;
pub const MSE_GRID_MIN: f64 = 0.2;
pub const MSE_GRID_MAX: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub step: Vec<f32>,
    pub zero_point: Vec<f32>,
    pub granularity: Granularity,
}

/// Weight and input quantizers of one conv/fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub weight: QuantParams,
    pub input: QuantParams,
}

impl LayerQuant {
    pub fn bits(&self) -> (u32, u32) {
        (self.weight.bits, self.input.bits)
    }
}

/// Integer representation of a quantized tensor: per-element codes in
/// `[0, 2^b−1]` and the per-channel integer offset `⌊z/s⌉`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantCodes {
    pub codes: Vec<u32>,
    pub offsets: Vec<i64>,
}

pub fn levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == PASSTHROUGH_BITS || (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Quant(format!("unsupported bit-width {bits}")))
    }
}

impl QuantParams {
    pub fn passthrough(granularity: Granularity, channels: usize) -> Self {
        Self {
            bits: PASSTHROUGH_BITS,
            step: vec![1.0; channels],
            zero_point: vec![0.0; channels],
            granularity,
        }
    }

    pub fn per_tensor(bits: u32, step: f32, zero_point: f32) -> Self {
        Self {
            bits,
            step: vec![step],
            zero_point: vec![zero_point],
            granularity: Granularity::PerTensor,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    pub fn channels(&self) -> usize {
        self.step.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.step.is_empty() || self.step.len() != self.zero_point.len() {
            return Err(Error::Quant(format!(
                "{} steps vs {} zero points",
                self.step.len(),
                self.zero_point.len()
            )));
        }
        if let Some(s) = self.step.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Quant(format!("non-positive step {s}")));
        }
        if self.zero_point.iter().any(|z| !z.is_finite()) {
            return Err(Error::Quant("non-finite zero point".into()));
        }
        if self.granularity == Granularity::PerTensor && self.step.len() != 1 {
            return Err(Error::Quant(
                "per-tensor params carry more than one step".into(),
            ));
        }
        Ok(())
    }

    /// Maps every element index of `x` to its channel.
    fn channel_layout(&self, x: &Tensor) -> Result<ChannelLayout> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelLayout {
                inner: x.numel().max(1),
                channels: 1,
            }),
            Granularity::PerChannel { axis } => {
                if axis >= x.ndim() || x.dim(axis) != self.channels() {
                    return Err(Error::Shape(format!(
                        "{} quantization channels for axis {axis} of {:?}",
                        self.channels(),
                        x.shape()
                    )));
                }
                Ok(ChannelLayout {
                    inner: x.shape()[axis + 1..].iter().product(),
                    channels: self.channels(),
                })
            }
        }
    }

    /// Copy with every per-channel step and zero point multiplied by `scale[c]`.
    pub fn rescaled(&self, scale: &[f32]) -> Result<Self> {
        if scale.len() != self.channels() {
            return Err(Error::Shape(format!(
                "{} scales for {} channels",
                scale.len(),
                self.channels()
            )));
        }
        Ok(Self {
            bits: self.bits,
            step: self.step.iter().zip(scale).map(|(s, c)| s * c).collect(),
            zero_point: self
                .zero_point
                .iter()
                .zip(scale)
                .map(|(z, c)| z * c)
                .collect(),
            granularity: self.granularity,
        })
    }
}

#[derive(Clone, Copy)]
struct ChannelLayout {
    inner: usize,
    channels: usize,
}

impl ChannelLayout {
    fn channel(&self, index: usize) -> usize {
        (index / self.inner) % self.channels
    }
}

/// Integer offset `round(z/s)` of a zero point.
#[inline]
pub(crate) fn offset(step: f64, zero_point: f64) -> f64 {
    (zero_point / step).round_ties_even()
}

/// Clamped integer code of one value.
#[inline]
pub(crate) fn code(v: f32, step: f32, offset: f64, top: f64) -> f64 {
    (v as f64 / step as f64 - offset)
        .round_ties_even()
        .clamp(0.0, top)
}

/// Fake-quantizes `x`: returns dequantized values on the affine lattice.
pub fn quantize(x: &Tensor, q: &QuantParams) -> Result<Tensor> {
    q.validate()?;
    if q.is_passthrough() {
        return Ok(x.clone());
    }
    let layout = q.channel_layout(x)?;
    let top = levels(q.bits);
    let per_channel: Vec<(f64, f64)> = q
        .step
        .iter()
        .zip(&q.zero_point)
        .map(|(&s, &z)| (s as f64, offset(s as f64, z as f64)))
        .collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (s, zi) = per_channel[layout.channel(i)];
            let code = (v as f64 / s - zi).round_ties_even().clamp(0.0, top);
            (s * (code + zi)) as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Integer codes and offsets that [`quantize`] would dequantize.
pub fn quantize_codes(x: &Tensor, q: &QuantParams) -> Result<QuantCodes> {
    q.validate()?;
    if q.is_passthrough() {
        return Err(Error::Quant(
            "passthrough quantizer has no integer codes".into(),
        ));
    }
    let layout = q.channel_layout(x)?;
    let top = levels(q.bits);
    let offsets: Vec<i64> = q
        .step
        .iter()
        .zip(&q.zero_point)
        .map(|(&s, &z)| offset(s as f64, z as f64) as i64)
        .collect();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = layout.channel(i);
            code(v, q.step[c], offsets[c] as f64, top) as u32
        })
        .collect();
    Ok(QuantCodes { codes, offsets })
}

/// Per-channel `(min, max)` for the given granularity.
fn channel_ranges(x: &Tensor, granularity: Granularity) -> Result<Vec<(f32, f32)>> {
    if x.numel() == 0 {
        return Err(Error::Quant(
            "cannot derive a range from an empty tensor".into(),
        ));
    }
    let (channels, inner) = match granularity {
        Granularity::PerTensor => (1, x.numel()),
        Granularity::PerChannel { axis } => {
            if axis >= x.ndim() {
                return Err(Error::Shape(format!("axis {axis} of {:?}", x.shape())));
            }
            (x.dim(axis), x.shape()[axis + 1..].iter().product())
        }
    };
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); channels];
    for (i, &v) in x.data().iter().enumerate() {
        let r = &mut ranges[(i / inner) % channels];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    Ok(ranges)
}

/// Min-max step. A constant channel gets step `|v|`, so its zero point
/// `z = v` has offset ±1 and code 0 reproduces `v` exactly.
fn minmax_step(lo: f32, hi: f32, bits: u32) -> f32 {
    let step = ((hi as f64 - lo as f64) / levels(bits)) as f32;
    if step > 0.0 && step.is_finite() {
        step
    } else if lo.abs() >= DEGENERATE_STEP && lo.is_finite() {
        lo.abs()
    } else {
        DEGENERATE_STEP
    }
}

/// Full dynamic-range initialization: `Δ = (max−min)/(2^b−1)`, `z = min`.
pub fn init_minmax(x: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    let ranges = channel_ranges(x, granularity)?;
    if bits == PASSTHROUGH_BITS {
        return Ok(QuantParams::passthrough(granularity, ranges.len()));
    }
    Ok(QuantParams {
        bits,
        step: ranges
            .iter()
            .map(|&(lo, hi)| minmax_step(lo, hi, bits))
            .collect(),
        zero_point: ranges.iter().map(|&(lo, _)| lo).collect(),
        granularity,
    })
}

/// Candidate range-scale factors of the MSE search, ascending. Includes 1.0
/// so the min-max point is always a candidate.
pub fn mse_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..MSE_GRID_POINTS)
        .map(|i| {
            MSE_GRID_MIN + (MSE_GRID_MAX - MSE_GRID_MIN) * i as f64 / (MSE_GRID_POINTS - 1) as f64
        })
        .collect();
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Step and zero point for one channel at scale factor `alpha` of the min-max range.
///
/// One-sided channels (`min ≥ 0`) keep the lower bound and shrink from the
/// top; mixed-sign channels shrink around the range midpoint.
pub fn scaled_range(lo: f32, hi: f32, bits: u32, alpha: f64) -> (f32, f32) {
    let base = minmax_step(lo, hi, bits);
    if !(hi > lo) {
        return (base, lo);
    }
    let step = (base as f64 * alpha) as f32;
    let zero_point = if lo >= 0.0 {
        lo
    } else {
        let mid = (lo as f64 + hi as f64) / 2.0;
        (mid - alpha * (hi as f64 - lo as f64) / 2.0) as f32
    };
    (step, zero_point)
}

fn channel_sq_err(values: &[f32], step: f32, zero_point: f32, bits: u32) -> f64 {
    let s = step as f64;
    let zi = offset(s, zero_point as f64);
    let top = levels(bits);
    values
        .iter()
        .map(|&v| {
            let code = (v as f64 / s - zi).round_ties_even().clamp(0.0, top);
            let d = v as f64 - (s * (code + zi)) as f32 as f64;
            d * d
        })
        .sum()
}

/// Per-channel MSE-optimal step over a fixed grid of range scales.
/// Ties go to the smaller step.
pub fn calibrate_step_mse(x: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    let ranges = channel_ranges(x, granularity)?;
    if bits == PASSTHROUGH_BITS {
        return Ok(QuantParams::passthrough(granularity, ranges.len()));
    }
    let channels = ranges.len();
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); channels];
    let inner = x.numel() / channels;
    match granularity {
        Granularity::PerTensor => values[0].extend_from_slice(x.data()),
        Granularity::PerChannel { .. } => {
            for (i, &v) in x.data().iter().enumerate() {
                values[(i / inner) % channels].push(v);
            }
        }
    }
    let grid = mse_grid();
    let mut step = Vec::with_capacity(channels);
    let mut zero_point = Vec::with_capacity(channels);
    for (vals, &(lo, hi)) in values.iter().zip(&ranges) {
        let (s0, z0) = scaled_range(lo, hi, bits, 1.0);
        let mut best = (f64::INFINITY, s0, z0);
        for &alpha in &grid {
            let (s, z) = scaled_range(lo, hi, bits, alpha);
            let err = channel_sq_err(vals, s, z, bits);
            if err < best.0 {
                best = (err, s, z);
            }
        }
        step.push(best.1);
        zero_point.push(best.2);
    }
    Ok(QuantParams {
        bits,
        step,
        zero_point,
        granularity,
    })
}

/// Straight-through gradients of [`quantize`].
#[derive(Debug, Clone)]
pub struct SteGrads {
    pub x: Tensor,
    pub step: Vec<f32>,
    pub zero_point: Vec<f32>,
}

/// Straight-through backward pass.
///
/// Rounding is treated as a frozen offset and clamping stays live. With
/// `t = x/s − ⌊z/s⌉`, `r = ⌊t⌉ − t` and `ρ = ⌊z/s⌉ − z/s`:
/// inside `[0, 2^b−1]` the output behaves as `x + s·r`; below and above it
/// behaves as `z + s·ρ` and `z + s·(2^b−1+ρ)`.
pub fn ste_backward(x: &Tensor, q: &QuantParams, upstream: &Tensor) -> Result<SteGrads> {
    count_backward();
    q.validate()?;
    x.expect_same_shape(upstream)?;
    let channels = q.channels();
    if q.is_passthrough() {
        return Ok(SteGrads {
            x: upstream.clone(),
            step: vec![0.0; channels],
            zero_point: vec![0.0; channels],
        });
    }
    let layout = q.channel_layout(x)?;
    let top = levels(q.bits);
    let mut gstep = vec![0.0f64; channels];
    let mut gzero = vec![0.0f64; channels];
    let mut gx = vec![0.0f32; x.numel()];
    for (i, (&v, &g)) in x.data().iter().zip(upstream.data()).enumerate() {
        let c = layout.channel(i);
        let s = q.step[c] as f64;
        let z_over_s = q.zero_point[c] as f64 / s;
        let zi = z_over_s.round_ties_even();
        let t = v as f64 / s - zi;
        let g64 = g as f64;
        if t < 0.0 {
            gstep[c] += g64 * (zi - z_over_s);
            gzero[c] += g64;
        } else if t > top {
            gstep[c] += g64 * (top + zi - z_over_s);
            gzero[c] += g64;
        } else {
            gx[i] = g;
            gstep[c] += g64 * (t.round_ties_even() - t);
        }
    }
    Ok(SteGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        step: gstep.into_iter().map(|v| v as f32).collect(),
        zero_point: gzero.into_iter().map(|v| v as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    fn mse(x: &Tensor, q: &QuantParams) -> f64 {
        x.mse(&quantize(x, q).unwrap())
    }

    #[test]
    fn extra_bit_can_lose_an_exact_lattice() {
        // Points on the 2-bit min-max lattice are reproduced exactly, but the
        // 3-bit lattice over the same range does not contain 1/3.
        let x = Tensor::from_vec(vec![0.0, 1.0 / 3.0, 1.0]);
        let two = init_minmax(&x, 2, Granularity::PerTensor).unwrap();
        let three = init_minmax(&x, 3, Granularity::PerTensor).unwrap();
        assert!(mse(&x, &two) < 1e-14);
        assert!(mse(&x, &three) > 1e-4);
    }

    #[test]
    fn zeros_stay_zero() {
        let x = Tensor::zeros(&[3, 4]);
        let q = QuantParams::per_tensor(4, 0.1, 0.0);
        assert_eq!(quantize(&x, &q).unwrap(), x);
    }

    #[test]
    fn two_bit_lattice() {
        // Lattice {0, 1/3, 2/3, 1}: 0.3 is nearest to 1/3.
        let x = Tensor::from_vec(vec![0.0, 0.3, 1.0]);
        let q = init_minmax(&x, 2, Granularity::PerTensor).unwrap();
        assert!((q.step[0] - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(q.zero_point[0], 0.0);
        let y = quantize(&x, &q).unwrap();
        let expected = [0.0f32, 1.0 / 3.0, 1.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert_eq!(quantize_codes(&x, &q).unwrap().codes, vec![0, 1, 3]);
    }

    #[test]
    fn minmax_unit_range() {
        let x = Tensor::from_vec((0..=100).map(|i| i as f32 / 100.0).collect());
        let q = init_minmax(&x, 8, Granularity::PerTensor).unwrap();
        assert_eq!(q.step[0], (1.0f64 / 255.0) as f32);
        assert_eq!(q.zero_point[0], 0.0);
    }

    #[test]
    fn flat_channel_is_reconstructed() {
        let x = Tensor::full(&[2, 5], 0.75);
        let q = init_minmax(&x, 4, Granularity::PerChannel { axis: 0 }).unwrap();
        assert_eq!(q.step, vec![0.75; 2]);
        assert_eq!(quantize_codes(&x, &q).unwrap().codes, vec![0; 10]);
        assert_eq!(quantize(&x, &q).unwrap(), x);

        let y = Tensor::full(&[4], -0.013);
        let q = init_minmax(&y, 4, Granularity::PerTensor).unwrap();
        assert_eq!(quantize(&y, &q).unwrap(), y);

        let z = Tensor::full(&[3], 0.0);
        let q = init_minmax(&z, 4, Granularity::PerTensor).unwrap();
        assert_eq!(q.step, vec![DEGENERATE_STEP]);
        assert_eq!(quantize(&z, &q).unwrap(), z);
    }

    #[test]
    fn per_channel_matches_slices() {
        let w = gaussian(&[2, 3, 3, 3], 11);
        let q = init_minmax(&w, 4, Granularity::PerChannel { axis: 0 }).unwrap();
        for c in 0..2 {
            let slice = Tensor::from_vec(w.row(c).to_vec());
            let qc = init_minmax(&slice, 4, Granularity::PerTensor).unwrap();
            assert_eq!(q.step[c], qc.step[0]);
            assert_eq!(q.zero_point[c], qc.zero_point[0]);
        }
    }

    #[test]
    fn passthrough_is_identity() {
        let x = gaussian(&[10], 1);
        let q = init_minmax(&x, 32, Granularity::PerTensor).unwrap();
        assert_eq!(quantize(&x, &q).unwrap(), x);
    }

    #[test]
    fn rejects_bad_params() {
        let x = gaussian(&[4], 2);
        assert!(quantize(&x, &QuantParams::per_tensor(4, 0.0, 0.0)).is_err());
        assert!(quantize(&x, &QuantParams::per_tensor(4, -1.0, 0.0)).is_err());
        assert!(quantize(&x, &QuantParams::per_tensor(9, 1.0, 0.0)).is_err());
        let pc = QuantParams {
            bits: 4,
            step: vec![0.1; 3],
            zero_point: vec![0.0; 3],
            granularity: Granularity::PerChannel { axis: 0 },
        };
        assert!(matches!(quantize(&x, &pc), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_zero_on_lattice_data() {
        // 4-bit lattice with step 0.5 starting at -2.0.
        let x = Tensor::from_vec((0..16).map(|i| -2.0 + 0.5 * i as f32).collect());
        let q = calibrate_step_mse(&x, 4, Granularity::PerTensor).unwrap();
        assert_eq!(mse(&x, &q), 0.0);
    }

    #[test]
    fn mse_search_matches_dense_scan() {
        let x = gaussian(&[512], 5);
        let q = calibrate_step_mse(&x, 4, Granularity::PerTensor).unwrap();
        // Independent scan: reference quantizer over the same candidates.
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v as f64), b.max(v as f64))
            });
        let base = (hi - lo) / 15.0;
        let mut best = (f64::INFINITY, 0.0f64);
        for i in 0..=200 {
            let alpha = if i == 200 {
                1.0
            } else {
                0.2 + i as f64 / 199.0
            };
            let s = (base as f32 as f64 * alpha) as f32 as f64;
            let mid = (lo + hi) / 2.0;
            let z = (mid - alpha * (hi - lo) / 2.0) as f32 as f64;
            let zi = (z / s).round_ties_even();
            let err: f64 = x
                .data()
                .iter()
                .map(|&v| {
                    let c = (v as f64 / s - zi).round_ties_even().clamp(0.0, 15.0);
                    (v as f64 - (s * (c + zi)) as f32 as f64).powi(2)
                })
                .sum();
            if err < best.0 || (err == best.0 && s < best.1) {
                best = (err, s);
            }
        }
        assert_eq!(q.step[0] as f64, best.1);
    }

    #[test]
    fn mse_search_never_worse_than_minmax() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(8..200);
            let x = gaussian(&[n], 1000 + seed).map(|v| v * rng.random_range(0.1..3.0));
            let bits = rng.random_range(2..=8);
            let a = calibrate_step_mse(&x, bits, Granularity::PerTensor).unwrap();
            let b = init_minmax(&x, bits, Granularity::PerTensor).unwrap();
            assert!(mse(&x, &a) <= mse(&x, &b), "seed {seed}");
        }
    }

    #[test]
    fn ste_inside_range_passes_through() {
        let x = Tensor::from_vec(vec![0.11, 0.52, 0.93]);
        let q = QuantParams::per_tensor(4, 0.1, 0.0);
        let up = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(ste_backward(&x, &q, &up).unwrap().x, up);
    }

    #[test]
    fn ste_blocks_clamped_elements() {
        let x = Tensor::from_vec(vec![50.0, -50.0]);
        let q = QuantParams::per_tensor(4, 0.1, 0.0);
        let up = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(ste_backward(&x, &q, &up).unwrap().x.data(), &[0.0, 0.0]);
    }

    /// Quantizer with rounding residuals frozen at `(s0, z0)` and live clamping.
    fn frozen_surrogate(x: &[f32], up: &[f32], s0: f64, z0: f64, s: f64, z: f64, top: f64) -> f64 {
        let zi0 = (z0 / s0).round_ties_even();
        let rho = zi0 - z0 / s0;
        x.iter()
            .zip(up)
            .map(|(&v, &g)| {
                let t0 = v as f64 / s0 - zi0;
                let r = t0.clamp(0.0, top).round_ties_even() - t0.clamp(0.0, top);
                let t = v as f64 / s - (z / s + rho);
                let out = s * (t.clamp(0.0, top) + r + z / s + rho);
                g as f64 * out
            })
            .sum()
    }

    #[test]
    fn ste_step_and_zero_point_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (s0, z0, top) = (0.13f32, -0.71f32, 15.0);
        let zi0 = (z0 as f64 / s0 as f64).round_ties_even();
        // Keep every element away from the clamp edges so the surrogate is smooth.
        let xs: Vec<f32> = (0..400)
            .map(|_| rng.random_range(-2.5f32..2.5))
            .filter(|&v| {
                let t = v as f64 / s0 as f64 - zi0;
                t.abs() > 0.05 && (t - top).abs() > 0.05
            })
            .collect();
        let ups: Vec<f32> = xs.iter().map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(xs.clone());
        let up = Tensor::from_vec(ups.clone());
        let q = QuantParams::per_tensor(4, s0, z0);
        let g = ste_backward(&x, &q, &up).unwrap();

        let h = 1e-6;
        let (s, z) = (s0 as f64, z0 as f64);
        let fd_s = (frozen_surrogate(&xs, &ups, s, z, s + h, z, top)
            - frozen_surrogate(&xs, &ups, s, z, s - h, z, top))
            / (2.0 * h);
        let fd_z = (frozen_surrogate(&xs, &ups, s, z, s, z + h, top)
            - frozen_surrogate(&xs, &ups, s, z, s, z - h, top))
            / (2.0 * h);
        assert!(
            ((g.step[0] as f64 - fd_s) / fd_s).abs() < 1e-3,
            "{} vs {fd_s}",
            g.step[0]
        );
        assert!(
            ((g.zero_point[0] as f64 - fd_z) / fd_z).abs() < 1e-3,
            "{} vs {fd_z}",
            g.zero_point[0]
        );
    }

    #[test]
    fn rescale_by_power_of_two_is_bit_exact() {
        let w = gaussian(&[4, 9], 23);
        let q = calibrate_step_mse(&w, 4, Granularity::PerChannel { axis: 0 }).unwrap();
        let scale = [0.25f32, 2.0, 8.0, 0.5];
        let mut sw = w.clone();
        for (c, row) in sw.data_mut().chunks_mut(9).enumerate() {
            row.iter_mut().for_each(|v| *v *= scale[c]);
        }
        let lhs = quantize(&sw, &q.rescaled(&scale).unwrap()).unwrap();
        let mut rhs = quantize(&w, &q).unwrap();
        for (c, row) in rhs.data_mut().chunks_mut(9).enumerate() {
            row.iter_mut().for_each(|v| *v *= scale[c]);
        }
        assert_eq!(lhs, rhs);
    }

    proptest! {
        #[test]
        fn idempotent(values in prop::collection::vec(-10.0f32..10.0, 1..64), bits in 2u32..=8) {
            let x = Tensor::from_vec(values);
            let q = init_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let once = quantize(&x, &q).unwrap();
            prop_assert_eq!(quantize(&once, &q).unwrap(), once);
        }

        #[test]
        fn outputs_lie_on_lattice(values in prop::collection::vec(-5.0f32..5.0, 1..64), bits in 2u32..=8,
                                  step in 0.01f32..1.0, zp in -3.0f32..3.0) {
            let x = Tensor::from_vec(values);
            let q = QuantParams::per_tensor(bits, step, zp);
            let y = quantize(&x, &q).unwrap();
            let codes = quantize_codes(&x, &q).unwrap();
            for (v, c) in y.data().iter().zip(&codes.codes) {
                prop_assert!(*c as f64 <= levels(bits));
                let expect = (step as f64 * (*c as f64 + codes.offsets[0] as f64)) as f32;
                prop_assert_eq!(*v, expect);
            }
        }

        #[test]
        fn minmax_error_is_at_most_half_a_step(values in prop::collection::vec(-4.0f32..4.0, 2..128), bits in 2u32..=8) {
            let x = Tensor::from_vec(values);
            let q = init_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let y = quantize(&x, &q).unwrap();
            let bound = q.step[0] as f64 * (0.5 + 1e-4);
            for (a, b) in x.data().iter().zip(y.data()) {
                prop_assert!(((a - b) as f64).abs() <= bound);
            }
        }

        #[test]
        fn more_bits_never_hurt_on_dense_tensors(seed in 0u64..10_000, bits in 2u32..8) {
            let x = gaussian(&[512], seed);
            let lo = init_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let hi = init_minmax(&x, bits + 1, Granularity::PerTensor).unwrap();
            prop_assert!(mse(&x, &hi) <= mse(&x, &lo));
        }

        #[test]
        fn positive_rescale_preserves_codes(seed in 0u64..1000, scales in prop::collection::vec(0.05f32..20.0, 3)) {
            let w = gaussian(&[3, 16], seed);
            let q = init_minmax(&w, 4, Granularity::PerChannel { axis: 0 }).unwrap();
            let mut sw = w.clone();
            for (c, row) in sw.data_mut().chunks_mut(16).enumerate() {
                row.iter_mut().for_each(|v| *v *= scales[c]);
            }
            let qs = q.rescaled(&scales).unwrap();
            let a = quantize_codes(&sw, &qs).unwrap();
            let b = quantize_codes(&w, &q).unwrap();
            prop_assert_eq!(&a.offsets, &b.offsets);
            let lhs = quantize(&sw, &qs).unwrap();
            let rhs = quantize(&w, &q).unwrap();
            for i in 0..w.numel() {
                // A rescale moves x/s by a few ulps; only exact near-ties may flip.
                let c = i / 16;
                let t = w.data()[i] as f64 / q.step[c] as f64 - b.offsets[c] as f64;
                if (t - t.floor() - 0.5).abs() <= 1e-5 {
                    continue;
                }
                prop_assert_eq!(a.codes[i], b.codes[i]);
                let expect = rhs.data()[i] * scales[c];
                prop_assert!((lhs.data()[i] - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
    }
}
