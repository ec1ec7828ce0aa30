//! Isotropic Gaussian kernel sums over a fixed point set.
//!
//! For a query `x`, scale `a` and variance `v`, the kernel set evaluates
//! `log( (1/n) sum_j N(x; a y_j, v I) )` and its gradient in `x`. Points are
//! stored coordinate-major and padded to a multiple of [`LANES`]; all sums run
//! through `LANES` independent accumulators combined in a fixed order, so the
//! result is bit-identical whatever vector width the compiler picks.

use std::f64::consts::PI;

use crate::samples::Samples;

pub const LANES: usize = 64;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5 * 2^52: adding and subtracting rounds to the nearest integer.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const EXP_FLOOR: f64 = -708.0;

/// `exp(x)` for `x <= 0`, accurate to a few ulp; exactly 0 below -708.
#[inline(always)]
pub fn exp_neg(x: f64) -> f64 {
    let xc = if x < EXP_FLOOR { EXP_FLOOR } else { x };
    let t = xc * LOG2E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = n.mul_add(-LN2_LO, n.mul_add(-LN2_HI, xc));
    // Taylor series to degree 12; |r| <= ln2/2.
    let mut p: f64 = 1.0 / 479_001_600.0;
    p = p.mul_add(r, 1.0 / 39_916_800.0);
    p = p.mul_add(r, 1.0 / 3_628_800.0);
    p = p.mul_add(r, 1.0 / 362_880.0);
    p = p.mul_add(r, 1.0 / 40_320.0);
    p = p.mul_add(r, 1.0 / 5_040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    let bits = t
        .to_bits()
        .wrapping_sub(ROUND_MAGIC.to_bits())
        .wrapping_add(1023)
        << 52;
    let v = p * f64::from_bits(bits);
    if x < EXP_FLOOR {
        0.0
    } else {
        v
    }
}

/// Pairwise sum in a fixed order.
#[inline]
fn lane_sum(acc: &[f64; LANES]) -> f64 {
    let mut buf = *acc;
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            buf[i] += buf[i + width];
        }
    }
    buf[0]
}

/// Reusable per-thread buffers for kernel evaluations.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    moments: Vec<[f64; LANES]>,
}

type Lane = [f64; LANES];

/// Point set stored in blocks of [`LANES`] points; block `b` holds coordinate
/// `k` of its points at `blocks[b * dim + k]`.
#[derive(Debug, Clone)]
pub struct KernelSet {
    n: usize,
    dim: usize,
    blocks: Vec<Lane>,
    sq_norms: Vec<Lane>,
    /// Per-point log weight (shifted so the largest is 0); -inf for padding.
    pad: Vec<Lane>,
    log_offset: f64,
}

impl KernelSet {
    /// Panics on an empty sample set; callers validate first.
    pub fn new(points: &Samples) -> Self {
        Self::build(points, None)
    }

    /// Kernel set computing `log( (1/n) sum_j w_j N(x; a y_j, v I) )` with `w_j = exp(log_weights[j])`.
    pub fn weighted(points: &Samples, log_weights: &[f64]) -> Self {
        assert_eq!(points.len(), log_weights.len(), "one weight per point");
        Self::build(points, Some(log_weights))
    }

    fn build(points: &Samples, log_weights: Option<&[f64]>) -> Self {
        let n = points.len();
        assert!(n > 0, "kernel set needs at least one point");
        let dim = points.dim();
        let n_blocks = n.div_ceil(LANES);
        let mut blocks = vec![[0.0; LANES]; n_blocks * dim];
        let mut sq_norms = vec![[0.0; LANES]; n_blocks];
        let mut pad = vec![[f64::NEG_INFINITY; LANES]; n_blocks];
        let log_offset = log_weights
            .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .filter(|m| m.is_finite())
            .unwrap_or(0.0);
        for (j, row) in points.rows().enumerate() {
            let (b, l) = (j / LANES, j % LANES);
            for (k, v) in row.iter().enumerate() {
                blocks[b * dim + k][l] = *v;
            }
            sq_norms[b][l] = row.iter().map(|v| v * v).sum();
            pad[b][l] = log_weights.map_or(0.0, |w| w[j] - log_offset);
        }
        KernelSet {
            n,
            dim,
            blocks,
            sq_norms,
            pad,
            log_offset,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> Vec<f64> {
        let (b, l) = (j / LANES, j % LANES);
        (0..self.dim).map(|k| self.blocks[b * self.dim + k][l]).collect()
    }

    /// Log density of `(1/n) sum_j N(a y_j, v I)` at `x`. When `grad` is given
    /// it receives the gradient `(a * ybar_w - x) / v` with softmax weights.
    pub fn log_density(
        &self,
        x: &[f64],
        a: f64,
        v: f64,
        grad: Option<&mut [f64]>,
        scratch: &mut Scratch,
    ) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        // Unshifted logits -|x - a y|^2 / 2v are <= 0, so a single pass cannot
        // overflow. If every kernel underflows, redo it shifted by the max logit.
        let log_sum = match grad {
            Some(g) => {
                let ls = self.fused::<true>(x, a, v, 0.0, g, scratch);
                if ls.is_finite() {
                    ls
                } else {
                    let shift = self.max_logit(x, a, v);
                    self.fused::<true>(x, a, v, shift, g, scratch)
                }
            }
            None => {
                let ls = self.fused::<false>(x, a, v, 0.0, &mut [], scratch);
                if ls.is_finite() {
                    ls
                } else {
                    let shift = self.max_logit(x, a, v);
                    self.fused::<false>(x, a, v, shift, &mut [], scratch)
                }
            }
        };
        log_sum + self.log_offset - (self.n as f64).ln() - 0.5 * self.dim as f64 * (2.0 * PI * v).ln()
    }

    #[inline(always)]
    fn block_logits(&self, b: usize, x: &[f64], x2: f64, a: f64, c: f64) -> Lane {
        let blk = &self.blocks[b * self.dim..(b + 1) * self.dim];
        let nrm = &self.sq_norms[b];
        let pad = &self.pad[b];
        let mut dot = [0.0; LANES];
        for (col, xk) in blk.iter().zip(x) {
            for l in 0..LANES {
                dot[l] = xk.mul_add(col[l], dot[l]);
            }
        }
        // -(|x|^2 - 2a x.y + a^2 |y|^2) / 2v, clamped at 0 against rounding.
        let mut z = [0.0; LANES];
        for l in 0..LANES {
            let d2 = (-2.0 * a).mul_add(dot[l], (a * a).mul_add(nrm[l], x2));
            let d2 = if d2 > 0.0 { d2 } else { 0.0 };
            z[l] = c * d2 + pad[l];
        }
        z
    }

    fn max_logit(&self, x: &[f64], a: f64, v: f64) -> f64 {
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let c = -0.5 / v;
        let mut mx = [f64::NEG_INFINITY; LANES];
        for b in 0..self.sq_norms.len() {
            let z = self.block_logits(b, x, x2, a, c);
            for l in 0..LANES {
                mx[l] = if z[l] > mx[l] { z[l] } else { mx[l] };
            }
        }
        mx.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Returns `log sum_j exp(logit_j)`; `-inf` if every term underflows after `shift`.
    fn fused<const GRAD: bool>(
        &self,
        x: &[f64],
        a: f64,
        v: f64,
        shift: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let d = self.dim;
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let c = -0.5 / v;
        let mom = &mut scratch.moments;
        if GRAD {
            mom.clear();
            mom.resize(d, [0.0; LANES]);
        }
        let mut acc = [0.0; LANES];
        for b in 0..self.sq_norms.len() {
            let z = self.block_logits(b, x, x2, a, c);
            let mut w = [0.0; LANES];
            for l in 0..LANES {
                w[l] = exp_neg(z[l] - shift);
                acc[l] += w[l];
            }
            if GRAD {
                let blk = &self.blocks[b * d..(b + 1) * d];
                for (mk, col) in mom.iter_mut().zip(blk) {
                    for l in 0..LANES {
                        mk[l] = w[l].mul_add(col[l], mk[l]);
                    }
                }
            }
        }
        let total = lane_sum(&acc);
        if total == 0.0 {
            return f64::NEG_INFINITY;
        }
        if GRAD {
            for ((g, mk), xk) in grad.iter_mut().zip(mom.iter()).zip(x) {
                *g = (a * (lane_sum(mk) / total) - xk) / v;
            }
        }
        shift + total.ln()
    }

    /// Softmax weights over the kernels at `x`, in point order (test and diagnostic use).
    pub fn weights(&self, x: &[f64], a: f64, v: f64) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.n)
            .map(|j| {
                let y = self.point(j);
                -0.5 * x.iter().zip(&y).map(|(xi, yi)| (xi - a * yi).powi(2)).sum::<f64>() / v
            })
            .collect();
        let lse = crate::gmm::log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }
}
