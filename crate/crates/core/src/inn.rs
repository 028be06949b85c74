//! Invertible network between designs and band edges.
//!
//! A stack of affine coupling blocks maps a normalized design `x` (30) to
//! `(y, z)`: two normalized band edges and 28 latent coordinates. Each block
//! splits its input into halves `u1 | u2` and applies
//!
//! ```text
//! v1 = u1 * exp(s_a(u2)) + t_a(u2)
//! v2 = u2 * exp(s_b(v1)) + t_b(v1)
//! ```
//!
//! followed by a fixed channel permutation, so the inverse is exact for any
//! subnetwork weights. Scales pass through `c * tanh(s / c)`.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{insert_mass, DesignBounds, DesignSpace, DesignVector, DESIGN_DIM};
use crate::optimize::{applicable_modes, verify_design, InverseDataset, OptimizeError};
use crate::response::{AnalysisGrids, Band};
use crate::tmm::{ModeKind, TmmSolver};

pub const Y_DIM: usize = 2;
pub const Z_DIM: usize = DESIGN_DIM - Y_DIM;

#[derive(Debug, Error)]
pub enum InnError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} values for {what}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("training needs at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("invalid INN config: {0}")]
    Config(String),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> InnError {
    InnError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnArch {
    pub dim: usize,
    /// Width of the first half `u1`.
    pub split: usize,
    pub blocks: usize,
    pub hidden: [usize; 2],
    pub clamp: f64,
    pub leaky_slope: f64,
}

impl Default for InnArch {
    fn default() -> Self {
        Self { dim: DESIGN_DIM, split: DESIGN_DIM / 2, blocks: 4, hidden: [64, 64], clamp: 2.0, leaky_slope: 0.01 }
    }
}

impl InnArch {
    fn halves(&self) -> (usize, usize) {
        (self.split, self.dim - self.split)
    }

    /// Layer widths of subnetwork `net` (0 reads `u2`, 1 reads `v1`).
    fn sizes(&self, net: usize) -> [usize; 4] {
        let (h1, h2) = self.halves();
        let (input, half) = if net == 0 { (h2, h1) } else { (h1, h2) };
        [input, self.hidden[0], self.hidden[1], 2 * half]
    }

    fn subnet_len(&self, net: usize) -> usize {
        let s = self.sizes(net);
        (0..3).map(|l| s[l + 1] * s[l] + s[l + 1]).sum()
    }

    fn offset(&self, block: usize, net: usize) -> usize {
        let per_block = self.subnet_len(0) + self.subnet_len(1);
        block * per_block + if net == 0 { 0 } else { self.subnet_len(0) }
    }

    pub fn param_count(&self) -> usize {
        self.blocks * (self.subnet_len(0) + self.subnet_len(1))
    }

    fn check(&self) -> Result<(), InnError> {
        if self.dim != DESIGN_DIM || self.split == 0 || self.split >= self.dim {
            return Err(InnError::Config(format!("need dim {DESIGN_DIM} and 0 < split < dim")));
        }
        if self.blocks == 0 || self.hidden.contains(&0) {
            return Err(InnError::Config("blocks and hidden widths must be positive".into()));
        }
        if !(self.clamp > 0.0 && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(InnError::Config("need clamp > 0 and leaky slope in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One subnetwork view into the flat parameter vector.
struct Subnet<'a> {
    params: &'a [f64],
    sizes: [usize; 4],
    slope: f64,
}

struct SubnetCache {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

impl<'a> Subnet<'a> {
    fn layer(&self, l: usize) -> (&'a [f64], &'a [f64]) {
        let s = self.sizes;
        let mut off = 0;
        for k in 0..l {
            off += s[k + 1] * s[k] + s[k + 1];
        }
        let w = &self.params[off..off + s[l + 1] * s[l]];
        let b = &self.params[off + s[l + 1] * s[l]..off + s[l + 1] * s[l] + s[l + 1]];
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.sizes[k + 1] * self.sizes[k] + self.sizes[k + 1]).sum()
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len();
        b.iter().enumerate().map(|(r, &bias)| bias + w[r * n..(r + 1) * n].iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).collect()
    }

    fn linear(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let n = x.len();
        (0..rows).map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).collect()
    }

    fn act(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| if v > 0.0 { v } else { self.slope * v }).collect()
    }

    fn act_grad(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.slope
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, SubnetCache) {
        let (w1, b1) = self.layer(0);
        let (w2, b2) = self.layer(1);
        let (w3, b3) = self.layer(2);
        let z1 = Self::affine(w1, b1, x);
        let a1 = self.act(&z1);
        let z2 = Self::affine(w2, b2, &a1);
        let a2 = self.act(&z2);
        let out = Self::affine(w3, b3, &a2);
        (out, SubnetCache { x: x.to_vec(), z1, a1, z2, a2 })
    }

    /// Accumulate parameter gradients into `grad` (same layout as
    /// `params`) and return the input gradient.
    fn backward(&self, cache: &SubnetCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let s = self.sizes;
        let mut delta = d_out.to_vec();
        let inputs = [&cache.x, &cache.a1, &cache.a2];
        let pre = [&cache.z1, &cache.z2];
        for l in (0..3).rev() {
            let (w, _) = self.layer(l);
            let off = self.layer_offset(l);
            let (n_in, n_out) = (s[l], s[l + 1]);
            let a = inputs[l];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + r * n_in..off + (r + 1) * n_in];
                for (g, &ai) in g.iter_mut().zip(a.iter()) {
                    *g += d * ai;
                }
                grad[off + n_out * n_in + r] += d;
            }
            let mut below = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (b, &wv) in below.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                    *b += d * wv;
                }
            }
            if l > 0 {
                for (b, &z) in below.iter_mut().zip(pre[l - 1].iter()) {
                    *b *= self.act_grad(z);
                }
            }
            delta = below;
        }
        delta
    }

    fn jvp(&self, x: &[f64], dx: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1) = self.layer(0);
        let (w2, b2) = self.layer(1);
        let (w3, b3) = self.layer(2);
        let s = self.sizes;
        let z1 = Self::affine(w1, b1, x);
        let dz1 = Self::linear(w1, dx, s[1]);
        let a1 = self.act(&z1);
        let da1: Vec<f64> = dz1.iter().zip(&z1).map(|(d, &z)| d * self.act_grad(z)).collect();
        let z2 = Self::affine(w2, b2, &a1);
        let dz2 = Self::linear(w2, &da1, s[2]);
        let a2 = self.act(&z2);
        let da2: Vec<f64> = dz2.iter().zip(&z2).map(|(d, &z)| d * self.act_grad(z)).collect();
        (Self::affine(w3, b3, &a2), Self::linear(w3, &da2, s[3]))
    }
}

struct BlockCache {
    u1: Vec<f64>,
    u2: Vec<f64>,
    net_a: SubnetCache,
    s_a: Vec<f64>,
    e_a: Vec<f64>,
    net_b: SubnetCache,
    s_b: Vec<f64>,
    e_b: Vec<f64>,
}

struct InverseCache {
    u1: Vec<f64>,
    u2: Vec<f64>,
    net_a: SubnetCache,
    s_a: Vec<f64>,
    net_b: SubnetCache,
    s_b: Vec<f64>,
}

/// Trained or freshly initialised network with its scaling records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnModel {
    pub arch: InnArch,
    /// `permutations[b][i]` is the source channel of output `i` of block `b`.
    pub permutations: Vec<Vec<usize>>,
    pub params: Vec<f64>,
    pub x_bounds: DesignBounds,
    /// Band-edge ranges mapped onto [-1, 1].
    pub y_min: [f64; Y_DIM],
    pub y_max: [f64; Y_DIM],
    pub summary: Option<TrainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// y-fit errors on the normalized scale.
    pub train_mse: f64,
    pub test_mse: f64,
    /// The same errors in Hz².
    pub train_mse_hz2: f64,
    pub test_mse_hz2: f64,
    /// MMD between training latents and standard normal samples.
    pub latent_mmd: f64,
    pub final_loss: f64,
    pub diverged_at: Option<usize>,
}

fn split_scale(s_raw: &[f64], clamp: f64) -> Vec<f64> {
    s_raw.iter().map(|&r| clamp * (r / clamp).tanh()).collect()
}

impl InnModel {
    /// Random weights; output layers start small so each block is close
    /// to the identity.
    pub fn new(arch: InnArch, x_bounds: DesignBounds, y_min: [f64; Y_DIM], y_max: [f64; Y_DIM], seed: u64) -> Result<Self, InnError> {
        arch.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut permutations = Vec::with_capacity(arch.blocks);
        for _ in 0..arch.blocks {
            let mut p: Vec<usize> = (0..arch.dim).collect();
            p.shuffle(&mut rng);
            permutations.push(p);
        }
        let mut params = Vec::with_capacity(arch.param_count());
        for _ in 0..arch.blocks {
            for net in 0..2 {
                let s = arch.sizes(net);
                for l in 0..3 {
                    let a = (6.0 / (s[l] + s[l + 1]) as f64).sqrt() * if l == 2 { 0.1 } else { 1.0 };
                    params.extend((0..s[l + 1] * s[l]).map(|_| rng.random_range(-a..a)));
                    params.extend(std::iter::repeat(0.0).take(s[l + 1]));
                }
            }
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Ok(Self { arch, permutations, params, x_bounds, y_min, y_max, summary: None })
    }

    fn subnet<'a>(&self, params: &'a [f64], block: usize, net: usize) -> Subnet<'a> {
        let off = self.arch.offset(block, net);
        Subnet { params: &params[off..off + self.arch.subnet_len(net)], sizes: self.arch.sizes(net), slope: self.arch.leaky_slope }
    }

    fn block_forward(&self, params: &[f64], b: usize, u: &[f64]) -> (Vec<f64>, BlockCache) {
        let (h1, _) = self.arch.halves();
        let c = self.arch.clamp;
        let (u1, u2) = (u[..h1].to_vec(), u[h1..].to_vec());
        let (ra, net_a) = self.subnet(params, b, 0).forward(&u2);
        let s_a = split_scale(&ra[..h1], c);
        let e_a: Vec<f64> = s_a.iter().map(|s| s.exp()).collect();
        let v1: Vec<f64> = (0..h1).map(|i| u1[i] * e_a[i] + ra[h1 + i]).collect();
        let h2 = u2.len();
        let (rb, net_b) = self.subnet(params, b, 1).forward(&v1);
        let s_b = split_scale(&rb[..h2], c);
        let e_b: Vec<f64> = s_b.iter().map(|s| s.exp()).collect();
        let v2: Vec<f64> = (0..h2).map(|i| u2[i] * e_b[i] + rb[h2 + i]).collect();
        let joined: Vec<f64> = v1.into_iter().chain(v2).collect();
        let out = self.permutations[b].iter().map(|&p| joined[p]).collect();
        (out, BlockCache { u1, u2, net_a, s_a, e_a, net_b, s_b, e_b })
    }

    fn block_inverse(&self, params: &[f64], b: usize, w: &[f64]) -> (Vec<f64>, InverseCache) {
        let (h1, h2) = self.arch.halves();
        let c = self.arch.clamp;
        let mut joined = vec![0.0; w.len()];
        for (i, &p) in self.permutations[b].iter().enumerate() {
            joined[p] = w[i];
        }
        let (v1, v2) = (&joined[..h1], &joined[h1..]);
        let (rb, net_b) = self.subnet(params, b, 1).forward(v1);
        let s_b = split_scale(&rb[..h2], c);
        let u2: Vec<f64> = (0..h2).map(|i| (v2[i] - rb[h2 + i]) * (-s_b[i]).exp()).collect();
        let (ra, net_a) = self.subnet(params, b, 0).forward(&u2);
        let s_a = split_scale(&ra[..h1], c);
        let u1: Vec<f64> = (0..h1).map(|i| (v1[i] - ra[h1 + i]) * (-s_a[i]).exp()).collect();
        let out = u1.iter().chain(&u2).copied().collect();
        (out, InverseCache { u1, u2, net_a, s_a, net_b, s_b })
    }

    /// Gradient through one forward block. `g` is the output gradient.
    fn block_forward_grad(&self, params: &[f64], b: usize, cache: &BlockCache, g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (h1, h2) = self.arch.halves();
        let c = self.arch.clamp;
        let mut g_joined = vec![0.0; g.len()];
        for (i, &p) in self.permutations[b].iter().enumerate() {
            g_joined[p] += g[i];
        }
        let (mut g_v1, g_v2) = (g_joined[..h1].to_vec(), &g_joined[h1..]);

        let mut g_u2: Vec<f64> = (0..h2).map(|i| g_v2[i] * cache.e_b[i]).collect();
        let mut d_rb = vec![0.0; 2 * h2];
        for i in 0..h2 {
            let g_s = g_v2[i] * cache.u2[i] * cache.e_b[i];
            d_rb[i] = g_s * (1.0 - (cache.s_b[i] / c).powi(2));
            d_rb[h2 + i] = g_v2[i];
        }
        let off_b = self.arch.offset(b, 1);
        let len_b = self.arch.subnet_len(1);
        let back = self.subnet(params, b, 1).backward(&cache.net_b, &d_rb, &mut grad[off_b..off_b + len_b]);
        for (g, d) in g_v1.iter_mut().zip(back) {
            *g += d;
        }

        let g_u1: Vec<f64> = (0..h1).map(|i| g_v1[i] * cache.e_a[i]).collect();
        let mut d_ra = vec![0.0; 2 * h1];
        for i in 0..h1 {
            let g_s = g_v1[i] * cache.u1[i] * cache.e_a[i];
            d_ra[i] = g_s * (1.0 - (cache.s_a[i] / c).powi(2));
            d_ra[h1 + i] = g_v1[i];
        }
        let off_a = self.arch.offset(b, 0);
        let len_a = self.arch.subnet_len(0);
        let back = self.subnet(params, b, 0).backward(&cache.net_a, &d_ra, &mut grad[off_a..off_a + len_a]);
        for (g, d) in g_u2.iter_mut().zip(back) {
            *g += d;
        }
        g_u1.into_iter().chain(g_u2).collect()
    }

    /// Gradient through one inverse block. `g` is the gradient of its
    /// output `(u1, u2)`.
    fn block_inverse_grad(&self, params: &[f64], b: usize, cache: &InverseCache, g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (h1, h2) = self.arch.halves();
        let c = self.arch.clamp;
        let (g_u1, g_u2_direct) = (&g[..h1], &g[h1..]);

        let mut g_v1: Vec<f64> = (0..h1).map(|i| g_u1[i] * (-cache.s_a[i]).exp()).collect();
        let mut d_ra = vec![0.0; 2 * h1];
        for i in 0..h1 {
            let g_s = -g_u1[i] * cache.u1[i];
            d_ra[i] = g_s * (1.0 - (cache.s_a[i] / c).powi(2));
            d_ra[h1 + i] = -g_v1[i];
        }
        let off_a = self.arch.offset(b, 0);
        let len_a = self.arch.subnet_len(0);
        let back = self.subnet(params, b, 0).backward(&cache.net_a, &d_ra, &mut grad[off_a..off_a + len_a]);
        let g_u2: Vec<f64> = g_u2_direct.iter().zip(back).map(|(a, b)| a + b).collect();

        let g_v2: Vec<f64> = (0..h2).map(|i| g_u2[i] * (-cache.s_b[i]).exp()).collect();
        let mut d_rb = vec![0.0; 2 * h2];
        for i in 0..h2 {
            let g_s = -g_u2[i] * cache.u2[i];
            d_rb[i] = g_s * (1.0 - (cache.s_b[i] / c).powi(2));
            d_rb[h2 + i] = -g_v2[i];
        }
        let off_b = self.arch.offset(b, 1);
        let len_b = self.arch.subnet_len(1);
        let back = self.subnet(params, b, 1).backward(&cache.net_b, &d_rb, &mut grad[off_b..off_b + len_b]);
        for (g, d) in g_v1.iter_mut().zip(back) {
            *g += d;
        }

        let joined: Vec<f64> = g_v1.into_iter().chain(g_v2).collect();
        self.permutations[b].iter().map(|&p| joined[p]).collect()
    }

    fn check_input(what: &'static str, v: &[f64], expected: usize) -> Result<(), InnError> {
        if v.len() != expected {
            return Err(InnError::Shape { what, expected, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(InnError::NonFinite(what));
        }
        Ok(())
    }

    fn forward_raw(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut u = x.to_vec();
        for b in 0..self.arch.blocks {
            u = self.block_forward(params, b, &u).0;
        }
        u
    }

    fn inverse_raw(&self, params: &[f64], o: &[f64]) -> Vec<f64> {
        let mut w = o.to_vec();
        for b in (0..self.arch.blocks).rev() {
            w = self.block_inverse(params, b, &w).0;
        }
        w
    }

    /// `(y, z)` for a normalized design.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), InnError> {
        Self::check_input("design input", x, self.arch.dim)?;
        let mut o = self.forward_raw(&self.params, x);
        let z = o.split_off(Y_DIM);
        Ok((o, z))
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>, InnError> {
        Self::check_input("band input", y, Y_DIM)?;
        Self::check_input("latent input", z, self.arch.dim - Y_DIM)?;
        let o: Vec<f64> = y.iter().chain(z).copied().collect();
        Ok(self.inverse_raw(&self.params, &o))
    }

    /// `J[i][j] = d out_i / d x_j` by forward-mode propagation.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, InnError> {
        Self::check_input("design input", x, self.arch.dim)?;
        let n = self.arch.dim;
        let columns: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut dx = vec![0.0; n];
                dx[j] = 1.0;
                self.tangent(x, &dx)
            })
            .collect();
        Ok((0..n).map(|i| (0..n).map(|j| columns[j][i]).collect()).collect())
    }

    fn tangent(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        let (h1, h2) = self.arch.halves();
        let c = self.arch.clamp;
        let (mut u, mut du) = (x.to_vec(), dx.to_vec());
        for b in 0..self.arch.blocks {
            let (ra, dra) = self.subnet(&self.params, b, 0).jvp(&u[h1..], &du[h1..]);
            let mut v1 = vec![0.0; h1];
            let mut dv1 = vec![0.0; h1];
            for i in 0..h1 {
                let s = c * (ra[i] / c).tanh();
                let ds = (1.0 - (s / c).powi(2)) * dra[i];
                let e = s.exp();
                v1[i] = u[i] * e + ra[h1 + i];
                dv1[i] = du[i] * e + u[i] * e * ds + dra[h1 + i];
            }
            let (rb, drb) = self.subnet(&self.params, b, 1).jvp(&v1, &dv1);
            let mut v2 = vec![0.0; h2];
            let mut dv2 = vec![0.0; h2];
            for i in 0..h2 {
                let s = c * (rb[i] / c).tanh();
                let ds = (1.0 - (s / c).powi(2)) * drb[i];
                let e = s.exp();
                v2[i] = u[h1 + i] * e + rb[h2 + i];
                dv2[i] = du[h1 + i] * e + u[h1 + i] * e * ds + drb[h2 + i];
            }
            let joined: Vec<f64> = v1.into_iter().chain(v2).collect();
            let djoined: Vec<f64> = dv1.into_iter().chain(dv2).collect();
            u = self.permutations[b].iter().map(|&p| joined[p]).collect();
            du = self.permutations[b].iter().map(|&p| djoined[p]).collect();
        }
        du
    }

    /// `ln |det J|` at `x`, the sum of all applied log-scales.
    pub fn log_det_jacobian(&self, x: &[f64]) -> Result<f64, InnError> {
        Self::check_input("design input", x, self.arch.dim)?;
        let mut u = x.to_vec();
        let mut total = 0.0;
        for b in 0..self.arch.blocks {
            let (out, cache) = self.block_forward(&self.params, b, &u);
            total += cache.s_a.iter().sum::<f64>() + cache.s_b.iter().sum::<f64>();
            u = out;
        }
        Ok(total)
    }

    pub fn normalize_band(&self, band: &Band) -> [f64; Y_DIM] {
        let v = [band.lo, band.hi];
        std::array::from_fn(|k| {
            let w = self.y_max[k] - self.y_min[k];
            if w > 0.0 {
                2.0 * (v[k] - self.y_min[k]) / w - 1.0
            } else {
                0.0
            }
        })
    }

    pub fn denormalize_y(&self, y: &[f64]) -> [f64; Y_DIM] {
        std::array::from_fn(|k| self.y_min[k] + 0.5 * (y[k] + 1.0) * (self.y_max[k] - self.y_min[k]))
    }

    pub fn encode_design(&self, design: &DesignVector) -> Vec<f64> {
        self.x_bounds.normalize(&design.to_flat())
    }

    /// Physical design from a normalized vector, clamped into the bounds.
    pub fn decode_design(&self, x: &[f64]) -> DesignVector {
        let flat = self.x_bounds.denormalize(x);
        self.x_bounds.clamp(&DesignVector::from_flat(&flat).expect("flat design of length 3n"))
    }

    pub fn save(&self, dir: &Path) -> Result<(), InnError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let blob = dir.join("weights.bin");
        let mut bytes = Vec::with_capacity(8 * self.params.len());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        File::create(&blob).and_then(|mut f| f.write_all(&bytes)).map_err(|e| io_err(&blob, e))?;
        let manifest = Manifest {
            format_version: INN_FORMAT,
            arch: self.arch,
            y_dim: Y_DIM,
            permutations: self.permutations.clone(),
            x_bounds: self.x_bounds,
            y_min: self.y_min,
            y_max: self.y_max,
            weights: "weights.bin".into(),
            weight_count: self.params.len(),
            byte_order: "little".into(),
            summary: self.summary.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, InnError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if m.format_version != INN_FORMAT || m.y_dim != Y_DIM || m.byte_order != "little" {
            return Err(io_err(&path, "unsupported model format"));
        }
        m.arch.check()?;
        let blob = dir.join(&m.weights);
        let mut bytes = Vec::new();
        File::open(&blob).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| io_err(&blob, e))?;
        if bytes.len() != 8 * m.weight_count || m.weight_count != m.arch.param_count() {
            return Err(io_err(&blob, format!("expected {} weights", m.arch.param_count())));
        }
        let valid_perm = |p: &Vec<usize>| {
            let mut s = p.clone();
            s.sort_unstable();
            s == (0..m.arch.dim).collect::<Vec<_>>()
        };
        if m.permutations.len() != m.arch.blocks || !m.permutations.iter().all(valid_perm) {
            return Err(io_err(&path, "permutations do not match the block structure"));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Ok(Self {
            arch: m.arch,
            permutations: m.permutations,
            params,
            x_bounds: m.x_bounds,
            y_min: m.y_min,
            y_max: m.y_max,
            summary: m.summary,
        })
    }
}

const INN_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    arch: InnArch,
    y_dim: usize,
    permutations: Vec<Vec<usize>>,
    x_bounds: DesignBounds,
    y_min: [f64; Y_DIM],
    y_max: [f64; Y_DIM],
    weights: String,
    weight_count: usize,
    byte_order: String,
    summary: Option<TrainSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub forward: f64,
    pub latent: f64,
    pub inverse: f64,
    /// MMD between designs decoded from `(y_true, z ~ N(0, I))` and the data.
    pub sampled: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { forward: 1.0, latent: 0.5, inverse: 1.0, sampled: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnTrainConfig {
    pub max_iterations: usize,
    pub learning_rate_start: f64,
    pub learning_rate_end: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub arch: InnArch,
    pub test_fraction: f64,
    /// Gradients are rescaled to at most this global norm.
    pub grad_clip: f64,
    pub min_rows: usize,
    pub seed: u64,
}

impl Default for InnTrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1500,
            learning_rate_start: 1e-3,
            learning_rate_end: 0.02e-3,
            batch_size: 64,
            loss_weights: LossWeights::default(),
            arch: InnArch::default(),
            test_fraction: 0.2,
            grad_clip: 10.0,
            min_rows: 50,
            seed: 0,
        }
    }
}

impl InnTrainConfig {
    pub fn check(&self) -> Result<(), InnError> {
        self.arch.check()?;
        let bad = |m: &str| Err(InnError::Config(m.into()));
        if self.max_iterations == 0 || self.batch_size == 0 {
            return bad("max_iterations and batch_size must be positive");
        }
        if !(self.learning_rate_start > 0.0 && self.learning_rate_end > 0.0 && self.learning_rate_end <= self.learning_rate_start) {
            return bad("learning rate must decay between positive endpoints");
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in [0, 1)");
        }
        let w = self.loss_weights;
        if !(w.forward >= 0.0 && w.latent >= 0.0 && w.inverse >= 0.0 && w.sampled >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Exponential decay from the start to the end rate over the run.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if self.max_iterations <= 1 {
            return self.learning_rate_start;
        }
        let t = iteration as f64 / (self.max_iterations - 1) as f64;
        self.learning_rate_start * (self.learning_rate_end / self.learning_rate_start).powf(t)
    }
}

/// Inverse multiquadric widths, as multiples of the sample dimension.
const MMD_WIDTHS: [f64; 3] = [0.2, 1.0, 5.0];

fn kernel(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    let r2: f64 = d.iter().map(|v| v * v).sum();
    let mut k = 0.0;
    let mut dk_dr2 = 0.0;
    for w in MMD_WIDTHS {
        let c = w * a.len() as f64;
        k += c / (c + r2);
        dk_dr2 -= c / (c + r2).powi(2);
    }
    (k, d.into_iter().map(|v| 2.0 * v * dk_dr2).collect())
}

/// Biased MMD² between samples `p` and `q`, and its gradient in `p`.
pub fn mmd(p: &[Vec<f64>], q: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let (n, m) = (p.len() as f64, q.len() as f64);
    let mut value = 0.0;
    let mut grad: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
    for i in 0..p.len() {
        for j in 0..p.len() {
            let (k, dk) = kernel(&p[i], &p[j]);
            value += k / (n * n);
            if i != j {
                for (g, d) in grad[i].iter_mut().zip(&dk) {
                    *g += 2.0 * d / (n * n);
                }
            }
        }
        for qj in q {
            let (k, dk) = kernel(&p[i], qj);
            value -= 2.0 * k / (n * m);
            for (g, d) in grad[i].iter_mut().zip(&dk) {
                *g -= 2.0 * d / (n * m);
            }
        }
    }
    for a in q {
        for b in q {
            value += kernel(a, b).0 / (m * m);
        }
    }
    (value, grad)
}

fn normals<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

struct BatchLoss {
    total: f64,
    grad: Vec<f64>,
}

impl InnModel {
    fn forward_cached(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<BlockCache>) {
        let mut u = x.to_vec();
        let mut caches = Vec::with_capacity(self.arch.blocks);
        for b in 0..self.arch.blocks {
            let (out, c) = self.block_forward(params, b, &u);
            caches.push(c);
            u = out;
        }
        (u, caches)
    }

    fn inverse_cached(&self, params: &[f64], o: &[f64]) -> (Vec<f64>, Vec<InverseCache>) {
        let mut w = o.to_vec();
        let mut caches = Vec::with_capacity(self.arch.blocks);
        for b in (0..self.arch.blocks).rev() {
            let (out, c) = self.block_inverse(params, b, &w);
            caches.push(c);
            w = out;
        }
        caches.reverse();
        (w, caches)
    }

    fn batch_loss(&self, params: &[f64], xs: &[&[f64]], ys: &[[f64; Y_DIM]], noise: &[Vec<f64>], weights: &LossWeights) -> BatchLoss {
        let n = xs.len() as f64;
        let dim = self.arch.dim;
        let forward: Vec<(Vec<f64>, Vec<BlockCache>)> = xs.par_iter().map(|x| self.forward_cached(params, x)).collect();
        // Matching (y, z) jointly against (y_true, N(0, I)) also makes z
        // independent of y, so latent draws decode to on-manifold designs.
        let joint: Vec<Vec<f64>> = forward.iter().map(|(o, _)| o.clone()).collect();
        let target: Vec<Vec<f64>> = ys.iter().zip(noise).map(|(y, z)| y.iter().chain(z).copied().collect()).collect();
        let (mmd_value, mmd_grad) = if weights.latent > 0.0 { mmd(&joint, &target) } else { (0.0, vec![vec![0.0; dim]; joint.len()]) };

        let decoded: Vec<(Vec<f64>, Vec<InverseCache>)> = if weights.sampled > 0.0 {
            target.par_iter().map(|t| self.inverse_cached(params, t)).collect()
        } else {
            Vec::new()
        };
        let (sampled_value, sampled_grad) = if weights.sampled > 0.0 {
            let gen: Vec<Vec<f64>> = decoded.iter().map(|(x, _)| x.clone()).collect();
            let data: Vec<Vec<f64>> = xs.iter().map(|x| x.to_vec()).collect();
            mmd(&gen, &data)
        } else {
            (0.0, Vec::new())
        };

        let per_row: Vec<(f64, Vec<f64>)> = (0..xs.len())
            .into_par_iter()
            .map(|r| {
                let mut grad = vec![0.0; params.len()];
                let (o, caches) = &forward[r];
                let mut loss = 0.0;
                let mut g_o = vec![0.0; dim];
                for k in 0..Y_DIM {
                    let e = o[k] - ys[r][k];
                    loss += weights.forward * e * e / (n * Y_DIM as f64);
                    g_o[k] = weights.forward * 2.0 * e / (n * Y_DIM as f64);
                }
                for (go, g) in g_o.iter_mut().zip(&mmd_grad[r]) {
                    *go += weights.latent * g;
                }
                if weights.inverse > 0.0 {
                    let input: Vec<f64> = ys[r].iter().chain(&o[Y_DIM..]).copied().collect();
                    let (x_rec, inv_caches) = self.inverse_cached(params, &input);
                    let mut g_x = vec![0.0; dim];
                    for k in 0..dim {
                        let e = x_rec[k] - xs[r][k];
                        loss += weights.inverse * e * e / (n * dim as f64);
                        g_x[k] = weights.inverse * 2.0 * e / (n * dim as f64);
                    }
                    let mut g = g_x;
                    for b in 0..self.arch.blocks {
                        g = self.block_inverse_grad(params, b, &inv_caches[b], &g, &mut grad);
                    }
                    for k in Y_DIM..dim {
                        g_o[k] += g[k];
                    }
                }
                if weights.sampled > 0.0 {
                    let mut g: Vec<f64> = sampled_grad[r].iter().map(|g| weights.sampled * g).collect();
                    for b in 0..self.arch.blocks {
                        g = self.block_inverse_grad(params, b, &decoded[r].1[b], &g, &mut grad);
                    }
                }
                let mut g = g_o;
                for b in (0..self.arch.blocks).rev() {
                    g = self.block_forward_grad(params, b, &caches[b], &g, &mut grad);
                }
                (loss, grad)
            })
            .collect();

        let mut total = weights.latent * mmd_value + weights.sampled * sampled_value;
        let mut grad = vec![0.0; params.len()];
        for (l, g) in per_row {
            total += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        BatchLoss { total, grad }
    }

    fn y_mse(&self, xs: &[Vec<f64>], ys: &[[f64; Y_DIM]]) -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mut norm = 0.0;
        let mut hz = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let o = self.forward_raw(&self.params, x);
            let p = self.denormalize_y(&o[..Y_DIM]);
            let t = self.denormalize_y(y);
            for k in 0..Y_DIM {
                norm += (o[k] - y[k]).powi(2);
                hz += (p[k] - t[k]).powi(2);
            }
        }
        let count = (xs.len() * Y_DIM) as f64;
        (norm / count, hz / count)
    }
}

/// Train on the inverse dataset; designs are normalized with `bounds` and
/// band edges with their own min/max.
pub fn train_inn(data: &InverseDataset, bounds: &DesignBounds, cfg: &InnTrainConfig) -> Result<InnModel, InnError> {
    cfg.check()?;
    if data.len() < cfg.min_rows {
        return Err(InnError::TooFewRows { need: cfg.min_rows, got: data.len() });
    }
    let edges = |r: &crate::optimize::InverseRow| [r.band.lo, r.band.hi];
    let mut y_min = [f64::INFINITY; Y_DIM];
    let mut y_max = [f64::NEG_INFINITY; Y_DIM];
    for r in &data.rows {
        for (k, v) in edges(r).into_iter().enumerate() {
            y_min[k] = y_min[k].min(v);
            y_max[k] = y_max[k].max(v);
        }
    }
    let mut model = InnModel::new(cfg.arch, *bounds, y_min, y_max, cfg.seed)?;
    let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| model.encode_design(&r.design)).collect();
    let ys: Vec<[f64; Y_DIM]> = data.rows.iter().map(|r| model.normalize_band(&r.band)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((data.len() as f64) * cfg.test_fraction).round() as usize;
    let test_rows = order.split_off(data.len() - n_test.min(data.len() - 1));
    let train_rows = order;

    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m1 = vec![0.0; model.params.len()];
    let mut m2 = vec![0.0; model.params.len()];
    let mut cursor = train_rows.len();
    let mut shuffled = train_rows.clone();
    let mut last_loss = f64::NAN;
    let mut diverged_at = None;
    let mut done = 0;

    for it in 0..cfg.max_iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_rows.len()) {
            if cursor == shuffled.len() {
                shuffled.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(shuffled[cursor]);
            cursor += 1;
        }
        let bx: Vec<&[f64]> = batch.iter().map(|&r| xs[r].as_slice()).collect();
        let by: Vec<[f64; Y_DIM]> = batch.iter().map(|&r| ys[r]).collect();
        let noise = normals(&mut rng, batch.len(), Z_DIM);
        let BatchLoss { total, mut grad } = model.batch_loss(&model.params, &bx, &by, &noise, &cfg.loss_weights);
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            warn!("INN loss became non-finite at iteration {it}; keeping the previous weights");
            diverged_at = Some(it);
            break;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
        }
        let lr = cfg.learning_rate(it);
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let previous = model.params.clone();
        for (((p, g), a), b) in model.params.iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
            *a = beta1 * *a + (1.0 - beta1) * g;
            *b = beta2 * *b + (1.0 - beta2) * g * g;
            *p -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            model.params = previous;
            diverged_at = Some(it);
            break;
        }
        last_loss = total;
        done = it + 1;
    }

    let pick = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<[f64; Y_DIM]>) { (rows.iter().map(|&r| xs[r].clone()).collect(), rows.iter().map(|&r| ys[r]).collect()) };
    let (tx, ty) = pick(&train_rows);
    let (vx, vy) = pick(&test_rows);
    let (train_mse, train_mse_hz2) = model.y_mse(&tx, &ty);
    let (test_mse, test_mse_hz2) = model.y_mse(&vx, &vy);
    let latents: Vec<Vec<f64>> = tx.iter().map(|x| model.forward_raw(&model.params, x)[Y_DIM..].to_vec()).collect();
    let latent_mmd = mmd(&latents, &normals(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3333), latents.len(), Z_DIM)).0;
    info!("INN trained: y mse train {train_mse:.4} test {test_mse:.4}, latent mmd {latent_mmd:.4}");
    model.summary = Some(TrainSummary {
        iterations: done,
        train_rows,
        test_rows,
        train_mse,
        test_mse,
        train_mse_hz2,
        test_mse_hz2,
        latent_mmd,
        final_loss: last_loss,
        diverged_at,
    });
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ZPolicy {
    /// The latent mode, `z = 0`.
    Zero,
    /// `count` standard-normal draws.
    Samples { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub design: DesignVector,
    pub mass_kg: f64,
    /// TMM peak count inside the band per applicable mode family.
    pub peaks_in_band: Vec<(ModeKind, usize)>,
    pub feasible: bool,
    pub latent_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub band: Band,
    pub normalized_band: [f64; Y_DIM],
    /// The band lies outside the band-edge range seen in training.
    pub extrapolation: bool,
    /// Feasible candidates first, by increasing mass.
    pub candidates: Vec<Candidate>,
    pub oracle: String,
}

impl RetrievalReport {
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first().filter(|c| c.feasible)
    }
}

/// Decode designs for `band` and check each with the solver.
pub fn retrieve_design(
    model: &InnModel,
    band: &Band,
    policy: ZPolicy,
    space: &DesignSpace,
    grids: &AnalysisGrids,
    solver: &TmmSolver,
) -> Result<RetrievalReport, InnError> {
    let modes = applicable_modes(grids, band);
    if modes.is_empty() {
        return Err(OptimizeError::OutsideRange { lo: band.lo, hi: band.hi }.into());
    }
    let y = model.normalize_band(band);
    let extrapolation = y.iter().any(|v| v.abs() > 1.0 + 1e-9);
    if extrapolation {
        warn!("band ({}, {}) lies outside the training band range", band.lo, band.hi);
    }
    let latents = match policy {
        ZPolicy::Zero => vec![vec![0.0; Z_DIM]],
        ZPolicy::Samples { count, seed } => normals(&mut ChaCha8Rng::seed_from_u64(seed), count, Z_DIM),
    };
    let mut candidates: Vec<Candidate> = latents
        .par_iter()
        .map(|z| -> Result<Candidate, InnError> {
            let x = model.inverse(&y, z)?;
            let design = model.decode_design(&x);
            let verified = verify_design(solver, space, grids, &design, Some(band), &modes)?;
            let peaks_in_band: Vec<(ModeKind, usize)> = verified.iter().map(|v| (v.mode, v.peaks_in_band.unwrap_or(0))).collect();
            Ok(Candidate {
                mass_kg: insert_mass(&design, &space.pipe).map_err(OptimizeError::from)?,
                feasible: peaks_in_band.iter().all(|&(_, n)| n == 0),
                peaks_in_band,
                design,
                latent_norm: z.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect::<Result<_, _>>()?;
    candidates.sort_by(|a, b| {
        let pa: usize = a.peaks_in_band.iter().map(|p| p.1).sum();
        let pb: usize = b.peaks_in_band.iter().map(|p| p.1).sum();
        (!a.feasible).cmp(&!b.feasible).then(pa.cmp(&pb)).then(a.mass_kg.total_cmp(&b.mass_kg))
    });
    Ok(RetrievalReport { band: *band, normalized_band: y, extrapolation, candidates, oracle: "tmm".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::InverseRow;

    fn model(seed: u64) -> InnModel {
        InnModel::new(InnArch::default(), DesignBounds::default(), [100.0, 400.0], [9000.0, 10_000.0], seed).unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..DESIGN_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn shapes_and_parameter_count() {
        let m = model(1);
        let (y, z) = m.forward(&vec![0.1; 30]).unwrap();
        assert_eq!((y.len(), z.len()), (2, 28));
        let per_net = 15 * 64 + 64 + 64 * 64 + 64 + 64 * 30 + 30;
        assert_eq!(m.params.len(), 4 * 2 * per_net);
        assert!(m.forward(&[0.0; 29]).is_err());
        assert!(matches!(m.forward(&[f64::NAN; 30]), Err(InnError::NonFinite(_))));
        assert!(m.inverse(&[0.0, f64::INFINITY], &[0.0; 28]).is_err());
    }

    #[test]
    fn round_trip_both_directions() {
        let m = model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = random_x(&mut rng);
            let (y, z) = m.forward(&x).unwrap();
            let back = m.inverse(&y, &z).unwrap();
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
            let o = random_x(&mut rng);
            let x2 = m.inverse(&o[..2], &o[2..]).unwrap();
            let (y2, z2) = m.forward(&x2).unwrap();
            let err = o.iter().zip(y2.iter().chain(&z2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_x(&mut rng);
        let j = m.jacobian(&x).unwrap();
        let h = 1e-6;
        for c in 0..DESIGN_DIM {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let fp = m.forward_raw(&m.params, &xp);
            let fm = m.forward_raw(&m.params, &xm);
            for r in 0..DESIGN_DIM {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - j[r][c]).abs() <= 1e-6 * (1.0 + j[r][c].abs()), "J[{r}][{c}] {fd} vs {}", j[r][c]);
            }
        }
    }

    #[test]
    fn log_det_matches_jacobian() {
        let m = model(6);
        let x = random_x(&mut ChaCha8Rng::seed_from_u64(7));
        let mut a = m.jacobian(&x).unwrap();
        let n = a.len();
        let mut log_det = 0.0;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            log_det += a[k][k].abs().ln();
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        assert!((log_det - m.log_det_jacobian(&x).unwrap()).abs() < 1e-8);
    }

    /// Central differences of the scalar loss against the hand-written
    /// backward pass, on a few coordinates of every subnetwork.
    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut m = model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in m.params.iter_mut() {
            *p *= 1.5;
        }
        let xs: Vec<Vec<f64>> = (0..5).map(|_| random_x(&mut rng)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys: Vec<[f64; 2]> = (0..5).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let noise = normals(&mut rng, 5, Z_DIM);
        let w = LossWeights::default();
        let base = m.batch_loss(&m.params, &refs, &ys, &noise, &w);
        let h = 1e-6;
        for k in (0..m.params.len()).step_by(997) {
            let mut p = m.params.clone();
            p[k] += h;
            let up = m.batch_loss(&p, &refs, &ys, &noise, &w).total;
            p[k] -= 2.0 * h;
            let down = m.batch_loss(&p, &refs, &ys, &noise, &w).total;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - base.grad[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", base.grad[k]);
        }
    }

    #[test]
    fn mmd_is_small_for_matching_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = normals(&mut rng, 200, 4);
        let b = normals(&mut rng, 200, 4);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x + 2.0).collect()).collect();
        assert!(mmd(&a, &b).0 < mmd(&shifted, &b).0 / 10.0);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = InnTrainConfig::default();
        assert!((cfg.learning_rate(0) - 1e-3).abs() < 1e-15);
        assert!((cfg.learning_rate(1499) - 2e-5).abs() < 1e-15);
        assert!(cfg.learning_rate(700) < cfg.learning_rate(600));
    }

    fn linear_dataset(rows: usize, seed: u64) -> (InverseDataset, [Vec<f64>; 2]) {
        let bounds = DesignBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..DESIGN_DIM).map(|i| if i % 3 == 0 { 1.0 } else { 0.2 }).collect();
        let b: Vec<f64> = (0..DESIGN_DIM).map(|i| if i % 5 == 1 { 1.0 } else { -0.1 }).collect();
        let mut out = Vec::new();
        for _ in 0..rows {
            let x = random_x(&mut rng);
            let f = |w: &[f64]| w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>();
            let lo = 3000.0 + 100.0 * f(&a);
            let hi = lo + 1000.0 + 50.0 * f(&b);
            let design = DesignVector::from_flat(&bounds.denormalize(&x)).unwrap();
            out.push(InverseRow { design, band: Band::new(lo, hi).unwrap(), mass_kg: 0.0, verified: true });
        }
        (InverseDataset { rows: out }, [a, b])
    }

    #[test]
    fn learns_linear_band_forms_and_inverts_them() {
        let (data, [a, b]) = linear_dataset(2000, 3);
        let model = train_inn(&data, &DesignBounds::default(), &InnTrainConfig { seed: 3, ..InnTrainConfig::default() }).unwrap();
        let s = model.summary.as_ref().unwrap();
        assert!(s.test_mse < 1e-2, "test mse {}", s.test_mse);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<usize> = s.test_rows.iter().take(50).copied().collect();
        let mut sq = 0.0;
        for &r in &rows {
            let y = model.normalize_band(&data.rows[r].band);
            let z: Vec<f64> = (0..Z_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let x = model.inverse(&y, &z).unwrap();
            let f = |w: &[f64]| w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>();
            let lo = 3000.0 + 100.0 * f(&a);
            let got = model.normalize_band(&Band::new(lo, lo + 1000.0 + 50.0 * f(&b)).unwrap());
            sq += (got[0] - y[0]).powi(2) + (got[1] - y[1]).powi(2);
        }
        let mse = sq / (2 * rows.len()) as f64;
        assert!(mse < 1e-2, "retrieved designs miss the forms with mse {mse}");
    }

    #[test]
    fn needs_enough_rows() {
        let (data, _) = linear_dataset(20, 1);
        assert!(matches!(train_inn(&data, &DesignBounds::default(), &InnTrainConfig::default()), Err(InnError::TooFewRows { .. })));
    }

    #[test]
    fn training_is_seeded_and_keeps_invertibility() {
        let (data, _) = linear_dataset(60, 2);
        let cfg = InnTrainConfig { max_iterations: 30, seed: 5, ..InnTrainConfig::default() };
        let a = train_inn(&data, &DesignBounds::default(), &cfg).unwrap();
        let b = train_inn(&data, &DesignBounds::default(), &cfg).unwrap();
        assert_eq!(a, b);
        let x = a.encode_design(&data.rows[0].design);
        let (y, z) = a.forward(&x).unwrap();
        let back = a.inverse(&y, &z).unwrap();
        assert!(x.iter().zip(&back).all(|(p, q)| (p - q).abs() < 1e-9));
        let s = a.summary.as_ref().unwrap();
        assert_eq!(s.train_rows.len() + s.test_rows.len(), 60);
        assert!(s.train_mse.is_finite() && s.test_mse.is_finite());
    }

    #[test]
    fn save_and_load() {
        let (data, _) = linear_dataset(60, 3);
        let m = train_inn(&data, &DesignBounds::default(), &InnTrainConfig { max_iterations: 5, ..InnTrainConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(InnModel::load(dir.path()).unwrap(), m);
        assert_eq!(fs::metadata(dir.path().join("weights.bin")).unwrap().len() as usize, 8 * m.params.len());
    }

    #[test]
    fn decoded_designs_respect_bounds() {
        let m = model(11);
        let bounds = DesignBounds::default();
        let space = DesignSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let o: Vec<f64> = (0..30).map(|_| rng.random_range(-4.0..4.0)).collect();
            let d = m.decode_design(&m.inverse(&o[..2], &o[2..]).unwrap());
            assert!(space.validate(&d).is_feasible());
            assert_eq!(bounds.clamp(&d), d);
        }
    }
}
