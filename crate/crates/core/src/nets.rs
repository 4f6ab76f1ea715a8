//! Dense tanh networks φ(t, x) with bounded weights and saturated outputs.
//!
//! Input is (x, t), output is V·tanh(o/V) applied to the last affine layer.
//! Parameter gradients support an optional tangent direction in x, so the
//! same reverse pass differentiates the value, a directional derivative and
//! therefore the divergence or a Rayleigh quotient of the spatial Jacobian.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, SquareMatrix};
use crate::rng;
use crate::schedules::BlockCapacity;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetBounds {
    pub depth: usize,
    pub width: usize,
    pub weight_bound: f64,
    pub value_bound: f64,
    pub osl_bound: f64,
}

impl From<&BlockCapacity> for NetBounds {
    fn from(c: &BlockCapacity) -> Self {
        Self { depth: c.depth, width: c.width, weight_bound: c.weight_bound, value_bound: c.value_bound, osl_bound: c.osl_bound }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedNet {
    dim: usize,
    sizes: Vec<usize>,
    params: Vec<f64>,
    bounds: NetBounds,
    seed: u64,
}

/// Per-layer buffers reused across evaluations of one net.
#[derive(Clone, Debug)]
pub struct GradientWorkspace {
    /// activations h_0 = (x, t), h_1, …, with the last entry holding the raw output o
    act: Vec<Vec<f64>>,
    tan: Vec<Vec<f64>>,
    adj: Vec<Vec<f64>>,
    adj_tan: Vec<Vec<f64>>,
}

impl GradientWorkspace {
    pub fn new(net: &ConstrainedNet) -> Self {
        let mk = || net.sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self { act: mk(), tan: mk(), adj: mk(), adj_tan: mk() }
    }

    fn fits(&self, net: &ConstrainedNet) -> bool {
        self.act.len() == net.sizes.len() && self.act.iter().zip(&net.sizes).all(|(a, &n)| a.len() == n)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dim: usize,
    sizes: Vec<usize>,
    bounds: NetBounds,
    seed: u64,
    n_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub points: usize,
    pub max_lambda: f64,
    pub osl_bound: f64,
    pub violated: bool,
}

impl ConstrainedNet {
    /// Uniform(±1/√fan_in) initialization, clipped to the weight bound.
    pub fn new(dim: usize, bounds: NetBounds, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dim, bounds)?;
        net.seed = seed;
        let mut r = rng::stream(seed, 0);
        let mut off = 0;
        for l in 0..net.sizes.len() - 1 {
            let (n_in, n_out) = (net.sizes[l], net.sizes[l + 1]);
            let a = 1.0 / (n_in as f64).sqrt();
            for p in &mut net.params[off..off + n_out * (n_in + 1)] {
                *p = r.random_range(-a..a);
            }
            off += n_out * (n_in + 1);
        }
        net.clip_weights();
        Ok(net)
    }

    pub fn zeros(dim: usize, bounds: NetBounds) -> Result<Self> {
        if dim == 0 || bounds.width == 0 {
            return Err(Error::InvalidArgument("network needs positive dimension and width".into()));
        }
        if !(bounds.weight_bound > 0.0 && bounds.value_bound > 0.0) {
            return Err(Error::InvalidArgument("weight and value bounds must be positive".into()));
        }
        let mut sizes = vec![dim + 1];
        sizes.extend(std::iter::repeat_n(bounds.width, bounds.depth));
        sizes.push(dim);
        let n_params = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(Self { dim, sizes, params: vec![0.0; n_params], bounds, seed: 0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn bounds(&self) -> &NetBounds {
        &self.bounds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn workspace(&self) -> GradientWorkspace {
        GradientWorkspace::new(self)
    }

    /// Forward pass, with the tangent along `dir` in x when given. Leaves the
    /// raw last-layer output in the workspace.
    fn run(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64], dir: Option<&[f64]>) {
        debug_assert!(ws.fits(self));
        let d = self.dim;
        ws.act[0][..d].copy_from_slice(x);
        ws.act[0][d] = t;
        if let Some(v) = dir {
            ws.tan[0][..d].copy_from_slice(v);
            ws.tan[0][d] = 0.0;
        }
        let last = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..last {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_out * n_in];
            let b = &self.params[off + n_out * n_in..off + n_out * (n_in + 1)];
            off += n_out * (n_in + 1);
            let (lo, hi) = ws.act.split_at_mut(l + 1);
            let (h_in, h_out) = (&lo[l], &mut hi[0]);
            let (tlo, thi) = ws.tan.split_at_mut(l + 1);
            let (t_in, t_out) = (&tlo[l], &mut thi[0]);
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut z = b[i];
                for j in 0..n_in {
                    z += row[j] * h_in[j];
                }
                let mut zt = 0.0;
                if dir.is_some() {
                    for j in 0..n_in {
                        zt += row[j] * t_in[j];
                    }
                }
                if l + 1 < last {
                    let h = z.tanh();
                    h_out[i] = h;
                    t_out[i] = (1.0 - h * h) * zt;
                } else {
                    h_out[i] = z;
                    t_out[i] = zt;
                }
            }
        }
    }

    fn saturate(&self, o: f64) -> f64 {
        let v = self.bounds.value_bound;
        v * (o / v).tanh()
    }

    pub fn forward_with(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64], out: &mut [f64]) {
        self.run(ws, t, x, None);
        let o = ws.act.last().expect("output layer");
        for k in 0..self.dim {
            out[k] = self.saturate(o[k]);
        }
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim];
        self.forward_with(&mut ws, t, x, &mut out);
        out
    }

    /// (φ(t, x), ∇_x φ(t, x)·dir)
    pub fn jvp_with(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64], dir: &[f64], value: &mut [f64], tangent: &mut [f64]) {
        self.run(ws, t, x, Some(dir));
        let v = self.bounds.value_bound;
        let last = self.sizes.len() - 1;
        for k in 0..self.dim {
            let s = (ws.act[last][k] / v).tanh();
            value[k] = v * s;
            tangent[k] = (1.0 - s * s) * ws.tan[last][k];
        }
    }

    pub fn jacobian_x_with(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64]) -> SquareMatrix {
        let d = self.dim;
        let mut j = SquareMatrix::zeros(d);
        let mut e = vec![0.0; d];
        let (mut val, mut tan) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[k] = 1.0;
            self.jvp_with(ws, t, x, &e, &mut val, &mut tan);
            for i in 0..d {
                j[(i, k)] = tan[i];
            }
        }
        j
    }

    pub fn jacobian_x(&self, t: f64, x: &[f64]) -> SquareMatrix {
        self.jacobian_x_with(&mut self.workspace(), t, x)
    }

    pub fn divergence_x(&self, t: f64, x: &[f64]) -> f64 {
        self.jacobian_x(t, x).trace()
    }

    /// Accumulates `scale`·∇_θ[⟨cv, φ⟩ + ⟨ct, ∇_x φ·dir⟩] into `grad`.
    /// Without `dir` the tangent cotangent is ignored.
    pub fn backprop(
        &self,
        ws: &mut GradientWorkspace,
        t: f64,
        x: &[f64],
        dir: Option<&[f64]>,
        cot_value: &[f64],
        cot_tangent: Option<&[f64]>,
        scale: f64,
        grad: &mut [f64],
    ) {
        let with_tan = dir.is_some() && cot_tangent.is_some();
        self.run(ws, t, x, if with_tan { dir } else { None });
        let v = self.bounds.value_bound;
        let last = self.sizes.len() - 1;
        for k in 0..self.dim {
            let s = (ws.act[last][k] / v).tanh();
            let ds = 1.0 - s * s;
            let mut a = scale * cot_value[k] * ds;
            if with_tan {
                let ct = scale * cot_tangent.expect("checked")[k];
                a += ct * ws.tan[last][k] * (-2.0 * s * ds / v);
                ws.adj_tan[last][k] = ct * ds;
            } else {
                ws.adj_tan[last][k] = 0.0;
            }
            ws.adj[last][k] = a;
        }
        let mut off = grad.len();
        for l in (0..last).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            off -= n_out * (n_in + 1);
            let w = &self.params[off..off + n_out * n_in];
            let (g_w, g_b) = grad[off..off + n_out * (n_in + 1)].split_at_mut(n_out * n_in);
            // adjoints of this layer's pre-activations are in adj[l + 1]
            if l + 1 < last {
                for i in 0..n_out {
                    let h = ws.act[l + 1][i];
                    let dh = 1.0 - h * h;
                    let mut z_bar = ws.adj[l + 1][i] * dh;
                    if with_tan {
                        // ḣ = (1 − h²) ż, so ∂ḣ/∂z = −2h ḣ
                        z_bar += -2.0 * h * ws.adj_tan[l + 1][i] * ws.tan[l + 1][i];
                        ws.adj_tan[l + 1][i] *= dh;
                    }
                    ws.adj[l + 1][i] = z_bar;
                }
            }
            for i in 0..n_out {
                let zb = ws.adj[l + 1][i];
                let ztb = ws.adj_tan[l + 1][i];
                g_b[i] += zb;
                let gw = &mut g_w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    gw[j] += zb * ws.act[l][j];
                }
                if with_tan && ztb != 0.0 {
                    for j in 0..n_in {
                        gw[j] += ztb * ws.tan[l][j];
                    }
                }
            }
            if l > 0 {
                for j in 0..n_in {
                    let (mut a, mut at) = (0.0, 0.0);
                    for i in 0..n_out {
                        a += w[i * n_in + j] * ws.adj[l + 1][i];
                        at += w[i * n_in + j] * ws.adj_tan[l + 1][i];
                    }
                    ws.adj[l][j] = a;
                    ws.adj_tan[l][j] = at;
                }
            }
        }
    }

    /// Clip all weights and biases to [−B, B]; returns how many moved.
    pub fn clip_weights(&mut self) -> usize {
        let b = self.bounds.weight_bound;
        let mut moved = 0;
        for p in &mut self.params {
            if p.abs() > b {
                *p = p.clamp(-b, b);
                moved += 1;
            }
        }
        moved
    }

    /// λ_max of the symmetrized spatial Jacobian and its eigenvector.
    pub fn lambda_max_with(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let j = self.jacobian_x_with(ws, t, x);
        if self.dim == 1 {
            return (j[(0, 0)], vec![1.0]);
        }
        let e = sym_eigen(&j.symmetric_part());
        let (l, v) = e.max();
        (l, v.to_vec())
    }

    /// relu(λ_max − V′)² at one point, adding `weight`·∇_θ of it into `grad`.
    pub fn osl_penalty_grad(&self, ws: &mut GradientWorkspace, t: f64, x: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
        let (lam, v) = self.lambda_max_with(ws, t, x);
        let excess = lam - self.bounds.osl_bound;
        if excess <= 0.0 {
            return 0.0;
        }
        // ∇_θ λ_max = ∇_θ vᵀ J v for the top eigenvector v
        let zero = vec![0.0; self.dim];
        self.backprop(ws, t, x, Some(&v), &zero, Some(&v), 2.0 * excess * weight, grad);
        excess * excess
    }

    /// Mean of relu(λ_max − V′)² over a batch of (t, x).
    pub fn osl_penalty(&self, batch: &[(f64, Vec<f64>)]) -> f64 {
        let mut ws = self.workspace();
        let v = self.bounds.osl_bound;
        batch
            .iter()
            .map(|(t, x)| {
                let e = (self.lambda_max_with(&mut ws, *t, x).0 - v).max(0.0);
                e * e
            })
            .sum::<f64>()
            / batch.len().max(1) as f64
    }

    /// Clip weights and report the penalty on `batch`.
    pub fn enforce_constraints(&mut self, batch: &[(f64, Vec<f64>)]) -> f64 {
        self.clip_weights();
        self.osl_penalty(batch)
    }

    /// Sampled sup of λ_max over t ∈ [t_lo, t_hi) and x in the box [−r, r]^d.
    pub fn certify(&self, t_lo: f64, t_hi: f64, radius: f64, points: usize, seed: u64) -> Certification {
        let mut r = rng::stream(seed, 0);
        let mut ws = self.workspace();
        let mut x = vec![0.0; self.dim];
        let mut max_lambda = f64::NEG_INFINITY;
        for _ in 0..points {
            let t = t_lo + (t_hi - t_lo) * r.random::<f64>();
            for v in &mut x {
                *v = radius * (2.0 * r.random::<f64>() - 1.0);
            }
            max_lambda = max_lambda.max(self.lambda_max_with(&mut ws, t, &x).0);
        }
        Certification { points, max_lambda, osl_bound: self.bounds.osl_bound, violated: max_lambda > self.bounds.osl_bound }
    }

    /// JSON header length (u64 LE), JSON header, then f64 LE parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            dim: self.dim,
            sizes: self.sizes.clone(),
            bounds: self.bounds,
            seed: self.seed,
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let rest = &bytes[8 + hlen..];
        if rest.len() != 8 * h.n_params {
            return Err(bad("parameter block has the wrong length"));
        }
        let mut net = Self::zeros(h.dim, h.bounds)?;
        if net.sizes != h.sizes || net.params.len() != h.n_params {
            return Err(bad("header shape disagrees with bounds"));
        }
        net.seed = h.seed;
        for (p, c) in net.params.iter_mut().zip(rest.chunks_exact(8)) {
            *p = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::Checkpoint(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_bytes(&buf)
    }
}
