//! Conditional vector-field regressor.
//!
//! A residual MLP whose blocks are modulated by adaptive layer normalization.
//! The conditioning signal is the sum of Fourier features of the noise level
//! and a linear embedding of the conditioning vector (or a learned null
//! embedding when conditioning is dropped). Each block computes
//!
//! ```text
//! h ← h + γ ⊙ W₂ gelu(W₁ (LN(h) ⊙ (1 + α) + β))
//! ```
//!
//! with `(α, β, γ)` projected from `silu(cond)`. A final modulated layer norm
//! and a linear layer produce the output. Gradients are computed by hand for
//! this fixed topology.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, read_train_state, write_checkpoint, write_train_state, Checkpoint, ModelTag};
pub use optim::{lr_at, optimizer_step, OptimConfig, TrainState};


use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{GeoError, Result};
use crate::sphere::Vec3;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const MAX_FREQ: f64 = 1000.0;

/// What the final linear layer predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// A 3-vector: noise for diffusion, velocity for flow matching.
    Field,
    /// Raw von Mises-Fisher parameters: mean direction (3) and concentration logit (1).
    Vmf,
    /// `components` raw mean directions, concentration logits and weight logits.
    VmfMixture { components: usize },
}

impl HeadKind {
    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Field => 3,
            HeadKind::Vmf => 4,
            HeadKind::VmfMixture { components } => 5 * components,
        }
    }

    /// Baseline heads have no noisy coordinate or noise level; both are
    /// replaced by learned constants.
    pub fn has_stub_inputs(self) -> bool {
        !matches!(self, HeadKind::Field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub width: usize,
    pub n_blocks: usize,
    pub cond_dim: usize,
    pub head: HeadKind,
}

impl NetConfig {
    pub fn new(width: usize, n_blocks: usize, cond_dim: usize) -> Self {
        NetConfig {
            width,
            n_blocks,
            cond_dim,
            head: HeadKind::Field,
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn fourier_bands(&self) -> usize {
        self.width / 2
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || !self.width.is_multiple_of(2) {
            return Err(GeoError::Input(format!("width must be even and ≥ 2, got {}", self.width)));
        }
        if self.n_blocks == 0 {
            return Err(GeoError::Input("need at least one block".into()));
        }
        if self.cond_dim == 0 {
            return Err(GeoError::Input("conditioning dimension must be ≥ 1".into()));
        }
        if let HeadKind::VmfMixture { components } = self.head {
            if components == 0 {
                return Err(GeoError::Input("mixture needs at least one component".into()));
            }
        }
        Ok(())
    }
}

/// Sin/cos features of `k` at `bands` log-spaced angular frequencies in
/// [1, 1000] radians per unit noise level.
pub fn fourier_features(k: f64, bands: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * bands];
    write_fourier(k, bands, &mut out);
    out
}

fn band_freq(i: usize, bands: usize) -> f64 {
    if bands == 1 {
        1.0
    } else {
        MAX_FREQ.powf(i as f64 / (bands - 1) as f64)
    }
}

fn write_fourier(k: f64, bands: usize, out: &mut [f64]) {
    for i in 0..bands {
        let (s, c) = (band_freq(i, bands) * k).sin_cos();
        out[i] = s;
        out[bands + i] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `3d × d`: rows `[0, d)` scale, `[d, 2d)` shift, `[2d, 3d)` gate.
    pub mod_w: Array2<f64>,
    pub mod_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// Learned replacements for the noisy coordinate and noise level in baseline heads.
#[derive(Debug, Clone, PartialEq)]
pub struct StubInputs {
    pub x: Array1<f64>,
    pub k: Array1<f64>,
}

/// All weights of the network. Also used as the gradient container and for
/// optimizer moments, since those share the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub in_w: Array2<f64>,
    pub in_b: Array1<f64>,
    pub cond_w: Array2<f64>,
    pub cond_b: Array1<f64>,
    pub null_emb: Array1<f64>,
    pub blocks: Vec<Block>,
    /// `2d × d`: scale then shift for the final modulated norm.
    pub final_w: Array2<f64>,
    pub final_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub stub: Option<StubInputs>,
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// All-zero parameters with the right shapes.
    pub fn zeros(config: NetConfig) -> Self {
        let d = config.width;
        let block = || Block {
            mod_w: Array2::zeros((3 * d, d)),
            mod_b: Array1::zeros(3 * d),
            fc1_w: Array2::zeros((4 * d, d)),
            fc1_b: Array1::zeros(4 * d),
            fc2_w: Array2::zeros((d, 4 * d)),
            fc2_b: Array1::zeros(d),
        };
        ModelParams {
            config,
            in_w: Array2::zeros((d, 3)),
            in_b: Array1::zeros(d),
            cond_w: Array2::zeros((d, config.cond_dim)),
            cond_b: Array1::zeros(d),
            null_emb: Array1::zeros(d),
            blocks: (0..config.n_blocks).map(|_| block()).collect(),
            final_w: Array2::zeros((2 * d, d)),
            final_b: Array1::zeros(2 * d),
            out_w: Array2::zeros((config.out_dim(), d)),
            out_b: Array1::zeros(config.out_dim()),
            stub: config.head.has_stub_inputs().then(|| StubInputs {
                x: Array1::zeros(3),
                k: Array1::zeros(1),
            }),
        }
    }

    /// Standard initialization: fan-in uniform hidden layers, zero biases,
    /// and zero modulation and output projections for the field head so the
    /// initial prediction is identically zero.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut p = ModelParams::zeros(config);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        p.in_w = uniform_matrix(d, 3, fan(3), rng);
        p.cond_w = uniform_matrix(d, config.cond_dim, fan(config.cond_dim), rng);
        p.null_emb = Array1::from_shape_fn(d, |_| rng.random_range(-0.02..0.02));
        for b in &mut p.blocks {
            b.fc1_w = uniform_matrix(4 * d, d, fan(d), rng);
            b.fc2_w = uniform_matrix(d, 4 * d, fan(4 * d), rng);
        }
        if let Some(stub) = p.stub.as_mut() {
            // heads need a non-degenerate mean direction from the first step
            p.out_w = uniform_matrix(config.out_dim(), d, fan(d), rng);
            stub.x = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            stub.k = Array1::from_elem(1, 0.5);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.config)
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.in_w.as_slice().unwrap(),
            self.in_b.as_slice().unwrap(),
            self.cond_w.as_slice().unwrap(),
            self.cond_b.as_slice().unwrap(),
            self.null_emb.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            v.extend([
                b.mod_w.as_slice().unwrap(),
                b.mod_b.as_slice().unwrap(),
                b.fc1_w.as_slice().unwrap(),
                b.fc1_b.as_slice().unwrap(),
                b.fc2_w.as_slice().unwrap(),
                b.fc2_b.as_slice().unwrap(),
            ]);
        }
        v.extend([
            self.final_w.as_slice().unwrap(),
            self.final_b.as_slice().unwrap(),
            self.out_w.as_slice().unwrap(),
            self.out_b.as_slice().unwrap(),
        ]);
        if let Some(st) = &self.stub {
            v.extend([st.x.as_slice().unwrap(), st.k.as_slice().unwrap()]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.in_w.as_slice_mut().unwrap(),
            self.in_b.as_slice_mut().unwrap(),
            self.cond_w.as_slice_mut().unwrap(),
            self.cond_b.as_slice_mut().unwrap(),
            self.null_emb.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            v.extend([
                b.mod_w.as_slice_mut().unwrap(),
                b.mod_b.as_slice_mut().unwrap(),
                b.fc1_w.as_slice_mut().unwrap(),
                b.fc1_b.as_slice_mut().unwrap(),
                b.fc2_w.as_slice_mut().unwrap(),
                b.fc2_b.as_slice_mut().unwrap(),
            ]);
        }
        v.extend([
            self.final_w.as_slice_mut().unwrap(),
            self.final_b.as_slice_mut().unwrap(),
            self.out_w.as_slice_mut().unwrap(),
            self.out_b.as_slice_mut().unwrap(),
        ]);
        if let Some(st) = &mut self.stub {
            v.extend([st.x.as_slice_mut().unwrap(), st.k.as_slice_mut().unwrap()]);
        }
        v
    }

    /// Human-readable tensor names, aligned with [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["in_w", "in_b", "cond_w", "cond_b", "null_emb"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.blocks.len() {
            for n in ["mod_w", "mod_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b"] {
                v.push(format!("block{i}.{n}"));
            }
        }
        v.extend(["final_w", "final_b", "out_w", "out_b"].iter().map(|s| s.to_string()));
        if self.stub.is_some() {
            v.extend(["stub_x".to_string(), "stub_k".to_string()]);
        }
        v
    }

    /// Whether a tensor (by declaration index) is a weight matrix subject to
    /// weight decay.
    pub fn decays(&self) -> Vec<bool> {
        let mut v = vec![true, false, true, false, false];
        for _ in &self.blocks {
            v.extend([true, false, true, false, true, false]);
        }
        v.extend([true, false, true, false]);
        if self.stub.is_some() {
            v.extend([false, false]);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Overwrites every entry with a uniform draw in `[-scale, scale]`.
    /// Used to probe gradients away from the zero-output initialization.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    /// Forward pass for one point.
    pub fn forward(&self, x: Vec3, k: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut inp = NetInput::new(self.config.cond_dim);
        inp.push(x, k, cond)?;
        let out = self.forward_batch(&inp)?;
        Ok(out.row(0).to_vec())
    }

    /// Forward pass for a batch; returns `batch × out_dim`.
    pub fn forward_batch(&self, input: &NetInput) -> Result<Array2<f64>> {
        self.check_input(input)?;
        Ok(self.run(input, false).0)
    }

    /// Inference where each context row of `ctx` (noise level and
    /// conditioning; its coordinates are ignored) applies to `rep`
    /// consecutive rows of `xs`. The context path and block modulations are
    /// computed once per context. Field heads only.
    pub fn forward_shared(&self, xs: ArrayView2<f64>, ctx: &NetInput, rep: usize) -> Result<Array2<f64>> {
        self.check_input(ctx)?;
        if self.stub.is_some() {
            return Err(GeoError::Input("shared-context inference needs a field head".into()));
        }
        if xs.dim() != (ctx.len() * rep, 3) {
            return Err(GeoError::Input(format!(
                "{} contexts × {rep} need {} coordinate rows, got {:?}",
                ctx.len(),
                ctx.len() * rep,
                xs.dim()
            )));
        }
        let d = self.config.width;
        let (_, _, s) = self.context(&ctx.k, ctx);
        let expand = |m: Array2<f64>| {
            let mut out = Array2::zeros((m.nrows() * rep, m.ncols()));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.assign(&m.row(i / rep));
            }
            out
        };
        let mut h = xs.dot(&self.in_w.t()) + &self.in_b;
        for blk in &self.blocks {
            let mut m = s.dot(&blk.mod_w.t()) + &blk.mod_b;
            m.slice_mut(s![.., 0..d]).mapv_inplace(|v| 1.0 + v);
            let m = expand(m);
            let (n, _) = layer_norm(&h);
            let a = &n * &m.slice(s![.., 0..d]) + m.slice(s![.., d..2 * d]);
            let g = (a.dot(&blk.fc1_w.t()) + &blk.fc1_b).mapv(gelu);
            let o = g.dot(&blk.fc2_w.t()) + &blk.fc2_b;
            h += &(&m.slice(s![.., 2 * d..3 * d]) * &o);
        }
        let mut mf = s.dot(&self.final_w.t()) + &self.final_b;
        mf.slice_mut(s![.., 0..d]).mapv_inplace(|v| 1.0 + v);
        let mf = expand(mf);
        let (nf, _) = layer_norm(&h);
        let af = &nf * &mf.slice(s![.., 0..d]) + mf.slice(s![.., d..2 * d]);
        Ok(af.dot(&self.out_w.t()) + &self.out_b)
    }

    /// Pre-activation conditioning vector, its sigmoid, and `silu` of it.
    fn context(&self, ks: &[f64], input: &NetInput) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let bands = self.config.fourier_bands();
        let mut cvec = input.cond_view().dot(&self.cond_w.t()) + &self.cond_b;
        for (i, &null) in input.null.iter().enumerate() {
            if null {
                cvec.row_mut(i).assign(&self.null_emb);
            }
        }
        let mut f = vec![0.0; 2 * bands];
        for (i, mut row) in cvec.rows_mut().into_iter().enumerate() {
            write_fourier(ks[i], bands, &mut f);
            for (c, v) in row.iter_mut().zip(&f) {
                *c += v;
            }
        }
        let sig = cvec.mapv(sigmoid);
        let s = &cvec * &sig;
        (cvec, sig, s)
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        if input.cond_dim != self.config.cond_dim {
            return Err(GeoError::Input(format!(
                "conditioning width {} does not match network ({})",
                input.cond_dim, self.config.cond_dim
            )));
        }
        if input.is_empty() {
            return Err(GeoError::Input("empty batch".into()));
        }
        Ok(())
    }

    fn run(&self, input: &NetInput, keep: bool) -> (Array2<f64>, Option<Cache>) {
        let b = input.len();
        let d = self.config.width;
        
        let (x, ks): (Array2<f64>, Vec<f64>) = match &self.stub {
            Some(st) => (
                Array2::from_shape_fn((b, 3), |(_, j)| st.x[j]),
                vec![st.k[0]; b],
            ),
            None => (input.x_view().to_owned(), input.k.clone()),
        };

        let mut h = x.dot(&self.in_w.t()) + &self.in_b;
        let (cvec, sig, s) = self.context(&ks, input);

        let mut block_caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for blk in &self.blocks {
            let m = s.dot(&blk.mod_w.t()) + &blk.mod_b;
            let scale = m.slice(s![.., 0..d]);
            let shift = m.slice(s![.., d..2 * d]);
            let gate = m.slice(s![.., 2 * d..3 * d]);
            let (n, inv_std) = layer_norm(&h);
            let a = &n * &scale.mapv(|v| 1.0 + v) + shift;
            let u = a.dot(&blk.fc1_w.t()) + &blk.fc1_b;
            let g = u.mapv(gelu);
            let o = g.dot(&blk.fc2_w.t()) + &blk.fc2_b;
            let h_next = &h + &(&gate * &o);
            if keep {
                block_caches.push(BlockCache {
                    m,
                    n,
                    inv_std,
                    a,
                    u,
                    g,
                    o,
                });
            }
            h = h_next;
        }

        let mf = s.dot(&self.final_w.t()) + &self.final_b;
        let (nf, inv_std_f) = layer_norm(&h);
        let af = &nf * &mf.slice(s![.., 0..d]).mapv(|v| 1.0 + v) + mf.slice(s![.., d..2 * d]);
        let out = af.dot(&self.out_w.t()) + &self.out_b;

        let cache = keep.then(|| Cache {
            x,
            ks,
            cvec,
            sig,
            s,
            blocks: block_caches,
            mf,
            nf,
            inv_std_f,
            af,
        });
        (out, cache)
    }

    /// Reverse-mode pass: given `d loss / d output`, returns parameter
    /// gradients (stub-input gradients included for baseline heads).
    pub fn backward(&self, input: &NetInput, d_out: &Array2<f64>) -> Result<ModelParams> {
        self.check_input(input)?;
        if d_out.dim() != (input.len(), self.config.out_dim()) {
            return Err(GeoError::Input(format!(
                "output gradient shape {:?} does not match batch ({}, {})",
                d_out.dim(),
                input.len(),
                self.config.out_dim()
            )));
        }
        let (_, cache) = self.run(input, true);
        Ok(self.backward_cached(input, &cache.expect("cache requested"), d_out))
    }

    fn backward_cached(&self, input: &NetInput, c: &Cache, d_out: &Array2<f64>) -> ModelParams {
        let d = self.config.width;
        let bands = self.config.fourier_bands();
        let mut g = self.zeros_like();

        // output layer
        general_mat_mul(1.0, &d_out.t(), &c.af, 0.0, &mut g.out_w);
        g.out_b = d_out.sum_axis(Axis(0));
        let daf = d_out.dot(&self.out_w);

        // final modulated norm
        let scale_f = c.mf.slice(s![.., 0..d]);
        let mut dmf = Array2::zeros(c.mf.dim());
        dmf.slice_mut(s![.., 0..d]).assign(&(&daf * &c.nf));
        dmf.slice_mut(s![.., d..2 * d]).assign(&daf);
        let dnf = &daf * &scale_f.mapv(|v| 1.0 + v);
        let mut dh = layer_norm_backward(&c.nf, &c.inv_std_f, &dnf);
        general_mat_mul(1.0, &dmf.t(), &c.s, 0.0, &mut g.final_w);
        g.final_b = dmf.sum_axis(Axis(0));
        let mut ds = dmf.dot(&self.final_w);

        for (i, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &c.blocks[i];
            let gblk = &mut g.blocks[i];
            let scale = bc.m.slice(s![.., 0..d]);
            let gate = bc.m.slice(s![.., 2 * d..3 * d]);
            let mut dm = Array2::zeros(bc.m.dim());

            // h_next = h + gate ⊙ o
            dm.slice_mut(s![.., 2 * d..3 * d]).assign(&(&dh * &bc.o));
            let d_o = &dh * &gate;
            general_mat_mul(1.0, &d_o.t(), &bc.g, 0.0, &mut gblk.fc2_w);
            gblk.fc2_b = d_o.sum_axis(Axis(0));
            let mut du = d_o.dot(&blk.fc2_w);
            Zip::from(&mut du).and(&bc.u).for_each(|d, &u| *d *= gelu_grad(u));
            general_mat_mul(1.0, &du.t(), &bc.a, 0.0, &mut gblk.fc1_w);
            gblk.fc1_b = du.sum_axis(Axis(0));
            let da = du.dot(&blk.fc1_w);
            dm.slice_mut(s![.., 0..d]).assign(&(&da * &bc.n));
            dm.slice_mut(s![.., d..2 * d]).assign(&da);
            let dn = &da * &scale.mapv(|v| 1.0 + v);
            dh += &layer_norm_backward(&bc.n, &bc.inv_std, &dn);

            general_mat_mul(1.0, &dm.t(), &c.s, 0.0, &mut gblk.mod_w);
            gblk.mod_b = dm.sum_axis(Axis(0));
            general_mat_mul(1.0, &dm, &blk.mod_w, 1.0, &mut ds);
        }

        // conditioning path: s = silu(cvec)
        let mut dc = ds;
        Zip::from(&mut dc)
            .and(&c.cvec)
            .and(&c.sig)
            .for_each(|d, &z, &sg| *d *= sg * (1.0 + z * (1.0 - sg)));
        let mut dc_embed = dc.clone();
        for (i, &null) in input.null.iter().enumerate() {
            if null {
                g.null_emb += &dc.row(i);
                dc_embed.row_mut(i).fill(0.0);
            }
        }
        general_mat_mul(1.0, &dc_embed.t(), &input.cond_view(), 0.0, &mut g.cond_w);
        g.cond_b = dc_embed.sum_axis(Axis(0));

        // input projection
        general_mat_mul(1.0, &dh.t(), &c.x, 0.0, &mut g.in_w);
        g.in_b = dh.sum_axis(Axis(0));

        if let Some(gst) = g.stub.as_mut() {
            let dx = dh.dot(&self.in_w);
            gst.x = dx.sum_axis(Axis(0));
            // d/dk of the Fourier features
            let mut dk = 0.0;
            for (r, row) in dc.rows().into_iter().enumerate() {
                let k = c.ks[r];
                for j in 0..bands {
                    let w = band_freq(j, bands);
                    let (sn, cs) = (w * k).sin_cos();
                    dk += row[j] * w * cs - row[bands + j] * w * sn;
                }
            }
            gst.k[0] = dk;
        }
        g
    }

    /// Mean squared error to `targets` and its gradient.
    pub fn loss_and_grads(&self, input: &NetInput, targets: &Array2<f64>) -> Result<(f64, ModelParams)> {
        self.check_input(input)?;
        if targets.dim() != (input.len(), self.config.out_dim()) {
            return Err(GeoError::Input("target shape does not match batch".into()));
        }
        let (out, cache) = self.run(input, true);
        let diff = &out - targets;
        let b = input.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / b;
        if !loss.is_finite() {
            return Err(GeoError::Numeric(format!("non-finite training loss {loss}")));
        }
        let d_out = diff * (2.0 / b);
        let grads = self.backward_cached(input, &cache.expect("cache requested"), &d_out);
        Ok((loss, grads))
    }

    /// Runs the network and returns both the output and a closure-free
    /// gradient evaluator for a custom loss on the outputs.
    pub fn forward_for_grad(&self, input: &NetInput) -> Result<(Array2<f64>, ForwardTape<'_>)> {
        self.check_input(input)?;
        let (out, cache) = self.run(input, true);
        Ok((
            out,
            ForwardTape {
                params: self,
                cache: cache.expect("cache requested"),
            },
        ))
    }
}

/// Largest elementwise disagreement between the analytic loss gradient and
/// central differences with step `h`, each error divided by
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(params: &ModelParams, input: &NetInput, targets: &Array2<f64>, h: f64, floor: f64) -> Result<f64> {
    let (_, g) = params.loss_and_grads(input, targets)?;
    let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for ti in 0..params.tensors().len() {
        for j in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let lp = probe.loss_and_grads(input, targets)?.0;
            probe.tensors_mut()[ti][j] = orig - h;
            let lm = probe.loss_and_grads(input, targets)?.0;
            probe.tensors_mut()[ti][j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[flat];
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(floor));
            flat += 1;
        }
    }
    Ok(worst)
}

/// Saved activations from a forward pass, used to backpropagate a loss
/// computed outside the network.
pub struct ForwardTape<'a> {
    params: &'a ModelParams,
    cache: Cache,
}

impl ForwardTape<'_> {
    pub fn backward(&self, input: &NetInput, d_out: &Array2<f64>) -> ModelParams {
        self.params.backward_cached(input, &self.cache, d_out)
    }
}

struct BlockCache {
    m: Array2<f64>,
    n: Array2<f64>,
    inv_std: Array1<f64>,
    a: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
}

struct Cache {
    x: Array2<f64>,
    ks: Vec<f64>,
    cvec: Array2<f64>,
    sig: Array2<f64>,
    s: Array2<f64>,
    blocks: Vec<BlockCache>,
    mf: Array2<f64>,
    nf: Array2<f64>,
    inv_std_f: Array1<f64>,
    af: Array2<f64>,
}

/// A batch of network inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    cond_dim: usize,
    x: Vec<f64>,
    pub k: Vec<f64>,
    cond: Vec<f64>,
    /// Rows whose conditioning is replaced by the learned null embedding.
    pub null: Vec<bool>,
}

impl NetInput {
    pub fn new(cond_dim: usize) -> Self {
        NetInput {
            cond_dim,
            x: Vec::new(),
            k: Vec::new(),
            cond: Vec::new(),
            null: Vec::new(),
        }
    }

    pub fn with_capacity(cond_dim: usize, n: usize) -> Self {
        NetInput {
            cond_dim,
            x: Vec::with_capacity(3 * n),
            k: Vec::with_capacity(n),
            cond: Vec::with_capacity(cond_dim * n),
            null: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn clear(&mut self) {
        self.x.clear();
        self.k.clear();
        self.cond.clear();
        self.null.clear();
    }

    /// Appends a row; `None` selects the null embedding.
    pub fn push(&mut self, x: Vec3, k: f64, cond: Option<&[f64]>) -> Result<()> {
        match cond {
            Some(c) if c.len() != self.cond_dim => {
                return Err(GeoError::Input(format!(
                    "conditioning vector has {} entries, expected {}",
                    c.len(),
                    self.cond_dim
                )))
            }
            Some(c) => self.cond.extend_from_slice(c),
            None => self.cond.extend(std::iter::repeat_n(0.0, self.cond_dim)),
        }
        self.x.extend_from_slice(&x.0);
        self.k.push(k);
        self.null.push(cond.is_none());
        Ok(())
    }

    /// Appends a null-conditioned row that still carries `cond` as data, which
    /// the network must ignore.
    pub fn push_masked(&mut self, x: Vec3, k: f64, cond: &[f64]) -> Result<()> {
        self.push(x, k, Some(cond))?;
        *self.null.last_mut().unwrap() = true;
        Ok(())
    }

    fn x_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), 3), &self.x).unwrap()
    }

    fn cond_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.cond_dim), &self.cond).unwrap()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `tanh` through one `exp`; about three times faster than the libm call,
/// with absolute error at the f64 rounding level.
#[inline]
fn tanh_exp(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + tanh_exp(GELU_C * (u + 0.044715 * u * u * u)))
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let th = tanh_exp(GELU_C * (u + 0.044715 * u * u * u));
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn layer_norm(h: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = h.ncols() as f64;
    let mut n = h.clone();
    let mut inv = Array1::zeros(h.nrows());
    for (mut row, is) in n.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv_std);
        *is = inv_std;
    }
    (n, inv)
}

fn layer_norm_backward(n: &Array2<f64>, inv_std: &Array1<f64>, dn: &Array2<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let mut out = Array2::zeros(n.dim());
    for (((mut o, nr), dr), &is) in out
        .rows_mut()
        .into_iter()
        .zip(n.rows())
        .zip(dn.rows())
        .zip(inv_std.iter())
    {
        let mean_d = dr.sum() / d;
        let mean_dn = dr.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut o)
            .and(&nr)
            .and(&dr)
            .for_each(|o, &nv, &dv| *o = is * (dv - mean_d - nv * mean_dn));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(cond_dim: usize) -> (ModelParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(NetConfig::new(8, 2, cond_dim), &mut rng).unwrap();
        (p, rng)
    }

    #[test]
    fn fourier_at_zero() {
        let f = fourier_features(0.0, 16);
        assert_eq!(f.len(), 32);
        assert!(f[..16].iter().all(|&v| v == 0.0));
        assert!(f[16..].iter().all(|&v| v == 1.0));
        let a = fourier_features(0.1, 16);
        let b = fourier_features(0.100001, 16);
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) > 5e-4);
    }

    #[test]
    fn zero_init_output_is_zero() {
        let (p, _) = small(3);
        for k in [0.0, 0.3, 1.0] {
            let out = p.forward(Vec3::new(0.1, -2.0, 0.5), k, Some(&[1.0, 0.0, 0.3])).unwrap();
            assert_eq!(out, vec![0.0; 3]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_conditioned() {
        let (mut p, mut rng) = small(3);
        p.randomize(0.5, &mut rng);
        let x = Vec3::new(0.3, 0.4, -0.2);
        let c = [0.2, -0.1, 0.7];
        let a = p.forward(x, 0.4, Some(&c)).unwrap();
        let b = p.forward(x, 0.4, Some(&c)).unwrap();
        assert_eq!(a, b);
        let c2 = [0.2 + 1e-4, -0.1, 0.7];
        let a2 = p.forward(x, 0.4, Some(&c2)).unwrap();
        assert!(a.iter().zip(&a2).any(|(u, v)| (u - v).abs() > 1e-9));
    }

    #[test]
    fn null_rows_ignore_cond_content() {
        let (mut p, mut rng) = small(2);
        p.randomize(0.5, &mut rng);
        let x = Vec3::new(0.1, 0.2, 0.3);
        let mut a = NetInput::new(2);
        a.push(x, 0.5, None).unwrap();
        a.push_masked(x, 0.5, &[9.0, -4.0]).unwrap();
        a.push_masked(x, 0.5, &[0.1, 0.2]).unwrap();
        let out = p.forward_batch(&a).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn shared_context_matches_batch() {
        let (mut p, mut rng) = small(2);
        p.randomize(0.5, &mut rng);
        let contexts = [(0.2, Some([0.3, -0.1])), (0.9, None), (0.5, Some([1.0, 0.0]))];
        let rep = 4;
        let mut ctx = NetInput::new(2);
        let mut full = NetInput::new(2);
        let mut xs = Array2::zeros((contexts.len() * rep, 3));
        for (i, (k, c)) in contexts.iter().enumerate() {
            ctx.push(Vec3::ZERO, *k, c.as_ref().map(|v| &v[..])).unwrap();
            for r in 0..rep {
                let x = Vec3::new(0.1 * r as f64, -0.2 * i as f64, 0.7);
                xs.row_mut(i * rep + r).assign(&Array1::from(x.0.to_vec()));
                full.push(x, *k, c.as_ref().map(|v| &v[..])).unwrap();
            }
        }
        let a = p.forward_shared(xs.view(), &ctx, rep).unwrap();
        let b = p.forward_batch(&full).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        assert!(p.forward_shared(xs.view(), &ctx, rep + 1).is_err());
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let (p, _) = small(3);
        assert!(matches!(p.forward(Vec3::ZERO, 0.1, Some(&[1.0])), Err(GeoError::Input(_))));
        let mut inp = NetInput::new(2);
        inp.push(Vec3::ZERO, 0.1, None).unwrap();
        assert!(matches!(p.forward_batch(&inp), Err(GeoError::Input(_))));
    }

    #[test]
    fn perfect_target_gives_zero_loss_and_grads() {
        let (mut p, mut rng) = small(2);
        p.randomize(0.3, &mut rng);
        let mut inp = NetInput::new(2);
        inp.push(Vec3::new(1.0, 0.0, 0.0), 0.2, Some(&[0.5, 0.5])).unwrap();
        inp.push(Vec3::new(0.0, 1.0, 0.0), 0.8, None).unwrap();
        let target = p.forward_batch(&inp).unwrap();
        let (loss, g) = p.loss_and_grads(&inp, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let (mut p, mut rng) = small(2);
        p.randomize(0.3, &mut rng);
        let mut one = NetInput::new(2);
        one.push(Vec3::new(0.3, 0.1, 0.9), 0.3, Some(&[1.0, 0.0])).unwrap();
        one.push(Vec3::new(-0.3, 0.5, 0.1), 0.7, Some(&[0.0, 1.0])).unwrap();
        let t1 = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.1);
        let mut two = one.clone();
        two.push(Vec3::new(0.3, 0.1, 0.9), 0.3, Some(&[1.0, 0.0])).unwrap();
        two.push(Vec3::new(-0.3, 0.5, 0.1), 0.7, Some(&[0.0, 1.0])).unwrap();
        let t2 = ndarray::concatenate(Axis(0), &[t1.view(), t1.view()]).unwrap();
        let (l1, _) = p.loss_and_grads(&one, &t1).unwrap();
        let (l2, _) = p.loss_and_grads(&two, &t2).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
    }

    #[test]
    fn stub_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NetConfig::new(8, 1, 2).with_head(HeadKind::Vmf);
        let mut p = ModelParams::init(cfg, &mut rng).unwrap();
        p.randomize(0.4, &mut rng);
        let mut inp = NetInput::new(2);
        inp.push(Vec3::ZERO, 0.0, Some(&[0.3, -0.2])).unwrap();
        inp.push(Vec3::ZERO, 0.0, Some(&[-0.1, 0.8])).unwrap();
        let target = Array2::from_shape_fn((2, 4), |(i, j)| 0.1 * (i as f64 - j as f64));
        let (_, g) = p.loss_and_grads(&inp, &target).unwrap();
        let gst = g.stub.as_ref().unwrap();
        for j in 0..4 {
            let h = if j < 3 { 1e-6 } else { 1e-8 };
            let mut plus = p.clone();
            let mut minus = p.clone();
            let pick = |m: &mut ModelParams| -> *mut f64 {
                let st = m.stub.as_mut().unwrap();
                if j < 3 { &mut st.x[j] } else { &mut st.k[0] }
            };
            unsafe {
                *pick(&mut plus) += h;
                *pick(&mut minus) -= h;
            }
            let lp = plus.loss_and_grads(&inp, &target).unwrap().0;
            let lm = minus.loss_and_grads(&inp, &target).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = if j < 3 { gst.x[j] } else { gst.k[0] };
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "stub {j}: {fd} vs {an}");
        }
    }

    #[test]
    fn tensor_metadata_is_aligned() {
        let (p, _) = small(4);
        assert_eq!(p.tensors().len(), p.tensor_names().len());
        assert_eq!(p.tensors().len(), p.decays().len());
        let d = 8;
        let expected = (d * 3 + d) + (d * 4 + d) + d + 2 * (3 * d * d + 3 * d + 4 * d * d + 4 * d + 4 * d * d + d)
            + (2 * d * d + 2 * d)
            + (3 * d + 3);
        assert_eq!(p.num_params(), expected);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::new(7, 2, 3).validate().is_err());
        assert!(NetConfig::new(8, 0, 3).validate().is_err());
        assert!(NetConfig::new(8, 2, 0).validate().is_err());
        assert!(NetConfig::new(8, 2, 3).validate().is_ok());
    }
}
