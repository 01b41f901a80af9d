//! Block-causal masked-autoencoder reconstructor and the weighted
//! pixel + perceptual distance it is trained and scored with.
//!
//! A frame enters as the assembled canvas plus its base-cell visibility
//! mask: visible cells are patch-embedded canvas content, masked cells a
//! learned token. Attention is block-causal (frame t sees frames <= t,
//! full attention within a frame). Visible cells pass through to the output
//! verbatim, so losses measure exactly what is missing.

use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{assemble_frame, Canvas, FramePyramid, GazeSequence, ScaleGrid};
use crate::curation::LengthSampler;
use crate::error::{Error, Result};
use crate::nn::{
    block_attend, block_causal_mask, block_forward_tape, cosine_lr, AdamW, BlockParams, BlockVars,
    ChunkAttn, LayerCache, RMS_EPS,
};
use crate::scalar::{s, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{self, TensorData};
use crate::video::VideoTensor;

/// Weights of the pixel and perceptual terms of the distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub w_pixel: f64,
    pub w_emb1: f64,
    pub w_emb2: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        Self {
            w_pixel: 1.0,
            w_emb1: 0.3,
            w_emb2: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub scales: Vec<usize>,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub embed_seed: u64,
    pub weights: DistanceWeights,
}

impl ReconConfig {
    /// Full-scale defaults: 224-pixel frames, dim 128, depth 4.
    pub fn default_full() -> Self {
        Self {
            scales: vec![32, 64, 112, 224],
            patch: 16,
            dim: 128,
            depth: 4,
            heads: 4,
            max_frames: 16,
            embed_seed: 7,
            weights: DistanceWeights::default(),
        }
    }

    pub fn grid(&self) -> ScaleGrid {
        ScaleGrid::new(&self.scales, self.patch).expect("invalid scale config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidParam(
                "hidden dim must divide evenly into heads".into(),
            ));
        }
        ScaleGrid::new(&self.scales, self.patch).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Perceptual embedders
// ---------------------------------------------------------------------------

const EMB_C1: usize = 12;
const EMB_C2: usize = 24;

/// Fixed (never trained) seeded convolutional feature extractor mapping a
/// frame to a unit-normalized vector. Two of these with different seeds make
/// up the perceptual part of the distance.
#[derive(Debug, Clone)]
pub struct PerceptualEmbedder<S> {
    side: usize,
    k1: usize,
    conv1_w: TensorData<S>,
    conv1_b: TensorData<S>,
    conv2_w: TensorData<S>,
    conv2_b: TensorData<S>,
}

impl<S: Scalar> PerceptualEmbedder<S> {
    pub fn new(side: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let k1 = (side / 4).max(1);
        let std1 = 1.0 / ((3 * k1 * k1) as f64).sqrt();
        let std2 = 1.0 / ((EMB_C1 * 9) as f64).sqrt();
        Self {
            side,
            k1,
            conv1_w: TensorData::randn(vec![EMB_C1, 3, k1, k1], std1 * 2.0, &mut rng),
            conv1_b: TensorData::randn(vec![EMB_C1], 0.1, &mut rng),
            conv2_w: TensorData::randn(vec![EMB_C2, EMB_C1, 3, 3], std2 * 2.0, &mut rng),
            conv2_b: TensorData::randn(vec![EMB_C2], 0.1, &mut rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        EMB_C2
    }

    /// Plain forward: frame [H,W,3] -> unit-normalized [EMB_C2].
    pub fn forward(&self, frame: &TensorData<S>) -> Vec<S> {
        let chw = hwc_to_chw(frame);
        let mut h1 = tensor::conv2d(&chw, &self.conv1_w, &self.conv1_b.data, self.k1, 0);
        for v in h1.data.iter_mut() {
            *v = v.tanh();
        }
        let mut h2 = tensor::conv2d(&h1, &self.conv2_w, &self.conv2_b.data, 1, 1);
        for v in h2.data.iter_mut() {
            *v = v.tanh();
        }
        let spatial = h2.shape[1] * h2.shape[2];
        let inv = s::<S>(1.0 / spatial as f64);
        let mut feat: Vec<S> = (0..EMB_C2)
            .map(|c| {
                let mut acc = S::zero();
                for i in 0..spatial {
                    acc = acc + h2.data[c * spatial + i];
                }
                acc * inv
            })
            .collect();
        let mut ss = S::zero();
        for &v in &feat {
            ss = ss + v * v;
        }
        let norm = ss.sqrt().max(s(1e-12));
        for v in feat.iter_mut() {
            *v = *v / norm;
        }
        feat
    }

    /// Tape forward of a [H,W,3] var; embedder weights are constants.
    pub fn forward_tape(&self, tape: &mut Tape<S>, frame: Var) -> Var {
        let (h, w) = (self.side, self.side);
        let perm = hwc_to_chw_perm(h, w);
        let chw = tape.permute(frame, &perm, vec![3, h, w]);
        let w1 = tape.constant(self.conv1_w.clone());
        let b1 = tape.constant(self.conv1_b.clone());
        let h1 = tape.conv2d(chw, w1, b1, self.k1, 0);
        let h1 = tape.tanh_act(h1);
        let w2 = tape.constant(self.conv2_w.clone());
        let b2 = tape.constant(self.conv2_b.clone());
        let h2 = tape.conv2d(h1, w2, b2, 1, 1);
        let h2 = tape.tanh_act(h2);
        let spatial: usize = tape.value(h2).shape[1] * tape.value(h2).shape[2];
        let flat = tape.reshape(h2, vec![EMB_C2, spatial]);
        let pool = tape.constant(TensorData::full(
            vec![spatial, 1],
            s::<S>(1.0 / spatial as f64),
        ));
        let feat = tape.matmul(flat, pool);
        tape.unit_normalize(feat)
    }
}

fn hwc_to_chw<S: Scalar>(frame: &TensorData<S>) -> TensorData<S> {
    let (h, w) = (frame.shape[0], frame.shape[1]);
    let mut out = vec![S::zero(); frame.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c * h + y) * w + x] = frame.data[(y * w + x) * 3 + c];
            }
        }
    }
    TensorData::new(vec![3, h, w], out)
}

fn hwc_to_chw_perm(h: usize, w: usize) -> Vec<usize> {
    let mut perm = vec![0usize; h * w * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                perm[(c * h + y) * w + x] = (y * w + x) * 3 + c;
            }
        }
    }
    perm
}

/// Row-major cell matrix [G*G, p*p*3] -> frame [H,W,3] element mapping.
fn cells_to_frame_perm(g: usize, p: usize) -> Vec<usize> {
    let side = g * p;
    let mut perm = vec![0usize; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let row = (y / p) * g + x / p;
                let col = ((y % p) * p + x % p) * 3 + c;
                perm[(y * side + x) * 3 + c] = row * (p * p * 3) + col;
            }
        }
    }
    perm
}

/// The distance L: pixel MAE plus squared distances of two fixed embedders.
pub struct Distance<S> {
    pub weights: DistanceWeights,
    emb1: PerceptualEmbedder<S>,
    emb2: PerceptualEmbedder<S>,
}

impl<S: Scalar> Distance<S> {
    pub fn new(config: &ReconConfig) -> Self {
        let side = *config.scales.last().unwrap();
        Self {
            weights: config.weights,
            emb1: PerceptualEmbedder::new(side, config.embed_seed),
            emb2: PerceptualEmbedder::new(side, config.embed_seed.wrapping_add(1)),
        }
    }

    pub fn embedders(&self) -> (&PerceptualEmbedder<S>, &PerceptualEmbedder<S>) {
        (&self.emb1, &self.emb2)
    }

    /// Distance between two frames of identical shape.
    pub fn frame(&self, orig: &TensorData<S>, recon: &TensorData<S>) -> Result<S> {
        if orig.shape != recon.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                orig.shape, recon.shape
            )));
        }
        let n = orig.len();
        let mut abs = S::zero();
        for (&a, &b) in orig.data.iter().zip(recon.data.iter()) {
            abs = abs + (a - b).abs();
        }
        let pix = abs / s::<S>(n as f64);
        let d1 = sq_dist(&self.emb1.forward(orig), &self.emb1.forward(recon));
        let d2 = sq_dist(&self.emb2.forward(orig), &self.emb2.forward(recon));
        Ok(s::<S>(self.weights.w_pixel) * pix
            + s::<S>(self.weights.w_emb1) * d1
            + s::<S>(self.weights.w_emb2) * d2)
    }

    /// Per-frame loss vector over two videos of equal length.
    pub fn frames(&self, orig: &[TensorData<S>], recon: &[TensorData<S>]) -> Result<Vec<S>> {
        if orig.len() != recon.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames vs {}",
                orig.len(),
                recon.len()
            )));
        }
        orig.iter()
            .zip(recon.iter())
            .map(|(o, r)| self.frame(o, r))
            .collect()
    }

    /// Tape version against a constant original frame.
    pub fn frame_tape(&self, tape: &mut Tape<S>, orig: &TensorData<S>, recon: Var) -> Var {
        let orig_var = tape.constant(orig.clone());
        let diff = tape.sub(recon, orig_var);
        let a = tape.abs(diff);
        let pix = tape.mean_all(a);
        let pix = tape.scale(pix, s(self.weights.w_pixel));

        let mut total = pix;
        for (emb, w) in [
            (&self.emb1, self.weights.w_emb1),
            (&self.emb2, self.weights.w_emb2),
        ] {
            let e_orig = emb.forward(orig);
            let e_rec = emb.forward_tape(tape, recon);
            let e_orig_var = tape.constant(TensorData::new(vec![e_orig.len(), 1], e_orig));
            let d = tape.sub(e_rec, e_orig_var);
            let d2 = tape.square(d);
            let ds = tape.sum_all(d2);
            let ds = tape.scale(ds, s(w));
            total = tape.add(total, ds);
        }
        total
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    acc
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReconModel<S> {
    pub config: ReconConfig,
    patch_embed_w: TensorData<S>,
    patch_embed_b: TensorData<S>,
    mask_token: TensorData<S>,
    pos_2d: TensorData<S>,
    pos_t: TensorData<S>,
    blocks: Vec<BlockParams<S>>,
    out_norm: TensorData<S>,
    head_w: TensorData<S>,
    head_b: TensorData<S>,
}

/// Model parameters leafed onto a tape, in `visit` order.
pub struct ReconVars {
    pub patch_embed_w: Var,
    pub patch_embed_b: Var,
    pub mask_token: Var,
    pub pos_2d: Var,
    pub pos_t: Var,
    pub blocks: Vec<BlockVars>,
    pub out_norm: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ReconVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.patch_embed_w,
            self.patch_embed_b,
            self.mask_token,
            self.pos_2d,
            self.pos_t,
        ];
        for b in &self.blocks {
            v.extend_from_slice(&b.vars());
        }
        v.push(self.out_norm);
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

impl<S: Scalar> ReconModel<S> {
    pub fn init(config: &ReconConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let grid = config.grid();
        let g = grid.base_grid();
        let p = config.patch;
        let dim = config.dim;
        let pdim = p * p * 3;
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(dim, 4 * dim, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed_w: TensorData::randn(vec![pdim, dim], 1.0 / (pdim as f64).sqrt(), &mut rng),
            patch_embed_b: TensorData::zeros(vec![dim]),
            mask_token: TensorData::randn(vec![1, dim], 0.02, &mut rng),
            pos_2d: TensorData::randn(vec![g * g, dim], 0.02, &mut rng),
            pos_t: TensorData::randn(vec![config.max_frames, dim], 0.02, &mut rng),
            blocks,
            out_norm: TensorData::full(vec![dim], S::one()),
            // the head predicts a residual around mid-gray; small init keeps
            // raw outputs inside the clamp at the start of training
            head_w: TensorData::randn(vec![dim, pdim], 0.02 / (dim as f64).sqrt(), &mut rng),
            head_b: TensorData::zeros(vec![pdim]),
        })
    }

    pub fn grid(&self) -> ScaleGrid {
        self.config.grid()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a TensorData<S>)) {
        f("patch_embed_w".into(), &self.patch_embed_w);
        f("patch_embed_b".into(), &self.patch_embed_b);
        f("mask_token".into(), &self.mask_token);
        f("pos_2d".into(), &self.pos_2d);
        f("pos_t".into(), &self.pos_t);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
        f("out_norm".into(), &self.out_norm);
        f("head_w".into(), &self.head_w);
        f("head_b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut TensorData<S>)) {
        f("patch_embed_w".into(), &mut self.patch_embed_w);
        f("patch_embed_b".into(), &mut self.patch_embed_b);
        f("mask_token".into(), &mut self.mask_token);
        f("pos_2d".into(), &mut self.pos_2d);
        f("pos_t".into(), &mut self.pos_t);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        f("out_norm".into(), &mut self.out_norm);
        f("head_w".into(), &mut self.head_w);
        f("head_b".into(), &mut self.head_b);
    }

    pub fn named(&self) -> Vec<(String, &TensorData<S>)> {
        let mut v = Vec::new();
        self.visit(&mut |name, t| v.push((name, t)));
        v
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    /// Add seeded noise to every parameter (used by gradient checks to probe
    /// a generic point in parameter space).
    pub fn jitter(&mut self, seed: u64, std: f64) {
        let mut rng = StdRng::seed_from_u64(seed);
        self.visit_mut(&mut |_, t| {
            for v in t.data.iter_mut() {
                *v = *v + s::<S>(tensor::normal_f64(&mut rng) * std);
            }
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_string(&self.config).unwrap();
        let named: Vec<(String, &TensorData<S>)> = self.named();
        checkpoint::write_checkpoint(path, checkpoint::MAGIC_RECON, &config, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config_json, tensors) =
            checkpoint::read_checkpoint::<S>(path, checkpoint::MAGIC_RECON)?;
        let config: ReconConfig = serde_json::from_str(&config_json)
            .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
        let mut model = Self::init(&config, 0)?;
        checkpoint::assign_tensors(tensors, |f| model.visit_mut(f))?;
        Ok(model)
    }

    pub fn load_expecting(path: &Path, expected: &ReconConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from expected {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }

    // -- shared token construction ------------------------------------------

    /// Constant [G*G, p*p*3] matrix of canvas cell contents.
    fn cells_matrix(&self, canvas: &Canvas<S>) -> TensorData<S> {
        let grid = self.grid();
        let (g, p) = (grid.base_grid(), self.config.patch);
        let side = g * p;
        let mut out = Vec::with_capacity(g * g * p * p * 3);
        for cy in 0..g {
            for cx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            out.push(canvas.pixels.data[((cy * p + dy) * side + cx * p + dx) * 3 + c]);
                        }
                    }
                }
            }
        }
        TensorData::new(vec![g * g, p * p * 3], out)
    }

    /// Plain token rows for one frame: embedded visible cells, mask token on
    /// masked cells, plus spatial and temporal positional terms.
    fn frame_tokens_plain(&self, canvas: &Canvas<S>, t: usize) -> TensorData<S> {
        let dim = self.config.dim;
        let cells = self.cells_matrix(canvas);
        let mut tok = tensor::matmul(&cells, &self.patch_embed_w);
        let g2 = tok.shape[0];
        for (i, row) in tok.data.chunks_mut(dim).enumerate() {
            if canvas.mask[i] {
                for (d, v) in row.iter_mut().enumerate() {
                    *v = *v + self.patch_embed_b.data[d];
                }
            } else {
                row.copy_from_slice(&self.mask_token.data);
            }
        }
        for i in 0..g2 {
            for d in 0..dim {
                tok.data[i * dim + d] = tok.data[i * dim + d]
                    + self.pos_2d.data[i * dim + d]
                    + self.pos_t.data[t * dim + d];
            }
        }
        tok
    }

    /// Head output rows -> clamped [H,W,3] frame with visible passthrough.
    fn frame_from_rows(&self, rows: &TensorData<S>, canvas: &Canvas<S>) -> TensorData<S> {
        let grid = self.grid();
        let (g, p) = (grid.base_grid(), self.config.patch);
        let side = g * p;
        let mut out = TensorData::zeros(vec![side, side, 3]);
        let half = s::<S>(0.5);
        for y in 0..side {
            for x in 0..side {
                let cell = (y / p) * g + x / p;
                for c in 0..3 {
                    let v = if canvas.mask[cell] {
                        canvas.pixels.data[(y * side + x) * 3 + c]
                    } else {
                        let col = ((y % p) * p + x % p) * 3 + c;
                        (rows.data[cell * (p * p * 3) + col] + half)
                            .max(S::zero())
                            .min(S::one())
                    };
                    out.data[(y * side + x) * 3 + c] = v;
                }
            }
        }
        out
    }

    // -- differentiable forward ----------------------------------------------

    pub fn leaf_all(&self, tape: &mut Tape<S>, trainable: bool) -> ReconVars {
        ReconVars {
            patch_embed_w: tape.leaf(self.patch_embed_w.clone(), trainable),
            patch_embed_b: tape.leaf(self.patch_embed_b.clone(), trainable),
            mask_token: tape.leaf(self.mask_token.clone(), trainable),
            pos_2d: tape.leaf(self.pos_2d.clone(), trainable),
            pos_t: tape.leaf(self.pos_t.clone(), trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars::leaf(tape, b, trainable))
                .collect(),
            out_norm: tape.leaf(self.out_norm.clone(), trainable),
            head_w: tape.leaf(self.head_w.clone(), trainable),
            head_b: tape.leaf(self.head_b.clone(), trainable),
        }
    }

    /// Tape forward over whole-video canvases; returns per-frame clamped
    /// outputs with visible passthrough applied.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ReconVars,
        canvases: &[Canvas<S>],
    ) -> Result<Vec<Var>> {
        let grid = self.grid();
        let (g, p) = (grid.base_grid(), self.config.patch);
        let g2 = g * g;
        let t_len = canvases.len();
        if t_len > self.config.max_frames {
            return Err(Error::InvalidParam(format!(
                "{t_len} frames exceed max_frames {}",
                self.config.max_frames
            )));
        }
        let dim = self.config.dim;

        let mut frame_tokens = Vec::with_capacity(t_len);
        for (t, canvas) in canvases.iter().enumerate() {
            let cells = tape.constant(self.cells_matrix(canvas));
            let emb = tape.matmul(cells, vars.patch_embed_w);
            let emb = tape.add_row_broadcast(emb, vars.patch_embed_b);
            // visible rows keep the embedding, masked rows the mask token
            let vis: Vec<S> = canvas
                .mask
                .iter()
                .flat_map(|&m| std::iter::repeat(if m { S::one() } else { S::zero() }).take(dim))
                .collect();
            let inv: Vec<S> = vis
                .iter()
                .map(|&v| if v == S::one() { S::zero() } else { S::one() })
                .collect();
            let emb_vis = tape.mul_const(emb, TensorData::new(vec![g2, dim], vis));
            let mask_rows = tape.gather_rows(vars.mask_token, &vec![0; g2]);
            let mask_rows = tape.mul_const(mask_rows, TensorData::new(vec![g2, dim], inv));
            let tok = tape.add(emb_vis, mask_rows);
            let tok = tape.add(tok, vars.pos_2d);
            let pt = tape.gather_rows(vars.pos_t, &[t]);
            let pt = tape.reshape(pt, vec![dim]);
            let tok = tape.add_row_broadcast(tok, pt);
            frame_tokens.push(tok);
        }
        let mut x = tape.concat_rows(&frame_tokens);

        let frame_of: Vec<usize> = (0..t_len).flat_map(|t| vec![t; g2]).collect();
        let mask = block_causal_mask::<S>(&frame_of);
        for b in &vars.blocks {
            x = block_forward_tape(tape, x, b, self.config.heads, &mask, None);
        }
        let x = tape.rms_norm(x, vars.out_norm, s(RMS_EPS));
        let rows = tape.matmul(x, vars.head_w);
        let rows = tape.add_row_broadcast(rows, vars.head_b);
        let half = TensorData::full(vec![t_len * g2, p * p * 3], s::<S>(0.5));
        let rows = tape.add_const(rows, half);

        let perm = cells_to_frame_perm(g, p);
        let side = g * p;
        let mut outs = Vec::with_capacity(t_len);
        for (t, canvas) in canvases.iter().enumerate() {
            let fr_rows = tape.slice_rows(rows, t * g2, g2);
            let frame = tape.permute(fr_rows, &perm, vec![side, side, 3]);
            let frame = tape.clamp01(frame);
            // visible pixels come from the canvas verbatim
            let mut keep_model = vec![true; side * side * 3];
            for y in 0..side {
                for x in 0..side {
                    if canvas.mask[(y / p) * g + x / p] {
                        for c in 0..3 {
                            keep_model[(y * side + x) * 3 + c] = false;
                        }
                    }
                }
            }
            let out = tape.mask_select(frame, canvas.pixels.clone(), &keep_model);
            outs.push(out);
        }
        Ok(outs)
    }

    // -- incremental inference ------------------------------------------------

    pub fn new_cache(&self) -> ReconCache<S> {
        ReconCache {
            layers: (0..self.config.depth)
                .map(|_| LayerCache::new(self.config.dim))
                .collect(),
            frames: 0,
        }
    }

    /// Frame-t output given the cached earlier frames, without extending the
    /// cache. Byte-for-byte the same computation `advance_frame` performs.
    pub fn peek_frame(
        &self,
        cache: &ReconCache<S>,
        canvas: &Canvas<S>,
        t: usize,
    ) -> Result<TensorData<S>> {
        let rows = self.run_frame(cache, canvas, t)?;
        Ok(self.frame_from_rows(&rows, canvas))
    }
}

/// Per-layer KV caches over whole frames.
pub struct ReconCache<S> {
    layers: Vec<LayerCache<S>>,
    pub frames: usize,
}

impl<S: Scalar> ReconModel<S> {
    fn run_frame(
        &self,
        cache: &ReconCache<S>,
        canvas: &Canvas<S>,
        t: usize,
    ) -> Result<TensorData<S>> {
        if t >= self.config.max_frames {
            return Err(Error::InvalidParam(format!(
                "frame index {t} exceeds max_frames {}",
                self.config.max_frames
            )));
        }
        let mut x = self.frame_tokens_plain(canvas, t);
        for (b, lc) in self.blocks.iter().zip(cache.layers.iter()) {
            let (out, _, _) = block_attend(b, lc, &x, self.config.heads, None, ChunkAttn::FullChunk);
            x = out;
        }
        let xn = tensor::rms_norm_rows(&x, &self.out_norm.data, s(RMS_EPS));
        let mut rows = tensor::matmul(&xn, &self.head_w);
        for row in rows.data.chunks_mut(self.head_b.len()) {
            for (v, &b) in row.iter_mut().zip(self.head_b.data.iter()) {
                *v = *v + b;
            }
        }
        Ok(rows)
    }

    /// Extend the cache with frame t's tokens and return its reconstruction.
    pub fn advance_frame(
        &self,
        cache: &mut ReconCache<S>,
        canvas: &Canvas<S>,
        t: usize,
    ) -> Result<TensorData<S>> {
        if t >= self.config.max_frames {
            return Err(Error::InvalidParam(format!(
                "frame index {t} exceeds max_frames {}",
                self.config.max_frames
            )));
        }
        let mut x = self.frame_tokens_plain(canvas, t);
        for (b, lc) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let (out, k, v) = block_attend(b, lc, &x, self.config.heads, None, ChunkAttn::FullChunk);
            lc.append(k, v);
            x = out;
        }
        cache.frames += 1;
        let xn = tensor::rms_norm_rows(&x, &self.out_norm.data, s(RMS_EPS));
        let mut rows = tensor::matmul(&xn, &self.head_w);
        for row in rows.data.chunks_mut(self.head_b.len()) {
            for (v, &b) in row.iter_mut().zip(self.head_b.data.iter()) {
                *v = *v + b;
            }
        }
        Ok(self.frame_from_rows(&rows, canvas))
    }

    /// Reconstruct every frame of the video from a gaze prefix. Frames past
    /// the prefix are reconstructed from an empty canvas (fully masked).
    pub fn reconstruct(&self, video: &VideoTensor, gaze: &GazeSequence) -> Result<Vec<TensorData<S>>> {
        let grid = self.grid();
        self.check_video(video)?;
        let tokens = gaze.tokens_per_frame();
        let mut cache = self.new_cache();
        let mut outs = Vec::with_capacity(video.frames());
        for t in 0..video.frames() {
            let frame = video.frame_float::<S>(t);
            let canvas = if t < tokens.len() && !tokens[t].is_empty() {
                for tok in &tokens[t] {
                    if tok.index >= grid.vocab() {
                        return Err(Error::VocabIndex {
                            index: tok.index,
                            vocab: grid.vocab(),
                        });
                    }
                }
                let pyramid = FramePyramid::build(&grid, &frame)?;
                assemble_frame(&grid, &pyramid, &tokens[t])
            } else {
                Canvas::blank(&grid)
            };
            outs.push(self.advance_frame(&mut cache, &canvas, t)?);
        }
        Ok(outs)
    }

    /// Loss matrix l[t][k]: distance of frame t to its reconstruction from
    /// the global prefix ending at step k+1 of frame t (0-based k).
    pub fn prefix_losses(
        &self,
        distance: &Distance<S>,
        video: &VideoTensor,
        gaze: &GazeSequence,
    ) -> Result<Vec<Vec<S>>> {
        let grid = self.grid();
        self.check_video(video)?;
        let tokens = gaze.tokens_per_frame();
        let mut cache = self.new_cache();
        let mut out = Vec::with_capacity(video.frames());
        for t in 0..video.frames() {
            let frame = video.frame_float::<S>(t);
            let pyramid = FramePyramid::build(&grid, &frame)?;
            let toks = tokens.get(t).cloned().unwrap_or_default();
            let mut row = Vec::with_capacity(toks.len());
            let mut last_canvas = Canvas::blank(&grid);
            for k in 1..=toks.len() {
                let canvas = assemble_frame(&grid, &pyramid, &toks[..k]);
                let recon = self.peek_frame(&cache, &canvas, t)?;
                row.push(distance.frame(&frame, &recon)?);
                last_canvas = canvas;
            }
            self.advance_frame(&mut cache, &last_canvas, t)?;
            out.push(row);
        }
        Ok(out)
    }

    fn check_video(&self, video: &VideoTensor) -> Result<()> {
        let side = self.grid().frame_side();
        if video.height() != side || video.width() != side {
            return Err(Error::ShapeMismatch(format!(
                "video is {}x{}, model expects {side}x{side}",
                video.height(),
                video.width()
            )));
        }
        if video.frames() > self.config.max_frames {
            return Err(Error::InvalidParam(format!(
                "video has {} frames, model supports {} (tile it first)",
                video.frames(),
                self.config.max_frames
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub loss: f64,
}

/// Masked-autoencoder training: per video, sample per-frame visibility sets
/// from the curation length sampler, realize them as random multi-scale
/// tokens, and minimize the mean per-frame distance between reconstruction
/// and original.
pub fn train_recon<S: Scalar>(
    model: &mut ReconModel<S>,
    videos: &[VideoTensor],
    distance: &Distance<S>,
    cfg: &ReconTrainConfig,
) -> Result<Vec<EpochMetric>> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no training videos".into()));
    }
    let grid = model.grid();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let sizes = model.param_sizes();
    let mut opt = AdamW::<S>::new(&sizes);
    let steps_per_epoch = videos.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = model.leaf_all(&mut tape, true);
            let mut batch_terms = Vec::with_capacity(batch.len());
            for &vi in batch {
                let video = &videos[vi];
                let frames = video.frames_float::<S>();
                let sampler = LengthSampler::new(grid.vocab(), video.frames());
                let lengths = sampler.sample(rng.gen());
                let canvases: Vec<Canvas<S>> = frames
                    .iter()
                    .zip(lengths.iter())
                    .map(|(frame, &n)| {
                        let toks = random_tokens(&grid, n, &mut rng);
                        let pyramid = FramePyramid::build(&grid, frame)?;
                        Ok(assemble_frame(&grid, &pyramid, &toks))
                    })
                    .collect::<Result<_>>()?;
                let outs = model.forward_tape(&mut tape, &vars, &canvases)?;
                let mut frame_losses = Vec::with_capacity(outs.len());
                for (t, out) in outs.iter().enumerate() {
                    frame_losses.push(distance.frame_tape(&mut tape, &frames[t], *out));
                }
                let rows: Vec<Var> = frame_losses
                    .iter()
                    .map(|&l| tape_scalar_as_row(&mut tape, l))
                    .collect();
                let stacked = tape.concat_rows(&rows);
                batch_terms.push(tape.mean_all(stacked));
            }
            let rows: Vec<Var> = batch_terms
                .iter()
                .map(|&l| tape_scalar_as_row(&mut tape, l))
                .collect();
            let all = tape.concat_rows(&rows);
            let loss = tape.mean_all(all);
            let loss_val = tape.value(loss).item().to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = tape.backward(loss);
            let ordered = vars.all_vars();
            let gvecs: Vec<Vec<S>> = ordered
                .iter()
                .zip(sizes.iter())
                .map(|(&v, &n)| grads.of_or_zeros(v, n))
                .collect();
            let lr = cosine_lr(cfg.lr, step, total_steps, 0.1);
            opt.begin_step();
            let mut idx = 0usize;
            model.visit_mut(&mut |_, p| {
                opt.update(idx, p, &gvecs[idx], lr);
                idx += 1;
            });
            epoch_loss += loss_val;
            epoch_batches += 1;
            step += 1;
        }
        metrics.push(EpochMetric {
            epoch,
            loss: epoch_loss / epoch_batches as f64,
        });
    }
    Ok(metrics)
}

/// n distinct uniform token picks.
pub fn random_tokens(
    grid: &ScaleGrid,
    n: usize,
    rng: &mut StdRng,
) -> Vec<crate::codec::PatchToken> {
    let v = grid.vocab() as usize;
    let n = n.min(v);
    let mut chosen = vec![false; v];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let idx = rng.gen_range(0..v) as u32;
        if !chosen[idx as usize] {
            chosen[idx as usize] = true;
            out.push(grid.index_to_patch(idx).unwrap());
        }
    }
    out
}

fn tape_scalar_as_row<S: Scalar>(tape: &mut Tape<S>, v: Var) -> Var {
    tape.reshape(v, vec![1, 1])
}
