//! Multi-scale patch vocabulary: index mapping, patch extraction, canvas
//! assembly for the reconstructor, and overlay rendering.
//!
//! A frame of side `F` is viewed at several square resolutions (the scales).
//! At scale `s` the resampled frame holds a `s/patch` by `s/patch` grid of
//! patches, each covering a `patch * F/s` pixel footprint at full resolution.
//! The vocabulary enumerates every (scale, row, col) triple, coarsest scale
//! first, row-major within a scale.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{area_resample, TensorData};
use crate::video::VideoTensor;

/// The multi-scale patch vocabulary over a square frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleGrid {
    scales: Vec<usize>,
    patch: usize,
    grids: Vec<usize>,
    offsets: Vec<u32>,
    vocab: u32,
}

impl ScaleGrid {
    pub fn new(scales: &[usize], patch: usize) -> Result<Self> {
        if scales.is_empty() || patch == 0 {
            return Err(Error::InvalidParam("empty scale list or zero patch".into()));
        }
        let mut grids = Vec::with_capacity(scales.len());
        let mut offsets = Vec::with_capacity(scales.len());
        let mut vocab = 0u32;
        let mut prev = 0usize;
        for &sc in scales {
            if sc % patch != 0 {
                return Err(Error::InvalidParam(format!(
                    "scale {sc} not divisible by patch {patch}"
                )));
            }
            if sc <= prev {
                return Err(Error::InvalidParam(
                    "scales must be strictly increasing".into(),
                ));
            }
            prev = sc;
            let g = sc / patch;
            offsets.push(vocab);
            vocab += (g * g) as u32;
            grids.push(g);
        }
        // footprint = patch * frame_side / scale must be whole pixels
        let max = *scales.last().unwrap();
        for &sc in scales {
            if (patch * max) % sc != 0 {
                return Err(Error::InvalidParam(format!(
                    "scale {sc} yields a fractional footprint on a {max}-pixel frame"
                )));
            }
        }
        Ok(Self {
            scales: scales.to_vec(),
            patch,
            grids,
            offsets,
            vocab,
        })
    }

    /// Default vocabulary: scales 32/64/112/224 at patch 16 (V = 265).
    pub fn default_full() -> Self {
        Self::new(&[32, 64, 112, 224], 16).unwrap()
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn grid(&self, scale_idx: usize) -> usize {
        self.grids[scale_idx]
    }

    /// Native frame side: the finest scale.
    pub fn frame_side(&self) -> usize {
        *self.scales.last().unwrap()
    }

    /// Base-grid side used for visibility masks (frame side / patch).
    pub fn base_grid(&self) -> usize {
        self.frame_side() / self.patch
    }

    /// Full-resolution pixel footprint edge of a patch at the given scale.
    /// Always divides the frame side exactly grid-size times.
    pub fn footprint(&self, scale_idx: usize) -> usize {
        self.patch * self.frame_side() / self.scales[scale_idx]
    }

    pub fn index_to_patch(&self, index: u32) -> Result<PatchToken> {
        if index >= self.vocab {
            return Err(Error::VocabIndex {
                index,
                vocab: self.vocab,
            });
        }
        let mut scale_idx = self.scales.len() - 1;
        for (i, &off) in self.offsets.iter().enumerate().skip(1) {
            if index < off {
                scale_idx = i - 1;
                break;
            }
        }
        let local = (index - self.offsets[scale_idx]) as usize;
        let g = self.grids[scale_idx];
        Ok(PatchToken {
            index,
            scale_idx,
            row: local / g,
            col: local % g,
        })
    }

    pub fn patch_to_index(&self, scale_idx: usize, row: usize, col: usize) -> Result<u32> {
        if scale_idx >= self.scales.len() {
            return Err(Error::InvalidParam(format!(
                "scale index {scale_idx} out of range"
            )));
        }
        let g = self.grids[scale_idx];
        if row >= g || col >= g {
            return Err(Error::InvalidParam(format!(
                "grid coordinates ({row},{col}) out of range for grid {g}"
            )));
        }
        Ok(self.offsets[scale_idx] + (row * g + col) as u32)
    }
}

/// One vocabulary entry: a patch at (scale, row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchToken {
    pub index: u32,
    pub scale_idx: usize,
    pub row: usize,
    pub col: usize,
}

/// One selection step: a token plus optional recorded/predicted losses.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeStep {
    pub token: PatchToken,
    pub oracle_loss: Option<f64>,
    pub pred_loss: Option<f64>,
}

impl GazeStep {
    pub fn bare(token: PatchToken) -> Self {
        Self {
            token,
            oracle_loss: None,
            pred_loss: None,
        }
    }
}

/// Ordered multi-scale selections for the frames of one video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GazeSequence {
    pub frames: Vec<Vec<GazeStep>>,
}

impl GazeSequence {
    pub fn empty(n_frames: usize) -> Self {
        Self {
            frames: vec![Vec::new(); n_frames],
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.frames.iter().map(Vec::len).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Selected count over `vocab * frames`.
    pub fn ratio(&self, vocab: u32) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.total_steps() as f64 / (vocab as f64 * self.frames.len() as f64)
    }

    pub fn tokens_per_frame(&self) -> Vec<Vec<PatchToken>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|s| s.token).collect())
            .collect()
    }

    /// Indices must be distinct within every frame.
    pub fn validate_distinct(&self) -> Result<()> {
        for (t, frame) in self.frames.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for step in frame {
                if !seen.insert(step.token.index) {
                    return Err(Error::InvalidParam(format!(
                        "duplicate index {} in frame {t}",
                        step.token.index
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaze JSONL container
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GazeLine {
    video: String,
    frame: usize,
    step: usize,
    index: u32,
    scale: usize,
    row: usize,
    col: usize,
    oracle_loss: Option<f64>,
    pred_loss: Option<f64>,
}

/// Serialize a gaze sequence as JSON-lines, one object per step.
pub fn gaze_to_jsonl(video_id: &str, gaze: &GazeSequence, grid: &ScaleGrid) -> String {
    let mut out = String::new();
    for (t, frame) in gaze.frames.iter().enumerate() {
        for (k, step) in frame.iter().enumerate() {
            let line = GazeLine {
                video: video_id.to_string(),
                frame: t,
                step: k,
                index: step.token.index,
                scale: grid.scales[step.token.scale_idx],
                row: step.token.row,
                col: step.token.col,
                oracle_loss: step.oracle_loss,
                pred_loss: step.pred_loss,
            };
            writeln!(out, "{}", serde_json::to_string(&line).unwrap()).unwrap();
        }
    }
    out
}

pub fn save_gaze_jsonl(
    path: &Path,
    video_id: &str,
    gaze: &GazeSequence,
    grid: &ScaleGrid,
) -> Result<()> {
    fs::write(path, gaze_to_jsonl(video_id, gaze, grid)).map_err(|e| Error::io(path, e))
}

/// Parse a gaze JSONL file back into `(video id, sequence)`.
///
/// The scale value in each line is matched against `grid` to recover the
/// scale index; rows/cols are taken verbatim (merged sequences use global
/// coordinates).
pub fn load_gaze_jsonl(path: &Path, grid: &ScaleGrid) -> Result<(String, GazeSequence)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut video_id = String::new();
    let mut frames: Vec<Vec<GazeStep>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GazeLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if video_id.is_empty() {
            video_id = rec.video.clone();
        }
        let scale_idx = grid
            .scales
            .iter()
            .position(|&sc| sc == rec.scale)
            .ok_or_else(|| Error::Format(format!("unknown scale {} in gaze file", rec.scale)))?;
        while frames.len() <= rec.frame {
            frames.push(Vec::new());
        }
        if frames[rec.frame].len() != rec.step {
            return Err(Error::Format(format!(
                "{}:{}: out-of-order step {} in frame {}",
                path.display(),
                lineno + 1,
                rec.step,
                rec.frame
            )));
        }
        frames[rec.frame].push(GazeStep {
            token: PatchToken {
                index: rec.index,
                scale_idx,
                row: rec.row,
                col: rec.col,
            },
            oracle_loss: rec.oracle_loss,
            pred_loss: rec.pred_loss,
        });
    }
    Ok((video_id, GazeSequence { frames }))
}

// ---------------------------------------------------------------------------
// Patch extraction and canvas assembly
// ---------------------------------------------------------------------------

/// Per-scale resampled copies of one frame, so repeated extraction does not
/// re-run the area filter.
pub struct FramePyramid<S> {
    levels: Vec<TensorData<S>>,
}

impl<S: Scalar> FramePyramid<S> {
    pub fn build(grid: &ScaleGrid, frame: &TensorData<S>) -> Result<Self> {
        let side = grid.frame_side();
        if frame.shape != [side, side, 3] {
            return Err(Error::ShapeMismatch(format!(
                "expected {side}x{side}x3 frame, got {:?}",
                frame.shape
            )));
        }
        Ok(Self {
            levels: grid
                .scales
                .iter()
                .map(|&sc| area_resample(frame, sc))
                .collect(),
        })
    }

    /// Crop the (row, col) patch at the token's scale.
    pub fn patch(&self, grid: &ScaleGrid, token: &PatchToken) -> TensorData<S> {
        let level = &self.levels[token.scale_idx];
        let p = grid.patch();
        let side = grid.scales[token.scale_idx];
        let mut out = Vec::with_capacity(p * p * 3);
        for dy in 0..p {
            let y = token.row * p + dy;
            let off = (y * side + token.col * p) * 3;
            out.extend_from_slice(&level.data[off..off + p * 3]);
        }
        TensorData::new(vec![p, p, 3], out)
    }
}

/// Resample the frame to the token's scale by area averaging, then crop the
/// patch. At the finest scale this is a pure crop.
pub fn extract_patch<S: Scalar>(
    frame: &TensorData<S>,
    grid: &ScaleGrid,
    token: &PatchToken,
) -> Result<TensorData<S>> {
    let pyramid = FramePyramid::build(grid, frame)?;
    Ok(pyramid.patch(grid, token))
}

/// Assembled model input for one frame: pasted patch content plus the
/// base-grid visibility mask.
#[derive(Debug, Clone)]
pub struct Canvas<S> {
    /// frame_side x frame_side x 3 pasted content, zero where nothing pasted.
    pub pixels: TensorData<S>,
    /// base_grid x base_grid row-major cell visibility.
    pub mask: Vec<bool>,
}

impl<S: Scalar> Canvas<S> {
    pub fn blank(grid: &ScaleGrid) -> Self {
        let side = grid.frame_side();
        let g = grid.base_grid();
        Self {
            pixels: TensorData::zeros(vec![side, side, 3]),
            mask: vec![false; g * g],
        }
    }

    /// Paste one token's patch content (nearest-neighbor upsampled to its
    /// footprint) and mark every base cell that lies fully inside the
    /// footprint visible.
    ///
    /// Callers ordering pastes coarse-to-fine get the fine-overwrites-coarse
    /// composition.
    pub fn paste(&mut self, grid: &ScaleGrid, token: &PatchToken, patch: &TensorData<S>) {
        let side = grid.frame_side();
        let p = grid.patch();
        let fp = grid.footprint(token.scale_idx);
        let y0 = token.row * fp;
        let x0 = token.col * fp;
        for dy in 0..fp {
            let sy = dy * p / fp;
            for dx in 0..fp {
                let sx = dx * p / fp;
                for c in 0..3 {
                    self.pixels.data[((y0 + dy) * side + x0 + dx) * 3 + c] =
                        patch.data[(sy * p + sx) * 3 + c];
                }
            }
        }
        // cells wholly inside [y0, y0+fp) x [x0, x0+fp); footprints not
        // aligned to the cell lattice leave their partial border cells masked
        let gbase = grid.base_grid();
        let cy0 = y0.div_ceil(p);
        let cx0 = x0.div_ceil(p);
        let cy1 = (y0 + fp) / p;
        let cx1 = (x0 + fp) / p;
        for cy in cy0..cy1 {
            for cx in cx0..cx1 {
                self.mask[cy * gbase + cx] = true;
            }
        }
    }
}

/// Build per-frame canvases and visibility masks from ordered selections.
///
/// Within a frame, patches are pasted coarsest scale first (selection order
/// breaking ties), so finer content overwrites coarser content and later
/// picks overwrite earlier ones at equal scale.
pub fn assemble_canvas<S: Scalar>(
    grid: &ScaleGrid,
    frames: &[TensorData<S>],
    tokens: &[Vec<PatchToken>],
) -> Result<Vec<Canvas<S>>> {
    if frames.len() != tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} token lists",
            frames.len(),
            tokens.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (frame, toks) in frames.iter().zip(tokens.iter()) {
        let pyramid = FramePyramid::build(grid, frame)?;
        out.push(assemble_frame(grid, &pyramid, toks));
    }
    Ok(out)
}

/// Canvas for a single frame given an already-built pyramid.
pub fn assemble_frame<S: Scalar>(
    grid: &ScaleGrid,
    pyramid: &FramePyramid<S>,
    tokens: &[PatchToken],
) -> Canvas<S> {
    let mut canvas = Canvas::blank(grid);
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by_key(|&i| (tokens[i].scale_idx, i));
    for i in order {
        let patch = pyramid.patch(grid, &tokens[i]);
        canvas.paste(grid, &tokens[i], &patch);
    }
    canvas
}

// ---------------------------------------------------------------------------
// Global grid for merged (tiled) gazes
// ---------------------------------------------------------------------------

/// Index space for selections re-expressed in the coordinates of a padded
/// multi-tile video. Rows/cols count whole footprints of the corresponding
/// tile-level scale; the frame may be rectangular.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalGrid {
    footprints: Vec<usize>,
    dims: Vec<(usize, usize)>,
    offsets: Vec<u32>,
    vocab: u32,
}

impl GlobalGrid {
    pub fn new(grid: &ScaleGrid, padded_h: usize, padded_w: usize) -> Result<Self> {
        let mut footprints = Vec::new();
        let mut dims = Vec::new();
        let mut offsets = Vec::new();
        let mut vocab = 0u32;
        for sidx in 0..grid.n_scales() {
            let fp = grid.footprint(sidx);
            if padded_h % fp != 0 || padded_w % fp != 0 {
                return Err(Error::InvalidParam(format!(
                    "padded dims {padded_h}x{padded_w} not divisible by footprint {fp}"
                )));
            }
            footprints.push(fp);
            offsets.push(vocab);
            let (r, c) = (padded_h / fp, padded_w / fp);
            dims.push((r, c));
            vocab += (r * c) as u32;
        }
        Ok(Self {
            footprints,
            dims,
            offsets,
            vocab,
        })
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn patch_to_index(&self, scale_idx: usize, row: usize, col: usize) -> Result<u32> {
        let (r, c) = self.dims[scale_idx];
        if row >= r || col >= c {
            return Err(Error::InvalidParam(format!(
                "global coordinates ({row},{col}) out of range for {r}x{c}"
            )));
        }
        Ok(self.offsets[scale_idx] + (row * c + col) as u32)
    }

    pub fn index_to_patch(&self, index: u32) -> Result<PatchToken> {
        if index >= self.vocab {
            return Err(Error::VocabIndex {
                index,
                vocab: self.vocab,
            });
        }
        let mut scale_idx = self.dims.len() - 1;
        for (i, &off) in self.offsets.iter().enumerate().skip(1) {
            if index < off {
                scale_idx = i - 1;
                break;
            }
        }
        let local = (index - self.offsets[scale_idx]) as usize;
        let (_, c) = self.dims[scale_idx];
        Ok(PatchToken {
            index,
            scale_idx,
            row: local / c,
            col: local % c,
        })
    }
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

const SCALE_COLORS: [[u8; 3]; 6] = [
    [230, 60, 60],
    [240, 200, 40],
    [70, 200, 90],
    [70, 150, 240],
    [200, 90, 220],
    [240, 140, 50],
];

/// Binary PPM (P6) bytes for an H x W x 3 u8 image.
pub fn ppm_bytes(h: usize, w: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Write per-frame visualizations: the selected-patch mosaic on black and
/// scale-colored footprint boundary boxes over the original frame. Each image
/// is written both as binary PPM and as a single-frame raw video container.
pub fn render_overlay(
    video: &VideoTensor,
    gaze: &GazeSequence,
    grid: &ScaleGrid,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let side = grid.frame_side();
    let tokens = gaze.tokens_per_frame();
    for t in 0..video.frames() {
        let frame = video.frame_float::<f32>(t);
        let pyramid = FramePyramid::build(grid, &frame)?;
        let toks: &[PatchToken] = if t < tokens.len() { &tokens[t] } else { &[] };
        let canvas = assemble_frame(grid, &pyramid, toks);

        let mosaic: Vec<u8> = canvas
            .pixels
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();

        let mut boxes = video.frame_bytes(t).to_vec();
        for token in toks {
            let fp = grid.footprint(token.scale_idx);
            let color = SCALE_COLORS[token.scale_idx % SCALE_COLORS.len()];
            let y0 = token.row * fp;
            let x0 = token.col * fp;
            for d in 0..fp {
                for (y, x) in [
                    (y0, x0 + d),
                    (y0 + fp - 1, x0 + d),
                    (y0 + d, x0),
                    (y0 + d, x0 + fp - 1),
                ] {
                    let off = (y * side + x) * 3;
                    boxes[off..off + 3].copy_from_slice(&color);
                }
            }
        }

        for (name, rgb) in [("mosaic", &mosaic), ("boxes", &boxes)] {
            let stem = format!("{name}_{t:04}");
            fs::write(
                out_dir.join(format!("{stem}.ppm")),
                ppm_bytes(side, side, rgb),
            )
            .map_err(|e| Error::io(out_dir, e))?;
            let single = VideoTensor::from_bytes(
                format!("{}_{stem}", video.id()),
                1,
                side,
                side,
                video.fps(),
                rgb.clone(),
            )?;
            single.save(&out_dir.join(stem))?;
        }
    }
    Ok(())
}
