//! Video representation, bit-exact raw container I/O, synthetic generators,
//! and the spatiotemporal tiling/merging wrapper.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{GazeSequence, GazeStep, GlobalGrid, PatchToken, ScaleGrid};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::TensorData;

/// A T x H x W x 3 stack of 8-bit RGB frames with float views for compute.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    id: String,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: String,
    width: usize,
    height: usize,
    frames: usize,
    fps: f64,
    dtype: String,
}

impl VideoTensor {
    pub fn from_bytes(
        id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        fps: f64,
        data: Vec<u8>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidParam("video needs at least one frame".into()));
        }
        let expected = frames * height * width * 3;
        if data.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                actual: data.len() as u64,
            });
        }
        Ok(Self {
            id: id.into(),
            frames,
            height,
            width,
            fps,
            data,
        })
    }

    pub fn black(id: impl Into<String>, frames: usize, height: usize, width: usize) -> Self {
        Self {
            id: id.into(),
            frames,
            height,
            width,
            fps: 10.0,
            data: vec![0; frames * height * width * 3],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn fps(&self) -> f64 {
        self.fps
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let off = ((t * self.height + y) * self.width + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    /// Float view of one frame in [0,1], shape [H, W, 3].
    pub fn frame_float<S: Scalar>(&self, t: usize) -> TensorData<S> {
        let inv = s::<S>(1.0 / 255.0);
        TensorData::new(
            vec![self.height, self.width, 3],
            self.frame_bytes(t)
                .iter()
                .map(|&b| s::<S>(b as f64) * inv)
                .collect(),
        )
    }

    pub fn frames_float<S: Scalar>(&self) -> Vec<TensorData<S>> {
        (0..self.frames).map(|t| self.frame_float(t)).collect()
    }

    /// Mean absolute RGB difference (in [0,1] units) between two frames.
    pub fn frame_diff(&self, a: usize, b: usize) -> f64 {
        let fa = self.frame_bytes(a);
        let fb = self.frame_bytes(b);
        let sum: f64 = fa
            .iter()
            .zip(fb.iter())
            .map(|(&x, &y)| ((x as f64) - (y as f64)).abs())
            .sum();
        sum / (fa.len() as f64 * 255.0)
    }

    /// Write the directory container: manifest.json + frames.rgb8.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            frames: self.frames,
            fps: self.fps,
            dtype: "rgb8".into(),
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(|e| Error::io(&mpath, e))?;
        let fpath = dir.join("frames.rgb8");
        fs::write(&fpath, &self.data).map_err(|e| Error::io(&fpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let mbytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)
            .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        if manifest.dtype != "rgb8" {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                manifest.dtype
            )));
        }
        let fpath = dir.join("frames.rgb8");
        let data = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let expected = manifest.frames * manifest.height * manifest.width * 3;
        if data.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                actual: data.len() as u64,
            });
        }
        Self::from_bytes(
            manifest.id,
            manifest.frames,
            manifest.height,
            manifest.width,
            manifest.fps,
            data,
        )
    }
}

/// Forward optical-flow maps, one per frame transition, (dy, dx) per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub transitions: usize,
    pub height: usize,
    pub width: usize,
    /// (transitions) x H x W x 2 in (dy, dx) order.
    pub data: Vec<f32>,
}

impl FlowStack {
    pub fn zeros(transitions: usize, height: usize, width: usize) -> Self {
        Self {
            transitions,
            height,
            width,
            data: vec![0.0; transitions * height * width * 2],
        }
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        let off = ((t * self.height + y) * self.width + x) * 2;
        (self.data[off], self.data[off + 1])
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, dy: f32, dx: f32) {
        let off = ((t * self.height + y) * self.width + x) * 2;
        self.data[off] = dy;
        self.data[off + 1] = dx;
    }

    /// Little-endian f32 sidecar written next to the video container.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("flow.f32");
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, frames: usize, height: usize, width: usize) -> Result<Self> {
        let path = dir.join("flow.f32");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let transitions = frames.saturating_sub(1);
        let expected = transitions * height * width * 2 * 4;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            transitions,
            height,
            width,
            data,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("flow.f32").is_file()
    }
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Sliding-window camera-motion synthesis over a still image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlidingWindowParams {
    pub image_h: usize,
    pub image_w: usize,
    pub window: usize,
    pub step: usize,
    pub turn_prob: f64,
    pub frames: usize,
}

const DIRECTIONS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Positions of the window after each step of the seeded random walk.
/// Exposed so tests can check crops against the walk directly.
pub fn sliding_window_positions(params: &SlidingWindowParams, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let max_y = (params.image_h - params.window) as i64;
    let max_x = (params.image_w - params.window) as i64;
    let mut y = rng.gen_range(0..=max_y);
    let mut x = rng.gen_range(0..=max_x);
    let mut dir = DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())];
    let mut out = Vec::with_capacity(params.frames);
    out.push((y as usize, x as usize));
    for _ in 1..params.frames {
        if rng.gen::<f64>() < params.turn_prob {
            dir = DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())];
        }
        y = (y + dir.0 * params.step as i64).clamp(0, max_y);
        x = (x + dir.1 * params.step as i64).clamp(0, max_x);
        out.push((y as usize, x as usize));
    }
    out
}

/// Crop a window trajectory out of a still image: frame t is the crop after
/// t steps of a seeded random walk (direction resampled each frame with
/// `turn_prob`, clamped at the borders).
pub fn gen_sliding_window(
    image: &VideoTensor,
    params: &SlidingWindowParams,
    seed: u64,
) -> Result<VideoTensor> {
    if image.height() != params.image_h || image.width() != params.image_w {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, params say {}x{}",
            image.height(),
            image.width(),
            params.image_h,
            params.image_w
        )));
    }
    if params.window > params.image_h.min(params.image_w) {
        return Err(Error::InvalidParam(format!(
            "window {} larger than image {}x{}",
            params.window, params.image_h, params.image_w
        )));
    }
    if params.frames == 0 {
        return Err(Error::InvalidParam("frame count must be >= 1".into()));
    }
    let w = params.window;
    let positions = sliding_window_positions(params, seed);
    let mut data = Vec::with_capacity(params.frames * w * w * 3);
    for &(y0, x0) in &positions {
        for dy in 0..w {
            let off = ((y0 + dy) * image.width() + x0) * 3;
            data.extend_from_slice(&image.frame_bytes(0)[off..off + w * 3]);
        }
    }
    VideoTensor::from_bytes(
        format!("{}_slide_{seed}", image.id()),
        params.frames,
        w,
        w,
        10.0,
        data,
    )
}

/// Seeded textured still image: gray blocks, a gradient wash, and a few
/// colored rectangles so frames have both smooth and detailed regions.
pub fn gen_texture_image(id: &str, height: usize, width: usize, seed: u64) -> VideoTensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut data = vec![0u8; height * width * 3];
    let block = 8;
    let by = height.div_ceil(block);
    let bx = width.div_ceil(block);
    let grays: Vec<u8> = (0..by * bx).map(|_| rng.gen_range(40..=210)).collect();
    for y in 0..height {
        for x in 0..width {
            let g = grays[(y / block) * bx + x / block];
            let wash = (x * 40 / width.max(1)) as i32 - 20;
            let v = (g as i32 + wash).clamp(0, 255) as u8;
            let off = (y * width + x) * 3;
            data[off] = v;
            data[off + 1] = v;
            data[off + 2] = v;
        }
    }
    for _ in 0..6 {
        let h = rng.gen_range(height / 10..height / 3);
        let w = rng.gen_range(width / 10..width / 3);
        let y0 = rng.gen_range(0..height - h);
        let x0 = rng.gen_range(0..width - w);
        let color: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let off = (y * width + x) * 3;
                data[off..off + 3].copy_from_slice(&color);
            }
        }
    }
    VideoTensor::from_bytes(id, 1, height, width, 10.0, data).unwrap()
}

/// Solid-color rectangles moving with constant integer velocity over a
/// static gray textured background. Emits the ground-truth forward flow per
/// frame transition: the displacement of the topmost shape at each source
/// pixel, zero on background.
pub fn gen_moving_shapes(
    canvas: usize,
    n_shapes: usize,
    frames: usize,
    seed: u64,
) -> Result<(VideoTensor, FlowStack)> {
    if frames == 0 {
        return Err(Error::InvalidParam("frame count must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);

    // static background: gray blocks only, so shapes are chroma-identifiable
    let mut bg = vec![0u8; canvas * canvas * 3];
    let block = 8;
    let bcount = canvas.div_ceil(block);
    let grays: Vec<u8> = (0..bcount * bcount)
        .map(|_| rng.gen_range(60..=190))
        .collect();
    for y in 0..canvas {
        for x in 0..canvas {
            let g = grays[(y / block) * bcount + x / block];
            let off = (y * canvas + x) * 3;
            bg[off] = g;
            bg[off + 1] = g;
            bg[off + 2] = g;
        }
    }

    struct Shape {
        y: i64,
        x: i64,
        h: i64,
        w: i64,
        vy: i64,
        vx: i64,
        color: [u8; 3],
    }
    let palette: [[u8; 3]; 6] = [
        [220, 30, 30],
        [30, 170, 40],
        [40, 70, 220],
        [230, 180, 20],
        [200, 40, 190],
        [20, 190, 200],
    ];
    let t_end = (frames - 1) as i64;
    let mut shapes = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let h = rng.gen_range(canvas as i64 / 8..=canvas as i64 / 4);
        let w = rng.gen_range(canvas as i64 / 8..=canvas as i64 / 4);
        let mut vy = rng.gen_range(-3i64..=3);
        let mut vx = rng.gen_range(-3i64..=3);
        if vy == 0 && vx == 0 {
            vx = 1;
        }
        // keep the whole trajectory inside the canvas
        let fit = |v: i64, extent: i64| -> (i64, i64, i64) {
            let lo = 0.max(-v * t_end);
            let hi = (canvas as i64 - extent) + 0.min(-v * t_end);
            if lo > hi {
                (0, canvas as i64 - extent, 0)
            } else {
                (lo, hi, v)
            }
        };
        let (ylo, yhi, vy2) = fit(vy, h);
        let (xlo, xhi, vx2) = fit(vx, w);
        vy = vy2;
        vx = vx2;
        shapes.push(Shape {
            y: rng.gen_range(ylo..=yhi),
            x: rng.gen_range(xlo..=xhi),
            h,
            w,
            vy,
            vx,
            color: palette[i % palette.len()],
        });
    }

    let mut data = Vec::with_capacity(frames * canvas * canvas * 3);
    let mut flow = FlowStack::zeros(frames.saturating_sub(1), canvas, canvas);
    for t in 0..frames {
        let mut frame = bg.clone();
        // draw order = shape order; last drawn is topmost
        let mut top = vec![usize::MAX; canvas * canvas];
        for (si, sh) in shapes.iter().enumerate() {
            let y0 = sh.y + sh.vy * t as i64;
            let x0 = sh.x + sh.vx * t as i64;
            for y in y0..y0 + sh.h {
                for x in x0..x0 + sh.w {
                    let off = (y as usize * canvas + x as usize) * 3;
                    frame[off..off + 3].copy_from_slice(&sh.color);
                    top[y as usize * canvas + x as usize] = si;
                }
            }
        }
        if t + 1 < frames {
            for y in 0..canvas {
                for x in 0..canvas {
                    let si = top[y * canvas + x];
                    if si != usize::MAX {
                        flow.set(t, y, x, shapes[si].vy as f32, shapes[si].vx as f32);
                    }
                }
            }
        }
        data.extend_from_slice(&frame);
    }
    let video = VideoTensor::from_bytes(
        format!("shapes_{seed}"),
        frames,
        canvas,
        canvas,
        10.0,
        data,
    )?;
    Ok((video, flow))
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

/// One spatiotemporal tile of a padded video. The pad fields record how much
/// of the tile's right/bottom/end lies outside the original video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub t0: usize,
    pub tlen: usize,
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
    pub pad_frames: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

/// Split into tlen x side x side tiles, zero-padding the right/bottom/end up
/// to whole multiples. Tiles are emitted start-frame-major, then row-major.
pub fn tile_video(video: &VideoTensor, tlen: usize, side: usize) -> Vec<(TileSpec, VideoTensor)> {
    let padded_t = video.frames().div_ceil(tlen) * tlen;
    let padded_h = video.height().div_ceil(side) * side;
    let padded_w = video.width().div_ceil(side) * side;
    let mut out = Vec::new();
    for t0 in (0..padded_t).step_by(tlen) {
        for y0 in (0..padded_h).step_by(side) {
            for x0 in (0..padded_w).step_by(side) {
                let spec = TileSpec {
                    t0,
                    tlen,
                    y0,
                    x0,
                    side,
                    pad_frames: (t0 + tlen).saturating_sub(video.frames().max(t0)),
                    pad_rows: (y0 + side).saturating_sub(video.height().max(y0)),
                    pad_cols: (x0 + side).saturating_sub(video.width().max(x0)),
                };
                let mut data = vec![0u8; tlen * side * side * 3];
                for dt in 0..tlen.min(video.frames().saturating_sub(t0)) {
                    let src = video.frame_bytes(t0 + dt);
                    for dy in 0..side.min(video.height().saturating_sub(y0)) {
                        let cols = side.min(video.width().saturating_sub(x0));
                        let soff = ((y0 + dy) * video.width() + x0) * 3;
                        let doff = ((dt * side + dy) * side) * 3;
                        data[doff..doff + cols * 3].copy_from_slice(&src[soff..soff + cols * 3]);
                    }
                }
                let tile = VideoTensor::from_bytes(
                    format!("{}_t{t0}_y{y0}_x{x0}", video.id()),
                    tlen,
                    side,
                    side,
                    video.fps(),
                    data,
                )
                .unwrap();
                out.push((spec, tile));
            }
        }
    }
    out
}

/// Re-express per-tile selections in global coordinates.
///
/// Ordering is frame-major, then tile row-major, then local step order.
/// Selections whose footprint lies wholly in padding are dropped, as are
/// frames past the original video length. Global (row, col) count whole
/// footprints of the selection's scale; indices are re-derived on the padded
/// video's [`GlobalGrid`].
pub fn merge_gazes(
    tile_gazes: &[(TileSpec, GazeSequence)],
    grid: &ScaleGrid,
) -> Result<GazeSequence> {
    if tile_gazes.is_empty() {
        return Err(Error::Partition("no tiles given".into()));
    }
    let side = tile_gazes[0].0.side;
    let tlen = tile_gazes[0].0.tlen;
    if side != grid.frame_side() {
        return Err(Error::Partition(format!(
            "tile side {side} does not match grid frame side {}",
            grid.frame_side()
        )));
    }
    let mut max_t = 0;
    let mut max_y = 0;
    let mut max_x = 0;
    let mut seen = std::collections::BTreeSet::new();
    for (spec, _) in tile_gazes {
        if spec.side != side || spec.tlen != tlen {
            return Err(Error::Partition("inconsistent tile sizes".into()));
        }
        if spec.t0 % tlen != 0 || spec.y0 % side != 0 || spec.x0 % side != 0 {
            return Err(Error::Partition("tile origin off the tile lattice".into()));
        }
        if !seen.insert((spec.t0, spec.y0, spec.x0)) {
            return Err(Error::Partition(format!(
                "duplicate tile at ({}, {}, {})",
                spec.t0, spec.y0, spec.x0
            )));
        }
        max_t = max_t.max(spec.t0 + tlen);
        max_y = max_y.max(spec.y0 + side);
        max_x = max_x.max(spec.x0 + side);
    }
    let expected = (max_t / tlen) * (max_y / side) * (max_x / side);
    if seen.len() != expected {
        return Err(Error::Partition(format!(
            "{} tiles cannot partition a {}x{}x{} volume",
            seen.len(),
            max_t,
            max_y,
            max_x
        )));
    }

    // original extents from the recorded padding
    let mut orig_t = max_t;
    let mut orig_h = max_y;
    let mut orig_w = max_x;
    for (spec, _) in tile_gazes {
        if spec.t0 + tlen == max_t {
            orig_t = orig_t.min(max_t - spec.pad_frames);
        }
        if spec.y0 + side == max_y {
            orig_h = orig_h.min(max_y - spec.pad_rows);
        }
        if spec.x0 + side == max_x {
            orig_w = orig_w.min(max_x - spec.pad_cols);
        }
    }

    let global = GlobalGrid::new(grid, max_y, max_x)?;
    let mut ordered: Vec<&(TileSpec, GazeSequence)> = tile_gazes.iter().collect();
    ordered.sort_by_key(|(spec, _)| (spec.t0, spec.y0, spec.x0));

    let mut merged = GazeSequence::empty(orig_t);
    for g in 0..orig_t {
        for (spec, gaze) in ordered.iter() {
            if g < spec.t0 || g >= spec.t0 + tlen {
                continue;
            }
            let local_t = g - spec.t0;
            let Some(steps) = gaze.frames.get(local_t) else {
                continue;
            };
            for step in steps {
                let fp = grid.footprint(step.token.scale_idx);
                let gy = spec.y0 + step.token.row * fp;
                let gx = spec.x0 + step.token.col * fp;
                if gy >= orig_h || gx >= orig_w {
                    continue; // footprint wholly in padding
                }
                let token = PatchToken {
                    index: global.patch_to_index(step.token.scale_idx, gy / fp, gx / fp)?,
                    scale_idx: step.token.scale_idx,
                    row: gy / fp,
                    col: gx / fp,
                };
                merged.frames[g].push(GazeStep {
                    token,
                    oracle_loss: step.oracle_loss,
                    pred_loss: step.pred_loss,
                });
            }
        }
    }
    Ok(merged)
}
