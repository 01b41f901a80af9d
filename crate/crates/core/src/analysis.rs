//! Heuristic gazing baselines, ratio-vs-loss curve generation, optical-flow
//! and image-detail behavioral analyses, and latency benchmarking.

use std::fmt::Write as _;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::codec::{GazeSequence, GazeStep, ScaleGrid};
use crate::error::{Error, Result};
use crate::gazer::{GazeOptions, GazerParams};
use crate::parallel::run_parallel;
use crate::recon::{Distance, ReconModel};
use crate::scalar::Scalar;
use crate::tensor::TensorData;
use crate::video::{FlowStack, VideoTensor};

// ---------------------------------------------------------------------------
// Heuristic gazers
// ---------------------------------------------------------------------------

/// Uniform selection without within-frame replacement over the full
/// multi-scale vocabulary.
pub fn random_gaze(
    video: &VideoTensor,
    lengths: &[usize],
    grid: &ScaleGrid,
    seed: u64,
) -> Result<GazeSequence> {
    if lengths.len() != video.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for {} frames",
            lengths.len(),
            video.frames()
        )));
    }
    let v = grid.vocab() as usize;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut gaze = GazeSequence::empty(video.frames());
    for (t, &n) in lengths.iter().enumerate() {
        if n > v {
            return Err(Error::InvalidParam(format!(
                "frame {t} asks for {n} of {v} tokens"
            )));
        }
        // partial Fisher-Yates over the index range
        let mut pool: Vec<u32> = (0..v as u32).collect();
        for k in 0..n {
            let j = rng.gen_range(k..v);
            pool.swap(k, j);
            gaze.frames[t].push(GazeStep::bare(grid.index_to_patch(pool[k])?));
        }
    }
    Ok(gaze)
}

/// Footprint aggregation for the RGB-difference baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Aggregate {
    Mean,
    Max,
}

/// Per-token scores for one frame: RGB difference of the footprint between
/// the current and previous frame (frame 0 against black).
pub fn rgbdiff_scores(
    video: &VideoTensor,
    t: usize,
    grid: &ScaleGrid,
    agg: Aggregate,
) -> Vec<f64> {
    let side = grid.frame_side();
    let cur = video.frame_bytes(t);
    let prev: Option<&[u8]> = if t > 0 {
        Some(video.frame_bytes(t - 1))
    } else {
        None
    };
    // per-pixel mean |diff| over channels, in [0,1]
    let mut diff = vec![0.0f64; side * side];
    for (i, d) in diff.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..3 {
            let a = cur[i * 3 + c] as f64;
            let b = prev.map_or(0.0, |p| p[i * 3 + c] as f64);
            acc += (a - b).abs();
        }
        *d = acc / (3.0 * 255.0);
    }
    score_footprints(&diff, side, grid, agg)
}

fn score_footprints(map: &[f64], side: usize, grid: &ScaleGrid, agg: Aggregate) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.vocab() as usize);
    for sidx in 0..grid.n_scales() {
        let fp = grid.footprint(sidx);
        let g = grid.grid(sidx);
        for row in 0..g {
            for col in 0..g {
                let mut acc = 0.0f64;
                let mut max = f64::NEG_INFINITY;
                for y in row * fp..(row + 1) * fp {
                    for x in col * fp..(col + 1) * fp {
                        let v = map[y * side + x];
                        acc += v;
                        if v > max {
                            max = v;
                        }
                    }
                }
                out.push(match agg {
                    Aggregate::Mean => acc / (fp * fp) as f64,
                    Aggregate::Max => max,
                });
            }
        }
    }
    out
}

/// Top-N selection by score with smallest-index tie-breaks.
fn top_n_by_score(scores: &[f64], n: usize, grid: &ScaleGrid) -> Result<Vec<GazeStep>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
        .iter()
        .take(n)
        .map(|&i| Ok(GazeStep::bare(grid.index_to_patch(i as u32)?)))
        .collect()
}

/// Select the per-frame top-N tokens by footprint RGB difference against the
/// previous frame (a blank frame before frame 0).
pub fn rgbdiff_gaze(
    video: &VideoTensor,
    lengths: &[usize],
    grid: &ScaleGrid,
    agg: Aggregate,
) -> Result<GazeSequence> {
    if lengths.len() != video.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for {} frames",
            lengths.len(),
            video.frames()
        )));
    }
    let mut gaze = GazeSequence::empty(video.frames());
    for (t, &n) in lengths.iter().enumerate() {
        let scores = rgbdiff_scores(video, t, grid, agg);
        gaze.frames[t] = top_n_by_score(&scores, n.min(scores.len()), grid)?;
    }
    Ok(gaze)
}

// ---------------------------------------------------------------------------
// Optical flow
// ---------------------------------------------------------------------------

/// Per-transition merged flow magnitude maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedFlow {
    pub transitions: usize,
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<f32>,
}

impl MergedFlow {
    pub fn at(&self, t: usize, y: usize, x: usize) -> f32 {
        self.magnitude[(t * self.height + y) * self.width + x]
    }
}

/// Build the backward flow by splatting the inverse displacement at each
/// source pixel's rounded destination (out-of-bounds splats dropped, collisions
/// resolved toward the larger magnitude), then merge: per-pixel max of the
/// forward and backward magnitudes.
pub fn merge_backward_flow(forward: &FlowStack) -> MergedFlow {
    let (h, w) = (forward.height, forward.width);
    let mut magnitude = vec![0.0f32; forward.transitions * h * w];
    for t in 0..forward.transitions {
        let mut bwd = vec![(0.0f32, 0.0f32); h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = forward.at(t, y, x);
                if dy == 0.0 && dx == 0.0 {
                    continue;
                }
                let ty = (y as f32 + dy).round() as i64;
                let tx = (x as f32 + dx).round() as i64;
                if ty < 0 || ty >= h as i64 || tx < 0 || tx >= w as i64 {
                    continue; // leaves the frame: invalid, stays zero
                }
                let slot = &mut bwd[ty as usize * w + tx as usize];
                let new_mag = dy * dy + dx * dx;
                let old_mag = slot.0 * slot.0 + slot.1 * slot.1;
                if new_mag > old_mag {
                    *slot = (-dy, -dx);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = forward.at(t, y, x);
                let fmag = (fy * fy + fx * fx).sqrt();
                let (by, bx) = bwd[y * w + x];
                let bmag = (by * by + bx * bx).sqrt();
                magnitude[(t * h + y) * w + x] = fmag.max(bmag);
            }
        }
    }
    MergedFlow {
        transitions: forward.transitions,
        height: h,
        width: w,
        magnitude,
    }
}

/// Per-token max merged-flow magnitude for frame t (transition t-1 -> t;
/// frame 0 scores zero).
pub fn flow_scores(merged: &MergedFlow, t: usize, grid: &ScaleGrid) -> Vec<f64> {
    let side = grid.frame_side();
    if t == 0 {
        return vec![0.0; grid.vocab() as usize];
    }
    let map: Vec<f64> = (0..side * side)
        .map(|i| merged.magnitude[((t - 1) * side + i / side) * side + i % side] as f64)
        .collect();
    score_footprints(&map, side, grid, Aggregate::Max)
}

/// Select the per-frame top-N tokens by max merged-flow magnitude in the
/// footprint.
pub fn flow_gaze(
    video: &VideoTensor,
    merged: &MergedFlow,
    lengths: &[usize],
    grid: &ScaleGrid,
) -> Result<GazeSequence> {
    if lengths.len() != video.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for {} frames",
            lengths.len(),
            video.frames()
        )));
    }
    if merged.height != video.height() || merged.width != video.width() {
        return Err(Error::ShapeMismatch("flow/video size mismatch".into()));
    }
    if video.frames() > 1 && merged.transitions + 1 < video.frames() {
        return Err(Error::InvalidParam(format!(
            "flow has {} transitions for {} frames",
            merged.transitions,
            video.frames()
        )));
    }
    let mut gaze = GazeSequence::empty(video.frames());
    for (t, &n) in lengths.iter().enumerate() {
        let scores = flow_scores(merged, t, grid);
        gaze.frames[t] = top_n_by_score(&scores, n.min(scores.len()), grid)?;
    }
    Ok(gaze)
}

// ---------------------------------------------------------------------------
// Laplacian detail
// ---------------------------------------------------------------------------

/// Per-token variance of the 3x3 Laplacian response (zero-padded borders)
/// over each token footprint at native resolution. Grayscale is the RGB
/// mean.
pub fn laplacian_detail(frame: &TensorData<f64>, grid: &ScaleGrid) -> Result<Vec<f64>> {
    let side = grid.frame_side();
    if frame.shape != [side, side, 3] {
        return Err(Error::ShapeMismatch(format!(
            "expected {side}x{side}x3 frame, got {:?}",
            frame.shape
        )));
    }
    let gray: Vec<f64> = frame
        .data
        .chunks(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || y >= side as i64 || x < 0 || x >= side as i64 {
            0.0
        } else {
            gray[y as usize * side + x as usize]
        }
    };
    let mut resp = vec![0.0f64; side * side];
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            resp[y as usize * side + x as usize] =
                at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        }
    }
    let mut out = Vec::with_capacity(grid.vocab() as usize);
    for sidx in 0..grid.n_scales() {
        let fp = grid.footprint(sidx);
        let g = grid.grid(sidx);
        for row in 0..g {
            for col in 0..g {
                let n = (fp * fp) as f64;
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for y in row * fp..(row + 1) * fp {
                    for x in col * fp..(col + 1) * fp {
                        let v = resp[y * side + x];
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mean = sum / n;
                out.push(sumsq / n - mean * mean);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ratio-loss curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub method: String,
    pub ratio: f64,
    pub mean_loss: f64,
    pub stderr: f64,
    pub n: usize,
}

/// A gazing method under curve evaluation: video + per-frame lengths in,
/// selection sequence out.
pub type MethodFn<'a> = &'a (dyn Fn(&VideoTensor, &[usize]) -> Result<GazeSequence> + Sync);

/// Sweep gazing ratios: at each ratio every method receives identical
/// uniform per-frame lengths round(ratio * V); the score is the mean final
/// per-frame reconstruction loss.
pub fn ratio_loss_curve<S: Scalar>(
    methods: &[(&str, MethodFn<'_>)],
    videos: &[VideoTensor],
    ratios: &[f64],
    recon: &ReconModel<S>,
    distance: &Distance<S>,
    workers: usize,
) -> Result<Vec<CurvePoint>> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no curve videos".into()));
    }
    let v = recon.grid().vocab() as f64;
    let mut points = Vec::with_capacity(methods.len() * ratios.len());
    for &(name, method) in methods {
        for &ratio in ratios {
            let jobs: Vec<&VideoTensor> = videos.iter().collect();
            let losses: Vec<Result<f64>> = run_parallel(workers, jobs, |video| {
                let n = (ratio * v).round() as usize;
                let lengths = vec![n; video.frames()];
                let gaze = method(video, &lengths)?;
                let outs = recon.reconstruct(video, &gaze)?;
                let mut acc = 0.0;
                for t in 0..video.frames() {
                    let orig = video.frame_float::<S>(t);
                    acc += Scalar::to_f64(distance.frame(&orig, &outs[t])?);
                }
                Ok(acc / video.frames() as f64)
            });
            let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
            let n = losses.len();
            let mean = losses.iter().sum::<f64>() / n as f64;
            let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                / (n.max(2) - 1) as f64;
            points.push(CurvePoint {
                method: name.to_string(),
                ratio,
                mean_loss: mean,
                stderr: (var / n as f64).sqrt(),
                n,
            });
        }
    }
    Ok(points)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("method,ratio,mean_loss,stderr,n\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.method, p.ratio, p.mean_loss, p.stderr, p.n
        )
        .unwrap();
    }
    out
}

// ---------------------------------------------------------------------------
// Selection-vs-flow statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScaleFlowStat {
    pub scale: usize,
    pub selected_mean: f64,
    pub selected_sem: f64,
    pub selected_n: usize,
    pub unselected_mean: f64,
    pub unselected_sem: f64,
    pub unselected_n: usize,
}

/// Per scale, the mean per-token max merged-flow magnitude over selected vs
/// unselected tokens. Frames without a transition map (frame 0) carry no
/// motion signal and are skipped.
pub fn gaze_flow_stats(
    gaze: &GazeSequence,
    merged: &MergedFlow,
    grid: &ScaleGrid,
) -> Vec<ScaleFlowStat> {
    let mut sel: Vec<Vec<f64>> = vec![Vec::new(); grid.n_scales()];
    let mut unsel: Vec<Vec<f64>> = vec![Vec::new(); grid.n_scales()];
    let t_max = gaze.frames.len().min(merged.transitions + 1);
    for t in 1..t_max {
        let scores = flow_scores(merged, t, grid);
        let mut selected = vec![false; scores.len()];
        for step in &gaze.frames[t] {
            selected[step.token.index as usize] = true;
        }
        for (i, &score) in scores.iter().enumerate() {
            let sidx = grid.index_to_patch(i as u32).unwrap().scale_idx;
            if selected[i] {
                sel[sidx].push(score);
            } else {
                unsel[sidx].push(score);
            }
        }
    }
    let stat = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (0.0, 0.0);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return (mean, 0.0);
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    (0..grid.n_scales())
        .map(|sidx| {
            let (sm, ss) = stat(&sel[sidx]);
            let (um, us) = stat(&unsel[sidx]);
            ScaleFlowStat {
                scale: grid.scales()[sidx],
                selected_mean: sm,
                selected_sem: ss,
                selected_n: sel[sidx].len(),
                unselected_mean: um,
                unselected_sem: us,
                unselected_n: unsel[sidx].len(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Latency benchmarking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub component: String,
    pub fps: usize,
    pub resolution: usize,
    pub mode: String,
    pub median_ms: f64,
    pub max_fps: f64,
    /// Full-gaze token count of the workload (frames x per-frame patches).
    pub tokens: usize,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchMeta {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

pub fn bench_meta() -> BenchMeta {
    BenchMeta {
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Wall-clock medians for gazing and reconstruction over an fps x resolution
/// workload grid, one second of synthetic video per cell. Streaming mode
/// feeds frames one at a time and reports the max sustainable FPS. Cells
/// whose estimated attention footprint exceeds the memory guard are marked
/// instead of run.
#[allow(clippy::too_many_arguments)]
pub fn latency_bench<S: Scalar>(
    gazer: &GazerParams<S>,
    recon: &ReconModel<S>,
    fps_list: &[usize],
    res_list: &[usize],
    streaming: bool,
    runs: usize,
    opts: &GazeOptions,
    mem_budget_bytes: usize,
) -> Result<Vec<BenchCell>> {
    let runs = runs.max(5);
    let side = gazer.config.frame_side();
    let patch = gazer.config.grid().patch();
    let mode = if streaming { "streaming" } else { "batch" };
    let mut cells = Vec::new();
    for &fps in fps_list {
        for &res in res_list {
            let frames = fps.max(1);
            let tokens = (res / patch) * (res / patch) * frames;
            // attention cache estimate per tile: seq^2 per layer in floats
            let v = gazer.grid().vocab() as usize;
            let gc = gazer.config.cond_grid();
            let budget = ((opts.max_ratio * v as f64) as usize).max(1);
            let tile_frames = gazer.config.max_frames.min(frames);
            let seq = tile_frames * (gc * gc + budget);
            let est = seq * seq * gazer.config.heads * std::mem::size_of::<S>();
            if est > mem_budget_bytes {
                cells.push(BenchCell {
                    component: "gazer".into(),
                    fps,
                    resolution: res,
                    mode: mode.into(),
                    median_ms: f64::NAN,
                    max_fps: 0.0,
                    tokens,
                    note: "oom".into(),
                });
                continue;
            }
            let (video, _) = crate::video::gen_moving_shapes(res, 2, frames, 7)?;

            // warm + timed gazing runs
            let mut gaze_ms = Vec::with_capacity(runs);
            let mut frame_ms: Vec<f64> = Vec::new();
            let mut last_gaze = None;
            for r in 0..=runs {
                let t0 = Instant::now();
                if streaming && res == side {
                    // feed frame by frame on a single state
                    let mut st = gazer.begin_video(opts.seed);
                    let mut per_frame = Vec::with_capacity(frames.min(gazer.config.max_frames));
                    for t in 0..video.frames().min(gazer.config.max_frames) {
                        let f0 = Instant::now();
                        gazer.begin_frame(&mut st, &video.frame_float::<S>(t))?;
                        let mut taken = 0;
                        while taken < budget {
                            let k = opts.mtp_k.min(budget - taken);
                            let (picks, stopped) = gazer.decode_step_bounded(
                                &mut st,
                                opts.temperature,
                                k,
                                Some(crate::scalar::s(opts.threshold)),
                            )?;
                            taken += picks.len();
                            if stopped {
                                break;
                            }
                        }
                        per_frame.push(f0.elapsed().as_secs_f64() * 1e3);
                    }
                    if r > 0 {
                        frame_ms.extend(per_frame);
                    }
                } else {
                    let gaze = gazer.gaze_tiled(&video, opts)?;
                    last_gaze = Some(gaze);
                }
                if r > 0 {
                    gaze_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                }
            }
            let gazer_median = median(gaze_ms.clone());
            let max_fps = if streaming && !frame_ms.is_empty() {
                1e3 / median(frame_ms)
            } else {
                frames as f64 / (gazer_median / 1e3)
            };
            cells.push(BenchCell {
                component: "gazer".into(),
                fps,
                resolution: res,
                mode: mode.into(),
                median_ms: gazer_median,
                max_fps,
                tokens,
                note: String::new(),
            });

            // reconstruction timing on a matching workload
            if res == side {
                let gaze = match last_gaze {
                    Some(g) => g,
                    None => gazer.gaze_tiled(&video, opts)?,
                };
                let capped = video.frames().min(recon.config.max_frames);
                let sub = VideoTensor::from_bytes(
                    video.id(),
                    capped,
                    res,
                    res,
                    video.fps(),
                    video.data()[..capped * res * res * 3].to_vec(),
                )?;
                let mut sub_gaze = GazeSequence::empty(capped);
                for t in 0..capped {
                    if t < gaze.frames.len() {
                        sub_gaze.frames[t] = gaze.frames[t].clone();
                    }
                }
                let mut rec_ms = Vec::with_capacity(runs);
                for r in 0..=runs {
                    let t0 = Instant::now();
                    recon.reconstruct(&sub, &sub_gaze)?;
                    if r > 0 {
                        rec_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                    }
                }
                let m = median(rec_ms);
                cells.push(BenchCell {
                    component: "recon".into(),
                    fps,
                    resolution: res,
                    mode: mode.into(),
                    median_ms: m,
                    max_fps: capped as f64 / (m / 1e3),
                    tokens,
                    note: String::new(),
                });
            }
        }
    }
    Ok(cells)
}

pub fn bench_csv(cells: &[BenchCell], meta: &BenchMeta) -> String {
    let mut out = format!(
        "# os={} arch={} cpus={}\ncomponent,fps,resolution,mode,median_ms,max_fps,tokens,note\n",
        meta.os, meta.arch, meta.cpus
    );
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.component, c.fps, c.resolution, c.mode, c.median_ms, c.max_fps, c.tokens, c.note
        )
        .unwrap();
    }
    out
}
