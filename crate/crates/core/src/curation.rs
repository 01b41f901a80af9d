//! Ground-truth gazing-sequence generation by greedy search, plus the
//! length sampler that fixes how many patches each frame receives.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::codec::{assemble_frame, save_gaze_jsonl, FramePyramid, GazeSequence, GazeStep};
use crate::error::{Error, Result};
use crate::parallel::run_parallel;
use crate::recon::{Distance, ReconModel};
use crate::scalar::Scalar;
use crate::video::VideoTensor;

/// Per-frame gazing-length sampler: the video's average gazing ratio comes
/// from a truncated exponential on [0.02, 0.2] (rate 20 before truncation),
/// and frame shares from a Dirichlet with a heavier first-frame weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthSampler {
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub rate: f64,
    pub alpha_first: f64,
    pub alpha_rest: f64,
    pub vocab: u32,
    pub frames: usize,
}

impl LengthSampler {
    pub fn new(vocab: u32, frames: usize) -> Self {
        Self {
            ratio_lo: 0.02,
            ratio_hi: 0.2,
            rate: 20.0,
            alpha_first: 10.0,
            alpha_rest: 3.0,
            vocab,
            frames,
        }
    }

    /// Inverse-CDF draw from the exponential truncated to [lo, hi].
    pub fn sample_ratio(&self, rng: &mut StdRng) -> f64 {
        let u: f64 = rng.gen();
        let ea = (-self.rate * self.ratio_lo).exp();
        let eb = (-self.rate * self.ratio_hi).exp();
        -(ea - u * (ea - eb)).ln() / self.rate
    }

    /// Dirichlet frame shares via normalized Gamma draws.
    pub fn sample_shares(&self, rng: &mut StdRng) -> Vec<f64> {
        if self.frames == 1 {
            return vec![1.0];
        }
        let mut draws = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let alpha = if t == 0 {
                self.alpha_first
            } else {
                self.alpha_rest
            };
            let g = Gamma::new(alpha, 1.0).unwrap();
            draws.push(g.sample(rng));
        }
        let sum: f64 = draws.iter().sum();
        draws.iter().map(|d| d / sum).collect()
    }

    /// N^t = round(share_t * r * V * T), first frame floored at one, every
    /// frame capped at the vocabulary size.
    pub fn sample(&self, seed: u64) -> Vec<usize> {
        let mut rng = StdRng::seed_from_u64(seed);
        let r = self.sample_ratio(&mut rng);
        let shares = self.sample_shares(&mut rng);
        let budget = r * self.vocab as f64 * self.frames as f64;
        let mut lengths: Vec<usize> = shares
            .iter()
            .map(|sh| ((sh * budget).round() as usize).min(self.vocab as usize))
            .collect();
        if lengths[0] == 0 {
            lengths[0] = 1;
        }
        lengths
    }
}

/// One curated video: sampled lengths plus the greedily searched sequence
/// with the achieved loss recorded at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationRecord {
    pub video_id: String,
    pub lengths: Vec<usize>,
    pub gaze: GazeSequence,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyOptions {
    /// Evaluate at most this many candidates per step (seeded subsample).
    /// None evaluates the whole remaining vocabulary.
    pub candidate_cap: Option<usize>,
    pub subsample_seed: u64,
}

/// Greedy search: at every step pick the not-yet-selected index of the
/// current frame whose addition minimizes that frame's reconstruction loss
/// under the global prefix; ties break toward the smallest index.
pub fn greedy_gaze<S: Scalar>(
    video: &VideoTensor,
    lengths: &[usize],
    model: &ReconModel<S>,
    distance: &Distance<S>,
    opts: GreedyOptions,
) -> Result<CurationRecord> {
    let grid = model.grid();
    if lengths.len() != video.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for {} frames",
            lengths.len(),
            video.frames()
        )));
    }
    let vocab = grid.vocab() as usize;
    let mut cache = model.new_cache();
    let mut gaze = GazeSequence::empty(video.frames());
    let mut sub_rng = StdRng::seed_from_u64(opts.subsample_seed);

    for t in 0..video.frames() {
        let frame = video.frame_float::<S>(t);
        let pyramid = FramePyramid::build(&grid, &frame)?;
        let n = lengths[t].min(vocab);
        let mut chosen: Vec<bool> = vec![false; vocab];
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n {
            let mut candidates: Vec<u32> = (0..vocab as u32).filter(|&i| !chosen[i as usize]).collect();
            if let Some(cap) = opts.candidate_cap {
                if candidates.len() > cap {
                    // seeded partial shuffle, then restore index order so the
                    // tie-break stays by smallest index
                    for i in 0..cap {
                        let j = sub_rng.gen_range(i..candidates.len());
                        candidates.swap(i, j);
                    }
                    candidates.truncate(cap);
                    candidates.sort_unstable();
                }
            }
            let mut best: Option<(u32, S)> = None;
            for &cand in &candidates {
                let tok = grid.index_to_patch(cand)?;
                let mut toks = picked.clone();
                toks.push(tok);
                let canvas = assemble_frame(&grid, &pyramid, &toks);
                let recon = model.peek_frame(&cache, &canvas, t)?;
                let loss = distance.frame(&frame, &recon)?;
                match best {
                    Some((_, bl)) if loss >= bl => {}
                    _ => best = Some((cand, loss)),
                }
            }
            let (idx, loss) = best.expect("candidate set cannot be empty");
            chosen[idx as usize] = true;
            picked.push(grid.index_to_patch(idx)?);
            gaze.frames[t].push(GazeStep {
                token: grid.index_to_patch(idx)?,
                oracle_loss: Some(loss.to_f64()),
                pred_loss: None,
            });
        }
        let final_canvas = assemble_frame(&grid, &pyramid, &picked);
        model.advance_frame(&mut cache, &final_canvas, t)?;
    }
    Ok(CurationRecord {
        video_id: video.id().to_string(),
        lengths: lengths.to_vec(),
        gaze,
        seed: 0,
    })
}

// ---------------------------------------------------------------------------
// Dataset curation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurationEntry {
    pub video: String,
    pub seed: u64,
    pub lengths: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurationManifest {
    pub entries: Vec<CurationEntry>,
    pub candidate_cap: Option<usize>,
}

/// Stable 64-bit FNV-1a over the video id, so per-video seeds survive
/// re-runs and hashing-implementation changes.
pub fn stable_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Curate gazing sequences for the first `count` videos, one JSONL per
/// video plus an index manifest. Already-written files are kept (files are
/// published atomically, so a present file is a complete file); the run is
/// restartable and byte-deterministic.
pub fn curate_dataset<S: Scalar>(
    videos: &[VideoTensor],
    count: usize,
    model: &ReconModel<S>,
    distance: &Distance<S>,
    base_seed: u64,
    out_dir: &Path,
    opts: GreedyOptions,
    workers: usize,
) -> Result<CurationManifest> {
    if count > videos.len() {
        return Err(Error::InvalidParam(format!(
            "requested {count} videos, only {} available",
            videos.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid = model.grid();

    let jobs: Vec<&VideoTensor> = videos.iter().take(count).collect();
    let results: Vec<Result<CurationEntry>> = run_parallel(workers, jobs, |video| {
        let seed = base_seed.wrapping_add(stable_hash(video.id()));
        let file = format!("{}.jsonl", video.id());
        let path = out_dir.join(&file);
        let sampler = LengthSampler::new(grid.vocab(), video.frames());
        let lengths = sampler.sample(seed);
        if !path.exists() {
            let mut record = greedy_gaze(
                video,
                &lengths,
                model,
                distance,
                GreedyOptions {
                    subsample_seed: seed,
                    ..opts
                },
            )?;
            record.seed = seed;
            let tmp = out_dir.join(format!("{file}.tmp"));
            save_gaze_jsonl(&tmp, video.id(), &record.gaze, &grid)?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(CurationEntry {
            video: video.id().to_string(),
            seed,
            lengths,
            file,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = CurationManifest {
        entries,
        candidate_cap: opts.candidate_cap,
    };
    let mpath = out_dir.join("manifest.json");
    let tmp = out_dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_manifest(out_dir: &Path) -> Result<CurationManifest> {
    let mpath = out_dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))
}
