//! Two-stage gazer training: next-token-prediction pre-training on curated
//! sequences (with loss-head supervision), then simplified on-policy
//! group-relative RL with reconstruction reward. Also the loss-threshold
//! calibrator and the finite-difference gradient checks.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::GazeSequence;
use crate::error::{Error, Result};
use crate::gazer::{GazeOptions, GazerConfig, GazerParams, GazerVars};
use crate::nn::{cosine_lr, AdamW};
use crate::recon::{Distance, ReconConfig, ReconModel};
use crate::scalar::{s, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::TensorData;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the loss-prediction l2 term against the NTP cross-entropy.
    pub loss_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 5e-4,
            loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Paper-scale settings (kept available; not the desk default).
    pub fn full_scale() -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            lr: 5e-4,
            loss_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RLConfig {
    pub group_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    /// Threshold for the length-fixing rollout.
    pub rollout_threshold: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub reward_frames: usize,
    pub lr: f64,
    pub loss_weight: f64,
    /// Per-frame budget cap for the length-fixing gaze.
    pub max_ratio: f64,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            group_size: 12,
            gamma: 0.995,
            epochs: 3,
            rollout_threshold: 0.7,
            temp_start: 1.0,
            temp_end: 0.01,
            reward_frames: 2,
            lr: 1e-4,
            loss_weight: 1.0,
            max_ratio: 0.5,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidParam("group size must be >= 2".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParam("gamma must be in (0, 1]".into()));
        }
        if self.temp_end > self.temp_start {
            return Err(Error::InvalidParam(
                "temperature must anneal downward".into(),
            ));
        }
        if self.reward_frames == 0 {
            return Err(Error::InvalidParam("need at least one reward frame".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// NTP pre-training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PretrainMetric {
    pub epoch: usize,
    pub ce: f64,
    pub loss_mse: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    /// Mean main-head cross-entropy of the first batch before any update.
    pub initial_ce: f64,
    pub epochs: Vec<PretrainMetric>,
}

/// One training example: a video paired with its curated gaze (oracle_loss
/// present at every step).
pub struct PretrainExample<'a> {
    pub video: &'a VideoTensor,
    pub gaze: &'a GazeSequence,
}

struct HeadBatch {
    positions: Vec<usize>,
    targets: Vec<usize>,
    loss_targets: Vec<f64>,
    mask: Vec<f64>, // flattened [n, vocab] additive mask
}

/// Collect per-head teacher-forced supervision for one example: head h at
/// the position decoding step k targets step k+h-1 of the same frame, with
/// every index selected before that step masked out.
fn head_batches(
    gaze: &GazeSequence,
    layout: &crate::gazer::SeqLayout,
    vocab: usize,
    mtp: usize,
) -> Result<Vec<HeadBatch>> {
    let mut out: Vec<HeadBatch> = (0..mtp)
        .map(|_| HeadBatch {
            positions: Vec::new(),
            targets: Vec::new(),
            loss_targets: Vec::new(),
            mask: Vec::new(),
        })
        .collect();
    for (t, frame) in gaze.frames.iter().enumerate() {
        for h in 0..mtp {
            for k in 0..frame.len() {
                let j = k + h;
                if j >= frame.len() {
                    break;
                }
                let step = &frame[j];
                let Some(oracle) = step.oracle_loss else {
                    return Err(Error::InvalidParam(format!(
                        "missing oracle loss at frame {t} step {j}"
                    )));
                };
                let batch = &mut out[h];
                batch.positions.push(layout.pred_position(t, k));
                batch.targets.push(step.token.index as usize);
                batch.loss_targets.push(oracle);
                let base = batch.mask.len();
                batch.mask.extend(std::iter::repeat(0.0).take(vocab));
                for prev in &frame[..j] {
                    batch.mask[base + prev.token.index as usize] = -1e30;
                }
            }
        }
    }
    Ok(out)
}

/// Tape pieces of the pretrain objective for one example. Returns
/// (ce_sum over all heads, main-head ce_sum, mse_sum, main_step_count,
/// main-head logits var for metrics).
fn example_losses<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &GazerVars,
    params: &GazerParams<S>,
    video: &VideoTensor,
    gaze: &GazeSequence,
) -> Result<(Var, Var, Var, usize, Option<(Var, Vec<usize>)>)> {
    let tokens = gaze.tokens_per_frame();
    let (hidden, layout) = params.teacher_graph(tape, vars, video, &tokens)?;
    let vocab = params.grid().vocab() as usize;
    let batches = head_batches(gaze, &layout, vocab, params.config.mtp)?;

    let mut ce_terms: Vec<Var> = Vec::new();
    let mut mse_terms: Vec<Var> = Vec::new();
    let mut main_logits = None;
    for (h, b) in batches.iter().enumerate() {
        if b.positions.is_empty() {
            continue;
        }
        let n = b.positions.len();
        let g = tape.gather_rows(hidden, &b.positions);
        let logits = tape.matmul(g, vars.index_w[h]);
        let logits = tape.add_row_broadcast(logits, vars.index_b[h]);
        let mask = TensorData::new(vec![n, vocab], b.mask.iter().map(|&m| s::<S>(m)).collect());
        let logits = tape.add_const(logits, mask);
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_cols(logp, &b.targets);
        let sum = tape.sum_all(picked);
        ce_terms.push(tape.neg(sum));
        if h == 0 {
            main_logits = Some((logits, b.targets.clone()));
        }

        let raw = tape.matmul(g, vars.loss_w[h]);
        let raw = tape.add_row_broadcast(raw, vars.loss_b[h]);
        let pred = tape.softplus(raw);
        let tgt = TensorData::new(
            vec![n, 1],
            b.loss_targets.iter().map(|&l| s::<S>(l)).collect(),
        );
        let diff = tape.add_const(pred, tgt.map(|x| -x));
        let sq = tape.square(diff);
        mse_terms.push(tape.sum_all(sq));
    }
    let ce = sum_scalars(tape, &ce_terms);
    let mse = sum_scalars(tape, &mse_terms);
    Ok((
        ce,
        ce_terms.first().copied().unwrap_or(ce),
        mse,
        batches[0].positions.len(),
        main_logits,
    ))
}

fn sum_scalars<S: Scalar>(tape: &mut Tape<S>, terms: &[Var]) -> Var {
    match terms.len() {
        0 => tape.constant(TensorData::scalar(S::zero())),
        1 => terms[0],
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            acc
        }
    }
}

/// Next-token-prediction pre-training with loss-head supervision.
pub fn pretrain_ntp<S: Scalar>(
    params: &mut GazerParams<S>,
    examples: &[PretrainExample<'_>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no pretraining examples".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let sizes = params.param_sizes();
    let mut opt = AdamW::<S>::new(&sizes);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = PretrainReport {
        initial_ce: f64::NAN,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_ce, mut ep_mse, mut ep_top1, mut ep_steps) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = params.leaf_all(&mut tape, true);
            let mut ce_terms = Vec::new();
            let mut ce_main_terms = Vec::new();
            let mut mse_terms = Vec::new();
            let mut n_steps = 0usize;
            let mut top1_hits = 0usize;
            let mut top1_total = 0usize;
            for &ei in batch {
                let ex = &examples[ei];
                let (ce, ce_main, mse, n, main) =
                    example_losses(&mut tape, &vars, params, ex.video, ex.gaze)?;
                ce_terms.push(ce);
                ce_main_terms.push(ce_main);
                mse_terms.push(mse);
                n_steps += n;
                if let Some((logits, targets)) = main {
                    let lv = tape.value(logits);
                    let vocab = lv.cols();
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &lv.data[r * vocab..(r + 1) * vocab];
                        let mut best = 0;
                        for (i, &x) in row.iter().enumerate() {
                            if x > row[best] {
                                best = i;
                            }
                        }
                        top1_hits += (best == tgt) as usize;
                        top1_total += 1;
                    }
                }
            }
            let ce_sum = sum_scalars(&mut tape, &ce_terms);
            let ce_main_sum = sum_scalars(&mut tape, &ce_main_terms);
            let mse_sum = sum_scalars(&mut tape, &mse_terms);
            let inv = s::<S>(1.0 / n_steps.max(1) as f64);
            let ce_mean = tape.scale(ce_sum, inv);
            let ce_main_mean = tape.scale(ce_main_sum, inv);
            let mse_mean = tape.scale(mse_sum, inv);
            let weighted = tape.scale(mse_mean, s(cfg.loss_weight));
            let loss = tape.add(ce_mean, weighted);

            let ce_val = tape.value(ce_main_mean).item().to_f64();
            let mse_val = tape.value(mse_mean).item().to_f64();
            if step == 0 {
                report.initial_ce = ce_val;
            }
            if !tape.value(loss).item().to_f64().is_finite() {
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
            params.visit_mut(&mut |_, p| {
                opt.update(idx, p, &gvecs[idx], lr);
                idx += 1;
            });
            ep_ce += ce_val * n_steps as f64;
            ep_mse += mse_val * n_steps as f64;
            ep_top1 += top1_hits as f64 / top1_total.max(1) as f64 * n_steps as f64;
            ep_steps += n_steps;
            step += 1;
        }
        report.epochs.push(PretrainMetric {
            epoch,
            ce: ep_ce / ep_steps as f64,
            loss_mse: ep_mse / ep_steps as f64,
            top1: ep_top1 / ep_steps as f64,
        });
    }
    Ok(report)
}

/// Teacher-forced top-1 agreement of the main head against a reference gaze.
pub fn top1_agreement<S: Scalar>(
    params: &GazerParams<S>,
    examples: &[PretrainExample<'_>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let tf = params.forward_teacher_forced(ex.video, ex.gaze)?;
        let flat: Vec<u32> = ex
            .gaze
            .frames
            .iter()
            .flat_map(|f| f.iter().map(|st| st.token.index))
            .collect();
        for (logits, &want) in tf.logits.iter().zip(flat.iter()) {
            let mut best = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            hits += (best as u32 == want) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// GRPO post-training
// ---------------------------------------------------------------------------

/// A group of same-length rollouts of one video.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub video_id: String,
    pub lengths: Vec<usize>,
    pub sequences: Vec<GazeSequence>,
    /// Per sequence, per step (frame-major order): log-probability under the
    /// behavior policy at rollout time.
    pub log_probs: Vec<Vec<f64>>,
    pub temperature: f64,
}

/// Roll out a GRPO group: one threshold-driven gaze at temperature zero
/// fixes the per-frame lengths, then `group_size` sampled rollouts are
/// forced to exactly those lengths.
pub fn rollout_group<S: Scalar>(
    params: &GazerParams<S>,
    video: &VideoTensor,
    cfg: &RLConfig,
    temperature: f64,
    seed: u64,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let fix = params.gaze_video(
        video,
        &GazeOptions {
            threshold: cfg.rollout_threshold,
            max_ratio: cfg.max_ratio,
            mtp_k: 1,
            temperature: 0.0,
            seed,
        },
    )?;
    let lengths = fix.lengths();
    let mut sequences = Vec::with_capacity(cfg.group_size);
    let mut log_probs = Vec::with_capacity(cfg.group_size);
    for g in 0..cfg.group_size {
        let sseq = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(g as u64 + 1);
        let gaze = params.gaze_forced(video, &lengths, temperature, sseq)?;
        let lp = params.sequence_log_probs(video, &gaze, temperature)?;
        sequences.push(gaze);
        log_probs.push(lp);
    }
    Ok(RolloutGroup {
        video_id: video.id().to_string(),
        lengths,
        sequences,
        log_probs,
        temperature,
    })
}

/// Discounted returns G[t][k] (k 0-based): the sum over rewarded frames
/// tau >= t of gamma^(steps between step k of frame t and the end of frame
/// tau) times the negative final loss of frame tau. Frames with no recorded
/// loss are skipped.
pub fn compute_returns(
    frame_losses: &[Option<f64>],
    lengths: &[usize],
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    if frame_losses.len() != lengths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} losses for {} lengths",
            frame_losses.len(),
            lengths.len()
        )));
    }
    let t_len = lengths.len();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = Vec::with_capacity(lengths[t]);
        for k in 0..lengths[t] {
            let mut acc = 0.0;
            let mut gap = lengths[t] - k - 1; // steps left in frame t
            for tau in t..t_len {
                if tau > t {
                    gap += lengths[tau];
                }
                if let Some(l) = frame_losses[tau] {
                    acc += gamma.powi(gap as i32) * (-l);
                }
            }
            row.push(acc);
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GrpoMetrics {
    pub mean_reward: f64,
    pub policy_grad_norm: f64,
    pub max_ratio_dev: f64,
    pub reward_frames: Vec<usize>,
    /// Advantages per sequence, frame, step.
    pub advantages: Vec<Vec<Vec<f64>>>,
}

/// One GRPO update: sample the shared reward frames, score each rollout with
/// the frozen reconstructor, form mean-centered advantages per (frame, step)
/// position, and take one optimizer step on the surrogate plus the last-step
/// loss-head supervision.
#[allow(clippy::too_many_arguments)]
pub fn grpo_update<S: Scalar>(
    params: &mut GazerParams<S>,
    video: &VideoTensor,
    group: &RolloutGroup,
    recon: &ReconModel<S>,
    distance: &Distance<S>,
    cfg: &RLConfig,
    opt: &mut AdamW<S>,
    lr: f64,
    update_seed: u64,
) -> Result<GrpoMetrics> {
    cfg.validate()?;
    // on-policy check: stored behavior log-probs must match the current policy
    let mut max_dev = 0.0f64;
    for (seq, stored) in group.sequences.iter().zip(group.log_probs.iter()) {
        let now = params.sequence_log_probs(video, seq, group.temperature)?;
        for (a, b) in now.iter().zip(stored.iter()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    if max_dev > 1e-5 {
        return Err(Error::Stale { max_delta: max_dev });
    }

    // shared reward-frame subsample
    let mut rng = StdRng::seed_from_u64(update_seed);
    let t_len = video.frames();
    let n_reward = cfg.reward_frames.min(t_len);
    let mut all_frames: Vec<usize> = (0..t_len).collect();
    all_frames.shuffle(&mut rng);
    let mut reward_frames: Vec<usize> = all_frames[..n_reward].to_vec();
    reward_frames.sort_unstable();

    // frozen-reward scoring of each rollout
    let mut per_seq_losses: Vec<Vec<Option<f64>>> = Vec::with_capacity(group.sequences.len());
    for seq in &group.sequences {
        let outs = recon.reconstruct(video, seq)?;
        let mut losses = vec![None; t_len];
        for &t in &reward_frames {
            let orig = video.frame_float::<S>(t);
            losses[t] = Some(distance.frame(&orig, &outs[t])?.to_f64());
        }
        per_seq_losses.push(losses);
    }
    let mean_reward = per_seq_losses
        .iter()
        .map(|ls| {
            ls.iter().flatten().map(|l| -l).sum::<f64>() / reward_frames.len() as f64
        })
        .sum::<f64>()
        / per_seq_losses.len() as f64;

    // returns and mean-centered advantages per (t, k)
    let returns: Vec<Vec<Vec<f64>>> = per_seq_losses
        .iter()
        .map(|ls| compute_returns(ls, &group.lengths, cfg.gamma))
        .collect::<Result<_>>()?;
    let gsize = returns.len();
    let mut advantages = returns.clone();
    for t in 0..group.lengths.len() {
        for k in 0..group.lengths[t] {
            let mean: f64 = returns.iter().map(|r| r[t][k]).sum::<f64>() / gsize as f64;
            for g in 0..gsize {
                advantages[g][t][k] = returns[g][t][k] - mean;
            }
        }
    }

    // surrogate on tape
    let mut tape = Tape::new();
    let vars = params.leaf_all(&mut tape, true);
    let vocab = params.grid().vocab() as usize;
    let mut policy_terms = Vec::new();
    let mut head_terms = Vec::new();
    let mut max_ratio_dev = 0.0f64;
    for (g, seq) in group.sequences.iter().enumerate() {
        let tokens = seq.tokens_per_frame();
        let (hidden, layout) = params.teacher_graph(&mut tape, &vars, video, &tokens)?;

        let mut positions = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        let mut adv_flat = Vec::new();
        let mut detached = Vec::new();
        let mut flat_i = 0usize;
        for (t, frame) in tokens.iter().enumerate() {
            for (k, tok) in frame.iter().enumerate() {
                positions.push(layout.pred_position(t, k));
                targets.push(tok.index as usize);
                let base = mask.len();
                mask.extend(std::iter::repeat(0.0f64).take(vocab));
                for prev in &frame[..k] {
                    mask[base + prev.index as usize] = -1e30;
                }
                adv_flat.push(advantages[g][t][k]);
                detached.push(group.log_probs[g][flat_i]);
                flat_i += 1;
            }
        }
        let n = positions.len();
        let gat = tape.gather_rows(hidden, &positions);
        let logits = tape.matmul(gat, vars.index_w[0]);
        let logits = tape.add_row_broadcast(logits, vars.index_b[0]);
        let mc = TensorData::new(vec![n, vocab], mask.iter().map(|&m| s::<S>(m)).collect());
        let logits = tape.add_const(logits, mc);
        let logits = tape.scale(logits, s::<S>(1.0 / group.temperature));
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_cols(logp, &targets);
        let neg_det = TensorData::new(vec![n], detached.iter().map(|&d| s::<S>(-d)).collect());
        let centered = tape.add_const(picked, neg_det);
        let ratio = tape.exp(centered);
        for &r in &tape.value(ratio).data {
            max_ratio_dev = max_ratio_dev.max((Scalar::to_f64(r) - 1.0).abs());
        }
        let weighted = tape.mul_const(
            ratio,
            TensorData::new(vec![n], adv_flat.iter().map(|&a| s::<S>(a)).collect()),
        );
        let ssum = tape.sum_all(weighted);
        policy_terms.push(tape.neg(ssum));

        // loss-head supervision at the last step of each rewarded frame;
        // the trunk is detached here so calibrating the head on-policy
        // cannot disturb the policy itself
        let mut lh_pos = Vec::new();
        let mut lh_tgt = Vec::new();
        for &t in &reward_frames {
            if group.lengths[t] == 0 {
                continue;
            }
            lh_pos.push(layout.pred_position(t, group.lengths[t] - 1));
            lh_tgt.push(per_seq_losses[g][t].unwrap());
        }
        if !lh_pos.is_empty() {
            let gathered = tape.gather_rows(hidden, &lh_pos);
            let gh = {
                let vals = tape.value(gathered).clone();
                tape.constant(vals)
            };
            let raw = tape.matmul(gh, vars.loss_w[0]);
            let raw = tape.add_row_broadcast(raw, vars.loss_b[0]);
            let pred = tape.softplus(raw);
            let tgt = TensorData::new(
                vec![lh_tgt.len(), 1],
                lh_tgt.iter().map(|&l| s::<S>(-l)).collect(),
            );
            let diff = tape.add_const(pred, tgt);
            let sq = tape.square(diff);
            head_terms.push(tape.sum_all(sq));
        }
    }
    let policy_loss = sum_scalars(&mut tape, &policy_terms);
    let head_loss = sum_scalars(&mut tape, &head_terms);
    let head_weighted = tape.scale(head_loss, s(cfg.loss_weight));
    let total = tape.add(policy_loss, head_weighted);
    if !tape.value(total).item().to_f64().is_finite() {
        return Err(Error::Diverged { step: 0 });
    }

    let sizes = params.param_sizes();
    let ordered = vars.all_vars();
    let pol_grads = tape.backward(policy_loss);
    let policy_grad_norm = ordered
        .iter()
        .zip(sizes.iter())
        .map(|(&v, &n)| {
            pol_grads
                .of_or_zeros(v, n)
                .iter()
                .map(|&g| {
                    let gf = Scalar::to_f64(g);
                    gf * gf
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();

    let grads = tape.backward(total);
    let gvecs: Vec<Vec<S>> = ordered
        .iter()
        .zip(sizes.iter())
        .map(|(&v, &n)| grads.of_or_zeros(v, n))
        .collect();
    opt.begin_step();
    let mut idx = 0usize;
    params.visit_mut(&mut |_, p| {
        opt.update(idx, p, &gvecs[idx], lr);
        idx += 1;
    });

    Ok(GrpoMetrics {
        mean_reward,
        policy_grad_norm,
        max_ratio_dev,
        reward_frames,
        advantages,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RlStepMetric {
    pub step: usize,
    pub temperature: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RlReport {
    pub steps: Vec<RlStepMetric>,
    /// (step, mean fixed-eval reward) sampled periodically.
    pub eval: Vec<(usize, f64)>,
}

/// Linear temperature anneal hitting both endpoints exactly.
pub fn anneal_temperature(cfg: &RLConfig, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.temp_start;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    cfg.temp_start + (cfg.temp_end - cfg.temp_start) * t
}

/// Mean reward (negative final per-frame loss over all frames) of greedy
/// fixed-length gazing on an evaluation set.
pub fn fixed_eval_reward<S: Scalar>(
    params: &GazerParams<S>,
    recon: &ReconModel<S>,
    distance: &Distance<S>,
    videos: &[VideoTensor],
    lengths: &[Vec<usize>],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (video, ls) in videos.iter().zip(lengths.iter()) {
        let gaze = params.gaze_forced(video, ls, 0.0, 0)?;
        let outs = recon.reconstruct(video, &gaze)?;
        for t in 0..video.frames() {
            let orig = video.frame_float::<S>(t);
            acc -= distance.frame(&orig, &outs[t])?.to_f64();
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

/// RL post-training loop: epochs x videos rollout+update steps with a linear
/// temperature anneal, periodic fixed-length greedy evaluation on a held-out
/// batch, and a reward curve entry per update.
pub fn posttrain_rl<S: Scalar>(
    params: &mut GazerParams<S>,
    videos: &[VideoTensor],
    eval_videos: &[VideoTensor],
    cfg: &RLConfig,
    recon: &ReconModel<S>,
    distance: &Distance<S>,
) -> Result<RlReport> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no RL videos".into()));
    }
    let sizes = params.param_sizes();
    let mut opt = AdamW::<S>::new(&sizes);
    let total = cfg.epochs * videos.len();
    let mut report = RlReport {
        steps: Vec::with_capacity(total),
        eval: Vec::new(),
    };

    // fixed evaluation workload: lengths pinned by the initial policy
    let eval_lengths: Vec<Vec<usize>> = eval_videos
        .iter()
        .map(|v| {
            params
                .gaze_video(
                    v,
                    &GazeOptions {
                        threshold: cfg.rollout_threshold,
                        max_ratio: cfg.max_ratio,
                        mtp_k: 1,
                        temperature: 0.0,
                        seed: cfg.seed,
                    },
                )
                .map(|g| g.lengths())
        })
        .collect::<Result<_>>()?;
    let eval_every = (total / 4).max(1);
    if !eval_videos.is_empty() {
        let r = fixed_eval_reward(params, recon, distance, eval_videos, &eval_lengths)?;
        report.eval.push((0, r));
    }

    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        for video in videos {
            let temperature = anneal_temperature(cfg, step, total);
            let seed = cfg
                .seed
                .wrapping_mul(0x2545f4914f6cdd1d)
                .wrapping_add(step as u64);
            let group = rollout_group(params, video, cfg, temperature, seed)?;
            let metrics = grpo_update(
                params,
                video,
                &group,
                recon,
                distance,
                cfg,
                &mut opt,
                cfg.lr,
                seed ^ 0xabcdef,
            )?;
            report.steps.push(RlStepMetric {
                step,
                temperature,
                mean_reward: metrics.mean_reward,
            });
            step += 1;
            if !eval_videos.is_empty() && (step % eval_every == 0 || step == total) {
                let r = fixed_eval_reward(params, recon, distance, eval_videos, &eval_lengths)?;
                report.eval.push((step, r));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Threshold calibration
// ---------------------------------------------------------------------------

/// The loss value at the target quantile of oracle last-step losses over a
/// calibration set; used as the default stopping threshold.
pub fn calibrate_threshold(gazes: &[&GazeSequence], quantile: f64) -> Result<f64> {
    let mut losses: Vec<f64> = Vec::new();
    for g in gazes {
        for frame in &g.frames {
            if let Some(step) = frame.last() {
                if let Some(l) = step.oracle_loss {
                    losses.push(l);
                }
            }
        }
    }
    if losses.is_empty() {
        return Err(Error::EmptyDataset(
            "no oracle losses to calibrate against".into(),
        ));
    }
    losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = quantile.clamp(0.0, 1.0);
    let idx = ((losses.len() - 1) as f64 * q).round() as usize;
    Ok(losses[idx])
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckTarget {
    pub name: String,
    pub samples: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub targets: Vec<GradCheckTarget>,
}

const FD_STEP: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences on
/// `samples` randomly drawn parameters of a model with `sizes`-shaped
/// parameter tensors. `loss_of` must evaluate the same objective on a
/// perturbed clone.
fn fd_target<M: Clone>(
    name: &str,
    model: &M,
    sizes: &[usize],
    analytic: &[Vec<f64>],
    visit_idx: impl Fn(&mut M, usize, usize, f64),
    loss_of: impl Fn(&M) -> f64,
    samples: usize,
    rng: &mut StdRng,
) -> GradCheckTarget {
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for _ in 0..samples {
        let pi = rng.gen_range(0..sizes.len());
        let wi = rng.gen_range(0..sizes[pi]);
        let mut plus = model.clone();
        visit_idx(&mut plus, pi, wi, FD_STEP);
        let mut minus = model.clone();
        visit_idx(&mut minus, pi, wi, -FD_STEP);
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
        let rel = rel_err(analytic[pi][wi], fd);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    GradCheckTarget {
        name: name.into(),
        samples,
        max_rel,
        mean_rel: sum_rel / samples as f64,
    }
}

fn nudge_recon(m: &mut ReconModel<f64>, pi: usize, wi: usize, h: f64) {
    let mut idx = 0;
    m.visit_mut(&mut |_, t| {
        if idx == pi {
            t.data[wi] += h;
        }
        idx += 1;
    });
}

fn nudge_gazer(m: &mut GazerParams<f64>, pi: usize, wi: usize, h: f64) {
    let mut idx = 0;
    m.visit_mut(&mut |_, t| {
        if idx == pi {
            t.data[wi] += h;
        }
        idx += 1;
    });
}

/// Central-difference checks of the three training objectives at tiny
/// configs, in f64, 64 sampled parameters each.
///
/// The reconstructor objective contains |.| and clamp kinks, so its
/// evaluation point is pinned where finite differences are valid: a dark
/// video against near-initialization (mid-gray) outputs keeps every
/// differentiable residual far from zero relative to the step size.
pub fn grad_check(seed: u64) -> Result<GradCheckReport> {
    let samples = 64;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut targets = Vec::new();

    // --- (a) reconstructor training loss -----------------------------------
    {
        let config = ReconConfig {
            scales: vec![8, 16, 32],
            patch: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            max_frames: 2,
            embed_seed: 3,
            weights: Default::default(),
        };
        let mut model = ReconModel::<f64>::init(&config, seed)?;
        model.jitter(seed ^ 1, 0.01);
        let distance = Distance::<f64>::new(&config);
        let grid = config.grid();
        let (bright, _) = crate::video::gen_moving_shapes(32, 1, 2, seed)?;
        let dark: Vec<u8> = bright.data().iter().map(|&b| b / 8).collect();
        let video = VideoTensor::from_bytes("gradcheck", 2, 32, 32, 10.0, dark)?;
        let frames = video.frames_float::<f64>();
        let mut crng = StdRng::seed_from_u64(seed ^ 2);
        let canvases: Vec<crate::codec::Canvas<f64>> = frames
            .iter()
            .map(|f| {
                let n = crng.gen_range(0..=(grid.vocab() as usize / 2));
                let toks = crate::recon::random_tokens(&grid, n, &mut crng);
                let pyr = crate::codec::FramePyramid::build(&grid, f).unwrap();
                crate::codec::assemble_frame(&grid, &pyr, &toks)
            })
            .collect();

        let loss_of = |m: &ReconModel<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = m.leaf_all(&mut tape, false);
            let outs = m.forward_tape(&mut tape, &vars, &canvases).unwrap();
            let mut acc = 0.0;
            for (t, out) in outs.iter().enumerate() {
                let l = distance.frame_tape(&mut tape, &frames[t], *out);
                acc += tape.value(l).item();
            }
            acc / outs.len() as f64
        };

        let mut tape = Tape::new();
        let vars = model.leaf_all(&mut tape, true);
        let outs = model.forward_tape(&mut tape, &vars, &canvases)?;
        let lrows: Vec<Var> = (0..outs.len())
            .map(|t| {
                let l = distance.frame_tape(&mut tape, &frames[t], outs[t]);
                tape.reshape(l, vec![1, 1])
            })
            .collect();
        let cat = tape.concat_rows(&lrows);
        let loss = tape.mean_all(cat);
        let grads = tape.backward(loss);
        let sizes = model.param_sizes();
        let analytic: Vec<Vec<f64>> = vars
            .all_vars()
            .iter()
            .zip(sizes.iter())
            .map(|(&v, &n)| grads.of_or_zeros(v, n))
            .collect();
        targets.push(fd_target(
            "recon_train_loss",
            &model,
            &sizes,
            &analytic,
            nudge_recon,
            loss_of,
            samples,
            &mut rng,
        ));
    }

    // --- shared gazer fixture for (b) and (c) -------------------------------
    let gcfg = GazerConfig {
        scales: vec![16, 32],
        patch: 16,
        embed_patch: 16,
        dim: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        mtp: 2,
        max_frames: 3,
    };
    let mut gazer = GazerParams::<f64>::init(&gcfg, seed)?;
    gazer.jitter(seed ^ 3, 0.02);
    let (video, _) = crate::video::gen_moving_shapes(32, 1, 3, seed ^ 4)?;

    // --- (b) NTP + loss-head objective --------------------------------------
    {
        let grid = gcfg.grid();
        let mut grng = StdRng::seed_from_u64(seed ^ 5);
        let mut gaze = GazeSequence::empty(3);
        for t in 0..3 {
            for tok in crate::recon::random_tokens(&grid, 2, &mut grng) {
                gaze.frames[t].push(crate::codec::GazeStep {
                    token: tok,
                    oracle_loss: Some(grng.gen_range(0.05..0.8)),
                    pred_loss: None,
                });
            }
        }
        let loss_of = |m: &GazerParams<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = m.leaf_all(&mut tape, false);
            let (ce, _, mse, n, _) =
                example_losses(&mut tape, &vars, m, &video, &gaze).unwrap();
            (tape.value(ce).item() + tape.value(mse).item()) / n as f64
        };
        let mut tape = Tape::new();
        let vars = gazer.leaf_all(&mut tape, true);
        let (ce, _, mse, n, _) = example_losses(&mut tape, &vars, &gazer, &video, &gaze)?;
        let tot = tape.add(ce, mse);
        let loss = tape.scale(tot, s::<f64>(1.0 / n as f64));
        let grads = tape.backward(loss);
        let sizes = gazer.param_sizes();
        let analytic: Vec<Vec<f64>> = vars
            .all_vars()
            .iter()
            .zip(sizes.iter())
            .map(|(&v, &sz)| grads.of_or_zeros(v, sz))
            .collect();
        targets.push(fd_target(
            "ntp_loss",
            &gazer,
            &sizes,
            &analytic,
            nudge_gazer,
            loss_of,
            samples,
            &mut rng,
        ));
    }

    // --- (c) GRPO surrogate ---------------------------------------------------
    {
        let temperature = 0.8;
        let lengths = vec![2usize, 2, 1];
        let rollout = gazer.gaze_forced(&video, &lengths, temperature, seed ^ 6)?;
        let detached = gazer.sequence_log_probs(&video, &rollout, temperature)?;
        // synthetic rewards: advantages from returns of made-up frame losses
        let losses = vec![Some(0.5), None, Some(0.2)];
        let returns = compute_returns(&losses, &lengths, 0.995)?;
        let advantages: Vec<f64> = returns.iter().flatten().map(|&g| g + 0.1).collect();
        let lh_targets = vec![(0usize, 0.5f64), (2, 0.2)];

        let tokens = rollout.tokens_per_frame();
        let vocab = gcfg.grid().vocab() as usize;
        let surrogate = |m: &GazerParams<f64>, tape: &mut Tape<f64>, trainable: bool| -> (Var, GazerVars) {
            let vars = m.leaf_all(tape, trainable);
            let (hidden, layout) = m.teacher_graph(tape, &vars, &video, &tokens).unwrap();
            let mut positions = Vec::new();
            let mut tgts = Vec::new();
            let mut mask = Vec::new();
            for (t, frame) in tokens.iter().enumerate() {
                for (k, tok) in frame.iter().enumerate() {
                    positions.push(layout.pred_position(t, k));
                    tgts.push(tok.index as usize);
                    let base = mask.len();
                    mask.extend(std::iter::repeat(0.0f64).take(vocab));
                    for prev in &frame[..k] {
                        mask[base + prev.index as usize] = -1e30;
                    }
                }
            }
            let n = positions.len();
            let gat = tape.gather_rows(hidden, &positions);
            let logits = tape.matmul(gat, vars.index_w[0]);
            let logits = tape.add_row_broadcast(logits, vars.index_b[0]);
            let mc = TensorData::new(vec![n, vocab], mask.clone());
            let logits = tape.add_const(logits, mc);
            let logits = tape.scale(logits, 1.0 / temperature);
            let logp = tape.log_softmax_rows(logits);
            let picked = tape.gather_cols(logp, &tgts);
            let neg_det = TensorData::new(vec![n], detached.iter().map(|&d| -d).collect());
            let centered = tape.add_const(picked, neg_det);
            let ratio = tape.exp(centered);
            let weighted = tape.mul_const(ratio, TensorData::new(vec![n], advantages.clone()));
            let ssum = tape.sum_all(weighted);
            let pol = tape.neg(ssum);

            let lh_pos: Vec<usize> = lh_targets
                .iter()
                .map(|&(t, _)| layout.pred_position(t, lengths[t] - 1))
                .collect();
            let gh = tape.gather_rows(hidden, &lh_pos);
            let raw = tape.matmul(gh, vars.loss_w[0]);
            let raw = tape.add_row_broadcast(raw, vars.loss_b[0]);
            let pred = tape.softplus(raw);
            let tgt = TensorData::new(
                vec![lh_targets.len(), 1],
                lh_targets.iter().map(|&(_, l)| -l).collect(),
            );
            let diff = tape.add_const(pred, tgt);
            let sq = tape.square(diff);
            let mse = tape.sum_all(sq);
            (tape.add(pol, mse), vars)
        };

        let loss_of = |m: &GazerParams<f64>| -> f64 {
            let mut tape = Tape::new();
            let (loss, _) = surrogate(m, &mut tape, false);
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let (loss, vars) = surrogate(&gazer, &mut tape, true);
        let grads = tape.backward(loss);
        let sizes = gazer.param_sizes();
        let analytic: Vec<Vec<f64>> = vars
            .all_vars()
            .iter()
            .zip(sizes.iter())
            .map(|(&v, &sz)| grads.of_or_zeros(v, sz))
            .collect();
        targets.push(fd_target(
            "grpo_surrogate",
            &gazer,
            &sizes,
            &analytic,
            nudge_gazer,
            loss_of,
            samples,
            &mut rng,
        ));
    }

    Ok(GradCheckReport { targets })
}
