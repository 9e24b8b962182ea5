//! Optimization loop: clip sampling, Adam updates, ablation switches and
//! the optional two-view consistency term.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::derive_seed;
use crate::model::{
    backward, embed_frame_tape, insert_params, match_matrix_tape, save_checkpoint, Gradients,
    ModelError, ModelParams,
};
use crate::pathloss::{total_loss, LossConfig};
use crate::tape::{Mat, Tape};
use crate::types::{Box2D, Clip, Detection, FrameObjects};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no trainable clips: every clip is shorter than 2 frames")]
    NoClips,
    #[error("non-finite loss at step {step}; last good checkpoint retained{}", checkpoint.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("degenerate masked rows exceeded 5% at step {step} ({degenerate}/{total}); spatial mask size is likely misconfigured")]
    DegenerateMasks {
        step: usize,
        degenerate: usize,
        total: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Training clip length T.
    pub clip_length: usize,
    pub loss: LossConfig,
    pub two_view: bool,
    /// Std-dev of the appearance jitter used to build augmented views.
    pub aug_appearance_noise: f64,
    /// Std-dev of the box translation used to build augmented views, pixels.
    pub aug_box_shift: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Save an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            steps: 500,
            clip_length: 48,
            loss: LossConfig::default(),
            two_view: false,
            aug_appearance_noise: 0.1,
            aug_box_shift: 2.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden_dims: vec![64],
            embed_dim: 32,
            checkpoint_interval: 0,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    pub clip_id: usize,
    pub l_pc: Option<f64>,
    pub l_om: f64,
    pub l_bc: f64,
    pub l_tv: Option<f64>,
    pub total: f64,
    pub num_queries: usize,
    pub degenerate_rows: usize,
    pub mean_path_len: f64,
    pub mean_skip_len: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub wall_time_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainReport {
    /// Deterministic CSV (no timing) so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,clip_id,l_pc,l_om,l_bc,l_tv,total,num_queries,degenerate_rows,mean_path_len,mean_skip_len\n",
        );
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.step,
                s.clip_id,
                s.l_pc.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format_args!("{:.6}", s.l_om),
                format_args!("{:.6}", s.l_bc),
                s.l_tv.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format_args!("{:.6}", s.total),
                s.num_queries,
                s.degenerate_rows,
                format_args!("{:.3}", s.mean_path_len),
                format_args!("{:.3}", s.mean_skip_len),
            ));
        }
        out
    }
}

/// Splits frames into maximal contiguous runs, then windows each run into
/// clips of length `t` with stride `t/2`; shorter runs become one clip.
pub fn extract_clips(frames: &[FrameObjects], t: usize) -> Vec<Clip> {
    let t = t.max(2);
    let mut clips = Vec::new();
    let flush = |lo: usize, hi: usize, clips: &mut Vec<Clip>| {
        let run = &frames[lo..hi];
        if run.len() < 2 {
            return;
        }
        if run.len() <= t {
            clips.push(Clip::new(run.to_vec()).expect("contiguous run"));
            return;
        }
        let stride = (t / 2).max(1);
        let mut starts: Vec<usize> = (0..=(run.len() - t)).step_by(stride).collect();
        if *starts.last().unwrap() != run.len() - t {
            starts.push(run.len() - t);
        }
        for s in starts {
            clips.push(Clip::new(run[s..s + t].to_vec()).expect("contiguous window"));
        }
    };
    let mut run_start = 0usize;
    let mut i = 1usize;
    while i <= frames.len() {
        let broken = i == frames.len() || frames[i].frame != frames[i - 1].frame + 1;
        if broken {
            flush(run_start, i, &mut clips);
            run_start = i;
        }
        i += 1;
    }
    clips
}

struct Adam {
    m: Gradients,
    v: Gradients,
    step: usize,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Adam {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &Gradients, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        fn apply(
            config: &TrainConfig,
            bc1: f64,
            bc2: f64,
            theta: &mut Mat,
            m: &mut Mat,
            v: &mut Mat,
            g: &Mat,
        ) {
            for idx in 0..theta.data.len() {
                let gi = g.data[idx];
                m.data[idx] = config.beta1 * m.data[idx] + (1.0 - config.beta1) * gi;
                v.data[idx] = config.beta2 * v.data[idx] + (1.0 - config.beta2) * gi * gi;
                let m_hat = m.data[idx] / bc1;
                let v_hat = v.data[idx] / bc2;
                theta.data[idx] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        for (li, layer) in params.layers.iter_mut().enumerate() {
            apply(
                config,
                bc1,
                bc2,
                &mut layer.weight,
                &mut self.m.layers[li].0,
                &mut self.v.layers[li].0,
                &grads.layers[li].0,
            );
            apply(
                config,
                bc1,
                bc2,
                &mut layer.bias,
                &mut self.m.layers[li].1,
                &mut self.v.layers[li].1,
                &grads.layers[li].1,
            );
        }
        apply(
            config,
            bc1,
            bc2,
            &mut params.null_embedding,
            &mut self.m.null_embedding,
            &mut self.v.null_embedding,
            &grads.null_embedding,
        );
        // keep the null embedding inside the same box the tanh gives real
        // embeddings; otherwise its norm is unbounded and, receiving the
        // pooled sharpening gradient of every query, it outgrows all real
        // logits and the model degenerates to matching everything to null
        params
            .null_embedding
            .data
            .iter_mut()
            .for_each(|x| *x = x.clamp(-1.0, 1.0));
    }
}

fn gauss(rng: &mut ChaCha12Rng, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).unwrap().sample(rng)
    } else {
        0.0
    }
}

fn jitter_clip(clip: &Clip, app_noise: f64, box_shift: f64, rng: &mut ChaCha12Rng) -> Clip {
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let real: Vec<Detection> = f
                .real_detections()
                .iter()
                .map(|d| {
                    let b = d.bbox.unwrap();
                    let dx = gauss(rng, box_shift);
                    let dy = gauss(rng, box_shift);
                    let bbox =
                        Box2D::new(b.left + dx, b.top + dy, b.right + dx, b.bottom + dy, b.confidence)
                            .expect("translation keeps the box valid");
                    let appearance = d
                        .appearance
                        .as_ref()
                        .map(|a| a.iter().map(|&x| x + gauss(rng, app_noise)).collect());
                    Detection::real(d.frame, d.local_index, bbox, appearance, None)
                })
                .collect();
            FrameObjects::from_real(f.frame, real).expect("valid frame")
        })
        .collect();
    Clip::new(frames).expect("same frame indices")
}

/// Two-view consistency: jitters the clip twice (appearance noise plus box
/// translation), then measures the mean squared difference between the two
/// views' real-to-real matching probabilities over all ordered frame pairs.
pub fn two_view_loss(
    clip: &Clip,
    params: &ModelParams,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, Tape, crate::model::ParamNodes, crate::tape::NodeId), ModelError> {
    let view_a = jitter_clip(clip, config.aug_appearance_noise, config.aug_box_shift, rng);
    let view_b = jitter_clip(clip, config.aug_appearance_noise, config.aug_box_shift, rng);
    let t = clip.len();

    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, params);
    let mut ha = Vec::with_capacity(t);
    let mut hb = Vec::with_capacity(t);
    for f in &view_a.frames {
        ha.push(embed_frame_tape(&mut tape, &nodes, params, f)?);
    }
    for f in &view_b.frames {
        hb.push(embed_frame_tape(&mut tape, &nodes, params, f)?);
    }

    let mut terms = Vec::new();
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            let n_src_real = clip.frames[i].real_count();
            let n_dst_real = clip.frames[j].real_count();
            if n_src_real == 0 || n_dst_real == 0 {
                continue;
            }
            let pa = match_matrix_tape(&mut tape, ha[i], ha[j]);
            let pb = match_matrix_tape(&mut tape, hb[i], hb[j]);
            let block_a = tape.narrow(pa, 0, n_src_real, 0, n_dst_real);
            let block_b = tape.narrow(pb, 0, n_src_real, 0, n_dst_real);
            let diff = tape.sub(block_a, block_b);
            let sq = tape.square(diff);
            let sum = tape.sum_all(sq);
            let term = tape.scale(sum, 1.0 / (n_src_real * n_dst_real) as f64);
            terms.push(term);
        }
    }
    let loss = if terms.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.mean_of(&terms)
    };
    let value = tape.scalar_value(loss);
    Ok((value, tape, nodes, loss))
}

/// Runs the Adam loop on the given clips. Deterministic in the config seed;
/// aborts on non-finite losses keeping the last good checkpoint.
pub fn train(
    clips: &[Clip],
    mut params: ModelParams,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainReport), TrainError> {
    let clips: Vec<&Clip> = clips.iter().filter(|c| c.len() >= 2).collect();
    if clips.is_empty() {
        return Err(TrainError::NoClips);
    }
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "train"));
    // separate stream so the two_view switch never shifts clip or path draws
    let mut aug_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "two_view"));
    let mut adam = Adam::new(&params);
    let mut steps = Vec::with_capacity(config.steps);
    let checkpoint_path = out_dir.map(|d| d.join("checkpoint.txt"));
    let mut last_good = params.clone();

    for step in 0..config.steps {
        let clip_id = rng.random_range(0..clips.len());
        let clip = clips[clip_id];

        let abort_nonfinite = |last_good: &ModelParams| -> TrainError {
            if let Some(p) = &checkpoint_path {
                let _ = save_checkpoint(last_good, p);
            }
            TrainError::NonFinite {
                step,
                checkpoint: checkpoint_path.clone(),
            }
        };

        let clip_loss = match total_loss(clip, &params, &config.loss, &mut rng) {
            Ok(l) => l,
            Err(ModelError::Numeric(_)) => return Err(abort_nonfinite(&last_good)),
            Err(e) => return Err(e.into()),
        };
        if clip_loss.stats.normalized_rows > 0
            && clip_loss.stats.degenerate_rows * 20 > clip_loss.stats.normalized_rows
        {
            return Err(TrainError::DegenerateMasks {
                step,
                degenerate: clip_loss.stats.degenerate_rows,
                total: clip_loss.stats.normalized_rows,
            });
        }

        let mut grads =
            match backward(&params, &clip_loss.tape, &clip_loss.params_nodes, clip_loss.loss) {
                Ok(g) => g,
                Err(ModelError::Numeric(_)) => return Err(abort_nonfinite(&last_good)),
                Err(e) => return Err(e.into()),
            };

        let mut total = clip_loss.stats.total;
        let mut l_tv = None;
        if config.two_view {
            let (tv_value, tv_tape, tv_nodes, tv_loss) =
                match two_view_loss(clip, &params, config, &mut aug_rng) {
                    Ok(v) => v,
                    Err(ModelError::Numeric(_)) => return Err(abort_nonfinite(&last_good)),
                    Err(e) => return Err(e.into()),
                };
            let tv_grads = match backward(&params, &tv_tape, &tv_nodes, tv_loss) {
                Ok(g) => g,
                Err(ModelError::Numeric(_)) => return Err(abort_nonfinite(&last_good)),
                Err(e) => return Err(e.into()),
            };
            grads.add_assign(&tv_grads);
            total += tv_value;
            l_tv = Some(tv_value);
        }

        if !total.is_finite() {
            return Err(abort_nonfinite(&last_good));
        }

        last_good = params.clone();
        adam.update(&mut params, &grads, config);

        steps.push(StepStats {
            step,
            clip_id,
            l_pc: clip_loss.stats.l_pc,
            l_om: clip_loss.stats.l_om,
            l_bc: clip_loss.stats.l_bc,
            l_tv,
            total,
            num_queries: clip_loss.stats.num_queries,
            degenerate_rows: clip_loss.stats.degenerate_rows,
            mean_path_len: clip_loss.stats.mean_path_len,
            mean_skip_len: clip_loss.stats.mean_skip_len,
        });

        if config.checkpoint_interval > 0 && (step + 1) % config.checkpoint_interval == 0 {
            if let Some(p) = &checkpoint_path {
                save_checkpoint(&params, p)?;
            }
        }
    }

    if let Some(p) = &checkpoint_path {
        save_checkpoint(&params, p)?;
    }
    Ok((
        params,
        TrainReport {
            steps,
            wall_time_secs: started.elapsed().as_secs_f64(),
            checkpoint_path,
        },
    ))
}
