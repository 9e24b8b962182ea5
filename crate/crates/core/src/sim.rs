//! Deterministic synthetic scene generation.
//!
//! Identities move with piecewise-linear motion (reflecting walls), carry a
//! fixed latent appearance vector emitted with additive noise, and lose their
//! detections during sampled occlusion intervals. Occlusion is purely the
//! detector view: a deleted box, nothing else.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::mot::TrackEntry;
use crate::types::{Box2D, Clip, Detection, FrameObjects};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub num_identities: usize,
    pub num_frames: usize,
    /// Arena (width, height) in pixels.
    pub arena: (f64, f64),
    /// Per-identity speed sampled uniformly from this range, pixels/frame.
    pub speed_range: (f64, f64),
    pub appearance_dim: usize,
    /// Std-dev of per-frame additive noise on emitted appearance vectors.
    pub appearance_noise: f64,
    /// Std-dev of per-frame jitter on emitted box centers, pixels.
    pub box_jitter: f64,
    /// Expected occlusions per identity (Poisson).
    pub occlusion_rate: f64,
    /// Occlusion length sampled uniformly from this inclusive range, frames.
    pub occlusion_length_range: (usize, usize),
    /// Fraction of each identity's visible span in which occlusions may start.
    pub occlusion_start_window: (f64, f64),
    /// Box side length sampled uniformly from this range, pixels.
    pub box_size_range: (f64, f64),
    /// When set, identities enter in the first third and exit in the last
    /// third of the scene instead of being present throughout.
    pub entry_exit: bool,
    /// Number of trailing appearance dimensions that carry a slowly drifting
    /// transient signal instead of the fixed identity latent. Transient
    /// dimensions are strongly discriminative between nearby frames but
    /// decorrelate over long gaps, standing in for pose and lighting cues.
    /// 0 disables the channel.
    pub appearance_transient_dim: usize,
    /// Stationary std-dev per transient dimension.
    pub transient_scale: f64,
    /// AR(1) coefficient of the transient walk; correlation over a gap of
    /// d frames is rho^d.
    pub transient_rho: f64,
    /// Emission noise std-dev on transient dimensions.
    pub transient_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_identities: 10,
            num_frames: 200,
            arena: (800.0, 600.0),
            speed_range: (3.0, 9.0),
            appearance_dim: 16,
            appearance_noise: 0.1,
            box_jitter: 1.0,
            occlusion_rate: 1.0,
            occlusion_length_range: (4, 12),
            occlusion_start_window: (0.05, 0.8),
            box_size_range: (36.0, 60.0),
            entry_exit: false,
            appearance_transient_dim: 0,
            transient_scale: 0.5,
            transient_rho: 0.93,
            transient_noise: 0.02,
            seed: 0,
        }
    }
}

/// Half-open ground-truth occlusion interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occlusion {
    pub identity: i64,
    pub start: usize,
    pub end: usize,
}

impl Occlusion {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub clip: Clip,
    pub gt_occlusions: Vec<Occlusion>,
    pub config: SceneConfig,
}

impl Scene {
    /// Ground-truth records (id column = identity).
    pub fn gt_entries(&self) -> Vec<TrackEntry> {
        crate::mot::frames_to_entries(&self.clip.frames)
    }

    /// Detector-view records (id column = -1).
    pub fn detection_entries(&self) -> Vec<TrackEntry> {
        let mut out = Vec::new();
        for f in &self.clip.frames {
            for d in f.real_detections() {
                out.push(TrackEntry {
                    frame: f.frame,
                    track_id: -1,
                    bbox: d.bbox.unwrap(),
                });
            }
        }
        out
    }

    /// Frames with `gt_identity` stripped, as a tracker would see them.
    pub fn detector_frames(&self) -> Vec<FrameObjects> {
        self.clip
            .frames
            .iter()
            .map(|f| {
                let real: Vec<Detection> = f
                    .real_detections()
                    .iter()
                    .map(|d| {
                        Detection::real(f.frame, d.local_index, d.bbox.unwrap(), d.appearance.clone(), None)
                    })
                    .collect();
                FrameObjects::from_real(f.frame, real).unwrap()
            })
            .collect()
    }
}

struct Identity {
    id: i64,
    half_w: f64,
    half_h: f64,
    latent: Vec<f64>,
    transient: Vec<f64>,
    center: (f64, f64),
    velocity: (f64, f64),
    entry: usize,
    exit: usize,
    occluded: Vec<bool>,
}

fn validate(config: &SceneConfig) -> Result<(), SimError> {
    if config.num_identities < 1 {
        return Err(SimError::Config("num_identities must be >= 1".into()));
    }
    if config.num_frames < 2 {
        return Err(SimError::Config("num_frames must be >= 2".into()));
    }
    if config.speed_range.0 < 0.0 || config.speed_range.0 > config.speed_range.1 {
        return Err(SimError::Config("speed_range must satisfy 0 <= min <= max".into()));
    }
    if config.occlusion_length_range.0 > config.occlusion_length_range.1 {
        return Err(SimError::Config("occlusion_length_range min > max".into()));
    }
    if config.appearance_noise < 0.0 || config.box_jitter < 0.0 {
        return Err(SimError::Config("noise std-devs must be >= 0".into()));
    }
    if config.box_size_range.0 <= 0.0 || config.box_size_range.0 > config.box_size_range.1 {
        return Err(SimError::Config("box_size_range must satisfy 0 < min <= max".into()));
    }
    if config.appearance_transient_dim > config.appearance_dim {
        return Err(SimError::Config(
            "appearance_transient_dim cannot exceed appearance_dim".into(),
        ));
    }
    if config.transient_scale < 0.0 || config.transient_noise < 0.0 {
        return Err(SimError::Config("transient std-devs must be >= 0".into()));
    }
    if !(0.0..=1.0).contains(&config.transient_rho) {
        return Err(SimError::Config("transient_rho must be in [0, 1]".into()));
    }
    let (w, h) = config.arena;
    let max_side = config.box_size_range.1;
    if max_side >= w || max_side >= h {
        return Err(SimError::Config("arena smaller than one box".into()));
    }
    let packing = config.num_identities as f64 * max_side * max_side;
    if packing > 0.5 * w * h {
        return Err(SimError::Config(format!(
            "arena {w}x{h} too small to place {} identities without full overlap",
            config.num_identities
        )));
    }
    Ok(())
}

fn gauss(rng: &mut ChaCha12Rng, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).unwrap().sample(rng)
}

/// Generates a scene. Pure in the config: the same config (including seed)
/// yields a bit-identical scene.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene, SimError> {
    validate(config)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let (arena_w, arena_h) = config.arena;
    let n_frames = config.num_frames;

    let mut identities = Vec::with_capacity(config.num_identities);
    let mut gt_occlusions = Vec::new();
    for idx in 0..config.num_identities {
        let id = idx as i64 + 1;
        let side_w = rng.random_range(config.box_size_range.0..=config.box_size_range.1);
        let side_h = rng.random_range(config.box_size_range.0..=config.box_size_range.1);
        let half_w = side_w / 2.0;
        let half_h = side_h / 2.0;

        let persistent_dim = config.appearance_dim - config.appearance_transient_dim;
        let latent = if persistent_dim > 0 {
            let mut v: Vec<f64> = (0..persistent_dim).map(|_| gauss(&mut rng, 1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        } else {
            Vec::new()
        };
        let transient: Vec<f64> = (0..config.appearance_transient_dim)
            .map(|_| gauss(&mut rng, config.transient_scale))
            .collect();

        let center = (
            rng.random_range(half_w..=(arena_w - half_w)),
            rng.random_range(half_h..=(arena_h - half_h)),
        );
        let speed = rng.random_range(config.speed_range.0..=config.speed_range.1);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let velocity = (speed * angle.cos(), speed * angle.sin());

        let (entry, exit) = if config.entry_exit {
            let entry = rng.random_range(0..=(n_frames / 3));
            let exit = rng.random_range((2 * n_frames / 3)..=n_frames);
            (entry, exit)
        } else {
            (0, n_frames)
        };

        // Occlusions: Poisson count, uniform lengths, non-overlapping starts
        // restricted to the configured window of the visible span.
        let mut occluded = vec![false; n_frames];
        let count = if config.occlusion_rate > 0.0 {
            Poisson::new(config.occlusion_rate)
                .map_err(|e| SimError::Config(format!("bad occlusion_rate: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let span = exit.saturating_sub(entry);
        for _ in 0..count {
            let len = rng.random_range(config.occlusion_length_range.0..=config.occlusion_length_range.1);
            if len == 0 || span <= len + 2 {
                continue;
            }
            let win_lo = entry + (config.occlusion_start_window.0 * span as f64) as usize;
            let win_hi = entry
                + ((config.occlusion_start_window.1 * span as f64) as usize).min(span.saturating_sub(len + 1));
            if win_lo >= win_hi {
                continue;
            }
            let mut placed = false;
            for _ in 0..20 {
                let start = rng.random_range(win_lo..=win_hi);
                let end = start + len;
                // keep one visible frame between occlusions so records stay distinct
                let clash = (start.saturating_sub(1)..(end + 1).min(n_frames)).any(|t| occluded[t]);
                if !clash {
                    occluded[start..end].iter_mut().for_each(|o| *o = true);
                    gt_occlusions.push(Occlusion {
                        identity: id,
                        start: start + 1, // frames are 1-based
                        end: end + 1,
                    });
                    placed = true;
                    break;
                }
            }
            let _ = placed;
        }

        identities.push(Identity {
            id,
            half_w,
            half_h,
            latent,
            transient,
            center,
            velocity,
            entry,
            exit,
            occluded,
        });
    }
    gt_occlusions.sort_by_key(|o| (o.identity, o.start));

    // Walk trajectories and emit detections frame by frame. Latent evolution
    // draws happen for every identity at every frame, visible or not, so the
    // stream of random numbers does not depend on occlusion layout.
    let rho = config.transient_rho;
    let innovation = config.transient_scale * (1.0 - rho * rho).sqrt();
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let mut real = Vec::new();
        for ident in identities.iter_mut() {
            if t > 0 {
                step_identity(ident, arena_w, arena_h);
                for x in ident.transient.iter_mut() {
                    *x = rho * *x + gauss(&mut rng, innovation.max(0.0));
                }
            }
            if t < ident.entry || t >= ident.exit || ident.occluded[t] {
                continue;
            }
            let cx = ident.center.0 + gauss(&mut rng, config.box_jitter);
            let cy = ident.center.1 + gauss(&mut rng, config.box_jitter);
            let cx = cx.clamp(ident.half_w, arena_w - ident.half_w);
            let cy = cy.clamp(ident.half_h, arena_h - ident.half_h);
            let bbox = Box2D::new(
                cx - ident.half_w,
                cy - ident.half_h,
                cx + ident.half_w,
                cy + ident.half_h,
                1.0,
            )
            .expect("simulated box is valid by construction");
            let appearance = if config.appearance_dim > 0 {
                let mut v = Vec::with_capacity(config.appearance_dim);
                for &x in &ident.latent {
                    v.push(x + gauss(&mut rng, config.appearance_noise));
                }
                for &x in &ident.transient {
                    v.push(x + gauss(&mut rng, config.transient_noise));
                }
                Some(v)
            } else {
                Some(Vec::new())
            };
            real.push(Detection::real(t + 1, 0, bbox, appearance, Some(ident.id)));
        }
        frames.push(FrameObjects::from_real(t + 1, real).expect("valid frame"));
    }

    let clip = Clip::new(frames).expect("contiguous frames by construction");
    Ok(Scene {
        clip,
        gt_occlusions,
        config: config.clone(),
    })
}

fn step_identity(ident: &mut Identity, arena_w: f64, arena_h: f64) {
    let (mut x, mut y) = ident.center;
    let (mut vx, mut vy) = ident.velocity;
    x += vx;
    y += vy;
    if x < ident.half_w {
        x = 2.0 * ident.half_w - x;
        vx = -vx;
    } else if x > arena_w - ident.half_w {
        x = 2.0 * (arena_w - ident.half_w) - x;
        vx = -vx;
    }
    if y < ident.half_h {
        y = 2.0 * ident.half_h - y;
        vy = -vy;
    } else if y > arena_h - ident.half_h {
        y = 2.0 * (arena_h - ident.half_h) - y;
        vy = -vy;
    }
    ident.center = (x.clamp(ident.half_w, arena_w - ident.half_w), y.clamp(ident.half_h, arena_h - ident.half_h));
    ident.velocity = (vx, vy);
}

/// Lengthens every ground-truth occlusion shorter than `L` to exactly `L`
/// frames by deleting the identity's detections after the occlusion,
/// clipped at the scene end. Occlusions already at least `L` long are left
/// untouched.
pub fn extend_occlusions(scene: &Scene, l_frames: usize) -> Scene {
    let last = scene.clip.first_frame() + scene.clip.len(); // one past the last frame
    let extended: Vec<Occlusion> = scene
        .gt_occlusions
        .iter()
        .map(|o| {
            if o.len() >= l_frames {
                *o
            } else {
                Occlusion {
                    identity: o.identity,
                    start: o.start,
                    end: (o.start + l_frames).min(last),
                }
            }
        })
        .collect();

    let frames: Vec<FrameObjects> = scene
        .clip
        .frames
        .iter()
        .map(|f| {
            let real: Vec<Detection> = f
                .real_detections()
                .iter()
                .filter(|d| {
                    let id = d.gt_identity.expect("simulated detections carry identity");
                    !extended
                        .iter()
                        .any(|o| o.identity == id && (o.start..o.end).contains(&f.frame))
                })
                .cloned()
                .collect();
            FrameObjects::from_real(f.frame, real).expect("valid frame")
        })
        .collect();

    Scene {
        clip: Clip::new(frames).expect("frame set unchanged"),
        gt_occlusions: extended,
        config: scene.config.clone(),
    }
}
