//! Flat key = value experiment configuration: file values first, command
//! line flags override. Keys map one-to-one onto `--key value` flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::pathloss::LossConfig;
use crate::sim::SceneConfig;
use crate::track::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`, got {got:?}")]
    Parse {
        path: String,
        line: usize,
        got: String,
    },
    #[error("invalid value for {key}: {value:?} ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Every recognized key, with the subsystem it belongs to.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "common: root seed, split per component"),
    ("num_identities", "sim: identities in the scene"),
    ("num_frames", "sim: scene length in frames"),
    ("arena_width", "sim: arena width, pixels"),
    ("arena_height", "sim: arena height, pixels"),
    ("speed_min", "sim: min speed, pixels/frame"),
    ("speed_max", "sim: max speed, pixels/frame"),
    ("appearance_dim", "sim/model: appearance descriptor length"),
    ("appearance_noise", "sim: appearance noise std-dev"),
    ("box_jitter", "sim: box center jitter std-dev, pixels"),
    ("occlusion_rate", "sim: expected occlusions per identity"),
    ("occlusion_min", "sim: min occlusion length, frames"),
    ("occlusion_max", "sim: max occlusion length, frames"),
    ("occlusion_window_lo", "sim: earliest occlusion start, fraction of span"),
    ("occlusion_window_hi", "sim: latest occlusion start, fraction of span"),
    ("box_size_min", "sim: min box side, pixels"),
    ("box_size_max", "sim: max box side, pixels"),
    ("entry_exit", "sim: identities enter/exit (true/false)"),
    ("appearance_transient_dim", "sim: trailing appearance dims carrying transient cues"),
    ("transient_scale", "sim: stationary std-dev of transient dims"),
    ("transient_rho", "sim: AR(1) coefficient of the transient walk"),
    ("transient_noise", "sim: emission noise on transient dims"),
    ("num_scenes", "train: scenes generated for training"),
    ("learning_rate", "train: Adam learning rate"),
    ("steps", "train: optimization steps"),
    ("clip_length", "train: clip length T"),
    ("num_paths", "loss: max sampled paths per query (G)"),
    ("spatial_s", "loss: spatial mask size (integer or `auto`)"),
    ("skip_limit", "loss: max consecutive skipped frames (integer or `none`)"),
    ("mask_gap_limit", "loss: longest hop gap that still gets a spatial mask"),
    ("sigma", "loss: IoU threshold for query chaining"),
    ("min_span", "loss: min chain span in frames"),
    ("two_view", "train: enable two-view consistency (true/false)"),
    ("aug_appearance_noise", "train: augmentation appearance noise"),
    ("aug_box_shift", "train: augmentation box shift, pixels"),
    ("beta1", "train: Adam beta1"),
    ("beta2", "train: Adam beta2"),
    ("epsilon", "train: Adam epsilon"),
    ("hidden_dims", "model: comma-separated hidden layer sizes"),
    ("embed_dim", "model: embedding dimension D"),
    ("checkpoint_interval", "train: steps between checkpoints (0: final only)"),
    ("history", "tracker: history length M"),
    ("buffer_frames", "tracker: frames an unmatched tracklet survives"),
    ("new_track_threshold", "tracker: min score to accept a match"),
    ("blend_weight", "tracker: appearance weight in the blended score"),
    ("prob_floor", "tracker: probability floor inside the geometric mean"),
    ("greedy", "tracker: greedy matcher instead of exact assignment"),
];

#[derive(Debug, Clone, Default)]
pub struct KeyValueConfig {
    map: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl KeyValueConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: display.clone(),
            source: e,
        })?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    path: display,
                    line: i + 1,
                    got: raw.to_string(),
                });
            };
            map.insert(normalize(key), value.trim().to_string());
        }
        Ok(KeyValueConfig { map })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(normalize(key), value.to_string());
    }

    pub fn validate_keys(&self) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !KNOWN_KEYS.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(
        &self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: raw.clone(),
                expected,
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse(key, default, "a real number")
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse(key, default, "a non-negative integer")
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse(key, default, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: other.to_string(),
                expected: "true or false",
            }),
        }
    }

    /// Integer or one of `none` / `auto` / `unlimited` for `None`.
    pub fn get_opt_usize(&self, key: &str, default: Option<usize>) -> Result<Option<usize>, ConfigError> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("none") | Some("auto") | Some("unlimited") => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: raw.to_string(),
                expected: "an integer, `none` or `auto`",
            }),
        }
    }

    pub fn scene_config(&self) -> Result<SceneConfig, ConfigError> {
        let d = SceneConfig::default();
        Ok(SceneConfig {
            num_identities: self.get_usize("num_identities", d.num_identities)?,
            num_frames: self.get_usize("num_frames", d.num_frames)?,
            arena: (
                self.get_f64("arena_width", d.arena.0)?,
                self.get_f64("arena_height", d.arena.1)?,
            ),
            speed_range: (
                self.get_f64("speed_min", d.speed_range.0)?,
                self.get_f64("speed_max", d.speed_range.1)?,
            ),
            appearance_dim: self.get_usize("appearance_dim", d.appearance_dim)?,
            appearance_noise: self.get_f64("appearance_noise", d.appearance_noise)?,
            box_jitter: self.get_f64("box_jitter", d.box_jitter)?,
            occlusion_rate: self.get_f64("occlusion_rate", d.occlusion_rate)?,
            occlusion_length_range: (
                self.get_usize("occlusion_min", d.occlusion_length_range.0)?,
                self.get_usize("occlusion_max", d.occlusion_length_range.1)?,
            ),
            occlusion_start_window: (
                self.get_f64("occlusion_window_lo", d.occlusion_start_window.0)?,
                self.get_f64("occlusion_window_hi", d.occlusion_start_window.1)?,
            ),
            box_size_range: (
                self.get_f64("box_size_min", d.box_size_range.0)?,
                self.get_f64("box_size_max", d.box_size_range.1)?,
            ),
            entry_exit: self.get_bool("entry_exit", d.entry_exit)?,
            appearance_transient_dim: self
                .get_usize("appearance_transient_dim", d.appearance_transient_dim)?,
            transient_scale: self.get_f64("transient_scale", d.transient_scale)?,
            transient_rho: self.get_f64("transient_rho", d.transient_rho)?,
            transient_noise: self.get_f64("transient_noise", d.transient_noise)?,
            seed: self.get_u64("seed", d.seed)?,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig, ConfigError> {
        let d = LossConfig::default();
        Ok(LossConfig {
            num_paths: self.get_usize("num_paths", d.num_paths)?,
            spatial_s: self.get_opt_usize("spatial_s", d.spatial_s)?,
            skip_limit: self.get_opt_usize("skip_limit", d.skip_limit)?,
            mask_gap_limit: self.get_usize("mask_gap_limit", d.mask_gap_limit)?,
            sigma: self.get_f64("sigma", d.sigma)?,
            min_span: self.get_usize("min_span", d.min_span)?,
            check_identity: false,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::default();
        let hidden_dims = match self.map.get("hidden_dims") {
            None => d.hidden_dims.clone(),
            Some(raw) => raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: "hidden_dims".into(),
                        value: raw.clone(),
                        expected: "comma-separated integers",
                    })
                })
                .collect::<Result<Vec<usize>, _>>()?,
        };
        Ok(TrainConfig {
            learning_rate: self.get_f64("learning_rate", d.learning_rate)?,
            steps: self.get_usize("steps", d.steps)?,
            clip_length: self.get_usize("clip_length", d.clip_length)?,
            loss: self.loss_config()?,
            two_view: self.get_bool("two_view", d.two_view)?,
            aug_appearance_noise: self.get_f64("aug_appearance_noise", d.aug_appearance_noise)?,
            aug_box_shift: self.get_f64("aug_box_shift", d.aug_box_shift)?,
            seed: self.get_u64("seed", d.seed)?,
            beta1: self.get_f64("beta1", d.beta1)?,
            beta2: self.get_f64("beta2", d.beta2)?,
            epsilon: self.get_f64("epsilon", d.epsilon)?,
            hidden_dims,
            embed_dim: self.get_usize("embed_dim", d.embed_dim)?,
            checkpoint_interval: self.get_usize("checkpoint_interval", d.checkpoint_interval)?,
        })
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig, ConfigError> {
        let d = TrackerConfig::default();
        Ok(TrackerConfig {
            history: self.get_usize("history", d.history)?,
            buffer_frames: self.get_usize("buffer_frames", d.buffer_frames)?,
            new_track_threshold: self.get_f64("new_track_threshold", d.new_track_threshold)?,
            blend_weight: self.get_f64("blend_weight", d.blend_weight)?,
            prob_floor: self.get_f64("prob_floor", d.prob_floor)?,
            greedy: self.get_bool("greedy", d.greedy)?,
        })
    }

    /// Canonical `key = value` text of the resolved map (reproducibility echo).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pcl_config_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn parses_file_with_comments() {
        let p = write_tmp(
            "a.cfg",
            "# comment\nnum_identities = 7\nlearning_rate = 0.001 # inline\n\nskip_limit = none\n",
        );
        let kv = KeyValueConfig::from_file(&p).unwrap();
        assert_eq!(kv.scene_config().unwrap().num_identities, 7);
        assert_eq!(kv.train_config().unwrap().learning_rate, 0.001);
        assert_eq!(kv.loss_config().unwrap().skip_limit, None);
    }

    #[test]
    fn flags_override_file() {
        let p = write_tmp("b.cfg", "steps = 100\n");
        let mut kv = KeyValueConfig::from_file(&p).unwrap();
        kv.set("steps", "5");
        assert_eq!(kv.train_config().unwrap().steps, 5);
    }

    #[test]
    fn rejects_malformed_line() {
        let p = write_tmp("c.cfg", "numidentities 7\n");
        assert!(KeyValueConfig::from_file(&p).is_err());
    }

    #[test]
    fn rejects_unknown_key() {
        let mut kv = KeyValueConfig::new();
        kv.set("does_not_exist", "1");
        let err = kv.validate_keys().unwrap_err();
        assert!(err.to_string().contains("does_not_exist"));
    }

    #[test]
    fn rejects_bad_value_naming_key() {
        let mut kv = KeyValueConfig::new();
        kv.set("steps", "many");
        let err = kv.train_config().unwrap_err();
        assert!(err.to_string().contains("steps"));
    }

    #[test]
    fn spatial_s_auto_and_explicit() {
        let mut kv = KeyValueConfig::new();
        kv.set("spatial_s", "auto");
        assert_eq!(kv.loss_config().unwrap().spatial_s, None);
        kv.set("spatial_s", "3");
        assert_eq!(kv.loss_config().unwrap().spatial_s, Some(3));
    }

    #[test]
    fn dashes_normalize_to_underscores() {
        let mut kv = KeyValueConfig::new();
        kv.set("num-identities", "4");
        assert_eq!(kv.scene_config().unwrap().num_identities, 4);
    }
}
