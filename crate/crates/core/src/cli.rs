//! The `pcl` command line: reproducible simulate / train / track / eval
//! runs and the two ablation protocols, all driven by one root seed and a
//! flat key = value config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, KeyValueConfig, KNOWN_KEYS};
use crate::derive_seed;
use crate::eval::{idf1_tracks, match_accuracy_by_distance, occlusion_sweep, EvalReport};
use crate::model::{load_checkpoint, ModelParams};
use crate::mot::{load_mot, write_mot, TrackEntry};
use crate::sim::{generate_scene, Scene, SceneConfig};
use crate::track::{assignment_log_csv, track_frames};
use crate::train::{extract_clips, train, TrainConfig};
use crate::types::FrameObjects;

const USAGE: &str = "usage: pcl <simulate|train|track|eval|ablate> [--key value ...]

subcommands:
  simulate   generate a synthetic scene; writes gt.txt, det.txt, occlusions.csv
  train      train a matching model on generated scenes or a MOT file
  track      run the tracker with a trained checkpoint; writes result.txt
  eval       score a result file against a ground-truth file (IDF1, IDsw)
  ablate     run the skip-limit or occlusion-extension protocol end to end

common flags:
  --config PATH      key = value file; command line flags override it
  --seed N           root seed (splits deterministically per component)
  --out DIR          output directory (created if missing)
  --help             this text, or per-subcommand usage

run `pcl <subcommand> --help` for the flags of one subcommand.";

fn subcommand_usage(cmd: &str) -> String {
    let extra = match cmd {
        "simulate" => "  --out DIR          required: where gt.txt / det.txt / occlusions.csv go\n",
        "train" => {
            "  --out DIR          required: checkpoint.txt and train_report.csv\n  --mot PATH         train on a MOT text file instead of generated scenes\n"
        }
        "track" => {
            "  --checkpoint PATH  required: trained model checkpoint\n  --out DIR          required: result.txt and assignments.csv\n  --mot PATH         track a MOT detection file instead of a generated scene\n"
        }
        "eval" => {
            "  --gt PATH          required: ground-truth MOT file (with identities)\n  --pred PATH        required: predicted MOT file\n  --out DIR          optional: also write eval.csv\n"
        }
        "ablate" => {
            "  --protocol NAME    required: `skip` or `occlusion`\n  --out DIR          required: protocol CSV output\n  --s_values LIST    skip protocol: comma list of skip limits (`none` allowed)\n  --l_values LIST    occlusion protocol: comma list of extension lengths\n  --checkpoint PATH  occlusion protocol: reuse a trained checkpoint\n"
        }
        _ => "",
    };
    let mut keys = String::new();
    for (k, desc) in KNOWN_KEYS {
        keys.push_str(&format!("  --{k:<18} {desc}\n"));
    }
    format!("usage: pcl {cmd} [flags]\n\nflags:\n{extra}\nconfig keys (file or flag):\n{keys}")
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Msg(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) | CliError::Msg(s) => write!(f, "{s}"),
        }
    }
}

macro_rules! from_error {
    ($t:ty) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Msg(e.to_string())
            }
        }
    };
}
from_error!(ConfigError);
from_error!(crate::mot::MotError);
from_error!(crate::sim::SimError);
from_error!(crate::model::ModelError);
from_error!(crate::train::TrainError);
from_error!(crate::track::TrackError);
from_error!(crate::eval::EvalError);

struct Parsed {
    special: BTreeMap<String, String>,
    config: KeyValueConfig,
    help: bool,
}

const SPECIAL_FLAGS: &[&str] = &[
    "config",
    "out",
    "mot",
    "checkpoint",
    "gt",
    "pred",
    "protocol",
    "s_values",
    "l_values",
];

fn parse_flags(args: &[String]) -> Result<Parsed, CliError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut help = false;
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            help = true;
            i += 1;
            continue;
        }
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}")));
        };
        let (key, value) = if let Some((k, v)) = stripped.split_once('=') {
            (k.to_string(), v.to_string())
        } else {
            let Some(value) = args.get(i + 1) else {
                return Err(CliError::Usage(format!("flag --{stripped} needs a value")));
            };
            i += 1;
            (stripped.to_string(), value.clone())
        };
        pairs.push((key.replace('-', "_"), value));
        i += 1;
    }

    let mut special = BTreeMap::new();
    let mut config = KeyValueConfig::new();
    // config file first so later flags win
    for (k, v) in &pairs {
        if k == "config" {
            config = KeyValueConfig::from_file(Path::new(v))?;
        }
    }
    for (k, v) in pairs {
        if k == "config" {
            continue;
        }
        if SPECIAL_FLAGS.contains(&k.as_str()) {
            special.insert(k, v);
        } else {
            config.set(&k, &v);
        }
    }
    config.validate_keys()?;
    Ok(Parsed {
        special,
        config,
        help,
    })
}

fn out_dir(parsed: &Parsed) -> Result<PathBuf, CliError> {
    let dir = parsed
        .special
        .get("out")
        .ok_or_else(|| CliError::Usage("missing required flag --out DIR".into()))?;
    let path = PathBuf::from(dir);
    fs::create_dir_all(&path).map_err(|e| CliError::Msg(format!("cannot create {dir}: {e}")))?;
    Ok(path)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Msg(format!("cannot write {}: {e}", path.display())))
}

fn occlusions_csv(scene: &Scene) -> String {
    let mut out = String::from("identity,start_frame,end_frame\n");
    for o in &scene.gt_occlusions {
        out.push_str(&format!("{},{},{}\n", o.identity, o.start, o.end));
    }
    out
}

fn cmd_simulate(parsed: &Parsed) -> Result<(), CliError> {
    let dir = out_dir(parsed)?;
    let scene_config = parsed.config.scene_config()?;
    let scene = generate_scene(&scene_config)?;
    write_mot(&scene.gt_entries(), &dir.join("gt.txt"))?;
    write_mot(&scene.detection_entries(), &dir.join("det.txt"))?;
    write_file(&dir.join("occlusions.csv"), &occlusions_csv(&scene))?;
    write_file(&dir.join("config.txt"), &parsed.config.to_text())?;
    eprintln!(
        "simulated {} identities over {} frames into {}",
        scene_config.num_identities,
        scene_config.num_frames,
        dir.display()
    );
    Ok(())
}

/// Scenes used for training: `num_scenes` independently seeded draws of the
/// configured scene family.
fn training_scenes(config: &KeyValueConfig) -> Result<Vec<Scene>, CliError> {
    let base = config.scene_config()?;
    let n = config.get_usize("num_scenes", 1)?;
    let root = config.get_u64("seed", 0)?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let scene_config = SceneConfig {
            seed: derive_seed(root, &format!("scene{i}")),
            ..base.clone()
        };
        scenes.push(generate_scene(&scene_config)?);
    }
    Ok(scenes)
}

struct TrainingInputs {
    frames: Vec<FrameObjects>,
    config: TrainConfig,
    arena: (f64, f64),
    appearance_dim: usize,
}

fn training_inputs(parsed: &Parsed) -> Result<TrainingInputs, CliError> {
    let train_config = parsed.config.train_config()?;
    if let Some(mot) = parsed.special.get("mot") {
        if parsed.config.get("appearance_dim").is_some_and(|v| v != "0") {
            return Err(CliError::Msg(
                "appearance_dim must be 0 when training on MOT text (no descriptors in the format)".into(),
            ));
        }
        let frames = load_mot(Path::new(mot))?;
        let arena = (
            parsed.config.get_f64("arena_width", 1920.0)?,
            parsed.config.get_f64("arena_height", 1080.0)?,
        );
        Ok(TrainingInputs {
            frames,
            config: train_config,
            arena,
            appearance_dim: 0,
        })
    } else {
        let scenes = training_scenes(&parsed.config)?;
        let arena = scenes[0].config.arena;
        let appearance_dim = scenes[0].config.appearance_dim;
        let mut frames = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            let mut fs = s.detector_frames();
            // shift frame indices so scenes do not overlap into one run
            let offset = i * 1_000_000;
            for f in fs.iter_mut() {
                let shifted: Vec<crate::types::Detection> = f
                    .real_detections()
                    .iter()
                    .map(|d| {
                        crate::types::Detection::real(
                            f.frame + offset,
                            d.local_index,
                            d.bbox.unwrap(),
                            d.appearance.clone(),
                            None,
                        )
                    })
                    .collect();
                *f = FrameObjects::from_real(f.frame + offset, shifted).expect("valid frame");
            }
            frames.extend(fs);
        }
        Ok(TrainingInputs {
            frames,
            config: train_config,
            arena,
            appearance_dim,
        })
    }
}

fn cmd_train(parsed: &Parsed) -> Result<(), CliError> {
    let dir = out_dir(parsed)?;
    let inputs = training_inputs(parsed)?;
    let clips = extract_clips(&inputs.frames, inputs.config.clip_length);
    let params = ModelParams::init_appearance_passthrough(
        inputs.appearance_dim,
        &inputs.config.hidden_dims,
        inputs.config.embed_dim,
        inputs.arena,
        derive_seed(inputs.config.seed, "init"),
        &inputs.frames,
    );
    let (final_params, report) = train(&clips, params, &inputs.config, Some(&dir))?;
    write_file(&dir.join("train_report.csv"), &report.to_csv())?;
    write_file(&dir.join("config.txt"), &parsed.config.to_text())?;
    let last = report.steps.last();
    eprintln!(
        "trained {} steps in {:.1}s; final loss {}; checkpoint {}",
        report.steps.len(),
        report.wall_time_secs,
        last.map(|s| format!("{:.4}", s.total)).unwrap_or_else(|| "n/a".into()),
        dir.join("checkpoint.txt").display()
    );
    let _ = final_params;
    Ok(())
}

fn tracking_frames(parsed: &Parsed) -> Result<Vec<FrameObjects>, CliError> {
    if let Some(mot) = parsed.special.get("mot") {
        Ok(load_mot(Path::new(mot))?
            .into_iter()
            .map(|f| {
                // drop any identity column so the tracker sees detector output
                let real: Vec<crate::types::Detection> = f
                    .real_detections()
                    .iter()
                    .map(|d| {
                        crate::types::Detection::real(f.frame, d.local_index, d.bbox.unwrap(), None, None)
                    })
                    .collect();
                FrameObjects::from_real(f.frame, real).expect("valid frame")
            })
            .collect())
    } else {
        let scene = generate_scene(&parsed.config.scene_config()?)?;
        Ok(scene.detector_frames())
    }
}

fn cmd_track(parsed: &Parsed) -> Result<(), CliError> {
    let dir = out_dir(parsed)?;
    let ckpt = parsed
        .special
        .get("checkpoint")
        .ok_or_else(|| CliError::Usage("missing required flag --checkpoint PATH".into()))?;
    let params = load_checkpoint(Path::new(ckpt))?;
    let frames = tracking_frames(parsed)?;
    let tracker_config = parsed.config.tracker_config()?;
    let (entries, log) = track_frames(&frames, &params, &tracker_config)?;
    write_mot(&entries, &dir.join("result.txt"))?;
    write_file(&dir.join("assignments.csv"), &assignment_log_csv(&log))?;
    eprintln!(
        "tracked {} frames, {} box assignments, {} result rows -> {}",
        frames.len(),
        log.len(),
        entries.len(),
        dir.join("result.txt").display()
    );
    Ok(())
}

fn cmd_eval(parsed: &Parsed) -> Result<(), CliError> {
    let gt_path = parsed
        .special
        .get("gt")
        .ok_or_else(|| CliError::Usage("missing required flag --gt PATH".into()))?;
    let pred_path = parsed
        .special
        .get("pred")
        .ok_or_else(|| CliError::Usage("missing required flag --pred PATH".into()))?;
    let gt_frames = load_mot(Path::new(gt_path))?;
    let gt = crate::mot::frames_to_entries(&gt_frames);
    if gt.is_empty() {
        return Err(CliError::Msg(format!(
            "{gt_path}: ground truth has no identified entries (id column all -1?)"
        )));
    }
    let pred_frames = load_mot(Path::new(pred_path))?;
    let pred: Vec<TrackEntry> = crate::mot::frames_to_entries(&pred_frames);
    let (idf1, idsw) = idf1_tracks(&gt, &pred);
    let report = EvalReport {
        idf1,
        idsw,
        ..EvalReport::default()
    };
    print!("{report}");
    if parsed.special.contains_key("out") {
        let dir = out_dir(parsed)?;
        write_file(&dir.join("eval.csv"), &report.to_csv())?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Msg(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn cmd_ablate(parsed: &Parsed) -> Result<(), CliError> {
    let dir = out_dir(parsed)?;
    let protocol = parsed
        .special
        .get("protocol")
        .ok_or_else(|| CliError::Usage("missing required flag --protocol skip|occlusion".into()))?;
    let root = parsed.config.get_u64("seed", 0)?;

    let scenes = training_scenes(&parsed.config)?;
    let eval_scene = generate_scene(&SceneConfig {
        seed: derive_seed(root, "eval_scene"),
        ..parsed.config.scene_config()?
    })?;
    let arena = eval_scene.config.arena;
    let appearance_dim = eval_scene.config.appearance_dim;
    let frames: Vec<FrameObjects> = scenes.iter().flat_map(|s| s.detector_frames()).collect();

    let base_train = parsed.config.train_config()?;
    let clips = extract_clips(&frames, base_train.clip_length);
    let init = ModelParams::init_appearance_passthrough(
        appearance_dim,
        &base_train.hidden_dims,
        base_train.embed_dim,
        arena,
        derive_seed(root, "init"),
        &frames,
    );

    match protocol.as_str() {
        "skip" => {
            let raw = parsed
                .special
                .get("s_values")
                .cloned()
                .unwrap_or_else(|| "none,4".to_string());
            let mut csv = String::from("skip_limit,bucket,accuracy\n");
            for tok in raw.split(',').filter(|s| !s.trim().is_empty()) {
                let tok = tok.trim();
                let skip_limit = if tok == "none" {
                    None
                } else {
                    Some(tok.parse::<usize>().map_err(|_| {
                        CliError::Msg(format!("bad s_values entry {tok:?}"))
                    })?)
                };
                let mut config = base_train.clone();
                config.loss.skip_limit = skip_limit;
                eprintln!("ablate skip: training with skip_limit {tok}");
                let (params, _) = train(&clips, init.clone(), &config, None)?;
                let acc = match_accuracy_by_distance(&params, &eval_scene)?;
                for (bucket, v) in acc {
                    csv.push_str(&format!("{tok},{bucket},{v:.3}\n"));
                }
            }
            write_file(&dir.join("ablate_skip.csv"), &csv)?;
            eprintln!("wrote {}", dir.join("ablate_skip.csv").display());
        }
        "occlusion" => {
            let raw = parsed
                .special
                .get("l_values")
                .cloned()
                .unwrap_or_else(|| "0,10,20,30,40,50,60".to_string());
            let l_values: Vec<usize> = parse_list(&raw, "l_values")?;
            let params = match parsed.special.get("checkpoint") {
                Some(p) => load_checkpoint(Path::new(p))?,
                None => {
                    eprintln!("ablate occlusion: training the tracker model");
                    train(&clips, init, &base_train, None)?.0
                }
            };
            let tracker_config = parsed.config.tracker_config()?;
            let curve = occlusion_sweep(&params, &eval_scene, &l_values, &tracker_config)?;
            let mut csv = String::from("variant,L,idf1\n");
            for (l, (ours, _)) in &curve {
                csv.push_str(&format!("tracker,{l},{ours:.6}\n"));
            }
            for (l, (_, baseline)) in &curve {
                csv.push_str(&format!("iou_baseline,{l},{baseline:.6}\n"));
            }
            write_file(&dir.join("ablate_occlusion.csv"), &csv)?;
            eprintln!("wrote {}", dir.join("ablate_occlusion.csv").display());
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown protocol {other:?}: expected `skip` or `occlusion`"
            )));
        }
    }
    write_file(&dir.join("config.txt"), &parsed.config.to_text())?;
    Ok(())
}

/// Entry point: returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some(cmd) = args.first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return 0;
    }
    let rest = &args[1..];
    let parsed = match parse_flags(rest) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if parsed.help {
        println!("{}", subcommand_usage(cmd));
        return 0;
    }
    let result = match cmd.as_str() {
        "simulate" => cmd_simulate(&parsed),
        "train" => cmd_train(&parsed),
        "track" => cmd_track(&parsed),
        "eval" => cmd_eval(&parsed),
        "ablate" => cmd_ablate(&parsed),
        other => {
            eprintln!("error: unknown subcommand {other:?}\n{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Msg(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        run(&owned)
    }

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("pcl_cli_tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["eval", "--help"]), 0);
        assert_eq!(run_args(&["simulate", "--help"]), 0);
    }

    #[test]
    fn unknown_subcommand_and_flags_fail() {
        assert_ne!(run_args(&["frobnicate"]), 0);
        let dir = tmp_dir("badflag");
        assert_ne!(
            run_args(&["simulate", "--out", dir.to_str().unwrap(), "--no_such_key", "1"]),
            0
        );
    }

    #[test]
    fn simulate_is_deterministic() {
        let a = tmp_dir("sim_a");
        let b = tmp_dir("sim_b");
        for dir in [&a, &b] {
            let code = run_args(&[
                "simulate",
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                "7",
                "--num_identities",
                "4",
                "--num_frames",
                "30",
            ]);
            assert_eq!(code, 0);
        }
        for file in ["gt.txt", "det.txt", "occlusions.csv", "config.txt"] {
            let fa = fs::read(a.join(file)).unwrap();
            let fb = fs::read(b.join(file)).unwrap();
            assert_eq!(fa, fb, "{file} differs between identical runs");
        }
    }

    #[test]
    fn eval_missing_file_fails_cleanly() {
        assert_ne!(run_args(&["eval", "--gt", "/no/such/file", "--pred", "/none"]), 0);
    }

    #[test]
    fn simulate_missing_out_is_usage_error() {
        assert_eq!(run_args(&["simulate"]), 2);
    }

    #[test]
    fn config_file_read_and_overridden_by_flags() {
        let dir = tmp_dir("cfgfile");
        let cfg = dir.join("exp.cfg");
        fs::write(&cfg, "num_identities = 3\nnum_frames = 25\nseed = 4\n").unwrap();
        let out = dir.join("out");
        let code = run_args(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--num_frames",
            "30",
        ]);
        assert_eq!(code, 0);
        let echoed = fs::read_to_string(out.join("config.txt")).unwrap();
        assert!(echoed.contains("num_identities = 3"), "{echoed}");
        assert!(echoed.contains("num_frames = 30"), "flag must beat file: {echoed}");
        let gt = fs::read_to_string(out.join("gt.txt")).unwrap();
        let max_frame = gt
            .lines()
            .map(|l| l.split(',').next().unwrap().parse::<usize>().unwrap())
            .max()
            .unwrap();
        assert_eq!(max_frame, 30);
    }

    #[test]
    fn ablate_occlusion_writes_one_row_per_variant_and_l() {
        let dir = tmp_dir("ablate");
        let code = run_args(&[
            "ablate",
            "--protocol",
            "occlusion",
            "--out",
            dir.to_str().unwrap(),
            "--l_values",
            "0,10,20,30,40,50,60",
            "--seed",
            "3",
            "--num_identities",
            "4",
            "--num_frames",
            "60",
            "--appearance_dim",
            "5",
            "--steps",
            "5",
            "--clip_length",
            "12",
            "--min_span",
            "4",
            "--hidden_dims",
            "8",
            "--embed_dim",
            "6",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(dir.join("ablate_occlusion.csv")).unwrap();
        let tracker_rows = csv.lines().filter(|l| l.starts_with("tracker,")).count();
        let baseline_rows = csv.lines().filter(|l| l.starts_with("iou_baseline,")).count();
        assert_eq!(tracker_rows, 7);
        assert_eq!(baseline_rows, 7);
    }

    #[test]
    fn ablate_skip_writes_bucket_rows() {
        let dir = tmp_dir("ablate_skip");
        let code = run_args(&[
            "ablate",
            "--protocol",
            "skip",
            "--out",
            dir.to_str().unwrap(),
            "--s_values",
            "none,2",
            "--seed",
            "3",
            "--num_identities",
            "4",
            "--num_frames",
            "60",
            "--appearance_dim",
            "5",
            "--steps",
            "5",
            "--clip_length",
            "12",
            "--min_span",
            "4",
            "--hidden_dims",
            "8",
            "--embed_dim",
            "6",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(dir.join("ablate_skip.csv")).unwrap();
        assert!(csv.lines().any(|l| l.starts_with("none,")));
        assert!(csv.lines().any(|l| l.starts_with("2,")));
    }
}
