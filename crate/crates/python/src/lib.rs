//! Python bindings: the simulator, trainer, tracker and metrics behind a
//! small `pcl_py` module. Boxes cross the boundary as
//! `(left, top, right, bottom)` tuples and track entries as
//! `(frame, track_id, left, top, right, bottom)`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pcl_core::derive_seed;
use pcl_core::eval;
use pcl_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use pcl_core::mot::{frames_to_entries, load_mot, write_mot, TrackEntry};
use pcl_core::pathloss::LossConfig;
use pcl_core::sim;
use pcl_core::track::{track_frames, TrackerConfig};
use pcl_core::train::{extract_clips, train, TrainConfig};
use pcl_core::types::{Box2D, FrameObjects};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type EntryTuple = (usize, i64, f64, f64, f64, f64);

fn entry_to_tuple(e: &TrackEntry) -> EntryTuple {
    (e.frame, e.track_id, e.bbox.left, e.bbox.top, e.bbox.right, e.bbox.bottom)
}

fn tuple_to_entry(t: &EntryTuple) -> PyResult<TrackEntry> {
    Ok(TrackEntry {
        frame: t.0,
        track_id: t.1,
        bbox: Box2D::new(t.2, t.3, t.4, t.5, 1.0).map_err(err)?,
    })
}

/// Synthetic scene generator settings.
#[pyclass(name = "SceneConfig", from_py_object)]
#[derive(Clone)]
pub struct PySceneConfig {
    inner: sim::SceneConfig,
}

#[pymethods]
impl PySceneConfig {
    #[new]
    #[pyo3(signature = (
        num_identities=10, num_frames=200, arena=(800.0, 600.0),
        speed_range=(3.0, 9.0), appearance_dim=16, appearance_noise=0.1,
        box_jitter=1.0, occlusion_rate=1.0, occlusion_length_range=(4, 12),
        occlusion_start_window=(0.05, 0.8), box_size_range=(36.0, 60.0),
        entry_exit=false, appearance_transient_dim=0, transient_scale=0.5,
        transient_rho=0.93, transient_noise=0.02, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_identities: usize,
        num_frames: usize,
        arena: (f64, f64),
        speed_range: (f64, f64),
        appearance_dim: usize,
        appearance_noise: f64,
        box_jitter: f64,
        occlusion_rate: f64,
        occlusion_length_range: (usize, usize),
        occlusion_start_window: (f64, f64),
        box_size_range: (f64, f64),
        entry_exit: bool,
        appearance_transient_dim: usize,
        transient_scale: f64,
        transient_rho: f64,
        transient_noise: f64,
        seed: u64,
    ) -> Self {
        PySceneConfig {
            inner: sim::SceneConfig {
                num_identities,
                num_frames,
                arena,
                speed_range,
                appearance_dim,
                appearance_noise,
                box_jitter,
                occlusion_rate,
                occlusion_length_range,
                occlusion_start_window,
                box_size_range,
                entry_exit,
                appearance_transient_dim,
                transient_scale,
                transient_rho,
                transient_noise,
                seed,
            },
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "SceneConfig(num_identities={}, num_frames={}, seed={})",
            self.inner.num_identities, self.inner.num_frames, self.inner.seed
        )
    }
}

/// A generated scene with ground-truth identities.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: sim::Scene,
}

#[pymethods]
impl PyScene {
    fn num_frames(&self) -> usize {
        self.inner.clip.len()
    }

    fn num_detections(&self) -> usize {
        self.inner.clip.frames.iter().map(|f| f.real_count()).sum()
    }

    /// Ground-truth occlusion intervals as (identity, start_frame, end_frame).
    fn occlusions(&self) -> Vec<(i64, usize, usize)> {
        self.inner
            .gt_occlusions
            .iter()
            .map(|o| (o.identity, o.start, o.end))
            .collect()
    }

    /// Ground-truth track entries.
    fn gt_entries(&self) -> Vec<EntryTuple> {
        self.inner.gt_entries().iter().map(entry_to_tuple).collect()
    }

    fn write_gt(&self, path: PathBuf) -> PyResult<()> {
        write_mot(&self.inner.gt_entries(), &path).map_err(err)
    }

    fn write_detections(&self, path: PathBuf) -> PyResult<()> {
        write_mot(&self.inner.detection_entries(), &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({} frames, {} identities, {} occlusions)",
            self.inner.clip.len(),
            self.inner.config.num_identities,
            self.inner.gt_occlusions.len()
        )
    }
}

/// Training settings (association loss + Adam).
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        learning_rate=1e-4, steps=500, clip_length=48, num_paths=25,
        spatial_s=None, skip_limit=None, mask_gap_limit=4, sigma=0.5,
        min_span=8, two_view=false, hidden_dims=vec![64], embed_dim=32, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        learning_rate: f64,
        steps: usize,
        clip_length: usize,
        num_paths: usize,
        spatial_s: Option<usize>,
        skip_limit: Option<usize>,
        mask_gap_limit: usize,
        sigma: f64,
        min_span: usize,
        two_view: bool,
        hidden_dims: Vec<usize>,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        PyTrainConfig {
            inner: TrainConfig {
                learning_rate,
                steps,
                clip_length,
                loss: LossConfig {
                    num_paths,
                    spatial_s,
                    skip_limit,
                    mask_gap_limit,
                    sigma,
                    min_span,
                    check_identity: false,
                },
                two_view,
                hidden_dims,
                embed_dim,
                seed,
                ..TrainConfig::default()
            },
        }
    }
}

/// Online tracker settings.
#[pyclass(name = "TrackerConfig", from_py_object)]
#[derive(Clone)]
pub struct PyTrackerConfig {
    inner: TrackerConfig,
}

#[pymethods]
impl PyTrackerConfig {
    #[new]
    #[pyo3(signature = (history=4, buffer_frames=30, new_track_threshold=0.3, blend_weight=0.5, greedy=false))]
    fn new(
        history: usize,
        buffer_frames: usize,
        new_track_threshold: f64,
        blend_weight: f64,
        greedy: bool,
    ) -> Self {
        PyTrackerConfig {
            inner: TrackerConfig {
                history,
                buffer_frames,
                new_track_threshold,
                blend_weight,
                greedy,
                ..TrackerConfig::default()
            },
        }
    }
}

/// A trained embedding/matching model.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(appearance_dim={}, embed_dim={})",
            self.inner.appearance_dim,
            self.inner.embed_dim()
        )
    }
}

/// Intersection over union of two (left, top, right, bottom) boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    let ba = Box2D::new(a.0, a.1, a.2, a.3, 1.0).map_err(err)?;
    let bb = Box2D::new(b.0, b.1, b.2, b.3, 1.0).map_err(err)?;
    Ok(pcl_core::iou(&ba, &bb))
}

/// Generates a deterministic synthetic scene.
#[pyfunction]
fn generate_scene(config: PySceneConfig) -> PyResult<PyScene> {
    Ok(PyScene {
        inner: sim::generate_scene(&config.inner).map_err(err)?,
    })
}

/// Lengthens every occlusion shorter than `l_frames` to exactly that length
/// by deleting subsequent detections.
#[pyfunction]
fn extend_occlusions(scene: PyScene, l_frames: usize) -> PyScene {
    PyScene {
        inner: sim::extend_occlusions(&scene.inner, l_frames),
    }
}

/// Trains a matching model on the given scenes; returns the model and the
/// logged loss of the final step.
#[pyfunction]
fn train_on_scenes(scenes: Vec<PyScene>, config: PyTrainConfig) -> PyResult<(PyModel, f64)> {
    if scenes.is_empty() {
        return Err(PyValueError::new_err("need at least one scene"));
    }
    let arena = scenes[0].inner.config.arena;
    let appearance_dim = scenes[0].inner.config.appearance_dim;
    let mut frames: Vec<FrameObjects> = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let offset = i * 1_000_000;
        for f in s.inner.detector_frames() {
            let shifted: Vec<pcl_core::Detection> = f
                .real_detections()
                .iter()
                .map(|d| {
                    pcl_core::Detection::real(
                        f.frame + offset,
                        d.local_index,
                        d.bbox.unwrap(),
                        d.appearance.clone(),
                        None,
                    )
                })
                .collect();
            frames.push(FrameObjects::from_real(f.frame + offset, shifted).expect("valid frame"));
        }
    }
    let clips = extract_clips(&frames, config.inner.clip_length);
    let init = ModelParams::init_appearance_passthrough(
        appearance_dim,
        &config.inner.hidden_dims,
        config.inner.embed_dim,
        arena,
        derive_seed(config.inner.seed, "init"),
        &frames,
    );
    let (params, report) = train(&clips, init, &config.inner, None).map_err(err)?;
    let final_loss = report.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
    Ok((PyModel { inner: params }, final_loss))
}

/// Runs the online tracker over a scene's detector view; returns track
/// entries.
#[pyfunction]
fn track_scene(scene: PyScene, model: PyModel, config: PyTrackerConfig) -> PyResult<Vec<EntryTuple>> {
    let (entries, _) =
        track_frames(&scene.inner.detector_frames(), &model.inner, &config.inner).map_err(err)?;
    Ok(entries.iter().map(entry_to_tuple).collect())
}

/// IDF1 and identity-switch count of predicted entries against the scene's
/// ground truth.
#[pyfunction]
fn evaluate(scene: PyScene, entries: Vec<EntryTuple>) -> PyResult<(f64, usize)> {
    let pred: Vec<TrackEntry> = entries.iter().map(tuple_to_entry).collect::<PyResult<_>>()?;
    Ok(eval::idf1(&scene.inner, &pred))
}

/// Matching-probability accuracy per temporal-distance bucket (percent).
#[pyfunction]
fn match_accuracy(model: PyModel, scene: PyScene) -> PyResult<BTreeMap<String, f64>> {
    eval::match_accuracy_by_distance(&model.inner, &scene.inner).map_err(err)
}

/// Occlusion-extension sweep: [(L, tracker_idf1, iou_baseline_idf1)].
#[pyfunction]
fn occlusion_sweep(
    model: PyModel,
    scene: PyScene,
    l_values: Vec<usize>,
    config: PyTrackerConfig,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let curve =
        eval::occlusion_sweep(&model.inner, &scene.inner, &l_values, &config.inner).map_err(err)?;
    Ok(curve.into_iter().map(|(l, (a, b))| (l, a, b)).collect())
}

/// Loads a MOT text file into (frame, id, left, top, right, bottom) entries.
#[pyfunction]
fn load_mot_entries(path: PathBuf) -> PyResult<Vec<EntryTuple>> {
    let frames = load_mot(&path).map_err(err)?;
    Ok(frames_to_entries(&frames).iter().map(entry_to_tuple).collect())
}

/// Writes (frame, id, left, top, right, bottom) entries as MOT text.
#[pyfunction]
fn write_mot_entries(entries: Vec<EntryTuple>, path: PathBuf) -> PyResult<()> {
    let entries: Vec<TrackEntry> = entries.iter().map(tuple_to_entry).collect::<PyResult<_>>()?;
    write_mot(&entries, &path).map_err(err)
}

#[pymodule]
fn pcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySceneConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrackerConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(extend_occlusions, m)?)?;
    m.add_function(wrap_pyfunction!(train_on_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(track_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(match_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(load_mot_entries, m)?)?;
    m.add_function(wrap_pyfunction!(write_mot_entries, m)?)?;
    Ok(())
}
