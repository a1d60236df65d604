//! Self-supervised grasp datasets.
//!
//! Each scene is photographed, every object is labelled by the grasp oracle,
//! and one graspable object is removed at random; the loop repeats on the
//! thinned scene. Perceived states feed the model, true states are kept for
//! auditing the labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::{GeometryError, OrientedRect};
use crate::perception::{observe_states, ObjectState, PerceptionConfig};
use crate::scene::{
    generate_scene, GripperSpec, Scenario, Scene, SceneError, SceneGenConfig, SceneObject,
};
use crate::util::{config_digest, derive_seed, rng_from, splitmix64};

pub const MAX_GROUP: usize = 5;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ground truth for one object at snapshot time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueObject {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub w: f64,
    pub l: f64,
    pub z: u8,
    pub on: Option<u32>,
}

impl TrueObject {
    pub fn from_scene_object(o: &SceneObject) -> Self {
        Self {
            id: o.id,
            x: o.rect.pose.x,
            y: o.rect.pose.y,
            yaw: o.rect.pose.yaw,
            w: o.rect.extent.width,
            l: o.rect.extent.length,
            z: o.z_layer,
            on: o.supported_by,
        }
    }

    pub fn to_scene_object(&self) -> Result<SceneObject, GeometryError> {
        Ok(SceneObject {
            id: self.id,
            rect: OrientedRect::new(self.x, self.y, self.yaw, self.l, self.w)?,
            z_layer: self.z,
            supported_by: self.on,
            color_tag: 0,
        })
    }
}

/// One data pair: up to five perceived states with oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspSample {
    pub scene_id: u64,
    pub step: u32,
    pub scenario: Scenario,
    pub states: Vec<ObjectState>,
    pub labels: Vec<u8>,
    pub truth: Vec<TrueObject>,
}

impl GraspSample {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub object_count: usize,
    pub scene_count: usize,
    pub scenes_skipped: usize,
    pub seed: u64,
    pub config_digest: String,
    pub split_rule: String,
}

impl DatasetManifest {
    pub fn describe(samples: &[GraspSample], seed: u64, digest: String, skipped: usize) -> Self {
        let mut scenes: Vec<u64> = samples.iter().map(|s| s.scene_id).collect();
        scenes.dedup();
        Self {
            sample_count: samples.len(),
            object_count: samples.iter().map(GraspSample::len).sum(),
            scene_count: scenes.len(),
            scenes_skipped: skipped,
            seed,
            config_digest: digest,
            split_rule: format!(
                "test iff splitmix64(scene_id) / 2^64 >= ratio (default {DEFAULT_TRAIN_RATIO}); \
                 of the rest, validation iff the same test holds for scene_id ^ {VAL_SALT:#x}"
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct GenerationKey<'a> {
    scene: &'a SceneGenConfig,
    perception: &'a PerceptionConfig,
    gripper: &'a GripperSpec,
    n_scenes: usize,
    seed: u64,
}

pub fn scenario_for(scene_index: usize) -> Scenario {
    if scene_index % 2 == 0 {
        Scenario::Crowded
    } else {
        Scenario::Sparse
    }
}

/// Runs the snapshot/label/remove loop on one scene.
pub fn selfsup_episode(
    mut scene: Scene,
    scene_id: u64,
    scenario: Scenario,
    perc: &PerceptionConfig,
    gripper: &GripperSpec,
    seed: u64,
) -> Result<Vec<GraspSample>, DatasetError> {
    let mut rng = rng_from(seed, &[scene_id, 0x4E40]);
    let mut out = Vec::new();
    for step in 0u32.. {
        if scene.is_empty() {
            break;
        }
        let pcfg = perc.with_seed(derive_seed(seed, &[scene_id, step as u64, 0x0B5]));
        let states: Vec<ObjectState> = observe_states(&scene, &pcfg)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let labels = scene
            .objects
            .iter()
            .map(|o| scene.graspable(o.id, gripper).map(u8::from))
            .collect::<Result<Vec<_>, _>>()?;
        let graspable: Vec<u32> = scene
            .objects
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 1)
            .map(|(o, _)| o.id)
            .collect();
        out.push(GraspSample {
            scene_id,
            step,
            scenario,
            states,
            labels,
            truth: scene.objects.iter().map(TrueObject::from_scene_object).collect(),
        });
        if graspable.is_empty() || scene.len() <= 1 {
            break;
        }
        let pick = graspable[rng.random_range(0..graspable.len())];
        scene.attempt_grasp_and_remove(pick, gripper)?;
    }
    Ok(out)
}

/// Generates `n_scenes` scenes (crowded on even indices, sparse on odd) and
/// the samples they yield, in scene order.
pub fn generate_selfsup(
    gen_cfg: &SceneGenConfig,
    perc_cfg: &PerceptionConfig,
    gripper: &GripperSpec,
    n_scenes: usize,
    seed: u64,
) -> Result<(Vec<GraspSample>, DatasetManifest), DatasetError> {
    gen_cfg.validate()?;
    gripper.validate()?;
    perc_cfg.validate().map_err(DatasetError::Invalid)?;
    let per_scene = exec::map_indexed(n_scenes, |i| {
        let scenario = scenario_for(i);
        let cfg = SceneGenConfig {
            scenario,
            seed: derive_seed(seed, &[i as u64, 0x5CE]),
            ..gen_cfg.clone()
        };
        let scene = generate_scene(&cfg)?;
        selfsup_episode(scene, i as u64, scenario, perc_cfg, gripper, seed)
    });
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, r) in per_scene.into_iter().enumerate() {
        match r {
            Ok(s) => samples.extend(s),
            Err(DatasetError::Scene(e)) => {
                log::warn!("scene {i} skipped: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let digest = config_digest(&GenerationKey {
        scene: gen_cfg,
        perception: perc_cfg,
        gripper,
        n_scenes,
        seed,
    });
    let manifest = DatasetManifest::describe(&samples, seed, digest, skipped);
    Ok((samples, manifest))
}

/// Group indices: states sorted by `(x, y)` and chunked by five.
pub fn partition_indices(states: &[ObjectState]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..states.len()).collect();
    idx.sort_by(|&a, &b| {
        states[a]
            .x
            .total_cmp(&states[b].x)
            .then(states[a].y.total_cmp(&states[b].y))
            .then(a.cmp(&b))
    });
    idx.chunks(MAX_GROUP).map(<[usize]>::to_vec).collect()
}

pub fn partition(states: &[ObjectState]) -> Vec<Vec<ObjectState>> {
    partition_indices(states)
        .into_iter()
        .map(|g| g.into_iter().map(|i| states[i]).collect())
        .collect()
}

pub fn is_train_scene(scene_id: u64, ratio: f64) -> bool {
    (splitmix64(scene_id) as f64) / 2f64.powi(64) < ratio
}

/// Scene-level split; every sample of a scene lands on the same side.
pub fn split(samples: &[GraspSample], ratio: f64) -> (Vec<GraspSample>, Vec<GraspSample>) {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1)");
    samples
        .iter()
        .cloned()
        .partition(|s| is_train_scene(s.scene_id, ratio))
}

/// Train, validation and test sets. Test scenes are the ones `split` holds
/// out; validation scenes are carved from the rest with a second hash, so the
/// test set never influences checkpoint selection.
pub fn split_three(samples: &[GraspSample], ratio: f64) -> (Vec<GraspSample>, Vec<GraspSample>, Vec<GraspSample>) {
    let (rest, test) = split(samples, ratio);
    let (train, val) = rest
        .into_iter()
        .partition(|s| is_train_scene(s.scene_id ^ VAL_SALT, ratio));
    (train, val, test)
}

const VAL_SALT: u64 = 0xA5A5_0000_5A5A;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    x: f64,
    y: f64,
    yaw: f64,
    w: f64,
    l: f64,
    conf: f64,
    label: u8,
    #[serde(rename = "true")]
    truth: TrueObject,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    scene_id: u64,
    step: u32,
    scenario: Scenario,
    objects: Vec<ObjectRecord>,
}

impl From<&GraspSample> for SampleRecord {
    fn from(s: &GraspSample) -> Self {
        Self {
            scene_id: s.scene_id,
            step: s.step,
            scenario: s.scenario,
            objects: s
                .states
                .iter()
                .zip(&s.labels)
                .zip(&s.truth)
                .map(|((st, &label), t)| ObjectRecord {
                    x: st.x,
                    y: st.y,
                    yaw: st.yaw,
                    w: st.width,
                    l: st.length,
                    conf: st.confidence,
                    label,
                    truth: *t,
                })
                .collect(),
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> Result<GraspSample, String> {
        if self.objects.is_empty() || self.objects.len() > MAX_GROUP {
            return Err(format!("sample has {} objects", self.objects.len()));
        }
        if let Some(o) = self.objects.iter().find(|o| o.label > 1) {
            return Err(format!("label {} is not binary", o.label));
        }
        Ok(GraspSample {
            scene_id: self.scene_id,
            step: self.step,
            scenario: self.scenario,
            states: self
                .objects
                .iter()
                .map(|o| ObjectState {
                    x: o.x,
                    y: o.y,
                    yaw: o.yaw,
                    width: o.w,
                    length: o.l,
                    confidence: o.conf,
                })
                .collect(),
            labels: self.objects.iter().map(|o| o.label).collect(),
            truth: self.objects.iter().map(|o| o.truth).collect(),
        })
    }
}

pub fn to_jsonl_line(sample: &GraspSample) -> String {
    serde_json::to_string(&SampleRecord::from(sample)).expect("records serialize")
}

pub fn save_jsonl(path: &Path, samples: &[GraspSample]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for s in samples {
        writeln!(w, "{}", to_jsonl_line(s)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Blank lines are skipped; anything else must parse.
pub fn load_jsonl(path: &Path) -> Result<Vec<GraspSample>, DatasetError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec.into_sample().map_err(|message| DatasetError::Malformed {
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn manifest_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("manifest.json")
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<(), DatasetError> {
    let json = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Rebuilds the labelled scene from stored ground truth and re-runs the oracle.
pub fn audit_labels(sample: &GraspSample, gripper: &GripperSpec) -> Result<bool, DatasetError> {
    let mut scene = Scene::empty(Default::default(), 0);
    scene.objects = sample
        .truth
        .iter()
        .map(TrueObject::to_scene_object)
        .collect::<Result<_, _>>()?;
    for (o, &label) in scene.objects.iter().zip(&sample.labels) {
        if u8::from(scene.graspable(o.id, gripper)?) != label {
            return Ok(false);
        }
    }
    Ok(true)
}
