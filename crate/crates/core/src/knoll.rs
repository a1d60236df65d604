//! Tidy-layout planning.
//!
//! [`reference_layout`] is a deterministic row packer used as supervision. The
//! learned planner is a small encoder/decoder transformer whose decoder emits a
//! 2-D Gaussian mixture over each object's position, one object at a time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MAX_GROUP;
use crate::exec;
use crate::geometry::{clearance, Extent2D, GeometryError, OrientedRect, Pose2D};
use crate::nn::io::{load_weights, save_weights};
use crate::nn::tape::{Tape, Var};
use crate::nn::transformer::{add_linear, DecoderLayer, EncoderLayer};
use crate::nn::{AdamConfig, GmmParams, Grads, NnError, ParamId, ParamStore, TransformerConfig};
use crate::scene::{SceneGenConfig, Workspace};
use crate::util::rng_from;

/// Metres per model unit for positions and sizes.
pub const UNIT: f64 = 0.1;
pub const STD_FLOOR_M: f64 = 1e-3;
pub const DEFAULT_MIN_GAP: f64 = 0.005;
/// Slack for exact-gap layouts that land a rounding error under `min_gap`.
pub const GAP_TOL: f64 = 1e-9;
pub const KNOLL_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum KnollError {
    #[error("layout does not fit: {0}")]
    DoesNotFit(String),
    #[error("between 1 and {MAX_GROUP} objects per plan, got {0}")]
    ObjectCount(usize),
    #[error("training diverged in {phase} epoch {epoch} (loss {loss})")]
    Diverged { phase: &'static str, epoch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("weight file metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSpec {
    pub origin: [f64; 2],
    pub gap_x: f64,
    pub gap_y: f64,
    pub max_row_width: f64,
    /// Gap options for variants; empty means always use `gap_x`/`gap_y`.
    pub gap_choices: Vec<f64>,
    pub workspace: Workspace,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            origin: [0.05, -0.30],
            gap_x: 0.015,
            gap_y: 0.015,
            max_row_width: 0.25,
            gap_choices: vec![0.01, 0.015, 0.02],
            workspace: Workspace::default(),
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<(), KnollError> {
        let gaps_ok = self.gap_x > 0.0 && self.gap_y > 0.0 && self.gap_choices.iter().all(|&g| g > 0.0);
        if !gaps_ok {
            return Err(KnollError::Config("gaps must be positive".into()));
        }
        if !self.workspace.contains(crate::geometry::Vec2::new(self.origin[0], self.origin[1])) {
            return Err(KnollError::Config("layout origin outside the workspace".into()));
        }
        if !(self.max_row_width > 0.0) {
            return Err(KnollError::Config("max_row_width must be positive".into()));
        }
        Ok(())
    }

    /// Smallest gap any variant can use.
    pub fn min_gap(&self) -> f64 {
        if self.gap_choices.is_empty() {
            self.gap_x.min(self.gap_y)
        } else {
            self.gap_choices.iter().cloned().fold(f64::INFINITY, f64::min)
        }
    }
}

/// Order in which objects are laid out and decoded: area descending, ties by index.
pub fn decode_order(extents: &[Extent2D]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..extents.len()).collect();
    idx.sort_by(|&a, &b| extents[b].area().total_cmp(&extents[a].area()).then(a.cmp(&b)));
    idx
}

/// Row packing from the layout origin: length along +x, rows stacked along +y.
/// Returns poses in input order.
pub fn reference_layout(extents: &[Extent2D], spec: &LayoutSpec, variant_seed: u64) -> Result<Vec<Pose2D>, KnollError> {
    spec.validate()?;
    if let Some(e) = extents.iter().find(|e| e.length > spec.max_row_width) {
        return Err(KnollError::DoesNotFit(format!(
            "object length {} exceeds row width {}",
            e.length, spec.max_row_width
        )));
    }
    let mut rng = rng_from(variant_seed, &[0x1A7]);
    let (gap_x, gap_y) = if spec.gap_choices.is_empty() {
        (spec.gap_x, spec.gap_y)
    } else {
        let g = spec.gap_choices[rng.random_range(0..spec.gap_choices.len())];
        (g, g)
    };
    let mut order = decode_order(extents);
    // shuffle runs of equal area
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && extents[order[j]].area() == extents[order[i]].area() {
            j += 1;
        }
        order[i..j].shuffle(&mut rng);
        i = j;
    }

    let mut poses = vec![Pose2D::new(0.0, 0.0, 0.0); extents.len()];
    let (mut cx, mut row_y, mut row_h) = (0.0, 0.0, 0.0f64);
    for &k in &order {
        let e = extents[k];
        if cx > 0.0 && cx + e.length > spec.max_row_width {
            row_y += row_h + gap_y;
            cx = 0.0;
            row_h = 0.0;
        }
        poses[k] = Pose2D::new(
            spec.origin[0] + cx + e.length / 2.0,
            spec.origin[1] + row_y + e.width / 2.0,
            0.0,
        );
        cx += e.length + gap_x;
        row_h = row_h.max(e.width);
    }
    for (p, e) in poses.iter().zip(extents) {
        let r = OrientedRect::new(p.x, p.y, 0.0, e.length, e.width)?;
        if !spec.workspace.contains_rect(&r) {
            return Err(KnollError::DoesNotFit("layout runs outside the workspace".into()));
        }
    }
    Ok(poses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    OutsideWorkspace(usize),
    TooClose { a: usize, b: usize, clearance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

pub fn validate_plan(poses: &[Pose2D], extents: &[Extent2D], min_gap: f64, workspace: &Workspace) -> Result<PlanCheck, KnollError> {
    if poses.len() != extents.len() {
        return Err(KnollError::Config("poses and extents differ in length".into()));
    }
    let rects = poses
        .iter()
        .zip(extents)
        .map(|(p, e)| OrientedRect::new(p.x, p.y, p.yaw, e.length, e.width))
        .collect::<Result<Vec<_>, _>>()?;
    let mut violations = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        if !workspace.contains_rect(r) {
            violations.push(Violation::OutsideWorkspace(i));
        }
    }
    for a in 0..rects.len() {
        for b in a + 1..rects.len() {
            let c = clearance(&rects[a], &rects[b]);
            if c < min_gap - GAP_TOL {
                violations.push(Violation::TooClose { a, b, clearance: c });
            }
        }
    }
    Ok(PlanCheck {
        valid: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnollModelConfig {
    pub transformer: TransformerConfig,
    pub k: usize,
}

impl Default for KnollModelConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnollTrainConfig {
    pub model: KnollModelConfig,
    pub layout: LayoutSpec,
    pub scenes: usize,
    pub pretrain_max_objects: usize,
    pub finetune_max_objects: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    /// Draw a fresh layout variant per scene and epoch; otherwise variant 0 only.
    pub sample_variants: bool,
    pub seed: u64,
}

impl Default for KnollTrainConfig {
    fn default() -> Self {
        Self {
            model: KnollModelConfig::default(),
            layout: LayoutSpec::default(),
            scenes: 2000,
            pretrain_max_objects: 2,
            finetune_max_objects: 5,
            pretrain_epochs: 6,
            finetune_epochs: 20,
            pretrain_lr: 2e-3,
            finetune_lr: 1e-3,
            batch_size: 32,
            sample_variants: true,
            seed: 0,
        }
    }
}

impl KnollTrainConfig {
    pub fn validate(&self) -> Result<(), KnollError> {
        self.model.transformer.validate()?;
        self.layout.validate()?;
        if self.model.k == 0 {
            return Err(KnollError::Config("k must be positive".into()));
        }
        if self.pretrain_max_objects == 0
            || self.pretrain_max_objects > self.finetune_max_objects
            || self.finetune_max_objects > MAX_GROUP
        {
            return Err(KnollError::Config(format!(
                "need 1 <= pretrain_max_objects <= finetune_max_objects <= {MAX_GROUP}"
            )));
        }
        if self.scenes == 0 || self.batch_size == 0 || !(self.pretrain_lr > 0.0) || !(self.finetune_lr > 0.0) {
            return Err(KnollError::Config("scenes, batch_size and learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin(ParamId, ParamId);

#[derive(Debug, Clone)]
pub struct KnollModel {
    pub store: ParamStore,
    pub cfg: KnollModelConfig,
    pub layout: LayoutSpec,
    enc_in: Lin,
    dec_in: Lin,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    enc_norm: (ParamId, ParamId),
    dec_norm: (ParamId, ParamId),
    head: Lin,
}

const ENC_FEATURES: usize = 2;
/// Previous x, previous y, start flag, own length, own width.
const DEC_FEATURES: usize = 5;

/// One supervised example in decode order.
#[derive(Debug, Clone, PartialEq)]
pub struct KnollExample {
    pub dims: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
}

fn to_unit(spec: &LayoutSpec, p: [f64; 2]) -> [f64; 2] {
    [(p[0] - spec.origin[0]) / UNIT, (p[1] - spec.origin[1]) / UNIT]
}

fn from_unit(spec: &LayoutSpec, u: [f64; 2]) -> [f64; 2] {
    [spec.origin[0] + u[0] * UNIT, spec.origin[1] + u[1] * UNIT]
}

impl KnollModel {
    pub fn new(cfg: KnollModelConfig, layout: LayoutSpec, seed: u64) -> Result<Self, KnollError> {
        cfg.transformer.validate()?;
        let t = cfg.transformer;
        let d = t.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = |store: &mut ParamStore, n: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            add_linear(store, n, i, o, rng).map(|(w, b)| Lin(w, b))
        };
        let enc_in = lin(&mut store, "knoll.enc_in", ENC_FEATURES, d, &mut rng)?;
        let dec_in = lin(&mut store, "knoll.dec_in", DEC_FEATURES, d, &mut rng)?;
        let enc_pos = store.add_uniform("knoll.enc_pos", &[MAX_GROUP, d], 0.1, &mut rng)?;
        let dec_pos = store.add_uniform("knoll.dec_pos", &[MAX_GROUP, d], 0.1, &mut rng)?;
        let enc = (0..t.n_enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("knoll.enc{i}"), &t, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let dec = (0..t.n_dec_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("knoll.dec{i}"), &t, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = |store: &mut ParamStore, n: &str| -> Result<(ParamId, ParamId), NnError> {
            Ok((
                store.add(&format!("{n}.gamma"), &[d], vec![1.0; d])?,
                store.add(&format!("{n}.beta"), &[d], vec![0.0; d])?,
            ))
        };
        let enc_norm = norm(&mut store, "knoll.enc_norm")?;
        let dec_norm = norm(&mut store, "knoll.dec_norm")?;
        let head = lin(&mut store, "knoll.head", d, 5 * cfg.k, &mut rng)?;
        Ok(Self {
            store,
            cfg,
            layout,
            enc_in,
            dec_in,
            enc_pos,
            dec_pos,
            enc,
            dec,
            enc_norm,
            dec_norm,
            head,
        })
    }

    fn bind(store: ParamStore, cfg: KnollModelConfig, layout: LayoutSpec) -> Result<Self, KnollError> {
        let t = cfg.transformer;
        let id = |n: &str| store.id(n).ok_or_else(|| NnError::MissingParam(n.to_string()));
        let lin = |n: &str| -> Result<Lin, NnError> { Ok(Lin(id(&format!("{n}.w"))?, id(&format!("{n}.b"))?)) };
        let norm = |n: &str| -> Result<(ParamId, ParamId), NnError> {
            Ok((id(&format!("{n}.gamma"))?, id(&format!("{n}.beta"))?))
        };
        let enc = (0..t.n_enc_layers)
            .map(|i| EncoderLayer::bind(&store, &format!("knoll.enc{i}"), &t))
            .collect::<Result<Vec<_>, _>>()?;
        let dec = (0..t.n_dec_layers)
            .map(|i| DecoderLayer::bind(&store, &format!("knoll.dec{i}"), &t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            enc_in: lin("knoll.enc_in")?,
            dec_in: lin("knoll.dec_in")?,
            enc_pos: id("knoll.enc_pos")?,
            dec_pos: id("knoll.dec_pos")?,
            enc_norm: norm("knoll.enc_norm")?,
            dec_norm: norm("knoll.dec_norm")?,
            head: lin("knoll.head")?,
            enc,
            dec,
            cfg,
            layout,
            store,
        })
    }

    fn std_floor(&self) -> f64 {
        STD_FLOOR_M / UNIT
    }

    /// Raw mixture rows (`T × 5K`). `dims` are in model units; `prev[t]` is the
    /// position (model units) of object `t - 1`, ignored at `t = 0`.
    fn raw_head(&self, tape: &mut Tape, dims: &[[f64; 2]], prev: &[[f64; 2]]) -> Result<Var, KnollError> {
        let t = dims.len();
        if t == 0 || t > MAX_GROUP || prev.len() != t {
            return Err(KnollError::ObjectCount(t));
        }
        let enc_x = tape.input(t, ENC_FEATURES, dims.iter().flatten().copied().collect())?;
        let dec_rows: Vec<f64> = (0..t)
            .flat_map(|i| {
                let (p, flag) = if i == 0 { ([0.0, 0.0], 1.0) } else { (prev[i], 0.0) };
                [p[0], p[1], flag, dims[i][0], dims[i][1]]
            })
            .collect();
        let dec_x = tape.input(t, DEC_FEATURES, dec_rows)?;

        let (w, b) = (tape.param(self.enc_in.0), tape.param(self.enc_in.1));
        let h = tape.linear(enc_x, w, b)?;
        let pos = tape.param(self.enc_pos);
        let pos = tape.slice_rows(pos, 0, t)?;
        let mut m = tape.add(h, pos)?;
        for layer in &self.enc {
            m = layer.forward(tape, m, true)?;
        }
        let (g, b) = (tape.param(self.enc_norm.0), tape.param(self.enc_norm.1));
        let m = tape.layer_norm(m, g, b)?;

        let (w, b) = (tape.param(self.dec_in.0), tape.param(self.dec_in.1));
        let h = tape.linear(dec_x, w, b)?;
        let pos = tape.param(self.dec_pos);
        let pos = tape.slice_rows(pos, 0, t)?;
        let mut x = tape.add(h, pos)?;
        for layer in &self.dec {
            x = layer.forward(tape, x, m)?;
        }
        let (g, b) = (tape.param(self.dec_norm.0), tape.param(self.dec_norm.1));
        let x = tape.layer_norm(x, g, b)?;
        let (w, b) = (tape.param(self.head.0), tape.param(self.head.1));
        Ok(tape.linear(x, w, b)?)
    }

    /// Teacher-forced mean NLL for one example, and its gradient.
    pub fn example_grad_with(&self, store: &ParamStore, ex: &KnollExample) -> Result<(f64, Grads), KnollError> {
        let mut prev = vec![[0.0; 2]; ex.dims.len()];
        for i in 1..prev.len() {
            prev[i] = ex.targets[i - 1];
        }
        let mut tape = Tape::new(store);
        let raw = self.raw_head(&mut tape, &ex.dims, &prev)?;
        let loss = tape.gmm_nll(raw, self.cfg.k, self.std_floor(), &ex.targets, &vec![true; ex.dims.len()])?;
        let mut g = store.new_grads();
        tape.backward(loss, &mut g)?;
        Ok((tape.value(loss)[0], g))
    }

    /// Mixture for the next object given the dims so far and decoded positions.
    fn next_mixture(&self, dims: &[[f64; 2]], placed: &[[f64; 2]]) -> Result<GmmParams, KnollError> {
        let t = placed.len();
        let mut prev = vec![[0.0; 2]; t + 1];
        for i in 1..=t {
            prev[i] = placed[i - 1];
        }
        let mut tape = Tape::new(&self.store);
        let raw = self.raw_head(&mut tape, &dims[..=t], &prev)?;
        let row = &tape.value(raw)[t * 5 * self.cfg.k..(t + 1) * 5 * self.cfg.k];
        Ok(GmmParams::from_raw(row, self.cfg.k, self.std_floor())?)
    }

    /// Mixtures emitted at every step along a fixed decode (for inspection).
    pub fn mixtures(&self, extents: &[Extent2D], positions: &[[f64; 2]]) -> Result<Vec<GmmParams>, KnollError> {
        let order = decode_order(extents);
        let dims: Vec<[f64; 2]> = order.iter().map(|&i| [extents[i].length / UNIT, extents[i].width / UNIT]).collect();
        let placed: Vec<[f64; 2]> = order.iter().map(|&i| to_unit(&self.layout, positions[i])).collect();
        (0..dims.len()).map(|t| self.next_mixture(&dims, &placed[..t])).collect()
    }

    /// Autoregressive plan; poses are returned in input order with yaw 0.
    pub fn plan(&self, extents: &[Extent2D], temperature: f64, seed: u64) -> Result<Vec<Pose2D>, KnollError> {
        if extents.is_empty() || extents.len() > MAX_GROUP {
            return Err(KnollError::ObjectCount(extents.len()));
        }
        let order = decode_order(extents);
        let dims: Vec<[f64; 2]> = order.iter().map(|&i| [extents[i].length / UNIT, extents[i].width / UNIT]).collect();
        let mut rng = rng_from(seed, &[0x914]);
        let mut placed = Vec::with_capacity(dims.len());
        for _ in 0..dims.len() {
            let g = self.next_mixture(&dims, &placed)?;
            placed.push(g.sample(temperature, &mut rng));
        }
        let mut poses = vec![Pose2D::new(0.0, 0.0, 0.0); extents.len()];
        for (k, &i) in order.iter().enumerate() {
            let [x, y] = from_unit(&self.layout, placed[k]);
            poses[i] = Pose2D::new(x, y, 0.0);
        }
        Ok(poses)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), KnollError> {
        let meta = serde_json::json!({
            "kind": "knoll",
            "model": self.cfg,
            "layout": self.layout,
            "extra": extra,
        });
        save_weights(path, &self.store, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), KnollError> {
        let (store, meta) = load_weights(path)?;
        if meta["kind"] != "knoll" {
            return Err(KnollError::Metadata(format!("{} is not a planner weight file", path.display())));
        }
        let cfg = serde_json::from_value(meta["model"].clone()).map_err(|e| KnollError::Metadata(e.to_string()))?;
        let layout = serde_json::from_value(meta["layout"].clone()).map_err(|e| KnollError::Metadata(e.to_string()))?;
        Ok((Self::bind(store, cfg, layout)?, meta["extra"].clone()))
    }
}

/// Object sizes drawn like scene generation does, `n` uniform in `1..=max_objects`.
pub fn sample_extent_sets(gen: &SceneGenConfig, count: usize, max_objects: usize, seed: u64) -> Vec<Vec<Extent2D>> {
    let mut rng = rng_from(seed, &[0xE27]);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=max_objects.max(1));
            (0..n)
                .map(|_| {
                    let a = rng.random_range(gen.length_range[0]..=gen.length_range[1]);
                    let b = rng.random_range(gen.width_range[0]..=gen.width_range[1]);
                    Extent2D::new(a, b).expect("ranges are positive")
                })
                .collect()
        })
        .collect()
}

/// Supervised example for `extents` under layout variant `variant`.
pub fn make_example(extents: &[Extent2D], spec: &LayoutSpec, variant: u64) -> Result<KnollExample, KnollError> {
    let poses = reference_layout(extents, spec, variant)?;
    // equal-area ties are decoded in the order the variant placed them
    let mut order = decode_order(extents);
    order.sort_by(|&a, &b| {
        extents[b]
            .area()
            .total_cmp(&extents[a].area())
            .then(poses[a].y.total_cmp(&poses[b].y))
            .then(poses[a].x.total_cmp(&poses[b].x))
    });
    Ok(KnollExample {
        dims: order.iter().map(|&i| [extents[i].length / UNIT, extents[i].width / UNIT]).collect(),
        targets: order.iter().map(|&i| to_unit(spec, [poses[i].x, poses[i].y])).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnollEpoch {
    pub phase: String,
    pub epoch: usize,
    pub nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnollHistory {
    pub epochs: Vec<KnollEpoch>,
}

fn batch_grad(model: &KnollModel, batch: &[KnollExample]) -> Result<(f64, Grads), KnollError> {
    let chunks: Vec<&[KnollExample]> = batch.chunks(KNOLL_CHUNK).collect();
    let parts = exec::map_slice(&chunks, |chunk| -> Result<(f64, Grads), KnollError> {
        let mut loss = 0.0;
        let mut acc = model.store.new_grads();
        for ex in chunk.iter() {
            let (l, g) = model.example_grad_with(&model.store, ex)?;
            loss += l;
            acc.add_assign(&g);
        }
        Ok((loss, acc))
    });
    let mut total = model.store.new_grads();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

fn run_phase(
    model: &mut KnollModel,
    sets: &[Vec<Extent2D>],
    cfg: &KnollTrainConfig,
    phase: &'static str,
    epochs: usize,
    lr: f64,
    history: &mut KnollHistory,
) -> Result<(), KnollError> {
    let adam = AdamConfig::default();
    for epoch in 0..epochs {
        let mut rng = rng_from(cfg.seed, &[0x7A1, phase.len() as u64, epoch as u64]);
        let mut order: Vec<usize> = (0..sets.len()).collect();
        order.shuffle(&mut rng);
        let examples = order
            .iter()
            .map(|&i| {
                let variant = if cfg.sample_variants { rng.random() } else { 0 };
                make_example(&sets[i], &cfg.layout, variant)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut sum = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let (loss, grads) = batch_grad(model, batch)?;
            if !loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(KnollError::Diverged { phase, epoch, loss });
            }
            sum += loss * batch.len() as f64;
            model.store.set_grads(grads);
            model.store.adam_step(lr, adam);
        }
        let nll = sum / examples.len().max(1) as f64;
        log::info!("knoll {phase} epoch {epoch}: nll {nll:.4}");
        history.epochs.push(KnollEpoch {
            phase: phase.to_string(),
            epoch,
            nll,
        });
    }
    Ok(())
}

/// Pre-training on small groups, then fine-tuning on full-size groups.
pub fn train(gen: &SceneGenConfig, cfg: &KnollTrainConfig) -> Result<(KnollModel, KnollHistory), KnollError> {
    cfg.validate()?;
    let mut model = KnollModel::new(cfg.model, cfg.layout.clone(), cfg.seed)?;
    let mut history = KnollHistory::default();
    let pre = sample_extent_sets(gen, cfg.scenes, cfg.pretrain_max_objects, cfg.seed ^ 0x50);
    run_phase(&mut model, &pre, cfg, "pretrain", cfg.pretrain_epochs, cfg.pretrain_lr, &mut history)?;
    let fine = sample_extent_sets(gen, cfg.scenes, cfg.finetune_max_objects, cfg.seed ^ 0xF1);
    run_phase(&mut model, &fine, cfg, "finetune", cfg.finetune_epochs, cfg.finetune_lr, &mut history)?;
    Ok((model, history))
}

/// One serialised plan entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ext(l: f64, w: f64) -> Extent2D {
        Extent2D::new(l, w).unwrap()
    }

    #[test]
    fn single_object_offset() {
        let p = reference_layout(&[ext(0.04, 0.02)], &LayoutSpec::default(), 3).unwrap();
        assert!((p[0].x - 0.07).abs() < 1e-12 && (p[0].y + 0.29).abs() < 1e-12);
        assert_eq!(p[0].yaw, 0.0);
    }

    #[test]
    fn two_squares_spacing() {
        let spec = LayoutSpec {
            gap_choices: vec![],
            ..Default::default()
        };
        let p = reference_layout(&[ext(0.03, 0.03), ext(0.03, 0.03)], &spec, 0).unwrap();
        assert!(((p[0].x - p[1].x).abs() - 0.045).abs() < 1e-12);
        assert_eq!(p[0].y, p[1].y);
    }

    #[test]
    fn rows_wrap() {
        let e = vec![ext(0.06, 0.05); 5];
        let p = reference_layout(&e, &LayoutSpec::default(), 1).unwrap();
        let ys: std::collections::BTreeSet<i64> = p.iter().map(|q| (q.y * 1e6).round() as i64).collect();
        assert_eq!(ys.len(), 2);
        assert!(validate_plan(&p, &e, 0.01, &Workspace::default()).unwrap().valid);
    }

    #[test]
    fn too_long_is_rejected() {
        let spec = LayoutSpec {
            max_row_width: 0.05,
            ..Default::default()
        };
        assert!(matches!(reference_layout(&[ext(0.06, 0.02)], &spec, 0), Err(KnollError::DoesNotFit(_))));
    }

    #[test]
    fn identical_poses_flagged() {
        let e = vec![ext(0.04, 0.02); 2];
        let p = vec![Pose2D::new(0.3, 0.0, 0.0); 2];
        let c = validate_plan(&p, &e, DEFAULT_MIN_GAP, &Workspace::default()).unwrap();
        assert!(!c.valid);
        assert!(matches!(c.violations[0], Violation::TooClose { a: 0, b: 1, .. }));
    }

    #[test]
    fn example_targets_follow_layout() {
        let e = vec![ext(0.03, 0.03), ext(0.05, 0.02), ext(0.03, 0.03)];
        let ex = make_example(&e, &LayoutSpec::default(), 9).unwrap();
        assert!((ex.dims[0][0] - 0.5).abs() < 1e-12 && (ex.dims[0][1] - 0.2).abs() < 1e-12);
        // decode order reproduces the packer's left-to-right order
        assert!(ex.targets.windows(2).all(|w| w[0][0] < w[1][0] || w[0][1] < w[1][1]));
    }

    #[test]
    fn untrained_plan_is_deterministic() {
        let cfg = KnollModelConfig {
            transformer: TransformerConfig {
                d_model: 8,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                ffn_dim: 16,
            },
            k: 2,
        };
        let m = KnollModel::new(cfg, LayoutSpec::default(), 1).unwrap();
        let e = vec![ext(0.04, 0.02), ext(0.03, 0.03)];
        assert_eq!(m.plan(&e, 1.0, 5).unwrap(), m.plan(&e, 1.0, 5).unwrap());
        assert_eq!(m.plan(&e, 0.0, 5).unwrap(), m.plan(&e, 0.0, 6).unwrap());
        assert!(m.plan(&[], 0.0, 0).is_err());
    }
}
