//! Tabletop scenes: generation, the geometric grasp oracle, grasp-and-remove,
//! and kinematic sweeps.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    convex_hull, convex_intersects, intersects, overlap_area, separating_translation,
    signed_separation, Extent2D, GeometryError, OrientedRect, Vec2,
};
use crate::util::rng_from;

/// Same-layer objects may interpenetrate by at most this much.
pub const CONTACT_TOL: f64 = 1e-6;
/// Attempt budget for rejection sampling in [`generate_scene`].
pub const PLACEMENT_BUDGET: usize = 10_000;
/// Iteration budget for overlap resolution in [`Scene::apply_sweep`].
pub const SWEEP_ITERATIONS: usize = 100;
pub const MAX_STACK_HEIGHT: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown object id {0}")]
    UnknownId(u32),
    #[error("placement failed after {0} attempts")]
    PlacementFailed(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("object {0} has something stacked on it")]
    NotTopOfStack(u32),
    #[error("sweep direction must be a unit vector (|d| = {0})")]
    InvalidDirection(f64),
    #[error("sweep overlaps unresolved after {0} iterations")]
    UnresolvedOverlap(usize),
    #[error("scene invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 0.6,
            y_min: -0.35,
            y_max: 0.35,
        }
    }
}

impl Workspace {
    pub fn contains(&self, p: Vec2) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }

    /// Whether the whole rectangle lies inside.
    pub fn contains_rect(&self, r: &OrientedRect) -> bool {
        r.corners().0.iter().all(|&p| self.contains(p))
    }

    /// Translation that brings the rectangle's bounding box inside, if it fits.
    fn clamp_shift(&self, r: &OrientedRect) -> Vec2 {
        let h = r.aabb_half();
        let shift = |c: f64, half: f64, lo: f64, hi: f64| {
            if c - half < lo {
                lo - (c - half)
            } else if c + half > hi {
                hi - (c + half)
            } else {
                0.0
            }
        };
        Vec2::new(
            shift(r.pose.x, h.x, self.x_min, self.x_max),
            shift(r.pose.y, h.y, self.y_min, self.y_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Crowded,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub rect: OrientedRect,
    /// 0 = resting on the table.
    pub z_layer: u8,
    pub supported_by: Option<u32>,
    /// Render hint only.
    pub color_tag: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub workspace: Workspace,
    pub seed: u64,
    #[serde(default = "default_overlap_min")]
    pub overlap_min: f64,
}

fn default_overlap_min() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperSpec {
    pub max_opening: f64,
    pub finger_thickness: f64,
    pub finger_width: f64,
    pub clearance_margin: f64,
}

impl Default for GripperSpec {
    fn default() -> Self {
        Self {
            max_opening: 0.08,
            finger_thickness: 0.01,
            finger_width: 0.02,
            clearance_margin: 0.002,
        }
    }
}

impl GripperSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let all_pos = [
            self.max_opening,
            self.finger_thickness,
            self.finger_width,
            self.clearance_margin,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !all_pos || self.max_opening <= 2.0 * self.clearance_margin {
            return Err(SceneError::InvalidConfig(format!("gripper {self:?}")));
        }
        Ok(())
    }

    /// Widest object the gripper can close around.
    pub fn max_object_width(&self) -> f64 {
        self.max_opening - 2.0 * self.clearance_margin
    }

    /// The two finger pads placed either side of `rect` along its width axis.
    pub fn finger_footprints(&self, rect: &OrientedRect) -> [OrientedRect; 2] {
        let offset = 0.5 * rect.extent.width + self.clearance_margin + 0.5 * self.finger_thickness;
        let n = rect.axis_width();
        [1.0, -1.0].map(|s| {
            let c = rect.center() + n * (s * offset);
            OrientedRect::new(c.x, c.y, rect.pose.yaw, self.finger_width, self.finger_thickness)
                .expect("gripper dimensions are validated positive")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenConfig {
    /// Inclusive object-count range.
    pub n_objects: [usize; 2],
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub scenario: Scenario,
    pub cluster_radius: f64,
    pub min_clearance_sparse: f64,
    pub p_stack: f64,
    pub overlap_min: f64,
    pub workspace: Workspace,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n_objects: [2, 5],
            length_range: [0.015, 0.06],
            width_range: [0.015, 0.06],
            scenario: Scenario::Crowded,
            cluster_radius: 0.06,
            min_clearance_sparse: 0.04,
            p_stack: 0.3,
            overlap_min: 0.5,
            workspace: Workspace::default(),
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        let [lo, hi] = self.n_objects;
        if lo < 2 || hi > 5 || lo > hi {
            return bad("n_objects must lie within [2, 5]");
        }
        for r in [self.length_range, self.width_range] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad("size ranges must be positive and ordered");
            }
        }
        if !(0.0..=1.0).contains(&self.p_stack) {
            return bad("p_stack must be a probability");
        }
        if !(self.cluster_radius > 0.0 && self.min_clearance_sparse >= 0.0) {
            return bad("cluster_radius must be positive");
        }
        if !(self.overlap_min > 0.0 && self.overlap_min <= 1.0) {
            return bad("overlap_min must lie in (0, 1]");
        }
        let ws = &self.workspace;
        if !(ws.x_min < ws.x_max && ws.y_min < ws.y_max) {
            return bad("empty workspace");
        }
        Ok(())
    }

    fn max_half_diagonal(&self) -> f64 {
        0.5 * self.length_range[1].hypot(self.width_range[1])
    }

    fn sample_extent(&self, rng: &mut ChaCha8Rng) -> Extent2D {
        let a = sample_range(rng, self.length_range);
        let b = sample_range(rng, self.width_range);
        Extent2D::new(a, b).expect("ranges validated positive")
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraspOutcome {
    Success,
    Failure,
}

impl Scene {
    pub fn empty(workspace: Workspace, seed: u64) -> Self {
        Self {
            objects: Vec::new(),
            workspace,
            seed,
            overlap_min: default_overlap_min(),
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Result<usize, SceneError> {
        self.objects
            .iter()
            .position(|o| o.id == id)
            .ok_or(SceneError::UnknownId(id))
    }

    pub fn get(&self, id: u32) -> Result<&SceneObject, SceneError> {
        self.index_of(id).map(|i| &self.objects[i])
    }

    /// The object resting on `id`, if any.
    pub fn top_of(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.supported_by == Some(id))
    }

    pub fn next_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |m: String| Err(SceneError::Invariant(m));
        for (i, o) in self.objects.iter().enumerate() {
            if !self.workspace.contains(o.rect.center()) {
                return fail(format!("object {} center outside workspace", o.id));
            }
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return fail(format!("duplicate id {}", o.id));
            }
            match o.supported_by {
                None if o.z_layer != 0 => return fail(format!("object {} floats", o.id)),
                None => {}
                Some(b) => {
                    let base = self
                        .get(b)
                        .map_err(|_| SceneError::Invariant(format!("missing support {b}")))?;
                    if o.z_layer != base.z_layer + 1 || o.z_layer >= MAX_STACK_HEIGHT {
                        return fail(format!("object {} has a bad layer", o.id));
                    }
                    let frac = overlap_area(&o.rect, &base.rect) / o.rect.area();
                    if frac < self.overlap_min - 1e-9 {
                        return fail(format!("object {} overhangs its support ({frac:.3})", o.id));
                    }
                }
            }
            for p in &self.objects[..i] {
                if p.z_layer == o.z_layer && signed_separation(&p.rect, &o.rect) < -CONTACT_TOL {
                    return fail(format!("objects {} and {} interpenetrate", p.id, o.id));
                }
            }
        }
        Ok(())
    }

    /// Objects that prevent grasping `id`: anything stacked on it, plus
    /// anything at or below its layer under either finger pad.
    pub fn blockers(&self, id: u32, gripper: &GripperSpec) -> Result<Vec<u32>, SceneError> {
        let obj = self.get(id)?;
        let fingers = gripper.finger_footprints(&obj.rect);
        Ok(self
            .objects
            .iter()
            .filter(|o| o.id != id)
            .filter(|o| {
                o.supported_by == Some(id)
                    || (o.z_layer <= obj.z_layer
                        && fingers.iter().any(|f| intersects(f, &o.rect)))
            })
            .map(|o| o.id)
            .collect())
    }

    /// The geometric grasp oracle.
    pub fn graspable(&self, id: u32, gripper: &GripperSpec) -> Result<bool, SceneError> {
        let obj = self.get(id)?;
        if self.top_of(id).is_some() {
            return Ok(false);
        }
        if obj.rect.extent.width > gripper.max_object_width() {
            return Ok(false);
        }
        let fingers = gripper.finger_footprints(&obj.rect);
        let blocked = self.objects.iter().any(|o| {
            o.id != id
                && o.z_layer <= obj.z_layer
                && fingers.iter().any(|f| intersects(f, &o.rect))
        });
        Ok(!blocked)
    }

    pub fn graspable_ids(&self, gripper: &GripperSpec) -> Vec<u32> {
        self.objects
            .iter()
            .filter(|o| self.graspable(o.id, gripper).unwrap_or(false))
            .map(|o| o.id)
            .collect()
    }

    /// Deletes `id`; anything it supported drops one layer.
    pub fn remove(&mut self, id: u32) -> Result<SceneObject, SceneError> {
        let idx = self.index_of(id)?;
        let removed = self.objects.remove(idx);
        for o in &mut self.objects {
            if o.supported_by == Some(id) {
                o.supported_by = removed.supported_by;
                o.z_layer = removed.z_layer;
            }
        }
        Ok(removed)
    }

    pub fn attempt_grasp_and_remove(
        &mut self,
        id: u32,
        gripper: &GripperSpec,
    ) -> Result<GraspOutcome, SceneError> {
        if !self.graspable(id, gripper)? {
            return Ok(GraspOutcome::Failure);
        }
        self.remove(id)?;
        Ok(GraspOutcome::Success)
    }

    /// Ids moving together with `id`: its base (if it is a top) and its top.
    fn unit_of(&self, id: u32) -> Vec<usize> {
        let idx = self.index_of(id).expect("caller checked id");
        let root = match self.objects[idx].supported_by {
            Some(b) => self.index_of(b).expect("validated support"),
            None => idx,
        };
        let root_id = self.objects[root].id;
        let mut unit = vec![root];
        unit.extend(
            self.objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.supported_by == Some(root_id))
                .map(|(i, _)| i),
        );
        unit
    }

    fn shift_unit(&mut self, unit: &[usize], d: Vec2) {
        for &i in unit {
            self.objects[i].rect = self.objects[i].rect.translated(d);
        }
        // keep every member inside the workspace by shifting the unit as one
        let mut fix = Vec2::default();
        for &i in unit {
            let s = self.workspace.clamp_shift(&self.objects[i].rect);
            if s.x.abs() > fix.x.abs() {
                fix.x = s.x;
            }
            if s.y.abs() > fix.y.abs() {
                fix.y = s.y;
            }
        }
        if fix != Vec2::default() {
            for &i in unit {
                self.objects[i].rect = self.objects[i].rect.translated(fix);
            }
        }
    }

    fn first_conflict(&self) -> Option<(usize, usize)> {
        let n = self.objects.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                if a.z_layer == b.z_layer && intersects(&a.rect, &b.rect) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Quasi-static push of `id` by `direction * distance`.
    ///
    /// The pushed object leaves any stack it was on. Table objects touched by
    /// the swept corridor move by the same vector (carrying whatever rests on
    /// them); remaining overlaps are cleared by pushing the object further
    /// along `direction` by the minimum amount.
    pub fn apply_sweep(&self, id: u32, direction: Vec2, distance: f64) -> Result<Scene, SceneError> {
        let idx = self.index_of(id)?;
        if self.top_of(id).is_some() {
            return Err(SceneError::NotTopOfStack(id));
        }
        let norm = direction.norm();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(SceneError::InvalidDirection(norm));
        }
        if !(distance.is_finite() && distance >= 0.0) {
            return Err(SceneError::InvalidConfig(format!("sweep distance {distance}")));
        }
        let v = direction * distance;
        let start = self.objects[idx].rect;
        let end = start.translated(v);
        let mut pts = start.corners().0.to_vec();
        pts.extend_from_slice(&end.corners().0);
        let corridor = convex_hull(&pts);
        let former_base = self.objects[idx].supported_by;

        let mut s = self.clone();
        s.objects[idx].z_layer = 0;
        s.objects[idx].supported_by = None;

        let pushed: Vec<u32> = s
            .objects
            .iter()
            .filter(|o| o.id != id && Some(o.id) != former_base && o.z_layer == 0)
            .filter(|o| convex_intersects(&corridor, &o.rect.corners().0))
            .map(|o| o.id)
            .collect();
        s.shift_unit(&[idx], v);
        for pid in pushed {
            let unit = s.unit_of(pid);
            s.shift_unit(&unit, v);
        }

        let mut iterations = 0;
        while let Some((i, j)) = s.first_conflict() {
            if iterations == SWEEP_ITERATIONS {
                return Err(SceneError::UnresolvedOverlap(iterations));
            }
            iterations += 1;
            let (a, b) = (&s.objects[i], &s.objects[j]);
            let (pa, pb) = (a.rect.center().dot(direction), b.rect.center().dot(direction));
            let (ahead, behind) = if pb > pa || (pb == pa && b.id > a.id) {
                (j, i)
            } else {
                (i, j)
            };
            let t = separating_translation(
                &s.objects[behind].rect.corners().0,
                &s.objects[ahead].rect.corners().0,
                direction,
            )
            .ok_or(SceneError::UnresolvedOverlap(iterations))?;
            let unit = s.unit_of(s.objects[ahead].id);
            s.shift_unit(&unit, direction * (t + CONTACT_TOL));
        }
        s.validate()
            .map_err(|_| SceneError::UnresolvedOverlap(iterations))?;
        Ok(s)
    }
}

/// Samples a scene. Deterministic in `cfg` (including `cfg.seed`).
pub fn generate_scene(cfg: &SceneGenConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed, &[0x5CE7E]);
    let n = rng.random_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    let ws = cfg.workspace;
    let mut scene = Scene::empty(ws, cfg.seed);
    scene.overlap_min = cfg.overlap_min;
    let mut attempts = 0usize;

    match cfg.scenario {
        Scenario::Sparse => {
            let m = cfg.max_half_diagonal();
            for id in 0..n as u32 {
                loop {
                    attempts += 1;
                    if attempts > PLACEMENT_BUDGET {
                        return Err(SceneError::PlacementFailed(PLACEMENT_BUDGET));
                    }
                    let ext = cfg.sample_extent(&mut rng);
                    let x = uniform_inset(&mut rng, ws.x_min, ws.x_max, m);
                    let y = uniform_inset(&mut rng, ws.y_min, ws.y_max, m);
                    let yaw = rng.random_range(0.0..PI);
                    let rect = OrientedRect::new(x, y, yaw, ext.length, ext.width)?;
                    let ok = scene.objects.iter().all(|o| {
                        crate::geometry::clearance(&o.rect, &rect) >= cfg.min_clearance_sparse
                    });
                    if ok {
                        scene.objects.push(table_object(id, rect, &mut rng));
                        break;
                    }
                }
            }
        }
        Scenario::Crowded => {
            let r = cfg.cluster_radius;
            let m = r + cfg.max_half_diagonal();
            let cluster = Vec2::new(
                uniform_inset(&mut rng, ws.x_min, ws.x_max, m),
                uniform_inset(&mut rng, ws.y_min, ws.y_max, m),
            );
            for id in 0..n as u32 {
                let want_stack = id > 0 && rng.random::<f64>() < cfg.p_stack;
                let mut placed = false;
                if want_stack {
                    placed = try_stack(&mut scene, cfg, cluster, id, &mut rng, &mut attempts)?;
                }
                while !placed {
                    attempts += 1;
                    if attempts > PLACEMENT_BUDGET {
                        return Err(SceneError::PlacementFailed(PLACEMENT_BUDGET));
                    }
                    let ext = cfg.sample_extent(&mut rng);
                    let c = cluster + sample_disk(&mut rng, r);
                    let yaw = rng.random_range(0.0..PI);
                    let rect = OrientedRect::new(c.x, c.y, yaw, ext.length, ext.width)?;
                    if scene
                        .objects
                        .iter()
                        .all(|o| o.z_layer != 0 || !intersects(&o.rect, &rect))
                    {
                        scene.objects.push(table_object(id, rect, &mut rng));
                        placed = true;
                    }
                }
            }
        }
    }
    scene.validate()?;
    Ok(scene)
}

const STACK_TRIES: usize = 100;

fn try_stack(
    scene: &mut Scene,
    cfg: &SceneGenConfig,
    cluster: Vec2,
    id: u32,
    rng: &mut ChaCha8Rng,
    attempts: &mut usize,
) -> Result<bool, SceneError> {
    let bases: Vec<usize> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.z_layer + 1 < MAX_STACK_HEIGHT && scene.top_of(o.id).is_none())
        .map(|(i, _)| i)
        .collect();
    if bases.is_empty() {
        return Ok(false);
    }
    for _ in 0..STACK_TRIES {
        *attempts += 1;
        if *attempts > PLACEMENT_BUDGET {
            return Err(SceneError::PlacementFailed(PLACEMENT_BUDGET));
        }
        let base = &scene.objects[bases[rng.random_range(0..bases.len())]];
        let ext = cfg.sample_extent(rng);
        let c = base.rect.center() + sample_disk(rng, 0.25 * base.rect.extent.width);
        let yaw = rng.random_range(0.0..PI);
        let rect = OrientedRect::new(c.x, c.y, yaw, ext.length, ext.width)?;
        if (c - cluster).norm() > cfg.cluster_radius {
            continue;
        }
        if overlap_area(&rect, &base.rect) < cfg.overlap_min * rect.area() {
            continue;
        }
        let layer = base.z_layer + 1;
        if scene
            .objects
            .iter()
            .any(|o| o.z_layer == layer && intersects(&o.rect, &rect))
        {
            continue;
        }
        let (base_id, tag) = (base.id, rng.random_range(0..8u8));
        scene.objects.push(SceneObject {
            id,
            rect,
            z_layer: layer,
            supported_by: Some(base_id),
            color_tag: tag,
        });
        return Ok(true);
    }
    Ok(false)
}

fn table_object(id: u32, rect: OrientedRect, rng: &mut ChaCha8Rng) -> SceneObject {
    SceneObject {
        id,
        rect,
        z_layer: 0,
        supported_by: None,
        color_tag: rng.random_range(0..8u8),
    }
}

fn uniform_inset(rng: &mut ChaCha8Rng, lo: f64, hi: f64, margin: f64) -> f64 {
    let (a, b) = (lo + margin, hi - margin);
    if a < b {
        rng.random_range(a..b)
    } else {
        0.5 * (lo + hi)
    }
}

fn sample_disk(rng: &mut ChaCha8Rng, radius: f64) -> Vec2 {
    let r = radius * rng.random::<f64>().sqrt();
    Vec2::from_angle(rng.random_range(0.0..2.0 * PI)) * r
}
