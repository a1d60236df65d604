//! Episode state machine: observe, classify, separate, then pick and place
//! every object to its planned pose.
//!
//! Every scene change goes through [`apply_action`], which is also what
//! [`replay`] uses, so a log replays to the same final scene bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::partition_indices;
use crate::gem::{GemError, GemModel, GEM_THRESHOLD};
use crate::geometry::{intersects, Extent2D, GeometryError, OrientedRect, Pose2D, Vec2};
use crate::knoll::{reference_layout, validate_plan, KnollError, KnollModel, LayoutSpec, DEFAULT_MIN_GAP};
use crate::perception::{observe_states, ObjectState, PerceptionConfig};
use crate::scene::{generate_scene, GripperSpec, Scene, SceneError, SceneGenConfig};
use crate::util::derive_seed;

/// Tool height while travelling and while gripping (bookkeeping only).
pub const TRAVEL_Z: f64 = 0.10;
pub const GRIP_Z: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("no object is predicted ungraspable")]
    NoUngraspable,
    #[error("object {0} is not graspable")]
    Ungraspable(u32),
    #[error("target pose for object {0} collides with object {1}")]
    TargetCollision(u32, u32),
    #[error("target pose for object {0} leaves the workspace")]
    TargetOutside(u32),
    #[error("separation budget of {0} rounds exhausted")]
    RoundsExhausted(usize),
    #[error("gripper already holds object {0}")]
    AlreadyHolding(u32),
    #[error("release with an empty gripper")]
    NothingHeld,
    #[error("no executable placement order")]
    Deadlock,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Gem(#[from] GemError),
    #[error(transparent)]
    Knoll(#[from] KnollError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub tool: [f64; 3],
    pub gripper: GripperState,
    pub held: Option<u32>,
}

impl Default for ArmState {
    fn default() -> Self {
        Self {
            tool: [0.0, 0.0, TRAVEL_Z],
            gripper: GripperState::Open,
            held: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    MoveTo { waypoints: Vec<[f64; 3]> },
    Grasp { id: u32 },
    /// Sets the held object down at the tool's (x, y), axis-aligned.
    Release,
    Sweep { id: u32, direction: [f64; 2], distance: f64 },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::MoveTo { .. } => "move_to",
            Action::Grasp { .. } => "grasp",
            Action::Release => "release",
            Action::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Moved,
    Grasped,
    GraspFailed,
    Released,
    Swept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub max_separation_rounds: usize,
    pub sweep_distance: f64,
    pub step_max: f64,
    pub min_gap: f64,
    /// Extra clearance demanded of a learned plan, measured on perceived sizes.
    pub plan_margin: f64,
    /// Not read from config files; callers copy these from their own sections.
    #[serde(skip)]
    pub gripper: GripperSpec,
    #[serde(skip)]
    pub perception: PerceptionConfig,
    #[serde(skip)]
    pub layout: LayoutSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_separation_rounds: 5,
            sweep_distance: 0.05,
            step_max: 0.01,
            min_gap: DEFAULT_MIN_GAP,
            plan_margin: 0.003,
            gripper: GripperSpec::default(),
            perception: PerceptionConfig::default(),
            layout: LayoutSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = self.max_separation_rounds > 0
            && self.sweep_distance > 0.0
            && self.step_max > 0.0
            && self.min_gap > 0.0
            && self.plan_margin >= 0.0;
        if !ok {
            return Err(ControllerError::Config("pipeline sizes must be positive".into()));
        }
        self.gripper.validate()?;
        self.perception.validate().map_err(ControllerError::Config)?;
        self.layout.validate()?;
        Ok(())
    }
}

/// Straight-line waypoints with spacing at most `step_max`; both endpoints exact.
pub fn cartesian_path(from: [f64; 3], to: [f64; 3], step_max: f64) -> Vec<[f64; 3]> {
    let d = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2) + (to[2] - from[2]).powi(2)).sqrt();
    if d == 0.0 || !(step_max > 0.0) {
        return if d == 0.0 { vec![from] } else { vec![from, to] };
    }
    // tolerate d/step landing a hair above an integer
    let n = ((d / step_max) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    out.push(from);
    for i in 1..n {
        let t = i as f64 / n as f64;
        out.push([
            from[0] + t * (to[0] - from[0]),
            from[1] + t * (to[1] - from[1]),
            from[2] + t * (to[2] - from[2]),
        ]);
    }
    out.push(to);
    out
}

/// Sweep for the predicted-ungraspable object with the most blockers.
pub fn plan_separation(
    states: &[(u32, ObjectState)],
    gem_probs: &[f64],
    scene: &Scene,
    gripper: &GripperSpec,
    distance: f64,
) -> Result<Action, ControllerError> {
    let mut best: Option<(usize, u32)> = None;
    for ((id, _), &p) in states.iter().zip(gem_probs) {
        if p >= GEM_THRESHOLD {
            continue;
        }
        let n = scene.blockers(*id, gripper)?.len();
        best = match best {
            Some((bn, bid)) if bn > n || (bn == n && bid < *id) => Some((bn, bid)),
            _ => Some((n, *id)),
        };
    }
    let (_, mut target) = best.ok_or(ControllerError::NoUngraspable)?;
    while let Some(top) = scene.top_of(target) {
        target = top.id;
    }
    let obj = scene.get(target)?;
    let mut from: Vec<Vec2> = scene
        .blockers(target, gripper)?
        .into_iter()
        .map(|b| scene.get(b).map(|o| o.rect.center()))
        .collect::<Result<_, _>>()?;
    if let Some(base) = obj.supported_by {
        from.push(scene.get(base)?.rect.center());
    }
    let c = obj.rect.center();
    let mut dir = Vec2::new(1.0, 0.0);
    if !from.is_empty() {
        let centroid = from.iter().fold(Vec2::default(), |a, &b| a + b) * (1.0 / from.len() as f64);
        let v = c - centroid;
        if v.norm() > 1e-9 {
            dir = v * (1.0 / v.norm());
        }
    }
    // A push that jams objects against the workspace edge cannot settle; turn
    // away from the preferred direction in 22.5 degree steps until one does.
    let mut turned = (0..16).map(|k| {
        let a = (k as f64 / 2.0).ceil() * std::f64::consts::FRAC_PI_8 * if k % 2 == 0 { -1.0 } else { 1.0 };
        Vec2::new(dir.x * a.cos() - dir.y * a.sin(), dir.x * a.sin() + dir.y * a.cos())
    });
    let dir = turned
        .find(|d| !matches!(scene.apply_sweep(target, *d, distance), Err(SceneError::UnresolvedOverlap(_))))
        .unwrap_or(dir);
    Ok(Action::Sweep {
        id: target,
        direction: [dir.x, dir.y],
        distance,
    })
}

fn check_target(scene: &Scene, id: u32, target: &OrientedRect) -> Result<(), ControllerError> {
    if !scene.workspace.contains_rect(target) {
        return Err(ControllerError::TargetOutside(id));
    }
    if let Some(o) = scene.objects.iter().find(|o| o.id != id && intersects(&o.rect, target)) {
        return Err(ControllerError::TargetCollision(id, o.id));
    }
    Ok(())
}

/// Moves `id` to `target` in one step; the scene is untouched on error.
pub fn pick_place(scene: &Scene, id: u32, target: Pose2D, gripper: &GripperSpec) -> Result<Scene, ControllerError> {
    if !scene.graspable(id, gripper)? {
        return Err(ControllerError::Ungraspable(id));
    }
    let obj = scene.get(id)?;
    let rect = OrientedRect::new(target.x, target.y, target.yaw, obj.rect.extent.length, obj.rect.extent.width)?;
    check_target(scene, id, &rect)?;
    let mut s = scene.clone();
    let idx = s.index_of(id)?;
    s.objects[idx].rect = rect;
    s.objects[idx].z_layer = 0;
    s.objects[idx].supported_by = None;
    s.validate()?;
    Ok(s)
}

/// Applies one action. A failed grasp is an outcome, not an error.
pub fn apply_action(scene: &mut Scene, arm: &mut ArmState, action: &Action, gripper: &GripperSpec) -> Result<Outcome, ControllerError> {
    match action {
        Action::MoveTo { waypoints } => {
            if let Some(&last) = waypoints.last() {
                arm.tool = last;
            }
            Ok(Outcome::Moved)
        }
        Action::Grasp { id } => {
            if let Some(h) = arm.held {
                return Err(ControllerError::AlreadyHolding(h));
            }
            if scene.graspable(*id, gripper)? {
                arm.held = Some(*id);
                arm.gripper = GripperState::Closed;
                Ok(Outcome::Grasped)
            } else {
                arm.gripper = GripperState::Open;
                Ok(Outcome::GraspFailed)
            }
        }
        Action::Release => {
            let id = arm.held.ok_or(ControllerError::NothingHeld)?;
            let target = Pose2D::new(arm.tool[0], arm.tool[1], 0.0);
            *scene = pick_place(scene, id, target, gripper)?;
            arm.held = None;
            arm.gripper = GripperState::Open;
            Ok(Outcome::Released)
        }
        Action::Sweep { id, direction, distance } => {
            *scene = scene.apply_sweep(*id, Vec2::new(direction[0], direction[1]), *distance)?;
            let c = scene.get(*id)?.rect.center();
            arm.tool = [c.x, c.y, GRIP_Z];
            Ok(Outcome::Swept)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub id: u32,
    pub state: ObjectState,
    pub p_graspable: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub scene: Scene,
    /// Present when the action was chosen from a fresh observation.
    pub observation: Option<Vec<ObjectPrediction>>,
    pub action: Action,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Success,
    InvalidFinalLayout,
    RoundsExhausted,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Model,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedTarget {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub initial_scene: Scene,
    pub entries: Vec<LogEntry>,
    pub final_scene: Scene,
    pub status: EpisodeStatus,
    pub error: Option<String>,
    pub separation_rounds: usize,
    pub plan: Vec<PlannedTarget>,
    pub plan_source: Option<PlanSource>,
}

impl EpisodeLog {
    pub fn sweeps(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e.action, Action::Sweep { .. })).count()
    }

    pub fn first_grasp(&self) -> Option<usize> {
        self.entries.iter().position(|e| matches!(e.action, Action::Grasp { .. }))
    }

    pub fn first_sweep(&self) -> Option<usize> {
        self.entries.iter().position(|e| matches!(e.action, Action::Sweep { .. }))
    }

    /// Whether the first observation had any object below the GEM threshold.
    pub fn initially_ungraspable(&self) -> bool {
        self.entries
            .iter()
            .find_map(|e| e.observation.as_ref())
            .is_some_and(|o| o.iter().any(|p| p.p_graspable < GEM_THRESHOLD))
    }
}

/// Re-applies the logged actions to the initial scene.
pub fn replay(log: &EpisodeLog, gripper: &GripperSpec) -> Result<Scene, ControllerError> {
    let mut scene = log.initial_scene.clone();
    let mut arm = ArmState::default();
    for e in &log.entries {
        let out = apply_action(&mut scene, &mut arm, &e.action, gripper)?;
        if out != e.outcome {
            return Err(ControllerError::Config(format!(
                "replay outcome {out:?} differs from logged {:?}",
                e.outcome
            )));
        }
    }
    Ok(scene)
}

struct Episode<'a> {
    scene: Scene,
    arm: ArmState,
    entries: Vec<LogEntry>,
    cfg: &'a PipelineConfig,
    seed: u64,
    observations: u64,
    rounds: usize,
}

impl Episode<'_> {
    fn act(&mut self, action: Action, observation: Option<Vec<ObjectPrediction>>) -> Result<Outcome, ControllerError> {
        let before = self.scene.clone();
        let outcome = apply_action(&mut self.scene, &mut self.arm, &action, &self.cfg.gripper)?;
        self.entries.push(LogEntry {
            scene: before,
            observation,
            action,
            outcome,
        });
        Ok(outcome)
    }

    fn observe(&mut self, gem: &GemModel) -> Result<Vec<ObjectPrediction>, ControllerError> {
        let pc = self
            .cfg
            .perception
            .with_seed(derive_seed(self.seed, &[0x0B5, self.observations]));
        self.observations += 1;
        let states = observe_states(&self.scene, &pc)?;
        let plain: Vec<ObjectState> = states.iter().map(|(_, s)| *s).collect();
        let mut probs = vec![0.0; states.len()];
        for group in partition_indices(&plain) {
            let g: Vec<ObjectState> = group.iter().map(|&i| plain[i]).collect();
            for (&i, p) in group.iter().zip(gem.predict(&g)?) {
                probs[i] = p;
            }
        }
        Ok(states
            .into_iter()
            .zip(probs)
            .map(|((id, state), p_graspable)| ObjectPrediction { id, state, p_graspable })
            .collect())
    }

    fn sweep(&mut self, obs: Vec<ObjectPrediction>, only: Option<u32>) -> Result<(), ControllerError> {
        if self.rounds >= self.cfg.max_separation_rounds {
            return Err(ControllerError::RoundsExhausted(self.rounds));
        }
        let states: Vec<(u32, ObjectState)> = obs.iter().map(|o| (o.id, o.state)).collect();
        let probs: Vec<f64> = obs
            .iter()
            .map(|o| match only {
                Some(id) if o.id == id => 0.0,
                Some(_) => 1.0,
                None => o.p_graspable,
            })
            .collect();
        let action = plan_separation(&states, &probs, &self.scene, &self.cfg.gripper, self.cfg.sweep_distance)?;
        if let Action::Sweep { id, .. } = action {
            let c = self.scene.get(id)?.rect.center();
            let path = cartesian_path(self.arm.tool, [c.x, c.y, GRIP_Z], self.cfg.step_max);
            self.act(Action::MoveTo { waypoints: path }, None)?;
        }
        self.act(action, Some(obs))?;
        self.rounds += 1;
        Ok(())
    }

    fn move_to(&mut self, to: [f64; 3]) -> Result<(), ControllerError> {
        let path = cartesian_path(self.arm.tool, to, self.cfg.step_max);
        self.act(Action::MoveTo { waypoints: path }, None).map(|_| ())
    }
}

/// Plans targets for the observed objects; falls back to the reference
/// packer when the learned plan is not clearly valid.
fn plan_targets(
    knoll: &KnollModel,
    obs: &[ObjectPrediction],
    cfg: &PipelineConfig,
    workspace: &crate::scene::Workspace,
) -> Result<(Vec<Pose2D>, Vec<Extent2D>, PlanSource), ControllerError> {
    let extents = obs
        .iter()
        .map(|o| Extent2D::new(o.state.length, o.state.width))
        .collect::<Result<Vec<_>, _>>()?;
    if let Ok(poses) = knoll.plan(&extents, 0.0, 0) {
        if validate_plan(&poses, &extents, cfg.min_gap + cfg.plan_margin, workspace)?.valid {
            return Ok((poses, extents, PlanSource::Model));
        }
    }
    let poses = reference_layout(&extents, &cfg.layout, 0)?;
    Ok((poses, extents, PlanSource::Reference))
}

/// Pending objects whose target is free of every other perceived object, in
/// plan order. The first one predicted graspable is preferred.
fn next_placeable(pending: &[usize], targets: &[OrientedRect], obs: &[ObjectPrediction], ids: &[u32]) -> Result<Option<usize>, ControllerError> {
    let current: Vec<(u32, OrientedRect)> = obs
        .iter()
        .map(|o| o.state.rect().map(|r| (o.id, r)))
        .collect::<Result<_, _>>()?;
    let p = |k: usize| obs.iter().find(|o| o.id == ids[k]).map_or(0.0, |o| o.p_graspable);
    let free: Vec<usize> = pending
        .iter()
        .copied()
        .filter(|&k| current.iter().all(|(id, r)| *id == ids[k] || !intersects(r, &targets[k])))
        .collect();
    Ok(free.iter().copied().find(|&k| p(k) >= GEM_THRESHOLD).or(free.first().copied()))
}

/// Shifts every target by the smallest grid offset that clears all current objects.
fn relocate_plan(poses: &[Pose2D], extents: &[Extent2D], obs: &[ObjectPrediction], workspace: &crate::scene::Workspace) -> Result<Option<Vec<Pose2D>>, ControllerError> {
    let current = obs
        .iter()
        .map(|o| o.state.rect())
        .collect::<Result<Vec<_>, _>>()?;
    let step = 0.01;
    let mut offsets = Vec::new();
    for i in -60i32..=60 {
        for j in -70i32..=70 {
            offsets.push((i as f64 * step, j as f64 * step));
        }
    }
    offsets.sort_by(|a, b| (a.0.hypot(a.1)).total_cmp(&b.0.hypot(b.1)).then(a.0.total_cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    for (dx, dy) in offsets {
        let moved: Vec<Pose2D> = poses.iter().map(|p| Pose2D::new(p.x + dx, p.y + dy, p.yaw)).collect();
        let rects = moved
            .iter()
            .zip(extents)
            .map(|(p, e)| OrientedRect::new(p.x, p.y, p.yaw, e.length, e.width))
            .collect::<Result<Vec<_>, _>>()?;
        let ok = rects.iter().all(|r| workspace.contains_rect(r))
            && rects.iter().all(|r| current.iter().all(|c| crate::geometry::clearance(r, c) > 0.01));
        if ok {
            return Ok(Some(moved));
        }
    }
    Ok(None)
}

fn run_inner(ep: &mut Episode, gem: &GemModel, knoll: &KnollModel) -> Result<(Vec<PlannedTarget>, Option<PlanSource>), ControllerError> {
    // Separation. Once the budget is spent the pick phase takes over; objects
    // still below threshold wait until their neighbours have been moved.
    let obs = loop {
        let obs = ep.observe(gem)?;
        if ep.rounds < ep.cfg.max_separation_rounds && obs.iter().any(|o| o.p_graspable < GEM_THRESHOLD) {
            ep.sweep(obs, None)?;
        } else {
            break obs;
        }
    };
    if obs.is_empty() {
        return Ok((Vec::new(), None));
    }
    let ws = ep.scene.workspace;
    let (mut poses, extents, source) = plan_targets(knoll, &obs, ep.cfg, &ws)?;
    let ids: Vec<u32> = obs.iter().map(|o| o.id).collect();
    let to_rects = |poses: &[Pose2D]| -> Result<Vec<OrientedRect>, ControllerError> {
        Ok(poses
            .iter()
            .zip(&extents)
            .map(|(p, e)| OrientedRect::new(p.x, p.y, p.yaw, e.length, e.width))
            .collect::<Result<Vec<_>, _>>()?)
    };
    let mut targets = to_rects(&poses)?;
    let mut pending: Vec<usize> = (0..ids.len()).collect();
    let mut obs = obs;
    let mut relocated = false;

    while !pending.is_empty() {
        let k = match next_placeable(&pending, &targets, &obs, &ids)? {
            Some(k) => k,
            None if !relocated => {
                relocated = true;
                poses = relocate_plan(&poses, &extents, &obs, &ws)?.ok_or(ControllerError::Deadlock)?;
                targets = to_rects(&poses)?;
                continue;
            }
            None => return Err(ControllerError::Deadlock),
        };
        let id = ids[k];
        let Some(pred) = obs.iter().find(|o| o.id == id).cloned() else {
            return Err(ControllerError::Scene(SceneError::UnknownId(id)));
        };
        if pred.p_graspable < GEM_THRESHOLD {
            ep.sweep(obs, Some(id))?;
            obs = ep.observe(gem)?;
            continue;
        }
        let c = [pred.state.x, pred.state.y];
        ep.move_to([c[0], c[1], TRAVEL_Z])?;
        ep.move_to([c[0], c[1], GRIP_Z])?;
        let outcome = ep.act(Action::Grasp { id }, Some(obs.clone()))?;
        if outcome == Outcome::GraspFailed {
            ep.move_to([c[0], c[1], TRAVEL_Z])?;
            let fresh = ep.observe(gem)?;
            ep.sweep(fresh, Some(id))?;
            obs = ep.observe(gem)?;
            continue;
        }
        ep.move_to([c[0], c[1], TRAVEL_Z])?;
        ep.move_to([poses[k].x, poses[k].y, TRAVEL_Z])?;
        ep.move_to([poses[k].x, poses[k].y, GRIP_Z])?;
        ep.act(Action::Release, None)?;
        ep.move_to([poses[k].x, poses[k].y, TRAVEL_Z])?;
        pending.retain(|&p| p != k);
        obs = ep.observe(gem)?;
    }
    let plan = ids
        .iter()
        .zip(&poses)
        .map(|(&id, p)| PlannedTarget { id, x: p.x, y: p.y, yaw: p.yaw })
        .collect();
    Ok((plan, Some(source)))
}

/// Runs one full episode. Action errors end the episode and are recorded in the log.
pub fn run_pipeline(scene: &Scene, gem: &GemModel, knoll: &KnollModel, cfg: &PipelineConfig, seed: u64) -> Result<EpisodeLog, ControllerError> {
    cfg.validate()?;
    scene.validate()?;
    let mut ep = Episode {
        scene: scene.clone(),
        arm: ArmState::default(),
        entries: Vec::new(),
        cfg,
        seed,
        observations: 0,
        rounds: 0,
    };
    let result = run_inner(&mut ep, gem, knoll);
    let (status, error, plan, plan_source) = match result {
        Ok((plan, src)) => {
            let all: Vec<_> = ep.scene.objects.iter().map(|o| (o.rect.pose, o.rect.extent)).collect();
            let poses: Vec<Pose2D> = all.iter().map(|a| a.0).collect();
            let extents: Vec<Extent2D> = all.iter().map(|a| a.1).collect();
            let placed_ok = validate_plan(&poses, &extents, cfg.min_gap, &ep.scene.workspace)?.valid
                && ep.scene.objects.iter().all(|o| o.z_layer == 0);
            let status = if placed_ok {
                EpisodeStatus::Success
            } else {
                EpisodeStatus::InvalidFinalLayout
            };
            (status, None, plan, src)
        }
        Err(ControllerError::RoundsExhausted(n)) => (
            EpisodeStatus::RoundsExhausted,
            Some(ControllerError::RoundsExhausted(n).to_string()),
            Vec::new(),
            None,
        ),
        Err(e) => (EpisodeStatus::Error, Some(e.to_string()), Vec::new(), None),
    };
    Ok(EpisodeLog {
        seed,
        initial_scene: scene.clone(),
        entries: ep.entries,
        final_scene: ep.scene,
        status,
        error,
        separation_rounds: ep.rounds,
        plan,
        plan_source,
    })
}

/// Seeded scenes for pipeline runs. With `require_stack`, draws are retried
/// (at most 100 per scene) until the scene holds at least one stacked object.
pub fn episode_scenes(gen: &SceneGenConfig, count: usize, seed: u64, require_stack: bool) -> Result<Vec<Scene>, SceneError> {
    (0..count)
        .map(|i| {
            let mut last = None;
            for attempt in 0..100u64 {
                let cfg = SceneGenConfig {
                    seed: derive_seed(seed, &[0xE915, i as u64, attempt]),
                    ..gen.clone()
                };
                let scene = match generate_scene(&cfg) {
                    Err(SceneError::PlacementFailed(_)) => continue,
                    r => r?,
                };
                if !require_stack || scene.objects.iter().any(|o| o.z_layer > 0) {
                    return Ok(scene);
                }
                last = Some(scene);
            }
            Err(SceneError::InvalidConfig(format!(
                "no usable scene after 100 draws (p_stack {}, last draw had {} objects)",
                gen.p_stack,
                last.map_or(0, |s: Scene| s.len())
            )))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneObject;

    fn obj(id: u32, x: f64, y: f64, yaw: f64, l: f64, w: f64) -> SceneObject {
        SceneObject {
            id,
            rect: OrientedRect::new(x, y, yaw, l, w).unwrap(),
            z_layer: 0,
            supported_by: None,
            color_tag: 0,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        let mut s = Scene::empty(Default::default(), 0);
        s.objects = objects;
        s
    }

    #[test]
    fn path_cases() {
        assert_eq!(cartesian_path([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 0.01).len(), 1);
        let p = cartesian_path([0.0, 0.0, 0.0], [0.05, 0.0, 0.0], 0.01);
        assert_eq!(p.len(), 6);
        assert_eq!(p[5], [0.05, 0.0, 0.0]);
        for w in p.windows(2) {
            assert!((w[1][0] - w[0][0] - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_pushes_away_from_left_neighbour() {
        // right object's width axis runs along x, so the left object sits under a finger
        let s = scene(vec![obj(0, 0.30, 0.0, 0.0, 0.04, 0.03), obj(1, 0.335, 0.0, std::f64::consts::FRAC_PI_2, 0.05, 0.04)]);
        let g = GripperSpec::default();
        assert!(!s.graspable(1, &g).unwrap());
        let st: Vec<(u32, ObjectState)> = s.objects.iter().map(|o| (o.id, ObjectState::from_rect(&o.rect, 0.9))).collect();
        let a = plan_separation(&st, &[0.9, 0.1], &s, &g, 0.05).unwrap();
        match a {
            Action::Sweep { id, direction, .. } => {
                assert_eq!(id, 1);
                assert!((direction[0] - 1.0).abs() < 1e-12 && direction[1].abs() < 1e-12);
            }
            _ => panic!("expected a sweep"),
        }
        assert!(matches!(plan_separation(&st, &[0.9, 0.9], &s, &g, 0.05), Err(ControllerError::NoUngraspable)));
    }

    #[test]
    fn stack_retargets_top() {
        let mut top = obj(1, 0.30, 0.0, 0.0, 0.04, 0.03);
        top.z_layer = 1;
        top.supported_by = Some(0);
        let s = scene(vec![obj(0, 0.30, 0.0, 0.0, 0.05, 0.04), top]);
        let st: Vec<(u32, ObjectState)> = s.objects.iter().map(|o| (o.id, ObjectState::from_rect(&o.rect, 0.9))).collect();
        let a = plan_separation(&st, &[0.1, 0.9], &s, &GripperSpec::default(), 0.05).unwrap();
        assert!(matches!(a, Action::Sweep { id: 1, .. }));
    }

    #[test]
    fn pick_place_cases() {
        let s = scene(vec![obj(0, 0.1, 0.0, 0.3, 0.04, 0.02), obj(1, 0.4, 0.2, 0.0, 0.04, 0.02)]);
        let g = GripperSpec::default();
        let t = Pose2D::new(0.3, -0.2, 0.0);
        let s2 = pick_place(&s, 0, t, &g).unwrap();
        assert_eq!(s2.get(0).unwrap().rect.pose, t);
        let bad = pick_place(&s, 0, Pose2D::new(0.4, 0.2, 0.0), &g);
        assert!(matches!(bad, Err(ControllerError::TargetCollision(0, 1))));
    }
}
