//! Synthetic tabletop tasks, the oracle demonstrator, the analytic grasp
//! judge, and the evaluation harness.
//!
//! The judge replaces physics with four checks: a downward approach cone,
//! proximity to an object's vertical grasp axis, a gripper-opening fit of the
//! object's spanned width along the closing axis, and finger segments clear
//! of every other object.

use crate::pose::{Pose, PoseQ, Quat};
use crate::policy::{infer, OptSchedule};
use crate::scene::{Aabb, Scene, ScenePrimitive};
use crate::seeds::{derive_seed, stream_rng};
use crate::training::DemoRecord;
use crate::value::ValueModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("placement rejection cap exceeded ({0} tries)")]
    PlacementCap(usize),
    #[error("no graspable object (all spans exceed the gripper opening)")]
    NoGraspableObject,
    #[error("evaluation needs at least one episode and one repeat")]
    ZeroEpisodes,
    #[error("bad task spec: {0}")]
    BadSpec(&'static str),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

// ── Task specification ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Simple,
    Clutter,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simple" => Some(TaskKind::Simple),
            "clutter" => Some(TaskKind::Clutter),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Simple => "simple",
            TaskKind::Clutter => "clutter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Half-extent ranges for x/y and z.
    pub half_xy: (f64, f64),
    pub half_z: (f64, f64),
    pub workspace: Aabb,
    /// Simple: minimum center distance. Clutter: extra gap on top of the
    /// overlap-free packing test.
    pub clearance: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn simple(seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Simple,
            objects_min: 1,
            objects_max: 5,
            half_xy: (0.015, 0.045),
            half_z: (0.02, 0.06),
            workspace: Aabb::new([-0.3, -0.3, 0.0], [0.3, 0.3, 0.35]).expect("workspace"),
            clearance: 0.16,
            seed,
        }
    }

    pub fn clutter(seed: u64) -> Self {
        TaskSpec {
            objects_min: 5,
            objects_max: 5,
            kind: TaskKind::Clutter,
            clearance: 0.005,
            ..TaskSpec::simple(seed)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(EnvError::BadSpec("object count range"));
        }
        if self.half_xy.0 <= 0.0 || self.half_xy.0 > self.half_xy.1 {
            return Err(EnvError::BadSpec("xy half-extent range"));
        }
        if self.half_z.0 <= 0.0 || self.half_z.0 > self.half_z.1 {
            return Err(EnvError::BadSpec("z half-extent range"));
        }
        if self.clearance < 0.0 {
            return Err(EnvError::BadSpec("clearance"));
        }
        Ok(())
    }
}

// ── Scene generation ─────────────────────────────────────────────────

/// yaw-rotated rectangle overlap via the separating-axis test.
fn rects_overlap(a: &ScenePrimitive, b: &ScenePrimitive, gap: f64) -> bool {
    let corners = |p: &ScenePrimitive| -> Vec<[f64; 2]> {
        let (s, c) = p.yaw.sin_cos();
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .map(|(sx, sy)| {
                let lx = sx * (p.half_extents[0] + 0.5 * gap);
                let ly = sy * (p.half_extents[1] + 0.5 * gap);
                [p.center[0] + c * lx - s * ly, p.center[1] + s * lx + c * ly]
            })
            .collect()
    };
    let axes = |p: &ScenePrimitive| -> [[f64; 2]; 2] {
        let (s, c) = p.yaw.sin_cos();
        [[c, s], [-s, c]]
    };
    let ca = corners(a);
    let cb = corners(b);
    for axis in axes(a).iter().chain(axes(b).iter()) {
        let project = |pts: &[[f64; 2]]| -> (f64, f64) {
            let vals: Vec<f64> = pts.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).collect();
            (vals.iter().cloned().fold(f64::INFINITY, f64::min),
             vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        let (amin, amax) = project(&ca);
        let (bmin, bmax) = project(&cb);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "cyan"];
const PLACEMENT_CAP: usize = 1000;

/// Rejection-samples upright boxes until the task constraints hold.
pub fn generate_scene(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Scene, EnvError> {
    spec.validate()?;
    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut placed: Vec<ScenePrimitive> = Vec::with_capacity(count);
    let mut tries = 0usize;
    while placed.len() < count {
        tries += 1;
        if tries > PLACEMENT_CAP {
            return Err(EnvError::PlacementCap(PLACEMENT_CAP));
        }
        let hx = rng.random_range(spec.half_xy.0..=spec.half_xy.1);
        let hy = rng.random_range(spec.half_xy.0..=spec.half_xy.1);
        let hz = rng.random_range(spec.half_z.0..=spec.half_z.1);
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let r = (hx * hx + hy * hy).sqrt();
        let ws = &spec.workspace;
        if ws.max[0] - ws.min[0] <= 2.0 * r || ws.max[1] - ws.min[1] <= 2.0 * r {
            return Err(EnvError::BadSpec("workspace too small for object sizes"));
        }
        let cx = rng.random_range(ws.min[0] + r..ws.max[0] - r);
        let cy = rng.random_range(ws.min[1] + r..ws.max[1] - r);
        let candidate =
            ScenePrimitive::new([cx, cy, ws.min[2] + hz], [hx, hy, hz], yaw, COLORS[placed.len() % 5])?;
        let ok = match spec.kind {
            TaskKind::Simple => placed.iter().all(|p| {
                let dx = p.center[0] - cx;
                let dy = p.center[1] - cy;
                (dx * dx + dy * dy).sqrt() >= spec.clearance
            }),
            TaskKind::Clutter => placed.iter().all(|p| !rects_overlap(p, &candidate, spec.clearance)),
        };
        if ok {
            placed.push(candidate);
        }
    }
    Ok(Scene::new(placed, spec.workspace)?)
}

// ── Oracle demonstrator ──────────────────────────────────────────────

const HOVER_HEIGHT: f64 = 0.15;
const TRAJECTORY_LEN: usize = 20;

/// World-frame grasp orientation: approach straight down, closing axis at
/// world yaw `phi`.
fn grasp_orientation(phi: f64) -> Quat {
    let (s, c) = phi.sin_cos();
    let x = [c, s, 0.0];
    let z = [0.0, 0.0, -1.0];
    let y = [s, -c, 0.0];
    Quat::from_cols([x, y, z])
}

/// Closing-axis world angle across the shorter horizontal extent.
fn oracle_grasp_angle(prim: &ScenePrimitive) -> f64 {
    if prim.half_extents[0] <= prim.half_extents[1] {
        prim.yaw
    } else {
        prim.yaw + std::f64::consts::FRAC_PI_2
    }
}

/// Oracle grasp pose for one primitive: above-center TCP, downward approach,
/// closing across the shorter horizontal extent.
pub fn oracle_grasp_pose(prim: &ScenePrimitive) -> PoseQ {
    let position = [
        prim.center[0],
        prim.center[1],
        prim.center[2] + 0.5 * prim.half_extents[2],
    ];
    PoseQ { position, orientation: grasp_orientation(oracle_grasp_angle(prim)).canonicalized() }
}

/// Hover-and-descend demonstration onto a random graspable object.
pub fn oracle_demo(
    scene: &Scene,
    max_opening: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DemoRecord, EnvError> {
    let graspable: Vec<usize> = (0..scene.primitives.len())
        .filter(|&i| {
            let p = &scene.primitives[i];
            2.0 * p.half_extents[0].min(p.half_extents[1]) < max_opening
        })
        .collect();
    if graspable.is_empty() {
        return Err(EnvError::NoGraspableObject);
    }
    let target = graspable[rng.random_range(0..graspable.len())];
    let grasp = oracle_grasp_pose(&scene.primitives[target]);
    let start_orientation = grasp_orientation(0.0);
    let hover = [grasp.position[0], grasp.position[1], grasp.position[2] + HOVER_HEIGHT];
    let mut trajectory = Vec::with_capacity(TRAJECTORY_LEN);
    for i in 0..TRAJECTORY_LEN {
        let t = i as f64 / (TRAJECTORY_LEN - 1) as f64;
        let position = [
            hover[0],
            hover[1],
            hover[2] + t * (grasp.position[2] - hover[2]),
        ];
        let orientation = Quat::slerp(&start_orientation, &grasp.orientation, t).canonicalized();
        trajectory.push(PoseQ { position, orientation });
    }
    *trajectory.last_mut().unwrap() = grasp;
    Ok(DemoRecord { scene: scene.clone(), trajectory, grasp_pose: grasp, seed: 0 })
}

// ── Grasp judge ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspJudgeConfig {
    /// Maximum gripper opening (meters).
    pub max_opening: f64,
    pub pos_tolerance: f64,
    pub ang_tolerance: f64,
    /// Approach-cone half angle around world −z (radians).
    pub approach_cone: f64,
    pub finger_length: f64,
}

impl Default for GraspJudgeConfig {
    fn default() -> Self {
        GraspJudgeConfig {
            max_opening: 0.140,
            pos_tolerance: 0.02,
            ang_tolerance: 0.26,
            approach_cone: 45.0_f64.to_radians(),
            finger_length: 0.05,
        }
    }
}

impl GraspJudgeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_opening <= 0.0
            || self.pos_tolerance <= 0.0
            || self.ang_tolerance <= 0.0
            || self.approach_cone <= 0.0
            || self.finger_length <= 0.0
        {
            return Err(EnvError::BadSpec("judge tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureReason {
    Miss,
    TooWide,
    Collision,
    FilteredEmpty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub pose: Option<Pose>,
    pub reason: Option<FailureReason>,
    /// Index of the judged target object on success.
    pub object: Option<usize>,
}

impl EpisodeResult {
    fn failure(pose: Option<Pose>, reason: FailureReason) -> Self {
        EpisodeResult { success: false, pose, reason: Some(reason), object: None }
    }
}

fn segment_hits_box(a: [f64; 3], b: [f64; 3], prim: &ScenePrimitive) -> bool {
    // Slab test in the box's local frame.
    let (s, c) = prim.yaw.sin_cos();
    let to_local = |p: [f64; 3]| -> [f64; 3] {
        let rx = p[0] - prim.center[0];
        let ry = p[1] - prim.center[1];
        let rz = p[2] - prim.center[2];
        [c * rx + s * ry, -s * rx + c * ry, rz]
    };
    let la = to_local(a);
    let lb = to_local(b);
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for i in 0..3 {
        let d = lb[i] - la[i];
        let h = prim.half_extents[i];
        if d.abs() < 1e-12 {
            if la[i].abs() > h {
                return false;
            }
            continue;
        }
        let mut ta = (-h - la[i]) / d;
        let mut tb = (h - la[i]) / d;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Success requires a downward approach within the cone, the TCP near an
/// object's vertical grasp axis, a principal horizontal axis of that object
/// aligned with the closing axis whose spanned width fits the opening, and
/// finger segments clear of every other object.
pub fn judge_grasp(pose: &Pose, scene: &Scene, cfg: &GraspJudgeConfig) -> EpisodeResult {
    let approach = pose.approach_axis();
    if -approach[2] < cfg.approach_cone.cos() {
        return EpisodeResult::failure(Some(*pose), FailureReason::Miss);
    }
    let p = pose.position();
    // Nearest object by distance to the vertical axis segment from center
    // height to the top face.
    let mut best: Option<(usize, f64)> = None;
    for (i, prim) in scene.primitives.iter().enumerate() {
        let dx = p[0] - prim.center[0];
        let dy = p[1] - prim.center[1];
        let z_lo = prim.center[2];
        let z_hi = prim.center[2] + prim.half_extents[2];
        let dz = if p[2] < z_lo {
            z_lo - p[2]
        } else if p[2] > z_hi {
            p[2] - z_hi
        } else {
            0.0
        };
        let d = (dx * dx + dy * dy + dz * dz).sqrt();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (target, dist) = best.expect("scene has primitives");
    if dist > cfg.pos_tolerance {
        return EpisodeResult::failure(Some(*pose), FailureReason::Miss);
    }
    let prim = &scene.primitives[target];

    let closing = pose.closing_axis();
    let ch_norm = (closing[0] * closing[0] + closing[1] * closing[1]).sqrt();
    if ch_norm < 1e-6 {
        return EpisodeResult::failure(Some(*pose), FailureReason::Miss);
    }
    let ch = [closing[0] / ch_norm, closing[1] / ch_norm];
    let (s, c) = prim.yaw.sin_cos();
    let a1 = [c, s];
    let a2 = [-s, c];
    let dot1 = (ch[0] * a1[0] + ch[1] * a1[1]).abs().clamp(0.0, 1.0);
    let dot2 = (ch[0] * a2[0] + ch[1] * a2[1]).abs().clamp(0.0, 1.0);
    let span = 2.0 * (prim.half_extents[0] * dot1 + prim.half_extents[1] * dot2);
    if span >= cfg.max_opening {
        return EpisodeResult::failure(Some(*pose), FailureReason::TooWide);
    }
    let angle1 = dot1.acos();
    let angle2 = dot2.acos();
    if angle1.min(angle2) > cfg.ang_tolerance {
        return EpisodeResult::failure(Some(*pose), FailureReason::Miss);
    }

    // Finger segments from the TCP plane along the approach axis.
    let half = 0.5 * cfg.max_opening;
    for sign in [-1.0, 1.0] {
        let base = [
            p[0] + sign * half * closing[0],
            p[1] + sign * half * closing[1],
            p[2] + sign * half * closing[2],
        ];
        let tip = [
            base[0] + cfg.finger_length * approach[0],
            base[1] + cfg.finger_length * approach[1],
            base[2] + cfg.finger_length * approach[2],
        ];
        for (i, other) in scene.primitives.iter().enumerate() {
            if i == target {
                continue;
            }
            if segment_hits_box(base, tip, other) {
                return EpisodeResult::failure(Some(*pose), FailureReason::Collision);
            }
        }
    }
    EpisodeResult { success: true, pose: Some(*pose), reason: None, object: Some(target) }
}

// ── Evaluation harness ───────────────────────────────────────────────

/// What drives grasp selection during evaluation.
pub enum PolicyUnderTest<'a> {
    Learned {
        model: &'a ValueModel,
        sched: OptSchedule,
        downward_half_angle: Option<f64>,
    },
    /// Scene-state oracle; the judge-consistency reference.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub policy: String,
    pub episodes: usize,
    pub per_repeat: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    fn from_rates(task: String, policy: String, episodes: usize, per_repeat: Vec<f64>) -> Self {
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let std = if per_repeat.len() > 1 {
            (per_repeat.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalReport { task, policy, episodes, per_repeat, mean, std }
    }
}

/// Attempts allowed per clutter scene.
pub const CLUTTER_ATTEMPTS: usize = 10;

fn run_episode(
    policy: &PolicyUnderTest,
    task: &TaskSpec,
    judge: &GraspJudgeConfig,
    scene_seed: u64,
    policy_seed: u64,
) -> Result<f64, EnvError> {
    let mut scene_rng = stream_rng(scene_seed, 0);
    let scene = generate_scene(task, &mut scene_rng)?;
    match task.kind {
        TaskKind::Simple => {
            let result = attempt(policy, &scene, judge, policy_seed)?;
            Ok(if result.success { 1.0 } else { 0.0 })
        }
        TaskKind::Clutter => {
            let initial = scene.primitives.len();
            let mut current = scene;
            let mut removed = 0usize;
            for attempt_idx in 0..CLUTTER_ATTEMPTS {
                let result =
                    attempt(policy, &current, judge, derive_seed(policy_seed, attempt_idx as u64))?;
                if let (true, Some(obj)) = (result.success, result.object) {
                    removed += 1;
                    if current.primitives.len() == 1 {
                        break;
                    }
                    let mut prims = current.primitives.clone();
                    prims.remove(obj);
                    current = Scene::new(prims, current.workspace)?;
                }
            }
            Ok(removed as f64 / initial as f64)
        }
    }
}

fn attempt(
    policy: &PolicyUnderTest,
    scene: &Scene,
    judge: &GraspJudgeConfig,
    seed: u64,
) -> Result<EpisodeResult, EnvError> {
    match policy {
        PolicyUnderTest::Learned { model, sched, downward_half_angle } => {
            let result = infer(model, scene, sched, seed, *downward_half_angle)?;
            match result.best {
                None => Ok(EpisodeResult::failure(None, FailureReason::FilteredEmpty)),
                Some((pose, _)) => Ok(judge_grasp(&pose, scene, judge)),
            }
        }
        PolicyUnderTest::Oracle => {
            let mut rng = stream_rng(seed, 1);
            let demo = oracle_demo(scene, judge.max_opening, &mut rng)?;
            let pose = Pose::Q(demo.grasp_pose);
            Ok(judge_grasp(&pose, scene, judge))
        }
    }
}

/// Success rates over `episodes` fresh scenes, repeated with fresh policy
/// seeds; episodes run in parallel with per-episode seed streams.
pub fn run_eval(
    policy: &PolicyUnderTest,
    policy_name: &str,
    task: &TaskSpec,
    judge: &GraspJudgeConfig,
    episodes: usize,
    repeats: usize,
    policy_master_seed: u64,
) -> Result<EvalReport, EnvError> {
    if episodes == 0 || repeats == 0 {
        return Err(EnvError::ZeroEpisodes);
    }
    judge.validate()?;
    task.validate()?;
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let repeat_seed = derive_seed(policy_master_seed, r as u64);
        let scores: Result<Vec<f64>, EnvError> = (0..episodes)
            .into_par_iter()
            .map(|e| {
                run_episode(
                    policy,
                    task,
                    judge,
                    derive_seed(task.seed, e as u64),
                    derive_seed(repeat_seed, e as u64),
                )
            })
            .collect();
        let scores = scores?;
        per_repeat.push(scores.iter().sum::<f64>() / episodes as f64);
    }
    Ok(EvalReport::from_rates(
        task.kind.as_str().to_string(),
        policy_name.to_string(),
        episodes,
        per_repeat,
    ))
}

/// CSV rows (task, policy, repeat, success_rate) plus one summary row with
/// mean and standard deviation.
pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<(), EnvError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "task,policy,repeat,success_rate")?;
    for report in reports {
        for (r, rate) in report.per_repeat.iter().enumerate() {
            writeln!(w, "{},{},{},{}", report.task, report.policy, r, rate)?;
        }
        writeln!(w, "{},{},summary,{} ± {}", report.task, report.policy, report.mean, report.std)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Representation;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn simple_scene_respects_clearance_and_seed() {
        let spec = TaskSpec { objects_min: 5, ..TaskSpec::simple(3) };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = generate_scene(&spec, &mut r1).unwrap();
        let b = generate_scene(&spec, &mut r2).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.primitives.iter().enumerate() {
            for q in &a.primitives[i + 1..] {
                let dx = p.center[0] - q.center[0];
                let dy = p.center[1] - q.center[1];
                assert!((dx * dx + dy * dy).sqrt() >= spec.clearance);
            }
        }
    }

    #[test]
    fn clutter_scene_has_no_interpenetration() {
        // Monte Carlo point-in-both-boxes check, independent of the SAT used
        // by the generator.
        let spec = TaskSpec::clutter(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let scene = generate_scene(&spec, &mut rng).unwrap();
            let inside = |p: [f64; 2], prim: &ScenePrimitive| -> bool {
                let (s, c) = prim.yaw.sin_cos();
                let rx = p[0] - prim.center[0];
                let ry = p[1] - prim.center[1];
                let lx = c * rx + s * ry;
                let ly = -s * rx + c * ry;
                lx.abs() <= prim.half_extents[0] && ly.abs() <= prim.half_extents[1]
            };
            let mut mc = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..4000 {
                let p = [mc.random_range(-0.3..0.3), mc.random_range(-0.3..0.3)];
                let hits = scene.primitives.iter().filter(|prim| inside(p, prim)).count();
                assert!(hits <= 1, "point {p:?} inside {hits} boxes");
            }
        }
    }

    #[test]
    fn impossible_clearance_hits_placement_cap() {
        let spec = TaskSpec { clearance: 5.0, objects_min: 4, ..TaskSpec::simple(0) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(generate_scene(&spec, &mut rng), Err(EnvError::PlacementCap(_))));
    }

    #[test]
    fn oracle_grasps_across_shorter_extent() {
        let prim = ScenePrimitive::new([0.0, 0.0, 0.03], [0.02, 0.04, 0.03], 0.7, "red").unwrap();
        let grasp = oracle_grasp_pose(&prim);
        let pose = Pose::Q(grasp);
        let closing = pose.closing_axis();
        // Shorter extent is x, so the closing axis aligns with the box local
        // x axis (world angle = yaw).
        let expected = [0.7_f64.cos(), 0.7_f64.sin()];
        let dot = (closing[0] * expected[0] + closing[1] * expected[1]).abs();
        assert!(dot > 1.0 - 1e-9, "closing axis misaligned: {closing:?}");
        let approach = pose.approach_axis();
        assert!((approach[2] + 1.0).abs() < 1e-12, "approach must point down");
    }

    #[test]
    fn oracle_trajectory_ends_at_grasp_with_valid_waypoints() {
        let spec = TaskSpec::simple(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = generate_scene(&spec, &mut rng).unwrap();
        let demo = oracle_demo(&scene, 0.140, &mut rng).unwrap();
        assert_eq!(demo.trajectory.len(), TRAJECTORY_LEN);
        demo.validate().unwrap();
        for wp in &demo.trajectory {
            assert!(Pose::Q(*wp).is_valid(1e-9));
        }
        let first = &demo.trajectory[0];
        assert!((first.position[2] - demo.grasp_pose.position[2] - HOVER_HEIGHT).abs() < 1e-12);
    }

    #[test]
    fn oracle_errors_when_nothing_fits() {
        let ws = Aabb::new([-0.5, -0.5, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let big = ScenePrimitive::new([0.0, 0.0, 0.1], [0.2, 0.2, 0.1], 0.0, "red").unwrap();
        let scene = Scene::new(vec![big], ws).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(oracle_demo(&scene, 0.140, &mut rng), Err(EnvError::NoGraspableObject)));
    }

    fn single_box_scene(half: [f64; 3]) -> Scene {
        Scene::new(
            vec![ScenePrimitive::new([0.0, 0.0, half[2]], half, 0.0, "red").unwrap()],
            Aabb::new([-0.5, -0.5, 0.0], [0.5, 0.5, 0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn judge_accepts_centered_aligned_grasp() {
        let scene = single_box_scene([0.02, 0.03, 0.03]);
        let pose = Pose::Q(oracle_grasp_pose(&scene.primitives[0]));
        let result = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        assert!(result.success, "{result:?}");
        assert_eq!(result.object, Some(0));
    }

    #[test]
    fn judge_rejects_too_wide_objects() {
        let scene = single_box_scene([0.10, 0.11, 0.04]);
        let pose = Pose::Q(oracle_grasp_pose(&scene.primitives[0]));
        let result = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        assert!(!result.success);
        assert_eq!(result.reason, Some(FailureReason::TooWide));
    }

    #[test]
    fn judge_rejects_distant_poses_as_miss() {
        let scene = single_box_scene([0.02, 0.03, 0.03]);
        let mut grasp = oracle_grasp_pose(&scene.primitives[0]);
        grasp.position[0] += 0.10;
        let result = judge_grasp(&Pose::Q(grasp), &scene, &GraspJudgeConfig::default());
        assert!(!result.success);
        assert_eq!(result.reason, Some(FailureReason::Miss));
    }

    #[test]
    fn judge_rejects_sideways_approach() {
        let scene = single_box_scene([0.02, 0.03, 0.03]);
        let pose = Pose::from_parts(
            Representation::Quat,
            [0.0, 0.0, 0.045],
            Quat::from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap(),
        );
        let result = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        assert!(!result.success);
        assert_eq!(result.reason, Some(FailureReason::Miss));
    }

    #[test]
    fn judge_detects_finger_collisions() {
        // Second box within finger reach of the target's grasp.
        let ws = Aabb::new([-0.5, -0.5, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let target = ScenePrimitive::new([0.0, 0.0, 0.03], [0.02, 0.03, 0.03], 0.0, "red").unwrap();
        let blocker =
            ScenePrimitive::new([0.07, 0.0, 0.04], [0.025, 0.025, 0.04], 0.0, "blue").unwrap();
        let scene = Scene::new(vec![target, blocker], ws).unwrap();
        let pose = Pose::Q(oracle_grasp_pose(&scene.primitives[0]));
        let result = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        assert!(!result.success);
        assert_eq!(result.reason, Some(FailureReason::Collision));
    }

    #[test]
    fn oracle_demos_always_pass_the_judge() {
        // Oracle–judge consistency over 1000 seeded simple scenes.
        let judge = GraspJudgeConfig::default();
        for seed in 0..1000u64 {
            let spec = TaskSpec::simple(seed);
            let mut rng = stream_rng(seed, 0);
            let scene = generate_scene(&spec, &mut rng).unwrap();
            let demo = oracle_demo(&scene, judge.max_opening, &mut rng).unwrap();
            let result = judge_grasp(&Pose::Q(demo.grasp_pose), &scene, &judge);
            assert!(result.success, "seed {seed}: {:?}", result.reason);
        }
    }

    #[test]
    fn judge_is_deterministic() {
        let scene = single_box_scene([0.02, 0.03, 0.03]);
        let pose = Pose::Q(oracle_grasp_pose(&scene.primitives[0]));
        let a = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        let b = judge_grasp(&pose, &scene, &GraspJudgeConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_as_policy_scores_perfectly_on_simple() {
        let task = TaskSpec::simple(11);
        let report = run_eval(
            &PolicyUnderTest::Oracle,
            "oracle",
            &task,
            &GraspJudgeConfig::default(),
            40,
            2,
            0,
        )
        .unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn eval_rejects_zero_episodes_and_is_reproducible() {
        let task = TaskSpec::simple(1);
        let judge = GraspJudgeConfig::default();
        assert!(matches!(
            run_eval(&PolicyUnderTest::Oracle, "oracle", &task, &judge, 0, 1, 0),
            Err(EnvError::ZeroEpisodes)
        ));
        let a = run_eval(&PolicyUnderTest::Oracle, "oracle", &task, &judge, 10, 2, 3).unwrap();
        let b = run_eval(&PolicyUnderTest::Oracle, "oracle", &task, &judge, 10, 2, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clutter_eval_counts_each_object_once() {
        // The oracle removes one object per attempt, so a clutter episode
        // with 5 objects and 10 attempts scores exactly 1.0.
        let task = TaskSpec::clutter(13);
        let report = run_eval(
            &PolicyUnderTest::Oracle,
            "oracle",
            &task,
            &GraspJudgeConfig::default(),
            10,
            1,
            0,
        )
        .unwrap();
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn report_csv_shape() {
        let report = EvalReport::from_rates("simple".into(), "test".into(), 4, vec![0.5, 0.75]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&[report], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,policy,repeat,success_rate");
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[3].contains("summary"));
    }
}
