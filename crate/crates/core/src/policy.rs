//! Grasp pose optimization: random candidate initialization, Adam-driven
//! ascent on the value landscape with per-step retraction, sequential or
//! synchronous schedules, downward filtering, and best-candidate selection.

use crate::autodiff::{Shape, Tensor};
use crate::nn::{AdamConfig, AdamState};
use crate::pose::{Pose, Quat, Representation};
use crate::scene::{Aabb, Scene};
use crate::seeds::stream_rng;
use crate::value::{ModelObjective, PoseObjective, ValueModel};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Moment constants for pose ascent. The short second-moment memory keeps
/// the step magnitude tracking the decaying gradient, which the fixed-budget
/// schedules need to settle; weight training keeps the usual 0.9/0.999.
const POSE_BETA1: f64 = 0.8;
const POSE_BETA2: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("bad schedule: {0}")]
    BadSchedule(&'static str),
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Position-only steps, then orientation-only steps.
    Sequential,
    /// Both groups updated every step.
    Synchronous,
}

impl ScheduleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" => Some(ScheduleMode::Sequential),
            "synchronous" => Some(ScheduleMode::Synchronous),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleMode::Sequential => "sequential",
            ScheduleMode::Synchronous => "synchronous",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptSchedule {
    pub mode: ScheduleMode,
    pub steps_pos: usize,
    pub steps_rot: usize,
    /// Per-step count in synchronous mode.
    pub steps: usize,
    pub lr_pos: f64,
    pub lr_rot: f64,
    pub decay_pos: f64,
    pub decay_rot: f64,
    pub candidates: usize,
}

impl Default for OptSchedule {
    fn default() -> Self {
        OptSchedule {
            mode: ScheduleMode::Sequential,
            steps_pos: 16,
            steps_rot: 16,
            steps: 32,
            lr_pos: 0.05,
            lr_rot: 0.05,
            decay_pos: 0.94,
            decay_rot: 0.94,
            candidates: 64,
        }
    }
}

impl OptSchedule {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let steps_ok = match self.mode {
            ScheduleMode::Sequential => self.steps_pos >= 1 && self.steps_rot >= 1,
            ScheduleMode::Synchronous => self.steps >= 1,
        };
        if !steps_ok {
            return Err(PolicyError::BadSchedule("step counts must be at least 1"));
        }
        if self.lr_pos <= 0.0 || self.lr_rot <= 0.0 {
            return Err(PolicyError::BadSchedule("learning rates must be positive"));
        }
        let decay_ok = |d: f64| d > 0.0 && d <= 1.0;
        if !decay_ok(self.decay_pos) || !decay_ok(self.decay_rot) {
            return Err(PolicyError::BadSchedule("decay rates must lie in (0, 1]"));
        }
        if self.candidates == 0 {
            return Err(PolicyError::BadSchedule("candidate count must be at least 1"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        match self.mode {
            ScheduleMode::Sequential => self.steps_pos + self.steps_rot,
            ScheduleMode::Synchronous => self.steps,
        }
    }
}

/// Outcome of one inference run: surviving candidates with final values,
/// per-step value traces, and the argmax pose.
#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub best: Option<(Pose, f64)>,
    pub candidates: Vec<(Pose, f64)>,
    /// traces[candidate][step]; includes the final evaluation.
    pub traces: Vec<Vec<f64>>,
    /// Set when downward filtering removed every candidate.
    pub filtered_empty: bool,
    pub warnings: Vec<String>,
}

impl InferenceResult {
    fn from_candidates(
        candidates: Vec<(Pose, f64)>,
        traces: Vec<Vec<f64>>,
        warnings: Vec<String>,
    ) -> Self {
        let best = candidates
            .iter()
            .cloned()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite values"));
        InferenceResult { best, candidates, traces, filtered_empty: false, warnings }
    }
}

/// K retracted poses with positions uniform in the workspace and uniform
/// random orientations.
pub fn random_candidates(
    workspace: &Aabb,
    k: usize,
    rep: Representation,
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    assert!(k >= 1, "candidate count must be at least 1");
    (0..k)
        .map(|_| Pose::from_parts(rep, workspace.sample(rng), Quat::uniform(rng)))
        .collect()
}

/// Adam ascent on the objective with retraction and workspace clamping after
/// every step ("post-process"). Candidates whose retraction degenerates are
/// re-seeded once, then dropped.
pub fn optimize_candidates(
    objective: &dyn PoseObjective,
    workspace: &Aabb,
    candidates: Vec<Pose>,
    sched: &OptSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<InferenceResult, PolicyError> {
    optimize_candidates_observed(objective, workspace, candidates, sched, rng, |_, _| {})
}

/// [`optimize_candidates`] with a per-step observer over the retracted
/// candidate poses, for invariant monitoring.
pub fn optimize_candidates_observed(
    objective: &dyn PoseObjective,
    workspace: &Aabb,
    candidates: Vec<Pose>,
    sched: &OptSchedule,
    rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(usize, &[Pose]),
) -> Result<InferenceResult, PolicyError> {
    sched.validate()?;
    if candidates.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let rep = objective.representation();
    let k = candidates.len();
    let dim = rep.dim();
    let rot_dim = dim - 3;

    let mut poses = candidates;
    let mut dead = vec![false; k];
    let mut reseeded = vec![false; k];
    let mut warnings = Vec::new();
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(sched.total_steps() + 1); k];

    let pos_shapes = vec![Shape::Vector(3); k];
    let rot_shapes = vec![Shape::Vector(rot_dim); k];
    let mut adam_pos = AdamState::new(
        AdamConfig {
            lr: sched.lr_pos,
            lr_decay: sched.decay_pos,
            beta1: POSE_BETA1,
            beta2: POSE_BETA2,
            ..Default::default()
        },
        &pos_shapes,
    );
    let mut adam_rot = AdamState::new(
        AdamConfig {
            lr: sched.lr_rot,
            lr_decay: sched.decay_rot,
            beta1: POSE_BETA1,
            beta2: POSE_BETA2,
            ..Default::default()
        },
        &rot_shapes,
    );

    let phases: Vec<(bool, bool, usize)> = match sched.mode {
        ScheduleMode::Sequential => {
            vec![(true, false, sched.steps_pos), (false, true, sched.steps_rot)]
        }
        ScheduleMode::Synchronous => vec![(true, true, sched.steps)],
    };

    let mut step_index = 0usize;
    for (update_pos, update_rot, steps) in phases {
        for _ in 0..steps {
            let (values, grads) = objective.values_and_grads(&poses);
            for (c, v) in values.iter().enumerate() {
                traces[c].push(*v);
            }
            // Ascent: Adam minimizes, so feed negated gradients.
            let mut pos_params: Vec<Tensor> =
                poses.iter().map(|p| Tensor::vector(p.as_vec()[..3].to_vec())).collect();
            let mut rot_params: Vec<Tensor> =
                poses.iter().map(|p| Tensor::vector(p.as_vec()[3..].to_vec())).collect();
            let pos_grads: Vec<Tensor> = grads
                .iter()
                .map(|g| Tensor::vector(g[..3].iter().map(|x| -x).collect()))
                .collect();
            let rot_grads: Vec<Tensor> = grads
                .iter()
                .map(|g| Tensor::vector(g[3..].iter().map(|x| -x).collect()))
                .collect();
            if update_pos {
                adam_pos
                    .step(&mut pos_params, &pos_grads)
                    .map_err(|_| PolicyError::BadSchedule("non-finite gradient"))?;
            }
            if update_rot {
                adam_rot
                    .step(&mut rot_params, &rot_grads)
                    .map_err(|_| PolicyError::BadSchedule("non-finite gradient"))?;
            }
            for c in 0..k {
                if dead[c] {
                    continue;
                }
                let mut v = pos_params[c].data().to_vec();
                v.extend_from_slice(rot_params[c].data());
                let updated = Pose::from_vec(rep, &v);
                match updated.retract() {
                    Ok(mut p) => {
                        p.set_position(workspace.clamp(p.position()));
                        poses[c] = p;
                    }
                    Err(_) if !reseeded[c] => {
                        reseeded[c] = true;
                        poses[c] =
                            Pose::from_parts(rep, workspace.sample(rng), Quat::uniform(rng));
                    }
                    Err(e) => {
                        dead[c] = true;
                        warnings.push(format!("candidate {c} dropped: {e}"));
                    }
                }
            }
            observer(step_index, &poses);
            step_index += 1;
        }
    }

    let final_values = objective.values(&poses);
    for (c, v) in final_values.iter().enumerate() {
        traces[c].push(*v);
    }
    let survivors: Vec<(Pose, f64)> = poses
        .into_iter()
        .zip(final_values)
        .zip(&dead)
        .filter(|(_, &d)| !d)
        .map(|((p, v), _)| (p, v))
        .collect();
    Ok(InferenceResult::from_candidates(survivors, traces, warnings))
}

/// Removes candidates whose approach axis deviates from world −z by more
/// than `half_angle` radians; flags the result when nothing survives.
pub fn filter_downward(result: InferenceResult, half_angle: f64) -> InferenceResult {
    let cos_limit = half_angle.cos();
    let kept: Vec<(Pose, f64)> = result
        .candidates
        .into_iter()
        .filter(|(p, _)| {
            let a = p.approach_axis();
            // dot(approach, (0,0,−1)) within the cone
            -a[2] >= cos_limit
        })
        .collect();
    if kept.is_empty() {
        return InferenceResult {
            best: None,
            candidates: Vec::new(),
            traces: result.traces,
            filtered_empty: true,
            warnings: result.warnings,
        };
    }
    let mut out = InferenceResult::from_candidates(kept, result.traces, result.warnings);
    out.filtered_empty = false;
    out
}

/// Random candidates → Adam ascent → optional downward filter → argmax.
pub fn infer_objective(
    objective: &dyn PoseObjective,
    workspace: &Aabb,
    sched: &OptSchedule,
    seed: u64,
    downward_half_angle: Option<f64>,
) -> Result<InferenceResult, PolicyError> {
    let mut rng = stream_rng(seed, 0);
    let candidates =
        random_candidates(workspace, sched.candidates, objective.representation(), &mut rng);
    let result = optimize_candidates(objective, workspace, candidates, sched, &mut rng)?;
    Ok(match downward_half_angle {
        Some(angle) => filter_downward(result, angle),
        None => result,
    })
}

/// Inference with a trained model on a scene.
pub fn infer(
    model: &ValueModel,
    scene: &Scene,
    sched: &OptSchedule,
    seed: u64,
    downward_half_angle: Option<f64>,
) -> Result<InferenceResult, PolicyError> {
    let objective = ModelObjective::new(model, scene);
    infer_objective(&objective, &scene.workspace, sched, seed, downward_half_angle)
}

/// Value traces as CSV rows (step, candidate id, value).
pub fn write_traces_csv(result: &InferenceResult, path: &Path) -> Result<(), PolicyError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,candidate,value")?;
    for (c, trace) in result.traces.iter().enumerate() {
        for (s, v) in trace.iter().enumerate() {
            writeln!(w, "{s},{c},{v}")?;
        }
    }
    w.flush()?;
    Ok(())
}
