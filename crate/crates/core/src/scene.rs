//! Differentiable scene field: maps support poses in a synthetic box scene to
//! feature vectors, C¹ in the pose to order two.
//!
//! The analytic mode blends per-box smoothed signed distances with a
//! log-sum-exp smooth minimum; the spatial gradient that feeds the alignment
//! feature is emitted as closed-form graph nodes rather than through a nested
//! gradient pass, which keeps training within the depth-two budget. The
//! learned mode is a small frozen ELU trunk whose tapped block activations
//! form the feature vector, pre-trained to regress the analytic features.

use crate::autodiff::{Bindings, Graph, NodeId, Shape, Tensor};
use crate::nn::{
    block_nodes, init_block, init_dense, AdamConfig, AdamState, Activation, DenseLayer,
    ParamMode, ParamNodes, ResNetBlock,
};
use crate::pose::{posenc_nodes, PosEncConfig, SupportPose};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the smoothed |x| used inside the box distance; keeps the
/// field C² enough for finite-difference checks at h ≈ 1e−5.
const ABS_SMOOTHING: f64 = 1e-3;
const NORM_GUARD: f64 = 1e-9;
/// Primitive parameter slots in the learned field's scene descriptor.
const DESCRIPTOR_BOXES: usize = 5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene needs at least one primitive")]
    EmptyScene,
    #[error("primitive {index} extends outside the workspace")]
    OutsideWorkspace { index: usize },
    #[error("half-extents must be positive")]
    NonPositiveExtent,
    #[error("workspace bounds are degenerate")]
    DegenerateWorkspace,
    #[error("pre-training diverged (non-finite loss at step {step})")]
    Diverged { step: usize },
    #[error("field weights are frozen")]
    Frozen,
}

// ── Geometry ─────────────────────────────────────────────────────────

/// Axis-aligned box, used for workspace bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, SceneError> {
        if (0..3).any(|i| min[i] >= max[i]) {
            return Err(SceneError::DegenerateWorkspace);
        }
        Ok(Aabb { min, max })
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.random_range(self.min[0]..self.max[0]),
            rng.random_range(self.min[1]..self.max[1]),
            rng.random_range(self.min[2]..self.max[2]),
        ]
    }

    pub fn translated(&self, t: [f64; 3]) -> Aabb {
        Aabb {
            min: [self.min[0] + t[0], self.min[1] + t[1], self.min[2] + t[2]],
            max: [self.max[0] + t[0], self.max[1] + t[1], self.max[2] + t[2]],
        }
    }
}

/// Upright box primitive with a yaw about world z. The color tag is metadata
/// only; the field never reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
    pub color: String,
}

impl ScenePrimitive {
    pub fn new(
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
        color: impl Into<String>,
    ) -> Result<Self, SceneError> {
        if half_extents.iter().any(|&h| h <= 0.0) {
            return Err(SceneError::NonPositiveExtent);
        }
        Ok(ScenePrimitive { center, half_extents, yaw, color: color.into() })
    }

    /// Loose enclosing radius in the xy plane.
    pub fn xy_radius(&self) -> f64 {
        (self.half_extents[0] * self.half_extents[0]
            + self.half_extents[1] * self.half_extents[1])
            .sqrt()
    }

    pub fn translated(&self, t: [f64; 3]) -> ScenePrimitive {
        ScenePrimitive {
            center: [self.center[0] + t[0], self.center[1] + t[1], self.center[2] + t[2]],
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub workspace: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<ScenePrimitive>, workspace: Aabb) -> Result<Self, SceneError> {
        if primitives.is_empty() {
            return Err(SceneError::EmptyScene);
        }
        for (index, p) in primitives.iter().enumerate() {
            let r = p.xy_radius();
            let inside = p.center[0] - r >= workspace.min[0] - 1e-9
                && p.center[0] + r <= workspace.max[0] + 1e-9
                && p.center[1] - r >= workspace.min[1] - 1e-9
                && p.center[1] + r <= workspace.max[1] + 1e-9
                && p.center[2] - p.half_extents[2] >= workspace.min[2] - 1e-9
                && p.center[2] + p.half_extents[2] <= workspace.max[2] + 1e-9;
            if !inside {
                return Err(SceneError::OutsideWorkspace { index });
            }
        }
        Ok(Scene { primitives, workspace })
    }

    pub fn translated(&self, t: [f64; 3]) -> Scene {
        Scene {
            primitives: self.primitives.iter().map(|p| p.translated(t)).collect(),
            workspace: self.workspace.translated(t),
        }
    }
}

// ── Smooth minimum ───────────────────────────────────────────────────

/// −τ·ln Σ exp(−vᵢ/τ); C^∞ and at most τ·ln(K) below the true minimum.
pub fn smooth_min(values: &[f64], tau: f64) -> f64 {
    assert!(tau > 0.0, "smooth_min: τ must be positive");
    assert!(!values.is_empty(), "smooth_min: empty input");
    let m = values.iter().map(|&v| -v / tau).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|&v| (-v / tau - m).exp()).sum();
    -tau * (m + s.ln())
}

// ── Field configuration ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFieldConfig {
    /// Smooth-min temperature across primitives (meters).
    pub tau: f64,
    /// Softplus sharpness of the box-corner smoothing.
    pub corner_beta: f64,
    /// Width of the smoothed occupancy transition (meters).
    pub occupancy_width: f64,
    pub enc_pos: PosEncConfig,
    pub enc_dir: PosEncConfig,
}

impl Default for AnalyticFieldConfig {
    fn default() -> Self {
        AnalyticFieldConfig {
            tau: 0.02,
            corner_beta: 100.0,
            occupancy_width: 0.01,
            enc_pos: PosEncConfig::new(6).expect("nonzero"),
            enc_dir: PosEncConfig::new(4).expect("nonzero"),
        }
    }
}

impl AnalyticFieldConfig {
    pub fn feature_dim(&self) -> usize {
        3 + self.enc_pos.output_len(3) + self.enc_dir.output_len(3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedFieldConfig {
    pub width: usize,
    pub blocks: usize,
    /// How many trailing block activations form the exposed feature vector.
    pub taps: usize,
    pub enc_pos: PosEncConfig,
    pub enc_dir: PosEncConfig,
    pub lr: f64,
    pub batch: usize,
}

impl Default for LearnedFieldConfig {
    fn default() -> Self {
        LearnedFieldConfig {
            width: 8,
            blocks: 5,
            taps: 4,
            enc_pos: PosEncConfig::new(6).expect("nonzero"),
            enc_dir: PosEncConfig::new(4).expect("nonzero"),
            lr: 1e-3,
            batch: 64,
        }
    }
}

/// Frozen ELU trunk with tapped activations; regression head retained for
/// teacher-error reporting.
#[derive(Clone, Debug)]
pub struct LearnedField {
    cfg: LearnedFieldConfig,
    trunk: Vec<ResNetBlock>,
    head: DenseLayer,
    frozen: bool,
}

impl LearnedField {
    fn input_dim(cfg: &LearnedFieldConfig) -> usize {
        cfg.enc_pos.output_len(3) + cfg.enc_dir.output_len(3) + DESCRIPTOR_BOXES * 7 + 1
    }

    fn init(cfg: LearnedFieldConfig, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(cfg.blocks);
        let mut dim = Self::input_dim(&cfg);
        for _ in 0..cfg.blocks {
            trunk.push(init_block(dim, cfg.width, Activation::Elu, &mut rng));
            dim = cfg.width;
        }
        let head = init_dense(cfg.taps * cfg.width, teacher_dim, Activation::Identity, &mut rng);
        LearnedField { cfg, trunk, head, frozen: false }
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.taps * self.cfg.width
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces trunk and head parameters; rejected once frozen.
    pub fn apply_update(
        &mut self,
        trunk: Vec<ResNetBlock>,
        head: DenseLayer,
    ) -> Result<(), SceneError> {
        if self.frozen {
            return Err(SceneError::Frozen);
        }
        self.trunk = trunk;
        self.head = head;
        Ok(())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.trunk.iter().enumerate() {
            out.push((format!("field.b{i}.l1.w"), &b.layer1.weights));
            out.push((format!("field.b{i}.l1.b"), &b.layer1.bias));
            out.push((format!("field.b{i}.l2.w"), &b.layer2.weights));
            out.push((format!("field.b{i}.l2.b"), &b.layer2.bias));
            if let Some(p) = &b.shortcut {
                out.push((format!("field.b{i}.proj"), p));
            }
        }
        out.push(("field.head.w".into(), &self.head.weights));
        out.push(("field.head.b".into(), &self.head.bias));
        out
    }

    /// Fixed-length primitive summary standing in for image conditioning.
    fn scene_descriptor(scene: &Scene) -> Vec<f64> {
        let mut out = Vec::with_capacity(DESCRIPTOR_BOXES * 7 + 1);
        for i in 0..DESCRIPTOR_BOXES {
            match scene.primitives.get(i) {
                Some(p) => {
                    let c = scene.workspace.center();
                    out.extend_from_slice(&[
                        p.center[0] - c[0],
                        p.center[1] - c[1],
                        p.center[2] - c[2],
                        p.half_extents[0],
                        p.half_extents[1],
                        p.half_extents[2],
                        p.yaw,
                    ]);
                }
                None => out.extend_from_slice(&[0.0; 7]),
            }
        }
        out.push(scene.primitives.len().min(DESCRIPTOR_BOXES) as f64);
        out
    }

    /// Trunk input, trunk taps (exposed features), and regression head.
    fn build(
        &self,
        g: &mut Graph,
        scene: &Scene,
        point: [NodeId; 3],
        dir: [NodeId; 3],
        batch: usize,
        mode: ParamMode,
        params: &mut ParamNodes,
    ) -> (Vec<NodeId>, NodeId) {
        let center = scene.workspace.center();
        let rel = [
            g.add_const(point[0], -center[0]),
            g.add_const(point[1], -center[1]),
            g.add_const(point[2], -center[2]),
        ];
        let mut cols = posenc_nodes(g, &rel, &self.cfg.enc_pos);
        cols.extend(posenc_nodes(g, &dir, &self.cfg.enc_dir));
        for v in Self::scene_descriptor(scene) {
            cols.push(g.constant(Tensor::filled(Shape::Vector(batch), v)));
        }
        let mut h = g.concat_cols(&cols);
        let mut taps = Vec::new();
        for (i, block) in self.trunk.iter().enumerate() {
            h = block_nodes(g, params, mode, &format!("field.b{i}"), block, h);
            taps.push(h);
        }
        let tap_slice = &taps[taps.len() - self.cfg.taps..];
        let mut feature_cols = Vec::with_capacity(self.feature_dim());
        for &t in tap_slice {
            for j in 0..self.cfg.width {
                feature_cols.push(g.column(t, j));
            }
        }
        let tap_mat = g.concat_cols(&feature_cols);
        let pred = crate::nn::dense_nodes(g, params, mode, "field.head", &self.head, tap_mat);
        (feature_cols, pred)
    }
}

/// The scene field Φ: frozen, pose-differentiable feature provider.
#[derive(Clone, Debug)]
pub enum SceneField {
    Analytic(AnalyticFieldConfig),
    Learned(LearnedField),
}

impl SceneField {
    pub fn analytic(cfg: AnalyticFieldConfig) -> Self {
        SceneField::Analytic(cfg)
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            SceneField::Analytic(cfg) => cfg.feature_dim(),
            SceneField::Learned(f) => f.feature_dim(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            SceneField::Analytic(_) => true,
            SceneField::Learned(f) => f.is_frozen(),
        }
    }

    /// Learned-field parameters (empty for the analytic mode); used to assert
    /// the frozen contract around training.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            SceneField::Analytic(_) => Vec::new(),
            SceneField::Learned(f) => f.params(),
        }
    }

    /// Feature columns (each a batch vector) for batched support-pose point
    /// and direction components. Differentiable to order two in both.
    pub fn feature_cols(
        &self,
        g: &mut Graph,
        scene: &Scene,
        point: [NodeId; 3],
        dir: [NodeId; 3],
        batch: usize,
    ) -> Vec<NodeId> {
        match self {
            SceneField::Analytic(cfg) => analytic_feature_cols(g, cfg, scene, point, dir),
            SceneField::Learned(f) => {
                let mut params = ParamNodes::default();
                let (cols, _) =
                    f.build(g, scene, point, dir, batch, ParamMode::Constants, &mut params);
                cols
            }
        }
    }

    /// Single support-pose feature vector (numeric convenience over the graph
    /// builder).
    pub fn features(&self, sp: &SupportPose, scene: &Scene) -> Vec<f64> {
        let mut g = Graph::new();
        let probe = g.leaf("probe", Shape::Matrix(1, 6));
        let point = [g.column(probe, 0), g.column(probe, 1), g.column(probe, 2)];
        let dir = [g.column(probe, 3), g.column(probe, 4), g.column(probe, 5)];
        let cols = self.feature_cols(&mut g, scene, point, dir, 1);
        let mut b = Bindings::new();
        let mut row = sp.point.to_vec();
        row.extend_from_slice(&sp.direction);
        b.bind(probe, Tensor::matrix(1, 6, row));
        g.evaluate(&b, &cols).expect("field features").iter().map(|t| t.at(0)).collect()
    }
}

// ── Analytic features ────────────────────────────────────────────────

struct BoxNodes {
    distance: NodeId,
    gradient: [NodeId; 3],
}

/// Smoothed signed distance to one yawed box and its closed-form spatial
/// gradient, batched over rows.
fn box_distance_nodes(
    g: &mut Graph,
    cfg: &AnalyticFieldConfig,
    prim: &ScenePrimitive,
    point: [NodeId; 3],
) -> BoxNodes {
    let beta = cfg.corner_beta;
    let (sin_yaw, cos_yaw) = prim.yaw.sin_cos();
    let rx = g.add_const(point[0], -prim.center[0]);
    let ry = g.add_const(point[1], -prim.center[1]);
    let rz = g.add_const(point[2], -prim.center[2]);
    // Local frame: rotate by −yaw about z.
    let lx_a = g.scale(rx, cos_yaw);
    let lx_b = g.scale(ry, sin_yaw);
    let lx = g.add(lx_a, lx_b);
    let ly_a = g.scale(rx, -sin_yaw);
    let ly_b = g.scale(ry, cos_yaw);
    let ly = g.add(ly_a, ly_b);
    let local = [lx, ly, rz];

    let mut q = [lx; 3];
    let mut v = [lx; 3];
    let mut sig = [lx; 3];
    let mut ratio = [lx; 3];
    for i in 0..3 {
        let sq = g.mul(local[i], local[i]);
        let sq_eps = g.add_const(sq, ABS_SMOOTHING * ABS_SMOOTHING);
        let r = g.sqrt(sq_eps);
        q[i] = g.add_const(r, -prim.half_extents[i]);
        v[i] = g.softplus(q[i], beta);
        let bq = g.scale(q[i], beta);
        sig[i] = g.sigmoid(bq);
        ratio[i] = g.div(local[i], r);
    }

    // Outside part: ε-guarded norm of the softplus-clamped excess.
    let v0 = g.mul(v[0], v[0]);
    let v1 = g.mul(v[1], v[1]);
    let v2 = g.mul(v[2], v[2]);
    let vs = g.add(v0, v1);
    let vs2 = g.add(vs, v2);
    let vs2_eps = g.add_const(vs2, NORM_GUARD * NORM_GUARD);
    let outside = g.sqrt(vs2_eps);

    // Inside part: smooth max over q, clamped to negative values.
    let bq0 = g.scale(q[0], beta);
    let bq1 = g.scale(q[1], beta);
    let bq2 = g.scale(q[2], beta);
    let l01 = g.lse_pair(bq0, bq1);
    let l012 = g.lse_pair(l01, bq2);
    let m = g.scale(l012, 1.0 / beta);
    let neg_m = g.neg(m);
    let sp_neg_m = g.softplus(neg_m, beta);
    let inside = g.neg(sp_neg_m);
    let distance = g.add(outside, inside);

    // ∂d/∂lᵢ = (lᵢ/rᵢ)·[ vᵢσ(βqᵢ)/‖v‖ + σ(−βm)·softmaxᵢ ]
    let neg_bm = g.scale(m, -beta);
    let sig_inside = g.sigmoid(neg_bm);
    let mut glocal = [lx; 3];
    for i in 0..3 {
        let vnum = g.mul(v[i], sig[i]);
        let outside_term = g.div(vnum, outside);
        let qm = g.sub(q[i], m);
        let bqm = g.scale(qm, beta);
        let softmax = g.exp(bqm);
        let inside_term = g.mul(sig_inside, softmax);
        let bracket = g.add(outside_term, inside_term);
        glocal[i] = g.mul(ratio[i], bracket);
    }
    // Back to world frame: rotate by +yaw.
    let gx_a = g.scale(glocal[0], cos_yaw);
    let gx_b = g.scale(glocal[1], sin_yaw);
    let gx = g.sub(gx_a, gx_b);
    let gy_a = g.scale(glocal[0], sin_yaw);
    let gy_b = g.scale(glocal[1], cos_yaw);
    let gy = g.add(gy_a, gy_b);
    BoxNodes { distance, gradient: [gx, gy, glocal[2]] }
}

/// Feature columns: smooth scene distance, smoothed occupancy, directional
/// alignment with the distance gradient, then positional encodings of the
/// workspace-centered point and of the direction.
fn analytic_feature_cols(
    g: &mut Graph,
    cfg: &AnalyticFieldConfig,
    scene: &Scene,
    point: [NodeId; 3],
    dir: [NodeId; 3],
) -> Vec<NodeId> {
    let boxes: Vec<BoxNodes> =
        scene.primitives.iter().map(|p| box_distance_nodes(g, cfg, p, point)).collect();

    let (sd, grad) = if boxes.len() == 1 {
        (boxes[0].distance, boxes[0].gradient)
    } else {
        // Smooth minimum over primitives with matching softmax-weighted
        // gradient blend.
        let scaled: Vec<NodeId> =
            boxes.iter().map(|b| g.scale(b.distance, -1.0 / cfg.tau)).collect();
        let mut lse = scaled[0];
        for &s in &scaled[1..] {
            lse = g.lse_pair(lse, s);
        }
        let sd = g.scale(lse, -cfg.tau);
        let mut grad = [sd; 3];
        let mut first = true;
        for (b, &s) in boxes.iter().zip(&scaled) {
            let centered = g.sub(s, lse);
            let w = g.exp(centered);
            for j in 0..3 {
                let contrib = g.mul(w, b.gradient[j]);
                grad[j] = if first { contrib } else { g.add(grad[j], contrib) };
            }
            first = false;
        }
        (sd, grad)
    };

    let occ_arg = g.scale(sd, -1.0 / cfg.occupancy_width);
    let occupancy = g.sigmoid(occ_arg);
    let ga = g.mul(dir[0], grad[0]);
    let gb = g.mul(dir[1], grad[1]);
    let gc = g.mul(dir[2], grad[2]);
    let gab = g.add(ga, gb);
    let align = g.add(gab, gc);

    let center = scene.workspace.center();
    let rel = [
        g.add_const(point[0], -center[0]),
        g.add_const(point[1], -center[1]),
        g.add_const(point[2], -center[2]),
    ];
    let mut cols = vec![sd, occupancy, align];
    cols.extend(posenc_nodes(g, &rel, &cfg.enc_pos));
    cols.extend(posenc_nodes(g, &dir, &cfg.enc_dir));
    cols
}

// ── Learned-field pre-training ───────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PretrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: usize,
}

fn sample_probe(rng: &mut ChaCha8Rng, ws: &Aabb) -> [f64; 6] {
    let p = ws.sample(rng);
    let q = crate::pose::Quat::uniform(rng);
    let d = q.rotate([0.0, 0.0, 1.0]);
    [p[0], p[1], p[2], d[0], d[1], d[2]]
}

/// Distills the analytic field into a small ELU trunk over `scenes`, then
/// freezes the weights. Reports mean squared error of the regression head on
/// held-out probes before and after.
pub fn pretrain_learned_field(
    scenes: &[Scene],
    steps: usize,
    cfg: LearnedFieldConfig,
    teacher: &AnalyticFieldConfig,
    seed: u64,
) -> Result<(SceneField, PretrainReport), SceneError> {
    assert!(!scenes.is_empty(), "pretraining needs scenes");
    let teacher_field = SceneField::Analytic(teacher.clone());
    let mut field = LearnedField::init(cfg.clone(), teacher.feature_dim(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f3c);

    // Reusable per-scene graphs: teacher features and student loss.
    struct SceneGraphs {
        teacher_graph: Graph,
        teacher_probe: NodeId,
        teacher_cols: Vec<NodeId>,
        student_graph: Graph,
        student_probe: NodeId,
        student_target: NodeId,
        student_loss: NodeId,
        student_params: ParamNodes,
        student_grads: Vec<NodeId>,
    }

    let batch = cfg.batch;
    let build = |field: &LearnedField, scene: &Scene| -> SceneGraphs {
        let mut tg = Graph::new();
        let tp = tg.leaf("probe", Shape::Matrix(batch, 6));
        let tpoint = [tg.column(tp, 0), tg.column(tp, 1), tg.column(tp, 2)];
        let tdir = [tg.column(tp, 3), tg.column(tp, 4), tg.column(tp, 5)];
        let tcols = teacher_field.feature_cols(&mut tg, scene, tpoint, tdir, batch);

        let mut sg = Graph::new();
        let sp = sg.leaf("probe", Shape::Matrix(batch, 6));
        let spoint = [sg.column(sp, 0), sg.column(sp, 1), sg.column(sp, 2)];
        let sdir = [sg.column(sp, 3), sg.column(sp, 4), sg.column(sp, 5)];
        let mut params = ParamNodes::default();
        let (_, pred) =
            field.build(&mut sg, scene, spoint, sdir, batch, ParamMode::Leaves, &mut params);
        let target = sg.leaf("target", Shape::Matrix(batch, teacher.feature_dim()));
        let diff = sg.sub(pred, target);
        let sq = sg.mul(diff, diff);
        let loss = sg.mean(sq);
        let wrt = params.node_ids();
        let mut sg2 = sg;
        let grads = sg2.gradient_of(loss, &wrt, false).expect("field loss gradient");
        SceneGraphs {
            teacher_graph: tg,
            teacher_probe: tp,
            teacher_cols: tcols,
            student_graph: sg2,
            student_probe: sp,
            student_target: target,
            student_loss: loss,
            student_params: params,
            student_grads: grads,
        }
    };

    let graphs: Vec<SceneGraphs> = scenes.iter().map(|s| build(&field, s)).collect();

    let teacher_batch = |gs: &SceneGraphs, probes: &Tensor| -> Tensor {
        let mut b = Bindings::new();
        b.bind(gs.teacher_probe, probes.clone());
        let cols = gs.teacher_graph.evaluate(&b, &gs.teacher_cols).expect("teacher features");
        let mut data = vec![0.0; batch * cols.len()];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..batch {
                data[i * cols.len() + j] = col.at(i);
            }
        }
        Tensor::matrix(batch, cols.len(), data)
    };

    // Held-out probe set, one batch per scene.
    let held_out: Vec<(usize, Tensor, Tensor)> = scenes
        .iter()
        .enumerate()
        .map(|(si, scene)| {
            let mut rows = Vec::with_capacity(batch * 6);
            for _ in 0..batch {
                rows.extend_from_slice(&sample_probe(&mut rng, &scene.workspace));
            }
            let probes = Tensor::matrix(batch, 6, rows);
            let targets = teacher_batch(&graphs[si], &probes);
            (si, probes, targets)
        })
        .collect();

    let current_values = |field: &LearnedField| -> Vec<Tensor> {
        field.params().iter().map(|(_, t)| (*t).clone()).collect()
    };

    let eval_mse = |field_values: &[Tensor]| -> f64 {
        let mut total = 0.0;
        for (si, probes, targets) in &held_out {
            let gs = &graphs[*si];
            let mut b = Bindings::new();
            b.bind(gs.student_probe, probes.clone());
            b.bind(gs.student_target, targets.clone());
            for ((_, id), v) in gs.student_params.entries.iter().zip(field_values) {
                b.bind(*id, v.clone());
            }
            total += gs
                .student_graph
                .evaluate(&b, &[gs.student_loss])
                .expect("held-out loss")[0]
                .as_scalar();
        }
        total / held_out.len() as f64
    };

    let mut values = current_values(&field);
    let initial_mse = eval_mse(&values);
    let shapes: Vec<Shape> = values.iter().map(|t| t.shape()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &shapes);

    for step in 0..steps {
        let si = step % scenes.len();
        let gs = &graphs[si];
        let mut rows = Vec::with_capacity(batch * 6);
        for _ in 0..batch {
            rows.extend_from_slice(&sample_probe(&mut rng, &scenes[si].workspace));
        }
        let probes = Tensor::matrix(batch, 6, rows);
        let targets = teacher_batch(gs, &probes);
        let mut b = Bindings::new();
        b.bind(gs.student_probe, probes);
        b.bind(gs.student_target, targets);
        for ((_, id), v) in gs.student_params.entries.iter().zip(&values) {
            b.bind(*id, v.clone());
        }
        let mut outputs = vec![gs.student_loss];
        outputs.extend_from_slice(&gs.student_grads);
        let results = gs.student_graph.evaluate(&b, &outputs).expect("training step");
        let loss = results[0].as_scalar();
        if !loss.is_finite() {
            return Err(SceneError::Diverged { step });
        }
        let grads: Vec<Tensor> = results[1..].to_vec();
        adam.step(&mut values, &grads).map_err(|_| SceneError::Diverged { step })?;
    }

    // Write trained values back and freeze.
    {
        let mut iter = values.iter();
        let mut trunk = field.trunk.clone();
        for block in trunk.iter_mut() {
            block.layer1.weights = iter.next().unwrap().clone();
            block.layer1.bias = iter.next().unwrap().clone();
            block.layer2.weights = iter.next().unwrap().clone();
            block.layer2.bias = iter.next().unwrap().clone();
            if block.shortcut.is_some() {
                block.shortcut = Some(iter.next().unwrap().clone());
            }
        }
        let mut head = field.head.clone();
        head.weights = iter.next().unwrap().clone();
        head.bias = iter.next().unwrap().clone();
        assert!(iter.next().is_none(), "parameter count");
        field.apply_update(trunk, head)?;
    }
    let final_mse = eval_mse(&values);
    field.frozen = true;
    Ok((SceneField::Learned(field), PretrainReport { initial_mse, final_mse, steps }))
}
