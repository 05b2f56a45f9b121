//! Losses, negative and proximity sampling, and the training loop with
//! second-order weight updates.
//!
//! The value loss is a contrastive softmax over the demonstrated grasp
//! against random workspace poses. The auxiliary loss aligns ∇_pΨ at poses
//! near the demonstrated trajectory with the demonstrated displacement; its
//! weight gradient differentiates through the pose gradient, which is why
//! the value graph supports nested differentiation.

use crate::autodiff::{Bindings, Graph, GraphError, NodeId, Shape, Tensor};
use crate::nn::{AdamConfig, AdamState, Activation, NnError, ParamMode, ParamNodes};
use crate::pose::{ominus, part_cosine, Pose, PoseDelta, PoseError, PoseQ, Quat, Representation};
use crate::scene::{Aabb, Scene};
use crate::seeds::{derive_seed, stream_rng};
use crate::value::ValueModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const COSINE_EPS: f64 = 1e-12;
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one epoch")]
    ZeroEpochs,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("auxiliary loss requires ELU activations throughout the value model")]
    EluRequired,
    #[error("model representation {model:?} does not match config {config:?}")]
    RepresentationMismatch { model: Representation, config: Representation },
    #[error("non-finite loss at epoch {epoch}, demo {demo}")]
    NonFiniteLoss { epoch: usize, demo: usize },
    #[error("demonstration record invalid: {0}")]
    BadRecord(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset record has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

// ── Domain types ─────────────────────────────────────────────────────

/// One demonstration: scene, TCP waypoint trajectory, final grasp pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub scene: Scene,
    pub trajectory: Vec<PoseQ>,
    pub grasp_pose: PoseQ,
    pub seed: u64,
}

impl DemoRecord {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.trajectory.is_empty() {
            return Err(TrainError::BadRecord("empty trajectory".into()));
        }
        let last = self.trajectory.last().unwrap();
        let dp: f64 = last
            .position
            .iter()
            .zip(&self.grasp_pose.position)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dq = (last.orientation.canonicalized().dot(&self.grasp_pose.orientation.canonicalized())
            - 1.0)
            .abs();
        if dp > 1e-9 || dq > 1e-9 {
            return Err(TrainError::BadRecord(
                "trajectory endpoint differs from grasp pose".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Negative-sample count N.
    pub negatives: usize,
    /// Proximity-sample count R.
    pub proximal: usize,
    /// Positional proximity spread (meters).
    pub sigma_pos: f64,
    /// Rotational proximity spread (radians).
    pub sigma_rot: f64,
    /// Trajectory stride between the supervised pair.
    pub stride: usize,
    pub value_weight: f64,
    pub aux_weight: f64,
    /// Relative weight of the orientation cosine terms inside the auxiliary
    /// loss; the position term keeps weight 1.
    pub orientation_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            negatives: 64,
            proximal: 8,
            sigma_pos: 0.02,
            sigma_rot: 0.1,
            stride: 2,
            value_weight: 1.0,
            aux_weight: 1.0,
            orientation_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.negatives == 0 || self.proximal == 0 {
            return Err(TrainError::BadRecord("N and R must be at least 1".into()));
        }
        if self.sigma_pos <= 0.0 || self.sigma_rot <= 0.0 {
            return Err(TrainError::BadRecord("proximity spreads must be positive".into()));
        }
        if self.stride == 0 {
            return Err(TrainError::BadRecord("stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub aux_enabled: bool,
    pub representation: Representation,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            aux_enabled: true,
            representation: Representation::Quat,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_value_loss: f64,
    pub mean_aux_loss: f64,
    pub holdout_alignment: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

// ── Sampling ─────────────────────────────────────────────────────────

/// N poses with positions uniform in the workspace and uniform random
/// orientations, in the grasp pose's representation.
pub fn sample_negatives(
    grasp: &Pose,
    workspace: &Aabb,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    assert!(n >= 1, "negative-sample count must be at least 1");
    let rep = grasp.representation();
    (0..n)
        .map(|_| {
            let position = workspace.sample(rng);
            Pose::from_parts(rep, position, Quat::uniform(rng))
        })
        .collect()
}

/// R poses near `p_t`: Gaussian positional offsets and a random-axis rotation
/// with |Gaussian| angle, retracted onto the manifold.
pub fn sample_proximal(p_t: &Pose, cfg: &LossConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let rep = p_t.representation();
    let base = p_t.to_pose_q();
    let npos = Normal::new(0.0, cfg.sigma_pos).expect("σ_pos > 0");
    let nrot = Normal::new(0.0, cfg.sigma_rot).expect("σ_rot > 0");
    (0..cfg.proximal)
        .map(|_| {
            let position = [
                base.position[0] + npos.sample(rng),
                base.position[1] + npos.sample(rng),
                base.position[2] + npos.sample(rng),
            ];
            let axis = loop {
                let a = [
                    rng.random_range(-1.0..1.0_f64),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                if n > 1e-6 && n <= 1.0 {
                    break [a[0] / n, a[1] / n, a[2] / n];
                }
            };
            let angle = nrot.sample(rng).abs();
            let dq = Quat::from_axis_angle(axis, angle).expect("unit axis");
            let orientation = dq.mul(&base.orientation).canonicalized();
            Pose::from_parts(rep, position, orientation)
        })
        .collect()
}

// ── Loss nodes ───────────────────────────────────────────────────────

/// −log softmax of entry 0: LSE(values) − values₀, always ≥ 0 and overflow
/// safe for finite values.
pub fn value_loss_node(g: &mut Graph, values: NodeId) -> NodeId {
    let lse = g.logsumexp(values);
    let positive = g.elem(values, 0);
    g.sub(lse, positive)
}

/// Σ_r −part_cosine(deltaᵣ, gradᵣ) over rows, with per-part ε-guarded norms.
/// `delta` rows are p_next ⊖ p_r; `grad` is the (R × dim) pose-gradient node.
pub fn aux_loss_node(
    g: &mut Graph,
    rep: Representation,
    grad: NodeId,
    delta: &Tensor,
    orientation_weight: f64,
) -> NodeId {
    let rows = match delta.shape() {
        Shape::Matrix(r, c) => {
            assert_eq!(c, rep.dim(), "delta width");
            r
        }
        s => panic!("aux delta shape {s:?}"),
    };
    let dnode = g.constant(delta.clone());
    let mut total: Option<NodeId> = None;
    for (part_idx, part) in rep.parts().into_iter().enumerate() {
        let mut dot: Option<NodeId> = None;
        let mut g2: Option<NodeId> = None;
        let mut d2: Option<NodeId> = None;
        for j in part {
            let gc = g.column(grad, j);
            let dc = g.column(dnode, j);
            let p = g.mul(gc, dc);
            let gg = g.mul(gc, gc);
            let dd = g.mul(dc, dc);
            dot = Some(match dot {
                None => p,
                Some(a) => g.add(a, p),
            });
            g2 = Some(match g2 {
                None => gg,
                Some(a) => g.add(a, gg),
            });
            d2 = Some(match d2 {
                None => dd,
                Some(a) => g.add(a, dd),
            });
        }
        let g2e = g.add_const(g2.unwrap(), COSINE_EPS * COSINE_EPS);
        let d2e = g.add_const(d2.unwrap(), COSINE_EPS * COSINE_EPS);
        let ng = g.sqrt(g2e);
        let nd = g.sqrt(d2e);
        let nn = g.mul(ng, nd);
        let mut cos = g.div(dot.unwrap(), nn);
        if part_idx > 0 && orientation_weight != 1.0 {
            cos = g.scale(cos, orientation_weight);
        }
        total = Some(match total {
            None => cos,
            Some(a) => g.add(a, cos),
        });
    }
    let _ = rows;
    let per_row = total.unwrap();
    let s = g.sum(per_row);
    g.neg(s)
}

/// value_weight·L_value + aux_weight·L_aux; the aux term is omitted when
/// absent.
pub fn total_loss_node(
    g: &mut Graph,
    value_loss: NodeId,
    aux_loss: Option<NodeId>,
    cfg: &LossConfig,
) -> NodeId {
    let v = g.scale(value_loss, cfg.value_weight);
    match aux_loss {
        None => v,
        Some(a) => {
            let aw = g.scale(a, cfg.aux_weight);
            g.add(v, aw)
        }
    }
}

/// Numeric value loss of a grasp against negatives under a model.
pub fn value_loss(
    model: &ValueModel,
    scene: &Scene,
    grasp: &Pose,
    negatives: &[Pose],
) -> Result<f64, TrainError> {
    assert!(!negatives.is_empty(), "negatives must be non-empty");
    let mut g = Graph::new();
    let batch = 1 + negatives.len();
    let poses = g.leaf("poses", Shape::Matrix(batch, model.representation().dim()));
    let mut params = ParamNodes::default();
    let (values, _) = model.psi_nodes(&mut g, scene, poses, batch, ParamMode::Constants, &mut params);
    let loss = value_loss_node(&mut g, values);
    let mut all = vec![*grasp];
    all.extend_from_slice(negatives);
    let mut b = Bindings::new();
    b.bind(poses, crate::value::PsiGraph::pose_matrix(model.representation(), &all));
    Ok(g.evaluate(&b, &[loss])?[0].as_scalar())
}

/// Numeric auxiliary loss at proximity samples of a trajectory pair.
pub fn aux_loss(
    model: &ValueModel,
    scene: &Scene,
    p_next: &Pose,
    proximal: &[Pose],
) -> Result<f64, TrainError> {
    assert!(!proximal.is_empty(), "proximity set must be non-empty");
    let rep = model.representation();
    let mut g = Graph::new();
    let batch = proximal.len();
    let poses = g.leaf("poses", Shape::Matrix(batch, rep.dim()));
    let mut params = ParamNodes::default();
    let (values, _) = model.psi_nodes(&mut g, scene, poses, batch, ParamMode::Constants, &mut params);
    let s = g.sum(values);
    let grad = g.gradient_of(s, &[poses], false)?[0];
    let delta = delta_matrix(rep, p_next, proximal)?;
    let loss = aux_loss_node(&mut g, rep, grad, &delta, 1.0);
    let mut b = Bindings::new();
    b.bind(poses, crate::value::PsiGraph::pose_matrix(rep, proximal));
    Ok(g.evaluate(&b, &[loss])?[0].as_scalar())
}

/// Rows of p_next ⊖ p_r for every proximity sample.
pub fn delta_matrix(
    rep: Representation,
    p_next: &Pose,
    proximal: &[Pose],
) -> Result<Tensor, PoseError> {
    let dim = rep.dim();
    let mut data = Vec::with_capacity(proximal.len() * dim);
    for p_r in proximal {
        let d = ominus(p_next, p_r)?;
        data.extend(d.flat());
    }
    Ok(Tensor::matrix(proximal.len(), dim, data))
}

// ── Training loop ────────────────────────────────────────────────────

struct DemoStepOut {
    value_loss: f64,
    aux_loss: f64,
    grads: Vec<Tensor>,
}

fn demo_step(
    model: &ValueModel,
    theta: &[(String, Tensor)],
    demo: &DemoRecord,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DemoStepOut, TrainError> {
    let rep = cfg.representation;
    let grasp = Pose::from_pose_q(rep, &demo.grasp_pose);
    // One supervised trajectory pair per demo per epoch.
    let max_t = demo.trajectory.len().saturating_sub(cfg.loss.stride + 1);
    let t = if max_t == 0 { 0 } else { rng.random_range(0..=max_t) };
    let t_next = (t + cfg.loss.stride).min(demo.trajectory.len() - 1);
    let p_t = Pose::from_pose_q(rep, &demo.trajectory[t]);
    let p_next = Pose::from_pose_q(rep, &demo.trajectory[t_next]);

    let negatives = sample_negatives(&grasp, &demo.scene.workspace, cfg.loss.negatives, rng);
    let mut g = Graph::new();
    let mut params = ParamNodes::default();

    // Value branch over [grasp, negatives].
    let vl_batch = 1 + negatives.len();
    let mut vl_rows = vec![grasp];
    vl_rows.extend(negatives);
    let vl_poses = g.constant(crate::value::PsiGraph::pose_matrix(rep, &vl_rows));
    let (vl_values, _) =
        model.psi_nodes(&mut g, &demo.scene, vl_poses, vl_batch, ParamMode::Leaves, &mut params);
    let vl = value_loss_node(&mut g, vl_values);

    // Auxiliary branch over proximity samples of p_t.
    let aux = if cfg.aux_enabled {
        let proximal = sample_proximal(&p_t, &cfg.loss, rng);
        let pr_poses = g.constant(crate::value::PsiGraph::pose_matrix(rep, &proximal));
        let (pr_values, _) = model.psi_nodes(
            &mut g,
            &demo.scene,
            pr_poses,
            proximal.len(),
            ParamMode::Leaves,
            &mut params,
        );
        let s = g.sum(pr_values);
        let grad = g.gradient_of(s, &[pr_poses], true)?[0];
        let delta = delta_matrix(rep, &p_next, &proximal)?;
        Some(aux_loss_node(&mut g, rep, grad, &delta, cfg.loss.orientation_weight))
    } else {
        None
    };

    let total = total_loss_node(&mut g, vl, aux, &cfg.loss);
    let wrt = params.node_ids();
    let grads = g.gradient_of(total, &wrt, false)?;

    let mut b = Bindings::new();
    let refs: Vec<(String, &Tensor)> = theta.iter().map(|(n, t)| (n.clone(), t)).collect();
    params.bind(&mut b, &refs);
    let mut outputs = vec![total, vl];
    if let Some(a) = aux {
        outputs.push(a);
    }
    outputs.extend_from_slice(&grads);
    let results = g.evaluate(&b, &outputs)?;
    let total_v = results[0].as_scalar();
    let vl_v = results[1].as_scalar();
    let (aux_v, grad_off) = if aux.is_some() { (results[2].as_scalar(), 3) } else { (0.0, 2) };
    if !total_v.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, demo: 0 });
    }
    Ok(DemoStepOut { value_loss: vl_v, aux_loss: aux_v, grads: results[grad_off..].to_vec() })
}

/// Per-demo reusable alignment graph over a holdout record.
struct AlignGraph {
    graph: Graph,
    params: ParamNodes,
    grad: NodeId,
    poses: Tensor,
    pose_leaf: NodeId,
    deltas: Vec<PoseDelta>,
}

fn build_alignment_graphs(
    model: &ValueModel,
    holdout: &[DemoRecord],
    stride: usize,
) -> Result<Vec<AlignGraph>, TrainError> {
    let rep = model.representation();
    let mut out = Vec::new();
    for demo in holdout {
        let mut pairs = Vec::new();
        let mut t = 0;
        while t + stride < demo.trajectory.len() {
            pairs.push((t, t + stride));
            t += stride;
        }
        if pairs.is_empty() {
            continue;
        }
        let poses: Vec<Pose> =
            pairs.iter().map(|&(t, _)| Pose::from_pose_q(rep, &demo.trajectory[t])).collect();
        let deltas: Vec<PoseDelta> = pairs
            .iter()
            .map(|&(t, n)| {
                ominus(
                    &Pose::from_pose_q(rep, &demo.trajectory[n]),
                    &Pose::from_pose_q(rep, &demo.trajectory[t]),
                )
            })
            .collect::<Result<_, _>>()?;
        let mut g = Graph::new();
        let pose_leaf = g.leaf("poses", Shape::Matrix(poses.len(), rep.dim()));
        let mut params = ParamNodes::default();
        let (values, _) = model.psi_nodes(
            &mut g,
            &demo.scene,
            pose_leaf,
            poses.len(),
            ParamMode::Leaves,
            &mut params,
        );
        let s = g.sum(values);
        let grad = g.gradient_of(s, &[pose_leaf], false)?[0];
        out.push(AlignGraph {
            graph: g,
            params,
            grad,
            poses: crate::value::PsiGraph::pose_matrix(rep, &poses),
            pose_leaf,
            deltas,
        });
    }
    Ok(out)
}

fn eval_alignment(
    graphs: &[AlignGraph],
    theta: &[(String, Tensor)],
    rep: Representation,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ag in graphs {
        let mut b = Bindings::new();
        let refs: Vec<(String, &Tensor)> = theta.iter().map(|(n, t)| (n.clone(), t)).collect();
        ag.params.bind(&mut b, &refs);
        b.bind(ag.pose_leaf, ag.poses.clone());
        let grad = ag.graph.evaluate(&b, &[ag.grad])?.remove(0);
        for (row, delta) in ag.deltas.iter().enumerate() {
            let gd = PoseDelta::from_flat(rep, grad.row(row));
            total += part_cosine(delta, &gd);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean part-cosine between ∇_pΨ at trajectory waypoints and the demonstrated
/// displacements, over all stride-aligned pairs of `demos`.
pub fn alignment_metric(
    model: &ValueModel,
    demos: &[DemoRecord],
    stride: usize,
) -> Result<f64, TrainError> {
    let graphs = build_alignment_graphs(model, demos, stride)?;
    let theta: Vec<(String, Tensor)> =
        model.params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    eval_alignment(&graphs, &theta, model.representation())
}

/// Trains θ (aggregation + value networks) with Adam; Φ stays frozen. One
/// trajectory pair per demo per epoch, demos shuffled by seed, gradients
/// accumulated over `batch_size` demos per update. Deterministic for a fixed
/// seed regardless of worker count.
pub fn train(
    model: &mut ValueModel,
    dataset: &[DemoRecord],
    holdout: &[DemoRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if cfg.epochs == 0 {
        return Err(TrainError::ZeroEpochs);
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.loss.validate()?;
    if cfg.aux_enabled && model.cfg.activation != Activation::Elu {
        return Err(TrainError::EluRequired);
    }
    if model.representation() != cfg.representation {
        return Err(TrainError::RepresentationMismatch {
            model: model.representation(),
            config: cfg.representation,
        });
    }
    for d in dataset.iter().chain(holdout) {
        d.validate()?;
    }

    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut theta: Vec<(String, Tensor)> =
        names.iter().cloned().zip(model.param_values()).collect();
    let shapes: Vec<Shape> = theta.iter().map(|(_, t)| t.shape()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &shapes);
    let align_graphs = build_alignment_graphs(model, holdout, cfg.loss.stride)?;

    let mut report = TrainReport::default();
    let n = dataset.len();
    for epoch in 0..cfg.epochs {
        // Deterministic shuffle per epoch.
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream_rng(derive_seed(cfg.seed, 2), epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sum_vl = 0.0;
        let mut sum_aux = 0.0;
        for (chunk_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let outs: Vec<Result<DemoStepOut, TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &di)| {
                    let stream = (epoch * n + chunk_idx * cfg.batch_size + k) as u64;
                    let mut rng = stream_rng(derive_seed(cfg.seed, 1), stream);
                    demo_step(model, &theta, &dataset[di], cfg, &mut rng)
                })
                .collect();
            let mut acc: Option<Vec<Tensor>> = None;
            for (k, out) in outs.into_iter().enumerate() {
                let out = out.map_err(|e| match e {
                    TrainError::NonFiniteLoss { .. } => {
                        TrainError::NonFiniteLoss { epoch, demo: chunk[k] }
                    }
                    other => other,
                })?;
                sum_vl += out.value_loss;
                sum_aux += out.aux_loss;
                acc = Some(match acc {
                    None => out.grads,
                    Some(mut a) => {
                        for (t, g) in a.iter_mut().zip(&out.grads) {
                            for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty chunk");
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
            let mut values: Vec<Tensor> = theta.iter().map(|(_, t)| t.clone()).collect();
            adam.step(&mut values, &grads)?;
            for ((_, t), v) in theta.iter_mut().zip(values) {
                *t = v;
            }
        }
        let alignment = eval_alignment(&align_graphs, &theta, cfg.representation)?;
        report.epochs.push(EpochStats {
            epoch,
            mean_value_loss: sum_vl / n as f64,
            mean_aux_loss: sum_aux / n as f64,
            holdout_alignment: alignment,
        });
    }
    let values: Vec<Tensor> = theta.into_iter().map(|(_, t)| t).collect();
    model.set_param_values(&values);
    Ok(report)
}

// ── Dataset files ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RecordLine {
    version: u32,
    seed: u64,
    scene: Scene,
    trajectory: Vec<PoseQ>,
    grasp_pose: PoseQ,
}

/// Line-delimited JSON, one record per demo, with a per-record version tag.
pub fn save_dataset(path: &Path, records: &[DemoRecord]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            version: DATASET_VERSION,
            seed: r.seed,
            scene: r.scene.clone(),
            trajectory: r.trajectory.clone(),
            grasp_pose: r.grasp_pose,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DemoRecord>, TrainError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)?;
        if rec.version != DATASET_VERSION {
            return Err(TrainError::Version { found: rec.version, expected: DATASET_VERSION });
        }
        let demo = DemoRecord {
            scene: rec.scene,
            trajectory: rec.trajectory,
            grasp_pose: rec.grasp_pose,
            seed: rec.seed,
        };
        demo.validate()?;
        out.push(demo);
    }
    Ok(out)
}
