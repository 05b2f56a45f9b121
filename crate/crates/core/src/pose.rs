//! Pose representations, retraction, pose differences, partial pose
//! decomposition, positional encoding, and per-part cosine similarity.
//!
//! Poses carry a position and an orientation as either a quaternion or the
//! first two rotation-matrix columns (the 6D representation). Retraction
//! projects an updated representation back onto its manifold; it is what the
//! pose optimizer applies after every gradient step.

use crate::autodiff::{Graph, NodeId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

pub const QUAT_DIM: usize = 7;
pub const SIXD_DIM: usize = 9;

const DEGENERATE_NORM: f64 = 1e-8;
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("degenerate orientation: {0}")]
    Degenerate(&'static str),
    #[error("mixed pose representations")]
    MixedRepresentation,
    #[error("partial pose decomposition needs at least one entry")]
    EmptyPpd,
    #[error("positional encoding needs at least one frequency")]
    ZeroFrequencies,
}

// ── Quaternions ──────────────────────────────────────────────────────

/// Rotation quaternion, scalar-first (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub fn identity() -> Self {
        Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn scaled(&self, s: f64) -> Quat {
        Quat { w: self.w * s, x: self.x * s, y: self.y * s, z: self.z * s }
    }

    /// Flips sign so that w > 0, or w = 0 and the first nonzero component is
    /// positive; resolves the double cover before element-wise differences.
    pub fn canonicalized(&self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            self.scaled(-1.0)
        } else {
            *self
        }
    }

    pub fn normalized(&self) -> Result<Quat, PoseError> {
        let n = self.norm();
        if n < DEGENERATE_NORM {
            return Err(PoseError::Degenerate("quaternion norm near zero"));
        }
        Ok(self.scaled(1.0 / n).canonicalized())
    }

    pub fn mul(&self, o: &Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let t = [
            2.0 * (y * v[2] - z * v[1]),
            2.0 * (z * v[0] - x * v[2]),
            2.0 * (x * v[1] - y * v[0]),
        ];
        [
            v[0] + w * t[0] + (y * t[2] - z * t[1]),
            v[1] + w * t[1] + (z * t[0] - x * t[2]),
            v[2] + w * t[2] + (x * t[1] - y * t[0]),
        ]
    }

    /// Rotation matrix columns [R·e₁, R·e₂, R·e₃].
    pub fn to_cols(&self) -> [[f64; 3]; 3] {
        [self.rotate([1.0, 0.0, 0.0]), self.rotate([0.0, 1.0, 0.0]), self.rotate([0.0, 0.0, 1.0])]
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Quat, PoseError> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < DEGENERATE_NORM {
            return Err(PoseError::Degenerate("rotation axis near zero"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Quat { w: c, x: s * axis[0] / n, y: s * axis[1] / n, z: s * axis[2] / n })
    }

    /// Shepperd's method over rotation-matrix columns.
    pub fn from_cols(cols: [[f64; 3]; 3]) -> Quat {
        let m = |r: usize, c: usize| cols[c][r];
        let trace = m(0, 0) + m(1, 1) + m(2, 2);
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m(2, 1) - m(1, 2)) / s,
                y: (m(0, 2) - m(2, 0)) / s,
                z: (m(1, 0) - m(0, 1)) / s,
            }
        } else if m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2) {
            let s = (1.0 + m(0, 0) - m(1, 1) - m(2, 2)).sqrt() * 2.0;
            Quat {
                w: (m(2, 1) - m(1, 2)) / s,
                x: 0.25 * s,
                y: (m(0, 1) + m(1, 0)) / s,
                z: (m(0, 2) + m(2, 0)) / s,
            }
        } else if m(1, 1) > m(2, 2) {
            let s = (1.0 + m(1, 1) - m(0, 0) - m(2, 2)).sqrt() * 2.0;
            Quat {
                w: (m(0, 2) - m(2, 0)) / s,
                x: (m(0, 1) + m(1, 0)) / s,
                y: 0.25 * s,
                z: (m(1, 2) + m(2, 1)) / s,
            }
        } else {
            let s = (1.0 + m(2, 2) - m(0, 0) - m(1, 1)).sqrt() * 2.0;
            Quat {
                w: (m(1, 0) - m(0, 1)) / s,
                x: (m(0, 2) + m(2, 0)) / s,
                y: (m(1, 2) + m(2, 1)) / s,
                z: 0.25 * s,
            }
        };
        q.normalized().expect("rotation columns give a unit quaternion")
    }

    /// Shortest-path spherical interpolation.
    pub fn slerp(a: &Quat, b: &Quat, t: f64) -> Quat {
        let mut b = *b;
        let mut d = a.dot(&b);
        if d < 0.0 {
            b = b.scaled(-1.0);
            d = -d;
        }
        if d > 1.0 - 1e-10 {
            // Nearly parallel; linear blend then renormalize.
            let mixed = Quat {
                w: a.w + t * (b.w - a.w),
                x: a.x + t * (b.x - a.x),
                y: a.y + t * (b.y - a.y),
                z: a.z + t * (b.z - a.z),
            };
            return mixed.normalized().expect("slerp blend");
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        Quat {
            w: wa * a.w + wb * b.w,
            x: wa * a.x + wb * b.x,
            y: wa * a.y + wb * b.y,
            z: wa * a.z + wb * b.z,
        }
        .normalized()
        .expect("slerp output")
    }

    /// Uniform random rotation (Shoemake's method).
    pub fn uniform(rng: &mut ChaCha8Rng) -> Quat {
        let u1: f64 = rng.random_range(0.0..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u3: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        Quat { w: a * u2.sin(), x: a * u2.cos(), y: b * u3.sin(), z: b * u3.cos() }
            .canonicalized()
    }
}

// ── Pose types ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    Quat,
    SixD,
}

impl Representation {
    pub fn dim(&self) -> usize {
        match self {
            Representation::Quat => QUAT_DIM,
            Representation::SixD => SIXD_DIM,
        }
    }

    /// Column ranges of the representation vector: position first, then one
    /// range per orientation part (quaternion, or each 6D column).
    pub fn parts(&self) -> Vec<Range<usize>> {
        match self {
            Representation::Quat => vec![0..3, 3..7],
            Representation::SixD => vec![0..3, 3..6, 6..9],
        }
    }

    pub fn part_count(&self) -> usize {
        self.parts().len()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quat" => Some(Representation::Quat),
            "6d" => Some(Representation::SixD),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Representation::Quat => "quat",
            Representation::SixD => "6d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseQ {
    pub position: [f64; 3],
    pub orientation: Quat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub position: [f64; 3],
    pub col1: [f64; 3],
    pub col2: [f64; 3],
}

/// A 6-DoF pose in one of the two supported representations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pose {
    Q(PoseQ),
    SixD(Pose6D),
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

impl Pose {
    pub fn identity(rep: Representation) -> Pose {
        match rep {
            Representation::Quat => {
                Pose::Q(PoseQ { position: [0.0; 3], orientation: Quat::identity() })
            }
            Representation::SixD => Pose::SixD(Pose6D {
                position: [0.0; 3],
                col1: [1.0, 0.0, 0.0],
                col2: [0.0, 1.0, 0.0],
            }),
        }
    }

    pub fn from_parts(rep: Representation, position: [f64; 3], orientation: Quat) -> Pose {
        match rep {
            Representation::Quat => Pose::Q(PoseQ { position, orientation }),
            Representation::SixD => {
                let cols = orientation.to_cols();
                Pose::SixD(Pose6D { position, col1: cols[0], col2: cols[1] })
            }
        }
    }

    pub fn representation(&self) -> Representation {
        match self {
            Pose::Q(_) => Representation::Quat,
            Pose::SixD(_) => Representation::SixD,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        match self {
            Pose::Q(p) => p.position,
            Pose::SixD(p) => p.position,
        }
    }

    pub fn set_position(&mut self, pos: [f64; 3]) {
        match self {
            Pose::Q(p) => p.position = pos,
            Pose::SixD(p) => p.position = pos,
        }
    }

    /// Projects the orientation back onto its manifold: quaternions are
    /// normalized and sign-canonicalized; 6D columns are Gram–Schmidt
    /// orthonormalized.
    pub fn retract(&self) -> Result<Pose, PoseError> {
        match self {
            Pose::Q(p) => Ok(Pose::Q(PoseQ {
                position: p.position,
                orientation: p.orientation.normalized()?,
            })),
            Pose::SixD(p) => {
                let n1 = norm3(p.col1);
                if n1 < DEGENERATE_NORM {
                    return Err(PoseError::Degenerate("first 6D column near zero"));
                }
                let e1 = [p.col1[0] / n1, p.col1[1] / n1, p.col1[2] / n1];
                let proj = dot3(e1, p.col2);
                let u2 = sub3(p.col2, [proj * e1[0], proj * e1[1], proj * e1[2]]);
                let n2 = norm3(u2);
                if n2 < DEGENERATE_NORM {
                    return Err(PoseError::Degenerate("6D columns near parallel"));
                }
                let e2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
                Ok(Pose::SixD(Pose6D { position: p.position, col1: e1, col2: e2 }))
            }
        }
    }

    /// Checks the representation invariants at tolerance `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        match self {
            Pose::Q(p) => {
                let canonical = p.orientation.canonicalized() == p.orientation;
                (p.orientation.norm() - 1.0).abs() <= tol && canonical
            }
            Pose::SixD(p) => {
                (norm3(p.col1) - 1.0).abs() <= tol
                    && (norm3(p.col2) - 1.0).abs() <= tol
                    && dot3(p.col1, p.col2).abs() <= tol
            }
        }
    }

    /// Rotation matrix columns of a valid pose.
    pub fn rotation_cols(&self) -> [[f64; 3]; 3] {
        match self {
            Pose::Q(p) => p.orientation.to_cols(),
            Pose::SixD(p) => [p.col1, p.col2, cross3(p.col1, p.col2)],
        }
    }

    /// Tool approach axis in world coordinates (local +z).
    pub fn approach_axis(&self) -> [f64; 3] {
        self.rotation_cols()[2]
    }

    /// Gripper closing axis in world coordinates (local +x).
    pub fn closing_axis(&self) -> [f64; 3] {
        self.rotation_cols()[0]
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match self {
            Pose::Q(p) => vec![
                p.position[0],
                p.position[1],
                p.position[2],
                p.orientation.w,
                p.orientation.x,
                p.orientation.y,
                p.orientation.z,
            ],
            Pose::SixD(p) => {
                let mut v = p.position.to_vec();
                v.extend_from_slice(&p.col1);
                v.extend_from_slice(&p.col2);
                v
            }
        }
    }

    pub fn from_vec(rep: Representation, v: &[f64]) -> Pose {
        assert_eq!(v.len(), rep.dim(), "representation vector length");
        match rep {
            Representation::Quat => Pose::Q(PoseQ {
                position: [v[0], v[1], v[2]],
                orientation: Quat::new(v[3], v[4], v[5], v[6]),
            }),
            Representation::SixD => Pose::SixD(Pose6D {
                position: [v[0], v[1], v[2]],
                col1: [v[3], v[4], v[5]],
                col2: [v[6], v[7], v[8]],
            }),
        }
    }

    /// Converts a valid pose into the quaternion representation.
    pub fn to_pose_q(&self) -> PoseQ {
        match self {
            Pose::Q(p) => PoseQ { position: p.position, orientation: p.orientation.canonicalized() },
            Pose::SixD(_) => {
                let cols = self.rotation_cols();
                PoseQ { position: self.position(), orientation: Quat::from_cols(cols) }
            }
        }
    }

    pub fn from_pose_q(rep: Representation, pq: &PoseQ) -> Pose {
        Pose::from_parts(rep, pq.position, pq.orientation)
    }
}

// ── Pose differences and per-part cosine ─────────────────────────────

/// Element-wise difference of two same-representation poses, kept as separate
/// position and orientation sub-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDelta {
    pub parts: Vec<Vec<f64>>,
}

impl PoseDelta {
    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts.concat()
    }

    /// Splits a flat representation vector back into parts.
    pub fn from_flat(rep: Representation, v: &[f64]) -> PoseDelta {
        assert_eq!(v.len(), rep.dim());
        PoseDelta { parts: rep.parts().into_iter().map(|r| v[r].to_vec()).collect() }
    }
}

/// a ⊖ b: component-wise difference of the pose representations; quaternions
/// are sign-canonicalized first.
pub fn ominus(a: &Pose, b: &Pose) -> Result<PoseDelta, PoseError> {
    match (a, b) {
        (Pose::Q(pa), Pose::Q(pb)) => {
            let qa = pa.orientation.canonicalized();
            let qb = pb.orientation.canonicalized();
            Ok(PoseDelta {
                parts: vec![
                    sub3(pa.position, pb.position).to_vec(),
                    vec![qa.w - qb.w, qa.x - qb.x, qa.y - qb.y, qa.z - qb.z],
                ],
            })
        }
        (Pose::SixD(pa), Pose::SixD(pb)) => Ok(PoseDelta {
            parts: vec![
                sub3(pa.position, pb.position).to_vec(),
                sub3(pa.col1, pb.col1).to_vec(),
                sub3(pa.col2, pb.col2).to_vec(),
            ],
        }),
        _ => Err(PoseError::MixedRepresentation),
    }
}

/// Sum of per-part cosine similarities between a pose difference and a
/// same-shape gradient. Zero-norm parts contribute 0 via the ε guard.
pub fn part_cosine(delta: &PoseDelta, grad: &PoseDelta) -> f64 {
    assert_eq!(delta.part_count(), grad.part_count(), "part structure");
    delta
        .parts
        .iter()
        .zip(&grad.parts)
        .map(|(d, g)| {
            assert_eq!(d.len(), g.len(), "part lengths");
            let dot: f64 = d.iter().zip(g).map(|(a, b)| a * b).sum();
            let nd = (d.iter().map(|a| a * a).sum::<f64>() + COSINE_EPS * COSINE_EPS).sqrt();
            let ng = (g.iter().map(|a| a * a).sum::<f64>() + COSINE_EPS * COSINE_EPS).sqrt();
            dot / (nd * ng)
        })
        .sum()
}

// ── Partial pose decomposition ───────────────────────────────────────

/// A 5-DoF support pose: a point and a unit direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportPose {
    pub point: [f64; 3],
    pub direction: [f64; 3],
}

/// One rigid transform of the decomposition, in the TCP frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpdEntry {
    pub offset: [f64; 3],
    pub direction: [f64; 3],
}

/// Ordered support-pose transforms matching the gripper geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpdConfig {
    entries: Vec<PpdEntry>,
}

impl PpdConfig {
    pub fn new(entries: Vec<PpdEntry>) -> Result<Self, PoseError> {
        if entries.is_empty() {
            return Err(PoseError::EmptyPpd);
        }
        Ok(PpdConfig { entries })
    }

    /// Five support poses: the TCP center pointing along the approach axis,
    /// plus finger-offset pairs at ±half_width (at the TCP plane and at
    /// fingertip depth) with inward directions.
    pub fn default_gripper(half_width: f64, fingertip_depth: f64) -> Self {
        let e = |offset: [f64; 3], direction: [f64; 3]| PpdEntry { offset, direction };
        PpdConfig {
            entries: vec![
                e([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                e([half_width, 0.0, 0.0], [-1.0, 0.0, 0.0]),
                e([-half_width, 0.0, 0.0], [1.0, 0.0, 0.0]),
                e([half_width, 0.0, fingertip_depth], [-1.0, 0.0, 0.0]),
                e([-half_width, 0.0, fingertip_depth], [1.0, 0.0, 0.0]),
            ],
        }
    }

    pub fn entries(&self) -> &[PpdEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Expands a pose into support poses: (R·offset + t, R·direction) per entry,
/// in configuration order.
pub fn ppd_decompose(p: &Pose, cfg: &PpdConfig) -> Vec<SupportPose> {
    let cols = p.rotation_cols();
    let t = p.position();
    let rot = |v: [f64; 3]| {
        [
            cols[0][0] * v[0] + cols[1][0] * v[1] + cols[2][0] * v[2],
            cols[0][1] * v[0] + cols[1][1] * v[1] + cols[2][1] * v[2],
            cols[0][2] * v[0] + cols[1][2] * v[1] + cols[2][2] * v[2],
        ]
    };
    cfg.entries
        .iter()
        .map(|e| {
            let p = rot(e.offset);
            SupportPose {
                point: [p[0] + t[0], p[1] + t[1], p[2] + t[2]],
                direction: rot(e.direction),
            }
        })
        .collect()
}

// ── Positional encoding ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncConfig {
    frequencies: usize,
}

impl PosEncConfig {
    pub fn new(frequencies: usize) -> Result<Self, PoseError> {
        if frequencies == 0 {
            return Err(PoseError::ZeroFrequencies);
        }
        Ok(PosEncConfig { frequencies })
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    pub fn output_len(&self, input_dim: usize) -> usize {
        2 * self.frequencies * input_dim
    }
}

/// Per dimension: (sin(2⁰πv), cos(2⁰πv), …, sin(2^(M−1)πv), cos(2^(M−1)πv)),
/// concatenated over dimensions.
pub fn positional_encode(v: &[f64], cfg: &PosEncConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_len(v.len()));
    for &x in v {
        for k in 0..cfg.frequencies {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

// ── Graph builders ───────────────────────────────────────────────────

/// Orientation columns of a batched pose matrix as graph nodes.
#[derive(Clone, Debug)]
pub enum RotNodes {
    /// Quaternion components (w, x, y, z), each a batch vector.
    Quat { w: NodeId, x: NodeId, y: NodeId, z: NodeId },
    /// Orthonormalized rotation-matrix columns.
    Cols { c: [[NodeId; 3]; 3] },
}

/// Column view of a batched pose representation matrix (B × dim).
#[derive(Clone, Debug)]
pub struct PoseCols {
    pub pos: [NodeId; 3],
    pub rot: RotNodes,
}

/// Splits a pose matrix into position and orientation nodes. For the 6D
/// representation the columns are Gram–Schmidt orthonormalized in-graph so
/// the rotation (and its gradients) live on the manifold.
pub fn pose_columns(g: &mut Graph, pose_matrix: NodeId, rep: Representation) -> PoseCols {
    let col = |g: &mut Graph, j: usize| g.column(pose_matrix, j);
    let pos = [col(g, 0), col(g, 1), col(g, 2)];
    match rep {
        Representation::Quat => {
            let w = g.column(pose_matrix, 3);
            let x = g.column(pose_matrix, 4);
            let y = g.column(pose_matrix, 5);
            let z = g.column(pose_matrix, 6);
            PoseCols { pos, rot: RotNodes::Quat { w, x, y, z } }
        }
        Representation::SixD => {
            let c1 = [col(g, 3), col(g, 4), col(g, 5)];
            let c2 = [col(g, 6), col(g, 7), col(g, 8)];
            let e1 = normalize_rows(g, c1);
            let proj = row_dot(g, e1, c2);
            let proj_e1 = [
                g.mul(proj, e1[0]),
                g.mul(proj, e1[1]),
                g.mul(proj, e1[2]),
            ];
            let u2 = [
                g.sub(c2[0], proj_e1[0]),
                g.sub(c2[1], proj_e1[1]),
                g.sub(c2[2], proj_e1[2]),
            ];
            let e2 = normalize_rows(g, u2);
            let e3 = cross_rows(g, e1, e2);
            PoseCols { pos, rot: RotNodes::Cols { c: [e1, e2, e3] } }
        }
    }
}

fn row_dot(g: &mut Graph, a: [NodeId; 3], b: [NodeId; 3]) -> NodeId {
    let p0 = g.mul(a[0], b[0]);
    let p1 = g.mul(a[1], b[1]);
    let p2 = g.mul(a[2], b[2]);
    let s = g.add(p0, p1);
    g.add(s, p2)
}

fn normalize_rows(g: &mut Graph, v: [NodeId; 3]) -> [NodeId; 3] {
    let sq = row_dot(g, v, v);
    let guarded = g.add_const(sq, DEGENERATE_NORM * DEGENERATE_NORM);
    let n = g.sqrt(guarded);
    [g.div(v[0], n), g.div(v[1], n), g.div(v[2], n)]
}

fn cross_rows(g: &mut Graph, a: [NodeId; 3], b: [NodeId; 3]) -> [NodeId; 3] {
    let t0a = g.mul(a[1], b[2]);
    let t0b = g.mul(a[2], b[1]);
    let t1a = g.mul(a[2], b[0]);
    let t1b = g.mul(a[0], b[2]);
    let t2a = g.mul(a[0], b[1]);
    let t2b = g.mul(a[1], b[0]);
    [g.sub(t0a, t0b), g.sub(t1a, t1b), g.sub(t2a, t2b)]
}

/// R · v for a constant local vector, batched over rows.
pub fn rotate_const(g: &mut Graph, rot: &RotNodes, v: [f64; 3]) -> [NodeId; 3] {
    match rot {
        RotNodes::Quat { w, x, y, z } => {
            // t = 2 q_v × v; out = v + w t + q_v × t
            let tx0 = g.scale(*y, 2.0 * v[2]);
            let tx1 = g.scale(*z, 2.0 * v[1]);
            let tx = g.sub(tx0, tx1);
            let ty0 = g.scale(*z, 2.0 * v[0]);
            let ty1 = g.scale(*x, 2.0 * v[2]);
            let ty = g.sub(ty0, ty1);
            let tz0 = g.scale(*x, 2.0 * v[1]);
            let tz1 = g.scale(*y, 2.0 * v[0]);
            let tz = g.sub(tz0, tz1);
            let qv = [*x, *y, *z];
            let t = [tx, ty, tz];
            let c = cross_rows(g, qv, t);
            let mut out = [tx; 3];
            for i in 0..3 {
                let wt = g.mul(*w, t[i]);
                let s = g.add(wt, c[i]);
                out[i] = g.add_const(s, v[i]);
            }
            out
        }
        RotNodes::Cols { c } => {
            let mut out = [c[0][0]; 3];
            for i in 0..3 {
                let a = g.scale(c[0][i], v[0]);
                let b = g.scale(c[1][i], v[1]);
                let d = g.scale(c[2][i], v[2]);
                let s = g.add(a, b);
                out[i] = g.add(s, d);
            }
            out
        }
    }
}

/// Support-pose point and direction nodes for one decomposition entry.
pub fn support_pose_nodes(
    g: &mut Graph,
    pose: &PoseCols,
    entry: &PpdEntry,
) -> ([NodeId; 3], [NodeId; 3]) {
    let rotated = rotate_const(g, &pose.rot, entry.offset);
    let point = [
        g.add(rotated[0], pose.pos[0]),
        g.add(rotated[1], pose.pos[1]),
        g.add(rotated[2], pose.pos[2]),
    ];
    let direction = rotate_const(g, &pose.rot, entry.direction);
    (point, direction)
}

/// Positional encoding of batched components; output columns follow
/// [`positional_encode`]'s ordering.
pub fn posenc_nodes(g: &mut Graph, comps: &[NodeId], cfg: &PosEncConfig) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(cfg.output_len(comps.len()));
    for &c in comps {
        for k in 0..cfg.frequencies() {
            let arg = g.scale(c, (1u64 << k) as f64 * std::f64::consts::PI);
            out.push(g.sin(arg));
            out.push(g.cos(arg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Bindings, Shape, Tensor};
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn retract_normalizes_quaternion() {
        let p = Pose::Q(PoseQ { position: [0.0; 3], orientation: Quat::new(2.0, 0.0, 0.0, 0.0) });
        let r = p.retract().unwrap();
        match r {
            Pose::Q(pq) => assert_eq!(pq.orientation, Quat::identity()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn retract_gram_schmidts_sixd() {
        let p = Pose::SixD(Pose6D {
            position: [0.0; 3],
            col1: [1.0, 0.0, 0.0],
            col2: [1.0, 1.0, 0.0],
        });
        let r = p.retract().unwrap();
        match r {
            Pose::SixD(p6) => {
                assert!((p6.col1[0] - 1.0).abs() < 1e-15);
                assert!((p6.col2[1] - 1.0).abs() < 1e-15);
                assert!(p6.col2[0].abs() < 1e-15);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn retract_valid_pose_unchanged() {
        let q = Quat::from_axis_angle([0.3, -0.2, 0.9], 1.1).unwrap().normalized().unwrap();
        for rep in [Representation::Quat, Representation::SixD] {
            let p = Pose::from_parts(rep, [0.1, 0.2, 0.3], q);
            let r = p.retract().unwrap();
            for (a, b) in p.as_vec().iter().zip(r.as_vec()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn retract_rejects_degenerate() {
        let p = Pose::Q(PoseQ { position: [0.0; 3], orientation: Quat::new(0.0, 0.0, 0.0, 0.0) });
        assert!(matches!(p.retract(), Err(PoseError::Degenerate(_))));
        let p6 = Pose::SixD(Pose6D {
            position: [0.0; 3],
            col1: [1.0, 0.0, 0.0],
            col2: [1.0 + 1e-12, 0.0, 0.0],
        });
        assert!(matches!(p6.retract(), Err(PoseError::Degenerate(_))));
    }

    #[test]
    fn ominus_zero_for_equal_poses() {
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], 0.7).unwrap();
        let p = Pose::from_parts(Representation::Quat, [1.0, 2.0, 3.0], q);
        let d = ominus(&p, &p).unwrap();
        assert!(d.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ominus_pure_translation() {
        let q = Quat::identity();
        let a = Pose::from_parts(Representation::Quat, [0.1, 0.0, 0.0], q);
        let b = Pose::from_parts(Representation::Quat, [0.0, 0.0, 0.0], q);
        let d = ominus(&a, &b).unwrap();
        assert_eq!(d.parts[0], vec![0.1, 0.0, 0.0]);
        assert!(d.parts[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ominus_handles_double_cover() {
        let q = Quat::from_axis_angle([0.0, 1.0, 0.0], 0.4).unwrap();
        let nq = Quat::new(-q.w, -q.x, -q.y, -q.z);
        let a = Pose::Q(PoseQ { position: [0.0; 3], orientation: q });
        let b = Pose::Q(PoseQ { position: [0.0; 3], orientation: nq });
        let d = ominus(&a, &b).unwrap();
        assert!(d.flat().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn ominus_rejects_mixed_representations() {
        let a = Pose::identity(Representation::Quat);
        let b = Pose::identity(Representation::SixD);
        assert!(matches!(ominus(&a, &b), Err(PoseError::MixedRepresentation)));
    }

    #[test]
    fn ppd_identity_pose_reproduces_config() {
        let cfg = PpdConfig::default_gripper(0.07, 0.05);
        let sp = ppd_decompose(&Pose::identity(Representation::Quat), &cfg);
        for (s, e) in sp.iter().zip(cfg.entries()) {
            assert_eq!(s.point, e.offset);
            assert_eq!(s.direction, e.direction);
        }
    }

    #[test]
    fn ppd_translation_shifts_points_only() {
        let cfg = PpdConfig::default_gripper(0.07, 0.05);
        let mut p = Pose::identity(Representation::Quat);
        p.set_position([0.5, -0.2, 0.1]);
        let sp = ppd_decompose(&p, &cfg);
        for (s, e) in sp.iter().zip(cfg.entries()) {
            assert_eq!(s.direction, e.direction);
            assert!((s.point[0] - (e.offset[0] + 0.5)).abs() < 1e-15);
            assert!((s.point[1] - (e.offset[1] - 0.2)).abs() < 1e-15);
            assert!((s.point[2] - (e.offset[2] + 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn ppd_quarter_yaw_rotates_offsets_and_directions() {
        // 90° about z maps +x to +y.
        let cfg = PpdConfig::new(vec![PpdEntry {
            offset: [0.07, 0.0, 0.0],
            direction: [-1.0, 0.0, 0.0],
        }])
        .unwrap();
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2).unwrap();
        let p = Pose::from_parts(Representation::Quat, [0.0; 3], q);
        let sp = ppd_decompose(&p, &cfg);
        assert!((sp[0].point[0]).abs() < 1e-12);
        assert!((sp[0].point[1] - 0.07).abs() < 1e-12);
        assert!((sp[0].direction[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn posenc_examples() {
        let m2 = PosEncConfig::new(2).unwrap();
        assert_eq!(positional_encode(&[0.0], &m2), vec![0.0, 1.0, 0.0, 1.0]);
        let m1 = PosEncConfig::new(1).unwrap();
        let enc = positional_encode(&[0.5], &m1);
        assert!((enc[0] - 1.0).abs() < 1e-15);
        assert!(enc[1].abs() < 1e-15);
        let m6 = PosEncConfig::new(6).unwrap();
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], &m6).len(), 36);
    }

    #[test]
    fn part_cosine_parallel_and_orthogonal() {
        let d = PoseDelta { parts: vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]] };
        let parallel = PoseDelta { parts: vec![vec![0.5, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0]] };
        assert!((part_cosine(&d, &parallel) - 2.0).abs() < 1e-9);
        let ortho = PoseDelta { parts: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]] };
        assert!(part_cosine(&d, &ortho).abs() < 1e-12);
    }

    #[test]
    fn part_cosine_sixd_three_parts() {
        let d = PoseDelta {
            parts: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        };
        assert!((part_cosine(&d, &d) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn part_cosine_zero_norm_part_contributes_zero() {
        let d = PoseDelta { parts: vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]] };
        let g = PoseDelta { parts: vec![vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]] };
        let c = part_cosine(&d, &g);
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_quaternions_are_canonical_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = Quat::uniform(&mut rng);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert_eq!(q, q.canonicalized());
        }
    }

    #[test]
    fn quat_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = Quat::uniform(&mut rng);
            let r = Quat::from_cols(q.to_cols());
            assert!(q.dot(&r).abs() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn graph_support_poses_match_numeric_decomposition() {
        let cfg = PpdConfig::default_gripper(0.07, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for rep in [Representation::Quat, Representation::SixD] {
            let q = Quat::uniform(&mut rng);
            let pose = Pose::from_parts(rep, [0.2, -0.1, 0.3], q);
            let numeric = ppd_decompose(&pose, &cfg);

            let mut g = Graph::new();
            let pm = g.leaf("poses", Shape::Matrix(1, rep.dim()));
            let cols = pose_columns(&mut g, pm, rep);
            let mut outputs = Vec::new();
            for e in cfg.entries() {
                let (pt, dir) = support_pose_nodes(&mut g, &cols, e);
                outputs.extend_from_slice(&pt);
                outputs.extend_from_slice(&dir);
            }
            let mut b = Bindings::new();
            b.bind(pm, Tensor::matrix(1, rep.dim(), pose.as_vec()));
            let vals = g.evaluate(&b, &outputs).unwrap();
            for (i, sp) in numeric.iter().enumerate() {
                for j in 0..3 {
                    assert!((vals[i * 6 + j].at(0) - sp.point[j]).abs() < 1e-12);
                    assert!((vals[i * 6 + 3 + j].at(0) - sp.direction[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_posenc_matches_numeric() {
        let cfg = PosEncConfig::new(4).unwrap();
        let vals = [0.13, -0.7, 0.42];
        let numeric = positional_encode(&vals, &cfg);
        let mut g = Graph::new();
        let m = g.leaf("v", Shape::Matrix(1, 3));
        let comps: Vec<NodeId> = (0..3).map(|j| g.column(m, j)).collect();
        let enc = posenc_nodes(&mut g, &comps, &cfg);
        let mut b = Bindings::new();
        b.bind(m, Tensor::matrix(1, 3, vals.to_vec()));
        let out = g.evaluate(&b, &enc).unwrap();
        for (o, n) in out.iter().zip(&numeric) {
            assert!((o.at(0) - n).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn retract_is_idempotent(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = if seed % 2 == 0 { Representation::Quat } else { Representation::SixD };
            let dim = rep.dim();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = Pose::from_vec(rep, &v);
            if let Ok(r1) = p.retract() {
                let r2 = r1.retract().unwrap();
                for (a, b) in r1.as_vec().iter().zip(r2.as_vec()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
                prop_assert!(r1.is_valid(1e-9));
            }
        }

        #[test]
        fn ppd_is_rigid_equivariant(seed in 0u64..2000) {
            // Decomposing a transformed pose equals transforming the
            // decomposition.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = PpdConfig::default_gripper(0.07, 0.05);
            let q = Quat::uniform(&mut rng);
            let pos = [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..0.3),
            ];
            let pose = Pose::from_parts(Representation::Quat, pos, q);
            let tq = Quat::uniform(&mut rng);
            let tt = [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ];
            let transformed = Pose::from_parts(
                Representation::Quat,
                {
                    let r = tq.rotate(pos);
                    [r[0] + tt[0], r[1] + tt[1], r[2] + tt[2]]
                },
                tq.mul(&q).canonicalized(),
            );
            let direct = ppd_decompose(&transformed, &cfg);
            let mapped: Vec<SupportPose> = ppd_decompose(&pose, &cfg)
                .into_iter()
                .map(|sp| {
                    let p = tq.rotate(sp.point);
                    SupportPose {
                        point: [p[0] + tt[0], p[1] + tt[1], p[2] + tt[2]],
                        direction: tq.rotate(sp.direction),
                    }
                })
                .collect();
            for (a, b) in direct.iter().zip(&mapped) {
                for j in 0..3 {
                    prop_assert!((a.point[j] - b.point[j]).abs() <= 1e-10);
                    prop_assert!((a.direction[j] - b.direction[j]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn part_cosine_is_bounded_by_part_count(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = if seed % 2 == 0 { Representation::Quat } else { Representation::SixD };
            let dim = rep.dim();
            let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
            };
            let d = PoseDelta::from_flat(rep, &mk(&mut rng));
            let g = PoseDelta::from_flat(rep, &mk(&mut rng));
            let p = rep.part_count() as f64;
            let c = part_cosine(&d, &g);
            prop_assert!(c <= p + 1e-12 && c >= -p - 1e-12);
        }
    }
}
