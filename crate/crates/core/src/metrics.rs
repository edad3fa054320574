//! Euler-angle error between predicted and target pose sequences.
//!
//! Convention: intrinsic z-y-x, `R = Rz(z) · Ry(y) · Rx(x)`, angles returned
//! in `(z, y, x)` order, radians.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

/// Horizons reported by default.
pub const MAE_HORIZONS: [usize; 4] = [6, 12, 18, 24];

pub const DEFAULT_STD_THRESHOLD: f64 = 1e-4;

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn axis_angle_to_matrix(v: [f64; 3]) -> Mat3 {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = theta2.sqrt();
    // sin(θ)/θ and (1 - cos θ)/θ², with Taylor series near zero
    let (a, b) = if theta < 1e-6 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let [x, y, z] = v;
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: f64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2;
        }
    }
    r
}

/// Intrinsic z-y-x angles `(z, y, x)` of a proper rotation. At gimbal lock
/// (`y = ±π/2`) the free angle is assigned to `z` and `x` is set to zero.
pub fn euler_from_matrix(r: &Mat3) -> [f64; 3] {
    let cy = (r[0][0] * r[0][0] + r[1][0] * r[1][0]).sqrt();
    let y = (-r[2][0]).atan2(cy);
    if cy < 1e-9 {
        let z = (-r[0][1]).atan2(r[1][1]);
        [z, y, 0.0]
    } else {
        let z = r[1][0].atan2(r[0][0]);
        let x = r[2][1].atan2(r[2][2]);
        [z, y, x]
    }
}

/// `Rz(z) · Ry(y) · Rx(x)`.
pub fn matrix_from_euler(angles: [f64; 3]) -> Mat3 {
    let [z, y, x] = angles;
    let (sz, cz) = z.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sx, cx) = x.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Error of one predicted sequence against its target.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `E_t` for every predicted frame.
    pub per_frame: Vec<f64>,
    /// Mean of `E_t` over the first `n` frames.
    pub mae_at: BTreeMap<usize, f64>,
    /// Set when no joint moved enough to be scored; every `E_t` is then 0.
    pub empty_selection: bool,
}

impl EvalResult {
    pub fn from_curve(per_frame: Vec<f64>, empty_selection: bool) -> Self {
        let mae_at = MAE_HORIZONS
            .iter()
            .filter(|&&n| n <= per_frame.len())
            .map(|&n| (n, cumulative_mean(&per_frame, n)))
            .collect();
        EvalResult {
            per_frame,
            mae_at,
            empty_selection,
        }
    }

    pub fn mae(&self, n: usize) -> Option<f64> {
        self.mae_at.get(&n).copied()
    }

    /// `frame,E` rows followed by one `mae@n,value` summary row per horizon.
    pub fn to_csv(&self, degrees: bool) -> String {
        let conv = |v: f64| if degrees { v.to_degrees() } else { v };
        let mut out = String::from("frame,E\n");
        for (t, e) in self.per_frame.iter().enumerate() {
            out.push_str(&format!("{},{}\n", t + 1, conv(*e)));
        }
        for (n, v) in &self.mae_at {
            out.push_str(&format!("mae@{n},{}\n", conv(*v)));
        }
        out
    }
}

/// MAE@n aggregation: mean of the per-frame error over frames `1..=n`.
pub fn cumulative_mean(per_frame: &[f64], n: usize) -> f64 {
    per_frame[..n].iter().sum::<f64>() / n as f64
}

fn euler_seq(seq: &Tensor) -> Vec<Vec<[f64; 3]>> {
    let (frames, joints) = (seq.shape()[0], seq.shape()[1]);
    (0..frames)
        .map(|t| {
            (0..joints)
                .map(|j| {
                    let v = [seq.get(&[t, j, 0]), seq.get(&[t, j, 1]), seq.get(&[t, j, 2])];
                    euler_from_matrix(&axis_angle_to_matrix(v))
                })
                .collect()
        })
        .collect()
}

/// Joints whose target Euler angles vary over the sequence: at least one
/// component has population standard deviation above `threshold`.
pub fn moving_joints(target_euler: &[Vec<[f64; 3]>], threshold: f64) -> Vec<usize> {
    let frames = target_euler.len() as f64;
    let joints = target_euler.first().map_or(0, Vec::len);
    (0..joints)
        .filter(|&j| {
            (0..3).any(|c| {
                let mean = target_euler.iter().map(|f| f[j][c]).sum::<f64>() / frames;
                let var = target_euler.iter().map(|f| (f[j][c] - mean).powi(2)).sum::<f64>() / frames;
                var.sqrt() > threshold
            })
        })
        .collect()
}

/// Per-frame `E_t = sqrt(Σ_{i∈I} ‖Euler(R_tgt,i) − Euler(R_pred,i)‖²)` over the
/// moving joints `I`, aggregated into MAE@n. Sequences are `[N, S, 3]`
/// axis-angle.
pub fn euler_mae(pred: &Tensor, target: &Tensor, std_threshold: f64) -> Result<EvalResult> {
    if pred.shape() != target.shape() || pred.rank() != 3 || pred.shape()[2] != 3 {
        return Err(Error::shape(format!(
            "euler_mae needs equal [N, S, 3] shapes, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let te = euler_seq(target);
    let pe = euler_seq(pred);
    let selected = moving_joints(&te, std_threshold);
    if selected.is_empty() {
        log::warn!("no target joint exceeds the motion threshold {std_threshold}; error defined as 0");
    }
    let per_frame = te
        .iter()
        .zip(&pe)
        .map(|(tf, pf)| {
            selected
                .iter()
                .map(|&j| (0..3).map(|c| (tf[j][c] - pf[j][c]).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(EvalResult::from_curve(per_frame, selected.is_empty()))
}

/// Averages per-frame error curves over many evaluated windows.
#[derive(Clone, Debug, Default)]
pub struct MaeAccumulator {
    sum: Vec<f64>,
    count: usize,
    empty: usize,
}

impl MaeAccumulator {
    pub fn push(&mut self, r: &EvalResult) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; r.per_frame.len()];
        }
        for (s, e) in self.sum.iter_mut().zip(&r.per_frame) {
            *s += e;
        }
        self.count += 1;
        if r.empty_selection {
            self.empty += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> EvalResult {
        let n = self.count.max(1) as f64;
        let curve = self.sum.iter().map(|s| s / n).collect();
        EvalResult::from_curve(curve, self.count > 0 && self.empty == self.count)
    }
}
