use nalgebra::DVector;

use crate::kinemodel::Configuration;
use crate::komo::Trajectory;

/// Fixed-rate playback of a planned trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrajectory {
    pub rate_hz: f64,
    pub configs: Vec<Configuration>,
    /// Index into `configs` of each planned waypoint.
    pub waypoint_samples: Vec<usize>,
}

impl DenseTrajectory {
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Samples for one segment: `max(1, max_i ceil(|Δq_i| / v_i · f_s))`.
pub fn segment_sample_count(dq: &DVector<f64>, v_max: &DVector<f64>, rate_hz: f64) -> usize {
    dq.iter().zip(v_max.iter()).map(|(d, v)| (d.abs() / v * rate_hz - 1e-9).ceil() as usize).max().unwrap_or(0).max(1)
}

/// Linear interpolation between waypoints; the final waypoint closes the sequence.
pub fn interpolate(traj: &Trajectory, v_max: &DVector<f64>, rate_hz: f64) -> DenseTrajectory {
    let x: Vec<DVector<f64>> = traj.configs.iter().map(Configuration::to_vector).collect();
    let mut configs = Vec::new();
    let mut waypoint_samples = Vec::with_capacity(x.len());
    for w in x.windows(2) {
        let dq = &w[1] - &w[0];
        let n = segment_sample_count(&dq, v_max, rate_hz);
        waypoint_samples.push(configs.len());
        for j in 0..n {
            let q = if j == 0 { w[0].clone() } else { &w[0] + &dq * (j as f64 / n as f64) };
            configs.push(Configuration::from_slice(q.as_slice()));
        }
    }
    waypoint_samples.push(configs.len());
    configs.push(traj.configs.last().expect("trajectory has at least one waypoint").clone());
    DenseTrajectory { rate_hz, configs, waypoint_samples }
}
