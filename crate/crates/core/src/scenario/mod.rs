//! Synthetic UAV flights observed by a base station with a camera and a ULA.
//!
//! World frame: `x` runs along the antenna array, `y` is array broadside and
//! the camera's optical axis, `z` points up. The camera sits at the base
//! station position.

mod dataset;
mod render;

pub use dataset::{
    build_dataset, generate_dataset, ingest_external, load_dataset, load_trajectory, write_dataset, Dataset,
    DatasetManifest, DatasetMeta, DatasetSpec, GeneratedDataset, ManifestRecord, Sample, Split,
};
pub use render::{decode_pgm, encode_pgm, projected_disk, render_frame, Disk, GrayFrame, RenderedFrame};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError, ChannelPath, Codebook, OfdmConfig};

/// Number of numeric features per time step.
pub const NUMERIC_DIM: usize = 7;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate flight box: axis {axis} has min {min} >= max {max}")]
    DegenerateBox { axis: usize, min: f64, max: f64 },
    #[error("trajectory of {len} steps is shorter than window + horizon = {needed}")]
    InsufficientTrajectoryLength { len: usize, needed: usize },
    #[error("sample {sample}: missing file {path}")]
    MissingFile { sample: String, path: String },
    #[error("sample {sample}: cannot decode {path}: {reason}")]
    Decode { sample: String, path: String, reason: String },
    #[error("schema violation in {record}: {reason}")]
    SchemaViolation { record: String, reason: String },
    #[error("sample {sample}: label {label} out of range for {num_beams} beams")]
    LabelOutOfRange { sample: String, label: usize, num_beams: usize },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlightBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl FlightBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub bs_position: [f64; 3],
    pub camera: CameraIntrinsics,
    pub flight_box: FlightBox,
    /// Inclusive speed range in m/s.
    pub speed_range: [f64; 2],
    pub sample_rate: f64,
    /// Observation window `T`.
    pub seq_len: usize,
    /// Prediction horizon `P`.
    pub horizon: usize,
    pub seed: u64,
    /// Steps per generated trajectory.
    pub trajectory_len: usize,
    /// Standard deviation of the per-step heading perturbation, radians.
    pub heading_noise: f64,
    /// Disk radius in pixels at `reference_distance`.
    pub disk_radius_px: f64,
    pub reference_distance: f64,
    /// Add a ground-reflected path when labeling.
    pub multipath: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            bs_position: [0.0, 0.0, 10.0],
            camera: CameraIntrinsics {
                focal_px: 30.0,
                width: 64,
                height: 64,
            },
            flight_box: FlightBox {
                min: [-40.0, 40.0, 15.0],
                max: [40.0, 90.0, 35.0],
            },
            speed_range: [1.5, 3.0],
            sample_rate: 1.0,
            seq_len: 10,
            horizon: 5,
            seed: 6,
            trajectory_len: 20,
            heading_noise: 0.03,
            disk_radius_px: 6.0,
            reference_distance: 40.0,
            multipath: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if self.camera.width < 16 || self.camera.height < 16 {
            return bad("camera width and height must be >= 16");
        }
        if !(self.camera.focal_px > 0.0) {
            return bad("focal_px must be > 0");
        }
        if self.seq_len == 0 || self.horizon == 0 {
            return bad("seq_len and horizon must be >= 1");
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample_rate must be > 0");
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("speed_range must satisfy 0 <= lo <= hi");
        }
        if !(self.heading_noise >= 0.0) {
            return bad("heading_noise must be >= 0");
        }
        if !(self.disk_radius_px > 0.0 && self.reference_distance > 0.0) {
            return bad("disk radius and reference distance must be > 0");
        }
        for axis in 0..3 {
            let (min, max) = (self.flight_box.min[axis], self.flight_box.max[axis]);
            if !(min < max) {
                return Err(ScenarioError::DegenerateBox { axis, min, max });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub timestamps: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn velocity(speed: f64, heading: f64, pitch: f64) -> [f64; 3] {
    [
        speed * pitch.cos() * heading.cos(),
        speed * pitch.cos() * heading.sin(),
        speed * pitch.sin(),
    ]
}

/// Piecewise-constant-velocity flight with Gaussian heading perturbations,
/// reflected at the flight-box walls. Speed is drawn once per trajectory.
pub fn gen_trajectory(cfg: &ScenarioConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bx = cfg.flight_box;
    let mut pos = [0.0; 3];
    for (axis, p) in pos.iter_mut().enumerate() {
        *p = rng.random_range(bx.min[axis]..bx.max[axis]);
    }
    let [lo, hi] = cfg.speed_range;
    let speed = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut pitch: f64 = rng.random_range(-0.15..0.15);
    let noise = Normal::new(0.0, cfg.heading_noise.max(0.0)).expect("finite noise");
    let dt = 1.0 / cfg.sample_rate;

    let n = cfg.trajectory_len;
    let mut out = Trajectory {
        positions: Vec::with_capacity(n),
        velocities: Vec::with_capacity(n),
        timestamps: Vec::with_capacity(n),
    };
    for step in 0..n {
        let v = velocity(speed, heading, pitch);
        out.positions.push(pos);
        out.velocities.push(v);
        out.timestamps.push(step as f64 * dt);

        for axis in 0..3 {
            pos[axis] += v[axis] * dt;
        }
        for axis in 0..3 {
            let (min, max) = (bx.min[axis], bx.max[axis]);
            let mut reflected = false;
            // A single reflection suffices unless a step exceeds the box width.
            for _ in 0..8 {
                if pos[axis] < min {
                    pos[axis] = 2.0 * min - pos[axis];
                    reflected = !reflected;
                } else if pos[axis] > max {
                    pos[axis] = 2.0 * max - pos[axis];
                    reflected = !reflected;
                } else {
                    break;
                }
            }
            pos[axis] = pos[axis].clamp(min, max);
            if reflected {
                match axis {
                    0 => heading = std::f64::consts::PI - heading,
                    1 => heading = -heading,
                    _ => pitch = -pitch,
                }
            }
        }
        if cfg.heading_noise > 0.0 {
            heading += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

/// `[x, y, z relative to the base station, vx, vy, vz, range]`.
pub fn numeric_features(traj: &Trajectory, idx: usize, bs_position: [f64; 3]) -> [f64; NUMERIC_DIM] {
    let p = traj.positions[idx];
    let v = traj.velocities[idx];
    let rel = [p[0] - bs_position[0], p[1] - bs_position[1], p[2] - bs_position[2]];
    let range = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
    [rel[0], rel[1], rel[2], v[0], v[1], v[2], range]
}

/// Line-of-sight path from the base station to `uav`, with `alpha = 1/range`.
pub fn los_path(bs_position: [f64; 3], uav: [f64; 3]) -> ChannelPath {
    let rel = [uav[0] - bs_position[0], uav[1] - bs_position[1], uav[2] - bs_position[2]];
    let horizontal = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
    let range = (horizontal * horizontal + rel[2] * rel[2]).sqrt().max(1e-9);
    ChannelPath {
        gain: Complex64::new(1.0 / range, 0.0),
        delay: 0.0,
        azimuth: rel[0].atan2(rel[1]),
        elevation: rel[2].atan2(horizontal),
    }
}

/// Paths used for labeling a UAV at `uav`.
pub fn label_paths(cfg: &ScenarioConfig, ofdm: &OfdmConfig, uav: [f64; 3]) -> Vec<ChannelPath> {
    let los = los_path(cfg.bs_position, uav);
    if !cfg.multipath {
        return vec![los];
    }
    // Ground bounce: mirror the UAV below z = 0.
    let mirror = [uav[0], uav[1], -uav[2]];
    let mut bounce = los_path(cfg.bs_position, mirror);
    let direct = 1.0 / los.gain.re;
    let reflected = 1.0 / bounce.gain.re;
    bounce.gain *= -0.3;
    bounce.delay = ((reflected - direct) / 299_792_458.0).min(ofdm.delay_window());
    vec![los, bounce]
}

/// Oracle beam index for a UAV at `uav`.
pub fn oracle_label(
    cfg: &ScenarioConfig,
    ofdm: &OfdmConfig,
    codebook: &Codebook,
    uav: [f64; 3],
    timestamp: f64,
) -> Result<usize> {
    let paths = label_paths(cfg, ofdm, uav);
    let ch = channel::channel_response(&paths, ofdm, codebook.num_elements(), timestamp)?;
    Ok(channel::optimal_beam(&ch, codebook, ofdm)?)
}
