use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{quat_from_axis_angle, quat_mul, Pose, Tick, TraceWindow, TICK_SECONDS};

/// Operator motion, queried exactly once per tick in increasing order.
pub trait TrajectorySource: Send {
    fn pose_at(&mut self, tick: Tick) -> Pose;

    /// A live feed that has gone away; the episode should end.
    fn disconnected(&self) -> bool {
        false
    }

    /// Motion arrives in real time, so the loop must run at wall-clock pace.
    fn wall_clock(&self) -> bool {
        false
    }
}

/// Schedules ticks at 1 kHz against a fixed epoch, so sleep overshoot never
/// accumulates. A tick whose slot has already passed by more than the slack
/// runs at once and is reported late.
#[derive(Debug, Clone, Copy)]
pub struct Pacer {
    epoch: Instant,
    slack: Duration,
}

impl Pacer {
    pub const DEFAULT_SLACK: Duration = Duration::from_millis(2);

    pub fn start(slack: Duration) -> Self {
        Self {
            epoch: Instant::now(),
            slack,
        }
    }

    /// Blocks until the slot of `tick`; true when the loop was already late.
    pub fn wait(&self, tick: Tick) -> bool {
        let slot = self.epoch + Duration::from_millis(tick);
        let now = Instant::now();
        if now < slot {
            std::thread::sleep(slot - now);
            false
        } else {
            now - slot > self.slack
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LissajousSpec {
    /// Defaults to the end-effector position at the chain's home pose.
    pub center: Option<[f64; 3]>,
    pub amplitude: [f64; 3],
    pub freq_hz: [f64; 3],
    pub phase: [f64; 3],
    pub rot_axis: [f64; 3],
    /// Peak rotation about `rot_axis`, rad.
    pub rot_amplitude: f64,
    pub rot_freq_hz: f64,
    /// Standard deviation of additive position noise, m.
    pub noise_std: f64,
}

impl Default for LissajousSpec {
    fn default() -> Self {
        Self {
            center: None,
            amplitude: [0.08, 0.06, 0.03],
            freq_hz: [0.25, 0.35, 0.15],
            phase: [0.0, 0.5, 1.0],
            rot_axis: [0.0, 0.0, 1.0],
            rot_amplitude: 0.2,
            rot_freq_hz: 0.1,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinJerkSpec {
    pub center: Option<[f64; 3]>,
    /// Offsets from the center visited in a loop, m.
    pub waypoints: Vec<[f64; 3]>,
    pub segment_ms: Tick,
}

impl Default for MinJerkSpec {
    fn default() -> Self {
        Self {
            center: None,
            waypoints: vec![
                [0.08, 0.0, 0.0],
                [0.0, 0.06, 0.02],
                [-0.08, 0.0, 0.0],
                [0.0, -0.06, -0.02],
            ],
            segment_ms: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Lissajous(LissajousSpec),
    MinJerk(MinJerkSpec),
    /// Trace CSV (`tick,px,py,pz,qx,qy,qz,qw`) replayed from its first tick.
    Recorded {
        path: PathBuf,
    },
    /// Samples pushed by a gateway session.
    Live,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Lissajous(LissajousSpec::default())
    }
}

impl SourceSpec {
    /// Builds the source; `home` anchors unspecified centers and orientation.
    /// Relative recorded paths resolve against `base_dir`.
    pub fn build(
        &self,
        home: &Pose,
        seed: u64,
        base_dir: Option<&Path>,
    ) -> Result<Box<dyn TrajectorySource>, PipelineError> {
        match self {
            SourceSpec::Lissajous(spec) => Ok(Box::new(Lissajous::new(spec.clone(), home, seed))),
            SourceSpec::MinJerk(spec) => Ok(Box::new(MinimumJerk::new(spec.clone(), home)?)),
            SourceSpec::Recorded { path } => {
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                Ok(Box::new(Recorded::load(&path)?))
            }
            SourceSpec::Live => Err(PipelineError::Validation(
                "a live source needs a gateway feed; attach one with LiveSource".into(),
            )),
        }
    }
}

pub struct Lissajous {
    spec: LissajousSpec,
    center: [f64; 3],
    base: crate::model::Quat,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Lissajous {
    pub fn new(spec: LissajousSpec, home: &Pose, seed: u64) -> Self {
        let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));
        Self {
            center: spec.center.unwrap_or(home.position),
            base: home.orientation,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1155),
            noise,
            spec,
        }
    }

    /// Noise-free pose at `tick`.
    pub fn clean_pose(&self, tick: Tick) -> Pose {
        let t = tick as f64 * TICK_SECONDS;
        let tau = std::f64::consts::TAU;
        let mut p = self.center;
        for (i, c) in p.iter_mut().enumerate() {
            *c += self.spec.amplitude[i] * (tau * self.spec.freq_hz[i] * t + self.spec.phase[i]).sin();
        }
        let ang = self.spec.rot_amplitude * (tau * self.spec.rot_freq_hz * t).sin();
        let q = quat_mul(&quat_from_axis_angle(self.spec.rot_axis, ang), &self.base);
        Pose::new(p, q).expect("unit quaternion")
    }
}

impl TrajectorySource for Lissajous {
    fn pose_at(&mut self, tick: Tick) -> Pose {
        let mut p = self.clean_pose(tick);
        if let Some(n) = &self.noise {
            for c in &mut p.position {
                *c += n.sample(&mut self.rng);
            }
        }
        p
    }
}

/// Point-to-point minimum-jerk segments through a closed loop of waypoints.
pub struct MinimumJerk {
    points: Vec<[f64; 3]>,
    segment: Tick,
    orientation: crate::model::Quat,
}

impl MinimumJerk {
    pub fn new(spec: MinJerkSpec, home: &Pose) -> Result<Self, PipelineError> {
        if spec.waypoints.len() < 2 || spec.segment_ms == 0 {
            return Err(PipelineError::Validation(
                "minimum-jerk source needs two waypoints and a positive segment length".into(),
            ));
        }
        let c = spec.center.unwrap_or(home.position);
        let points = spec
            .waypoints
            .iter()
            .map(|w| [c[0] + w[0], c[1] + w[1], c[2] + w[2]])
            .collect();
        Ok(Self {
            points,
            segment: spec.segment_ms,
            orientation: home.orientation,
        })
    }
}

impl TrajectorySource for MinimumJerk {
    fn pose_at(&mut self, tick: Tick) -> Pose {
        let n = self.points.len();
        let k = (tick / self.segment) as usize;
        let s = (tick % self.segment) as f64 / self.segment as f64;
        let blend = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let a = self.points[k % n];
        let b = self.points[(k + 1) % n];
        let p = [0, 1, 2].map(|i| a[i] + blend * (b[i] - a[i]));
        Pose {
            position: p,
            orientation: self.orientation,
        }
    }
}

/// Replays a recorded trace under zero-order hold, holding the last pose
/// once the recording ends.
pub struct Recorded {
    trace: TraceWindow,
    offset: Tick,
}

impl Recorded {
    pub fn new(trace: TraceWindow) -> Result<Self, PipelineError> {
        let offset = trace
            .first_tick()
            .ok_or_else(|| PipelineError::Validation("recorded trace is empty".into()))?;
        Ok(Self { trace, offset })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let file = std::fs::File::open(path)
            .map_err(|e| PipelineError::Validation(format!("cannot open {}: {e}", path.display())))?;
        Self::new(TraceWindow::read_csv(file)?)
    }

    /// Ticks covered by the recording.
    pub fn span(&self) -> Tick {
        self.trace.last_tick().unwrap_or(self.offset) - self.offset + 1
    }
}

impl TrajectorySource for Recorded {
    fn pose_at(&mut self, tick: Tick) -> Pose {
        *self.trace.at(self.offset + tick).expect("non-empty trace")
    }
}

/// Latest-value source fed through a single-producer channel.
pub struct LiveSource {
    rx: Receiver<Pose>,
    latest: Pose,
    disconnected: bool,
    wall_clock: bool,
}

impl LiveSource {
    /// Consumed as fast as the loop runs; for scripted feeds.
    pub fn new(rx: Receiver<Pose>, initial: Pose) -> Self {
        Self {
            rx,
            latest: initial,
            disconnected: false,
            wall_clock: false,
        }
    }

    /// Consumed by a loop paced at wall-clock time; for human operators.
    pub fn paced(rx: Receiver<Pose>, initial: Pose) -> Self {
        Self {
            wall_clock: true,
            ..Self::new(rx, initial)
        }
    }
}

impl TrajectorySource for LiveSource {
    fn pose_at(&mut self, _tick: Tick) -> Pose {
        loop {
            match self.rx.try_recv() {
                Ok(p) => self.latest = p,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    self.disconnected = true;
                    break;
                }
            }
        }
        self.latest
    }

    fn disconnected(&self) -> bool {
        self.disconnected
    }

    fn wall_clock(&self) -> bool {
        self.wall_clock
    }
}

/// Source over an in-memory list of poses, one per tick, holding the last.
pub struct Scripted {
    poses: Vec<Pose>,
}

impl Scripted {
    pub fn new(poses: Vec<Pose>) -> Self {
        assert!(!poses.is_empty(), "scripted source needs poses");
        Self { poses }
    }
}

impl TrajectorySource for Scripted {
    fn pose_at(&mut self, tick: Tick) -> Pose {
        self.poses[(tick as usize).min(self.poses.len() - 1)]
    }
}
