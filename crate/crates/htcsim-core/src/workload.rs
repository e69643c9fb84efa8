//! Generators for HTC task streams and background HPC job streams, plus a
//! backlog-maintaining injector that keeps queued node-demand above a floor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DatasetId, TaskId};
use crate::overlay::{OsgPolicy, Task};
use crate::time::SimTime;

/// A scalar draw distribution, in the unit of the field that carries it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Dist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

impl Dist {
    pub fn constant(value: f64) -> Dist {
        Dist::Constant { value }
    }

    pub fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::InvalidSpec(msg));
        match *self {
            Dist::Constant { value } => {
                if !value.is_finite() || value < 0.0 {
                    return bad(format!("{what}: constant must be finite and nonnegative"));
                }
            }
            Dist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 {
                    return bad(format!("{what}: uniform bounds must be finite and nonnegative"));
                }
                if lo > hi {
                    return bad(format!("{what}: uniform lo {lo} > hi {hi}"));
                }
            }
            Dist::Lognormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite()) || sigma < 0.0 {
                    return bad(format!("{what}: lognormal needs finite mu and sigma >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dist::Lognormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { lo, hi } => (lo + hi) / 2.0,
            Dist::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }
}

fn default_est_factor() -> f64 {
    1.0
}

/// Shape of one HTC task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtcSpec {
    pub n_tasks: u32,
    pub runtime_h: Dist,
    pub input_gb: Dist,
    pub output_gb: Dist,
    pub memory_gb: f64,
    #[serde(default = "crate::workload::one_u32")]
    pub cores: u32,
    #[serde(default)]
    pub priority: i32,
    /// Broker-visible estimate = actual * factor (brokers cannot see the
    /// actual runtime; factors below 1 exercise the preemption path).
    #[serde(default = "default_est_factor")]
    pub est_runtime_factor: f64,
    /// Number of distinct input datasets shared round-robin; zero gives
    /// every task its own dataset.
    #[serde(default)]
    pub distinct_datasets: u32,
}

pub(crate) fn one_u32() -> u32 {
    1
}

impl HtcSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.runtime_h.validate("runtime_h")?;
        self.input_gb.validate("input_gb")?;
        self.output_gb.validate("output_gb")?;
        if !(self.memory_gb.is_finite() && self.memory_gb > 0.0) {
            return Err(WorkloadError::InvalidSpec("memory_gb must be positive".into()));
        }
        if self.cores == 0 {
            return Err(WorkloadError::InvalidSpec("cores must be at least 1".into()));
        }
        if !(self.est_runtime_factor.is_finite() && self.est_runtime_factor > 0.0) {
            return Err(WorkloadError::InvalidSpec("est_runtime_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Background HPC job stream: Poisson arrivals of power-of-two node jobs,
/// optionally topped up to a queued node-demand floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpcBackgroundSpec {
    pub arrival_per_h: f64,
    /// Largest job size as a fraction of the cluster; sizes are powers of
    /// two up to this bound.
    pub nodes_max_fraction: f64,
    pub walltime_h: Dist,
    #[serde(default)]
    pub priority: i32,
    /// Inject jobs after each scheduler cycle until queued node-demand
    /// reaches this floor. Zero disables the injector.
    #[serde(default)]
    pub target_backlog_nodes: u32,
}

impl HpcBackgroundSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.arrival_per_h.is_finite() && self.arrival_per_h >= 0.0) {
            return Err(WorkloadError::InvalidSpec("arrival_per_h must be nonnegative".into()));
        }
        if !(self.nodes_max_fraction > 0.0 && self.nodes_max_fraction <= 1.0) {
            return Err(WorkloadError::InvalidSpec("nodes_max_fraction must be in (0, 1]".into()));
        }
        self.walltime_h.validate("walltime_h")
    }

    /// Power-of-two node counts up to `nodes_max_fraction` of the cluster.
    pub fn node_choices(&self, cluster_nodes: u32) -> Vec<u32> {
        let max = ((f64::from(cluster_nodes) * self.nodes_max_fraction) as u32).max(1);
        let mut v = Vec::new();
        let mut p = 1u32;
        while p <= max {
            v.push(p);
            p = p.saturating_mul(2);
        }
        v
    }

    pub fn draw_shape(&self, cluster_nodes: u32, rng: &mut ChaCha8Rng) -> (u32, SimTime) {
        let choices = self.node_choices(cluster_nodes);
        let nodes = choices[rng.random_range(0..choices.len())];
        let walltime = SimTime::from_hours_f64(self.walltime_h.sample(rng));
        (nodes, walltime.max(SimTime::from_ms(1)))
    }

    pub fn draw_interarrival(&self, rng: &mut ChaCha8Rng) -> Option<SimTime> {
        if self.arrival_per_h <= 0.0 {
            return None;
        }
        let hours = Exp::new(self.arrival_per_h).expect("validated rate").sample(rng);
        Some(SimTime::from_hours_f64(hours))
    }
}

const MAX_RESAMPLE: u32 = 10_000;

/// Generates the task stream for `spec`. Draws come from the dedicated
/// `htc.*` streams of `rng` sources, so the stream for a fixed seed is
/// independent of any other stochastic source.
///
/// With an OSG policy every draw is rejection-resampled into compliance;
/// a spec whose fixed fields (memory, cores) violate the policy is invalid.
pub fn generate_tasks(
    spec: &HtcSpec,
    osg: Option<&OsgPolicy>,
    runtime_rng: &mut ChaCha8Rng,
    input_rng: &mut ChaCha8Rng,
    output_rng: &mut ChaCha8Rng,
) -> Result<Vec<Task>, WorkloadError> {
    spec.validate()?;
    if let Some(policy) = osg {
        if !policy.check(spec.cores, spec.memory_gb, SimTime::ZERO, 0.0).is_empty() {
            return Err(WorkloadError::InvalidSpec(
                "memory_gb/cores violate the OSG policy; every draw would be rejected".into(),
            ));
        }
    }
    // Shared datasets draw their size once.
    let shared_sizes: Vec<f64> = if spec.distinct_datasets > 0 {
        (0..spec.distinct_datasets).map(|_| spec.input_gb.sample(input_rng).max(0.0)).collect()
    } else {
        Vec::new()
    };

    let max_runtime = osg.map(|p| SimTime::from_hours_f64(p.max_runtime_h));
    let max_io = osg.map(|p| p.max_io_gb);
    let mut tasks = Vec::with_capacity(spec.n_tasks as usize);
    for i in 0..u64::from(spec.n_tasks) {
        let mut attempts = 0;
        let (actual, est) = loop {
            let actual_h = spec.runtime_h.sample(runtime_rng);
            let actual = SimTime::from_hours_f64(actual_h.max(0.0)).max(SimTime::from_ms(1));
            let est = SimTime::from_hours_f64((actual_h * spec.est_runtime_factor).max(0.0))
                .max(SimTime::from_ms(1));
            let ok = match max_runtime {
                Some(limit) => est <= limit && actual <= limit,
                None => true,
            };
            if ok {
                break (actual, est);
            }
            attempts += 1;
            if attempts > MAX_RESAMPLE {
                return Err(WorkloadError::InvalidSpec(
                    "runtime_h cannot satisfy the OSG walltime bound".into(),
                ));
            }
        };
        let (dataset, input_gb) = if spec.distinct_datasets > 0 {
            let d = i % u64::from(spec.distinct_datasets);
            (DatasetId(d), shared_sizes[d as usize])
        } else {
            (DatasetId(i), spec.input_gb.sample(input_rng).max(0.0))
        };
        let mut attempts = 0;
        let output_gb = loop {
            let out = spec.output_gb.sample(output_rng).max(0.0);
            match max_io {
                Some(limit) if input_gb + out > limit => {
                    attempts += 1;
                    if attempts > MAX_RESAMPLE {
                        return Err(WorkloadError::InvalidSpec(
                            "input_gb + output_gb cannot satisfy the OSG IO bound".into(),
                        ));
                    }
                }
                _ => break out,
            }
        };
        tasks.push(Task::new(
            TaskId(i),
            spec.cores,
            spec.memory_gb,
            est,
            actual,
            input_gb,
            output_gb,
            dataset,
            spec.priority,
            SimTime::ZERO,
        ));
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn spec(n: u32) -> HtcSpec {
        HtcSpec {
            n_tasks: n,
            runtime_h: Dist::constant(1.0),
            input_gb: Dist::constant(0.4),
            output_gb: Dist::constant(0.1),
            memory_gb: 1.5,
            cores: 1,
            priority: 0,
            est_runtime_factor: 1.0,
            distinct_datasets: 0,
        }
    }

    fn rngs() -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
        (
            ChaCha8Rng::seed_from_u64(1),
            ChaCha8Rng::seed_from_u64(2),
            ChaCha8Rng::seed_from_u64(3),
        )
    }

    #[test]
    fn constant_spec_gives_identical_tasks() {
        let (mut r1, mut r2, mut r3) = rngs();
        let tasks = generate_tasks(&spec(100), None, &mut r1, &mut r2, &mut r3).unwrap();
        assert_eq!(tasks.len(), 100);
        assert!(tasks
            .iter()
            .all(|t| t.actual_runtime == SimTime::from_hours_f64(1.0) && t.input_gb == 0.4));
        // distinct datasets by default
        assert_eq!(tasks[3].dataset, DatasetId(3));
    }

    #[test]
    fn same_seed_same_stream() {
        let make = || {
            let (mut r1, mut r2, mut r3) = rngs();
            let mut s = spec(50);
            s.runtime_h = Dist::Lognormal { mu: 0.5, sigma: 0.4 };
            let tasks = generate_tasks(&s, None, &mut r1, &mut r2, &mut r3).unwrap();
            tasks.iter().map(|t| t.actual_runtime.as_ms()).collect::<Vec<_>>()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn invalid_uniform_rejected() {
        let mut s = spec(10);
        s.runtime_h = Dist::Uniform { lo: 2.0, hi: 1.0 };
        let (mut r1, mut r2, mut r3) = rngs();
        let err = generate_tasks(&s, None, &mut r1, &mut r2, &mut r3).unwrap_err();
        assert!(matches!(err, WorkloadError::InvalidSpec(_)));
    }

    #[test]
    fn osg_resampling_respects_bounds() {
        let mut s = spec(2_000);
        s.runtime_h = Dist::Lognormal { mu: 4.0f64.ln(), sigma: 0.9 };
        s.output_gb = Dist::Uniform { lo: 0.0, hi: 12.0 };
        let policy = OsgPolicy::default();
        let (mut r1, mut r2, mut r3) = rngs();
        let tasks = generate_tasks(&s, Some(&policy), &mut r1, &mut r2, &mut r3).unwrap();
        let limit = SimTime::from_hours_f64(12.0);
        for t in &tasks {
            assert!(t.est_runtime <= limit && t.actual_runtime <= limit);
            assert!(t.input_gb + t.output_gb <= 10.0);
            assert!(policy.validate(t).is_empty());
        }
    }

    #[test]
    fn osg_impossible_spec_is_invalid() {
        let mut s = spec(10);
        s.memory_gb = 4.0;
        let policy = OsgPolicy::default();
        let (mut r1, mut r2, mut r3) = rngs();
        let err = generate_tasks(&s, Some(&policy), &mut r1, &mut r2, &mut r3).unwrap_err();
        assert!(matches!(err, WorkloadError::InvalidSpec(_)));
    }

    #[test]
    fn shared_datasets_share_sizes() {
        let mut s = spec(20);
        s.distinct_datasets = 5;
        s.input_gb = Dist::Uniform { lo: 0.1, hi: 2.0 };
        let (mut r1, mut r2, mut r3) = rngs();
        let tasks = generate_tasks(&s, None, &mut r1, &mut r2, &mut r3).unwrap();
        for t in &tasks {
            assert!(t.dataset.0 < 5);
        }
        assert_eq!(tasks[0].dataset, tasks[5].dataset);
        assert_eq!(tasks[0].input_gb, tasks[5].input_gb);
    }

    #[test]
    fn background_node_choices_are_powers_of_two() {
        let bg = HpcBackgroundSpec {
            arrival_per_h: 10.0,
            nodes_max_fraction: 0.25,
            walltime_h: Dist::Uniform { lo: 1.0, hi: 24.0 },
            priority: 0,
            target_backlog_nodes: 0,
        };
        assert_eq!(bg.node_choices(500), vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(bg.node_choices(4), vec![1]);
    }
}
