//! Scenario files: the hand-editable TOML description of one simulation,
//! its validation diagnostics, named presets, and `key=value` overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterConfig, Placement, TorusDims};
use crate::dataplane::DataConfig;
use crate::overlay::{OverlayConfig, OverlayMode};
use crate::rng::fnv1a64;
use crate::time::SimTime;
use crate::workload::{Dist, HpcBackgroundSpec, HtcSpec, WorkloadError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_h: f64,
    #[serde(default = "default_sample_period")]
    pub sample_period_s: f64,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    pub cluster: ClusterScenario,
    #[serde(default)]
    pub overlay: OverlayScenario,
    #[serde(default)]
    pub data: DataScenario,
    #[serde(default)]
    pub workload: WorkloadScenario,
}

fn default_sample_period() -> f64 {
    60.0
}

fn default_warmup() -> f64 {
    7_200.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterScenario {
    pub nodes: u32,
    #[serde(default = "default_cores")]
    pub cores_per_node: u32,
    #[serde(default = "default_node_memory")]
    pub memory_gb: f64,
    /// Torus extents [x, y, z]; derived near-cubic when omitted.
    #[serde(default)]
    pub torus: Option<[u32; 3]>,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default = "default_compactness")]
    pub compactness_limit: f64,
    #[serde(default = "default_period")]
    pub scheduler_period_s: f64,
    #[serde(default = "default_overestimate")]
    pub overestimate_factor: f64,
}

fn default_cores() -> u32 {
    32
}
fn default_node_memory() -> f64 {
    64.0
}
fn default_placement() -> Placement {
    Placement::Transparent
}
fn default_compactness() -> f64 {
    2.0
}
fn default_period() -> f64 {
    60.0
}
fn default_overestimate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayScenario {
    pub mode: OverlayMode,
    #[serde(default)]
    pub target_pilots: u32,
    #[serde(default = "default_pilot_nodes")]
    pub pilot_nodes: u32,
    #[serde(default = "default_pilot_walltime")]
    pub pilot_walltime_h: f64,
    #[serde(default)]
    pub pilot_priority: i32,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_interval_min: f64,
    #[serde(default = "default_true")]
    pub osg_policy: bool,
    #[serde(default = "default_latency")]
    pub startup_latency_s: f64,
    #[serde(default = "default_period")]
    pub broker_period_s: f64,
    #[serde(default = "default_wrapper_walltime")]
    pub wrapper_max_walltime_h: f64,
    #[serde(default)]
    pub wrapper_priority: i32,
}

fn default_pilot_nodes() -> u32 {
    4
}
fn default_pilot_walltime() -> f64 {
    12.0
}
fn default_checkpoint() -> f64 {
    30.0
}
fn default_true() -> bool {
    true
}
fn default_latency() -> f64 {
    60.0
}
fn default_wrapper_walltime() -> f64 {
    12.0
}

impl Default for OverlayScenario {
    fn default() -> Self {
        OverlayScenario {
            mode: OverlayMode::Glidein,
            target_pilots: 0,
            pilot_nodes: default_pilot_nodes(),
            pilot_walltime_h: default_pilot_walltime(),
            pilot_priority: 0,
            checkpoint_interval_min: default_checkpoint(),
            osg_policy: true,
            startup_latency_s: default_latency(),
            broker_period_s: default_period(),
            wrapper_max_walltime_h: default_wrapper_walltime(),
            wrapper_priority: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataScenario {
    #[serde(flatten)]
    pub config: DataConfig,
    /// Insert every task's input dataset into the cache at time zero.
    #[serde(default)]
    pub prepopulate_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WorkloadScenario {
    #[serde(default)]
    pub htc: Option<HtcSpec>,
    #[serde(default)]
    pub background: Option<HpcBackgroundSpec>,
}

/// One schema violation, pointing at the offending key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// 64-bit content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_toml().as_bytes()))
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_hours_f64(self.duration_h)
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(Diagnostic { path: path.to_string(), message });
        };
        if self.schema_version != SCHEMA_VERSION {
            push(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            );
        }
        if !(self.duration_h.is_finite() && self.duration_h > 0.0) {
            push("duration_h", "must be positive".into());
        }
        if !(self.sample_period_s.is_finite() && self.sample_period_s > 0.0) {
            push("sample_period_s", "must be positive".into());
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            push("warmup_s", "must be nonnegative".into());
        }

        let c = &self.cluster;
        if c.nodes == 0 {
            push("cluster.nodes", "must be at least 1".into());
        }
        if c.cores_per_node == 0 {
            push("cluster.cores_per_node", "must be at least 1".into());
        }
        if let Some([x, y, z]) = c.torus {
            if x == 0 || y == 0 || z == 0 {
                push("cluster.torus", "extents must be positive".into());
            } else if x * y * z != c.nodes {
                push(
                    "cluster.torus",
                    format!("extents {x}x{y}x{z} = {} do not cover cluster.nodes = {}", x * y * z, c.nodes),
                );
            }
        }
        if !(c.compactness_limit.is_finite() && c.compactness_limit > 1.0) {
            push("cluster.compactness_limit", "must exceed 1.0".into());
        }
        if !(c.scheduler_period_s.is_finite() && c.scheduler_period_s > 0.0) {
            push("cluster.scheduler_period_s", "must be positive".into());
        }
        if !(c.overestimate_factor.is_finite() && c.overestimate_factor >= 1.0) {
            push("cluster.overestimate_factor", "must be at least 1.0".into());
        }

        let o = &self.overlay;
        if o.pilot_nodes == 0 {
            push("overlay.pilot_nodes", "must be at least 1".into());
        } else if o.target_pilots > 0 && o.pilot_nodes > c.nodes {
            push(
                "overlay.pilot_nodes",
                format!("{} exceeds cluster.nodes = {}", o.pilot_nodes, c.nodes),
            );
        }
        if !(o.pilot_walltime_h.is_finite() && o.pilot_walltime_h > 0.0) {
            push("overlay.pilot_walltime_h", "must be positive".into());
        }
        if !(o.checkpoint_interval_min.is_finite() && o.checkpoint_interval_min >= 0.0) {
            push("overlay.checkpoint_interval_min", "must be nonnegative".into());
        }
        if !(o.startup_latency_s.is_finite() && o.startup_latency_s >= 0.0) {
            push("overlay.startup_latency_s", "must be nonnegative".into());
        }
        if !(o.broker_period_s.is_finite() && o.broker_period_s > 0.0) {
            push("overlay.broker_period_s", "must be positive".into());
        }
        if !(o.wrapper_max_walltime_h.is_finite() && o.wrapper_max_walltime_h > 0.0) {
            push("overlay.wrapper_max_walltime_h", "must be positive".into());
        }

        let d = &self.data.config;
        if d.dtn_count == 0 {
            push("data.dtn_count", "must be at least 1".into());
        }
        for (path, v) in [
            ("data.per_dtn_gbps", d.per_dtn_gbps),
            ("data.stream_cap_gbps", d.stream_cap_gbps),
            ("data.fs_bw_gbps", d.fs_bw_gbps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                push(path, "must be positive".into());
            }
        }
        if !(d.cache_gb.is_finite() && d.cache_gb >= 0.0) {
            push("data.cache_gb", "must be nonnegative".into());
        }
        if !(d.credential.lifetime_days.is_finite() && d.credential.lifetime_days > 0.0) {
            push("data.credential.lifetime_days", "must be positive".into());
        }
        if !(d.credential.renewal_days.is_finite() && d.credential.renewal_days > 0.0) {
            push("data.credential.renewal_days", "must be positive".into());
        }

        if let Some(htc) = &self.workload.htc {
            if let Err(WorkloadError::InvalidSpec(msg)) = htc.validate() {
                push("workload.htc", msg);
            }
            if o.osg_policy {
                let policy = crate::overlay::OsgPolicy::default();
                if !policy.check(htc.cores, htc.memory_gb, SimTime::ZERO, 0.0).is_empty() {
                    push(
                        "workload.htc.memory_gb",
                        "fixed task shape violates the enabled OSG policy".into(),
                    );
                }
            }
        }
        if let Some(bg) = &self.workload.background {
            if let Err(WorkloadError::InvalidSpec(msg)) = bg.validate() {
                push("workload.background", msg);
            }
            if bg.target_backlog_nodes > 0 && bg.arrival_per_h <= 0.0 && bg.walltime_h.mean() <= 0.0
            {
                push("workload.background.walltime_h", "injector needs a positive walltime".into());
            }
        }
        out
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        let c = &self.cluster;
        let torus = match c.torus {
            Some([x, y, z]) => TorusDims::new(x, y, z),
            None => TorusDims::for_nodes(c.nodes),
        };
        ClusterConfig {
            nodes: c.nodes,
            cores_per_node: c.cores_per_node,
            memory_gb: c.memory_gb,
            torus,
            placement: c.placement,
            compactness_limit: c.compactness_limit,
            scheduler_period: SimTime::from_secs_f64(c.scheduler_period_s),
            overestimate_factor: c.overestimate_factor,
        }
    }

    pub fn overlay_config(&self) -> OverlayConfig {
        let o = &self.overlay;
        OverlayConfig {
            mode: o.mode,
            target_pilots: o.target_pilots,
            pilot_nodes: o.pilot_nodes,
            pilot_walltime: SimTime::from_hours_f64(o.pilot_walltime_h),
            pilot_priority: o.pilot_priority,
            checkpoint_interval: SimTime::from_secs_f64(o.checkpoint_interval_min * 60.0),
            osg_policy: o.osg_policy,
            startup_latency: SimTime::from_secs_f64(o.startup_latency_s),
            broker_period: SimTime::from_secs_f64(o.broker_period_s),
            wrapper_max_walltime: SimTime::from_hours_f64(o.wrapper_max_walltime_h),
            wrapper_priority: o.wrapper_priority,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        self.data.config
    }

    /// Applies a `key=value` override by dotted path, e.g.
    /// `cluster.placement=transparent` or `overlay.target_pilots=0`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Scenario, ScenarioError> {
        let mut root: toml::Value =
            toml::from_str(&self.to_toml()).expect("roundtrip of a valid scenario");
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut cursor = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor.as_table_mut().ok_or_else(|| {
                ScenarioError::Override(key.into(), format!("`{}` is not a table", parts[..i].join(".")))
            })?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let text = toml::to_string(&root).expect("value serializes");
        Ok(Scenario::from_toml(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

const BLUE_WATERS_NODES: f64 = 20_000.0;
const TITAN_NODES: f64 = 18_688.0;
const HTC_CAMPAIGN_TASKS: f64 = 100_000.0;

fn scaled(base: f64, scale: f64, min: u32) -> u32 {
    ((base * scale).round() as u32).max(min)
}

/// Poisson rate that keeps roughly `load` of the cluster busy with
/// background jobs of the given shape distribution.
fn arrival_rate_for_load(nodes: u32, load: f64, bg: &HpcBackgroundSpec) -> f64 {
    let choices = bg.node_choices(nodes);
    let mean_nodes = choices.iter().map(|n| f64::from(*n)).sum::<f64>() / choices.len() as f64;
    let mean_walltime_h = bg.walltime_h.mean();
    f64::from(nodes) * load / (mean_nodes * mean_walltime_h)
}

/// Builds one of the named scenarios, scaled down to desk size by `scale`.
pub fn preset(name: &str, scale: f64) -> Result<Scenario, WorkloadError> {
    if !(scale.is_finite() && scale > 0.0 && scale <= 1.0) {
        return Err(WorkloadError::InvalidSpec(format!("scale {scale} not in (0, 1]")));
    }
    match name {
        // Matched-filter campaign staged from a remote hub onto pilots.
        "ligo" => {
            let nodes = scaled(BLUE_WATERS_NODES, scale, 4);
            let mut bg = HpcBackgroundSpec {
                arrival_per_h: 0.0,
                nodes_max_fraction: 0.25,
                walltime_h: Dist::Uniform { lo: 1.0, hi: 24.0 },
                priority: 0,
                target_backlog_nodes: 0,
            };
            bg.arrival_per_h = arrival_rate_for_load(nodes, 0.7, &bg);
            Ok(Scenario {
                schema_version: SCHEMA_VERSION,
                name: "ligo".into(),
                seed: 0,
                duration_h: 24.0,
                sample_period_s: 60.0,
                warmup_s: 7_200.0,
                cluster: ClusterScenario {
                    nodes,
                    cores_per_node: 32,
                    memory_gb: 64.0,
                    torus: None,
                    placement: Placement::Transparent,
                    compactness_limit: 2.0,
                    scheduler_period_s: 60.0,
                    overestimate_factor: 1.0,
                },
                overlay: OverlayScenario {
                    mode: OverlayMode::Glidein,
                    target_pilots: (nodes / 16).max(1),
                    pilot_nodes: 4.min(nodes),
                    pilot_walltime_h: 12.0,
                    ..OverlayScenario::default()
                },
                data: DataScenario::default(),
                workload: WorkloadScenario {
                    htc: Some(HtcSpec {
                        n_tasks: scaled(HTC_CAMPAIGN_TASKS, scale, 1),
                        runtime_h: Dist::Lognormal { mu: 4.0f64.ln(), sigma: 0.5 },
                        input_gb: Dist::constant(0.4),
                        output_gb: Dist::constant(0.1),
                        memory_gb: 1.5,
                        cores: 1,
                        priority: 0,
                        est_runtime_factor: 1.0,
                        distinct_datasets: 0,
                    }),
                    background: Some(bg),
                },
            })
        }
        // Topology-aware cluster saturated to a 4x node backlog, with a
        // glidein overlay scavenging the placement holes. The compactness
        // limit and walltime padding are calibrated so the background
        // utilization settles around 0.81.
        "atlas_bw" => {
            let nodes = scaled(BLUE_WATERS_NODES, scale, 8);
            // deep enough a task pool to keep the pilots busy over the run
            let n_tasks = scaled(30.0 * HTC_CAMPAIGN_TASKS, scale, 10);
            let mut bg = HpcBackgroundSpec {
                arrival_per_h: 0.0,
                nodes_max_fraction: 1.0,
                walltime_h: Dist::Uniform { lo: 2.0, hi: 36.0 },
                priority: 0,
                target_backlog_nodes: nodes * 4,
            };
            bg.arrival_per_h = arrival_rate_for_load(nodes, 0.3, &bg);
            Ok(Scenario {
                schema_version: SCHEMA_VERSION,
                name: "atlas_bw".into(),
                seed: 0,
                duration_h: 144.0,
                sample_period_s: 60.0,
                warmup_s: 7_200.0,
                cluster: ClusterScenario {
                    nodes,
                    cores_per_node: 32,
                    memory_gb: 64.0,
                    torus: None,
                    placement: Placement::TopologyAware,
                    compactness_limit: 1.2,
                    scheduler_period_s: 60.0,
                    overestimate_factor: 2.5,
                },
                overlay: OverlayScenario {
                    mode: OverlayMode::Glidein,
                    // roughly 6% of the machine, scavenged in 4-node pilots
                    target_pilots: ((f64::from(nodes) * 0.06 / 4.0).round() as u32).max(1),
                    pilot_nodes: 4.min(nodes),
                    pilot_walltime_h: 12.0,
                    ..OverlayScenario::default()
                },
                data: DataScenario::default(),
                workload: WorkloadScenario {
                    htc: Some(HtcSpec {
                        n_tasks,
                        runtime_h: Dist::Lognormal { mu: 3.0f64.ln(), sigma: 0.5 },
                        input_gb: Dist::constant(1.0),
                        output_gb: Dist::constant(0.5),
                        memory_gb: 2.0,
                        cores: 1,
                        priority: 0,
                        est_runtime_factor: 1.0,
                        distinct_datasets: (n_tasks / 10).max(1),
                    }),
                    background: Some(bg),
                },
            })
        }
        // Broker queries backfill windows and submits wrapper jobs; the
        // broker is co-located with the data hub, so control is immediate.
        "titan_backfill" => {
            let nodes = scaled(TITAN_NODES, scale, 8);
            let n_tasks = scaled(HTC_CAMPAIGN_TASKS, scale, 10);
            let mut bg = HpcBackgroundSpec {
                arrival_per_h: 0.0,
                nodes_max_fraction: 0.5,
                walltime_h: Dist::Uniform { lo: 2.0, hi: 24.0 },
                priority: 0,
                target_backlog_nodes: 0,
            };
            bg.arrival_per_h = arrival_rate_for_load(nodes, 0.85, &bg);
            Ok(Scenario {
                schema_version: SCHEMA_VERSION,
                name: "titan_backfill".into(),
                seed: 0,
                duration_h: 24.0,
                sample_period_s: 60.0,
                warmup_s: 7_200.0,
                cluster: ClusterScenario {
                    nodes,
                    cores_per_node: 16,
                    memory_gb: 32.0,
                    torus: None,
                    placement: Placement::Transparent,
                    compactness_limit: 2.0,
                    scheduler_period_s: 60.0,
                    overestimate_factor: 1.0,
                },
                overlay: OverlayScenario {
                    mode: OverlayMode::BackfillBroker,
                    target_pilots: 0,
                    ..OverlayScenario::default()
                },
                data: DataScenario::default(),
                workload: WorkloadScenario {
                    htc: Some(HtcSpec {
                        n_tasks,
                        runtime_h: Dist::Lognormal { mu: 2.0f64.ln(), sigma: 0.5 },
                        input_gb: Dist::constant(1.0),
                        output_gb: Dist::constant(0.5),
                        memory_gb: 2.0,
                        cores: 1,
                        priority: 0,
                        est_runtime_factor: 1.0,
                        distinct_datasets: (n_tasks / 10).max(1),
                    }),
                    background: Some(bg),
                },
            })
        }
        other => Err(WorkloadError::UnknownPreset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ligo_preset_scales_tasks_and_input() {
        let s = preset("ligo", 0.001).unwrap();
        let htc = s.workload.htc.as_ref().unwrap();
        assert_eq!(htc.n_tasks, 100);
        assert_eq!(htc.input_gb, Dist::constant(0.4));
        assert_eq!(s.overlay.mode, OverlayMode::Glidein);
        assert!(s.validate().is_empty(), "{:?}", s.validate());
    }

    #[test]
    fn atlas_preset_sets_backlog_floor() {
        let s = preset("atlas_bw", 0.025).unwrap();
        assert_eq!(s.cluster.nodes, 500);
        assert_eq!(s.cluster.placement, Placement::TopologyAware);
        let bg = s.workload.background.as_ref().unwrap();
        assert_eq!(bg.target_backlog_nodes, 4 * 500);
        assert!(s.validate().is_empty(), "{:?}", s.validate());
    }

    #[test]
    fn titan_preset_uses_backfill_broker() {
        let s = preset("titan_backfill", 0.01).unwrap();
        assert_eq!(s.overlay.mode, OverlayMode::BackfillBroker);
        assert_eq!(s.cluster.placement, Placement::Transparent);
        assert!(s.validate().is_empty(), "{:?}", s.validate());
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(preset("nope", 1.0), Err(WorkloadError::UnknownPreset(_))));
    }

    #[test]
    fn toml_roundtrip_preserves_scenario() {
        let s = preset("atlas_bw", 0.01).unwrap();
        let text = s.to_toml();
        let back = Scenario::from_toml(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
    }

    #[test]
    fn overrides_change_nested_keys() {
        let s = preset("atlas_bw", 0.01).unwrap();
        let t = s.with_override("overlay.target_pilots", "0").unwrap();
        assert_eq!(t.overlay.target_pilots, 0);
        let t = s.with_override("cluster.placement", "\"transparent\"").unwrap();
        assert_eq!(t.cluster.placement, Placement::Transparent);
        let t = s.with_override("cluster.placement", "transparent").unwrap();
        assert_eq!(t.cluster.placement, Placement::Transparent);
        assert_ne!(s.hash(), t.hash());
    }

    #[test]
    fn validation_flags_oversized_pilots() {
        let mut s = preset("ligo", 0.001).unwrap();
        s.overlay.pilot_nodes = s.cluster.nodes + 1;
        s.overlay.target_pilots = 1;
        let diags = s.validate();
        assert!(diags.iter().any(|d| d.path == "overlay.pilot_nodes"
            && d.message.contains("cluster.nodes")));
    }

    #[test]
    fn validation_flags_bad_torus() {
        let mut s = preset("ligo", 0.001).unwrap();
        s.cluster.torus = Some([3, 3, 3]);
        let diags = s.validate();
        assert!(diags.iter().any(|d| d.path == "cluster.torus"));
    }
}
