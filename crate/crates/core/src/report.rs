//! Reports and the ablation suites: per-scenario metrics, per-variant
//! aggregates, CSV and JSON output.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run, EngineConfig, OrientationFusion, RunOutput};
use crate::error::{Error, Result};
use crate::fusion::{AggregationKind, FusionWeights};
use crate::metrics::Metrics;
use crate::scenario::{generate_scenario, OcclusionSpec, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    /// Multi-view aggregation of the pose / shape corrections.
    T3,
    /// Orientation estimation: independent, independent + aligner, joint + aligner.
    T4,
    /// Final translation solve without and with the global scale.
    T5,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T3" => Ok(Suite::T3),
            "T4" => Ok(Suite::T4),
            "T5" => Ok(Suite::T5),
            _ => Err(Error::UnknownSuite(s.to_string())),
        }
    }
}

impl Suite {
    pub fn id(&self) -> &'static str {
        match self {
            Suite::T3 => "T3",
            Suite::T4 => "T4",
            Suite::T5 => "T5",
        }
    }
}

/// One configuration of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub scenario: ScenarioConfig,
    pub engine: EngineConfig,
}

/// Scenario setting of a suite: occluders on two views for T3, one view's
/// initial orientation skewed by 30 degrees for T4, ground-truth scale in
/// `[0.8, 1.2]` for T5.
pub fn suite_scenario(suite: Suite, base: &ScenarioConfig) -> ScenarioConfig {
    let mut s = base.clone();
    match suite {
        Suite::T3 => s.occlusion = Some(OcclusionSpec { n_views: 2, area_fraction: 0.25 }),
        Suite::T4 => s.noise.skewed_view = Some((0, 30.0)),
        Suite::T5 => s.scale_range = (0.8, 1.2),
    }
    s
}

pub fn suite_variants(suite: Suite, base_scenario: &ScenarioConfig, base_engine: &EngineConfig) -> Vec<Variant> {
    let scenario = suite_scenario(suite, base_scenario);
    let variant = |name: &str, engine: EngineConfig| Variant { name: name.into(), scenario: scenario.clone(), engine };
    match suite {
        Suite::T3 => AggregationKind::ALL
            .iter()
            .map(|&aggregation| variant(aggregation.label(), EngineConfig { aggregation, ..base_engine.clone() }))
            .collect(),
        Suite::T4 => vec![
            variant("Ind O", EngineConfig { orientation_fusion: OrientationFusion::Independent, aligner: false, ..base_engine.clone() }),
            variant("Ind O + Align", EngineConfig { orientation_fusion: OrientationFusion::Independent, aligner: true, ..base_engine.clone() }),
            variant("Tran + Align", EngineConfig { orientation_fusion: OrientationFusion::Joint, aligner: true, ..base_engine.clone() }),
        ],
        Suite::T5 => vec![
            variant("w/o Scale", EngineConfig { global_solve: false, ..base_engine.clone() }),
            variant("w. Scale", EngineConfig { global_solve: true, ..base_engine.clone() }),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub seed: u64,
    pub variant: String,
    pub initial: Metrics,
    pub metrics: Metrics,
    /// Recovered global scale, when the scale was solved.
    pub scale: Option<f64>,
    pub gt_scale: f64,
    /// Finest-level mean residual per trace record, pixels.
    pub residual_px: Vec<f64>,
    /// Root-aligned MPJPE per trace record, millimetres.
    pub mpjpe_curve: Vec<f64>,
}

impl ScenarioResult {
    fn new(seed: u64, variant: &str, gt_scale: f64, out: &RunOutput) -> Self {
        ScenarioResult {
            seed,
            variant: variant.into(),
            initial: out.initial,
            metrics: out.metrics,
            scale: out.global_solve.as_ref().filter(|g| g.with_scale && g.failure.is_none()).map(|g| g.scale),
            gt_scale,
            residual_px: out.trace.residuals(),
            mpjpe_curve: out.trace.records.iter().map(|r| r.mpjpe.unwrap_or(f64::NAN)).collect(),
        }
    }
}

/// Median and mean of every metric over the scenarios of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Position when sorted by median MPJPE, from 1.
    pub rank: usize,
    pub n: usize,
    pub median: Metrics,
    pub mean: Metrics,
    pub median_initial_mpjpe: f64,
    /// Median per-record MPJPE.
    pub median_curve: Vec<f64>,
    /// Scenarios whose PA-MPJPE exceeds the root-aligned MPJPE.
    pub pa_above_mpjpe: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn metric_fields(m: &Metrics) -> [f64; 7] {
    [m.mpjpe, m.pa_mpjpe, m.pve, m.abs_mpjpe, m.o_err_deg, m.pck, m.auc]
}

fn from_fields(f: [f64; 7]) -> Metrics {
    Metrics { mpjpe: f[0], pa_mpjpe: f[1], pve: f[2], abs_mpjpe: f[3], o_err_deg: f[4], pck: f[5], auc: f[6] }
}

fn reduce(rows: &[&ScenarioResult], f: impl Fn(&[f64]) -> f64) -> Metrics {
    let fields: Vec<[f64; 7]> = rows.iter().map(|r| metric_fields(&r.metrics)).collect();
    let mut out = [0.0; 7];
    for (i, o) in out.iter_mut().enumerate() {
        *o = f(&fields.iter().map(|x| x[i]).collect::<Vec<_>>());
    }
    from_fields(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn summarize(name: &str, rows: &[&ScenarioResult]) -> VariantSummary {
    let len = rows.iter().map(|r| r.mpjpe_curve.len()).max().unwrap_or(0);
    VariantSummary {
        variant: name.into(),
        rank: 0,
        n: rows.len(),
        median: reduce(rows, median),
        mean: reduce(rows, mean),
        median_initial_mpjpe: median(&rows.iter().map(|r| r.initial.mpjpe).collect::<Vec<_>>()),
        median_curve: (0..len).map(|i| median(&rows.iter().filter_map(|r| r.mpjpe_curve.get(i).copied()).collect::<Vec<_>>())).collect(),
        pa_above_mpjpe: rows.iter().filter(|r| r.metrics.pa_mpjpe > r.metrics.mpjpe + 1e-9).count(),
    }
}

pub const PROTOCOL: &str = "synthetic protocol: procedurally generated body, calibrated inward-looking rig, analytic misalignment feature fields; \
errors in millimetres against the generating ground truth; not comparable with results on captured datasets";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub suite: Option<String>,
    pub seeds: Vec<u64>,
    pub scenario_config: ScenarioConfig,
    pub engine_config: EngineConfig,
    /// Ranked by median MPJPE.
    pub variants: Vec<VariantSummary>,
    /// Sorted by variant order, then seed.
    pub scenarios: Vec<ScenarioResult>,
}

fn run_variant(variant: &Variant, seeds: &[u64], weights: Option<&FusionWeights<f64>>) -> Result<Vec<ScenarioResult>> {
    let mut rows = seeds
        .par_iter()
        .map(|&seed| {
            let scenario = generate_scenario(&variant.scenario, seed)?;
            let out = run::<f64>(&scenario, &variant.engine, weights)?;
            Ok(ScenarioResult::new(seed, &variant.name, scenario.gt.scale, &out))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.seed);
    Ok(rows)
}

fn assemble(suite: Option<Suite>, variants: &[Variant], seeds: &[u64], scenarios: Vec<ScenarioResult>, base_scenario: &ScenarioConfig, base_engine: &EngineConfig) -> Report {
    let mut summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|v| summarize(&v.name, &scenarios.iter().filter(|r| r.variant == v.name).collect::<Vec<_>>()))
        .collect();
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| summaries[a].median.mpjpe.total_cmp(&summaries[b].median.mpjpe).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        summaries[i].rank = rank + 1;
    }
    summaries.sort_by_key(|s| s.rank);
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    Report {
        protocol: PROTOCOL.into(),
        suite: suite.map(|s| s.id().to_string()),
        seeds,
        scenario_config: base_scenario.clone(),
        engine_config: base_engine.clone(),
        variants: summaries,
        scenarios,
    }
}

/// Runs every variant of `suite` on the scenarios of `seeds`. Scenarios run in
/// parallel; results are ordered by variant and seed, so the report does not
/// depend on the thread count.
pub fn ablate(suite: Suite, base_scenario: &ScenarioConfig, base_engine: &EngineConfig, seeds: &[u64]) -> Result<Report> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let variants = suite_variants(suite, base_scenario, base_engine);
    let mut scenarios = Vec::new();
    for v in &variants {
        scenarios.extend(run_variant(v, seeds, None)?);
    }
    Ok(assemble(Some(suite), &variants, seeds, scenarios, base_scenario, base_engine))
}

/// Report of one configuration over `seeds`.
pub fn run_report(scenario: &ScenarioConfig, engine: &EngineConfig, seeds: &[u64], weights: Option<&FusionWeights<f64>>) -> Result<Report> {
    let variant = Variant { name: "run".into(), scenario: scenario.clone(), engine: engine.clone() };
    let rows = run_variant(&variant, seeds, weights)?;
    Ok(assemble(None, &[variant], seeds, rows, scenario, engine))
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(";")
}

const METRIC_COLUMNS: &str = "mpjpe_mm,pa_mpjpe_mm,pve_mm,abs_mpjpe_mm,o_err_deg,pck150,auc";

fn metric_cells(m: &Metrics) -> String {
    metric_fields(m).iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(",")
}

impl Report {
    /// One row per variant, in rank order.
    pub fn summary_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.protocol);
        let _ = writeln!(out, "# suite {}; seeds {}", self.suite.as_deref().unwrap_or("-"), self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "));
        let _ = writeln!(out, "rank,variant,n,{METRIC_COLUMNS},initial_mpjpe_mm,pa_above_mpjpe,mpjpe_per_iteration");
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                v.rank,
                v.variant,
                v.n,
                metric_cells(&v.median),
                fmt(v.median_initial_mpjpe),
                v.pa_above_mpjpe,
                fmt_list(&v.median_curve)
            );
        }
        out
    }

    /// One row per scenario and variant.
    pub fn scenarios_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant,seed,{METRIC_COLUMNS},initial_mpjpe_mm,scale,gt_scale,residual_px_per_iteration,mpjpe_per_iteration");
        for r in &self.scenarios {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                metric_cells(&r.metrics),
                fmt(r.initial.mpjpe),
                r.scale.map(fmt).unwrap_or_default(),
                fmt(r.gt_scale),
                fmt_list(&r.residual_px),
                fmt_list(&r.mpjpe_curve)
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_ids() {
        for s in [Suite::T3, Suite::T4, Suite::T5] {
            assert_eq!(s.id().parse::<Suite>().unwrap(), s);
        }
        assert_eq!("t4".parse::<Suite>().unwrap(), Suite::T4);
        assert!(matches!("T9".parse::<Suite>(), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn one_row_per_variant_and_seeds_echoed() {
        let base = ScenarioConfig::default();
        let engine = EngineConfig { inner_steps: 2, ..Default::default() };
        let report = ablate(Suite::T5, &base, &engine, &[3, 1]).unwrap();
        assert_eq!(report.variants.len(), 2);
        assert_eq!(report.seeds, vec![1, 3]);
        assert_eq!(report.scenarios.len(), 4);
        assert_eq!(report.scenarios.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 3, 1, 3]);
        let csv = report.summary_csv();
        assert!(csv.contains("seeds 1 3"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
        assert!(report.variant("w. Scale").unwrap().n == 2);
        assert!(report.scenarios.iter().filter(|r| r.variant == "w. Scale").all(|r| r.scale.is_some()));
        assert!(report.scenarios.iter().filter(|r| r.variant == "w/o Scale").all(|r| r.scale.is_none()));
        assert!(ablate(Suite::T5, &base, &engine, &[]).is_err());
    }

    #[test]
    fn suite_settings() {
        let base = ScenarioConfig::default();
        let e = EngineConfig::default();
        let t3 = suite_variants(Suite::T3, &base, &e);
        assert_eq!(t3.len(), 4);
        assert!(t3.iter().all(|v| v.scenario.occlusion == Some(OcclusionSpec { n_views: 2, area_fraction: 0.25 })));
        let t4 = suite_variants(Suite::T4, &base, &e);
        assert_eq!(t4.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(), ["Ind O", "Ind O + Align", "Tran + Align"]);
        assert!(t4.iter().all(|v| v.scenario.noise.skewed_view == Some((0, 30.0))));
        assert!(suite_variants(Suite::T5, &base, &e).iter().all(|v| v.scenario.scale_range == (0.8, 1.2)));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
