//! Campaign report: a single JSON document holding everything a run
//! produced, plus CSV renderings for the plots people actually make.
//! Deterministic by construction — no timestamps, sorted maps — so two runs
//! with the same seeds serialize byte-identically.

use crate::recorder::ErrorRecord;
use crate::selector::RankedAttack;
use atf_core::attack::{AttackStatus, StageRecord};
use atf_core::metrics::{cdf_table, AttackAggregate, OutcomeStat};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub seed: u64,
    pub oracle: String,
    pub threshold_percent: f64,
    pub query_budget: u64,
    /// 0 means uncapped.
    pub campaign_budget: u64,
    pub error_policy: String,
    pub goal: String,
    pub samples_planned: usize,
    pub bank_members: Vec<String>,
    /// Pixels in the consensus set after sign filtering, when a bank ran.
    pub consensus_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalRow {
    pub family: String,
    pub queries: u64,
    pub alerts: usize,
    pub error_codes: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_index: usize,
    pub true_category: String,
    pub family: String,
    pub session_id: u64,
    pub status: AttackStatus,
    /// Verified against the live service, not the surrogate.
    pub success: bool,
    pub queries: u64,
    pub rmsd: f64,
    pub l2: f64,
    pub perturbed_fraction: f64,
    pub final_top_category: Option<String>,
    pub final_top_percent: Option<f64>,
    pub alerts: u32,
    pub error_codes: Vec<i32>,
    pub stages: Vec<StageRecord>,
}

impl SampleRow {
    pub fn outcome_stat(&self) -> OutcomeStat {
        OutcomeStat {
            success: self.success,
            queries: self.queries,
            l2: self.l2,
            rmsd: self.rmsd,
            errors: self.error_codes.len(),
            alerts: self.alerts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub aggregate: AttackAggregate,
    pub halted: usize,
    pub exhausted: usize,
}

/// How well examples crafted on one surrogate carried over to the service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub crafted: usize,
    pub surrogate_evading: usize,
    pub oracle_evading: usize,
    pub oracle_alerts: usize,
}

impl TransferRow {
    pub fn transfer_rate(&self) -> f64 {
        if self.crafted == 0 {
            0.0
        } else {
            self.oracle_evading as f64 / self.crafted as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistenceReport {
    pub evaders_before: usize,
    pub still_evading: usize,
    /// `still_evading / evaders_before`; 0 when nothing evaded to begin with.
    pub fraction: f64,
    pub model_version: u64,
    pub clean_consistency: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTotals {
    pub sessions: usize,
    pub attempted: u64,
    pub served: u64,
    pub errored: u64,
    pub alerts_raised: u64,
}

impl SessionTotals {
    pub fn absorb(&mut self, stats: &atf_oracle::SessionStats) {
        self.sessions += 1;
        self.attempted += stats.attempted;
        self.served += stats.served;
        self.errored += stats.errored;
        self.alerts_raised += stats.alerts_raised;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub campaign: CampaignMeta,
    pub plan: Vec<RankedAttack>,
    pub rehearsals: Vec<RehearsalRow>,
    pub families: BTreeMap<String, FamilySummary>,
    pub samples: Vec<SampleRow>,
    pub transfer: BTreeMap<String, TransferRow>,
    pub errors: ErrorRecord,
    pub sessions: SessionTotals,
    pub persistence: Option<PersistenceReport>,
    /// False when a campaign-wide budget ran out before the sample list did.
    pub complete: bool,
    pub queries_total: u64,
}

impl AttackReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())
    }

    /// Re-derives one family's aggregate from its sample rows. Reports are
    /// only consistent if this matches the stored summary.
    pub fn recompute_aggregate(&self, family: &str) -> Option<AttackAggregate> {
        let stats: Vec<OutcomeStat> = self
            .samples
            .iter()
            .filter(|s| s.family == family)
            .map(SampleRow::outcome_stat)
            .collect();
        AttackAggregate::from_stats(&stats)
    }
}

const CDF_BINS: usize = 20;

/// Writes the CSV renderings next to the JSON and returns their paths.
pub fn render_csvs(report: &AttackReport, out_dir: &Path) -> Result<Vec<PathBuf>, csv::Error> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let path = out_dir.join("per_sample.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "sample_index",
        "true_category",
        "family",
        "session_id",
        "status",
        "success",
        "queries",
        "rmsd",
        "l2",
        "perturbed_fraction",
        "final_top_category",
        "final_top_percent",
        "alerts",
        "error_codes",
    ])?;
    for s in &report.samples {
        let status = serde_json::to_value(s.status).expect("status serializes");
        w.write_record([
            s.sample_index.to_string(),
            s.true_category.clone(),
            s.family.clone(),
            s.session_id.to_string(),
            status.as_str().unwrap_or("unknown").to_string(),
            s.success.to_string(),
            s.queries.to_string(),
            format!("{:.6}", s.rmsd),
            format!("{:.6}", s.l2),
            format!("{:.6}", s.perturbed_fraction),
            s.final_top_category.clone().unwrap_or_default(),
            s.final_top_percent.map(|p| p.to_string()).unwrap_or_default(),
            s.alerts.to_string(),
            join_codes(&s.error_codes),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("attack_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "family",
        "attempts",
        "successes",
        "success_rate",
        "mean_queries",
        "mean_rmsd",
        "mean_l2",
        "error_sample_fraction",
        "total_alerts",
        "halted",
        "exhausted",
    ])?;
    for (family, summary) in &report.families {
        let a = &summary.aggregate;
        w.write_record([
            family.clone(),
            a.attempts.to_string(),
            a.successes.to_string(),
            format!("{:.6}", a.success_rate),
            format!("{:.3}", a.mean_queries),
            format!("{:.6}", a.mean_rmsd),
            format!("{:.6}", a.mean_l2),
            format!("{:.6}", a.error_sample_fraction),
            a.total_alerts.to_string(),
            summary.halted.to_string(),
            summary.exhausted.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("transfer_matrix.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "surrogate",
        "crafted",
        "surrogate_evading",
        "oracle_evading",
        "oracle_alerts",
        "transfer_rate",
    ])?;
    for (surrogate, row) in &report.transfer {
        w.write_record([
            surrogate.clone(),
            row.crafted.to_string(),
            row.surrogate_evading.to_string(),
            row.oracle_evading.to_string(),
            row.oracle_alerts.to_string(),
            format!("{:.6}", row.transfer_rate()),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("stage_trajectories.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "sample_index",
        "family",
        "stage",
        "selection_fraction",
        "step_limit",
        "top_category",
        "top_percent",
        "attacked_percent",
        "error_code",
        "rmsd_from_original",
        "perturbed_fraction",
    ])?;
    for s in &report.samples {
        for st in &s.stages {
            w.write_record([
                s.sample_index.to_string(),
                s.family.clone(),
                st.stage.to_string(),
                format!("{:.4}", st.selection_fraction),
                st.step_limit.map(|v| v.to_string()).unwrap_or_default(),
                st.top_category.clone().unwrap_or_default(),
                st.top_percent.map(|p| p.to_string()).unwrap_or_default(),
                st.attacked_percent.map(|p| p.to_string()).unwrap_or_default(),
                st.error_code.map(|c| c.to_string()).unwrap_or_default(),
                format!("{:.6}", st.rmsd_from_original),
                format!("{:.6}", st.perturbed_fraction),
            ])?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("prob_vs_rmsd_cdf.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["category", "rmsd", "cumulative_fraction"])?;
    let mut by_cat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in report.samples.iter().filter(|s| s.success) {
        by_cat.entry("all").or_default().push(s.rmsd);
        by_cat.entry(&s.true_category).or_default().push(s.rmsd);
    }
    for (cat, values) in &by_cat {
        for (edge, frac) in cdf_table(values, CDF_BINS) {
            w.write_record([cat.to_string(), edge.to_string(), frac.to_string()])?;
        }
    }
    w.flush()?;
    written.push(path);

    Ok(written)
}

fn join_codes(codes: &[i32]) -> String {
    codes
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(i: usize, family: &str, success: bool) -> SampleRow {
        SampleRow {
            sample_index: i,
            true_category: "Weapons".into(),
            family: family.into(),
            session_id: i as u64 + 1,
            status: if success {
                AttackStatus::Evaded
            } else {
                AttackStatus::NotEvaded
            },
            success,
            queries: 4 + i as u64,
            rmsd: 1.5 + i as f64,
            l2: 40.0,
            perturbed_fraction: 0.04,
            final_top_category: Some("Weapons".into()),
            final_top_percent: Some(12.5),
            alerts: 0,
            error_codes: if success { vec![] } else { vec![-20] },
            stages: vec![StageRecord {
                stage: 0,
                selection_fraction: 0.25,
                step_limit: Some(8.0),
                top_category: Some("Weapons".into()),
                top_percent: Some(88.0),
                attacked_percent: Some(88.0),
                error_code: None,
                rmsd_from_original: 1.5,
                perturbed_fraction: 0.02,
            }],
        }
    }

    fn small_report() -> AttackReport {
        let samples = vec![
            sample_row(0, "atf", true),
            sample_row(1, "atf", true),
            sample_row(2, "atf", false),
        ];
        let stats: Vec<OutcomeStat> = samples.iter().map(SampleRow::outcome_stat).collect();
        let mut families = BTreeMap::new();
        families.insert(
            "atf".to_string(),
            FamilySummary {
                aggregate: AttackAggregate::from_stats(&stats).unwrap(),
                halted: 0,
                exhausted: 0,
            },
        );
        AttackReport {
            campaign: CampaignMeta {
                seed: 5,
                oracle: "in-process (model v1)".into(),
                threshold_percent: 50.0,
                query_budget: 10_000,
                campaign_budget: 0,
                error_policy: "halt-on-alert".into(),
                goal: "untargeted".into(),
                samples_planned: 3,
                bank_members: vec!["dense-s43".into()],
                consensus_size: Some(41),
            },
            plan: Vec::new(),
            rehearsals: vec![RehearsalRow {
                family: "atf".into(),
                queries: 1,
                alerts: 0,
                error_codes: vec![],
            }],
            families,
            samples,
            transfer: BTreeMap::new(),
            errors: ErrorRecord::default(),
            sessions: SessionTotals::default(),
            persistence: None,
            complete: true,
            queries_total: 15,
        }
    }

    #[test]
    fn json_round_trips_and_is_deterministic() {
        let report = small_report();
        let a = report.to_json();
        let b = report.to_json();
        assert_eq!(a, b);
        let back = AttackReport::from_json(&a).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn stored_aggregate_matches_recomputation() {
        let report = small_report();
        let recomputed = report.recompute_aggregate("atf").unwrap();
        assert_eq!(recomputed, report.families["atf"].aggregate);
        assert!(report.recompute_aggregate("fgsm").is_none());
    }

    #[test]
    fn csv_rendering_writes_all_five_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = render_csvs(&small_report(), dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        for f in &files {
            assert!(f.exists(), "{f:?} missing");
        }
        let per_sample = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(per_sample.lines().count(), 4);
        assert!(per_sample.contains("evaded"));
        assert!(per_sample.contains("-20"));
        let cdf = std::fs::read_to_string(&files[4]).unwrap();
        assert!(cdf.lines().count() > 1, "successes produce cdf rows");
        assert!(cdf.contains("all,"));
        assert!(cdf.contains("Weapons,"));
    }

    #[test]
    fn transfer_rate_handles_zero_crafted() {
        assert_eq!(TransferRow::default().transfer_rate(), 0.0);
    }
}
