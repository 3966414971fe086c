//! Aggregate tables over a batch of stored runs.
//!
//! Every column is sourced from the consensus and bias operations; nothing is
//! recomputed here beyond summing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use plurality_core::biaslens::{regional_mention_rate, temporal_flags, MarkerCounts, TermTally, TreatmentSplit};
use plurality_core::casemodel::ModelResponse;
use plurality_core::consensus::{
    alternative_tier_count, breadth_stats, cohort_comparison, consensus_rate, leading_votes, model_participation,
    non_primary_count, percent_half_up, BreadthStats, CohortComparison, ConsensusError, ModelParticipation,
    ParticipationCategory,
};
use plurality_core::registry::{Region, RegistrySnapshot};

use crate::store::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseConsensusRow {
    pub run_id: String,
    pub case_id: String,
    pub title: String,
    pub responding: usize,
    pub leading_key: Option<String>,
    pub leading_label: Option<String>,
    pub leading_votes: usize,
    /// `None` when nobody responded.
    pub consensus_rate: Option<f64>,
    pub consensus_percent: Option<u32>,
    pub breadth: usize,
    pub alternative_tier_count: usize,
    pub non_primary_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub run_ids: Vec<String>,
    pub consensus_by_case: Vec<CaseConsensusRow>,
    pub participation: Vec<ModelParticipation>,
    pub category_counts: BTreeMap<ParticipationCategory, usize>,
    pub cohort: CohortComparison,
    /// `None` when no run in the batch had responders.
    pub breadth: Option<BreadthStats>,
    pub marker_totals: MarkerCounts,
    pub treatment_totals: TreatmentSplit,
    /// term → region → mentions per responding model, pooled over the batch.
    pub regional_mentions: BTreeMap<String, BTreeMap<Region, f64>>,
    pub watchlist: BTreeMap<String, TermTally>,
}

pub fn batch_metrics(runs: &[RunRecord]) -> Result<BatchMetrics, ConsensusError> {
    let Some(first) = runs.first() else {
        return Err(ConsensusError::EmptyInput);
    };
    let config = &first.analysis_config;
    let registry = RegistrySnapshot::from_models(runs.iter().flat_map(|r| r.registry_snapshot.iter().cloned()));

    let consensus_by_case = runs
        .iter()
        .map(|run| {
            let d = run.differential.as_ref();
            let leading = d.and_then(|d| d.leading());
            CaseConsensusRow {
                run_id: run.run_id.clone(),
                case_id: run.case_id.clone(),
                title: run.case.title.clone(),
                responding: d.map_or(0, |d| d.responding_count),
                leading_key: leading.map(|(k, _)| k.clone()),
                leading_label: leading.map(|(_, e)| e.diagnosis.display_label.clone()),
                leading_votes: d.map_or(0, leading_votes),
                consensus_rate: d.map(consensus_rate),
                consensus_percent: d.map(|d| percent_half_up(leading_votes(d), d.responding_count)),
                breadth: d.map_or(0, |d| d.breadth),
                alternative_tier_count: d.map_or(0, alternative_tier_count),
                non_primary_count: d.map_or(0, non_primary_count),
            }
        })
        .collect();

    let diffs: Vec<_> = runs.iter().filter_map(|r| r.differential.as_ref()).collect();
    let participation = model_participation(diffs.iter().copied());
    let mut category_counts = BTreeMap::new();
    for p in &participation {
        *category_counts.entry(p.category).or_insert(0) += 1;
    }
    let cohort = cohort_comparison(&participation, &registry)?;
    let breadth = breadth_stats(diffs.iter().copied()).ok();

    let mut marker_totals = MarkerCounts::default();
    let mut treatment_totals = TreatmentSplit::default();
    for run in runs {
        marker_totals.uncertainty += run.bias_findings.uncertainty_count;
        marker_totals.confidence += run.bias_findings.confidence_count;
        let s = run.bias_findings.treatment_split;
        treatment_totals.aggressive += s.aggressive;
        treatment_totals.conservative += s.conservative;
        treatment_totals.unclassified += s.unclassified;
    }

    let pooled: Vec<ModelResponse> = runs.iter().flat_map(|r| r.responses.iter().cloned()).collect();
    let regional_mentions = config
        .regional_terms
        .iter()
        .map(|k| {
            let term = config.term(k);
            (k.clone(), regional_mention_rate(&pooled, &registry, &term, &config.synonyms))
        })
        .collect();
    let per_run: Vec<&[ModelResponse]> = runs.iter().map(|r| r.responses.as_slice()).collect();
    let watchlist = temporal_flags(&per_run, &config.watch_terms(), &config.synonyms);

    Ok(BatchMetrics {
        run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
        consensus_by_case,
        participation,
        category_counts,
        cohort,
        breadth,
        marker_totals,
        treatment_totals,
        regional_mentions,
        watchlist,
    })
}

/// Plain-text rendering of the batch tables.
pub fn render_metrics(m: &BatchMetrics) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "CONSENSUS BY CASE");
    for row in &m.consensus_by_case {
        let pct = row.consensus_percent.map_or("-".to_string(), |p| format!("{p}%"));
        let _ = writeln!(
            out,
            "{:<12} {:<28} {:>5}  lead={:<24} breadth={:<3} alternatives={} non-primary={}",
            row.run_id,
            row.case_id,
            pct,
            row.leading_label.as_deref().unwrap_or("-"),
            row.breadth,
            row.alternative_tier_count,
            row.non_primary_count
        );
    }
    let _ = writeln!(out, "\nMODEL PARTICIPATION");
    for p in &m.participation {
        let _ = writeln!(
            out,
            "{:<20} {:>5.1}%  ({}/{})  {:?}",
            p.model_id,
            p.participation_rate * 100.0,
            p.primary_tier_hits,
            p.cases_counted,
            p.category
        );
    }
    let cats: Vec<String> = m.category_counts.iter().map(|(c, n)| format!("{c:?} {n}")).collect();
    let _ = writeln!(out, "Categories: {}", cats.join(", "));
    let _ = writeln!(out, "\nCOHORTS (mean participation)");
    for (tier, v) in &m.cohort.by_cost_tier {
        let _ = writeln!(out, "{tier}: {:.1}%", v * 100.0);
    }
    for (region, v) in &m.cohort.by_region {
        let _ = writeln!(out, "{region}: {:.1}%", v * 100.0);
    }
    let _ = writeln!(out, "\nBREADTH");
    match &m.breadth {
        Some(b) => {
            let _ = writeln!(out, "mean {:.1}, min {}, max {}", b.mean, b.min, b.max);
        }
        None => {
            let _ = writeln!(out, "no responders in batch");
        }
    }
    let _ = writeln!(out, "\nMARKERS");
    let _ = writeln!(
        out,
        "uncertainty {}, confidence {}; treatment aggressive {}, conservative {}",
        m.marker_totals.uncertainty,
        m.marker_totals.confidence,
        m.treatment_totals.aggressive,
        m.treatment_totals.conservative
    );
    for (term, rates) in &m.regional_mentions {
        let parts: Vec<String> = rates.iter().map(|(r, v)| format!("{r} {v:.1}")).collect();
        let _ = writeln!(out, "{term} mentions per model: {}", parts.join(", "));
    }
    for (term, t) in &m.watchlist {
        let _ = writeln!(out, "{term}: {} mentions across {} cases", t.total_mentions, t.cases_present);
    }
    out
}
