//! Simulated population: determinism, support, fault injection and the
//! statistical shapes the harness is tuned to produce.

use std::collections::BTreeMap;
use std::sync::Arc;

use plurality_core::assets;
use plurality_core::biaslens::{analyze, count_markers};
use plurality_core::casemodel::{ClinicalCase, ResponseStatus};
use plurality_core::consensus::{canonical_key, consensus_rate, leading_votes, percent_half_up, stratify, Tier};
use plurality_core::gateway::{execute_fanout, FanoutResult, QueryPlan};
use plurality_core::registry::{CostTier, ModelDescriptor, Region, RegistrySnapshot};
use plurality_core::simharness::oracle::oracle_marker_count;
use plurality_core::simharness::{FaultRates, SimModelProfile, SimulatedProvider, Simulator, Verbosity};

fn fixture(case_id: &str) -> ClinicalCase {
    assets::fixture_cases().into_iter().find(|c| c.case_id == case_id).unwrap()
}

fn population_registry() -> RegistrySnapshot {
    RegistrySnapshot::from_models(assets::population().into_iter().map(|(d, _)| d))
}

async fn fanout(provider: Arc<SimulatedProvider>, registry: &RegistrySnapshot, case: &ClinicalCase, seed: u64) -> FanoutResult {
    let plan = QueryPlan::new(&case.case_id, registry.iter().map(|d| d.model_id.clone()), seed);
    execute_fanout(&plan, case, registry, provider).await.unwrap()
}

fn profile(id: &str, region: Region, priors: &[(&str, f64)]) -> SimModelProfile {
    SimModelProfile {
        model_id: id.into(),
        origin_region: region,
        disease_priors: priors.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
        regional_boost: BTreeMap::new(),
        temporal_boost: BTreeMap::new(),
        hallucination_rate: 0.0,
        verbosity: Verbosity::default(),
        top_k: 5,
        case_focus: 1.0,
        cutoff: 0.0,
        latency_ms: 100,
        faults: FaultRates::default(),
        seed_offset: 0,
    }
}

#[tokio::test]
async fn same_seed_same_bytes_different_seed_different_output() {
    let registry = population_registry();
    let case = fixture("behcet");
    let provider = Arc::new(assets::simulated_provider());
    let a = fanout(provider.clone(), &registry, &case, 5).await;
    let b = fanout(provider.clone(), &registry, &case, 5).await;
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    let c = fanout(provider, &registry, &case, 6).await;
    assert_ne!(a.responses, c.responses);
}

#[tokio::test]
async fn without_fabrication_every_key_is_in_the_profile_support() {
    let registry = population_registry();
    let synonyms = assets::synonyms();
    let profiles: Vec<SimModelProfile> = assets::population()
        .into_iter()
        .map(|(_, mut p)| {
            p.hallucination_rate = 0.0;
            p
        })
        .collect();
    let provider = Arc::new(SimulatedProvider::new(assets::simulator(), profiles.clone()));
    for case in assets::fixture_cases() {
        for seed in 0..3 {
            let r = fanout(provider.clone(), &registry, &case, seed).await;
            for resp in r.responses.iter().filter(|r| r.is_ok()) {
                let p = profiles.iter().find(|p| p.model_id == resp.model_id).unwrap();
                let support = Simulator::support(p);
                for c in &resp.candidates {
                    let key = canonical_key(c, &synonyms);
                    assert!(support.contains(key.as_str()), "{}: `{key}` outside support", resp.model_id);
                }
            }
        }
    }
}

#[tokio::test]
async fn dominant_prior_gives_exact_consensus() {
    // 19 models can only say FMF, 11 can only say myocarditis.
    let mut profiles = Vec::new();
    let mut descriptors = Vec::new();
    for i in 0..30 {
        let id = format!("m{i:02}");
        let key = if i < 19 { "m04" } else { "i40" };
        let mut p = profile(&id, Region::US, &[(key, 1.0)]);
        p.seed_offset = i;
        profiles.push(p);
        descriptors.push(ModelDescriptor::new(&id, Region::US, CostTier::Paid));
    }
    let registry = RegistrySnapshot::from_models(descriptors);
    let provider = Arc::new(SimulatedProvider::new(assets::simulator(), profiles));
    for seed in 0..5 {
        let r = fanout(provider.clone(), &registry, &fixture("fmf"), seed).await;
        let d = stratify(&r.responses, &assets::synonyms()).unwrap();
        assert_eq!(d.responding_count, 30);
        assert_eq!(leading_votes(&d), 19);
        assert_eq!(d.leading().unwrap().0, "m04");
        assert_eq!(consensus_rate(&d), 19.0 / 30.0);
        assert_eq!(percent_half_up(19, 30), 63);
        assert_eq!(d.diagnoses["i40"].tier, Some(Tier::Primary));
    }
}

#[tokio::test]
async fn injected_faults_map_to_statuses() {
    let kinds = [
        ("t", FaultRates { timeout: 1.0, ..FaultRates::default() }, ResponseStatus::Timeout),
        ("n", FaultRates { network: 1.0, ..FaultRates::default() }, ResponseStatus::ProviderError),
        ("o", FaultRates { overflow: 1.0, ..FaultRates::default() }, ResponseStatus::TokenOverflow),
        ("m", FaultRates { malformed: 1.0, ..FaultRates::default() }, ResponseStatus::MalformedOutput),
        ("ok", FaultRates::default(), ResponseStatus::Ok),
    ];
    let profiles = kinds.iter().map(|(id, f, _)| {
        let mut p = profile(id, Region::Europe, &[("m04", 1.0), ("i40", 0.5)]);
        p.faults = *f;
        p
    });
    let provider = Arc::new(SimulatedProvider::new(assets::simulator(), profiles));
    let registry = RegistrySnapshot::from_models(kinds.iter().map(|(id, _, _)| ModelDescriptor::new(*id, Region::Europe, CostTier::Free)));
    let r = fanout(provider, &registry, &fixture("fmf"), 1).await;
    for (id, _, status) in kinds {
        assert_eq!(r.response(id).unwrap().status, status, "{id}");
    }
}

#[tokio::test]
async fn fabricated_diagnoses_never_reach_the_primary_tier() {
    let registry = population_registry();
    let synonyms = assets::synonyms();
    let mut fabricated_seen = 0;
    for case in assets::fixture_cases() {
        for seed in 0..5 {
            let provider = Arc::new(assets::simulated_provider());
            let r = fanout(provider.clone(), &registry, &case, seed).await;
            let Ok(d) = stratify(&r.responses, &synonyms) else { continue };
            for key in provider.fabrications(&case.case_id).values() {
                fabricated_seen += 1;
                let tier = d.diagnoses.get(key).and_then(|e| e.tier);
                assert_ne!(tier, Some(Tier::Primary), "{} seed {seed}: `{key}`", case.case_id);
            }
        }
    }
    assert!(fabricated_seen > 0, "population never fabricates; the check is vacuous");
}

#[tokio::test]
async fn regional_boost_raises_mentions_from_the_boosted_region() {
    let registry = population_registry();
    let case = fixture("fmf");
    let config = assets::analysis_config();
    let provider = Arc::new(assets::simulated_provider());
    let (mut china, mut us) = (0.0, 0.0);
    for seed in 0..10 {
        let r = fanout(provider.clone(), &registry, &case, seed).await;
        let f = analyze(&case, &r.responses, &registry, &config);
        let rates = &f.mentions_per_model_by_region["m04"];
        china += rates.get(&Region::China).copied().unwrap_or(0.0);
        us += rates.get(&Region::US).copied().unwrap_or(0.0);
    }
    assert!(china > us, "China {china} vs US {us}");
}

#[tokio::test]
async fn generated_prose_counts_agree_with_the_oracle() {
    let registry = population_registry();
    let config = assets::analysis_config();
    let provider = Arc::new(assets::simulated_provider());
    let phrases = |l: &plurality_core::biaslens::MarkerLexicon| l.phrases().to_vec();
    let lexicons = [&config.uncertainty, &config.confidence, &config.aggressive, &config.conservative];
    let mut total = 0;
    for case in assets::fixture_cases().iter().take(4) {
        let r = fanout(provider.clone(), &registry, case, 2).await;
        for resp in &r.responses {
            for lexicon in lexicons {
                let owned = phrases(lexicon);
                let words: Vec<&str> = owned.iter().map(String::as_str).collect();
                let n = count_markers(&resp.raw_text, lexicon);
                assert_eq!(n, oracle_marker_count(&resp.raw_text, &words), "{}", resp.model_id);
                total += n;
            }
        }
    }
    assert!(total > 0);
}
