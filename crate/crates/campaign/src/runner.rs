//! Campaign execution. One campaign = build (or load) the surrogate bank,
//! connect a backend, rehearse each enabled attack family once to see what
//! the service's defences make of it, rank the survivors, then run every
//! executable family over every target sample — each attempt in its own
//! session with its own budget-gated client — and fold the outcomes into an
//! [`AttackReport`].

use crate::backend::{Backend, BackendError};
use crate::config::{CampaignConfig, ConfigError};
use crate::recorder::ErrorRecord;
use crate::report::{
    AttackReport, CampaignMeta, FamilySummary, PersistenceReport, RehearsalRow, SampleRow,
    SessionTotals, TransferRow,
};
use crate::selector::{executable, rank_attacks, RankedAttack, SelectionContext};
use atf_core::api::{GlobalBudget, OracleApi, OracleClient, OracleResponse};
use atf_core::attack::{
    atf_influence_attack, fgsm, finite_difference_attack, gradient_estimation_attack, ifgsm, jsma,
    AttackError, AttackParams, AttackStatus, StageRecord, StageSchedule,
};
use atf_core::influence::{
    consensus_select, integrated_gradients, ConsensusSelection, InfluenceError, InfluenceMap,
};
use atf_core::metrics::{AttackAggregate, OutcomeStat};
use atf_core::tensor::Tensor;
use atf_core::threat::{ErrorPolicy, ThreatModelConfig};
use atf_core::zoo::{
    argmax, build_bank, load_bank, load_idx, synth_dataset, Dataset, IdxError, ModelBank, Sample,
    StoreError, TrainError, CATEGORIES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("bank training failed: {0}")]
    Train(#[from] TrainError),
    #[error("bank store: {0}")]
    Store(#[from] StoreError),
    #[error("dataset: {0}")]
    Idx(#[from] IdxError),
    #[error("dataset contains no samples")]
    EmptyDataset,
    #[error("sample index {index} out of range; dataset holds {len}")]
    SampleOutOfRange { index: usize, len: usize },
    #[error("attack engine: {0}")]
    Attack(#[from] AttackError),
    #[error("influence analysis: {0}")]
    Influence(#[from] InfluenceError),
    #[error("no enabled attack family is executable under this threat model")]
    NothingExecutable,
}

impl CampaignError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, CampaignError::Backend(b) if b.is_unreachable())
    }
}

/// Narrowing switches for the single-sample `attack` subcommand; defaults
/// run the full configured campaign.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Attack only these dataset indices instead of the whole target list.
    pub sample_indices: Option<Vec<usize>>,
    /// Run only this family, bypassing the enabled list (still ranked and
    /// rehearsed so exclusion rules keep applying).
    pub only_family: Option<String>,
}

/// Logs every in-band error a session produces, under a fixed stage label,
/// with the service's own request ids.
struct RecordingApi {
    inner: Arc<dyn OracleApi>,
    stage: String,
    errors: Arc<Mutex<ErrorRecord>>,
}

impl RecordingApi {
    fn wrap(
        inner: Arc<dyn OracleApi>,
        stage: impl Into<String>,
        errors: &Arc<Mutex<ErrorRecord>>,
    ) -> Arc<Self> {
        Arc::new(Self {
            inner,
            stage: stage.into(),
            errors: errors.clone(),
        })
    }
}

impl OracleApi for RecordingApi {
    fn classify(&self, image: &Tensor) -> OracleResponse {
        let response = self.inner.classify(image);
        if response.error_code().is_some() {
            self.errors
                .lock()
                .expect("error record lock")
                .record(&response, &self.stage);
        }
        response
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

fn make_client(
    api: Arc<dyn OracleApi>,
    budget: u64,
    global: &Option<Arc<GlobalBudget>>,
) -> OracleClient {
    match global {
        Some(g) => OracleClient::with_global(api, budget, g.clone()),
        None => OracleClient::new(api, budget),
    }
}

fn global_exhausted(global: &Option<Arc<GlobalBudget>>) -> bool {
    global.as_ref().is_some_and(|g| g.remaining() == 0)
}

/// Drops consensus pixels whose summed signed influence is negative:
/// zeroing those would push the attacked score back up, which is what
/// breaks stage-to-stage monotonicity. Falls back to the unfiltered
/// selection when the filter would empty it.
fn sign_filter(selection: &mut ConsensusSelection, maps: &[InfluenceMap]) {
    let Some(first) = maps.first() else { return };
    let mut signed = vec![0.0f64; first.scores.len()];
    for map in maps {
        for (sum, v) in signed.iter_mut().zip(map.scores.data()) {
            *sum += v;
        }
    }
    let kept: Vec<usize> = selection
        .selected_indices
        .iter()
        .copied()
        .filter(|&ix| signed[ix] > 0.0)
        .collect();
    if !kept.is_empty() {
        selection.selected_indices = kept;
    }
}

/// Label the bank agrees on; the attacker has no better stand-in for the
/// service's verdict when picking which class score to analyse.
fn majority_label(bank: &ModelBank, image: &Tensor) -> usize {
    let mut votes = [0usize; 5];
    for member in &bank.members {
        if let Ok(logits) = member.graph.forward_logits(image) {
            votes[argmax(logits.data())] += 1;
        }
    }
    argmax(&votes.map(|v| v as f64))
}

fn consensus_for(
    bank: &ModelBank,
    image: &Tensor,
    baseline: &Tensor,
    cfg: &CampaignConfig,
) -> Result<ConsensusSelection, CampaignError> {
    let label = majority_label(bank, image);
    let maps = bank
        .members
        .iter()
        .map(|m| integrated_gradients(m, image, baseline, label, cfg.attacks.ig_steps))
        .collect::<Result<Vec<_>, _>>()?;
    let mut selection = consensus_select(&maps, cfg.attacks.consensus_n, cfg.attacks.top_fraction)?;
    if cfg.attacks.sign_filter {
        sign_filter(&mut selection, &maps);
    }
    Ok(selection)
}

fn load_dataset(cfg: &CampaignConfig) -> Result<Dataset, CampaignError> {
    let d = &cfg.dataset;
    let data = match d.source.as_str() {
        "idx" => load_idx(Path::new(&d.images), Path::new(&d.labels))?,
        _ => synth_dataset(d.seed, d.per_class),
    };
    if data.samples.is_empty() {
        return Err(CampaignError::EmptyDataset);
    }
    Ok(data)
}

fn obtain_bank(cfg: &CampaignConfig) -> Result<ModelBank, CampaignError> {
    let b = &cfg.bank;
    Ok(match b.source.as_str() {
        "load" => load_bank(Path::new(&b.dir))?,
        _ => {
            let data = synth_dataset(b.data_seed, b.per_class);
            build_bank(&data, b.train_seed, b.epochs)?.0
        }
    })
}

/// One attempt's outputs, before they are joined with sample identity.
struct Attempt {
    status: AttackStatus,
    success: bool,
    stages: Vec<StageRecord>,
    perturbed: Tensor,
    queries: u64,
    rmsd: f64,
    l2: f64,
    perturbed_fraction: f64,
    alerts: u32,
    error_codes: Vec<i32>,
    consensus_size: Option<usize>,
}

fn last_scored(stages: &[StageRecord]) -> (Option<String>, Option<f64>) {
    stages
        .iter()
        .rev()
        .find(|s| s.top_category.is_some())
        .map(|s| (s.top_category.clone(), s.top_percent))
        .unwrap_or((None, None))
}

fn verification_record(
    stage: usize,
    response: &OracleResponse,
    rmsd: f64,
    perturbed_fraction: f64,
) -> StageRecord {
    let (top_category, top_percent) = response
        .top_category()
        .map(|(c, p)| (Some(c.to_string()), Some(p)))
        .unwrap_or((None, None));
    StageRecord {
        stage,
        selection_fraction: 1.0,
        step_limit: None,
        top_category,
        top_percent,
        attacked_percent: None,
        error_code: response.error_code(),
        rmsd_from_original: rmsd,
        perturbed_fraction,
    }
}

/// Submits the crafted image once and reads off the verdict. The attack's
/// own stage responses are advisory for surrogate-crafted images; only this
/// live answer decides `success`.
fn verify(
    client: &OracleClient,
    original: &Tensor,
    perturbed: &Tensor,
    threshold: f64,
    attempt: &mut Attempt,
    halt_on_alert: bool,
) {
    let rmsd = atf_core::metrics::rmsd(original, perturbed).unwrap_or(f64::NAN);
    match client.classify(perturbed) {
        Ok(response) => {
            attempt
                .stages
                .push(verification_record(attempt.stages.len(), &response, rmsd, attempt.perturbed_fraction));
            if response.is_alert() {
                attempt.alerts += 1;
                if halt_on_alert {
                    attempt.status = AttackStatus::HaltedByAlert;
                }
            }
            if let Some(code) = response.error_code() {
                attempt.error_codes.push(code);
            }
            attempt.success = response
                .top_category()
                .is_some_and(|(_, percent)| percent < threshold);
            if attempt.success {
                attempt.status = AttackStatus::Evaded;
            }
        }
        Err(_) => {
            attempt.success = false;
            attempt.status = AttackStatus::BudgetExhausted;
        }
    }
    attempt.queries = client.spent();
}

fn from_outcome(outcome: atf_core::attack::OracleAttackOutcome, original: &Tensor) -> Attempt {
    let rmsd = outcome.sample.rmsd();
    let l2 = original.l2_distance(&outcome.sample.perturbed);
    Attempt {
        status: outcome.status,
        success: outcome.status == AttackStatus::Evaded,
        stages: outcome.stages,
        perturbed: outcome.sample.perturbed,
        queries: outcome.sample.queries_spent,
        rmsd,
        l2,
        perturbed_fraction: outcome.sample.perturbed_fraction,
        alerts: outcome.alert_count,
        error_codes: outcome.error_codes,
        consensus_size: None,
    }
}

struct FamilyRun<'a> {
    cfg: &'a CampaignConfig,
    threat: &'a ThreatModelConfig,
    bank: &'a ModelBank,
    baseline: &'a Tensor,
    threshold: f64,
    transfer: &'a mut BTreeMap<String, TransferRow>,
}

impl FamilyRun<'_> {
    fn attack_params(&self, epsilon: f64, iterations: usize, step_size: f64) -> AttackParams {
        AttackParams {
            epsilon,
            iterations,
            step_size,
            target_label: self.threat.target_label(),
            pixel_bounds: (0.0, 255.0),
        }
    }

    fn run(
        &mut self,
        family: &str,
        sample: &Sample,
        sample_index: usize,
        client: &OracleClient,
    ) -> Result<Attempt, CampaignError> {
        let a = &self.cfg.attacks;
        let halt = self.threat.error_policy == ErrorPolicy::HaltOnAlert;
        match family {
            "atf" => {
                let selection = consensus_for(self.bank, &sample.image, self.baseline, self.cfg)?;
                let outcome = atf_influence_attack(
                    sample,
                    self.baseline,
                    &selection,
                    client,
                    self.threat,
                    &StageSchedule::default(),
                    self.threshold,
                )?;
                let mut attempt = from_outcome(outcome, &sample.image);
                attempt.consensus_size = Some(selection.selected_indices.len());
                Ok(attempt)
            }
            "gradient-estimation" => {
                let params =
                    self.attack_params(self.threat.epsilon_budget, a.ge_iterations, a.ge_step);
                let outcome = gradient_estimation_attack(
                    client,
                    sample,
                    &params,
                    self.threat,
                    a.ge_delta,
                    a.ge_samples,
                    a.seed.wrapping_add(sample_index as u64),
                    self.threshold,
                )?;
                let mut attempt = from_outcome(outcome, &sample.image);
                if attempt.status != AttackStatus::HaltedByAlert {
                    let perturbed = attempt.perturbed.clone();
                    verify(client, &sample.image, &perturbed, self.threshold, &mut attempt, halt);
                } else {
                    attempt.success = false;
                }
                Ok(attempt)
            }
            "finite-difference" => {
                let params =
                    self.attack_params(self.threat.epsilon_budget, a.fd_iterations, a.fd_step);
                let outcome = finite_difference_attack(
                    client,
                    sample,
                    &params,
                    self.threat,
                    a.fd_step,
                    self.threshold,
                )?;
                let mut attempt = from_outcome(outcome, &sample.image);
                if attempt.status != AttackStatus::HaltedByAlert {
                    let perturbed = attempt.perturbed.clone();
                    verify(client, &sample.image, &perturbed, self.threshold, &mut attempt, halt);
                } else {
                    attempt.success = false;
                }
                Ok(attempt)
            }
            _ => self.run_transfer(family, sample, client, halt),
        }
    }

    /// Surrogate-crafted families: craft one candidate per bank member and
    /// verify each against the live service. The per-surrogate outcomes
    /// feed the transfer matrix; the row keeps the first verified evader.
    fn run_transfer(
        &mut self,
        family: &str,
        sample: &Sample,
        client: &OracleClient,
        halt: bool,
    ) -> Result<Attempt, CampaignError> {
        let a = &self.cfg.attacks;
        let members = self.bank.members.len();
        let mut attempt = Attempt {
            status: AttackStatus::NotEvaded,
            success: false,
            stages: Vec::new(),
            perturbed: sample.image.clone(),
            queries: 0,
            rmsd: 0.0,
            l2: 0.0,
            perturbed_fraction: 0.0,
            alerts: 0,
            error_codes: Vec::new(),
            consensus_size: None,
        };
        let mut chosen = false;
        for (idx, member) in self.bank.members.iter().enumerate() {
            let candidate = match family {
                "fgsm" => fgsm(
                    member,
                    sample,
                    &self.attack_params(a.sign_epsilon, 1, a.sign_epsilon),
                )?,
                "ifgsm" => ifgsm(
                    member,
                    sample,
                    &self.attack_params(a.sign_epsilon, a.ifgsm_iterations, a.ifgsm_step),
                )?,
                _ => jsma(
                    member,
                    sample,
                    &self.attack_params(255.0, a.jsma_pixels, 255.0),
                )?,
            };
            let row = self.transfer.entry(member.id.clone()).or_default();
            row.crafted += 1;
            if candidate.surrogate_evading {
                row.surrogate_evading += 1;
            }
            let response = match client.classify(&candidate.perturbed) {
                Ok(r) => r,
                Err(_) => {
                    attempt.status = AttackStatus::BudgetExhausted;
                    break;
                }
            };
            let cand_rmsd = candidate.rmsd();
            attempt.stages.push(StageRecord {
                stage: idx,
                selection_fraction: (idx + 1) as f64 / members as f64,
                step_limit: Some(a.sign_epsilon),
                top_category: response.top_category().map(|(c, _)| c.to_string()),
                top_percent: response.top_category().map(|(_, p)| p),
                attacked_percent: None,
                error_code: response.error_code(),
                rmsd_from_original: cand_rmsd,
                perturbed_fraction: candidate.perturbed_fraction,
            });
            if let Some(code) = response.error_code() {
                attempt.error_codes.push(code);
            }
            let evades = response
                .top_category()
                .is_some_and(|(_, percent)| percent < self.threshold);
            let row = self.transfer.entry(member.id.clone()).or_default();
            if response.is_alert() {
                row.oracle_alerts += 1;
                attempt.alerts += 1;
            }
            if evades {
                row.oracle_evading += 1;
            }
            // First evader (or first candidate at all) defines the row's
            // distortion numbers.
            if evades && !attempt.success {
                attempt.success = true;
                attempt.status = AttackStatus::Evaded;
                chosen = true;
                attempt.rmsd = cand_rmsd;
                attempt.l2 = sample.image.l2_distance(&candidate.perturbed);
                attempt.perturbed_fraction = candidate.perturbed_fraction;
                attempt.perturbed = candidate.perturbed;
            } else if !chosen {
                attempt.rmsd = cand_rmsd;
                attempt.l2 = sample.image.l2_distance(&candidate.perturbed);
                attempt.perturbed_fraction = candidate.perturbed_fraction;
                attempt.perturbed = candidate.perturbed;
            }
            if response.is_alert() && halt {
                attempt.status = AttackStatus::HaltedByAlert;
                attempt.success = false;
                break;
            }
        }
        attempt.queries = client.spent();
        Ok(attempt)
    }
}

/// One cheap, representative submission per enabled family, each in its own
/// session, so the campaign learns which families the service's defences
/// answer with alerts before any real budget is spent.
fn rehearse(
    family: &str,
    sample: &Sample,
    bank: &ModelBank,
    baseline: &Tensor,
    cfg: &CampaignConfig,
    threat: &ThreatModelConfig,
    backend: &Backend,
    errors: &Arc<Mutex<ErrorRecord>>,
    global: &Option<Arc<GlobalBudget>>,
    totals: &mut SessionTotals,
) -> Result<RehearsalRow, CampaignError> {
    let a = &cfg.attacks;
    let session = backend.open_session()?;
    let api = RecordingApi::wrap(session.api(), format!("probe:{family}"), errors);
    let budget = (a.probe_samples as u64 + 8).min(threat.query_budget);
    let client = make_client(api, budget, global);
    let mut alerts = 0usize;
    let mut error_codes = Vec::new();
    let mut observe = |response: Result<OracleResponse, _>| match response {
        Ok(r) => {
            if r.is_alert() {
                alerts += 1;
            }
            if let Some(code) = r.error_code() {
                error_codes.push(code);
            }
            true
        }
        Err(_) => false,
    };

    let target = threat.target_label();
    let params = |epsilon: f64, iterations: usize, step_size: f64| AttackParams {
        epsilon,
        iterations,
        step_size,
        target_label: target,
        pixel_bounds: (0.0, 255.0),
    };
    match family {
        "fgsm" => {
            let cand = fgsm(&bank.members[0], sample, &params(a.sign_epsilon, 1, a.sign_epsilon))?;
            observe(client.classify(&cand.perturbed));
        }
        "ifgsm" => {
            let cand = ifgsm(
                &bank.members[0],
                sample,
                &params(a.sign_epsilon, a.ifgsm_iterations, a.ifgsm_step),
            )?;
            observe(client.classify(&cand.perturbed));
        }
        "jsma" => {
            let cand = jsma(&bank.members[0], sample, &params(255.0, a.jsma_pixels, 255.0))?;
            observe(client.classify(&cand.perturbed));
        }
        "finite-difference" => {
            // The probing pattern that gives finite differences away: tiny
            // single-pixel nudges of one base image, back to back.
            let len = sample.image.len();
            for i in 0..a.probe_samples {
                let mut px = sample.image.data().to_vec();
                let ix = (i * 37) % len;
                px[ix] = (px[ix] + a.fd_step).clamp(0.0, 255.0);
                let img = Tensor::new(px, sample.image.shape().to_vec()).expect("shape kept");
                if !observe(client.classify(&img)) {
                    break;
                }
            }
        }
        "gradient-estimation" => {
            // An antithetic direction pair at the estimation radius.
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let len = sample.image.len();
            let mut dir: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v = *v / norm * a.ge_delta);
            for sign in [1.0, -1.0] {
                let px: Vec<f64> = sample
                    .image
                    .data()
                    .iter()
                    .zip(&dir)
                    .map(|(v, d)| (v + sign * d).clamp(0.0, 255.0))
                    .collect();
                let img = Tensor::new(px, sample.image.shape().to_vec()).expect("shape kept");
                if !observe(client.classify(&img)) {
                    break;
                }
            }
        }
        _ => {
            // atf: the most aggressive image the staged attack would ever
            // submit — the whole consensus selection at baseline value.
            let selection = consensus_for(bank, &sample.image, baseline, cfg)?;
            let mut px = sample.image.data().to_vec();
            for &ix in &selection.selected_indices {
                px[ix] = baseline.data()[ix];
            }
            let img = Tensor::new(px, sample.image.shape().to_vec()).expect("shape kept");
            observe(client.classify(&img));
        }
    }

    let row = RehearsalRow {
        family: family.to_string(),
        queries: client.spent(),
        alerts,
        error_codes,
    };
    if let Ok(stats) = session.stats() {
        totals.absorb(&stats);
    }
    session.retire();
    Ok(row)
}

pub fn run_campaign(config: &CampaignConfig) -> Result<AttackReport, CampaignError> {
    run_campaign_with(config, RunOptions::default())
}

pub fn run_campaign_with(
    config: &CampaignConfig,
    options: RunOptions,
) -> Result<AttackReport, CampaignError> {
    config.validate()?;
    let threat = config.threat_model();
    let dataset = load_dataset(config)?;

    let mut targets: Vec<usize> = match &options.sample_indices {
        Some(list) => {
            for &index in list {
                if index >= dataset.samples.len() {
                    return Err(CampaignError::SampleOutOfRange {
                        index,
                        len: dataset.samples.len(),
                    });
                }
            }
            list.clone()
        }
        None => (0..dataset.samples.len()).collect(),
    };
    if options.sample_indices.is_none() && config.dataset.sample_limit > 0 {
        targets.truncate(config.dataset.sample_limit);
    }
    if targets.is_empty() {
        return Err(CampaignError::EmptyDataset);
    }

    let enabled: Vec<String> = match &options.only_family {
        Some(family) => {
            if !crate::selector::DECLARED_ORDER.contains(&family.as_str()) {
                return Err(CampaignError::Config(ConfigError::UnknownAttack(
                    family.clone(),
                    &crate::selector::DECLARED_ORDER,
                )));
            }
            vec![family.clone()]
        }
        None => config.attacks.enabled.clone(),
    };

    let bank = obtain_bank(config)?;
    let backend = Backend::from_config(&config.oracle)?;
    let threshold = backend
        .threshold_percent()
        .unwrap_or(config.oracle.threshold_percent);

    let errors = Arc::new(Mutex::new(ErrorRecord::default()));
    let global = (config.threat.campaign_budget > 0)
        .then(|| GlobalBudget::new(config.threat.campaign_budget));
    let mut totals = SessionTotals::default();
    let mut complete = true;

    let first = &dataset.samples[targets[0]];
    let baseline = Tensor::zeros(first.image.shape());
    let input_dim = first.image.len();

    // Rehearsals: families whose rehearsal draws an alert get excluded by
    // the selector under halt-on-alert rather than burning a session each
    // on a policy-violating attack.
    let mut rehearsals = Vec::new();
    if config.attacks.probe_enabled {
        for family in &enabled {
            if global_exhausted(&global) {
                complete = false;
                break;
            }
            rehearsals.push(rehearse(
                family, first, &bank, &baseline, config, &threat, &backend, &errors, &global,
                &mut totals,
            )?);
        }
    }

    let ctx = SelectionContext {
        query_budget: threat.query_budget,
        error_policy: threat.error_policy,
        input_dim,
        consensus_ready: !bank.members.is_empty(),
        alerted_families: errors.lock().expect("error record lock").alerted_families(),
    };
    let plan: Vec<RankedAttack> = rank_attacks(&enabled, &ctx);
    let executable_plan = executable(&enabled, &ctx);
    if executable_plan.is_empty() {
        return Err(CampaignError::NothingExecutable);
    }

    let mut rows: Vec<SampleRow> = Vec::new();
    let mut evaders: Vec<Tensor> = Vec::new();
    let mut consensus_sizes: Vec<usize> = Vec::new();
    let mut transfer: BTreeMap<String, TransferRow> = BTreeMap::new();

    'samples: for &sample_index in &targets {
        let sample = &dataset.samples[sample_index];
        for ranked in &executable_plan {
            if global_exhausted(&global) {
                complete = false;
                break 'samples;
            }
            let family = ranked.family.as_str();
            let session = backend.open_session()?;
            let session_id = session.id();
            let api = RecordingApi::wrap(session.api(), format!("attack:{family}"), &errors);
            let client = make_client(api, threat.query_budget, &global);
            let mut run = FamilyRun {
                cfg: config,
                threat: &threat,
                bank: &bank,
                baseline: &baseline,
                threshold,
                transfer: &mut transfer,
            };
            let attempt = run.run(family, sample, sample_index, &client)?;
            if let Ok(stats) = session.stats() {
                totals.absorb(&stats);
            }
            session.retire();

            if let Some(size) = attempt.consensus_size {
                consensus_sizes.push(size);
            }
            if attempt.success {
                evaders.push(attempt.perturbed.clone());
            }
            let (final_top_category, final_top_percent) = last_scored(&attempt.stages);
            rows.push(SampleRow {
                sample_index,
                true_category: CATEGORIES[sample.label % CATEGORIES.len()].to_string(),
                family: family.to_string(),
                session_id,
                status: attempt.status,
                success: attempt.success,
                queries: attempt.queries,
                rmsd: attempt.rmsd,
                l2: attempt.l2,
                perturbed_fraction: attempt.perturbed_fraction,
                final_top_category,
                final_top_percent,
                alerts: attempt.alerts,
                error_codes: attempt.error_codes,
                stages: attempt.stages,
            });
        }
    }

    // Persistence: swap the model and ask whether yesterday's evasions
    // still work today.
    let persistence = if threat.persistence_required && complete {
        let session = backend.open_session()?;
        let update = session.force_update()?;
        let api = RecordingApi::wrap(session.api(), "persistence:verify", &errors);
        let client = make_client(api, evaders.len() as u64 + 8, &global);
        let mut still = 0usize;
        for image in &evaders {
            match client.classify(image) {
                Ok(response) => {
                    if response
                        .top_category()
                        .is_some_and(|(_, percent)| percent < threshold)
                    {
                        still += 1;
                    }
                }
                Err(_) => {
                    complete = false;
                    break;
                }
            }
        }
        if let Ok(stats) = session.stats() {
            totals.absorb(&stats);
        }
        session.retire();
        Some(PersistenceReport {
            evaders_before: evaders.len(),
            still_evading: still,
            fraction: if evaders.is_empty() {
                0.0
            } else {
                still as f64 / evaders.len() as f64
            },
            model_version: update.version,
            clean_consistency: update.clean_consistency,
        })
    } else {
        None
    };

    let mut families = BTreeMap::new();
    for ranked in &executable_plan {
        let family = &ranked.family;
        let stats: Vec<OutcomeStat> = rows
            .iter()
            .filter(|r| &r.family == family)
            .map(SampleRow::outcome_stat)
            .collect();
        if let Some(aggregate) = AttackAggregate::from_stats(&stats) {
            families.insert(
                family.clone(),
                FamilySummary {
                    aggregate,
                    halted: rows
                        .iter()
                        .filter(|r| &r.family == family && r.status == AttackStatus::HaltedByAlert)
                        .count(),
                    exhausted: rows
                        .iter()
                        .filter(|r| {
                            &r.family == family && r.status == AttackStatus::BudgetExhausted
                        })
                        .count(),
                },
            );
        }
    }

    consensus_sizes.sort_unstable();
    let errors = Arc::try_unwrap(errors)
        .map(|m| m.into_inner().expect("error record lock"))
        .unwrap_or_else(|arc| arc.lock().expect("error record lock").clone());
    let queries_total = totals.attempted;
    Ok(AttackReport {
        campaign: CampaignMeta {
            seed: config.attacks.seed,
            oracle: backend.describe(),
            threshold_percent: threshold,
            query_budget: threat.query_budget,
            campaign_budget: config.threat.campaign_budget,
            error_policy: config.threat.error_policy.clone(),
            goal: config.threat.goal.clone(),
            samples_planned: targets.len(),
            bank_members: bank.ids(),
            consensus_size: consensus_sizes.get(consensus_sizes.len() / 2).copied(),
        },
        plan,
        rehearsals,
        families,
        samples: rows,
        transfer,
        errors,
        sessions: totals,
        persistence,
        complete,
        queries_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> CampaignConfig {
        let policy_path = dir.join("policy.toml");
        std::fs::write(
            &policy_path,
            "per_class = 8\nepochs = 2\ndetector_enabled = false\n",
        )
        .unwrap();
        CampaignConfig::from_toml_str(&format!(
            r#"
            [threat]
            error_policy = "tolerate-alerts"

            [oracle]
            policy = "{}"

            [bank]
            per_class = 4
            epochs = 2

            [dataset]
            per_class = 4
            sample_limit = 2

            [attacks]
            enabled = ["atf", "fgsm"]
            probe_samples = 2
            ig_steps = 8
            "#,
            policy_path.display()
        ))
        .unwrap()
    }

    #[test]
    fn tiny_campaign_end_to_end_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = run_campaign(&cfg).unwrap();
        assert!(report.complete);
        assert_eq!(report.samples.len(), 4, "2 samples x 2 families");
        assert_eq!(report.rehearsals.len(), 2);
        assert_eq!(report.campaign.bank_members.len(), 5);
        assert!(report.campaign.consensus_size.is_some());
        for family in ["atf", "fgsm"] {
            let recomputed = report.recompute_aggregate(family).unwrap();
            assert_eq!(recomputed, report.families[family].aggregate);
        }
        // transfer matrix only collects rows for surrogate-crafted families
        assert_eq!(report.transfer.len(), 5);
        for row in report.transfer.values() {
            assert_eq!(row.crafted, 2);
        }
        // service-side accounting covers exactly what the clients sent
        assert_eq!(report.queries_total, report.sessions.attempted);
        assert_eq!(report.sessions.sessions, 2 + 4);
        let client_side: u64 = report.samples.iter().map(|r| r.queries).sum::<u64>()
            + report.rehearsals.iter().map(|r| r.queries).sum::<u64>();
        assert_eq!(report.sessions.attempted, client_side);

        // same seeds, fresh service: byte-identical report
        let again = run_campaign(&cfg).unwrap();
        assert_eq!(report.to_json(), again.to_json());
    }

    #[test]
    fn campaign_budget_exhaustion_yields_incomplete_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.threat.campaign_budget = 3;
        let report = run_campaign(&cfg).unwrap();
        assert!(!report.complete);
        assert!(report.queries_total <= 3);
    }

    #[test]
    fn single_sample_single_family_filter() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = run_campaign_with(
            &cfg,
            RunOptions {
                sample_indices: Some(vec![3]),
                only_family: Some("ifgsm".into()),
            },
        )
        .unwrap();
        assert_eq!(report.samples.len(), 1);
        assert_eq!(report.samples[0].family, "ifgsm");
        assert_eq!(report.samples[0].sample_index, 3);
        assert_eq!(report.rehearsals.len(), 1);
    }

    #[test]
    fn out_of_range_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = run_campaign_with(
            &cfg,
            RunOptions {
                sample_indices: Some(vec![999]),
                only_family: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, CampaignError::SampleOutOfRange { .. }));
    }

    #[test]
    fn persistence_check_reports_fraction_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.threat.persistence_required = true;
        cfg.attacks.enabled = vec!["atf".into()];
        let report = run_campaign(&cfg).unwrap();
        let p = report.persistence.expect("persistence requested");
        assert!(p.fraction >= 0.0 && p.fraction <= 1.0);
        assert_eq!(p.model_version, 2);
        assert!(p.evaders_before >= p.still_evading);
    }
}
