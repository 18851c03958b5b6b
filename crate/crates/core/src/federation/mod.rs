//! The client/server federated round loop: local one-epoch training,
//! FedAvg over exported adapter states, round-0 vanilla evaluation, and
//! round-wise history, over in-process or TCP transports.

pub mod transport;
pub mod wire;

use crate::data::{training_pair, vocab, ClientShard, Corpus, TaskId, TrainItem};
use crate::error::{Error, Result};
use crate::lora::{export_state, import_state, init_adapters, merge, AdapterSet, LoraConfig, StateEntry};
use crate::metrics::{
    corpus_bleu, meteor, prf1, rouge_l, ConfusionCounts, GenPair, MetricKind, RoundHistory,
};
use crate::model::{classify_yes_no, generate, Batch, TransformerWeights};
use crate::numerics::{
    adamw_step, clip_global_norm, derive_seed, AdamWConfig, LrSchedule, OptimizerState, RngState,
};

/// Generation budget per evaluated record (decoding also stops at EOS).
pub const EVAL_MAX_NEW: usize = 32;

const SALT_ADAPTER: u64 = 0xADA7;
const SALT_CLIENT: u64 = 0xC11E;
const SALT_SHUFFLE: u64 = 0x5F0E;
const SALT_DROPOUT: u64 = 0xD801;

/// Seed for the shared fresh-adapter initialization of a round (server
/// broadcast semantics: every client starts the round from the same init).
pub fn adapter_seed(fed_seed: u64, round: u32) -> u64 {
    derive_seed(fed_seed, &[SALT_ADAPTER, round as u64])
}

/// Seed for one client's local training in one round.
pub fn client_seed(fed_seed: u64, client_id: u32, round: u32) -> u64 {
    derive_seed(fed_seed, &[SALT_CLIENT, client_id as u64, round as u64])
}

/// Hyper-parameters for one local training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub adamw: AdamWConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 2,
            grad_accum: 1,
            max_grad_norm: 0.3,
            base_lr: 3e-4,
            warmup_ratio: 0.03,
            adamw: AdamWConfig::default(),
        }
    }
}

/// How client updates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationPolicy {
    /// Every update weighs 1/n.
    Uniform,
    /// Updates weigh sample_count_i / total (classical FedAvg weighting).
    SampleWeighted,
}

impl AggregationPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AggregationPolicy::Uniform),
            "sample_weighted" => Ok(AggregationPolicy::SampleWeighted),
            other => Err(Error::Config(format!("unknown aggregation policy '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationPolicy::Uniform => "uniform",
            AggregationPolicy::SampleWeighted => "sample_weighted",
        }
    }
}

/// Federation-level configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: u32,
    pub policy: AggregationPolicy,
    /// Seed of this federation; all per-round and per-client streams derive
    /// from it.
    pub seed: u64,
    /// Fresh B-zero adapters each round (default). The alternative keeps
    /// training the received aggregated matrices.
    pub reinit_adapters: bool,
    /// Socket-transport read timeout in seconds.
    pub timeout_secs: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 20,
            policy: AggregationPolicy::SampleWeighted,
            seed: 42,
            reinit_adapters: true,
            timeout_secs: 300,
        }
    }
}

/// The unit a client ships to the server each round.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterUpdate {
    pub client_id: u32,
    pub round: u32,
    pub sample_count: u64,
    pub entries: Vec<StateEntry>,
}

/// Immutable per-run context: the frozen base model, adapter profile, and
/// training hyper-parameters.
#[derive(Debug, Clone)]
pub struct FederationRun<'a> {
    pub base_weights: &'a TransformerWeights,
    pub lora_config: LoraConfig,
    pub train: TrainingConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub task: TaskId,
    pub corpus: &'a Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_loss: f64,
}

/// One local epoch of AdamW over the items: seeded shuffle, batching,
/// adapter-path dropout, global-norm clipping, cosine schedule with warmup.
/// Mutates `adapters` in place and reports step count and mean loss.
pub fn train_on_items(
    weights: &TransformerWeights,
    adapters: &mut AdapterSet,
    items: &[TrainItem],
    hyper: &TrainingConfig,
    seed: u64,
) -> Result<TrainStats> {
    if items.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if hyper.batch_size == 0 || hyper.grad_accum == 0 {
        return Err(Error::Config("batch_size and grad_accum must be positive".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    RngState::new(derive_seed(seed, &[SALT_SHUFFLE])).shuffle(&mut order);
    let mut dropout_rng = RngState::new(derive_seed(seed, &[SALT_DROPOUT]));

    let batches: Vec<Batch> = order
        .chunks(hyper.batch_size)
        .map(|chunk| {
            let pairs: Vec<(Vec<u32>, Vec<u32>)> = chunk
                .iter()
                .map(|&i| training_pair(items[i].task, &items[i].record))
                .collect::<Result<_>>()?;
            Batch::from_pairs(&pairs, vocab::PAD)
        })
        .collect::<Result<_>>()?;

    let optim_steps = batches.len().div_ceil(hyper.grad_accum);
    let schedule = LrSchedule::new(hyper.base_lr, hyper.warmup_ratio, optim_steps as u64)?;
    let mut state = OptimizerState::init(&adapters.param_matrices());
    let mut pending: Option<Vec<crate::numerics::Matrix>> = None;
    let mut pending_count = 0usize;
    let mut step_idx = 0u64;
    let mut loss_sum = 0.0;

    for (batch_idx, batch) in batches.iter().enumerate() {
        let (loss, grads) = loss_and_grads_checked(weights, adapters, batch, &mut dropout_rng, batch_idx)?;
        loss_sum += loss;
        match pending.as_mut() {
            None => pending = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads.iter()) {
                    a.add_assign(g)?;
                }
            }
        }
        pending_count += 1;
        let is_last = batch_idx + 1 == batches.len();
        if pending_count == hyper.grad_accum || is_last {
            let mut acc = pending.take().unwrap();
            if pending_count > 1 {
                let inv = 1.0 / pending_count as f64;
                for g in acc.iter_mut() {
                    g.scale(inv);
                }
            }
            let (clipped, _scale) = clip_global_norm(&acc, hyper.max_grad_norm)?;
            let lr = schedule.lr_at(step_idx)?;
            let mut params = adapters.param_matrices_mut();
            adamw_step(&mut params, &clipped, &mut state, lr, &hyper.adamw)?;
            step_idx += 1;
            pending_count = 0;
        }
    }
    Ok(TrainStats {
        steps: step_idx as usize,
        mean_loss: loss_sum / batches.len() as f64,
    })
}

fn loss_and_grads_checked(
    weights: &TransformerWeights,
    adapters: &AdapterSet,
    batch: &Batch,
    dropout_rng: &mut RngState,
    step: usize,
) -> Result<(f64, Vec<crate::numerics::Matrix>)> {
    let (loss, grads) = crate::model::loss_and_grads(weights, adapters, batch, Some(dropout_rng))
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Training {
                step,
                message: "loss diverged to a non-finite value".into(),
            },
            other => other,
        })?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            message: "loss diverged to a non-finite value".into(),
        });
    }
    Ok((loss, grads))
}

/// Exactly one epoch over the client's shard from the given base state;
/// returns the trained adapter export plus the shard size.
pub fn client_train_round(
    base_weights: &TransformerWeights,
    base_adapters: &AdapterSet,
    shard: &ClientShard,
    hyper: &TrainingConfig,
    round: u32,
    seed: u64,
) -> Result<AdapterUpdate> {
    if shard.corpus.is_empty() {
        return Err(Error::Input(format!("client {} has an empty shard", shard.client_id)));
    }
    let mut adapters = base_adapters.clone();
    let items = shard.corpus.items();
    train_on_items(base_weights, &mut adapters, &items, hyper, seed)?;
    Ok(AdapterUpdate {
        client_id: shard.client_id,
        round,
        sample_count: items.len() as u64,
        entries: export_state(&adapters),
    })
}

/// Entrywise weighted mean of the updates.
///
/// Updates are sorted by client id before summation, so the result is
/// exactly permutation-invariant. Sample weights are applied as a single
/// rational factor (sum of weighted entries divided by the total count),
/// so the weights sum to 1 exactly.
pub fn fedavg(updates: &[AdapterUpdate], policy: AggregationPolicy) -> Result<Vec<StateEntry>> {
    if updates.is_empty() {
        return Err(Error::Input("fedavg needs at least one update".into()));
    }
    let mut sorted: Vec<&AdapterUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted[0];
    for u in &sorted[1..] {
        if u.round != first.round {
            return Err(Error::Aggregation(format!(
                "mixed rounds in aggregation: {} vs {}",
                u.round, first.round
            )));
        }
        if u.entries.len() != first.entries.len() {
            return Err(Error::Aggregation(format!(
                "entry count mismatch: client {} has {}, client {} has {}",
                u.client_id,
                u.entries.len(),
                first.client_id,
                first.entries.len()
            )));
        }
        for (a, b) in first.entries.iter().zip(u.entries.iter()) {
            if a.name != b.name {
                return Err(Error::Aggregation(format!(
                    "entry name mismatch: '{}' vs '{}'",
                    a.name, b.name
                )));
            }
            if a.matrix.shape() != b.matrix.shape() {
                return Err(Error::Aggregation(format!(
                    "entry '{}' shape mismatch across clients",
                    a.name
                )));
            }
        }
    }
    let total: u64 = sorted.iter().map(|u| u.sample_count).sum();
    if policy == AggregationPolicy::SampleWeighted && total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    // each weight is formed as one rational count_i/total (or 1/n), so the
    // weights sum to 1 exactly and a lone client passes through unchanged
    let weight_of = |u: &AdapterUpdate| -> f64 {
        match policy {
            AggregationPolicy::Uniform => 1.0 / sorted.len() as f64,
            AggregationPolicy::SampleWeighted => u.sample_count as f64 / total as f64,
        }
    };
    let mut out: Vec<StateEntry> = first
        .entries
        .iter()
        .map(|e| StateEntry {
            name: e.name.clone(),
            matrix: crate::numerics::Matrix::zeros(e.matrix.rows(), e.matrix.cols()),
        })
        .collect();
    for u in &sorted {
        let weight = weight_of(u);
        for (acc, e) in out.iter_mut().zip(u.entries.iter()) {
            acc.matrix.add_scaled(&e.matrix, weight)?;
        }
    }
    Ok(out)
}

/// Evaluate one task on a corpus: classification via the yes/no readout and
/// precision/recall/F1; generation via greedy decoding and corpus BLEU /
/// METEOR / ROUGE-L. Values on the 0-1 scale.
pub fn evaluate_task(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    corpus: &Corpus,
) -> Result<[f64; 3]> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    match corpus.task {
        TaskId::T1 => {
            let mut counts = ConfusionCounts::default();
            for record in &corpus.records {
                let (prompt, _) = crate::data::format_prompt(TaskId::T1, record)?;
                let predicted = classify_yes_no(weights, adapters, &prompt, vocab::YES, vocab::NO)?;
                let actual = record
                    .label
                    .ok_or_else(|| Error::Data("evaluation record is missing its label".into()))?;
                counts.record(predicted, actual);
            }
            let (p, r, f) = prf1(&counts);
            Ok([p, r, f])
        }
        task => {
            let mut pairs = Vec::with_capacity(corpus.len());
            for record in &corpus.records {
                let (prompt, target) = crate::data::format_prompt(task, record)?;
                let full = generate(weights, adapters, &prompt, EVAL_MAX_NEW, Some(vocab::EOS))?;
                let mut completion = full[prompt.len()..].to_vec();
                if completion.last() == Some(&vocab::EOS) {
                    completion.pop();
                }
                pairs.push(GenPair::new(
                    vocab::decode_tokens(&completion),
                    vocab::decode_tokens(&target),
                )?);
            }
            Ok([
                corpus_bleu(&pairs, 4)?,
                meteor(&pairs, None)?,
                rouge_l(&pairs)?,
            ])
        }
    }
}

/// Everything a finished federation reports: the round history (row 0 =
/// vanilla), the aggregated adapter entries per round (checkpoint payloads),
/// and the final merged model.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub history: RoundHistory,
    pub round_entries: Vec<Vec<StateEntry>>,
    pub final_weights: TransformerWeights,
}

/// Shared round machinery so the in-process and socket paths compute
/// identically: round-0 evaluation, per-round base adapters, aggregation,
/// merging, and evaluation.
pub(crate) struct RoundEngine<'a> {
    run: &'a FederationRun<'a>,
    cfg: &'a FedConfig,
    eval: EvalSet<'a>,
    vanilla: TransformerWeights,
    weights: TransformerWeights,
    last_aggregate: Option<Vec<StateEntry>>,
    history: RoundHistory,
    round_entries: Vec<Vec<StateEntry>>,
}

impl<'a> RoundEngine<'a> {
    pub(crate) fn new(run: &'a FederationRun<'a>, cfg: &'a FedConfig, eval: EvalSet<'a>) -> Result<Self> {
        let kind = match eval.task {
            TaskId::T1 => MetricKind::Classification,
            _ => MetricKind::Generation,
        };
        let mut history = RoundHistory::new(kind);
        history
            .rows
            .push(evaluate_task(run.base_weights, None, eval.corpus)?);
        Ok(RoundEngine {
            run,
            cfg,
            eval,
            vanilla: run.base_weights.clone(),
            weights: run.base_weights.clone(),
            last_aggregate: None,
            history,
            round_entries: Vec::new(),
        })
    }

    /// Model clients train from this round.
    pub(crate) fn current_weights(&self) -> &TransformerWeights {
        if self.cfg.reinit_adapters {
            &self.weights
        } else {
            &self.vanilla
        }
    }

    /// Adapters clients start from this round.
    pub(crate) fn base_adapters(&self, round: u32) -> Result<AdapterSet> {
        let geometry = self.vanilla.geometry();
        match (&self.last_aggregate, self.cfg.reinit_adapters) {
            (Some(entries), false) => import_state(geometry, &self.run.lora_config, entries),
            _ => init_adapters(geometry, &self.run.lora_config, adapter_seed(self.cfg.seed, round)),
        }
    }

    /// Aggregate the round's updates, merge, evaluate, record.
    pub(crate) fn apply_round(&mut self, round: u32, updates: &[AdapterUpdate]) -> Result<Vec<StateEntry>> {
        let aggregated = fedavg(updates, self.cfg.policy)?;
        let set = import_state(self.vanilla.geometry(), &self.run.lora_config, &aggregated)?;
        if self.cfg.reinit_adapters {
            // each round folds only the newly aggregated adapters into the
            // previous round's merged base
            self.weights = merge(&self.weights, &set)?;
        } else {
            self.weights = merge(&self.vanilla, &set)?;
        }
        self.last_aggregate = Some(aggregated.clone());
        let row = evaluate_task(&self.weights, None, self.eval.corpus)?;
        debug_assert_eq!(self.history.rows.len(), round as usize);
        self.history.rows.push(row);
        self.round_entries.push(aggregated.clone());
        Ok(aggregated)
    }

    pub(crate) fn finish(self) -> FederationOutcome {
        FederationOutcome {
            history: self.history,
            round_entries: self.round_entries,
            final_weights: self.weights,
        }
    }
}

/// Run a full federation in process.
///
/// Round 0 evaluates the vanilla model. Each round, every client trains one
/// epoch from the current global model (fresh B-zero adapters by default),
/// the server aggregates, the aggregate is merged to form the round model,
/// and the model is evaluated. `jobs` bounds client-training parallelism;
/// results are independent of it.
pub fn run_federation(
    run: &FederationRun<'_>,
    clients: &[ClientShard],
    cfg: &FedConfig,
    eval: EvalSet<'_>,
    jobs: usize,
) -> Result<FederationOutcome> {
    if clients.is_empty() {
        return Err(Error::Input("federation needs at least one client".into()));
    }
    let mut engine = RoundEngine::new(run, cfg, eval)?;
    for round in 1..=cfg.rounds {
        let base_adapters = engine.base_adapters(round)?;
        let weights = engine.current_weights();
        let updates = train_clients(weights, &base_adapters, clients, &run.train, cfg.seed, round, jobs)?;
        engine.apply_round(round, &updates)?;
    }
    Ok(engine.finish())
}

/// Train every client for one round, optionally across threads. Update
/// order matches the client order regardless of scheduling.
pub fn train_clients(
    weights: &TransformerWeights,
    base_adapters: &AdapterSet,
    clients: &[ClientShard],
    hyper: &TrainingConfig,
    fed_seed: u64,
    round: u32,
    jobs: usize,
) -> Result<Vec<AdapterUpdate>> {
    let train_one = |shard: &ClientShard| -> Result<AdapterUpdate> {
        client_train_round(
            weights,
            base_adapters,
            shard,
            hyper,
            round,
            client_seed(fed_seed, shard.client_id, round),
        )
        .map_err(|e| Error::Training {
            step: round as usize,
            message: format!("client {} failed: {e}", shard.client_id),
        })
    };
    if jobs <= 1 || clients.len() <= 1 {
        return clients.iter().map(train_one).collect();
    }
    let mut results: Vec<Option<Result<AdapterUpdate>>> = (0..clients.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk, out) in clients
            .chunks(clients.len().div_ceil(jobs))
            .zip(results.chunks_mut(clients.len().div_ceil(jobs)))
        {
            scope.spawn(move || {
                for (shard, slot) in chunk.iter().zip(out.iter_mut()) {
                    *slot = Some(train_one(shard));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all client slots filled"))
        .collect()
}

/// The individual-task federation plus its selected best round.
#[derive(Debug, Clone)]
pub struct IndividualOutcome {
    pub outcome: FederationOutcome,
    pub best_round: usize,
}

/// Seed of the individual-task federation for a task; the cumulative
/// split-model schedule reuses this so its classification component matches
/// the individual run exactly.
pub fn individual_fed_seed(experiment_seed: u64, task: TaskId) -> u64 {
    derive_seed(experiment_seed, &[0x1D01, task.index() as u64])
}

/// RQ-style individual-task federation: run, then pick the best round by
/// the task's selection rule.
pub fn run_individual(
    run: &FederationRun<'_>,
    clients: &[ClientShard],
    cfg: &FedConfig,
    eval: EvalSet<'_>,
    jobs: usize,
) -> Result<IndividualOutcome> {
    let outcome = run_federation(run, clients, cfg, eval, jobs)?;
    let best_round = crate::metrics::select_best_round(&outcome.history)?;
    Ok(IndividualOutcome { outcome, best_round })
}

/// Fold the first `rounds` aggregated checkpoints onto a base model,
/// reproducing the round-`rounds` global model.
pub fn fold_rounds(
    base: &TransformerWeights,
    lora_config: &LoraConfig,
    round_entries: &[Vec<StateEntry>],
    rounds: usize,
) -> Result<TransformerWeights> {
    let mut weights = base.clone();
    for entries in round_entries.iter().take(rounds) {
        let set = import_state(base.geometry(), lora_config, entries)?;
        weights = merge(&weights, &set)?;
    }
    Ok(weights)
}
