//! The five multi-task training schedules over the federation machinery:
//! task-sequential federations (TOC), client-local task sequences (COT),
//! parallel per-task updates aggregated together (CAT), cumulative
//! mixed-dataset training (CFT), and cumulative training with separate
//! classification and regression models (CFT-reg).

use crate::data::{ClientShard, Corpus, TaskId, TrainItem};
use crate::error::{Error, Result};
use crate::federation::{
    adapter_seed, client_seed, evaluate_task, fedavg, fold_rounds, individual_fed_seed,
    run_individual, train_on_items, AdapterUpdate, AggregationPolicy, EvalSet, FedConfig,
    FederationRun, IndividualOutcome, TrainingConfig,
};
use crate::lora::{export_state, import_state, init_adapters, merge, StateEntry, TaskAdapterProfile};
use crate::metrics::{select_best_round, MetricKind, RoundHistory};
use crate::model::TransformerWeights;
use crate::numerics::{derive_seed, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Toc,
    Cot,
    Cat,
    Cft,
    CftReg,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Toc,
        StrategyKind::Cot,
        StrategyKind::Cat,
        StrategyKind::Cft,
        StrategyKind::CftReg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Toc => "toc",
            StrategyKind::Cot => "cot",
            StrategyKind::Cat => "cat",
            StrategyKind::Cft => "cft",
            StrategyKind::CftReg => "cft_reg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toc" => Ok(StrategyKind::Toc),
            "cot" => Ok(StrategyKind::Cot),
            "cat" => Ok(StrategyKind::Cat),
            "cft" => Ok(StrategyKind::Cft),
            "cft_reg" => Ok(StrategyKind::CftReg),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    fn id(&self) -> u64 {
        match self {
            StrategyKind::Toc => 1,
            StrategyKind::Cot => 2,
            StrategyKind::Cat => 3,
            StrategyKind::Cft => 4,
            StrategyKind::CftReg => 5,
        }
    }
}

/// Declarative schedule for one multi-task run. The sequential strategy
/// (TOC) uses the per-task adapter profiles; all others use the all-targets
/// rank-8 profile.
#[derive(Debug, Clone)]
pub struct MultiTaskPlan {
    pub strategy: StrategyKind,
    pub rounds: u32,
    pub policy: AggregationPolicy,
    pub task_order: [TaskId; 3],
    pub train: TrainingConfig,
    pub seed: u64,
}

impl MultiTaskPlan {
    pub fn new(strategy: StrategyKind, rounds: u32, seed: u64) -> Self {
        // CAT weighs every (client, task) update equally; the rest default
        // to classical sample weighting.
        let policy = match strategy {
            StrategyKind::Cat => AggregationPolicy::Uniform,
            _ => AggregationPolicy::SampleWeighted,
        };
        MultiTaskPlan {
            strategy,
            rounds,
            policy,
            task_order: TaskId::ALL,
            train: TrainingConfig::default(),
            seed,
        }
    }
}

/// One client's per-task training corpora.
#[derive(Debug, Clone)]
pub struct ClientTaskShards {
    pub client_id: u32,
    pub shards: [Corpus; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct MultiTaskContext<'a> {
    pub base_weights: &'a TransformerWeights,
    pub clients: &'a [ClientTaskShards],
    pub test: &'a [Corpus; 3],
    pub jobs: usize,
}

/// One table row: a model evaluated on all three tasks, with the selected
/// best round per task where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub best_rounds: [Option<u32>; 3],
    /// 0-1 scale metric triples per task.
    pub per_task: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskMetricsTable {
    pub rows: Vec<TableRow>,
}

impl TaskMetricsTable {
    /// `model,task,metric,value_percent` CSV, three-decimal percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,task,metric,value_percent\n");
        for row in &self.rows {
            for task in TaskId::ALL {
                let names = match task {
                    TaskId::T1 => MetricKind::Classification.metric_names(),
                    _ => MetricKind::Generation.metric_names(),
                };
                for (name, value) in names.iter().zip(row.per_task[task.index()].iter()) {
                    out.push_str(&format!("{},{task},{name},{:.3}\n", row.label, value * 100.0));
                }
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Model | BEST (t1/t2/t3) | t1 precision | t1 recall | t1 f1 | t2 c_bleu | t2 meteor | t2 rouge_l | t3 c_bleu | t3 meteor | t3 rouge_l |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let best = row
                .best_rounds
                .iter()
                .map(|b| b.map(|r| r.to_string()).unwrap_or_else(|| "-".into()))
                .collect::<Vec<_>>()
                .join(" / ");
            out.push_str(&format!("| {} | {} ", row.label, best));
            for task in TaskId::ALL {
                for value in row.per_task[task.index()] {
                    out.push_str(&format!("| {:.3} ", value * 100.0));
                }
            }
            out.push_str("|\n");
        }
        out
    }
}

/// Everything a finished strategy reports: the per-task table, every
/// round-wise history produced along the way (labelled by stage), and the
/// resulting model(s).
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub table: TaskMetricsTable,
    pub histories: Vec<(String, TaskId, RoundHistory)>,
    pub models: Vec<(String, TransformerWeights)>,
    /// Aggregated adapter entries per round, one lineage per federation the
    /// strategy ran (checkpoint payloads).
    pub checkpoints: Vec<(String, Vec<Vec<StateEntry>>)>,
}

fn strategy_fed_seed(experiment_seed: u64, strategy: StrategyKind, stage: u64) -> u64 {
    derive_seed(experiment_seed, &[0x57A6, strategy.id(), stage])
}

fn history_kind(task: TaskId) -> MetricKind {
    match task {
        TaskId::T1 => MetricKind::Classification,
        _ => MetricKind::Generation,
    }
}

/// Evaluate a model on all three test corpora.
pub fn eval_all(weights: &TransformerWeights, test: &[Corpus; 3]) -> Result<[[f64; 3]; 3]> {
    let mut out = [[0.0; 3]; 3];
    for task in TaskId::ALL {
        out[task.index()] = evaluate_task(weights, None, &test[task.index()])?;
    }
    Ok(out)
}

/// Evaluate a set of finished models on all three tasks (one row each).
pub fn evaluate_multitask(
    models: &[(String, &TransformerWeights)],
    test: &[Corpus; 3],
) -> Result<TaskMetricsTable> {
    let mut table = TaskMetricsTable::default();
    for (label, weights) in models {
        table.rows.push(TableRow {
            label: label.clone(),
            best_rounds: [None; 3],
            per_task: eval_all(weights, test)?,
        });
    }
    Ok(table)
}

fn task_shards(clients: &[ClientTaskShards], task: TaskId) -> Vec<ClientShard> {
    clients
        .iter()
        .map(|c| ClientShard {
            client_id: c.client_id,
            corpus: c.shards[task.index()].clone(),
        })
        .collect()
}

/// Sequential federation per task: federate T1 fully, merge its best round,
/// then continue with T2 from that base, then T3. Intermediate and final
/// models are evaluated on all three tasks.
pub fn run_toc(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<StrategyOutcome> {
    let mut current = ctx.base_weights.clone();
    let mut outcome = StrategyOutcome {
        table: TaskMetricsTable::default(),
        histories: Vec::new(),
        models: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut label = String::from("m");
    for (stage, &task) in plan.task_order.iter().enumerate() {
        label.push_str(&(task.index() + 1).to_string());
        let lora = TaskAdapterProfile::for_task(task);
        let cfg = FedConfig {
            rounds: plan.rounds,
            policy: plan.policy,
            seed: strategy_fed_seed(plan.seed, StrategyKind::Toc, stage as u64),
            ..FedConfig::default()
        };
        let run = FederationRun {
            base_weights: &current,
            lora_config: lora.clone(),
            train: plan.train.clone(),
        };
        let shards = task_shards(ctx.clients, task);
        let eval = EvalSet {
            task,
            corpus: &ctx.test[task.index()],
        };
        let fed = crate::federation::run_federation(&run, &shards, &cfg, eval, ctx.jobs)
            .map_err(|e| Error::Training {
                step: stage,
                message: format!("stage {label} ({task}) failed: {e}"),
            })?;
        let best = select_best_round(&fed.history)?;
        current = fold_rounds(&current, &lora, &fed.round_entries, best)?;
        outcome.checkpoints.push((label.clone(), fed.round_entries));
        outcome.histories.push((label.clone(), task, fed.history));
        let mut best_rounds = [None; 3];
        best_rounds[task.index()] = Some(best as u32);
        outcome.table.rows.push(TableRow {
            label: label.clone(),
            best_rounds,
            per_task: eval_all(&current, ctx.test)?,
        });
        outcome.models.push((label.clone(), current.clone()));
    }
    Ok(outcome)
}

/// Shared skeleton for the single-federation multi-task strategies: per
/// round, `make_updates` produces the round's updates from the current
/// global model; the aggregate is merged and the model evaluated on all
/// tasks.
fn federated_multitask_rounds<F>(
    plan: &MultiTaskPlan,
    ctx: &MultiTaskContext<'_>,
    fed_seed: u64,
    eval_tasks: &[TaskId],
    mut make_updates: F,
) -> Result<(Vec<RoundHistory>, TransformerWeights, Vec<Vec<StateEntry>>)>
where
    F: FnMut(&TransformerWeights, u32) -> Result<Vec<AdapterUpdate>>,
{
    let mut current = ctx.base_weights.clone();
    let mut histories: Vec<RoundHistory> = eval_tasks
        .iter()
        .map(|&t| RoundHistory::new(history_kind(t)))
        .collect();
    let eval_row = |weights: &TransformerWeights, histories: &mut Vec<RoundHistory>| -> Result<()> {
        for (h, &t) in histories.iter_mut().zip(eval_tasks.iter()) {
            h.rows.push(evaluate_task(weights, None, &ctx.test[t.index()])?);
        }
        Ok(())
    };
    eval_row(&current, &mut histories)?;
    let mut round_entries = Vec::with_capacity(plan.rounds as usize);
    for round in 1..=plan.rounds {
        let updates = make_updates(&current, round)?;
        let aggregated = fedavg(&updates, plan.policy)?;
        let set = import_state(
            current.geometry(),
            &TaskAdapterProfile::multi_task(),
            &aggregated,
        )?;
        current = merge(&current, &set)?;
        round_entries.push(aggregated);
        eval_row(&current, &mut histories)?;
        let _ = fed_seed; // seeds are consumed inside make_updates
    }
    Ok((histories, current, round_entries))
}

fn best_rounds_row(
    label: &str,
    eval_tasks: &[TaskId],
    histories: &[RoundHistory],
) -> Result<TableRow> {
    let mut best_rounds = [None; 3];
    let mut per_task = [[0.0; 3]; 3];
    for (h, &t) in histories.iter().zip(eval_tasks.iter()) {
        let best = select_best_round(h)?;
        best_rounds[t.index()] = Some(best as u32);
        per_task[t.index()] = h.rows[best];
    }
    Ok(TableRow {
        label: label.to_string(),
        best_rounds,
        per_task,
    })
}

/// Per round, each client trains the same all-targets adapter set on T1,
/// then T2, then T3 locally (one epoch each) and ships a single update.
pub fn run_cot(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<StrategyOutcome> {
    let fed_seed = strategy_fed_seed(plan.seed, StrategyKind::Cot, 0);
    let profile = TaskAdapterProfile::multi_task();
    let order = plan.task_order;
    let clients = ctx.clients;
    let train = plan.train.clone();
    let (histories, final_weights, entries) =
        federated_multitask_rounds(plan, ctx, fed_seed, &TaskId::ALL, |current, round| {
            let base_adapters = init_adapters(current.geometry(), &profile, adapter_seed(fed_seed, round))?;
            clients
                .iter()
                .map(|client| {
                    let mut adapters = base_adapters.clone();
                    let mut total = 0u64;
                    for &task in &order {
                        let items = client.shards[task.index()].items();
                        total += items.len() as u64;
                        let seed = derive_seed(
                            client_seed(fed_seed, client.client_id, round),
                            &[task.index() as u64],
                        );
                        train_on_items(current, &mut adapters, &items, &train, seed)?;
                    }
                    Ok(AdapterUpdate {
                        client_id: client.client_id,
                        round,
                        sample_count: total,
                        entries: export_state(&adapters),
                    })
                })
                .collect()
        })?;
    let row = best_rounds_row("fedbest", &TaskId::ALL, &histories)?;
    Ok(StrategyOutcome {
        table: TaskMetricsTable { rows: vec![row] },
        histories: TaskId::ALL
            .iter()
            .zip(histories)
            .map(|(&t, h)| ("fed".to_string(), t, h))
            .collect(),
        models: vec![("final".into(), final_weights)],
        checkpoints: vec![("fed".into(), entries)],
    })
}

/// Per round, each client trains three separate all-targets adapter sets
/// (one per task) from the round base; all client-task updates aggregate
/// together with equal task weights.
pub fn run_cat(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<StrategyOutcome> {
    let fed_seed = strategy_fed_seed(plan.seed, StrategyKind::Cat, 0);
    let profile = TaskAdapterProfile::multi_task();
    let clients = ctx.clients;
    let train = plan.train.clone();
    let order = plan.task_order;
    let (histories, final_weights, entries) =
        federated_multitask_rounds(plan, ctx, fed_seed, &TaskId::ALL, |current, round| {
            let base_adapters = init_adapters(current.geometry(), &profile, adapter_seed(fed_seed, round))?;
            let mut updates = Vec::with_capacity(clients.len() * 3);
            for client in clients {
                for &task in &order {
                    let mut adapters = base_adapters.clone();
                    let items = client.shards[task.index()].items();
                    let seed = derive_seed(
                        client_seed(fed_seed, client.client_id, round),
                        &[task.index() as u64],
                    );
                    train_on_items(current, &mut adapters, &items, &train, seed)?;
                    updates.push(AdapterUpdate {
                        client_id: client.client_id,
                        round,
                        sample_count: items.len() as u64,
                        entries: export_state(&adapters),
                    });
                }
            }
            Ok(updates)
        })?;
    let row = best_rounds_row("fedbest", &TaskId::ALL, &histories)?;
    Ok(StrategyOutcome {
        table: TaskMetricsTable { rows: vec![row] },
        histories: TaskId::ALL
            .iter()
            .zip(histories)
            .map(|(&t, h)| ("fed".to_string(), t, h))
            .collect(),
        models: vec![("final".into(), final_weights)],
        checkpoints: vec![("fed".into(), entries)],
    })
}

/// A client's cumulative training set: the seeded shuffle of its task
/// shards concatenated.
pub fn mixed_items(client: &ClientTaskShards, tasks: &[TaskId], seed: u64) -> Vec<TrainItem> {
    let mut items: Vec<TrainItem> = tasks
        .iter()
        .flat_map(|&t| client.shards[t.index()].items())
        .collect();
    RngState::new(derive_seed(seed, &[0x313D, client.client_id as u64])).shuffle(&mut items);
    items
}

fn run_cumulative(
    plan: &MultiTaskPlan,
    ctx: &MultiTaskContext<'_>,
    fed_seed: u64,
    tasks: &'static [TaskId],
) -> Result<(Vec<RoundHistory>, TransformerWeights, Vec<Vec<StateEntry>>)> {
    let profile = TaskAdapterProfile::multi_task();
    let train = plan.train.clone();
    let client_items: Vec<(u32, Vec<TrainItem>)> = ctx
        .clients
        .iter()
        .map(|c| (c.client_id, mixed_items(c, tasks, fed_seed)))
        .collect();
    let (histories, final_weights, entries) =
        federated_multitask_rounds(plan, ctx, fed_seed, tasks, |current, round| {
            let base_adapters = init_adapters(current.geometry(), &profile, adapter_seed(fed_seed, round))?;
            client_items
                .iter()
                .map(|(client_id, items)| {
                    let mut adapters = base_adapters.clone();
                    train_on_items(
                        current,
                        &mut adapters,
                        items,
                        &train,
                        client_seed(fed_seed, *client_id, round),
                    )?;
                    Ok(AdapterUpdate {
                        client_id: *client_id,
                        round,
                        sample_count: items.len() as u64,
                        entries: export_state(&adapters),
                    })
                })
                .collect()
        })?;
    Ok((histories, final_weights, entries))
}

/// Cumulative fine-tuning: each client trains one adapter set per round on
/// its mixed T1+T2+T3 shard; standard federation otherwise.
pub fn run_cft(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<StrategyOutcome> {
    let fed_seed = strategy_fed_seed(plan.seed, StrategyKind::Cft, 0);
    let (histories, final_weights, entries) = run_cumulative(plan, ctx, fed_seed, &TaskId::ALL)?;
    let row = best_rounds_row("fedbest", &TaskId::ALL, &histories)?;
    Ok(StrategyOutcome {
        table: TaskMetricsTable { rows: vec![row] },
        histories: TaskId::ALL
            .iter()
            .zip(histories)
            .map(|(&t, h)| ("fed".to_string(), t, h))
            .collect(),
        models: vec![("final".into(), final_weights)],
        checkpoints: vec![("fed".into(), entries)],
    })
}

#[derive(Debug, Clone)]
pub struct CftRegOutcome {
    pub strategy: StrategyOutcome,
    pub classification: IndividualOutcome,
}

/// Split cumulative fine-tuning: the classification model is the individual
/// T1 federation (reusing its seeds, so histories match it exactly); the
/// regression model trains cumulatively on mixed T2+T3 shards. The table
/// reports the classification model on T1 and the regression model on
/// T2/T3.
pub fn run_cft_reg(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<CftRegOutcome> {
    static REG_TASKS: [TaskId; 2] = [TaskId::T2, TaskId::T3];
    let t1 = TaskId::T1;
    let individual_cfg = FedConfig {
        rounds: plan.rounds,
        policy: plan.policy,
        seed: individual_fed_seed(plan.seed, t1),
        ..FedConfig::default()
    };
    let run = FederationRun {
        base_weights: ctx.base_weights,
        lora_config: TaskAdapterProfile::for_task(t1),
        train: plan.train.clone(),
    };
    let classification = run_individual(
        &run,
        &task_shards(ctx.clients, t1),
        &individual_cfg,
        EvalSet {
            task: t1,
            corpus: &ctx.test[0],
        },
        ctx.jobs,
    )?;
    let class_best = classification.best_round;
    let class_weights = fold_rounds(
        ctx.base_weights,
        &run.lora_config,
        &classification.outcome.round_entries,
        class_best,
    )?;

    let reg_seed = strategy_fed_seed(plan.seed, StrategyKind::CftReg, 1);
    let (reg_histories, reg_weights, reg_entries) = run_cumulative(plan, ctx, reg_seed, &REG_TASKS)?;
    let reg_row = best_rounds_row("reg", &REG_TASKS, &reg_histories)?;

    let mut best_rounds = [None; 3];
    best_rounds[0] = Some(class_best as u32);
    best_rounds[1] = reg_row.best_rounds[1];
    best_rounds[2] = reg_row.best_rounds[2];
    let mut per_task = reg_row.per_task;
    per_task[0] = classification.outcome.history.rows[class_best];
    let table = TaskMetricsTable {
        rows: vec![TableRow {
            label: "fedbest".into(),
            best_rounds,
            per_task,
        }],
    };
    let mut histories = vec![(
        "classification".to_string(),
        t1,
        classification.outcome.history.clone(),
    )];
    histories.extend(
        REG_TASKS
            .iter()
            .zip(reg_histories)
            .map(|(&t, h)| ("regression".to_string(), t, h)),
    );
    Ok(CftRegOutcome {
        strategy: StrategyOutcome {
            table,
            histories,
            models: vec![
                ("classification".into(), class_weights),
                ("regression".into(), reg_weights),
            ],
            checkpoints: vec![
                ("classification".into(), classification.outcome.round_entries.clone()),
                ("regression".into(), reg_entries),
            ],
        },
        classification,
    })
}

/// Dispatch a plan to its strategy implementation.
pub fn run_strategy(plan: &MultiTaskPlan, ctx: &MultiTaskContext<'_>) -> Result<StrategyOutcome> {
    match plan.strategy {
        StrategyKind::Toc => run_toc(plan, ctx),
        StrategyKind::Cot => run_cot(plan, ctx),
        StrategyKind::Cat => run_cat(plan, ctx),
        StrategyKind::Cft => run_cft(plan, ctx),
        StrategyKind::CftReg => Ok(run_cft_reg(plan, ctx)?.strategy),
    }
}
