//! Subcommand implementations: partition, run, serve, client.

use std::net::TcpListener;
use std::path::{Path, PathBuf};

use fedreview::data::{
    load_jsonl, project_overlap, resplit_eval, sample_shard_from, sample_shards, write_jsonl,
    ClientShard, Corpus, FieldMap, TaskId,
};
use fedreview::error::{Error, Result};
use fedreview::federation::{
    client_seed, client_train_round, evaluate_task, individual_fed_seed, run_individual,
    train_on_items, transport, wire, EvalSet, FedConfig, FederationOutcome, FederationRun,
    IndividualOutcome,
};
use fedreview::lora::{import_state, init_adapters, merge, TaskAdapterProfile};
use fedreview::metrics::history_to_csv;
use fedreview::model::TransformerWeights;
use fedreview::multitask::{
    run_cft_reg, run_strategy, ClientTaskShards, MultiTaskContext, MultiTaskPlan, StrategyKind,
    TableRow, TaskMetricsTable,
};
use fedreview::numerics::derive_seed;
use fedreview::pipeline::{prepare, ExperimentData};

use crate::config::Settings;

const SALT_CENTRAL: u64 = 0xCE27;

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Assemble the experiment data from the synthetic pipeline or from a
/// partition directory.
pub fn load_experiment(settings: &Settings) -> Result<ExperimentData> {
    match &settings.data_dir {
        None => prepare(&settings.synthetic),
        Some(dir) => {
            let fields = FieldMap::default();
            let load = |name: String, task: TaskId| -> Result<Corpus> {
                let path = dir.join(name);
                Ok(load_jsonl(&path, task, &fields)?.corpus)
            };
            let mut clients = Vec::new();
            for client_id in 0..2u32 {
                let mut shards = Vec::new();
                for task in TaskId::ALL {
                    shards.push(load(format!("client{client_id}_{task}.jsonl"), task)?);
                }
                clients.push(ClientTaskShards {
                    client_id,
                    shards: [shards.remove(0), shards.remove(0), shards.remove(0)],
                });
            }
            let mut test = Vec::new();
            for task in TaskId::ALL {
                test.push(load(format!("test_{task}.jsonl"), task)?);
            }
            let base_weights = fedreview::model::init_weights(
                &settings.geometry,
                derive_seed(settings.seed, &[0x3E16]),
            )?;
            Ok(ExperimentData {
                clients,
                test: [test.remove(0), test.remove(0), test.remove(0)],
                base_weights,
            })
        }
    }
}

/// `fedreview partition`: write per-client shard files, test files, and a
/// disjointness/ratio report.
pub fn cmd_partition(settings: &Settings) -> Result<()> {
    ensure_dir(&settings.output_dir)?;
    let data = load_partition_input(settings)?;
    let mut report = String::from("# Partition report\n\n");
    report.push_str(&format!(
        "seed: {}\nratio: {}:{}\n\n| task | client 0 | client 1 | test | yes/no c0 | yes/no c1 | project overlap |\n|---|---|---|---|---|---|---|\n",
        settings.seed, settings.synthetic.ratio.0, settings.synthetic.ratio.1
    ));
    for task in TaskId::ALL {
        let i = task.index();
        let c0 = &data.clients[0].shards[i];
        let c1 = &data.clients[1].shards[i];
        let test = &data.test[i];
        write_jsonl(&settings.output_dir.join(format!("client0_{task}.jsonl")), c0)?;
        write_jsonl(&settings.output_dir.join(format!("client1_{task}.jsonl")), c1)?;
        write_jsonl(&settings.output_dir.join(format!("test_{task}.jsonl")), test)?;
        let overlap = project_overlap(&[c0, c1, test]);
        let balance = |c: &Corpus| {
            let yes = c.records.iter().filter(|r| r.label == Some(true)).count();
            format!("{}/{}", yes, c.len() - yes)
        };
        report.push_str(&format!(
            "| {task} | {} | {} | {} | {} | {} | {} |\n",
            c0.len(),
            c1.len(),
            test.len(),
            balance(c0),
            balance(c1),
            if overlap.is_empty() {
                "none".to_string()
            } else {
                overlap.into_iter().collect::<Vec<_>>().join(", ")
            }
        ));
    }
    std::fs::write(settings.output_dir.join("partition_report.md"), &report)?;
    println!("{report}");
    println!("wrote shards to {}", settings.output_dir.display());
    Ok(())
}

fn load_partition_input(settings: &Settings) -> Result<ExperimentData> {
    // synthetic generation is the default; a data_dir input means the files
    // are raw train/valid/test dumps that go through the resplit pipeline
    match &settings.data_dir {
        None => prepare(&settings.synthetic),
        Some(dir) => {
            let fields = FieldMap::default();
            let quota_total = settings.synthetic.sample_total;
            let (ra, rb) = settings.synthetic.ratio;
            let quota_a = (quota_total as u64 * ra / (ra + rb)) as usize;
            let quota_b = quota_total - quota_a;
            let mut shards_a = Vec::new();
            let mut shards_b = Vec::new();
            let mut tests = Vec::new();
            for task in TaskId::ALL {
                let load = |stem: &str| -> Result<Corpus> {
                    let path = dir.join(format!("{task}_{stem}.jsonl"));
                    Ok(load_jsonl(&path, task, &fields)?.corpus)
                };
                let train = load("train")?;
                let valid = load("valid")?;
                let test = load("test")?;
                let resplit = resplit_eval(&valid, &test)?;
                for w in &resplit.warnings {
                    eprintln!("warning: {w}");
                }
                let balance = task == TaskId::T1;
                let seed = derive_seed(settings.seed, &[0x9A87, task.index() as u64]);
                if train.projects().is_empty() {
                    // single-pool fallback: split one corpus into both shards
                    let (a, b) = sample_shards(&train, quota_total, (ra, rb), balance, seed)?;
                    shards_a.push(a.corpus);
                    shards_b.push(b.corpus);
                } else {
                    let a = sample_shard_from(&train, quota_a, balance, seed, 0)?;
                    let b = sample_shard_from(&resplit.new_valid, quota_b, balance, seed, 1)?;
                    shards_a.push(a.corpus);
                    shards_b.push(b.corpus);
                }
                tests.push(resplit.new_test);
            }
            let base_weights = fedreview::model::init_weights(
                &settings.geometry,
                derive_seed(settings.seed, &[0x3E16]),
            )?;
            let take3 = |mut v: Vec<Corpus>| [v.remove(0), v.remove(0), v.remove(0)];
            Ok(ExperimentData {
                clients: vec![
                    ClientTaskShards {
                        client_id: 0,
                        shards: take3(shards_a),
                    },
                    ClientTaskShards {
                        client_id: 1,
                        shards: take3(shards_b),
                    },
                ],
                test: take3(tests),
                base_weights,
            })
        }
    }
}

fn task_shards(data: &ExperimentData, task: TaskId) -> Vec<ClientShard> {
    data.clients
        .iter()
        .map(|c| ClientShard {
            client_id: c.client_id,
            corpus: c.shards[task.index()].clone(),
        })
        .collect()
}

fn write_checkpoints(dir: &Path, lineage: &str, entries: &[Vec<fedreview::lora::StateEntry>]) -> Result<()> {
    let ckpt_dir = dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    for (i, round_entries) in entries.iter().enumerate() {
        let path = ckpt_dir.join(format!("{lineage}_round_{}.{}", i + 1, wire::CHECKPOINT_EXT));
        wire::write_checkpoint(&path, (i + 1) as u32, 0, round_entries)?;
    }
    Ok(())
}

fn summary_csv(rows: &[(String, TaskId, [f64; 3])]) -> String {
    let mut out = String::from("model,task,metric,value_percent\n");
    for (label, task, vals) in rows {
        let names: [&str; 3] = match task {
            TaskId::T1 => ["precision", "recall", "f1"],
            _ => ["c_bleu", "meteor", "rouge_l"],
        };
        for (name, v) in names.iter().zip(vals.iter()) {
            out.push_str(&format!("{label},{task},{name},{:.3}\n", v * 100.0));
        }
    }
    out
}

struct IndividualRow {
    label: String,
    task: TaskId,
    values: [f64; 3],
}

/// One individual-task federation over the chosen transport.
fn run_one_individual(
    settings: &Settings,
    data: &ExperimentData,
    task: TaskId,
    transport_kind: &str,
) -> Result<IndividualOutcome> {
    let lora = settings
        .lora_override
        .clone()
        .unwrap_or_else(|| TaskAdapterProfile::for_task(task));
    let run = FederationRun {
        base_weights: &data.base_weights,
        lora_config: lora,
        train: settings.train.clone(),
    };
    let cfg = FedConfig {
        rounds: settings.rounds,
        policy: settings.policy,
        seed: individual_fed_seed(settings.seed, task),
        reinit_adapters: true,
        timeout_secs: settings.timeout_secs,
    };
    let shards = task_shards(data, task);
    let eval = EvalSet {
        task,
        corpus: &data.test[task.index()],
    };
    let outcome = match transport_kind {
        "inproc" => run_individual(&run, &shards, &cfg, eval, settings.jobs)?,
        "tcp" => {
            let fed = loopback_federation(&run, &cfg, eval, &shards, &data.base_weights)?;
            let best_round = fedreview::metrics::select_best_round(&fed.history)?;
            IndividualOutcome {
                outcome: fed,
                best_round,
            }
        }
        other => return Err(Error::Config(format!("unknown transport '{other}'"))),
    };
    Ok(outcome)
}

/// Run server and clients over loopback TCP inside this process.
fn loopback_federation(
    run: &FederationRun<'_>,
    cfg: &FedConfig,
    eval: EvalSet<'_>,
    shards: &[ClientShard],
    base_weights: &TransformerWeights,
) -> Result<FederationOutcome> {
    let listener =
        TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Transport(format!("bind failed: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Transport(e.to_string()))?
        .to_string();
    std::thread::scope(|scope| {
        let server = scope.spawn(|| transport::serve(listener, run, cfg, eval, shards.len()));
        let mut clients = Vec::new();
        for shard in shards {
            let session = transport::ClientSession {
                base_weights,
                lora_config: run.lora_config.clone(),
                train: run.train.clone(),
                fed_seed: cfg.seed,
                rounds: cfg.rounds,
                reinit_adapters: cfg.reinit_adapters,
                timeout_secs: cfg.timeout_secs,
            };
            let addr = addr.clone();
            clients.push(scope.spawn(move || transport::connect_and_participate(&addr, &session, shard)));
        }
        for c in clients {
            c.join().expect("client thread panicked")?;
        }
        server.join().expect("server thread panicked")
    })
}

/// `fedreview run`: individual-task federation or a multi-task strategy,
/// emitting round-wise CSVs, a markdown report, checkpoints, and a summary.
pub fn cmd_run(settings: &Settings, transport_kind: &str) -> Result<()> {
    ensure_dir(&settings.output_dir)?;
    let data = load_experiment(settings)?;
    match settings.strategy.as_str() {
        "individual" => cmd_run_individual(settings, &data, transport_kind),
        name => {
            if transport_kind != "inproc" {
                return Err(Error::Config(
                    "multi-task strategies run in process; use --transport inproc".into(),
                ));
            }
            cmd_run_strategy(settings, &data, StrategyKind::parse(name)?)
        }
    }
}

fn cmd_run_individual(settings: &Settings, data: &ExperimentData, transport_kind: &str) -> Result<()> {
    let mut summary: Vec<(String, TaskId, [f64; 3])> = Vec::new();
    let mut report = String::from("# Individual-task federation\n\n");
    for &task in &settings.tasks {
        let outcome = run_one_individual(settings, data, task, transport_kind)?;
        let history = &outcome.outcome.history;
        let csv = history_to_csv(task.as_str(), history);
        std::fs::write(settings.output_dir.join(format!("history_{task}.csv")), &csv)?;
        write_checkpoints(
            &settings.output_dir,
            &format!("individual_{task}"),
            &outcome.outcome.round_entries,
        )?;
        report.push_str(&format!(
            "## {task}\n\nrounds 0..{} evaluated; FedBEST round: {}\n\n",
            settings.rounds, outcome.best_round
        ));

        let fed_seed = individual_fed_seed(settings.seed, task);
        let lora = settings
            .lora_override
            .clone()
            .unwrap_or_else(|| TaskAdapterProfile::for_task(task));
        summary.push(("vanilla".into(), task, history.rows[0]));
        if settings.with_central {
            let shards = task_shards(data, task);
            let mut items = Vec::new();
            for s in &shards {
                items.extend(s.corpus.items());
            }
            let mut adapters = init_adapters(
                data.base_weights.geometry(),
                &lora,
                derive_seed(fed_seed, &[SALT_CENTRAL]),
            )?;
            train_on_items(
                &data.base_weights,
                &mut adapters,
                &items,
                &settings.train,
                derive_seed(fed_seed, &[SALT_CENTRAL, 1]),
            )?;
            let central = merge(&data.base_weights, &adapters)?;
            summary.push((
                "central".into(),
                task,
                evaluate_task(&central, None, &data.test[task.index()])?,
            ));
        }
        // per-client round-1 local models
        let base_adapters = init_adapters(
            data.base_weights.geometry(),
            &lora,
            fedreview::federation::adapter_seed(fed_seed, 1),
        )?;
        for (name, shard) in ["client_a@1", "client_b@1"].iter().zip(task_shards(data, task)) {
            let update = client_train_round(
                &data.base_weights,
                &base_adapters,
                &shard,
                &settings.train,
                1,
                client_seed(fed_seed, shard.client_id, 1),
            )?;
            let set = import_state(data.base_weights.geometry(), &lora, &update.entries)?;
            let local = merge(&data.base_weights, &set)?;
            summary.push((
                name.to_string(),
                task,
                evaluate_task(&local, None, &data.test[task.index()])?,
            ));
        }
        summary.push(("fed@1".into(), task, history.rows[1]));
        summary.push(("fed@best".into(), task, history.rows[outcome.best_round]));
    }
    std::fs::write(settings.output_dir.join("summary.csv"), summary_csv(&summary))?;
    let order = ["vanilla", "central", "client_a@1", "client_b@1", "fed@1", "fed@best"];
    report.push_str("## Comparison\n\n");
    report.push_str(&rows_markdown(&summary, &order));
    std::fs::write(settings.output_dir.join("report.md"), &report)?;
    println!("{report}");
    Ok(())
}

fn rows_markdown(summary: &[(String, TaskId, [f64; 3])], order: &[&str]) -> String {
    let mut out = String::from(
        "| Model | t1 precision | t1 recall | t1 f1 | t2 c_bleu | t2 meteor | t2 rouge_l | t3 c_bleu | t3 meteor | t3 rouge_l |\n|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for label in order {
        let cells: Vec<String> = TaskId::ALL
            .iter()
            .flat_map(|task| {
                match summary.iter().find(|(l, t, _)| l == label && t == task) {
                    Some((_, _, vals)) => vals.iter().map(|v| format!("{:.3}", v * 100.0)).collect(),
                    None => vec!["-".to_string(); 3],
                }
            })
            .collect();
        if cells.iter().all(|c| c == "-") {
            continue;
        }
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    out
}

fn cmd_run_strategy(settings: &Settings, data: &ExperimentData, kind: StrategyKind) -> Result<()> {
    let mut plan = MultiTaskPlan::new(kind, settings.rounds, settings.seed);
    plan.train = settings.train.clone();
    if kind != StrategyKind::Cat {
        plan.policy = settings.policy;
    }
    let test: &[Corpus; 3] = &data.test;
    let ctx = MultiTaskContext {
        base_weights: &data.base_weights,
        clients: &data.clients,
        test,
        jobs: settings.jobs,
    };
    let outcome = if kind == StrategyKind::CftReg {
        run_cft_reg(&plan, &ctx)?.strategy
    } else {
        run_strategy(&plan, &ctx)?
    };
    for (label, task, history) in &outcome.histories {
        let csv = history_to_csv(task.as_str(), history);
        std::fs::write(
            settings.output_dir.join(format!("history_{label}_{task}.csv")),
            &csv,
        )?;
    }
    for (lineage, entries) in &outcome.checkpoints {
        write_checkpoints(&settings.output_dir, lineage, entries)?;
    }
    // the final table row carries the strategy's name in the summary
    let mut table = outcome.table.clone();
    if let Some(last) = table.rows.last_mut() {
        last.label = kind.as_str().to_string();
    }
    let vanilla_row = TableRow {
        label: "vanilla".into(),
        best_rounds: [None; 3],
        per_task: fedreview::multitask::eval_all(&data.base_weights, test)?,
    };
    let mut full = TaskMetricsTable {
        rows: vec![vanilla_row],
    };
    full.rows.extend(table.rows.clone());
    std::fs::write(settings.output_dir.join("summary.csv"), full.to_csv())?;
    let mut report = format!("# Strategy {}\n\n", kind.as_str());
    report.push_str(&full.to_markdown());
    std::fs::write(settings.output_dir.join("report.md"), &report)?;
    println!("{report}");
    Ok(())
}

/// `fedreview serve`: networked federation server for the first configured
/// task; writes the authoritative history and checkpoints.
pub fn cmd_serve(settings: &Settings, listen: &str) -> Result<()> {
    ensure_dir(&settings.output_dir)?;
    let data = load_experiment(settings)?;
    let task = settings.tasks[0];
    let lora = settings
        .lora_override
        .clone()
        .unwrap_or_else(|| TaskAdapterProfile::for_task(task));
    let run = FederationRun {
        base_weights: &data.base_weights,
        lora_config: lora,
        train: settings.train.clone(),
    };
    let cfg = FedConfig {
        rounds: settings.rounds,
        policy: settings.policy,
        seed: individual_fed_seed(settings.seed, task),
        reinit_adapters: true,
        timeout_secs: settings.timeout_secs,
    };
    let listener =
        TcpListener::bind(listen).map_err(|e| Error::Transport(format!("bind {listen} failed: {e}")))?;
    println!(
        "serving {} federation on {listen} for {} clients, {} rounds",
        task, settings.expected_clients, settings.rounds
    );
    let outcome = transport::serve(
        listener,
        &run,
        &cfg,
        EvalSet {
            task,
            corpus: &data.test[task.index()],
        },
        settings.expected_clients,
    )?;
    let csv = history_to_csv(task.as_str(), &outcome.history);
    std::fs::write(settings.output_dir.join(format!("history_{task}.csv")), &csv)?;
    write_checkpoints(
        &settings.output_dir,
        &format!("individual_{task}"),
        &outcome.round_entries,
    )?;
    let best = fedreview::metrics::select_best_round(&outcome.history)?;
    println!("federation complete; FedBEST round {best}");
    Ok(())
}

/// `fedreview client`: participate in a networked federation with this
/// client's shard.
pub fn cmd_client(settings: &Settings, connect: &str, client_id: u32) -> Result<()> {
    let data = load_experiment(settings)?;
    let task = settings.tasks[0];
    let client = data
        .clients
        .iter()
        .find(|c| c.client_id == client_id)
        .ok_or_else(|| Error::Config(format!("no shard for client id {client_id}")))?;
    let shard = ClientShard {
        client_id,
        corpus: client.shards[task.index()].clone(),
    };
    let lora = settings
        .lora_override
        .clone()
        .unwrap_or_else(|| TaskAdapterProfile::for_task(task));
    let session = transport::ClientSession {
        base_weights: &data.base_weights,
        lora_config: lora,
        train: settings.train.clone(),
        fed_seed: individual_fed_seed(settings.seed, task),
        rounds: settings.rounds,
        reinit_adapters: true,
        timeout_secs: settings.timeout_secs,
    };
    transport::connect_and_participate(connect, &session, &shard)?;
    println!("client {client_id} completed {} rounds on {task}", settings.rounds);
    Ok(())
}

/// Output directory layout helper shared with tests.
pub fn history_path(dir: &Path, task: TaskId) -> PathBuf {
    dir.join(format!("history_{task}.csv"))
}
