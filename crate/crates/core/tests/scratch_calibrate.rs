//! scratch: calibration probe (deleted before finalizing)
use fedreview::data::TaskId;
use fedreview::federation::{
    run_individual, EvalSet, FedConfig, FederationRun, TrainingConfig,
    individual_fed_seed, fold_rounds,
};
use fedreview::lora::TaskAdapterProfile;
use fedreview::multitask::{
    run_cft, run_cft_reg, run_toc, ClientTaskShards, MultiTaskContext, MultiTaskPlan, StrategyKind,
    eval_all,
};
use fedreview::pipeline::{prepare, SyntheticExperiment};
use std::time::Instant;

fn task_shards(clients: &[ClientTaskShards], task: TaskId) -> Vec<fedreview::data::ClientShard> {
    clients.iter().map(|c| fedreview::data::ClientShard {
        client_id: c.client_id,
        corpus: c.shards[task.index()].clone(),
    }).collect()
}

#[test]
fn calibrate() {
    let t0 = Instant::now();
    let exp = SyntheticExperiment::default();
    let data = prepare(&exp).unwrap();
    println!("prepare: {:?}", t0.elapsed());
    let rounds = 5u32;
    let mut individual_best = [[0.0f64; 3]; 3];
    let mut individual_best_round = [0usize; 3];
    for task in TaskId::ALL {
        let t = Instant::now();
        let run = FederationRun {
            base_weights: &data.base_weights,
            lora_config: TaskAdapterProfile::for_task(task),
            train: TrainingConfig::default(),
        };
        let cfg = FedConfig { rounds, seed: individual_fed_seed(exp.seed, task), ..FedConfig::default() };
        let out = run_individual(&run, &task_shards(&data.clients, task),
            &cfg, EvalSet { task, corpus: &data.test[task.index()] }, 2).unwrap();
        println!("task {task}: best={} time={:?}", out.best_round, t.elapsed());
        for (r, row) in out.outcome.history.rows.iter().enumerate() {
            println!("  round {r}: {:.4} {:.4} {:.4}", row[0], row[1], row[2]);
        }
        individual_best[task.index()] = out.outcome.history.rows[out.best_round];
        individual_best_round[task.index()] = out.best_round;
    }
    let ctx = MultiTaskContext {
        base_weights: &data.base_weights,
        clients: &data.clients,
        test: &data.test,
        jobs: 2,
    };
    let t = Instant::now();
    let toc = run_toc(&MultiTaskPlan::new(StrategyKind::Toc, rounds, exp.seed), &ctx).unwrap();
    println!("toc time={:?}", t.elapsed());
    for row in &toc.table.rows {
        println!("  {}: t1={:.4?} t2={:.4?} t3={:.4?} best={:?}", row.label,
            row.per_task[0], row.per_task[1], row.per_task[2], row.best_rounds);
    }
    let t = Instant::now();
    let cftreg = run_cft_reg(&MultiTaskPlan::new(StrategyKind::CftReg, rounds, exp.seed), &ctx).unwrap();
    println!("cft_reg time={:?}", t.elapsed());
    let row = &cftreg.strategy.table.rows[0];
    println!("  cft_reg: t1={:.4?} t2={:.4?} t3={:.4?} best={:?}",
        row.per_task[0], row.per_task[1], row.per_task[2], row.best_rounds);
    let t = Instant::now();
    let cft = run_cft(&MultiTaskPlan::new(StrategyKind::Cft, rounds, exp.seed), &ctx).unwrap();
    println!("cft time={:?}", t.elapsed());
    let cftrow = &cft.table.rows[0];
    println!("  cft: t1={:.4?} t2={:.4?} t3={:.4?} best={:?}",
        cftrow.per_task[0], cftrow.per_task[1], cftrow.per_task[2], cftrow.best_rounds);
    // round-1 CFT vs vanilla on all three
    for (_, task, h) in &cft.histories {
        println!("  cft {task} round0={:.4?} round1={:.4?}", h.rows[0], h.rows[1]);
    }

    println!("== criteria ==");
    println!("10a: t1 f1 vanilla->best: ? best {:.4} round {}", individual_best[0][2], individual_best_round[0]);
    println!("10a: t2 rouge best {:.4}", individual_best[1][2]);
    println!("10a: t3 rouge best {:.4}", individual_best[2][2]);
    println!("10b: toc final t1 f1 {:.4} vs individual {:.4} (need <= {:.4})",
        toc.table.rows[2].per_task[0][2], individual_best[0][2], individual_best[0][2] - 0.10);
    println!("10d: cft_reg t3 rouge {:.4} vs individual {:.4} - 0.01", row.per_task[2][2], individual_best[2][2]);
    println!("total: {:?}", t0.elapsed());
}
