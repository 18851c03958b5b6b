use fedreview::data::{format_prompt, vocab, TaskId};
use fedreview::federation::{run_federation, EvalSet, FedConfig, FederationRun, TrainingConfig, individual_fed_seed, fold_rounds};
use fedreview::lora::TaskAdapterProfile;
use fedreview::model::generate;
use fedreview::pipeline::{prepare, SyntheticExperiment};

#[test]
fn probe_gen() {
    let exp = SyntheticExperiment::default();
    let data = prepare(&exp).unwrap();
    let shards: Vec<_> = data.clients.iter().map(|c| fedreview::data::ClientShard {
        client_id: c.client_id, corpus: c.shards[2].clone() }).collect();
    let run = FederationRun {
        base_weights: &data.base_weights,
        lora_config: TaskAdapterProfile::for_task(TaskId::T3),
        train: TrainingConfig::default(),
    };
    let cfg = FedConfig { rounds: 2, seed: individual_fed_seed(exp.seed, TaskId::T3), ..FedConfig::default() };
    let out = run_federation(&run, &shards, &cfg, EvalSet { task: TaskId::T3, corpus: &data.test[2] }, 2).unwrap();
    for r in [0usize, 1, 2] {
        let w = fold_rounds(&data.base_weights, &run.lora_config, &out.round_entries, r).unwrap();
        println!("--- round {r}");
        for rec in data.test[2].records.iter().take(3) {
            let (prompt, target) = format_prompt(TaskId::T3, rec).unwrap();
            let full = generate(&w, None, &prompt, 32, Some(vocab::EOS)).unwrap();
            let hyp: Vec<String> = vocab::decode_tokens(&full[prompt.len()..]);
            let refr: Vec<String> = vocab::decode_tokens(&target);
            println!("  ref: {}", refr.join(" "));
            println!("  hyp: {}", hyp.join(" "));
        }
    }
}
