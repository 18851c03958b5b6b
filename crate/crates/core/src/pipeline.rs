//! Canonical synthetic-experiment assembly: one experiment seed
//! deterministically yields the corpora, the client shards, and the base
//! model, so any run is replayable from its seed alone.

use crate::data::{sample_shards, synth_generate, Corpus, SyntheticTaskSpec, TaskId};
use crate::error::Result;
use crate::model::{init_weights, ModelGeometry, TransformerWeights};
use crate::multitask::ClientTaskShards;
use crate::numerics::derive_seed;

const SALT_DATA: u64 = 0xDA7A;
const SALT_PARTITION: u64 = 0x9A87;
const SALT_WEIGHTS: u64 = 0x3E16;

/// Scale knobs for a synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExperiment {
    pub seed: u64,
    pub geometry: ModelGeometry,
    /// Records generated per task (the sampling pool).
    pub n_train_per_task: usize,
    pub n_test_per_task: usize,
    /// Records actually drawn per task, split across the two clients.
    pub sample_total: usize,
    pub ratio: (u64, u64),
}

impl Default for SyntheticExperiment {
    fn default() -> Self {
        SyntheticExperiment {
            seed: 42,
            geometry: ModelGeometry::toy(),
            n_train_per_task: 7680,
            n_test_per_task: 60,
            sample_total: 3840,
            ratio: (3, 1),
        }
    }
}

/// Everything a run needs: two clients with per-task shards, held-out test
/// corpora, and the frozen base model.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub clients: Vec<ClientTaskShards>,
    pub test: [Corpus; 3],
    pub base_weights: TransformerWeights,
}

/// Generate, partition, and initialize. Labels are balanced for the
/// classification task; shards and test corpora come out pairwise
/// project-disjoint by construction.
pub fn prepare(exp: &SyntheticExperiment) -> Result<ExperimentData> {
    let spec = SyntheticTaskSpec {
        seed: derive_seed(exp.seed, &[SALT_DATA]),
        ..SyntheticTaskSpec::default()
    };
    let corpora = synth_generate(&spec, exp.n_train_per_task, exp.n_test_per_task)?;
    let mut shards_a = Vec::with_capacity(3);
    let mut shards_b = Vec::with_capacity(3);
    for task in TaskId::ALL {
        let (a, b) = sample_shards(
            &corpora.train[task.index()],
            exp.sample_total,
            exp.ratio,
            task == TaskId::T1,
            derive_seed(exp.seed, &[SALT_PARTITION, task.index() as u64]),
        )?;
        shards_a.push(a.corpus);
        shards_b.push(b.corpus);
    }
    let into_array = |mut v: Vec<Corpus>| -> [Corpus; 3] {
        let c = v.pop().unwrap();
        let b = v.pop().unwrap();
        let a = v.pop().unwrap();
        [a, b, c]
    };
    let base_weights = init_weights(&exp.geometry, derive_seed(exp.seed, &[SALT_WEIGHTS]))?;
    Ok(ExperimentData {
        clients: vec![
            ClientTaskShards {
                client_id: 0,
                shards: into_array(shards_a),
            },
            ClientTaskShards {
                client_id: 1,
                shards: into_array(shards_b),
            },
        ],
        test: corpora.test,
        base_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::project_overlap;

    #[test]
    fn prepare_is_deterministic_and_disjoint() {
        let exp = SyntheticExperiment {
            n_train_per_task: 80,
            n_test_per_task: 20,
            sample_total: 40,
            ..SyntheticExperiment::default()
        };
        let a = prepare(&exp).unwrap();
        let b = prepare(&exp).unwrap();
        for task in TaskId::ALL {
            let i = task.index();
            assert_eq!(a.clients[0].shards[i].records, b.clients[0].shards[i].records);
            assert!(project_overlap(&[
                &a.clients[0].shards[i],
                &a.clients[1].shards[i],
                &a.test[i]
            ])
            .is_empty());
            assert_eq!(a.clients[0].shards[i].len(), 30);
            assert_eq!(a.clients[1].shards[i].len(), 10);
        }
        assert_eq!(a.base_weights, b.base_weights);
    }
}
