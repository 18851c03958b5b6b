//! Low-rank adapter construction, attachment, merging, state-dictionary
//! export/import, and trainable-parameter accounting.
//!
//! A frozen weight matrix `W` is adapted by a trainable pair `(A, B)` whose
//! product contributes `(alpha / rank) * A * B` to the effective weight.
//! With `alpha == rank` this reduces to a plain additive `A * B`.

use crate::data::TaskId;
use crate::error::{Error, Result};
use crate::model::{ModelGeometry, TransformerWeights};
use crate::numerics::{matmul, Matrix, RngState};

/// Attention projection matrices that can receive an adapter pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TargetModule {
    Q,
    K,
    V,
    O,
}

impl TargetModule {
    /// Canonical ordering used everywhere entries are enumerated.
    pub const ALL: [TargetModule; 4] = [
        TargetModule::Q,
        TargetModule::K,
        TargetModule::V,
        TargetModule::O,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TargetModule::Q => "q",
            TargetModule::K => "k",
            TargetModule::V => "v",
            TargetModule::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(TargetModule::Q),
            "k" => Ok(TargetModule::K),
            "v" => Ok(TargetModule::V),
            "o" => Ok(TargetModule::O),
            other => Err(Error::Config(format!("unknown target module '{other}'"))),
        }
    }
}

/// Which projections to adapt, with what rank, scaling, and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    targets: Vec<TargetModule>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraConfig {
    pub fn new(targets: &[TargetModule], rank: usize) -> Result<Self> {
        LoraConfig::with_options(targets, rank, 16.0, 0.1)
    }

    pub fn with_options(targets: &[TargetModule], rank: usize, alpha: f64, dropout: f64) -> Result<Self> {
        let mut sorted: Vec<TargetModule> = TargetModule::ALL
            .iter()
            .copied()
            .filter(|t| targets.contains(t))
            .collect();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::Config("LoRA targets must be non-empty".into()));
        }
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("LoRA dropout must be in [0, 1), got {dropout}")));
        }
        Ok(LoraConfig {
            targets: sorted,
            rank,
            alpha,
            dropout,
        })
    }

    /// Targets in canonical q, k, v, o order.
    pub fn targets(&self) -> &[TargetModule] {
        &self.targets
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Per-task adapter profiles: targets and rank selected per task, plus the
/// all-targets profile used by the multi-task schedules.
#[derive(Debug, Clone)]
pub struct TaskAdapterProfile;

impl TaskAdapterProfile {
    /// T1 -> ({k, v}, r=8); T2 -> ({v}, r=8); T3 -> ({q, o}, r=16).
    pub fn for_task(task: TaskId) -> LoraConfig {
        match task {
            TaskId::T1 => LoraConfig::new(&[TargetModule::K, TargetModule::V], 8).unwrap(),
            TaskId::T2 => LoraConfig::new(&[TargetModule::V], 8).unwrap(),
            TaskId::T3 => LoraConfig::new(&[TargetModule::Q, TargetModule::O], 16).unwrap(),
        }
    }

    /// All four projections with rank 8.
    pub fn multi_task() -> LoraConfig {
        LoraConfig::new(&TargetModule::ALL, 8).unwrap()
    }
}

/// One low-rank pair: `a` is (d_in x rank), `b` is (rank x d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
}

/// A named, shaped matrix as it appears in an exported state dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub name: String,
    pub matrix: Matrix,
}

/// All adapter pairs for one model, in canonical order: layer ascending,
/// then target in q, k, v, o order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    config: LoraConfig,
    n_layers: usize,
    entries: Vec<(usize, TargetModule, AdapterPair)>,
}

impl AdapterSet {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn entries(&self) -> &[(usize, TargetModule, AdapterPair)] {
        &self.entries
    }

    pub fn pair(&self, layer: usize, target: TargetModule) -> Option<&AdapterPair> {
        self.entries
            .iter()
            .find(|(l, t, _)| *l == layer && *t == target)
            .map(|(_, _, p)| p)
    }

    /// Flat view of all trainable matrices in canonical order (A then B per
    /// entry); gradients and optimizer state use the same order.
    pub fn param_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for (_, _, pair) in self.entries.iter_mut() {
            out.push(&mut pair.a);
            out.push(&mut pair.b);
        }
        out
    }

    pub fn param_matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for (_, _, pair) in self.entries.iter() {
            out.push(&pair.a);
            out.push(&pair.b);
        }
        out
    }
}

fn entry_name(layer: usize, target: TargetModule, which: char) -> String {
    format!("layer.{layer}.{}.{which}", target.name())
}

/// Fresh adapters: A ~ normal(0, 0.02), B = 0, so the initial delta is zero
/// and the adapted model equals the base model.
pub fn init_adapters(geometry: &ModelGeometry, config: &LoraConfig, seed: u64) -> Result<AdapterSet> {
    geometry.validate()?;
    let mut rng = RngState::new(seed);
    let mut entries = Vec::with_capacity(geometry.n_layers * config.targets().len());
    for layer in 0..geometry.n_layers {
        for &target in config.targets() {
            let (d_in, d_out) = geometry.target_dims(target);
            let a = Matrix::normal(d_in, config.rank, 0.0, 0.02, &mut rng);
            let b = Matrix::zeros(config.rank, d_out);
            entries.push((layer, target, AdapterPair { a, b }));
        }
    }
    Ok(AdapterSet {
        config: config.clone(),
        n_layers: geometry.n_layers,
        entries,
    })
}

/// The additive weight delta `(alpha / rank) * A * B`.
pub fn effective_delta(pair: &AdapterPair, alpha: f64, rank: usize) -> Result<Matrix> {
    let mut delta = matmul(&pair.a, &pair.b)?;
    delta.scale(alpha / rank as f64);
    Ok(delta)
}

/// Fold the adapter deltas into a copy of the base weights. Merging is
/// additive, not idempotent: merging the same set twice adds the delta twice.
pub fn merge(weights: &TransformerWeights, adapters: &AdapterSet) -> Result<TransformerWeights> {
    let geometry = weights.geometry().clone();
    if adapters.n_layers != geometry.n_layers {
        return Err(Error::dimension(
            "merge layer count",
            (adapters.n_layers, 0),
            (geometry.n_layers, 0),
        ));
    }
    let mut merged = weights.clone();
    let scaling_alpha = adapters.config.alpha;
    let rank = adapters.config.rank;
    for (layer, target, pair) in adapters.entries() {
        let (d_in, d_out) = geometry.target_dims(*target);
        if pair.a.shape() != (d_in, rank) || pair.b.shape() != (rank, d_out) {
            return Err(Error::dimension(
                format!("merge {}", entry_name(*layer, *target, 'A')),
                pair.a.shape(),
                (d_in, rank),
            ));
        }
        let delta = effective_delta(pair, scaling_alpha, rank)?;
        merged.target_mut(*layer, *target).add_assign(&delta)?;
    }
    Ok(merged)
}

/// Trainable parameter count: sum over layers and targets of
/// `rank * (d_in + d_out)`.
pub fn param_count(geometry: &ModelGeometry, config: &LoraConfig) -> u64 {
    let per_layer: u64 = config
        .targets()
        .iter()
        .map(|&t| {
            let (d_in, d_out) = geometry.target_dims(t);
            config.rank as u64 * (d_in + d_out) as u64
        })
        .sum();
    geometry.n_layers as u64 * per_layer
}

/// Trainable share of the base model, in percent.
pub fn trainable_fraction(geometry: &ModelGeometry, config: &LoraConfig) -> Result<f64> {
    if geometry.total_base_params == 0 {
        return Err(Error::Config(
            "geometry has no total_base_params; accounting is undefined".into(),
        ));
    }
    Ok(100.0 * param_count(geometry, config) as f64 / geometry.total_base_params as f64)
}

/// Export all pairs as named entries, `layer.{i}.{target}.{A|B}`, in
/// canonical order. Two exports of equal sets serialize byte-identically.
pub fn export_state(adapters: &AdapterSet) -> Vec<StateEntry> {
    let mut out = Vec::with_capacity(adapters.entries.len() * 2);
    for (layer, target, pair) in adapters.entries() {
        out.push(StateEntry {
            name: entry_name(*layer, *target, 'A'),
            matrix: pair.a.clone(),
        });
        out.push(StateEntry {
            name: entry_name(*layer, *target, 'B'),
            matrix: pair.b.clone(),
        });
    }
    out
}

/// Rebuild an adapter set from named entries. Rejects unknown, duplicate,
/// missing, or misshapen entries, naming the offending entry.
pub fn import_state(
    geometry: &ModelGeometry,
    config: &LoraConfig,
    entries: &[StateEntry],
) -> Result<AdapterSet> {
    geometry.validate()?;
    let mut pending: std::collections::BTreeMap<String, &Matrix> = std::collections::BTreeMap::new();
    for e in entries {
        if pending.insert(e.name.clone(), &e.matrix).is_some() {
            return Err(Error::State(format!("duplicate entry '{}'", e.name)));
        }
    }
    let mut out = Vec::with_capacity(geometry.n_layers * config.targets().len());
    for layer in 0..geometry.n_layers {
        for &target in config.targets() {
            let (d_in, d_out) = geometry.target_dims(target);
            let mut take = |which: char, shape: (usize, usize)| -> Result<Matrix> {
                let name = entry_name(layer, target, which);
                let m = pending
                    .remove(&name)
                    .ok_or_else(|| Error::State(format!("missing entry '{name}'")))?;
                if m.shape() != shape {
                    return Err(Error::State(format!(
                        "entry '{name}' has shape {}x{}, expected {}x{}",
                        m.shape().0,
                        m.shape().1,
                        shape.0,
                        shape.1
                    )));
                }
                Ok(m.clone())
            };
            let a = take('A', (d_in, config.rank))?;
            let b = take('B', (config.rank, d_out))?;
            out.push((layer, target, AdapterPair { a, b }));
        }
    }
    if let Some(name) = pending.keys().next() {
        return Err(Error::State(format!("unexpected entry '{name}'")));
    }
    Ok(AdapterSet {
        config: config.clone(),
        n_layers: geometry.n_layers,
        entries: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_weights, Batch};

    fn toy() -> ModelGeometry {
        ModelGeometry::toy()
    }

    #[test]
    fn fresh_adapters_merge_to_identity() {
        let geo = toy();
        let w = init_weights(&geo, 11).unwrap();
        let cfg = LoraConfig::new(&[TargetModule::K, TargetModule::V], 8).unwrap();
        let set = init_adapters(&geo, &cfg, 3).unwrap();
        let merged = merge(&w, &set).unwrap();
        assert_eq!(w, merged);
    }

    #[test]
    fn adapter_counting_toy_kv() {
        let geo = toy();
        let cfg = LoraConfig::new(&[TargetModule::K, TargetModule::V], 8).unwrap();
        let set = init_adapters(&geo, &cfg, 0).unwrap();
        assert_eq!(set.entries().len(), 4); // 2 layers x 2 targets
        assert_eq!(export_state(&set).len(), 8);
    }

    #[test]
    fn init_deterministic_in_seed() {
        let geo = toy();
        let cfg = TaskAdapterProfile::multi_task();
        let a = init_adapters(&geo, &cfg, 99).unwrap();
        let b = init_adapters(&geo, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = init_adapters(&geo, &cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn effective_delta_zero_b() {
        let pair = AdapterPair {
            a: Matrix::normal(4, 2, 0.0, 1.0, &mut RngState::new(1)),
            b: Matrix::zeros(2, 3),
        };
        let d = effective_delta(&pair, 16.0, 2).unwrap();
        assert_eq!(d, Matrix::zeros(4, 3));
    }

    #[test]
    fn effective_delta_hand_example() {
        // alpha == rank reduces the scaling to 1.
        let pair = AdapterPair {
            a: Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            b: Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap(),
        };
        let d = effective_delta(&pair, 1.0, 1).unwrap();
        assert_eq!(d, Matrix::from_rows(&[vec![2.0, 3.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn effective_delta_linear_in_alpha() {
        let mut rng = RngState::new(5);
        let pair = AdapterPair {
            a: Matrix::normal(3, 2, 0.0, 1.0, &mut rng),
            b: Matrix::normal(2, 4, 0.0, 1.0, &mut rng),
        };
        let d1 = effective_delta(&pair, 8.0, 2).unwrap();
        let d2 = effective_delta(&pair, 16.0, 2).unwrap();
        for (x, y) in d1.data().iter().zip(d2.data().iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_twice_adds_delta_twice() {
        let geo = toy();
        let w = init_weights(&geo, 1).unwrap();
        let cfg = LoraConfig::new(&[TargetModule::Q], 2).unwrap();
        let mut set = init_adapters(&geo, &cfg, 2).unwrap();
        // give B some mass so the delta is non-zero
        for (_, _, pair) in set.entries.iter_mut() {
            pair.b = Matrix::normal(cfg.rank, geo.d_q_out, 0.0, 0.1, &mut RngState::new(7));
        }
        let once = merge(&w, &set).unwrap();
        let twice = merge(&once, &set).unwrap();
        let delta = effective_delta(set.pair(0, TargetModule::Q).unwrap(), cfg.alpha, cfg.rank).unwrap();
        let w0 = w.target(0, TargetModule::Q);
        let w2 = twice.target(0, TargetModule::Q);
        for i in 0..w0.rows() {
            for j in 0..w0.cols() {
                assert!((w2.get(i, j) - w0.get(i, j) - 2.0 * delta.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_equivalence_on_random_batches() {
        let geo = toy();
        let w = init_weights(&geo, 21).unwrap();
        let cfg = TaskAdapterProfile::multi_task();
        let mut set = init_adapters(&geo, &cfg, 22).unwrap();
        let mut rng = RngState::new(23);
        for (_, target, pair) in set.entries.iter_mut() {
            let (_, d_out) = geo.target_dims(*target);
            pair.b = Matrix::normal(cfg.rank, d_out, 0.0, 0.05, &mut rng);
        }
        let merged = merge(&w, &set).unwrap();
        for trial in 0..20 {
            let mut seq_rng = RngState::new(1000 + trial);
            let tokens: Vec<u32> = (0..10).map(|_| seq_rng.next_below(geo.vocab_size) as u32).collect();
            let batch = Batch::single(tokens);
            let attached = forward(&w, Some(&set), &batch).unwrap();
            let folded = forward(&merged, None, &batch).unwrap();
            for (la, lf) in attached[0].data().iter().zip(folded[0].data().iter()) {
                assert!((la - lf).abs() < 1e-6, "attach/merge diverged: {la} vs {lf}");
            }
        }
    }

    #[test]
    fn accounting_matches_stated_presets() {
        let geo = ModelGeometry::llama3_8b_accounting();
        let kv8 = LoraConfig::new(&[TargetModule::K, TargetModule::V], 8).unwrap();
        let v8 = LoraConfig::new(&[TargetModule::V], 8).unwrap();
        let qo16 = LoraConfig::new(&[TargetModule::Q, TargetModule::O], 16).unwrap();
        assert_eq!(param_count(&geo, &kv8), 2_621_440);
        assert_eq!(param_count(&geo, &v8), 1_310_720);
        assert_eq!(param_count(&geo, &qo16), 8_388_608);
        assert!((trainable_fraction(&geo, &kv8).unwrap() - 0.0326).abs() < 0.001);
        assert!((trainable_fraction(&geo, &qo16).unwrap() - 0.104).abs() < 0.001);
        let v1 = LoraConfig::new(&[TargetModule::V], 1).unwrap();
        assert!((trainable_fraction(&geo, &v1).unwrap() - 0.00204).abs() < 0.0002);
    }

    #[test]
    fn param_count_matches_stored_entries() {
        let geo = toy();
        for cfg in [
            TaskAdapterProfile::for_task(TaskId::T1),
            TaskAdapterProfile::for_task(TaskId::T2),
            TaskAdapterProfile::for_task(TaskId::T3),
            TaskAdapterProfile::multi_task(),
        ] {
            let set = init_adapters(&geo, &cfg, 4).unwrap();
            let brute: u64 = set
                .param_matrices()
                .iter()
                .map(|m| (m.rows() * m.cols()) as u64)
                .sum();
            assert_eq!(param_count(&geo, &cfg), brute);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let geo = toy();
        let cfg = LoraConfig::new(&[TargetModule::Q, TargetModule::O], 3).unwrap();
        let mut set = init_adapters(&geo, &cfg, 8).unwrap();
        let mut rng = RngState::new(9);
        for (_, target, pair) in set.entries.iter_mut() {
            let (_, d_out) = geo.target_dims(*target);
            pair.b = Matrix::normal(cfg.rank, d_out, 0.0, 1.0, &mut rng);
        }
        let entries = export_state(&set);
        assert_eq!(entries.len(), 2 * 2 * 2);
        assert_eq!(entries[0].name, "layer.0.q.A");
        assert_eq!(entries[1].name, "layer.0.q.B");
        let back = import_state(&geo, &cfg, &entries).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn import_rejects_missing_extra_and_misshapen() {
        let geo = toy();
        let cfg = LoraConfig::new(&[TargetModule::V], 2).unwrap();
        let set = init_adapters(&geo, &cfg, 1).unwrap();
        let full = export_state(&set);

        let mut missing = full.clone();
        let removed = missing.remove(1);
        let err = import_state(&geo, &cfg, &missing).unwrap_err().to_string();
        assert!(err.contains(&removed.name), "{err}");

        let mut extra = full.clone();
        extra.push(StateEntry {
            name: "layer.9.q.A".into(),
            matrix: Matrix::zeros(1, 1),
        });
        let err = import_state(&geo, &cfg, &extra).unwrap_err().to_string();
        assert!(err.contains("layer.9.q.A"), "{err}");

        let mut bad_shape = full.clone();
        bad_shape[0].matrix = bad_shape[0].matrix.transpose();
        let err = import_state(&geo, &cfg, &bad_shape).unwrap_err().to_string();
        assert!(err.contains("layer.0.v.A") && err.contains("shape"), "{err}");

        let mut dup = full.clone();
        dup.push(full[0].clone());
        let err = import_state(&geo, &cfg, &dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn profile_defaults_match_task_table() {
        let t1 = TaskAdapterProfile::for_task(TaskId::T1);
        assert_eq!(t1.targets(), &[TargetModule::K, TargetModule::V]);
        assert_eq!(t1.rank, 8);
        let t2 = TaskAdapterProfile::for_task(TaskId::T2);
        assert_eq!(t2.targets(), &[TargetModule::V]);
        assert_eq!(t2.rank, 8);
        let t3 = TaskAdapterProfile::for_task(TaskId::T3);
        assert_eq!(t3.targets(), &[TargetModule::Q, TargetModule::O]);
        assert_eq!(t3.rank, 16);
        let mt = TaskAdapterProfile::multi_task();
        assert_eq!(mt.targets(), &TargetModule::ALL);
        assert_eq!(mt.rank, 8);
        assert_eq!(mt.alpha, 16.0);
        assert_eq!(mt.dropout, 0.1);
    }
}
