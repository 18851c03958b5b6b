//! A small causal transformer language model with named per-layer q/k/v/o
//! projection matrices (the adapter targets), exact gradients for the
//! adapter parameters, greedy generation, and a yes/no readout.
//!
//! The base weights are always frozen; gradients exist only for attached
//! adapter pairs. Attention uses grouped-query heads (`d_kv_out` may be
//! smaller than `d_q_out`) with rotary position embeddings, RMS
//! normalization, and a two-matrix feed-forward block.

mod pass;

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, TargetModule};
use crate::numerics::{Matrix, RngState};

/// Model shape constants. `total_base_params` is accounting-only: it feeds
/// the trainable-fraction arithmetic and is never allocated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGeometry {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_q_out: usize,
    pub d_kv_out: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub total_base_params: u64,
}

impl ModelGeometry {
    /// The geometry that actually trains. The asymmetric k/v width mirrors
    /// grouped-query attention so per-target adapter sizes differ by target.
    pub fn toy() -> Self {
        let mut g = ModelGeometry {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_q_out: 32,
            d_kv_out: 16,
            d_ff: 64,
            max_seq: 128,
            total_base_params: 0,
        };
        g.total_base_params = g.base_param_count();
        g
    }

    /// Accounting-only stand-in for an 8B decoder: 32 layers with 4096x4096
    /// q/o and 4096x1024 k/v projections. Exists so parameter-count figures
    /// are checkable; never instantiated as weights.
    pub fn llama3_8b_accounting() -> Self {
        ModelGeometry {
            vocab_size: 128_256,
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_q_out: 4096,
            d_kv_out: 1024,
            d_ff: 14336,
            max_seq: 8192,
            total_base_params: 8_030_000_000,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(ModelGeometry::toy()),
            "llama3-8b-accounting" => Ok(ModelGeometry::llama3_8b_accounting()),
            other => Err(Error::Config(format!("unknown geometry preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_q_out % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_q_out {} must be divisible by n_heads {}",
                self.d_q_out, self.n_heads
            )));
        }
        if self.d_kv_out > self.d_q_out {
            return Err(Error::Config(format!(
                "d_kv_out {} must not exceed d_q_out {}",
                self.d_kv_out, self.d_q_out
            )));
        }
        let hd = self.head_dim();
        if hd % 2 != 0 {
            return Err(Error::Config(format!("head_dim {hd} must be even")));
        }
        if self.d_kv_out % hd != 0 {
            return Err(Error::Config(format!(
                "d_kv_out {} must be a multiple of head_dim {hd}",
                self.d_kv_out
            )));
        }
        if self.n_heads % self.n_kv_heads() != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must be a multiple of n_kv_heads {}",
                self.n_heads,
                self.n_kv_heads()
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("geometry dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_q_out / self.n_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.d_kv_out / self.head_dim()
    }

    /// (input, output) dimensions of a projection target.
    pub fn target_dims(&self, target: TargetModule) -> (usize, usize) {
        match target {
            TargetModule::Q => (self.d_model, self.d_q_out),
            TargetModule::K => (self.d_model, self.d_kv_out),
            TargetModule::V => (self.d_model, self.d_kv_out),
            TargetModule::O => (self.d_q_out, self.d_model),
        }
    }

    /// Number of stored scalar parameters for weights of this geometry.
    pub fn base_param_count(&self) -> u64 {
        let per_layer = (self.d_model * self.d_q_out) as u64      // wq
            + 2 * (self.d_model * self.d_kv_out) as u64           // wk, wv
            + (self.d_q_out * self.d_model) as u64                // wo
            + 2 * (self.d_model * self.d_ff) as u64               // ff in/out
            + 2 * self.d_model as u64; // norm gains
        (self.vocab_size * self.d_model) as u64
            + self.n_layers as u64 * per_layer
            + self.d_model as u64
            + (self.d_model * self.vocab_size) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub ff_in: Matrix,
    pub ff_out: Matrix,
}

/// Frozen base model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    geometry: ModelGeometry,
    pub tok_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub output_proj: Matrix,
}

impl TransformerWeights {
    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn target(&self, layer: usize, target: TargetModule) -> &Matrix {
        let l = &self.layers[layer];
        match target {
            TargetModule::Q => &l.wq,
            TargetModule::K => &l.wk,
            TargetModule::V => &l.wv,
            TargetModule::O => &l.wo,
        }
    }

    pub fn target_mut(&mut self, layer: usize, target: TargetModule) -> &mut Matrix {
        let l = &mut self.layers[layer];
        match target {
            TargetModule::Q => &mut l.wq,
            TargetModule::K => &mut l.wk,
            TargetModule::V => &mut l.wv,
            TargetModule::O => &mut l.wo,
        }
    }
}

/// Initialize weights: normal(0, 0.02) matrices, unit normalization gains.
/// Fully deterministic in the seed.
pub fn init_weights(geometry: &ModelGeometry, seed: u64) -> Result<TransformerWeights> {
    geometry.validate()?;
    let mut rng = RngState::new(seed);
    let mut normal = |r: usize, c: usize| Matrix::normal(r, c, 0.0, 0.02, &mut rng);
    let tok_emb = normal(geometry.vocab_size, geometry.d_model);
    let mut layers = Vec::with_capacity(geometry.n_layers);
    for _ in 0..geometry.n_layers {
        layers.push(LayerWeights {
            wq: normal(geometry.d_model, geometry.d_q_out),
            wk: normal(geometry.d_model, geometry.d_kv_out),
            wv: normal(geometry.d_model, geometry.d_kv_out),
            wo: normal(geometry.d_q_out, geometry.d_model),
            attn_norm: vec![1.0; geometry.d_model],
            ffn_norm: vec![1.0; geometry.d_model],
            ff_in: normal(geometry.d_model, geometry.d_ff),
            ff_out: normal(geometry.d_ff, geometry.d_model),
        });
    }
    let final_norm = vec![1.0; geometry.d_model];
    let output_proj = normal(geometry.d_model, geometry.vocab_size);
    Ok(TransformerWeights {
        geometry: geometry.clone(),
        tok_emb,
        layers,
        final_norm,
        output_proj,
    })
}

/// Token id sequences padded to equal length, plus a supervision mask.
///
/// `mask[i] == true` means token `i` is a completion token: it contributes
/// to the loss and is predicted from positions `0..i`. Position 0 can never
/// be supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    tokens: Vec<Vec<u32>>,
    mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<u32>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("batch has no sequences".into()));
        }
        let len = tokens[0].len();
        if len == 0 {
            return Err(Error::Input("batch sequences are empty".into()));
        }
        for seq in &tokens {
            if seq.len() != len {
                return Err(Error::Input("batch sequences are not padded to equal length".into()));
            }
        }
        if mask.len() != tokens.len() {
            return Err(Error::Input("mask row count does not match batch".into()));
        }
        for (seq, m) in tokens.iter().zip(mask.iter()) {
            if m.len() != seq.len() {
                return Err(Error::Input("mask length does not match sequence length".into()));
            }
            if m[0] {
                return Err(Error::Input("position 0 cannot be a supervision target".into()));
            }
        }
        Ok(Batch { tokens, mask })
    }

    /// A single unsupervised sequence (inference only).
    pub fn single(tokens: Vec<u32>) -> Self {
        let mask = vec![false; tokens.len()];
        Batch {
            tokens: vec![tokens],
            mask: vec![mask],
        }
    }

    /// Build a training batch from (prompt, completion) pairs, padding to
    /// the longest sequence. The mask covers exactly the completion tokens.
    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)], pad_token: u32) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("batch has no sequences".into()));
        }
        let max_len = pairs.iter().map(|(p, t)| p.len() + t.len()).max().unwrap();
        let mut tokens = Vec::with_capacity(pairs.len());
        let mut mask = Vec::with_capacity(pairs.len());
        for (prompt, completion) in pairs {
            if prompt.is_empty() {
                return Err(Error::Input("prompt must be non-empty".into()));
            }
            let mut seq = Vec::with_capacity(max_len);
            let mut m = Vec::with_capacity(max_len);
            seq.extend_from_slice(prompt);
            m.extend(std::iter::repeat(false).take(prompt.len()));
            seq.extend_from_slice(completion);
            m.extend(std::iter::repeat(true).take(completion.len()));
            while seq.len() < max_len {
                seq.push(pad_token);
                m.push(false);
            }
            tokens.push(seq);
            mask.push(m);
        }
        Batch::new(tokens, mask)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn tokens(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }
}

/// Run the model over a batch. Returns one (seq_len x vocab) logit matrix
/// per sequence. Evaluation-mode: the adapter path never applies dropout.
pub fn forward(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    batch: &Batch,
) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(batch.len());
    for seq in batch.tokens() {
        let cache = pass::run_sequence(weights, adapters, seq, None)?;
        out.push(cache.into_logits());
    }
    Ok(out)
}

/// Mean masked cross-entropy and exact gradients for every adapter matrix.
///
/// The loss is the mean over sequences of each sequence's mean completion
/// cross-entropy. Gradients come back in the adapter set's canonical flat
/// order (A then B per entry), matching
/// [`AdapterSet::param_matrices_mut`](crate::lora::AdapterSet::param_matrices_mut).
/// When `dropout_rng` is given and the adapter config has dropout > 0, the
/// adapter path applies inverted dropout with masks drawn from that RNG;
/// identical RNG state reproduces identical masks.
pub fn loss_and_grads(
    weights: &TransformerWeights,
    adapters: &AdapterSet,
    batch: &Batch,
    mut dropout_rng: Option<&mut RngState>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut grads: Vec<Matrix> = adapters
        .param_matrices()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut total_loss = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    for (seq, mask) in batch.tokens().iter().zip(batch.mask().iter()) {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate(
                "batch contains a sequence with an empty loss mask".into(),
            ));
        }
        let dropout = dropout_rng.as_deref_mut().and_then(|rng| {
            let p = adapters.config().dropout;
            (p > 0.0).then_some((rng, p))
        });
        let cache = pass::run_sequence(weights, Some(adapters), seq, dropout)?;
        let (loss, dlogits) = pass::masked_cross_entropy(&cache, seq, mask)?;
        total_loss += inv_batch * loss;
        pass::backward_sequence(weights, adapters, &cache, dlogits, inv_batch, &mut grads)?;
    }
    if !total_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "batch loss".into(),
        });
    }
    Ok((total_loss, grads))
}

/// Greedy decoding: repeatedly append the argmax token (ties break to the
/// lowest id) until `eos` is produced or `max_new` tokens were added.
/// Returns the prompt followed by the generated tokens.
pub fn generate(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    prompt: &[u32],
    max_new: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be non-empty".into()));
    }
    let geometry = weights.geometry();
    if prompt.len() + max_new > geometry.max_seq {
        return Err(Error::Range {
            what: "generation length".into(),
            detail: format!(
                "prompt {} + max_new {} exceeds max_seq {}",
                prompt.len(),
                max_new,
                geometry.max_seq
            ),
        });
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let cache = pass::run_sequence(weights, adapters, &seq, None)?;
        let logits = cache.into_logits();
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        seq.push(best as u32);
        if eos == Some(best as u32) {
            break;
        }
    }
    Ok(seq)
}

/// Yes/no readout at the answer position (the last prompt token): yes iff
/// the yes-token logit strictly exceeds the no-token logit; ties resolve
/// to no.
pub fn classify_yes_no(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    prompt: &[u32],
    yes_token: u32,
    no_token: u32,
) -> Result<bool> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be non-empty".into()));
    }
    let cache = pass::run_sequence(weights, adapters, prompt, None)?;
    let logits = cache.into_logits();
    let last = logits.row(logits.rows() - 1);
    Ok(last[yes_token as usize] > last[no_token as usize])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapters, LoraConfig, TaskAdapterProfile};

    fn toy_batch(seed: u64, rows: usize, len: usize) -> Batch {
        let geo = ModelGeometry::toy();
        let mut rng = RngState::new(seed);
        let tokens: Vec<Vec<u32>> = (0..rows)
            .map(|_| (0..len).map(|_| rng.next_below(geo.vocab_size) as u32).collect())
            .collect();
        let mask: Vec<Vec<bool>> = tokens
            .iter()
            .map(|seq| (0..seq.len()).map(|i| i >= seq.len() / 2).collect())
            .collect();
        Batch::new(tokens, mask).unwrap()
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let geo = ModelGeometry::toy();
        let a = init_weights(&geo, 5).unwrap();
        let b = init_weights(&geo, 5).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&geo, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_sample_std_in_expected_band() {
        // 64x64 token embedding gives a 4096-entry sample.
        let mut geo = ModelGeometry::toy();
        geo.d_model = 64;
        geo.d_q_out = 64;
        geo.d_kv_out = 32;
        geo.total_base_params = geo.base_param_count();
        let w = init_weights(&geo, 42).unwrap();
        let data = w.tok_emb.data();
        assert_eq!(data.len(), 4096);
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "sample std {std}");
    }

    #[test]
    fn forward_shapes() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 1).unwrap();
        let batch = toy_batch(2, 2, 8);
        let logits = forward(&w, None, &batch).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].shape(), (8, 64));
    }

    #[test]
    fn zeroed_output_projection_gives_uniform_ce() {
        let geo = ModelGeometry::toy();
        let mut w = init_weights(&geo, 1).unwrap();
        w.output_proj = Matrix::zeros(geo.d_model, geo.vocab_size);
        let batch = toy_batch(3, 2, 8);
        let adapters = init_adapters(&geo, &TaskAdapterProfile::multi_task(), 2).unwrap();
        let (loss, _) = loss_and_grads(&w, &adapters, &batch, None).unwrap();
        assert!((loss - (64f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn fresh_adapters_do_not_change_forward() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 9).unwrap();
        let adapters = init_adapters(&geo, &TaskAdapterProfile::multi_task(), 10).unwrap();
        let batch = toy_batch(4, 2, 10);
        let plain = forward(&w, None, &batch).unwrap();
        let attached = forward(&w, Some(&adapters), &batch).unwrap();
        assert_eq!(plain, attached);
    }

    #[test]
    fn forward_rejects_out_of_vocab_tokens() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 1).unwrap();
        let batch = Batch::single(vec![0, 64]);
        let err = forward(&w, None, &batch).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn forward_is_causal() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 3).unwrap();
        let base: Vec<u32> = (0..12).map(|i| (i * 5 % 64) as u32).collect();
        let logits_a = forward(&w, None, &Batch::single(base.clone())).unwrap();
        for p in 1..base.len() {
            let mut perturbed = base.clone();
            perturbed[p] = (perturbed[p] + 1) % 64;
            let logits_b = forward(&w, None, &Batch::single(perturbed)).unwrap();
            for pos in 0..p {
                for v in 0..64 {
                    assert_eq!(
                        logits_a[0].get(pos, v),
                        logits_b[0].get(pos, v),
                        "position {pos} changed after perturbing {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_of_per_sequence_losses() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 4).unwrap();
        let adapters = init_adapters(&geo, &TaskAdapterProfile::multi_task(), 5).unwrap();
        let batch = toy_batch(6, 3, 8);
        let (joint, _) = loss_and_grads(&w, &adapters, &batch, None).unwrap();
        let mut acc = 0.0;
        for i in 0..batch.len() {
            let single = Batch::new(vec![batch.tokens()[i].clone()], vec![batch.mask()[i].clone()]).unwrap();
            let (l, _) = loss_and_grads(&w, &adapters, &single, None).unwrap();
            acc += l;
        }
        assert!((joint - acc / batch.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_leave_loss_unchanged() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 4).unwrap();
        let adapters = init_adapters(&geo, &TaskAdapterProfile::multi_task(), 5).unwrap();
        let one = toy_batch(7, 1, 8);
        let row = one.tokens()[0].clone();
        let m = one.mask()[0].clone();
        let dup = Batch::new(vec![row.clone(), row], vec![m.clone(), m]).unwrap();
        let (l1, _) = loss_and_grads(&w, &adapters, &one, None).unwrap();
        let (l2, _) = loss_and_grads(&w, &adapters, &dup, None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 4).unwrap();
        let adapters = init_adapters(&geo, &TaskAdapterProfile::multi_task(), 5).unwrap();
        let batch = Batch::new(vec![vec![1, 2, 3]], vec![vec![false, false, false]]).unwrap();
        let err = loss_and_grads(&w, &adapters, &batch, None).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn generate_zero_new_returns_prompt() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 8).unwrap();
        let prompt = vec![4u32, 9, 13];
        let out = generate(&w, None, &prompt, 0, Some(1)).unwrap();
        assert_eq!(out, prompt);
    }

    #[test]
    fn generate_overflow_is_range_error() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 8).unwrap();
        let prompt = vec![4u32; 100];
        let err = generate(&w, None, &prompt, 29, Some(1)).unwrap_err();
        assert!(matches!(err, Error::Range { .. }));
    }

    #[test]
    fn rigged_output_projection_repeats_token() {
        let geo = ModelGeometry::toy();
        let mut w = init_weights(&geo, 8).unwrap();
        // bias every position strongly toward token 17
        w.output_proj = Matrix::zeros(geo.d_model, geo.vocab_size);
        for r in 0..geo.d_model {
            w.output_proj.set(r, 17, 1.0);
        }
        // token 17's logit is sum of hidden entries; make it dominate by
        // adding a large negative column for everything else (zeros suffice
        // only if hidden sums positive, so set a second column negative).
        let prompt = vec![3u32, 5];
        let out = generate(&w, None, &prompt, 4, Some(1)).unwrap();
        // whatever the hidden sums, argmax is either 17 (positive sum) or
        // uniform-zero tie -> token 0; force positivity via final norm gain
        if out[2] != 17 {
            // flip the rigged column sign and re-run
            for r in 0..geo.d_model {
                w.output_proj.set(r, 17, -1.0);
            }
        }
        let out = generate(&w, None, &prompt, 4, Some(1)).unwrap();
        assert_eq!(&out[2..], &[17, 17, 17, 17]);
    }

    #[test]
    fn generate_deterministic() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 12).unwrap();
        let prompt = vec![7u32, 20, 33];
        let a = generate(&w, None, &prompt, 10, Some(1)).unwrap();
        let b = generate(&w, None, &prompt, 10, Some(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classify_reads_answer_position_and_breaks_ties_to_no() {
        let geo = ModelGeometry::toy();
        let mut w = init_weights(&geo, 2).unwrap();
        // zero projection -> all logits equal -> tie -> no
        w.output_proj = Matrix::zeros(geo.d_model, geo.vocab_size);
        assert!(!classify_yes_no(&w, None, &[5, 6], 2, 3).unwrap());
        // rig yes column positive relative to no
        for r in 0..geo.d_model {
            w.output_proj.set(r, 2, 1.0);
            w.output_proj.set(r, 3, -1.0);
        }
        let yes = classify_yes_no(&w, None, &[5, 6], 2, 3).unwrap();
        let flipped = classify_yes_no(&w, None, &[5, 6], 3, 2).unwrap();
        assert_ne!(yes, flipped);
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        // Small smoke version of the full gradient check: one seed, k/v
        // targets, a handful of probed coordinates.
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 1).unwrap();
        let cfg = LoraConfig::new(&[crate::lora::TargetModule::K, crate::lora::TargetModule::V], 4).unwrap();
        let mut adapters = init_adapters(&geo, &cfg, 2).unwrap();
        // non-zero B so gradients flow through both halves
        let mut rng = RngState::new(3);
        for i in 0..adapters.param_matrices().len() {
            if i % 2 == 1 {
                let m = &mut adapters.param_matrices_mut()[i];
                let (r, c) = m.shape();
                **m = Matrix::normal(r, c, 0.0, 0.02, &mut rng);
            }
        }
        let batch = toy_batch(11, 2, 8);
        let (_, grads) = loss_and_grads(&w, &adapters, &batch, None).unwrap();
        let h = 1e-4;
        for param_idx in 0..grads.len() {
            for &coord in &[0usize, 1, 5] {
                if coord >= grads[param_idx].data().len() {
                    continue;
                }
                let mut plus = adapters.clone();
                plus.param_matrices_mut()[param_idx].data_mut()[coord] += h;
                let (lp, _) = loss_and_grads(&w, &plus, &batch, None).unwrap();
                let mut minus = adapters.clone();
                minus.param_matrices_mut()[param_idx].data_mut()[coord] -= h;
                let (lm, _) = loss_and_grads(&w, &minus, &batch, None).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[param_idx].data()[coord];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "param {param_idx} coord {coord}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn dropout_gradients_match_finite_differences_with_fixed_mask() {
        let geo = ModelGeometry::toy();
        let w = init_weights(&geo, 1).unwrap();
        let cfg = LoraConfig::with_options(&[crate::lora::TargetModule::Q], 4, 16.0, 0.3).unwrap();
        let mut adapters = init_adapters(&geo, &cfg, 2).unwrap();
        let (r, c) = adapters.param_matrices()[1].shape();
        *adapters.param_matrices_mut()[1] = Matrix::normal(r, c, 0.0, 0.02, &mut RngState::new(4));
        let batch = toy_batch(13, 2, 6);
        let rng0 = RngState::new(77);
        let (_, grads) = loss_and_grads(&w, &adapters, &batch, Some(&mut rng0.clone())).unwrap();
        let h = 1e-4;
        for param_idx in 0..grads.len() {
            let coord = 2.min(grads[param_idx].data().len() - 1);
            let mut plus = adapters.clone();
            plus.param_matrices_mut()[param_idx].data_mut()[coord] += h;
            let (lp, _) = loss_and_grads(&w, &plus, &batch, Some(&mut rng0.clone())).unwrap();
            let mut minus = adapters.clone();
            minus.param_matrices_mut()[param_idx].data_mut()[coord] -= h;
            let (lm, _) = loss_and_grads(&w, &minus, &batch, Some(&mut rng0.clone())).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[param_idx].data()[coord];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "fd {fd} vs analytic {an}");
        }
    }
}
