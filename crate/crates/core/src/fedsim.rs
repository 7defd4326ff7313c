//! Federated-learning simulation: one server, one client, batch size standing
//! in for the client count. Each iteration the client computes gradients on a
//! private batch, optionally applies a defense, and transmits; the transcript
//! records exactly what an eavesdropper on that link would see.
//!
//! Ground-truth batches are carried alongside each transcript entry for
//! evaluation only; attack code never reads them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{sample_batch, Batch, Corpus, Sentence};
use crate::error::{Error, Result};
use crate::model::{
    init_params, loss_and_gradients, per_example_gradients, Gradients, Hyperparams, ModelParams,
    Optimizer, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    Prune { ratio: f64 },
    Dpsgd { clip: f64, noise: f64 },
    FreezeEmbeddings,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseConfig::Prune { ratio } => {
                if !(0.0..1.0).contains(&ratio) {
                    return Err(Error::InvalidConfig(format!(
                        "prune ratio {ratio} outside [0, 1)"
                    )));
                }
            }
            DefenseConfig::Dpsgd { clip, noise } => {
                if !(clip > 0.0) {
                    return Err(Error::InvalidConfig("dpsgd clip must be > 0".into()));
                }
                if !(noise >= 0.0) {
                    return Err(Error::InvalidConfig("dpsgd noise must be >= 0".into()));
                }
            }
            DefenseConfig::None | DefenseConfig::FreezeEmbeddings => {}
        }
        Ok(())
    }
}

/// One captured exchange: the broadcast parameters and the gradients the
/// client transmitted at iteration `iteration`.
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub iteration: usize,
    pub params: ModelParams,
    pub transmitted: Gradients,
    ground_truth: Batch,
}

impl TranscriptEntry {
    pub fn new(
        iteration: usize,
        params: ModelParams,
        transmitted: Gradients,
        ground_truth: Batch,
    ) -> TranscriptEntry {
        TranscriptEntry {
            iteration,
            params,
            transmitted,
            ground_truth,
        }
    }

    /// The client's private batch. Evaluation-only: attack code must score
    /// against this but never condition on it.
    pub fn eval_ground_truth(&self) -> &Batch {
        &self.ground_truth
    }
}

#[derive(Debug, Clone)]
pub struct Transcript {
    pub hyper: Hyperparams,
    pub train_config: TrainConfig,
    pub defense: DefenseConfig,
    pub entries: Vec<TranscriptEntry>,
}

/// Zeroes the globally smallest-magnitude floor(p * total) entries across the
/// given slices; ties broken by slice order then index within a slice.
fn prune_flat(tensors: &mut [&mut [f64]], p: f64) {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let kill = (p * total as f64).floor() as usize;
    if kill == 0 {
        return;
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat = 0usize;
    for t in tensors.iter() {
        for v in t.iter() {
            order.push((v.abs(), flat));
            flat += 1;
        }
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut zero_flags = vec![false; total];
    for &(_, idx) in order.iter().take(kill) {
        zero_flags[idx] = true;
    }
    let mut flat = 0usize;
    for t in tensors.iter_mut() {
        for v in t.iter_mut() {
            if zero_flags[flat] {
                *v = 0.0;
            }
            flat += 1;
        }
    }
}

/// Gradient pruning defense: zero the fraction `p` of entries with smallest
/// absolute value, computed globally over every tensor.
pub fn apply_gradient_pruning(grads: &Gradients, p: f64) -> Gradients {
    debug_assert!((0.0..1.0).contains(&p));
    let mut out = grads.clone();
    let mut tensors = out.named_tensors_mut();
    let mut slices: Vec<&mut [f64]> = tensors.iter_mut().map(|(_, t)| t.as_slice_mut()).collect();
    prune_flat(&mut slices, p);
    drop(tensors);
    out
}

/// DPSGD defense: clip each per-example gradient to global L2 norm `c`,
/// average, then add i.i.d. N(0, sigma^2 c^2 / b^2) noise to every entry.
pub fn apply_dpsgd<R: Rng>(
    per_example: &[Gradients],
    c: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Gradients> {
    if per_example.is_empty() {
        return Err(Error::InvalidInput("no per-example gradients".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidInput("clip norm must be > 0".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput("noise scale must be >= 0".into()));
    }
    let b = per_example.len() as f64;
    let mut acc = per_example[0].clone();
    acc.scale(0.0);
    for g in per_example {
        let norm = g.l2_norm();
        let scale = if norm > c { c / norm } else { 1.0 };
        acc.add_scaled(g, scale / b)?;
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma * c / b).expect("valid distribution");
        for (_, mut t) in acc.named_tensors_mut() {
            for v in t.as_slice_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(acc)
}

/// Embedding-freezing defense: the word and position embedding gradients are
/// simply never transmitted (represented as all-zero tensors).
pub fn apply_freeze(grads: &Gradients) -> Gradients {
    let mut out = grads.clone();
    out.w_embed.fill(0.0);
    out.p_embed.fill(0.0);
    out
}

/// Runs `train_config.iterations` federated steps, capturing a transcript
/// entry every `capture_every` iterations (including iteration 0). Returns
/// the final parameters, the transcript, and the per-iteration loss curve.
pub fn run_training<R: Rng>(
    corpus: &Corpus,
    hyper: &Hyperparams,
    train_config: &TrainConfig,
    defense: &DefenseConfig,
    capture_every: usize,
    rng: &mut R,
) -> Result<(ModelParams, Transcript, Vec<(usize, f64)>)> {
    hyper.validate()?;
    train_config.validate()?;
    defense.validate()?;
    if capture_every == 0 {
        return Err(Error::InvalidConfig("capture_every must be >= 1".into()));
    }
    let freeze = matches!(defense, DefenseConfig::FreezeEmbeddings);
    let effective_config = TrainConfig {
        freeze_embeddings: train_config.freeze_embeddings || freeze,
        ..*train_config
    };
    let mut params = init_params(hyper, rng)?;
    let mut optimizer = Optimizer::new(effective_config);
    let mut entries = Vec::new();
    let mut losses = Vec::with_capacity(train_config.iterations);

    for t in 0..train_config.iterations {
        let batch = sample_batch(corpus, train_config.batch_size, rng)?;
        let (loss, raw) = loss_and_gradients(&params, &batch)?;
        let transmitted = match *defense {
            DefenseConfig::None => raw,
            DefenseConfig::Prune { ratio } => apply_gradient_pruning(&raw, ratio),
            DefenseConfig::Dpsgd { clip, noise } => {
                let per_ex = per_example_gradients(&params, &batch)?;
                apply_dpsgd(&per_ex, clip, noise, rng)?
            }
            DefenseConfig::FreezeEmbeddings => apply_freeze(&raw),
        };
        losses.push((t, loss));
        if t % capture_every == 0 {
            entries.push(TranscriptEntry::new(
                t,
                params.clone(),
                transmitted.clone(),
                batch,
            ));
        }
        optimizer.step(&mut params, &transmitted)?;
    }

    let transcript = Transcript {
        hyper: *hyper,
        train_config: *train_config,
        defense: *defense,
        entries,
    };
    Ok((params, transcript, losses))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    hyper: Hyperparams,
    train_config: TrainConfig,
    defense: DefenseConfig,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    iteration: usize,
    params_file: String,
    grads_file: String,
    /// Evaluation-only ground truth; not an attack input.
    eval_only_batch: Vec<Sentence>,
}

impl Transcript {
    /// Persists the transcript as a directory: `manifest.json` plus one
    /// parameter and one gradient checkpoint per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest_entries = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let params_file = format!("iter{:06}.params.ckpt", entry.iteration);
            let grads_file = format!("iter{:06}.grads.ckpt", entry.iteration);
            checkpoint::save_params(&dir.join(&params_file), &entry.params)?;
            checkpoint::save_gradients(&dir.join(&grads_file), &entry.transmitted)?;
            manifest_entries.push(ManifestEntry {
                iteration: entry.iteration,
                params_file,
                grads_file,
                eval_only_batch: entry.ground_truth.member_sentences.clone(),
            });
        }
        let manifest = Manifest {
            hyper: self.hyper,
            train_config: self.train_config,
            defense: self.defense,
            entries: manifest_entries,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Transcript> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut prev_iter: Option<usize> = None;
        for me in manifest.entries {
            if let Some(p) = prev_iter {
                if me.iteration <= p {
                    return Err(Error::InvalidInput(
                        "transcript iterations not strictly increasing".into(),
                    ));
                }
            }
            prev_iter = Some(me.iteration);
            let params = checkpoint::load_params(&dir.join(&me.params_file), &manifest.hyper)?;
            let transmitted =
                checkpoint::load_gradients(&dir.join(&me.grads_file), &manifest.hyper)?;
            entries.push(TranscriptEntry::new(
                me.iteration,
                params,
                transmitted,
                Batch::from_sentences(me.eval_only_batch),
            ));
        }
        Ok(Transcript {
            hyper: manifest.hyper,
            train_config: manifest.train_config,
            defense: manifest.defense,
            entries,
        })
    }
}
