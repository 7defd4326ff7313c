//! Flat `key = value` experiment configuration with `#` comments and dotted
//! section prefixes (`beam.k = 32`). Unknown keys are rejected so typos fail
//! fast; the fully-resolved config (defaults included) can be echoed back in
//! the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use film_core::attack::{BeamSearchConfig, ReorderConfig};
use film_core::fedsim::DefenseConfig;
use film_core::model::{Hyperparams, OptimizerKind, TrainConfig};
use film_core::{Error, Result};

/// Which transcript iterations the attack runs on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schedule {
    All,
    Iterations(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus_path: PathBuf,
    pub vocab_path: Option<PathBuf>,
    pub vocab_size: usize,
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    pub capture_every: usize,
    pub defense: DefenseConfig,
    pub beam: BeamSearchConfig,
    pub reorder: ReorderConfig,
    pub schedule: Schedule,
    pub repetitions: usize,
    pub ban_order: usize,
    pub sweep_values: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "corpus.path",
    "corpus.vocab",
    "corpus.vocab_size",
    "model.hidden_dim",
    "model.n_layers",
    "model.n_heads",
    "model.max_positions",
    "model.tie_embeddings",
    "train.learning_rate",
    "train.optimizer",
    "train.iterations",
    "train.batch_size",
    "train.freeze_embeddings",
    "train.capture_every",
    "defense.kind",
    "defense.prune_ratio",
    "defense.clip",
    "defense.noise",
    "beam.k",
    "beam.max_len",
    "beam.ngram",
    "beam.rho",
    "beam.prompt_fallback",
    "reorder.beta",
    "reorder.steps",
    "reorder.cuts",
    "reorder.candidates",
    "attack.iterations",
    "attack.repetitions",
    "attack.ban_order",
    "sweep.values",
    "seed",
    "out",
];

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "line {}: unknown key `{key}`",
                lineno + 1
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

struct Lookup {
    map: BTreeMap<String, String>,
}

impl Lookup {
    fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::InvalidConfig(format!("key `{key}`: cannot parse `{v}`"))
            }),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .map
            .get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing required key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::InvalidConfig(format!("key `{key}`: cannot parse `{v}`")))
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<ExperimentConfig> {
        let l = Lookup {
            map: parse_pairs(text)?,
        };

        let corpus_path = PathBuf::from(
            l.str("corpus.path")
                .ok_or_else(|| Error::InvalidConfig("missing required key `corpus.path`".into()))?,
        );
        let vocab_path = l.str("corpus.vocab").map(PathBuf::from);
        let vocab_size = l.parse("corpus.vocab_size", 512usize)?;

        let hyper = Hyperparams {
            vocab_size, // replaced with the built vocabulary's size at load time
            hidden_dim: l.parse("model.hidden_dim", 64usize)?,
            n_layers: l.parse("model.n_layers", 2usize)?,
            n_heads: l.parse("model.n_heads", 4usize)?,
            max_positions: l.parse("model.max_positions", 41usize)?,
            tie_embeddings: l.parse("model.tie_embeddings", false)?,
        };

        let optimizer = match l.str("train.optimizer").unwrap_or("adam") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "train.optimizer must be adam or sgd, got `{other}`"
                )))
            }
        };
        let seed = l.parse("seed", 0u64)?;
        let train = TrainConfig {
            learning_rate: l.parse("train.learning_rate", 1e-3)?,
            optimizer,
            iterations: l.parse("train.iterations", 200usize)?,
            batch_size: l.parse("train.batch_size", 16usize)?,
            freeze_embeddings: l.parse("train.freeze_embeddings", false)?,
            seed,
        };
        let capture_every = l.parse("train.capture_every", 1000usize)?;

        let defense = match l.str("defense.kind").unwrap_or("none") {
            "none" => DefenseConfig::None,
            "prune" => DefenseConfig::Prune {
                ratio: l.require("defense.prune_ratio")?,
            },
            "dpsgd" => DefenseConfig::Dpsgd {
                clip: l.parse("defense.clip", 1.0)?,
                noise: l.require("defense.noise")?,
            },
            "freeze_embeddings" => DefenseConfig::FreezeEmbeddings,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "defense.kind must be none|prune|dpsgd|freeze_embeddings, got `{other}`"
                )))
            }
        };
        defense.validate()?;

        let beam = BeamSearchConfig {
            beam_size: l.parse("beam.k", 32usize)?,
            max_len: l.parse("beam.max_len", 40usize)?,
            ngram_order: l.parse("beam.ngram", 2usize)?,
            penalty: l.parse("beam.rho", 1.0)?,
            prompt_fallback: l.parse("beam.prompt_fallback", true)?,
            token_caps: None,
        };
        beam.validate()?;

        let reorder = ReorderConfig {
            beta: l.parse("reorder.beta", 1.0)?,
            steps_per_stage: l.parse("reorder.steps", 200usize)?,
            p_cuts: l.parse("reorder.cuts", 2usize)?,
            candidates_per_step: l.parse("reorder.candidates", 32usize)?,
            seed,
        };
        reorder.validate()?;

        let schedule = match l.str("attack.iterations").unwrap_or("all") {
            "all" => Schedule::All,
            list => Schedule::Iterations(
                list.split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| {
                            Error::InvalidConfig(format!(
                                "attack.iterations: bad entry `{}`",
                                s.trim()
                            ))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?,
            ),
        };
        let repetitions = l.parse("attack.repetitions", 1usize)?;
        let ban_order = l.parse("attack.ban_order", 4usize)?;
        if repetitions == 0 || ban_order == 0 {
            return Err(Error::InvalidConfig(
                "attack.repetitions and attack.ban_order must be >= 1".into(),
            ));
        }

        let sweep_values = match l.str("sweep.values") {
            None => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::InvalidConfig(format!("sweep.values: bad entry `{}`", s.trim()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?,
        };

        let out = PathBuf::from(l.str("out").unwrap_or("runs/default"));

        Ok(ExperimentConfig {
            corpus_path,
            vocab_path,
            vocab_size,
            hyper,
            train,
            capture_every,
            defense,
            beam,
            reorder,
            schedule,
            repetitions,
            ban_order,
            sweep_values,
            seed,
            out,
        })
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    /// Applies `--seed` to every seeded field.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.reorder.seed = seed;
    }

    /// Fully-resolved config, defaults included, in the input format.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "corpus.path = {}", self.corpus_path.display());
        if let Some(v) = &self.vocab_path {
            let _ = writeln!(s, "corpus.vocab = {}", v.display());
        }
        let _ = writeln!(s, "corpus.vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "model.hidden_dim = {}", self.hyper.hidden_dim);
        let _ = writeln!(s, "model.n_layers = {}", self.hyper.n_layers);
        let _ = writeln!(s, "model.n_heads = {}", self.hyper.n_heads);
        let _ = writeln!(s, "model.max_positions = {}", self.hyper.max_positions);
        let _ = writeln!(s, "model.tie_embeddings = {}", self.hyper.tie_embeddings);
        let _ = writeln!(s, "train.learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(
            s,
            "train.optimizer = {}",
            match self.train.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
        );
        let _ = writeln!(s, "train.iterations = {}", self.train.iterations);
        let _ = writeln!(s, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(
            s,
            "train.freeze_embeddings = {}",
            self.train.freeze_embeddings
        );
        let _ = writeln!(s, "train.capture_every = {}", self.capture_every);
        match self.defense {
            DefenseConfig::None => {
                let _ = writeln!(s, "defense.kind = none");
            }
            DefenseConfig::Prune { ratio } => {
                let _ = writeln!(s, "defense.kind = prune");
                let _ = writeln!(s, "defense.prune_ratio = {ratio}");
            }
            DefenseConfig::Dpsgd { clip, noise } => {
                let _ = writeln!(s, "defense.kind = dpsgd");
                let _ = writeln!(s, "defense.clip = {clip}");
                let _ = writeln!(s, "defense.noise = {noise}");
            }
            DefenseConfig::FreezeEmbeddings => {
                let _ = writeln!(s, "defense.kind = freeze_embeddings");
            }
        }
        let _ = writeln!(s, "beam.k = {}", self.beam.beam_size);
        let _ = writeln!(s, "beam.max_len = {}", self.beam.max_len);
        let _ = writeln!(s, "beam.ngram = {}", self.beam.ngram_order);
        let _ = writeln!(s, "beam.rho = {}", self.beam.penalty);
        let _ = writeln!(s, "beam.prompt_fallback = {}", self.beam.prompt_fallback);
        let _ = writeln!(s, "reorder.beta = {}", self.reorder.beta);
        let _ = writeln!(s, "reorder.steps = {}", self.reorder.steps_per_stage);
        let _ = writeln!(s, "reorder.cuts = {}", self.reorder.p_cuts);
        let _ = writeln!(s, "reorder.candidates = {}", self.reorder.candidates_per_step);
        match &self.schedule {
            Schedule::All => {
                let _ = writeln!(s, "attack.iterations = all");
            }
            Schedule::Iterations(list) => {
                let joined: Vec<String> = list.iter().map(|i| i.to_string()).collect();
                let _ = writeln!(s, "attack.iterations = {}", joined.join(","));
            }
        }
        let _ = writeln!(s, "attack.repetitions = {}", self.repetitions);
        let _ = writeln!(s, "attack.ban_order = {}", self.ban_order);
        if !self.sweep_values.is_empty() {
            let joined: Vec<String> = self.sweep_values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "sweep.values = {}", joined.join(","));
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_str(
            "corpus.path = data/train.txt\n\
             beam.k = 8  # narrow beam\n\
             # comment line\n\
             seed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.beam.beam_size, 8);
        assert_eq!(cfg.beam.max_len, 40);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.repetitions, 1);
        assert_eq!(cfg.defense, DefenseConfig::None);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_str("corpus.path = x\nbema.k = 8\n").unwrap_err();
        assert!(err.to_string().contains("bema.k"));
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = ExperimentConfig::from_str(
            "corpus.path = data/train.txt\n\
             defense.kind = prune\n\
             defense.prune_ratio = 0.9\n\
             attack.iterations = 0,50\n\
             sweep.values = 1,16\n",
        )
        .unwrap();
        let echoed = ExperimentConfig::from_str(&cfg.echo()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn defense_requires_parameters() {
        let err = ExperimentConfig::from_str("corpus.path = x\ndefense.kind = prune\n");
        assert!(err.is_err());
        let err = ExperimentConfig::from_str(
            "corpus.path = x\ndefense.kind = prune\ndefense.prune_ratio = 1.5\n",
        );
        assert!(err.is_err());
    }
}
