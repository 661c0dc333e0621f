//! Seeded synthetic trace generators: class-separated Gaussian layers and
//! two-chain Markov token corpora.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::trace::{trace_to_string, Execution, Outcome, SpaceConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("bad spec: {0}")]
    BadSpec(String),
}

fn bad(msg: impl Into<String>) -> SynthError {
    SynthError::BadSpec(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredGaussianSpec {
    pub class_count: usize,
    pub layer_count: usize,
    /// Strictly increasing, one per layer.
    pub separations: Vec<f64>,
    /// One per layer; each must be ≥ class_count. Empty means class_count
    /// everywhere.
    #[serde(default)]
    pub dims: Vec<usize>,
    pub samples_per_class: usize,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LayeredGaussianSpec {
    pub fn new(class_count: usize, separations: Vec<f64>, samples_per_class: usize, sigma: f64, seed: u64) -> Self {
        Self {
            class_count,
            layer_count: separations.len(),
            separations,
            dims: Vec::new(),
            samples_per_class,
            sigma,
            seed,
        }
    }

    pub fn dim(&self, layer: usize) -> usize {
        self.dims.get(layer).copied().unwrap_or(self.class_count)
    }

    pub fn space_id(layer: usize) -> String {
        format!("layer_{}", layer + 1)
    }

    pub fn check(&self) -> Result<(), SynthError> {
        if self.class_count == 0 || self.layer_count == 0 || self.samples_per_class == 0 {
            return Err(bad("class_count, layer_count and samples_per_class must be positive"));
        }
        if self.separations.len() != self.layer_count {
            return Err(bad(format!("{} separations for {} layers", self.separations.len(), self.layer_count)));
        }
        if !self.dims.is_empty() && self.dims.len() != self.layer_count {
            return Err(bad(format!("{} dims for {} layers", self.dims.len(), self.layer_count)));
        }
        if self.separations.iter().any(|s| !s.is_finite()) {
            return Err(bad("separations must be finite"));
        }
        if self.separations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(bad("separations must be strictly increasing"));
        }
        if let Some(l) = (0..self.layer_count).find(|&l| self.dim(l) < self.class_count) {
            return Err(bad(format!("layer {} has dim {} < class_count {}", l + 1, self.dim(l), self.class_count)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn space_configs(&self) -> Vec<SpaceConfig> {
        (0..self.layer_count).map(|l| SpaceConfig::continuous(Self::space_id(l)).with_k(self.class_count)).collect()
    }
}

/// Sample `i` of class `c` gets one event per layer ℓ in space `layer_ℓ`,
/// drawn from N(separation_ℓ·e_c, σ²I).
pub fn layered_executions(spec: &LayeredGaussianSpec) -> Result<Vec<Execution>, SynthError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for c in 0..spec.class_count {
        for i in 0..spec.samples_per_class {
            let mut e = Execution::new(format!("c{c}_s{i:04}"), Outcome::Pass);
            e.meta.insert("class".into(), Value::String(c.to_string()));
            for (l, &sep) in spec.separations.iter().enumerate() {
                let v = (0..spec.dim(l)).map(|d| if d == c { sep } else { 0.0 } + noise.sample(&mut rng)).collect();
                e.push_vector(LayeredGaussianSpec::space_id(l), v);
            }
            out.push(e);
        }
    }
    Ok(out)
}

pub fn gen_layered_gaussian(spec: &LayeredGaussianSpec) -> Result<String, SynthError> {
    Ok(trace_to_string(&layered_executions(spec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    /// Distribution of the first token; uniform when omitted.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Row-stochastic, indexed like the alphabet.
    pub transitions: Vec<Vec<f64>>,
}

fn default_space() -> String {
    "calls".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCorpusSpec {
    pub alphabet: Vec<String>,
    pub pass: ChainSpec,
    pub fail: ChainSpec,
    pub min_len: usize,
    pub max_len: usize,
    pub n_pass: usize,
    pub n_fail: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_space")]
    pub space_id: String,
}

const ROW_TOLERANCE: f64 = 1e-9;

fn check_row(row: &[f64], n: usize, what: &str) -> Result<(), SynthError> {
    if row.len() != n {
        return Err(bad(format!("{what} has {} entries, alphabet has {n}", row.len())));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(bad(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(bad(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl ChainSpec {
    fn check(&self, n: usize, name: &str) -> Result<(), SynthError> {
        if let Some(init) = &self.initial {
            check_row(init, n, &format!("{name}.initial"))?;
        }
        if self.transitions.len() != n {
            return Err(bad(format!("{name} table has {} rows, alphabet has {n}", self.transitions.len())));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            check_row(row, n, &format!("{name} row {i}"))?;
        }
        Ok(())
    }
}

impl MarkovCorpusSpec {
    pub fn check(&self) -> Result<(), SynthError> {
        let n = self.alphabet.len();
        if n == 0 {
            return Err(bad("empty alphabet"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.alphabet.iter().find(|t| !seen.insert(*t)) {
            return Err(bad(format!("duplicate token {dup:?}")));
        }
        self.pass.check(n, "pass")?;
        self.fail.check(n, "fail")?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(bad(format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len)));
        }
        if self.n_pass + self.n_fail == 0 {
            return Err(bad("corpus is empty"));
        }
        Ok(())
    }

    pub fn space_configs(&self) -> Vec<SpaceConfig> {
        vec![SpaceConfig::discrete(self.space_id.clone())]
    }
}

struct Sampler {
    initial: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
}

impl Sampler {
    fn new(chain: &ChainSpec, n: usize) -> Result<Self, SynthError> {
        let weighted = |w: &[f64]| WeightedIndex::new(w.iter().copied()).map_err(|e| bad(e.to_string()));
        let uniform = vec![1.0; n];
        Ok(Self {
            initial: weighted(chain.initial.as_deref().unwrap_or(&uniform))?,
            rows: chain.transitions.iter().map(|r| weighted(r)).collect::<Result<_, _>>()?,
        })
    }

    fn path(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut p = vec![self.initial.sample(rng)];
        while p.len() < len {
            p.push(self.rows[*p.last().unwrap()].sample(rng));
        }
        p
    }
}

/// All pass executions first (`p0000`, ...), then fail (`f0000`, ...);
/// lengths uniform in [min_len, max_len].
pub fn markov_executions(spec: &MarkovCorpusSpec) -> Result<Vec<Execution>, SynthError> {
    spec.check()?;
    let n = spec.alphabet.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_pass + spec.n_fail);
    for (chain, count, outcome, prefix) in
        [(&spec.pass, spec.n_pass, Outcome::Pass, "p"), (&spec.fail, spec.n_fail, Outcome::Fail, "f")]
    {
        let sampler = Sampler::new(chain, n)?;
        for i in 0..count {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut e = Execution::new(format!("{prefix}{i:04}"), outcome);
            for t in sampler.path(len, &mut rng) {
                e.push_token(spec.space_id.as_str(), spec.alphabet[t].as_str());
            }
            out.push(e);
        }
    }
    Ok(out)
}

pub fn gen_markov_corpus(spec: &MarkovCorpusSpec) -> Result<String, SynthError> {
    Ok(trace_to_string(&markov_executions(spec)?))
}
