//! Run and generator configuration: preset, then JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use retrack::data::GeneratorConfig;
use retrack::evidence::{Activation, StopGrad};
use retrack::geometry::SimilarityMode;
use retrack::train::RunConfig;

use crate::Failure;

#[derive(Args)]
pub struct RunArgs {
    /// JSON config with flat keys mirroring the run configuration; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: desk or paper-scale
    #[arg(long)]
    pub preset: Option<String>,
    /// Root seed; every sub-seed is derived from it
    #[arg(long, env = "RETRACK_SEED")]
    pub seed: Option<u64>,
    /// Softmax temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Query tokens per feature
    #[arg(long)]
    pub queries: Option<usize>,
    /// Feature width
    #[arg(long)]
    pub dim: Option<usize>,
    /// Attention heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Triplets per batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Validate every this many steps
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Similarity: token-max-mean or pooled-cosine
    #[arg(long)]
    pub similarity: Option<SimilarityMode>,
    /// Evidence activation: exp, relu or softplus
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Block evidence-loss gradients through: none, reliability or similarity
    #[arg(long)]
    pub stop_grad: Option<StopGrad>,
    /// Clip gradients to this global norm
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Ablation flag (e.g. wo_Ldir) or activation swap (act_relu, act_softplus); repeatable
    #[arg(long = "variant")]
    pub variants: Vec<String>,
}

/// Loss weights; kept apart so `sweep` can take them as lists.
#[derive(Args, Default)]
pub struct WeightArgs {
    /// Weight of the direction loss
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Weight of the evidence loss
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args)]
pub struct GenArgs {
    /// JSON generator config with flat keys; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: desk or paper-scale
    #[arg(long)]
    pub preset: Option<String>,
    /// Generator seed
    #[arg(long, env = "RETRACK_SEED")]
    pub seed: Option<u64>,
    /// Latent dimension
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Query tokens per feature
    #[arg(long)]
    pub queries: Option<usize>,
    /// Feature width
    #[arg(long)]
    pub dim: Option<usize>,
    /// Training triplets
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation triplets
    #[arg(long)]
    pub val: Option<usize>,
    /// Test triplets
    #[arg(long)]
    pub test: Option<usize>,
    /// Per-row Gaussian noise scale
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of reference content mixed into each target
    #[arg(long)]
    pub bias: Option<f64>,
    /// Hard negatives per validation or test query
    #[arg(long)]
    pub hard_negatives: Option<usize>,
}

/// Overlays the JSON object at `path` onto `base`, rejecting keys `base` lacks.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Missing(format!("{}: {e}", path.display())))?;
    let file: Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(Failure::Usage(format!("{}: expected a JSON object", path.display())));
    };
    let Ok(Value::Object(mut merged)) = serde_json::to_value(base) else {
        return Err(Failure::Other("config does not serialize to an object".into()));
    };
    let unknown: Vec<&String> = file.keys().filter(|k| !merged.contains_key(*k)).collect();
    if !unknown.is_empty() {
        return Err(Failure::Usage(format!("{}: unknown keys {unknown:?}", path.display())));
    }
    merged.extend(file);
    serde_json::from_value(Value::Object(Map::from_iter(merged)))
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl RunArgs {
    pub fn resolve(&self, weights: &WeightArgs) -> Result<RunConfig, Failure> {
        let name = self.preset.as_deref().unwrap_or("desk");
        let base = RunConfig::preset(name).ok_or_else(|| Failure::Usage(format!("unknown preset {name:?}")))?;
        let mut c = match &self.config {
            Some(path) => overlay(&base, path)?,
            None => base,
        };
        set(&mut c.seed, self.seed);
        set(&mut c.kappa, weights.kappa);
        set(&mut c.lambda, weights.lambda);
        set(&mut c.tau, self.tau);
        set(&mut c.queries, self.queries);
        set(&mut c.dim, self.dim);
        set(&mut c.heads, self.heads);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.lr, self.lr);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.steps, self.steps);
        set(&mut c.eval_every, self.eval_every);
        set(&mut c.similarity, self.similarity);
        set(&mut c.activation, self.activation);
        set(&mut c.stop_grad, self.stop_grad);
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        for v in &self.variants {
            c.apply_variant(v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

impl GenArgs {
    pub fn resolve(&self) -> Result<GeneratorConfig, Failure> {
        let base = match self.preset.as_deref() {
            None | Some("desk") => GeneratorConfig::default(),
            Some("paper-scale") => GeneratorConfig::paper_scale(),
            Some(other) => return Err(Failure::Usage(format!("unknown preset {other:?}"))),
        };
        let mut c = match &self.config {
            Some(path) => overlay(&base, path)?,
            None => base,
        };
        set(&mut c.seed, self.seed);
        set(&mut c.latent_dim, self.latent_dim);
        set(&mut c.queries, self.queries);
        set(&mut c.dim, self.dim);
        set(&mut c.train, self.train);
        set(&mut c.val, self.val);
        set(&mut c.test, self.test);
        set(&mut c.noise, self.noise);
        set(&mut c.bias, self.bias);
        set(&mut c.hard_negatives, self.hard_negatives);
        c.validate()?;
        Ok(c)
    }
}

/// Generator settings matching a run's feature shape, seeded by the run seed.
pub fn dataset_for_run(cfg: &RunConfig) -> GeneratorConfig {
    let base = GeneratorConfig::paper_scale();
    let base = if (cfg.queries, cfg.dim) == (base.queries, base.dim) {
        base
    } else {
        GeneratorConfig::default()
    };
    GeneratorConfig {
        queries: cfg.queries,
        dim: cfg.dim,
        seed: cfg.seed,
        ..base
    }
}
