use std::path::{Path, PathBuf};

use clap::Args;
use hgch::eval::DEFAULT_KS;
use hgch::geometry::Curvature;
use hgch::model::{Aggregation, Fusion, Init, ModelConfig};
use hgch::training::{Sampling, TrainConfig};
use hgch::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Processed dataset directory.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dir: "data".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: DEFAULT_KS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Run directory for the checkpoint, logs and config snapshot.
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out: "runs/latest".into() }
    }
}

/// Everything a training run needs. Resolution order: defaults, then the
/// TOML file, then command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path)
    }

    /// Defaults, overlaid by `file` when given, overlaid by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        flags.apply(&mut c)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of values ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Command-line mirrors of the run configuration keys.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// data.dir
    #[arg(long = "data")]
    pub data: Option<PathBuf>,
    /// run.out
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// model.dim
    #[arg(long)]
    pub dim: Option<usize>,
    /// model.layers
    #[arg(long)]
    pub layers: Option<usize>,
    /// model.curvature
    #[arg(long)]
    pub curvature: Option<f64>,
    /// model.scoring_curvature
    #[arg(long)]
    pub scoring_curvature: Option<f64>,
    /// model.init_scale
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// model.power_law_b
    #[arg(long)]
    pub power_law_b: Option<f64>,
    /// model.fusion: none, gate, prior or gate_prior
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// model.aggregation: gyromidpoint or tangent
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    /// model.init: power_law or uniform
    #[arg(long)]
    pub init: Option<Init>,
    /// model.include_layer0
    #[arg(long)]
    pub include_layer0: Option<bool>,
    /// train.sampling: hyperbolic or uniform
    #[arg(long)]
    pub sampling: Option<Sampling>,
    /// train.n_neg
    #[arg(long)]
    pub n_neg: Option<usize>,
    /// train.margin
    #[arg(long)]
    pub margin: Option<f64>,
    /// train.alpha
    #[arg(long)]
    pub alpha: Option<f64>,
    /// train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// train.max_epochs
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// train.patience
    #[arg(long)]
    pub patience: Option<usize>,
    /// train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// eval.ks, comma separated
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

fn curvature(key: &str, k: f64) -> Result<Curvature> {
    Curvature::new(k).map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),+ $(,)?) => {
                $(if let Some(v) = &self.$flag {
                    c.$($field).+ = v.clone();
                })+
            };
        }
        set!(
            data => data.dir,
            out => run.out,
            dim => model.dim,
            layers => model.layers,
            init_scale => model.init_scale,
            power_law_b => model.power_law_b,
            fusion => model.fusion,
            aggregation => model.aggregation,
            init => model.init,
            include_layer0 => model.include_layer0,
            sampling => train.sampling,
            n_neg => train.n_neg,
            margin => train.margin,
            alpha => train.alpha,
            lr => train.lr,
            batch_size => train.batch_size,
            max_epochs => train.max_epochs,
            patience => train.patience,
            seed => train.seed,
            ks => eval.ks,
        );
        if let Some(k) = self.curvature {
            c.model.curvature = curvature("model.curvature", k)?;
        }
        if let Some(k) = self.scoring_curvature {
            c.model.scoring_curvature = curvature("model.scoring_curvature", k)?;
        }
        Ok(())
    }
}
