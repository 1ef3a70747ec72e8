//! TOML configuration file.
//!
//! Every section is optional and every key inside a section falls back to
//! the engine default:
//!
//! ```toml
//! seed = 0                 # model weight seed
//! precision = "f64"        # or "f32"
//! probe = false            # plant the needle-retrieval probe in the weights
//! weights = "model.ifkw"   # load weights instead of generating them
//!
//! [model]                  # ModelConfig
//! n_layers = 4
//! n_heads = 4
//! d_model = 64
//! d_head = 16
//! d_ff = 128
//! vocab_size = 512
//! rope_base = 10000.0
//! max_position = 16384
//!
//! [selection]              # SelectionConfig
//! strategy = "attention-norm"   # cacheblend | epic | random
//! budget = { ratio = 0.15 }     # or { count = 32 }
//! geometry = "GLOBAL"           # HL-HP | HL-TP | TL-TP
//! # norm_layer = 2
//! # prompt_offset = 300
//! seed = 0
//! cacheblend_layers = 1
//!
//! [task]                   # SyntheticTask
//! kind = "needle"          # or "uniform_noise"
//! total_len = 256
//! # depth = 0.5
//! chunking = { fixed_size = 64 }   # or { passage_split = [40, 128, 200] }
//! prompt_len = 8
//!
//! [run]
//! reorder = false
//! chunk_score = "sum"      # mean | max
//!
//! [cost]                   # CostModelParams for simulate-sp
//! devices = 4
//! recompute_ratio = 0.15
//! ```

use std::path::{Path, PathBuf};

use infoflow_kv::harness::{ModelArgs, NeedleProbe, SyntheticTask};
use infoflow_kv::reorder::ChunkScore;
use infoflow_kv::selection::SelectionConfig;
use infoflow_kv::seqpar::CostModelParams;
use infoflow_kv::{Error, ModelConfig, Precision, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub reorder: bool,
    pub chunk_score: ChunkScore,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub precision: Precision,
    pub probe: bool,
    pub weights: Option<PathBuf>,
    pub model: ModelConfig,
    pub selection: SelectionConfig,
    pub task: SyntheticTask,
    pub run: RunSection,
    pub cost: CostModelParams,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            probe: false,
            weights: None,
            model: ModelConfig::default(),
            selection: SelectionConfig::default(),
            task: SyntheticTask::default(),
            run: RunSection::default(),
            cost: CostModelParams::default(),
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        cfg.model.validate()?;
        cfg.cost.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn model_args(&self) -> ModelArgs {
        ModelArgs {
            config: self.model,
            seed: self.seed,
            probe: self.probe.then(NeedleProbe::default),
            precision: self.precision,
            weights_path: self.weights.clone(),
        }
    }
}
