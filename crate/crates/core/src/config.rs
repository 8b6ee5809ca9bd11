//! Run configuration: every tunable of the pipeline, TOML-serialized, with presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Extent, GridShape};
use crate::dataset::{LoopConfig, PairConfig, SceneConfig, SensorConfig};
use crate::evaluation::LoopProtocol;
use crate::model::ModelConfig;
use crate::pipeline::{RegisterConfig, TrainConfig};
use crate::registration::RansacConfig;
use crate::{Error, Result};

/// One split of generated scan pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub scenes: usize,
    /// Index of the first scene; splits with disjoint ranges use disjoint scenes.
    pub first_scene: u64,
    /// Explicit pair distances used in every scene; when empty, `pairs_per_scene`
    /// distances are drawn uniformly from `[min_distance, max_distance]`.
    pub distances: Vec<f64>,
    pub pairs_per_scene: usize,
    pub min_distance: f64,
    pub max_distance: f64,
}

impl SplitConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config(format!("data.{name}: scenes must be >= 1")));
        }
        if self.distances.is_empty() && (self.pairs_per_scene == 0 || !(self.max_distance >= self.min_distance && self.min_distance >= 0.0)) {
            return Err(Error::Config(format!(
                "data.{name}: need explicit distances or pairs_per_scene with 0 <= min <= max"
            )));
        }
        if self.distances.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config(format!("data.{name}: distances must be non-negative")));
        }
        Ok(())
    }
}

/// Train/test splits and the loop-closure corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train: SplitConfig,
    pub test: SplitConfig,
    pub loop_corpus: LoopConfig,
    pub loop_scene: SceneConfig,
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Bucket edges; bucket `k` is `(edges[k], edges[k+1]]`, the first one closed at 0.
    pub bucket_edges: Vec<f64>,
    pub overlap_threshold: f64,
    pub rte_threshold: f64,
    pub rre_threshold: f64,
    pub loop_protocol: LoopProtocol,
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub bev: BevConfig,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub pairs: PairConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub register: RegisterConfig,
    pub eval: EvalConfig,
}

/// Largest seed a TOML integer can hold.
pub const SEED_MASK: u64 = i64::MAX as u64;

/// SplitMix64 step, used to derive independent seeds from the root seed.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    let mut z = root.wrapping_add(tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    /// 64×64×16 grid over 40 m × 40 m × 6 m with a 30 m scan range.
    pub fn desk() -> Self {
        let bev = BevConfig {
            extent: Extent {
                min: [-20.0, -20.0, -2.5],
                max: [20.0, 20.0, 3.5],
            },
            shape: GridShape {
                rows: 64,
                cols: 64,
                layers: 16,
            },
            window: 3,
        };
        let cell = 40.0 / 64.0;
        let mut cfg = Self {
            seed: 0,
            bev,
            model: ModelConfig {
                channels: vec![16, 32, 64, 64],
                descriptor_dim: 32,
                attention_dim: 32,
                init_seed: 0,
            },
            scene: SceneConfig::default(),
            sensor: SensorConfig::default(),
            pairs: PairConfig::default(),
            data: DataConfig {
                seed: 0,
                train: SplitConfig {
                    scenes: 20,
                    first_scene: 0,
                    distances: vec![],
                    pairs_per_scene: 10,
                    min_distance: 0.0,
                    max_distance: 24.0,
                },
                test: SplitConfig {
                    scenes: 5,
                    first_scene: 1000,
                    distances: vec![],
                    pairs_per_scene: 10,
                    min_distance: 0.0,
                    max_distance: 24.0,
                },
                loop_corpus: LoopConfig::default(),
                loop_scene: SceneConfig {
                    half_size: 100.0,
                    walls: 180,
                    poles: 280,
                    clutter: 240,
                    ..SceneConfig::default()
                },
            },
            train: TrainConfig {
                lr: 3e-4,
                steps: 2500,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            register: RegisterConfig {
                keypoints: 250,
                overlap_threshold: 0.5,
                ransac: RansacConfig {
                    max_iterations: 10_000,
                    inlier_radius: 2.0 * cell,
                    early_exit_ratio: 0.9,
                    seed: 0,
                },
            },
            eval: EvalConfig {
                bucket_edges: vec![0.0, 8.0, 16.0, 24.0],
                overlap_threshold: 0.5,
                rte_threshold: 2.0,
                rre_threshold: 5.0,
                loop_protocol: LoopProtocol {
                    exclusion: 10,
                    success_radius: 4.0,
                },
            },
        };
        cfg.reseed(0);
        cfg
    }

    /// 256×256×32 grid over a 100 m footprint with the widths reported for full-scale training.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.bev.extent = Extent {
            min: [-50.0, -50.0, -2.5],
            max: [50.0, 50.0, 3.5],
        };
        cfg.bev.shape = GridShape {
            rows: 256,
            cols: 256,
            layers: 32,
        };
        cfg.model.channels = vec![64, 128, 256, 512];
        cfg.model.descriptor_dim = 32;
        cfg.model.attention_dim = 128;
        cfg.sensor.range = 80.0;
        cfg.scene.half_size = 150.0;
        cfg.register.ransac.max_iterations = 50_000;
        cfg.register.ransac.inlier_radius = 0.6;
        cfg.data.train.max_distance = 60.0;
        cfg.data.test.max_distance = 60.0;
        cfg.eval.bucket_edges = vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        cfg.eval.loop_protocol = LoopProtocol::default();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    /// Sets the root seed and every section seed derived from it. Section seeds keep 63
    /// bits so that every configuration stays representable as TOML integers.
    pub fn reseed(&mut self, root: u64) {
        let section = |tag| derive_seed(root, tag) & SEED_MASK;
        self.seed = root;
        self.model.init_seed = section(1);
        self.train.seed = section(2);
        self.data.seed = section(3);
        self.register.ransac.seed = section(4);
    }

    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.model.validate(&self.bev)?;
        self.scene.validate()?;
        self.data.loop_scene.validate()?;
        self.sensor.validate()?;
        self.data.train.validate("train")?;
        self.data.test.validate("test")?;
        self.train.validate()?;
        self.register.ransac.validate()?;
        let seeds = [self.seed, self.model.init_seed, self.train.seed, self.data.seed, self.register.ransac.seed];
        if seeds.iter().any(|&s| s > SEED_MASK) {
            return Err(Error::Config(format!("seeds must not exceed {SEED_MASK}")));
        }
        if !(self.pairs.margin >= 0.0 && self.pairs.yaw_spread_deg >= 0.0) {
            return Err(Error::Config("pairs: margin and yaw_spread_deg must be non-negative".into()));
        }
        let e = &self.eval.bucket_edges;
        if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("eval.bucket_edges must be >= 2 increasing values".into()));
        }
        let thr = [self.eval.overlap_threshold, self.register.overlap_threshold];
        if thr.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("overlap thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Canonical text identifying the network; checkpoints are tied to it.
    pub fn model_identity(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            bev: &'a BevConfig,
            channels: &'a [usize],
            descriptor_dim: usize,
            attention_dim: usize,
        }
        toml::to_string(&Identity {
            bev: &self.bev,
            channels: &self.model.channels,
            descriptor_dim: self.model.descriptor_dim,
            attention_dim: self.model.attention_dim,
        })
        .expect("identity serializes")
    }
}
