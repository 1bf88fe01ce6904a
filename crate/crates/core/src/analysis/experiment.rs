//! The desk-scale two-stage experiment. One pretrained base is shared by every seed; each
//! seed then runs aggregation, NA removal, paired alignment runs with and without the
//! orthogonality penalty, and the final merge.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{merge_attention_lora, merge_final, strip_na};
use crate::data::{build_corpus, Corpus, CorpusSizes};
use crate::error::Result;
use crate::model::{init_base, ModelConfig, ToyModel};
use crate::train::{run_da, run_mka, run_pretrain, StageKind, StageReport, TrainConfig};

use super::metrics::{eval_format_score, eval_mc_accuracy};

/// Micro-F1 the aligned model has to reach on held-out extraction.
pub const F1_TARGET: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSizes,
    /// Seed of the fact world, the corpus and the base model.
    pub world_seed: u64,
    pub pretrain: TrainConfig,
    pub mka: TrainConfig,
    pub da: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus: CorpusSizes::default(),
            world_seed: 0,
            pretrain: TrainConfig {
                stage: StageKind::Pretrain,
                epochs: 1000,
                peak_lr: 5e-3,
                max_steps: Some(4000),
                eval_every: 500,
                ..TrainConfig::default()
            },
            mka: TrainConfig {
                stage: StageKind::Mka,
                epochs: 3,
                peak_lr: 1e-2,
                ..TrainConfig::default()
            },
            da: TrainConfig {
                stage: StageKind::Da,
                epochs: 10,
                peak_lr: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

/// Everything measured for one fine-tuning seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Held-out extraction micro-F1 of the merged λ=1 model.
    pub f1: f64,
    pub acc_full: f64,
    pub acc_stripped: f64,
    pub acc_orth: f64,
    pub acc_no_orth: f64,
    pub final_orth: f64,
    pub final_orth_no_penalty: f64,
    pub seconds: f64,
}

impl SeedOutcome {
    pub fn f1_pass(&self) -> bool {
        self.f1 >= F1_TARGET
    }

    pub fn orth_helps(&self) -> bool {
        self.acc_orth >= self.acc_no_orth
    }

    pub fn strip_helps(&self) -> bool {
        self.acc_stripped >= self.acc_full
    }
}

/// Machine-readable summary over every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub pretrain_seconds: f64,
    pub heldout_nll: Option<f64>,
    pub seeds: Vec<SeedOutcome>,
    pub f1_pass: bool,
    pub orth_wins: usize,
    pub strip_wins: usize,
}

impl DeskReport {
    pub fn new(config: DeskConfig, pretrain: &StageReport, seeds: Vec<SeedOutcome>) -> Self {
        Self {
            config,
            pretrain_seconds: pretrain.wall_clock_secs,
            heldout_nll: pretrain.metrics.get("heldout_nll").copied(),
            f1_pass: !seeds.is_empty() && seeds.iter().all(SeedOutcome::f1_pass),
            orth_wins: seeds.iter().filter(|s| s.orth_helps()).count(),
            strip_wins: seeds.iter().filter(|s| s.strip_helps()).count(),
            seeds,
        }
    }
}

/// Builds the corpus and pretrains the shared base.
pub fn prepare_base(cfg: &DeskConfig) -> Result<(Corpus, ToyModel<f32>, StageReport)> {
    let corpus = build_corpus(&cfg.corpus, cfg.world_seed)?;
    let fresh: ToyModel<f32> = init_base(&cfg.model, cfg.world_seed)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = cfg.world_seed;
    let (base, report) = run_pretrain(fresh, &corpus.pretrain, &corpus.pretrain_heldout, &pcfg)?;
    Ok((corpus, base, report))
}

/// Models produced along one seed's pipeline, kept for the structural checks.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub outcome: SeedOutcome,
    /// Base plus KA and NA after aggregation.
    pub mka: ToyModel<f32>,
    /// NA removed and attention adapters merged: the starting point of alignment.
    pub stripped: ToyModel<f32>,
    /// Alignment result with the penalty, adapters still separate.
    pub da: ToyModel<f32>,
    pub merged: ToyModel<f32>,
}

/// One fine-tuning seed on a pretrained base.
pub fn run_seed(base: &ToyModel<f32>, corpus: &Corpus, cfg: &DeskConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let mka_cfg = TrainConfig { seed, ..cfg.mka.clone() };
    let (mka, _) = run_mka(base, &corpus.mka, &mka_cfg)?;
    let acc_full = eval_mc_accuracy(&mka, &corpus.eval_knowledge)?;

    let mut stripped = mka.clone();
    strip_na(&mut stripped)?;
    let acc_stripped = eval_mc_accuracy(&stripped, &corpus.eval_knowledge)?;
    merge_attention_lora(&mut stripped)?;

    let on_cfg = TrainConfig { seed, ..cfg.da.clone() };
    let off_cfg = TrainConfig { lambda_orth: 0.0, ..on_cfg.clone() };
    let (da, on_report) = run_da(&stripped, &corpus.da, &on_cfg)?;
    let (off, off_report) = run_da(&stripped, &corpus.da, &off_cfg)?;
    let mut merged = da.clone();
    merge_final(&mut merged)?;

    let outcome = SeedOutcome {
        seed,
        f1: eval_format_score(&merged, &corpus.eval_alignment)?,
        acc_full,
        acc_stripped,
        acc_orth: eval_mc_accuracy(&merged, &corpus.eval_knowledge)?,
        acc_no_orth: eval_mc_accuracy(&off, &corpus.eval_knowledge)?,
        final_orth: on_report.last().map_or(0.0, |r| r.orth),
        final_orth_no_penalty: off_report.last().map_or(0.0, |r| r.orth),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(SeedRun { outcome, mka, stripped, da, merged })
}
