//! Training cells shared by evaluation, ablations, sweeps and curves.

use std::collections::BTreeMap;
use std::time::Instant;

use super::MetricsFile;
use crate::crm::Crm;
use crate::data::Sample;
use crate::error::Result;
use crate::pipeline::{
    init_plora, score_systems, stage1_train_crm, stage2_tune_plora, CrmTraining, PipelineConfig, PloraTraining,
    Prepared, Scored,
};

/// Stage 1 on `train` with early stopping on the full validation split.
pub fn train_crm_on(prep: &Prepared, cfg: &PipelineConfig, train: &[Sample]) -> Result<CrmTraining> {
    let r = &cfg.retrieval;
    let train = prep.id_samples(train, r)?;
    let valid = prep.id_samples(&prep.data.valid, r)?;
    stage1_train_crm(prep.crm_config(cfg), &train, &valid, &cfg.stage1, cfg.seeds)
}

/// Stage 2 on the few-shot draw of `cfg`, validated on its validation subset.
pub fn tune_plora(prep: &Prepared, cfg: &PipelineConfig, crm: &Crm) -> Result<PloraTraining> {
    let r = &cfg.retrieval;
    let few = prep.modalities(&prep.fewshot(cfg.fewshot_n)?, r)?;
    let valid = prep.modalities(&prep.valid_subset(cfg.valid_subsample), r)?;
    let plora = init_plora(&prep.lm, cfg, crm.cfg.d_c())?;
    stage2_tune_plora(&prep.lm, crm, plora, &few, &valid, &cfg.stage2, cfg.seeds)
}

pub fn test_scores(
    prep: &Prepared,
    cfg: &PipelineConfig,
    crm: &Crm,
    plora: &crate::plora::Plora,
) -> Result<BTreeMap<&'static str, Scored>> {
    let test = prep.modalities(&prep.data.test, &cfg.retrieval)?;
    score_systems(&prep.lm, crm, plora, &test)
}

/// Outcome of one trained and evaluated configuration.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub config_sha256: String,
    pub crm: Crm,
    pub plora: PloraTraining,
    pub metrics: MetricsFile,
    /// Seconds spent in each phase; stage 1 is 0 when reused.
    pub seconds: BTreeMap<String, f64>,
}

/// Runs cells against one prepared run. Stage-1 models are cached by the
/// settings that shape them, so variants that only differ in the adapter or
/// the prompt share one.
pub struct Experiment<'p> {
    prep: &'p Prepared,
    crms: BTreeMap<String, Crm>,
}

impl<'p> Experiment<'p> {
    pub fn new(prep: &'p Prepared) -> Self {
        Self {
            prep,
            crms: BTreeMap::new(),
        }
    }

    pub fn prep(&self) -> &'p Prepared {
        self.prep
    }

    fn stage1_key(cfg: &PipelineConfig) -> String {
        cfg.entries()
            .into_iter()
            .filter(|(k, _)| {
                ["seed.", "crm.", "stage1."].iter().any(|p| k.starts_with(p))
                    || ["retrieval.k_long", "retrieval.long_retriever"].contains(k)
            })
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Registers an already trained stage-1 model for `cfg`.
    pub fn insert_crm(&mut self, cfg: &PipelineConfig, crm: Crm) {
        self.crms.insert(Self::stage1_key(cfg), crm);
    }

    /// The cached stage-1 model for `cfg`, training it on first use.
    pub fn stage1(&mut self, cfg: &PipelineConfig) -> Result<(Crm, bool)> {
        cfg.check_prepared(&self.prep.cfg)?;
        let key = Self::stage1_key(cfg);
        if let Some(c) = self.crms.get(&key) {
            return Ok((c.clone(), true));
        }
        let crm = train_crm_on(self.prep, cfg, &self.prep.data.train)?.crm;
        self.crms.insert(key, crm.clone());
        Ok((crm, false))
    }

    pub fn run(&mut self, cfg: &PipelineConfig) -> Result<CellRun> {
        cfg.validate()?;
        let t = Instant::now();
        let (crm, cached) = self.stage1(cfg)?;
        let s1 = if cached { 0.0 } else { t.elapsed().as_secs_f64() };
        let t = Instant::now();
        let plora = tune_plora(self.prep, cfg, &crm)?;
        let s2 = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let config_sha256 = cfg.hash();
        let metrics = MetricsFile::from_scores(&config_sha256, &test_scores(self.prep, cfg, &crm, &plora.plora)?)?;
        let seconds = BTreeMap::from([
            ("stage1".to_string(), s1),
            ("stage2".to_string(), s2),
            ("eval".to_string(), t.elapsed().as_secs_f64()),
        ]);
        Ok(CellRun {
            config_sha256,
            crm,
            plora,
            metrics,
            seconds,
        })
    }
}
