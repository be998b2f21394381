use serde::Serialize;

use super::{rel_impr, CurvePoint, Experiment, MetricsReport};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Component ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// One LoRA pair at the base rank.
    NoMetaLora,
    /// One LoRA pair whose rank is `n_meta · rank`, so the trainable count
    /// matches the bank.
    NoMetaLoraSameParam,
    NoLongRetriever,
    NoShortRetriever,
    NoLongShortRetriever,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoMetaLora,
        Variant::NoMetaLoraSameParam,
        Variant::NoLongRetriever,
        Variant::NoShortRetriever,
        Variant::NoLongShortRetriever,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMetaLora => "no_meta_lora",
            Variant::NoMetaLoraSameParam => "no_meta_lora_same_param",
            Variant::NoLongRetriever => "no_long_retriever",
            Variant::NoShortRetriever => "no_short_retriever",
            Variant::NoLongShortRetriever => "no_long_short_retriever",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{id}`")))
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoMetaLora => c.plora.n_meta = 1,
            Variant::NoMetaLoraSameParam => {
                c.plora.rank *= c.plora.n_meta;
                c.plora.n_meta = 1;
            }
            Variant::NoLongRetriever => c.retrieval.long_retriever = false,
            Variant::NoShortRetriever => c.retrieval.short_retriever = false,
            Variant::NoLongShortRetriever => {
                c.retrieval.long_retriever = false;
                c.retrieval.short_retriever = false;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_sha256: String,
    #[serde(flatten)]
    pub report: MetricsReport,
    /// `100 · (variant − full) / full` on AUC.
    pub rel_decr: f64,
}

/// Trains and evaluates each variant with the same budget. The full model is
/// always trained since every row is relative to it.
pub fn run_ablation(exp: &mut Experiment<'_>, base: &PipelineConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let full = exp.run(&Variant::Full.apply(base))?;
    let full_auc = full.metrics.primary.auc;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let run = if v == Variant::Full {
            full.clone()
        } else {
            exp.run(&v.apply(base))?
        };
        rows.push(AblationRow {
            variant: v.id().to_string(),
            config_sha256: run.config_sha256,
            rel_decr: rel_impr(run.metrics.primary.auc, full_auc)?,
            report: run.metrics.primary,
        });
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<26} {:>8} {:>9} {:>9}\n", "variant", "AUC", "LogLoss", "Rel.Decr");
    for r in rows {
        s.push_str(&format!(
            "{:<26} {:>8.4} {:>9.4} {:>8.2}%\n",
            r.variant, r.report.auc, r.report.log_loss, r.rel_decr
        ));
    }
    s
}

pub const DEFAULT_N_META_GRID: [usize; 5] = [1, 2, 4, 8, 16];

/// Independent stage-2 runs per bank size over one shared stage-1 model.
pub fn sweep_n_meta(exp: &mut Experiment<'_>, base: &PipelineConfig, values: &[usize]) -> Result<Vec<CurvePoint>> {
    values
        .iter()
        .map(|&n| {
            let mut c = base.clone();
            c.plora.n_meta = n;
            let run = exp.run(&c)?;
            Ok(CurvePoint {
                x: n,
                auc: run.metrics.primary.auc,
                variant: "n_meta".into(),
                seed: c.seeds.sampling,
                config_sha256: run.config_sha256,
            })
        })
        .collect()
}

/// AUC against few-shot size for the full model and the single-LoRA
/// variant. Sizes must be strictly ascending.
pub fn sample_efficiency(exp: &mut Experiment<'_>, base: &PipelineConfig, sizes: &[usize]) -> Result<Vec<CurvePoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Domain("few-shot sizes must be positive and strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(2 * sizes.len());
    for &n in sizes {
        for v in [Variant::Full, Variant::NoMetaLora] {
            let mut c = v.apply(base);
            c.fewshot_n = n;
            let run = exp.run(&c)?;
            out.push(CurvePoint {
                x: n,
                auc: run.metrics.primary.auc,
                variant: v.id().into(),
                seed: c.seeds.sampling,
                config_sha256: run.config_sha256,
            });
        }
    }
    Ok(out)
}
