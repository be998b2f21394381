//! Wall-clock cost of training and inference as the two histories grow.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::crm::Crm;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Tape};
use crate::pipeline::{crm_states, predict_one, sample_loss_on_tape, PipelineConfig, Prepared};
use crate::plora::Plora;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingOptions {
    /// Leading samples whose timings are discarded.
    pub warmup: usize,
    /// Timed samples per cell.
    pub samples: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            samples: 100,
        }
    }
}

/// Grid cells as `(k_text, k_long)`: the ID history grows with the prompt
/// fixed, then the prompt grows with the ID history fixed. The ID history
/// must stay longer than the prompt history, hence the larger fixed value in
/// the second pair.
pub const DEFAULT_TIMING_GRID: [(usize, usize); 4] = [(5, 10), (5, 60), (10, 100), (60, 100)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingCell {
    pub k_text: usize,
    pub k_long: usize,
    pub samples: usize,
    /// Median seconds for one sample's adapter update: recommendation-model
    /// state, forward, backward and optimizer step.
    pub train_seconds: f64,
    /// Median seconds for one sample's score.
    pub infer_seconds: f64,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub tokens_mean: f64,
    pub tokens_total: usize,
    /// Prompt length of each timed sample, in sample order.
    #[serde(skip)]
    pub token_counts: Vec<usize>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 0 {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Samples with enough history for every cell, taken from the test split
/// first, then validation, then training.
fn timing_samples(prep: &Prepared, need_history: usize, n: usize) -> Result<Vec<Sample>> {
    let d = &prep.data;
    let picked: Vec<Sample> = d
        .test
        .iter()
        .chain(&d.valid)
        .chain(&d.train)
        .filter(|s| s.history().len() >= need_history)
        .take(n)
        .cloned()
        .collect();
    if picked.len() < n {
        return Err(Error::Domain(format!(
            "timing needs {n} samples with at least {need_history} prior behaviors, found {}",
            picked.len()
        )));
    }
    Ok(picked)
}

/// Times every grid cell on the same samples. The models' values do not
/// affect the cost, so untrained ones are fine.
pub fn timing_harness(
    prep: &Prepared,
    cfg: &PipelineConfig,
    crm: &Crm,
    plora: &Plora,
    grid: &[(usize, usize)],
    opts: TimingOptions,
) -> Result<Vec<TimingCell>> {
    if opts.samples == 0 {
        return Err(Error::Domain("timing needs at least one timed sample".into()));
    }
    let need = grid.iter().map(|&(t, l)| t.max(l)).max().unwrap_or(0);
    let samples = timing_samples(prep, need, opts.warmup + opts.samples)?;
    let mut out = Vec::with_capacity(grid.len());
    for &(k_text, k_long) in grid {
        let mut r = cfg.retrieval.clone();
        r.k_short = k_text;
        r.k_long = k_long;
        r.validate()?;
        let set = prep.modalities(&samples, &r)?;

        let mut infer = Vec::with_capacity(opts.samples);
        for (i, pair) in set.pairs.iter().enumerate() {
            let t = Instant::now();
            let h = crm_states(crm, std::slice::from_ref(&pair.id))?;
            black_box(predict_one(&prep.lm, plora, &h[0], &pair.text.token_ids)?);
            if i >= opts.warmup {
                infer.push(t.elapsed().as_secs_f64());
            }
        }

        let mut p = plora.clone();
        let mut opt = AdamW::new(1e-3);
        let mut train = Vec::with_capacity(opts.samples);
        for (i, pair) in set.pairs.iter().enumerate() {
            let t = Instant::now();
            let h = crm_states(crm, std::slice::from_ref(&pair.id))?;
            p.params.zero_grad();
            let mut tape = Tape::new();
            let loss = sample_loss_on_tape(&mut tape, &prep.lm, &p, &h[0], &pair.text)?;
            tape.backward_into(loss, &mut p.params)?;
            opt.step(&mut p.params)?;
            if i >= opts.warmup {
                train.push(t.elapsed().as_secs_f64());
            }
        }

        let lens: Vec<usize> = set.pairs[opts.warmup..].iter().map(|p| p.text.token_ids.len()).collect();
        let total: usize = lens.iter().sum();
        out.push(TimingCell {
            k_text,
            k_long,
            samples: opts.samples,
            train_seconds: median(train),
            infer_seconds: median(infer),
            tokens_min: lens.iter().copied().min().unwrap_or(0),
            tokens_max: lens.iter().copied().max().unwrap_or(0),
            tokens_mean: total as f64 / lens.len() as f64,
            tokens_total: total,
            token_counts: lens,
        });
    }
    Ok(out)
}

pub fn timing_table(cells: &[TimingCell]) -> String {
    let mut s = format!(
        "{:>6} {:>6} {:>12} {:>12} {:>8} {:>8}\n",
        "k_text", "k_long", "train s", "infer s", "tok mean", "tok max"
    );
    for c in cells {
        s.push_str(&format!(
            "{:>6} {:>6} {:>12.6} {:>12.6} {:>8.1} {:>8}\n",
            c.k_text, c.k_long, c.train_seconds, c.infer_seconds, c.tokens_mean, c.tokens_max
        ));
    }
    s
}
