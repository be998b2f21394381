use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares tape gradients with central differences at `probes` random
/// coordinates of the trainable entries of `store`.
///
/// Probes cycle through the trainable entries in name order so every entry
/// is visited; the coordinate inside an entry is drawn uniformly. The
/// relative error is `|analytic − fd| / (|fd| + 1e-8)`.
pub fn gradcheck<F>(
    store: &ParamStore,
    probes: usize,
    h: f64,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, out) = loss(store)?;
    let grads = tape.backward(out)?;
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable && !p.value.is_empty())
        .map(|(n, _)| n.to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::State("gradcheck with no trainable parameters".into()));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = Vec::with_capacity(probes);
    for i in 0..probes {
        let name = &names[i % names.len()];
        let len = work.value(name)?.len();
        let index = rng.random_range(0..len);
        let orig = work.value(name)?.data()[index];

        work.value_mut(name)?.data_mut()[index] = orig + h;
        let (t, v) = loss(&work)?;
        let plus = t.scalar(v);
        work.value_mut(name)?.data_mut()[index] = orig - h;
        let (t, v) = loss(&work)?;
        let minus = t.scalar(v);
        work.value_mut(name)?.data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[index]);
        report.push(Probe {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / (numeric.abs() + 1e-8),
        });
    }
    Ok(GradCheckReport { probes: report })
}
