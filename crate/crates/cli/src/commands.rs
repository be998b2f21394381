use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use plora::crm::Crm;
use plora::evaluation::{
    ablation_table, curve_csv, run_ablation, sample_efficiency, sweep_n_meta, test_scores, timing_harness,
    timing_table, train_crm_on, tune_plora, CurvePoint, Experiment, MetricsFile, TimingOptions, Variant,
};
use plora::pipeline::{
    init_plora, load_into, save_checkpoint, EpochLog, PipelineConfig, Prepared, RunDir, RunManifest, CONFIG,
    CRM_CKPT, METRICS, PLORA_CKPT,
};
use plora::plora::Plora;
use plora::{Error, Result};
use serde::Serialize;

use crate::{Cli, Cmd, SweepArgs, TimingArgs};

const ABLATION_JSON: &str = "ablation.json";
const ABLATION_TXT: &str = "ablation.txt";
const SWEEP_CSV: &str = "sweep_n_meta.csv";
const CURVE_CSV: &str = "sample_efficiency.csv";
const TIMING_JSON: &str = "timing.json";
const TIMING_TXT: &str = "timing.txt";

type Failure = (&'static str, Error);

trait At<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> At<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|e| (stage, e))
    }
}

pub fn run(cli: &Cli, over: &[(String, String)]) -> std::result::Result<(), Failure> {
    if let Cmd::Prepare { force } = cli.command {
        return prepare(cli, over, force);
    }
    let run = RunDir::open(&cli.run_dir).at("open run")?;
    let (prep, manifest) = run.load_prepared().at("load run")?;
    let cfg = resolve(prep.cfg.clone(), cli.config.as_deref(), over).at("config")?;
    cfg.check_prepared(&prep.cfg).at("config")?;
    let mut ctx = Ctx {
        run,
        manifest,
        prep,
        cfg,
    };
    match &cli.command {
        Cmd::Prepare { .. } => unreachable!("handled above"),
        Cmd::Train { stage } => {
            if stage != "2" {
                ctx.stage1().at("train stage 1")?;
            }
            if stage != "1" {
                ctx.stage2().at("train stage 2")?;
            }
            Ok(())
        }
        Cmd::Eval { wall_clock } => ctx.eval(*wall_clock).at("eval"),
        Cmd::Ablate(a) => ctx.ablate(&a.variants).at("ablate"),
        Cmd::Sweep(a) => ctx.sweep(a).at("sweep"),
        Cmd::Timing(a) => ctx.timing(a).at("timing"),
        Cmd::Report => ctx.report().at("report"),
    }
}

/// `base`, then the config file, then flag overrides.
fn resolve(base: PipelineConfig, file: Option<&Path>, over: &[(String, String)]) -> Result<PipelineConfig> {
    let mut cfg = base;
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_kv(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Config(format!("{}:{line}: {msg}", p.display())),
            e => e,
        })?;
    }
    for (k, v) in over {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(cli: &Cli, over: &[(String, String)], force: bool) -> std::result::Result<(), Failure> {
    let cfg = resolve(PipelineConfig::default(), cli.config.as_deref(), over).at("config")?;
    let run = RunDir::create(&cli.run_dir, force).at("prepare")?;
    let t = Instant::now();
    let prep = Prepared::new(&cfg).at("prepare")?;
    run.save_prepared(&prep).at("prepare")?;
    let d = &prep.data;
    eprintln!(
        "prepared {} in {:.1}s: {} / {} / {} samples, {} tokens, {} users indexed",
        run.path.display(),
        t.elapsed().as_secs_f64(),
        d.train.len(),
        d.valid.len(),
        d.test.len(),
        prep.vocab.len(),
        prep.index.len()
    );
    Ok(())
}

fn log_epochs(stage: &str, epochs: &[EpochLog], best: Option<usize>) {
    for (i, e) in epochs.iter().enumerate() {
        let auc = e.valid_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let mark = if best == Some(i) { " *" } else { "" };
        eprintln!("{stage} epoch {i}: loss {:.5} valid auc {auc}{mark}", e.train_loss);
    }
}

#[derive(Serialize)]
struct CurveCell<'a> {
    x: usize,
    variant: &'a str,
    auc: f64,
    config_sha256: &'a str,
}

struct Ctx {
    run: RunDir,
    manifest: RunManifest,
    prep: Prepared,
    cfg: PipelineConfig,
}

impl Ctx {
    fn save(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.run.write(name, bytes)?;
        self.run.record(&mut self.manifest, name)
    }

    fn commit(&mut self) -> Result<()> {
        let text = self.cfg.to_kv();
        self.save(CONFIG, text.as_bytes())?;
        self.run.write_manifest(&self.manifest)
    }

    fn load_crm(&self) -> Result<Crm> {
        self.run.verify(&self.manifest, CRM_CKPT).map_err(|e| match e {
            Error::Dependency(m) => Error::Dependency(format!("{m}; run `train --stage 1` first")),
            e => e,
        })?;
        let mut crm = Crm::init(self.prep.crm_config(&self.cfg), self.cfg.seeds.model)?;
        load_into(&mut crm.params, &self.run.file(CRM_CKPT))?;
        Ok(crm)
    }

    fn load_plora(&self, crm: &Crm) -> Result<Plora> {
        self.run.verify(&self.manifest, PLORA_CKPT).map_err(|e| match e {
            Error::Dependency(m) => Error::Dependency(format!("{m}; run `train --stage 2` first")),
            e => e,
        })?;
        let mut p = init_plora(&self.prep.lm, &self.cfg, crm.cfg.d_c())?;
        load_into(&mut p.params, &self.run.file(PLORA_CKPT))?;
        Ok(p)
    }

    /// Drops an artifact and its manifest entry.
    fn invalidate(&mut self, name: &str) -> Result<()> {
        let p = self.run.file(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|source| Error::Io { path: p, source })?;
        }
        self.manifest.entries.remove(&format!("file.{name}"));
        Ok(())
    }

    fn stage1(&mut self) -> Result<()> {
        let t = Instant::now();
        let out = train_crm_on(&self.prep, &self.cfg, &self.prep.data.train)?;
        log_epochs("stage 1", &out.epochs, out.best_epoch);
        save_checkpoint(&out.crm.params, &self.run.file(CRM_CKPT))?;
        self.run.record(&mut self.manifest, CRM_CKPT)?;
        // Everything downstream was built on the previous model.
        self.invalidate(PLORA_CKPT)?;
        self.invalidate(METRICS)?;
        self.manifest.entries.remove("stage.2");
        self.manifest.set("stage.1", "done");
        self.commit()?;
        eprintln!("stage 1 done in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    }

    fn stage2(&mut self) -> Result<()> {
        let t = Instant::now();
        let crm = self.load_crm()?;
        let out = tune_plora(&self.prep, &self.cfg, &crm)?;
        log_epochs("stage 2", &out.epochs, out.best_epoch);
        save_checkpoint(&out.plora.params, &self.run.file(PLORA_CKPT))?;
        self.run.record(&mut self.manifest, PLORA_CKPT)?;
        self.invalidate(METRICS)?;
        self.manifest.set("stage.2", "done");
        self.commit()?;
        eprintln!("stage 2 done in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    }

    fn eval(&mut self, wall_clock: bool) -> Result<()> {
        let crm = self.load_crm()?;
        let plora = self.load_plora(&crm)?;
        let t = Instant::now();
        let scores = test_scores(&self.prep, &self.cfg, &crm, &plora)?;
        let mut m = MetricsFile::from_scores(&self.cfg.hash(), &scores)?;
        if wall_clock {
            m.primary.wall_clock = Some(BTreeMap::from([("eval".to_string(), t.elapsed().as_secs_f64())]));
        }
        self.save(METRICS, m.to_json().as_bytes())?;
        self.run.write_manifest(&self.manifest)?;
        print_metrics(&m);
        Ok(())
    }

    fn ablate(&mut self, ids: &[String]) -> Result<()> {
        let variants = if ids.is_empty() {
            Variant::ALL.to_vec()
        } else {
            ids.iter().map(|s| Variant::from_id(s.trim())).collect::<Result<_>>()?
        };
        let mut exp = Experiment::new(&self.prep);
        let rows = run_ablation(&mut exp, &self.cfg, &variants)?;
        let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
        let table = ablation_table(&rows);
        self.save(ABLATION_JSON, json.as_bytes())?;
        self.save(ABLATION_TXT, table.as_bytes())?;
        self.run.write_manifest(&self.manifest)?;
        print!("{table}");
        Ok(())
    }

    fn sweep(&mut self, a: &SweepArgs) -> Result<()> {
        let mut exp = Experiment::new(&self.prep);
        let (points, name): (Vec<CurvePoint>, &str) = if a.fewshot_sizes.is_empty() {
            (sweep_n_meta(&mut exp, &self.cfg, &a.values)?, SWEEP_CSV)
        } else {
            (sample_efficiency(&mut exp, &self.cfg, &a.fewshot_sizes)?, CURVE_CSV)
        };
        let csv = curve_csv(&points)?;
        let cells: Vec<CurveCell> = points
            .iter()
            .map(|p| CurveCell {
                x: p.x,
                variant: &p.variant,
                auc: p.auc,
                config_sha256: &p.config_sha256,
            })
            .collect();
        let cells = serde_json::to_string_pretty(&cells).expect("cells serialize") + "\n";
        self.save(name, csv.as_bytes())?;
        self.save(&name.replace(".csv", ".cells.json"), cells.as_bytes())?;
        self.run.write_manifest(&self.manifest)?;
        print!("{csv}");
        Ok(())
    }

    fn timing(&mut self, a: &TimingArgs) -> Result<()> {
        let grid = a
            .grid
            .iter()
            .map(|cell| {
                let (t, l) = cell
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("grid cell `{cell}` is not k_text:k_long")))?;
                let num = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("grid cell `{cell}` is not k_text:k_long")))
                };
                Ok((num(t)?, num(l)?))
            })
            .collect::<Result<Vec<_>>>()?;
        // Cost does not depend on trained values, so fall back to fresh models.
        let crm = match self.load_crm() {
            Ok(c) => c,
            Err(Error::Dependency(_)) => Crm::init(self.prep.crm_config(&self.cfg), self.cfg.seeds.model)?,
            Err(e) => return Err(e),
        };
        let plora = match self.load_plora(&crm) {
            Ok(p) => p,
            Err(Error::Dependency(_)) => init_plora(&self.prep.lm, &self.cfg, crm.cfg.d_c())?,
            Err(e) => return Err(e),
        };
        let opts = TimingOptions {
            warmup: a.warmup,
            samples: a.samples,
        };
        let cells = timing_harness(&self.prep, &self.cfg, &crm, &plora, &grid, opts)?;
        let table = timing_table(&cells);
        let json = serde_json::to_string_pretty(&cells).expect("cells serialize") + "\n";
        self.save(TIMING_JSON, json.as_bytes())?;
        self.save(TIMING_TXT, table.as_bytes())?;
        self.run.write_manifest(&self.manifest)?;
        print!("{table}");
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let mut found = false;
        if self.run.file(METRICS).exists() {
            self.run.verify(&self.manifest, METRICS)?;
            print_metrics(&MetricsFile::from_json(&self.run.read_string(METRICS)?)?);
            found = true;
        }
        for (title, name) in [
            ("ablation", ABLATION_TXT),
            ("bank-size sweep", SWEEP_CSV),
            ("sample efficiency", CURVE_CSV),
            ("timing", TIMING_TXT),
        ] {
            if self.run.file(name).exists() {
                self.run.verify(&self.manifest, name)?;
                println!("\n== {title} ==\n{}", self.run.read_string(name)?.trim_end());
                found = true;
            }
        }
        if !found {
            return Err(Error::Dependency(format!(
                "{} holds no reports yet; run eval, ablate, sweep or timing",
                self.run.path.display()
            )));
        }
        Ok(())
    }
}

fn print_metrics(m: &MetricsFile) {
    println!("{:<10} {:>8} {:>9} {:>7}", "system", "AUC", "LogLoss", "n");
    let p = &m.primary;
    println!("{:<10} {:>8.4} {:>9.4} {:>7}", "plora", p.auc, p.log_loss, p.n);
    for (name, r) in &m.baselines {
        let rel = p.rel_impr.get(name).copied().unwrap_or(f64::NAN);
        println!(
            "{:<10} {:>8.4} {:>9.4} {:>7}   plora vs {name}: {rel:+.2}%",
            name, r.auc, r.log_loss, r.n
        );
    }
}
