//! Orchestration shared by the subcommands: each one is a thin wrapper that
//! loads the dataset, runs one library operation and writes delimited-text
//! reports into the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use stcl::augment::AugmentConfig;
use stcl::checkpoint::Checkpoint;
use stcl::contrast::ContrastConfig;
use stcl::data::{load_dataset, save_dataset, Dataset, Split, ValuesFormat};
use stcl::encoder::{EncoderConfig, EncoderParams};
use stcl::error::{Error, Result};
use stcl::evaluate::{
    embed_all, embed_export, fnp_audit, label_fraction_protocol, linear_probe, EvalSplits,
    FnpRates, FnpReport, NegativePolicy, ProbeResult,
};
use stcl::stationarity::{assess_dataset, ChannelAdf, StationarityLabel};
use stcl::train::{batch_schedule, cached_assessment, pretrain, resume, TrainConfig, TrainRun};

use crate::config::RunConfig;

pub struct Context {
    pub cfg: RunConfig,
    pub config_dir: PathBuf,
    pub out_root: PathBuf,
    pub run_dir: PathBuf,
    pub manifest_override: Option<PathBuf>,
}

impl Context {
    pub fn new(
        config_path: &Path,
        seed_override: Option<u64>,
        out_root: &Path,
        manifest_override: Option<PathBuf>,
    ) -> Result<Self> {
        let cfg = RunConfig::load(config_path, seed_override)?;
        let config_dir = config_path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let run_dir = out_root.join(cfg.run_dir_name()?);
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
        let resolved = run_dir.join("resolved.toml");
        fs::write(&resolved, cfg.to_toml()?)
            .map_err(|e| Error::io(resolved.display().to_string(), e))?;
        Ok(Context {
            cfg,
            config_dir,
            out_root: out_root.to_path_buf(),
            run_dir,
            manifest_override,
        })
    }

    pub fn manifest_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.manifest_override {
            return Ok(p.clone());
        }
        match &self.cfg.data.manifest {
            Some(rel) => Ok(self.config_dir.join(rel)),
            None => Err(Error::config(
                "no dataset manifest: set [data].manifest or pass --manifest",
            )),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset<f64>> {
        let path = self.manifest_path()?;
        if !path.exists() {
            return Err(Error::config(format!(
                "manifest not found: {}",
                path.display()
            )));
        }
        load_dataset::<f64>(&path)
    }

    pub fn states(&self, dataset: &Dataset<f64>) -> Result<Vec<StationarityLabel>> {
        cached_assessment(
            dataset,
            self.cfg.contrast.adf_threshold,
            self.cfg.contrast.adf_lag_option(),
            &self.out_root.join("adf-cache"),
        )
    }

    pub fn encoder_config(&self, dataset: &Dataset<f64>) -> EncoderConfig {
        self.cfg.encoder.to_config(dataset.channels)
    }

    pub fn contrast_config(&self, dataset: &Dataset<f64>) -> ContrastConfig<f64> {
        self.cfg.contrast.to_config(longest_recording(dataset))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        self.cfg.augment.to_config()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.cfg.train.to_config(self.cfg.seed)
    }
}

/// Default temporal horizon: the longest recording in the dataset.
pub fn longest_recording(dataset: &Dataset<f64>) -> usize {
    let mut counts = vec![0usize; dataset.recording_count()];
    for s in &dataset.segments {
        counts[s.recording] += 1;
    }
    counts.into_iter().max().unwrap_or(1)
}

fn require_labels(dataset: &Dataset<f64>) -> Result<Vec<usize>> {
    dataset
        .segments
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::config(format!(
                    "segment {} has no class label; this operation needs labeled data",
                    s.id
                ))
            })
        })
        .collect()
}

fn load_params(path: &Path) -> Result<(EncoderParams<f64>, u32)> {
    if !path.exists() {
        return Err(Error::config(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    let ckpt: Checkpoint<f64> = Checkpoint::load(path)?;
    Ok((
        EncoderParams {
            tensors: ckpt.params,
        },
        ckpt.epochs_done,
    ))
}

fn write_report(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

// ───────────────────────── subcommands ─────────────────────────

pub fn cmd_gen_synth(ctx: &Context, binary_values: bool) -> Result<()> {
    let synth = ctx.cfg.data.synth.as_ref().ok_or_else(|| {
        Error::config("gen-synth needs a [data.synth] section in the config")
    })?;
    let spec = synth.to_spec(ctx.cfg.seed)?;
    let dataset = stcl::data::gen_synthetic::<f64>(&spec)?;
    let format = if binary_values {
        ValuesFormat::Binary
    } else {
        ValuesFormat::Text
    };
    let manifest = save_dataset(&dataset, &ctx.run_dir, format)?;
    println!(
        "wrote {} segments ({} recordings) to {}",
        dataset.segments.len(),
        dataset.recording_count(),
        manifest.display()
    );
    Ok(())
}

pub fn cmd_adf(ctx: &Context) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let assessed = assess_dataset(
        &dataset.segments,
        ctx.cfg.contrast.adf_threshold,
        ctx.cfg.contrast.adf_lag_option(),
    )?;

    let mut body = String::from("id");
    for c in 0..dataset.channels {
        body.push_str(&format!("\tp_ch{}", c));
    }
    body.push_str("\tstate\n");
    for (seg, a) in dataset.segments.iter().zip(&assessed.segments) {
        body.push_str(&seg.id.to_string());
        for ch in &a.channels {
            match ch {
                ChannelAdf::Tested(r) => body.push_str(&format!("\t{}", r.p_value)),
                ChannelAdf::Degenerate => body.push_str("\tdegenerate"),
            }
        }
        body.push_str(&format!("\t{}\n", a.label.state()));
    }
    write_report(&ctx.run_dir.join("adf_report.tsv"), &body)?;

    let s = &assessed.summary;
    let fmt_ratio =
        |r: &Option<f64>| r.map(|v| v.to_string()).unwrap_or_else(|| "undef".into());
    let mut sum = String::from("class\tn_stationary\tn_non_stationary\tratio\n");
    sum.push_str(&format!(
        "all\t{}\t{}\t{}\n",
        s.n_stationary,
        s.n_non_stationary,
        fmt_ratio(&s.overall_ratio)
    ));
    for c in &s.per_class {
        sum.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            c.class,
            c.n_stationary,
            c.n_non_stationary,
            fmt_ratio(&c.ratio)
        ));
    }
    write_report(&ctx.run_dir.join("adf_summary.tsv"), &sum)?;
    println!(
        "assessed {} segments: {} stationary, {} non-stationary (reports in {})",
        dataset.segments.len(),
        s.n_stationary,
        s.n_non_stationary,
        ctx.run_dir.display()
    );
    Ok(())
}

pub fn cmd_pretrain(ctx: &Context, resume_from: Option<&Path>) -> Result<TrainRun<f64>> {
    let dataset = ctx.load_dataset()?;
    let states = ctx.states(&dataset)?;
    let enc = ctx.encoder_config(&dataset);
    let aug = ctx.augment_config();
    let con = ctx.contrast_config(&dataset);
    let tr = ctx.train_config();
    let run = match resume_from {
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(Error::config(format!(
                    "checkpoint not found: {}",
                    ckpt.display()
                )));
            }
            resume(ckpt, &dataset, &states, &enc, &aug, &con, &tr, Some(&ctx.run_dir))?
        }
        None => pretrain(&dataset, &states, &enc, &aug, &con, &tr, Some(&ctx.run_dir))?,
    };
    let last = run.log.last();
    println!(
        "trained {} epochs (final loss {}); checkpoint at {}",
        run.epochs_done,
        last.map(|s| s.loss.to_string()).unwrap_or_else(|| "-".into()),
        ctx.run_dir.join("ckpt-final.bin").display()
    );
    Ok(run)
}

fn probe_report_body(result: &ProbeResult) -> String {
    let mut body = String::from("metric\tvalue\n");
    body.push_str(&format!("accuracy\t{}\n", result.accuracy));
    body.push_str(&format!("macro_f1\t{}\n", result.macro_f1));
    body.push_str(&format!("macro_recall\t{}\n", result.macro_recall));
    body.push_str(&format!("auprc\t{}\n", result.auprc));
    body.push_str("\nclass\tsupport\tprecision\trecall\tf1\tauprc\tdefined\n");
    for c in &result.per_class {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.class, c.support, c.precision, c.recall, c.f1, c.auprc, c.defined
        ));
    }
    body
}

pub fn cmd_probe(ctx: &Context, ckpt: &Path) -> Result<ProbeResult> {
    let dataset = ctx.load_dataset()?;
    let labels = require_labels(&dataset)?;
    let (params, _) = load_params(ckpt)?;
    let enc = ctx.encoder_config(&dataset);
    params.check_shapes(&enc)?;
    let emb = embed_all(&enc, &params, &dataset, 256)?;
    let splits = EvalSplits::from_dataset(&dataset);
    let result = linear_probe(
        &emb,
        &labels,
        &splits,
        ctx.cfg.seed,
        &ctx.cfg.eval.probe_config(),
    )?;
    write_report(&ctx.run_dir.join("probe_report.tsv"), &probe_report_body(&result))?;
    println!(
        "probe: accuracy {:.4} MF1 {:.4} MAR {:.4} AUPRC {:.4}",
        result.accuracy, result.macro_f1, result.macro_recall, result.auprc
    );
    Ok(result)
}

pub fn full_schedule(dataset: &Dataset<f64>, tr: &TrainConfig) -> Vec<Vec<usize>> {
    let train_idx = dataset.split_segments(Split::Train);
    let mut schedule = Vec::new();
    for epoch in 0..tr.epochs {
        schedule.extend(batch_schedule(
            &train_idx,
            tr.batch_size,
            tr.seed,
            epoch as u64,
            tr.shuffle,
        ));
    }
    schedule
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_else(|| "undef".into())
}

fn fnp_row(rates: &FnpRates) -> String {
    format!(
        "{}\t{}\t{}",
        fmt_rate(rates.hard_fnp_rate),
        fmt_rate(rates.weighted_fnp_mass),
        fmt_rate(rates.combined_rate)
    )
}

pub fn cmd_fnp_report(ctx: &Context) -> Result<(FnpReport, FnpReport)> {
    let dataset = ctx.load_dataset()?;
    require_labels(&dataset)?;
    let states = ctx.states(&dataset)?;
    let con = ctx.contrast_config(&dataset);
    let tr = ctx.train_config();
    let schedule = full_schedule(&dataset, &tr);
    let meta = dataset.meta();
    let sa = fnp_audit(&meta, &states, &con, &schedule, NegativePolicy::StateAware)?;
    let rn = fnp_audit(&meta, &states, &con, &schedule, NegativePolicy::RandomAll)?;

    let mut body = String::from(
        "batch\tsa_hard\tsa_weighted\tsa_combined\trand_hard\trand_weighted\trand_combined\n",
    );
    for (a, b) in sa.per_batch.iter().zip(&rn.per_batch) {
        body.push_str(&format!(
            "{}\t{}\t{}\n",
            a.batch_index,
            fnp_row(&a.rates),
            fnp_row(&b.rates)
        ));
    }
    body.push_str(&format!(
        "pooled\t{}\t{}\n",
        fnp_row(&sa.pooled),
        fnp_row(&rn.pooled)
    ));
    body.push_str(&format!(
        "batch_mean\t{}\t{}\n",
        fnp_row(&sa.batch_mean),
        fnp_row(&rn.batch_mean)
    ));
    write_report(&ctx.run_dir.join("fnp_report.tsv"), &body)?;
    println!(
        "fnp (pooled): state-aware hard {} combined {} | random combined {}",
        fmt_rate(sa.pooled.hard_fnp_rate),
        fmt_rate(sa.pooled.combined_rate),
        fmt_rate(rn.pooled.combined_rate)
    );
    Ok((sa, rn))
}

pub fn cmd_label_curve(ctx: &Context, ckpt: &Path) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let labels = require_labels(&dataset)?;
    let (params, _) = load_params(ckpt)?;
    let enc = ctx.encoder_config(&dataset);
    params.check_shapes(&enc)?;
    let emb = embed_all(&enc, &params, &dataset, 256)?;
    let splits = EvalSplits::from_dataset(&dataset);
    let outcomes = label_fraction_protocol(
        &emb,
        &labels,
        &splits,
        &ctx.cfg.eval.fractions,
        ctx.cfg.seed,
        &ctx.cfg.eval.probe_config(),
    )?;

    let mut body = String::from("fraction\ttrain_size\taccuracy\tmacro_f1\tmacro_recall\tauprc\n");
    for o in &outcomes {
        let size: usize = o.per_class_counts.iter().map(|(_, n)| n).sum();
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            o.fraction, size, o.probe.accuracy, o.probe.macro_f1, o.probe.macro_recall, o.probe.auprc
        ));
    }
    // trend note: flag fractions whose accuracy beats a larger fraction by
    // more than 5 points
    let mut inversions = Vec::new();
    for i in 0..outcomes.len() {
        for j in 0..outcomes.len() {
            if outcomes[i].fraction < outcomes[j].fraction
                && outcomes[i].probe.accuracy > outcomes[j].probe.accuracy + 0.05
            {
                inversions.push(format!(
                    "{}>{}",
                    outcomes[i].fraction, outcomes[j].fraction
                ));
            }
        }
    }
    if inversions.is_empty() {
        body.push_str("# trend: monotone within 5 accuracy points\n");
    } else {
        body.push_str(&format!("# trend: inversions {}\n", inversions.join(",")));
    }
    write_report(&ctx.run_dir.join("label_curve.tsv"), &body)?;
    for o in &outcomes {
        println!("fraction {:>5}: accuracy {:.4}", o.fraction, o.probe.accuracy);
    }
    Ok(())
}

pub fn cmd_embed(ctx: &Context, ckpt: &Path) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let (params, _) = load_params(ckpt)?;
    let enc = ctx.encoder_config(&dataset);
    params.check_shapes(&enc)?;
    let out = ctx.run_dir.join("embeddings.tsv");
    embed_export(&enc, &params, &dataset, &out)?;
    println!("wrote {} rows to {}", dataset.segments.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Beta,
    AdfThreshold,
}

pub fn cmd_grid(ctx: &Context, sweep: SweepKind) -> Result<()> {
    let (values, sweep_name): (Vec<f64>, &str) = match sweep {
        SweepKind::Beta => (ctx.cfg.eval.beta_grid.clone(), "beta"),
        SweepKind::AdfThreshold => (ctx.cfg.eval.adf_threshold_grid.clone(), "adf-threshold"),
    };
    if values.is_empty() {
        return Err(Error::config("the configured grid is empty"));
    }
    let mut body = String::from(
        "value\trun_dir\taccuracy\tmacro_f1\tmacro_recall\tauprc\thard_fnp\tcombined_fnp\n",
    );
    for &v in &values {
        let mut child_cfg = ctx.cfg.clone();
        match sweep {
            SweepKind::Beta => child_cfg.contrast.beta = v,
            SweepKind::AdfThreshold => child_cfg.contrast.adf_threshold = v,
        }
        let child_dir = ctx.out_root.join(child_cfg.run_dir_name()?);
        fs::create_dir_all(&child_dir)
            .map_err(|e| Error::io(child_dir.display().to_string(), e))?;
        let resolved = child_dir.join("resolved.toml");
        fs::write(&resolved, child_cfg.to_toml()?)
            .map_err(|e| Error::io(resolved.display().to_string(), e))?;
        let child = Context {
            cfg: child_cfg,
            config_dir: ctx.config_dir.clone(),
            out_root: ctx.out_root.clone(),
            run_dir: child_dir.clone(),
            manifest_override: ctx.manifest_override.clone(),
        };
        println!("grid value {} -> {}", v, child_dir.display());
        cmd_pretrain(&child, None)?;
        let probe = cmd_probe(&child, &child_dir.join("ckpt-final.bin"))?;
        let (sa, _) = cmd_fnp_report(&child)?;
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            v,
            child_dir.display(),
            probe.accuracy,
            probe.macro_f1,
            probe.macro_recall,
            probe.auprc,
            fmt_rate(sa.pooled.hard_fnp_rate),
            fmt_rate(sa.pooled.combined_rate)
        ));
    }
    // the summary lives in its own directory so it never collides with the
    // grid point whose value equals the base config
    let summary_dir = ctx
        .out_root
        .join(format!("{}-grid-{}", ctx.cfg.run_dir_name()?, sweep_name));
    fs::create_dir_all(&summary_dir)
        .map_err(|e| Error::io(summary_dir.display().to_string(), e))?;
    let out = summary_dir.join("grid_summary.tsv");
    write_report(&out, &body)?;
    println!("grid summary at {}", out.display());
    Ok(())
}
