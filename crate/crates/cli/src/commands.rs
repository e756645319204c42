use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use msfft::config::{BlockKind, FusionMode, Precision, Variant};
use msfft::model::expected_param_count;
use msfft::signals::{generate_dataset, load_wav, save_wav, DatasetManifest, DatasetSpec, WavEncoding};
use msfft::trainer::{
    bench as run_bench, evaluate, read_metrics, train as run_train, BenchVariant, Checkpoint, CheckpointHeader,
    Estimator, EvalTable, TrainOptions, Trainer,
};
use msfft::{MixtureExample, Preset, RunConfig, Scalar, Separator, SeparatorConfig, Waveform};

use crate::plot;
use crate::{BenchArgs, ConfigArgs, EvalArgs, PlotArgs, SeparateArgs, SynthArgs, TrainArgs};

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 2 for usage errors and incompatible inputs, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<msfft::Error>() {
            return match e {
                msfft::Error::InvalidArgument(_) | msfft::Error::ConfigMismatch(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        return RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())));
    }
    let preset = match &args.preset {
        Some(name) => name.parse::<Preset>().map_err(|e| usage(e.to_string()))?,
        None => Preset::Msfft2pTiny,
    };
    Ok(preset.run_config())
}

fn load_examples(path: &Path) -> Result<Vec<MixtureExample>> {
    require_file(path, "manifest")?;
    let manifest = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(manifest.examples()?)
}

fn write_table(table: &EvalTable, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.tsv")), table.to_tsv())?;
    fs::write(dir.join(format!("{stem}.json")), table.to_json())?;
    Ok(())
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_examples: a.n,
        sources: a.sources as usize,
        snr_range_db: (a.snr[0], a.snr[1]),
        duration_s: (a.duration[0], a.duration[1]),
        sample_rate: a.sample_rate,
        seed: a.seed,
        split: a.split.parse().map_err(|e: msfft::Error| usage(e.to_string()))?,
        kind: a.kind.parse().map_err(|e: msfft::Error| usage(e.to_string()))?,
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} mixtures to {}",
        manifest.len(),
        a.out.join(format!("{}.jsonl", spec.split)).display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.precision {
        cfg.train.precision = v;
    }
    if let Some(p) = &a.train_manifest {
        cfg.data.train_manifest = Some(p.clone());
    }
    if let Some(p) = &a.valid_manifest {
        cfg.data.valid_manifest = Some(p.clone());
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let train_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| usage("no training manifest (flag --train-manifest or [data] train_manifest)"))?;
    let valid_path = cfg
        .data
        .valid_manifest
        .clone()
        .ok_or_else(|| usage("no validation manifest (flag --valid-manifest or [data] valid_manifest)"))?;
    let train_set = load_examples(&train_path)?;
    let valid_set = load_examples(&valid_path)?;
    fs::create_dir_all(&a.run_dir)?;
    fs::write(a.run_dir.join("config.echo"), cfg.to_toml_string())?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, &a, &train_set, &valid_set),
        Precision::F64 => train_as::<f64>(&cfg, &a, &train_set, &valid_set),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    a: &TrainArgs,
    train_set: &[MixtureExample],
    valid_set: &[MixtureExample],
) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            CheckpointHeader::read(path)?.check_config(&cfg.separator)?;
            let mut t = Trainer::from_checkpoint(Checkpoint::<T>::load(path)?)?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::<T>::new(&cfg.separator, &cfg.train)?,
    };
    let opts = TrainOptions {
        run_dir: Some(a.run_dir.clone()),
        max_steps: a.max_steps,
    };
    let report = run_train(&mut trainer, train_set, valid_set, &opts)?;
    let table = evaluate(&trainer.separator, valid_set)?;
    write_table(&table, &a.run_dir.join("tables"), "valid")?;
    let plots = a.run_dir.join("plots");
    fs::create_dir_all(&plots)?;
    plot::save_curve(&loss_points(&report.records), &plots.join("loss.png"))?;
    println!(
        "trained {} steps over {} epochs; validation SI-SNRi {:.2} dB, SDRi {:.2} dB",
        trainer.step, trainer.epoch, table.mean_si_snri, table.mean_sdri
    );
    if let Some(best) = report.best_checkpoint {
        println!("best checkpoint: {}", best.display());
    }
    Ok(())
}

fn loss_points(records: &[msfft::trainer::MetricRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.kind == "step")
        .filter_map(|r| r.loss.map(|l| (r.step as f64, l)))
        .collect()
}

/// A checkpoint's separator at whichever precision it was stored in.
enum Model {
    F32(Box<Separator<f32>>),
    F64(Box<Separator<f64>>),
}

impl Model {
    fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        require_file(path, "checkpoint")?;
        let header = CheckpointHeader::read(path)?;
        let model = match header.dtype.as_str() {
            "f32" => Model::F32(Box::new(Checkpoint::<f32>::load(path)?.separator)),
            "f64" => Model::F64(Box::new(Checkpoint::<f64>::load(path)?.separator)),
            other => anyhow::bail!("checkpoint stores unsupported dtype {other}"),
        };
        Ok((model, header))
    }

    fn estimator(&self) -> &dyn Estimator {
        match self {
            Model::F32(s) => s.as_ref(),
            Model::F64(s) => s.as_ref(),
        }
    }
}

/// `run/checkpoints/x.ckpt` reports into `run/tables`.
fn default_tables_dir(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    match dir.file_name() {
        Some(n) if n == "checkpoints" => dir.parent().unwrap_or(Path::new(".")).join("tables"),
        _ => dir.join("tables"),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, header) = Model::load(&a.checkpoint)?;
    if a.config.preset.is_some() || a.config.config.is_some() {
        header.check_config(&resolve_config(&a.config)?.separator)?;
    }
    let examples = load_examples(&a.manifest)?;
    let table = evaluate(model.estimator(), &examples)?;
    let out = a.out.unwrap_or_else(|| default_tables_dir(&a.checkpoint));
    write_table(&table, &out, "eval")?;
    println!(
        "{} examples: SI-SNRi {:.2} dB, SDRi {:.2} dB ({})",
        table.rows.len(),
        table.mean_si_snri,
        table.mean_sdri,
        out.join("eval.tsv").display()
    );
    Ok(())
}

pub fn separate(a: SeparateArgs) -> Result<()> {
    let (model, header) = Model::load(&a.checkpoint)?;
    require_file(&a.input, "input")?;
    let mix = load_wav(&a.input)?;
    if mix.sample_rate() != header.config.sample_rate {
        return Err(usage(format!(
            "input is sampled at {} Hz but the model expects {} Hz",
            mix.sample_rate(),
            header.config.sample_rate
        )));
    }
    let outputs = model.estimator().estimate(mix.samples())?;
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| a.input.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("mix");
    for (c, samples) in outputs.into_iter().enumerate() {
        let path = dir.join(format!("{stem}.sep{}.wav", c + 1));
        save_wav(&Waveform::new(samples, mix.sample_rate())?, &path, WavEncoding::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Named bench variants derived from a base preset.
fn bench_variant(name: &str, base: Preset) -> Result<SeparatorConfig> {
    if let Ok(p) = name.parse::<Preset>() {
        return Ok(p.separator());
    }
    let b = base.separator();
    let two = SeparatorConfig {
        variant: Variant::Msfft2p,
        fusion: FusionMode::Concat,
        stages: b.stages + b.stages % 2,
        ..b.clone()
    };
    let three = SeparatorConfig {
        variant: Variant::Msfft3p,
        stages: Preset::Msfft3pTiny.separator().stages.max(b.stages),
        exchange_stage: Preset::Msfft3pTiny.separator().exchange_stage,
        ..b.clone()
    };
    let recurrent = |c: SeparatorConfig| SeparatorConfig {
        block: BlockKind::Recurrent,
        ..c
    };
    Ok(match name {
        "msfft2p" => two,
        "msfft2p-sum" => SeparatorConfig {
            fusion: FusionMode::Sum,
            ..two
        },
        "msfft3p" => three,
        "single-path" => SeparatorConfig {
            variant: Variant::SinglePath,
            ..b
        },
        "recurrent-2p" => recurrent(two),
        "recurrent-3p" => recurrent(three),
        other => return Err(usage(format!("unknown bench variant {other}"))),
    })
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.variants.len() < 2 {
        return Err(usage("bench needs at least two variants"));
    }
    let base: Preset = a.base.parse().map_err(|e: msfft::Error| usage(e.to_string()))?;
    let variants = a
        .variants
        .iter()
        .map(|name| {
            let config = bench_variant(name, base)?;
            config.validate().map_err(|e| usage(format!("variant {name}: {e}")))?;
            Ok(BenchVariant {
                name: name.clone(),
                config,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let examples = match &a.manifest {
        Some(path) => load_examples(path)?,
        None => {
            let spec = DatasetSpec {
                n_examples: a.n,
                duration_s: (a.duration, a.duration),
                seed: 7,
                ..DatasetSpec::default()
            };
            (0..a.n).map(|i| spec.example(i)).collect::<msfft::Result<Vec<_>>>()?
        }
    };
    let train_cfg = msfft::TrainConfig {
        seed: a.seed,
        batch_size: base.train().batch_size.min(examples.len()),
        ..base.train()
    };
    let rows = run_bench::<f32>(&variants, &train_cfg, &examples, a.steps)?;
    let mut tsv = String::from("variant\tparams\tenumerated\tffn_dim\tsteps\tsteps_per_sec\tfinal_train_si_snri\n");
    for (row, v) in rows.iter().zip(&variants) {
        let enumerated = expected_param_count(&SeparatorConfig {
            ffn_dim: row.ffn_dim,
            ..v.config.clone()
        });
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.4}\n",
            row.name, row.params, enumerated, row.ffn_dim, row.steps, row.steps_per_sec, row.final_train_si_snri
        ));
    }
    print!("{tsv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.tsv"), &tsv)?;
        fs::write(out.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    if a.wavs.is_empty() && a.log.is_none() {
        return Err(usage("nothing to plot: pass --wav and/or --log"));
    }
    for w in &a.wavs {
        require_file(w, "wav")?;
    }
    if let Some(log) = &a.log {
        require_file(log, "metrics log")?;
    }
    fs::create_dir_all(&a.out)?;
    for w in &a.wavs {
        let wave = load_wav(w)?;
        let stem = w.file_stem().and_then(|s| s.to_str()).unwrap_or("wav");
        let path = a.out.join(format!("{stem}.png"));
        plot::save_spectrogram(wave.samples(), &path)?;
        println!("{}", path.display());
    }
    if let Some(log) = &a.log {
        let records = read_metrics(log)?;
        let path = a.out.join("loss.png");
        plot::save_curve(&loss_points(&records), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn show_config(a: ConfigArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    print!("{}", cfg.to_toml_string());
    let row = cfg.separator.table_row();
    let names = ["E", "D", "N_intra", "N_inter", "N", "M", "stride", "J", "K", "DFF"];
    let cells: Vec<String> = names.iter().zip(row).map(|(n, v)| format!("{n}={v}")).collect();
    println!("# {}", cells.join(" "));
    println!("# digest {}", cfg.separator.digest());
    Ok(())
}
