use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use tfmixer::checkpoint::Checkpoint;
use tfmixer::data::{gen_synthetic, make_batch, parse_events, pre_align, window_split, write_jsonl, AlignedSample};
use tfmixer::model::{Ablation, Ablations, ModelInput, TfMixer};
use tfmixer::training::{evaluate, historical_mean, predict_samples, train, Metrics};

use crate::config::RunConfig;
use crate::error::{write_err, CliError};
use crate::plot;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Which slice of the dataset a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

pub struct Context {
    pub config: RunConfig,
    pub config_path: PathBuf,
}

impl Context {
    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = &self.config.out_dir;
        fs::create_dir_all(dir).map_err(write_err(dir))?;
        Ok(dir)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out_dir()?.join(name);
        fs::write(&path, contents).map_err(write_err(&path))?;
        Ok(path)
    }

    fn manifest(&self, command: &str, outputs: &[&Path], results: serde_json::Value) -> Result<PathBuf, CliError> {
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_path": self.config_path,
            "config": self.config,
            "outputs": outputs,
            "results": results,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write(&format!("{command}.manifest.json"), text + "\n")
    }

    /// Loads, cuts, aligns and splits the configured dataset.
    fn load_splits(&self) -> Result<Splits, CliError> {
        let (data, path, format) = self.config.data()?;
        let mut samples = parse_events(path, format)?;
        if let Some(t_cut) = data.t_cut {
            samples = samples
                .iter()
                .map(|s| window_split(s, t_cut, data.max_targets))
                .collect::<tfmixer::Result<_>>()?;
        }
        for s in &samples {
            s.validate()?;
        }
        let aligned: Vec<AlignedSample> = samples.iter().map(pre_align).collect();
        let n = aligned.len();
        let n_train = (data.split[0] * n as f64).round() as usize;
        let n_val = ((data.split[1] * n as f64).round() as usize).min(n - n_train);
        let n_variables = aligned.first().map_or(0, |s| s.n_variables);
        let mut rest = aligned;
        let test = rest.split_off(n_train + n_val);
        let val = rest.split_off(n_train);
        Ok(Splits {
            n_variables,
            train: rest,
            val,
            test,
        })
    }

    fn load_checkpoint(&self, path: Option<&Path>) -> Result<Checkpoint, CliError> {
        let default = self.config.out_dir.join(CHECKPOINT_FILE);
        Ok(Checkpoint::load(path.unwrap_or(&default))?)
    }
}

struct Splits {
    n_variables: usize,
    train: Vec<AlignedSample>,
    val: Vec<AlignedSample>,
    test: Vec<AlignedSample>,
}

impl Splits {
    fn get(&self, split: Split) -> Vec<AlignedSample> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
            Split::All => [&self.train[..], &self.val, &self.test].concat(),
        }
    }
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx
        .config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("missing required section `synth`".into()))?;
    let ds = gen_synthetic(cfg)?;
    let path = ctx.out_dir()?.join("data.jsonl");
    write_jsonl(&path, &ds.samples).map_err(|e| match e {
        tfmixer::Error::Io(source) => CliError::Write {
            path: path.clone(),
            source,
        },
        other => other.into(),
    })?;
    let manifest = ctx.manifest(
        "synth",
        &[&path],
        json!({
            "n_samples": ds.samples.len(),
            "n_events": ds.samples.iter().map(|s| s.n_events()).sum::<usize>(),
            "components": cfg.components,
            "truth": ds.truth,
        }),
    )?;
    eprintln!("wrote {} samples to {}", ds.samples.len(), path.display());
    eprintln!("manifest: {}", manifest.display());
    Ok(())
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({ "mse": m.mse, "mae": m.mae, "count": m.count })
}

pub fn train_cmd(ctx: &mut Context) -> Result<(), CliError> {
    let splits = ctx.load_splits()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(CliError::Config(
            "`data.split` leaves an empty train or validation split".into(),
        ));
    }
    let model_cfg = &mut ctx.config.model;
    if model_cfg.n_variables == 0 {
        model_cfg.n_variables = splits.n_variables;
    } else if model_cfg.n_variables != splits.n_variables {
        return Err(tfmixer::Error::DimensionMismatch {
            expected: model_cfg.n_variables,
            found: splits.n_variables,
        }
        .into());
    }
    let tc = ctx.config.train.clone();
    let mut model = TfMixer::new(ctx.config.model.clone(), tc.seed)?;
    eprintln!(
        "training on {} samples ({} validation), {} parameters{}",
        splits.train.len(),
        splits.val.len(),
        model.params.n_scalars(),
        if tc.ablations.is_empty() {
            String::new()
        } else {
            format!(", ablations: {}", tc.ablations.iter().map(Ablation::flag).collect::<Vec<_>>().join(", "))
        }
    );
    let outcome = train(&mut model, &splits.train, &splits.val, &tc, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val mae {:.5}  val mse {:.5}",
            r.epoch, r.train_total, r.val_mae, r.val_mse
        );
    })?;

    let ckpt_path = ctx.out_dir()?.join(CHECKPOINT_FILE);
    Checkpoint::new(&model, &tc.ablations, &outcome.optimizer, outcome.best_epoch)
        .save(&ckpt_path)
        .map_err(|e| match e {
            tfmixer::Error::Io(source) => CliError::Write {
                path: ckpt_path.clone(),
                source,
            },
            other => other.into(),
        })?;
    let mut history = String::from("epoch,train_total,val_mae,val_mse\n");
    for r in &outcome.history {
        writeln!(history, "{},{},{},{}", r.epoch, r.train_total, r.val_mae, r.val_mse).unwrap();
    }
    let history_path = ctx.write("history.csv", history)?;

    let test = if splits.test.is_empty() {
        serde_json::Value::Null
    } else {
        let m = evaluate(&model, &splits.test, &tc.ablations, tc.batch_size)?;
        json!({
            "model": metrics_json(&m),
            "historical_mean": metrics_json(&historical_mean(&splits.test)),
        })
    };
    let manifest = ctx.manifest(
        "train",
        &[&ckpt_path, &history_path],
        json!({
            "model_hash": model.config.hash(),
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.history.len(),
            "stopped_early": outcome.stopped_early,
            "variations": tc.ablations.iter().map(Ablation::variation).collect::<Vec<_>>(),
            "test": test,
        }),
    )?;
    eprintln!("best epoch {}; checkpoint {}", outcome.best_epoch, ckpt_path.display());
    eprintln!("manifest: {}", manifest.display());
    Ok(())
}

/// Loads the checkpoint and dataset shared by the inference commands.
fn inference_setup(
    ctx: &Context,
    checkpoint: Option<&Path>,
    extra: &Ablations,
) -> Result<(TfMixer, Ablations, Splits), CliError> {
    let ckpt = ctx.load_checkpoint(checkpoint)?;
    let mut ablations = ckpt.ablations.clone();
    for a in extra.iter() {
        ablations.insert(a);
    }
    ablations.validate()?;
    let splits = ctx.load_splits()?;
    if splits.n_variables != ckpt.config.n_variables {
        return Err(tfmixer::Error::DimensionMismatch {
            expected: ckpt.config.n_variables,
            found: splits.n_variables,
        }
        .into());
    }
    Ok((ckpt.into_model()?, ablations, splits))
}

pub fn eval(ctx: &Context, checkpoint: Option<&Path>, split: Split, extra: &Ablations) -> Result<(), CliError> {
    let (model, ablations, splits) = inference_setup(ctx, checkpoint, extra)?;
    let samples = splits.get(split);
    if samples.is_empty() {
        return Err(CliError::Config(format!("split `{split:?}` is empty").to_lowercase()));
    }
    let m = evaluate(&model, &samples, &ablations, ctx.config.train.batch_size)?;
    let metrics = json!({
        "split": split,
        "mse": m.mse,
        "mae": m.mae,
        "count": m.count,
        "historical_mean": metrics_json(&historical_mean(&samples)),
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{text}");
    let path = ctx.write("metrics.json", text + "\n")?;
    ctx.manifest("eval", &[&path], metrics)?;
    Ok(())
}

pub fn forecast(ctx: &Context, checkpoint: Option<&Path>, split: Split, extra: &Ablations) -> Result<(), CliError> {
    let (model, ablations, splits) = inference_setup(ctx, checkpoint, extra)?;
    let samples = splits.get(split);
    let preds = predict_samples(&model, &samples, &ablations, ctx.config.train.batch_size)?;
    let mut csv = String::from("sample_id,variable,query_t,prediction\n");
    let mut rows = 0;
    for (s, p) in samples.iter().zip(&preds) {
        for (n, (qs, ys)) in s.queries.iter().zip(p).enumerate() {
            for (q, y) in qs.iter().zip(ys) {
                writeln!(csv, "{},{n},{q},{y}", s.id).unwrap();
                rows += 1;
            }
        }
    }
    let path = ctx.write("forecast.csv", csv)?;
    ctx.manifest("forecast", &[&path], json!({ "split": split, "rows": rows }))?;
    eprintln!("wrote {rows} predictions to {}", path.display());
    Ok(())
}

/// Mean refined spectrum of one split, `N × K` each.
pub struct SpectrumSummary {
    pub frequencies: Vec<f64>,
    pub real: Vec<Vec<f64>>,
    pub imag: Vec<Vec<f64>>,
    pub amplitude: Vec<Vec<f64>>,
}

fn summarize_spectrum(
    model: &TfMixer,
    samples: &[AlignedSample],
    ablations: &Ablations,
    batch_size: usize,
) -> Result<SpectrumSummary, CliError> {
    let (n, k) = (model.config.n_variables, model.config.n_freqs);
    let mut real = vec![vec![0.0; k]; n];
    let mut imag = vec![vec![0.0; k]; n];
    let mut amplitude = vec![vec![0.0; k]; n];
    for chunk in samples.chunks(batch_size.max(1)) {
        let input = ModelInput::from_batch(&make_batch(chunk), &model.config)?;
        let pass = model.run(&input, ablations)?;
        let (re, im) = pass.spectrum.expect("frequency branch present");
        let (re, im) = (pass.graph.value(re).unwrap(), pass.graph.value(im).unwrap());
        for (i, (r, m)) in re.data().iter().zip(im.data()).enumerate() {
            let (ni, ki) = ((i / k) % n, i % k);
            real[ni][ki] += r;
            imag[ni][ki] += m;
            amplitude[ni][ki] += r.hypot(*m);
        }
    }
    let count = samples.len().max(1) as f64;
    for grid in [&mut real, &mut imag, &mut amplitude] {
        grid.iter_mut().flatten().for_each(|x| *x /= count);
    }
    Ok(SpectrumSummary {
        frequencies: model.dictionary().omega,
        real,
        imag,
        amplitude,
    })
}

pub fn spectrum(
    ctx: &Context,
    checkpoint: Option<&Path>,
    split: Split,
    extra: &Ablations,
    plot_png: bool,
) -> Result<(), CliError> {
    let (model, ablations, splits) = inference_setup(ctx, checkpoint, extra)?;
    if ablations.contains(Ablation::NoFreq) {
        return Err(CliError::Config("spectrum export needs the frequency branch (no_freq is set)".into()));
    }
    let samples = splits.get(split);
    if samples.is_empty() {
        return Err(CliError::Config(format!("split `{split:?}` is empty").to_lowercase()));
    }
    let s = summarize_spectrum(&model, &samples, &ablations, ctx.config.train.batch_size)?;
    let mut csv = String::from("variable,k,frequency,amplitude,real,imag\n");
    for n in 0..model.config.n_variables {
        for (k, f) in s.frequencies.iter().enumerate() {
            writeln!(
                csv,
                "{n},{},{f},{},{},{}",
                k + 1,
                s.amplitude[n][k],
                s.real[n][k],
                s.imag[n][k]
            )
            .unwrap();
        }
    }
    let csv_path = ctx.write("spectrum.csv", csv)?;
    let mut outputs = vec![csv_path.clone()];
    if plot_png {
        let png = ctx.out_dir()?.join("spectrum.png");
        plot::amplitude_bars(&s.frequencies, &s.amplitude).save(&png)?;
        outputs.push(png);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest("spectrum", &refs, json!({ "split": split, "samples": samples.len() }))?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}
