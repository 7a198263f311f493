use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use cmfn_core::datagen::render::resize_bilinear;
use cmfn_core::datagen::{generate_dataset, load_dataset, open_dataset};
use cmfn_core::export::{dump_attention, read_pnm};
use cmfn_core::gradcheck::check_model;
use cmfn_core::train::split_holdout;
use cmfn_core::{Checkpoint, CmfnError, DistortionSpec, GenerateSpec, ModelConfig, RefineOptions, Sample, Trainer};
use cmfn_tensor::suite::{kernel_suite, OPS};
use cmfn_tensor::{Tape, Tensor};

use crate::{Ablation, Eval, GenData, GradCheck, Recognize, Train};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_COMPAT: u8 = 4;

const KERNEL_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn compat(message: impl Into<String>) -> Self {
        Self { code: EXIT_COMPAT, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CmfnError> for Failure {
    fn from(e: CmfnError) -> Self {
        let code = match &e {
            CmfnError::Tensor(_) | CmfnError::NonFiniteLoss { .. } => EXIT_NUMERIC,
            CmfnError::Format(_) | CmfnError::Codec(_) => EXIT_COMPAT,
            CmfnError::Config(_) | CmfnError::EmptyDataset | CmfnError::Io(_) => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<cmfn_tensor::TensorError> for Failure {
    fn from(e: cmfn_tensor::TensorError) -> Self {
        CmfnError::from(e).into()
    }
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::usage(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

pub fn gen_data(a: GenData) -> Outcome {
    let spec = GenerateSpec {
        count: a.count,
        min_len: a.min_len,
        max_len: a.max_len,
        height: a.height,
        width: a.width,
        ..GenerateSpec::new(a.count, DistortionSpec::preset(&a.preset)?, a.seed)
    };
    spec.validate()?;
    generate_dataset(&spec, &a.out).map_err(|e| match e {
        CmfnError::Io(io) => io_at(&a.out)(io),
        other => other.into(),
    })?;
    println!(
        "count={} preset={} seed={} height={} width={} path={}",
        a.count,
        a.preset,
        a.seed,
        a.height,
        a.width,
        a.out.display()
    );
    Ok(())
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    load_dataset(path).map_err(|e| match e {
        CmfnError::Io(io) => io_at(path)(io),
        other => other.into(),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        CmfnError::Io(io) => io_at(path)(io),
        other => other.into(),
    })
}

fn check_geometry(cfg: &ModelConfig, samples: &[Sample]) -> Outcome {
    match samples.first() {
        Some(s) if (s.height, s.width) != (cfg.image_height, cfg.image_width) => Err(Failure::compat(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            s.height, s.width, cfg.image_height, cfg.image_width
        ))),
        _ => Ok(()),
    }
}

/// `A..B` (inclusive) or a single count.
fn parse_sweep(text: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::usage(format!("--iterations expects N or A..B, got {text:?}"));
    match text.split_once("..") {
        Some((lo, hi)) => {
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if lo == 0 || lo > hi {
                return Err(bad());
            }
            Ok((lo..=hi).collect())
        }
        None => Ok(vec![text.trim().parse().map_err(|_| bad())?]),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(mut a: Train) -> Outcome {
    let sweep = a.overrides.remove("iterations").map(|s| parse_sweep(&s)).transpose()?;
    let file_text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(io_at(p))?),
        None => None,
    };
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut base = resumed.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    if let Some(text) = &file_text {
        base.apply_text(text)?;
    }
    a.overrides.apply(&mut base)?;
    let counts = sweep.unwrap_or_else(|| vec![base.iterations]);
    if resumed.is_some() && counts.len() > 1 {
        return Err(Failure::usage("--resume cannot be combined with an iteration sweep"));
    }
    for &n in &counts {
        ModelConfig { iterations: n, ..base.clone() }.validate()?;
    }

    let samples = load_samples(&a.data)?;
    check_geometry(&base, &samples)?;
    let (fit, holdout) = split_holdout(&samples, base.holdout_fraction);
    let log_base = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));

    for &n in &counts {
        let cfg = ModelConfig { iterations: n, ..base.clone() };
        let (out, log) = if counts.len() > 1 {
            (with_suffix(&a.out, &format!(".n{n}")), with_suffix(&log_base, &format!(".n{n}")))
        } else {
            (a.out.clone(), log_base.clone())
        };
        let mut trainer = match &resumed {
            Some(ck) => Trainer::resume(Checkpoint { config: cfg.clone(), ..ck.clone() })?,
            None => Trainer::new(&cfg)?,
        };
        let mut log_file = BufWriter::new(File::create(&log).map_err(io_at(&log))?);
        writeln!(log_file, "# epoch\tloss\tacc_tv\tacc_tl\tacc_tf").map_err(io_at(&log))?;
        let mut failure = None;
        let metrics = trainer.run(fit, holdout, |m, t| {
            let step = writeln!(log_file, "{}", m.log_line())
                .and_then(|_| log_file.flush())
                .map_err(io_at(&log))
                .and_then(|_| t.checkpoint().save(&out).map_err(Failure::from));
            let acc = m.accuracy.as_ref();
            println!(
                "iterations={n} epoch={} loss={:.6} acc_tv={:.4} acc_tl={:.4} acc_tf={:.4}",
                m.epoch,
                m.loss,
                acc.map_or(f64::NAN, |a| a.visual),
                acc.map_or(f64::NAN, |a| a.language),
                acc.map_or(f64::NAN, |a| a.fused),
            );
            match step {
                Ok(()) => ControlFlow::Continue(()),
                Err(e) => {
                    failure = Some(e);
                    ControlFlow::Break(())
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if metrics.is_empty() {
            trainer.checkpoint().save(&out)?;
        }
        println!(
            "checkpoint={} log={} iterations={n} epochs={}",
            out.display(),
            log.display(),
            trainer.epochs_done()
        );
    }
    Ok(())
}

fn refine_options(ablate: Option<Ablation>) -> RefineOptions {
    RefineOptions {
        drop_visual_cues: ablate == Some(Ablation::NoVisualCues),
    }
}

pub fn eval(a: Eval) -> Outcome {
    let (model, _) = load_checkpoint(&a.checkpoint)?.into_model()?;
    let samples = load_samples(&a.data)?;
    check_geometry(model.config(), &samples)?;
    let acc = cmfn_core::evaluate(&model, &samples, refine_options(a.ablate))?;
    let per_iter: Vec<String> = acc.fused_per_iteration.iter().map(|x| format!("{x:.4}")).collect();
    println!(
        "samples={} acc_tv={:.4} acc_tl={:.4} acc_tf={:.4} acc_tf_by_iteration={}",
        acc.samples,
        acc.visual,
        acc.language,
        acc.fused,
        per_iter.join(",")
    );
    Ok(())
}

pub fn recognize(a: Recognize) -> Outcome {
    let (model, _) = load_checkpoint(&a.checkpoint)?.into_model()?;
    let cfg = model.config().clone();
    let (id, image, truth) = match (&a.image, &a.data) {
        (Some(path), _) => {
            let img = read_pnm(path).map_err(|e| match e {
                CmfnError::Io(io) => io_at(path)(io),
                other => other.into(),
            })?;
            let pixels = if (img.height, img.width) == (cfg.image_height, cfg.image_width) {
                img.pixels
            } else {
                resize_bilinear(&img.pixels, img.height, img.width, 3, cfg.image_height, cfg.image_width)
            };
            let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
            let id = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            (id, Tensor::new(vec![cfg.image_height, cfg.image_width, 3], data)?, None)
        }
        (None, Some(path)) => {
            let index = a.index.expect("clap enforces --index with --data");
            let mut reader = open_dataset(path).map_err(|e| match e {
                CmfnError::Io(io) => io_at(path)(io),
                other => other.into(),
            })?;
            let count = reader.sample_count();
            let sample = reader
                .nth(index)
                .ok_or_else(|| Failure::usage(format!("index {index} is out of range for {count} samples")))??;
            check_geometry(&cfg, std::slice::from_ref(&sample))?;
            (index.to_string(), sample.image(), Some(sample.text))
        }
        (None, None) => return Err(Failure::usage("either --image or --data is required")),
    };
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, false);
    let pass = model.forward(&mut tape, &bound, &image, refine_options(a.ablate))?;
    let pred = model.decode(&tape, &pass);
    if let Some(t) = truth {
        println!("truth={t}");
    }
    println!("TV={}", pred.visual);
    println!("TL={}", pred.language);
    println!("TF={}", pred.fused);
    if let Some(dir) = &a.dump_attn {
        let written = dump_attention(
            dir,
            &id,
            tape.value(pass.vision.at_m),
            cfg.feature_height(),
            cfg.feature_width(),
        )
        .map_err(|e| match e {
            CmfnError::Io(io) => io_at(dir)(io),
            other => other.into(),
        })?;
        println!("attention_maps={} dir={}", written.len(), dir.display());
    }
    Ok(())
}

pub fn grad_check(a: GradCheck) -> Outcome {
    let fault = a.inject_fault.as_deref();
    if let Some(op) = fault {
        if !OPS.contains(&op) {
            return Err(Failure::usage(format!("unknown op {op:?}; expected one of {}", OPS.join(", "))));
        }
    }
    let mut failed = Vec::new();
    for check in kernel_suite(a.seed, fault)? {
        let pass = check.report.max_rel_error < KERNEL_TOL;
        println!(
            "op={} max_rel_error={:.3e} checked={} status={}",
            check.op,
            check.report.max_rel_error,
            check.report.checked,
            if pass { "pass" } else { "fail" }
        );
        if !pass {
            failed.push(check.op.to_string());
        }
    }
    if !a.kernels_only {
        let check = check_model(a.seed, fault)?;
        let pass = check.report.max_rel_error < MODEL_TOL;
        println!(
            "op=model max_rel_error={:.3e} checked={} worst={} status={}",
            check.report.max_rel_error,
            check.report.checked,
            check.worst.as_deref().unwrap_or("-"),
            if pass { "pass" } else { "fail" }
        );
        if !pass {
            failed.push("model".into());
        }
    }
    if failed.is_empty() {
        println!("result=pass");
        Ok(())
    } else {
        println!("result=fail failed={}", failed.join(","));
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}
