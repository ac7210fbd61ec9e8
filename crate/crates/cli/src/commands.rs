use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde_json::json;

use bcae_core::bench::{run_bench, BenchOptions, BenchReport};
use bcae_core::codec::CodeFile;
use bcae_core::data::{
    generate_event, generate_wedge, read_wedge_file, write_wedge_file, GeneratorConfig, LogWedge, WedgeFile,
    WEDGE_EXTENTS,
};
use bcae_core::metrics::{compression_ratio, MetricsReport, METRICS_CSV_HEADER};
use bcae_core::model::{Bcae, ModelSpec, Variant};
use bcae_core::parallel::{map_ordered, thread_count};
use bcae_core::tensor::Precision;
use bcae_core::train::{
    evaluate as evaluate_wedges, grid_search, load_checkpoint, save_checkpoint, TrainConfig, TrainState,
    TrainingSet, EPOCH_CSV_HEADER,
};

use crate::{
    BenchArgs, CompressArgs, DecompressArgs, EvaluateArgs, GenerateArgs, GridArgs, ModelArgs, TrainArgs, WedgeSource,
};

/// Bad flags or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<bcae_core::Error>(), Some(bcae_core::Error::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn padded(wedges: Vec<LogWedge>) -> Result<Vec<LogWedge>> {
    Ok(wedges.into_iter().map(|w| w.pad_horizontal()).collect::<bcae_core::Result<_>>()?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.4}"))
}

fn load_model(path: &Path) -> Result<Bcae> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut config: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(e) = a.events {
        config.events = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.extents {
        config.extents = e;
    }
    config.validate()?;
    let mut wedges = Vec::with_capacity(config.total_wedges());
    for event in 0..config.events {
        wedges.extend(generate_event(&config, event)?);
    }
    let file = WedgeFile::Adc {
        extents: config.extents,
        wedges,
    };
    write_wedge_file(&a.out, &file).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} wedges of {:?} to {}; occupancy {}",
        file.len(),
        config.extents,
        a.out.display(),
        file.occupancy()
    );
    Ok(())
}

fn model_args_given(m: &ModelArgs) -> bool {
    m.variant.is_some() || m.m.is_some() || m.n.is_some() || m.d.is_some() || m.width.is_some()
}

fn build_spec(args: &ModelArgs, radial_layers: usize) -> Result<ModelSpec> {
    let variant: Variant = args.variant.as_deref().unwrap_or("bcae2d").parse()?;
    let mut spec = match variant {
        Variant::Bcae2d => ModelSpec::bcae2d(args.m.unwrap_or(4), args.n.unwrap_or(8), args.d.unwrap_or(3))
            .with_trunk_width(args.width.unwrap_or(32)),
        v => {
            if args.m.is_some() || args.n.is_some() || args.d.is_some() || args.width.is_some() {
                return Err(usage("--m, --n, --d and --width apply to bcae2d only"));
            }
            ModelSpec::for_variant(v)
        }
    };
    spec.radial_layers = radial_layers;
    spec.validate()?;
    Ok(spec)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = read_wedge_file(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let radial = file.extents()[0];
    let mut state = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.seed.is_some() || a.batch.is_some() {
                return Err(usage("--config, --seed and --batch cannot change a resumed run"));
            }
            let state = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if model_args_given(&a.model) {
                let spec = build_spec(&a.model, radial)?;
                if spec.digest() != state.model.spec.digest() {
                    return Err(bcae_core::Error::ModelMismatch {
                        expected: spec.model_id(),
                        found: state.model.spec.model_id(),
                    }
                    .into());
                }
            }
            state
        }
        None => {
            let spec = build_spec(&a.model, radial)?;
            let mut config = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::for_variant(spec.variant),
            };
            if let Some(s) = a.seed {
                config.seed = s;
            }
            if let Some(b) = a.batch {
                config.batch_size = b;
            }
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            TrainState::new(spec, config)?
        }
    };
    if let (Some(e), Some(_)) = (a.epochs, &a.resume) {
        state.config.epochs = e;
    }
    let data = TrainingSet::new(file.into_log_wedges(), state.config.holdout_fraction, state.config.seed)?;
    println!(
        "training {} ({} encoder parameters) on {} wedges, {} held out; epochs {}..{}",
        state.model.spec.model_id(),
        state.model.encoder_parameters(),
        data.train.len(),
        data.holdout.len(),
        state.epoch,
        state.config.epochs
    );
    let mut log = match &a.log {
        Some(p) => {
            let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "{EPOCH_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    println!("{EPOCH_CSV_HEADER}");
    while state.epoch < state.config.epochs {
        let row = state.run_epoch(&data)?;
        println!("{}", row.csv_row());
        if let Some(f) = &mut log {
            writeln!(f, "{}", row.csv_row())?;
        }
        if row.balancer_held {
            eprintln!("warning: epoch {} had zero segmentation loss; balancer kept c_t", row.epoch);
        }
        if a.checkpoint_every_epoch {
            save_checkpoint(&a.out, &state)?;
        }
    }
    save_checkpoint(&a.out, &state).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote checkpoint {} at epoch {}", a.out.display(), state.epoch);
    Ok(())
}

pub fn compress(a: CompressArgs) -> Result<()> {
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let file = read_wedge_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let extents = file.extents();
    let wedges = padded(file.into_log_wedges())?;
    let precision: Precision = a.precision.into();
    let mut out = CodeFile::new(&model.spec, extents);
    let encoder = model.encoder.cast(precision);
    let threads = thread_count();
    let start = Instant::now();
    for chunk in wedges.chunks(a.batch) {
        for code in map_ordered(chunk, threads, |w| model.encode_with(&encoder, w, precision)) {
            out.push(code?)?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    out.write(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let rate = if secs > 0.0 { wedges.len() as f64 / secs } else { 0.0 };
    println!(
        "compressed {} wedges {:?} -> codes {:?}; compression ratio {}; {:.2} wedges/s",
        out.len(),
        extents,
        out.code_shape,
        compression_ratio(&extents, &out.code_shape),
        rate
    );
    Ok(())
}

pub fn decompress(a: DecompressArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let file = CodeFile::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    file.check_spec(&model.spec)?;
    let extents = file.original_extents;
    let threshold = a.threshold.unwrap_or(model.spec.seg_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("threshold {threshold} outside [0, 1]")));
    }
    let codes: Vec<_> = file.codes().collect();
    let wedges = map_ordered(&codes, thread_count(), |c| {
        model.decode_with_threshold(c, threshold).map(|d| d.reconstruction)
    })
    .into_iter()
    .collect::<bcae_core::Result<Vec<_>>>()?;
    let file = WedgeFile::LogAdc { extents, wedges };
    write_wedge_file(&a.output, &file).with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "decompressed {} wedges of {:?}; threshold {threshold}; occupancy {}",
        file.len(),
        extents,
        file.occupancy()
    );
    Ok(())
}

/// Per-wedge rows followed by an `aggregate` row.
pub const EVALUATE_CSV_HEADER: &str = "wedge,mae,psnr,precision,recall,occupancy,true_pos,pred_pos,actual_pos,voxels,encoder_parameters";

fn evaluation_csv(per_wedge: &[MetricsReport], aggregate: &MetricsReport, params: usize) -> String {
    debug_assert!(EVALUATE_CSV_HEADER.ends_with(&format!("{METRICS_CSV_HEADER},encoder_parameters")));
    let mut out = format!("{EVALUATE_CSV_HEADER}\n");
    for (i, r) in per_wedge.iter().enumerate() {
        out.push_str(&format!("{i},{},{params}\n", r.csv_row()));
    }
    out.push_str(&format!("aggregate,{},{params}\n", aggregate.csv_row()));
    out
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let file = read_wedge_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let wedges = padded(file.into_log_wedges())?;
    if wedges.is_empty() {
        return Err(usage(format!("{} holds no wedges", a.input.display())));
    }
    let threshold = a.threshold.unwrap_or(model.spec.seg_threshold);
    let eval = evaluate_wedges(&model, &wedges, a.precision.into(), threshold)?;
    let params = model.encoder_parameters();
    let agg = &eval.aggregate;
    println!(
        "{}: {} wedges; mae {:.5}; psnr {:.3}; precision {}; recall {}; occupancy {:.4}; encoder parameters {params}",
        model.spec.model_id(),
        wedges.len(),
        agg.mae,
        agg.psnr,
        opt(agg.precision),
        opt(agg.recall),
        agg.occupancy
    );
    if let Some(out) = &a.out {
        let text = if is_json(out) {
            serde_json::to_string_pretty(&json!({
                "model_id": model.spec.model_id(),
                "encoder_parameters": params,
                "aggregate": agg,
                "per_wedge": eval.per_wedge,
            }))?
        } else {
            evaluation_csv(&eval.per_wedge, agg, params)
        };
        write_text(out, &text)?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let extents = a.extents.unwrap_or(WEDGE_EXTENTS);
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let mut spec = ModelSpec::for_variant(a.variant.parse()?);
            spec.radial_layers = extents[0];
            Bcae::new(spec, 0)?
        }
    };
    let WedgeSource::Synthetic = a.wedge_source;
    let gen = GeneratorConfig::desk(extents, 0);
    let wedges = (0..a.batch.clamp(1, 8))
        .map(|i| generate_wedge(&gen, i).and_then(|w| w.log_transform().pad_horizontal()))
        .collect::<bcae_core::Result<Vec<_>>>()?;
    let options = BenchOptions {
        precision: a.precision.into(),
        batch_size: a.batch,
        warmup_iters: a.warmup,
        timed_iters: a.iters,
        threads: thread_count(),
        full_pipeline: a.full_pipeline,
    };
    let report = run_bench(&model, &wedges, &options)?;
    println!(
        "{} {:?} batch {}: {:.3} ± {:.3} wedges/s over {} iterations; encoder parameters {}",
        report.model_id,
        report.precision,
        report.batch_size,
        report.wedges_per_second_mean,
        report.wedges_per_second_std,
        report.timed_iters,
        report.encoder_parameters
    );
    if let Some(out) = &a.out {
        let text = if is_json(out) {
            serde_json::to_string_pretty(&report)?
        } else {
            format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row())
        };
        write_text(out, &text)?;
    }
    Ok(())
}

pub fn grid(a: GridArgs) -> Result<()> {
    let file = read_wedge_file(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let radial = file.extents()[0];
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let data = TrainingSet::new(file.into_log_wedges(), config.holdout_fraction, config.seed)?;
    let test = match &a.test {
        Some(p) => padded(read_wedge_file(p).with_context(|| format!("reading {}", p.display()))?.into_log_wedges())?,
        None => data.holdout.clone(),
    };
    if test.is_empty() {
        return Err(usage("no evaluation wedges: pass --test or a positive holdout_fraction"));
    }
    let mut base = ModelSpec::bcae2d(a.d, a.d, a.d).with_trunk_width(a.width.unwrap_or(32));
    base.radial_layers = radial;
    println!("m,n,encoder_parameters,final_loss,mae,precision,recall");
    let report = grid_search(&a.ms, &a.ns, a.d, &base, &data, &test, &config, |c| {
        println!(
            "{},{},{},{:.5},{:.5},{},{}",
            c.m,
            c.n,
            c.encoder_parameters,
            c.final_loss,
            c.metrics.mae,
            opt(c.metrics.precision),
            opt(c.metrics.recall)
        );
    })?;
    println!("MAE\n{}", report.matrix(|r| Some(r.mae)));
    println!("precision\n{}", report.matrix(|r| r.precision));
    println!("recall\n{}", report.matrix(|r| r.recall));
    if let Some(out) = &a.out {
        let text = if is_json(out) {
            serde_json::to_string_pretty(&report)?
        } else {
            report.to_csv()
        };
        write_text(out, &text)?;
    }
    Ok(())
}
