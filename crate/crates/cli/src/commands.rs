use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use spadnet::checkpoint::{load_tokenizer, save_tokenizer, save_vit};
use spadnet::datapipe::{
    load_dataset, load_volume, preprocess, save_volume, synth_generate, volume_paths,
    write_dataset, RawVolume, SynthSpec, VolumeGrid,
};
use spadnet::metrics::{assd_in, dice, hausdorff_in, BinaryMask, DistanceUnits};
use spadnet::mim::{train_mim_toy, MimTrainConfig};
use spadnet::rope::{rope_compare, rope_d_sweep, FrequencyConvention, RopeParams};
use spadnet::spad_conv::{plan_network, unet4_stages, BaseConvSpec};
use spadnet::tokenizer::{train_tokenizer_toy, TokenizerTrainConfig};
use spadnet::verify::{run_checks, sign_error_self_test, Scope};
use spadnet::{degree_of_anisotropy, Direction, Error, Result, Spacing};

use crate::{Cli, Command, Convention, DataArgs, Units};

/// Lower and upper end of the expected per-pair minimum angle gap.
const MIN_GAP_BAND: (f64, f64) = (1e-5, 1e-3);

/// What a command hands back: a report, and whether it counts as success.
struct Outcome {
    report: Value,
    ok: bool,
}

impl Outcome {
    fn ok(report: impl Serialize) -> Result<Self> {
        Ok(Self {
            report: serde_json::to_value(report)?,
            ok: true,
        })
    }
}

pub fn run(cli: &Cli) -> u8 {
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::Plan(a) => cmd_plan(&a.spacing, &a.stages, a.in_channels),
        Command::RopeAnalyze(a) => cmd_rope(a),
        Command::TrainTokenizer(a) => cmd_train_tokenizer(a, cli.seed),
        Command::TrainMim(a) => cmd_train_mim(a, cli.seed),
        Command::GradCheck(a) => cmd_grad_check(&a.scope, a.inject_sign_error, cli.seed),
        Command::EvalMetrics(a) => cmd_eval_metrics(&a.pred, &a.reference, a.units),
        Command::SynthData(a) => cmd_synth(a, cli.seed),
        Command::Preprocess(a) => cmd_preprocess(&a.input, &a.output, a.depth_axis),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return if e.is_validation() { 1 } else { 2 };
        }
    };
    log::info!("finished in {:.2?}", start.elapsed());
    if let Err(e) = emit(&outcome.report, cli.report.as_deref()) {
        eprintln!("error: {e}");
        return 2;
    }
    if outcome.ok {
        0
    } else {
        eprintln!("error: report did not pass");
        2
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPADNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "SPADNET_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn emit(report: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {p:?} in {s:?}")))
        })
        .collect()
}

fn parse_spacing(s: &str) -> Result<Spacing> {
    if s.eq_ignore_ascii_case("2d") {
        return Spacing::two_d(1.0);
    }
    match parse_list::<f64>("spacing", s)?[..] {
        [a, b, c] => Spacing::new(a, b, c),
        _ => Err(Error::Config(format!(
            "spacing needs three values or `2d`, got {s:?}"
        ))),
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn cmd_plan(spacing: &str, stages: &str, in_channels: usize) -> Result<Outcome> {
    let spacing = parse_spacing(spacing)?;
    let stages: Vec<BaseConvSpec> = if stages == "unet4" {
        if in_channels == 0 {
            return Err(Error::Config("in-channels must be positive".into()));
        }
        unet4_stages(in_channels)
    } else {
        serde_json::from_str(&fs::read_to_string(stages)?)?
    };
    let plan = plan_network(&stages, spacing)?;
    Outcome::ok(json!({
        "input_spacing": spacing,
        "da": degree_of_anisotropy(&spacing),
        "encoder_depth_strides": plan.depth_strides(Direction::Downsample),
        "decoder_depth_strides": plan.depth_strides(Direction::Upsample),
        "output_spacing": plan.output_spacing(),
        "stages": plan.stages,
    }))
}

fn cmd_rope(a: &crate::RopeArgs) -> Result<Outcome> {
    let bases: [f64; 3] = parse_list::<f64>("base", &a.bases)?
        .try_into()
        .map_err(|_| Error::Config("bases needs three values".into()))?;
    let grid: [usize; 3] = parse_list::<usize>("grid", &a.grid)?
        .try_into()
        .map_err(|_| Error::Config("grid needs three extents".into()))?;
    let sweep: Vec<usize> = parse_list("sweep width", &a.sweep)?;
    let convention = match a.convention {
        Convention::FullDim => FrequencyConvention::FullDim,
        Convention::HalfDim => FrequencyConvention::HalfDim,
    };
    let params = RopeParams::with_convention(a.d, bases[0], bases[1], bases[2], convention)?;
    let cmp = rope_compare(grid, &params)?;
    let in_band = cmp
        .min_delta_3d
        .iter()
        .filter(|&&g| (MIN_GAP_BAND.0..=MIN_GAP_BAND.1).contains(&g))
        .count();
    let sweep = rope_d_sweep(&sweep, bases, convention, grid)?;
    Outcome::ok(json!({
        "comparison": cmp,
        "min_gap_band": [MIN_GAP_BAND.0, MIN_GAP_BAND.1],
        "pairs_in_band": in_band,
        "pairs": cmp.min_delta_3d.len(),
        "all_gaps_positive": cmp.min_delta_3d.iter().all(|&g| g > 0.0),
        "sweep": sweep,
    }))
}

fn dataset(args: &DataArgs, seed: u64) -> Result<Vec<VolumeGrid>> {
    match (&args.data, args.synth) {
        (Some(index), None) => load_dataset(index),
        (None, Some(n)) => synth_generate(&SynthSpec::toy(n), seed),
        _ => Err(Error::Config(
            "give exactly one of --data or --synth".into(),
        )),
    }
}

/// Per-step curves dominate the report size; `--summary` drops them.
fn strip_curves(mut v: Value, keys: &[&str]) -> Value {
    if let Some(m) = v.as_object_mut() {
        for k in keys {
            m.remove(*k);
        }
    }
    v
}

fn cmd_train_tokenizer(a: &crate::TrainTokenizerArgs, seed: u64) -> Result<Outcome> {
    let mut cfg: TokenizerTrainConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(l) = a.lambda1 {
        cfg.model.pdr.lambda1 = l;
    }
    if let Some(l) = a.lambda2 {
        cfg.model.pdr.lambda2 = l;
    }
    cfg.model.validate()?;
    let data = dataset(&a.data, seed)?;
    log::info!(
        "training tokenizer on {} volumes for {} steps",
        data.len(),
        cfg.steps
    );
    let (model, stats) = train_tokenizer_toy(&data, &cfg, seed)?;
    if let Some(p) = &a.checkpoint {
        save_tokenizer(p, &model, seed, stats.steps)?;
    }
    let mut stats = serde_json::to_value(&stats)?;
    if a.summary {
        stats = strip_curves(stats, &["loss_curve", "reconstruction_curve", "epochs"]);
    }
    Outcome::ok(
        json!({ "config": cfg, "volumes": data.len(), "checkpoint": a.checkpoint, "stats": stats }),
    )
}

fn cmd_train_mim(a: &crate::TrainMimArgs, seed: u64) -> Result<Outcome> {
    let mut cfg: MimTrainConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(r) = a.mask_ratio {
        cfg.mask_ratio = r;
    }
    let (tokenizer, _) = load_tokenizer(&a.tokenizer)?;
    cfg.vit.vocab = tokenizer.config.codebook_size;
    cfg.vit.in_channels = tokenizer.config.in_channels;
    let data = dataset(&a.data, seed)?;
    log::info!(
        "masked token modeling on {} volumes for {} steps",
        data.len(),
        cfg.steps
    );
    let (model, stats) = train_mim_toy(&data, &tokenizer, &cfg, seed)?;
    if let Some(p) = &a.checkpoint {
        save_vit(p, &model, seed, stats.steps)?;
    }
    let mut stats = serde_json::to_value(&stats)?;
    if a.summary {
        stats = strip_curves(stats, &["ce_curve"]);
    }
    Outcome::ok(
        json!({ "config": cfg, "volumes": data.len(), "checkpoint": a.checkpoint, "stats": stats }),
    )
}

fn cmd_grad_check(scope: &str, inject: bool, seed: u64) -> Result<Outcome> {
    let scope: Scope = scope.parse()?;
    let mut report = run_checks(&scope, seed)?;
    if inject && !matches!(&scope, Scope::Module(m) if m == "selftest") {
        report.checks.push(sign_error_self_test(seed)?);
        report.passed = report.checks.iter().all(|c| c.passed);
    }
    for c in &report.checks {
        log::info!(
            "{:<28} {:>9.2e} {}",
            c.name,
            c.max_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let ok = report.passed;
    Ok(Outcome {
        report: serde_json::to_value(report)?,
        ok,
    })
}

fn to_mask(v: &VolumeGrid) -> Result<BinaryMask> {
    let n: usize = v.dims.iter().product();
    BinaryMask::new(
        v.dims,
        v.data[..n].iter().map(|&x| x != 0.0).collect(),
        v.spacing,
    )
}

fn cmd_eval_metrics(pred: &Path, reference: &Path, units: Units) -> Result<Outcome> {
    let (p, r) = (
        to_mask(&load_volume(pred)?)?,
        to_mask(&load_volume(reference)?)?,
    );
    let u = match units {
        Units::Mm => DistanceUnits::Mm,
        Units::Index => DistanceUnits::Voxel,
    };
    let (d, a, h) = (dice(&p, &r)?, assd_in(&p, &r, u)?, hausdorff_in(&p, &r, u)?);
    Outcome::ok(match units {
        Units::Mm => json!({ "dice": d, "assd_mm": a, "hd_mm": h }),
        Units::Index => json!({ "dice": d, "assd_voxels": a, "hd_voxels": h }),
    })
}

fn cmd_synth(a: &crate::SynthArgs, seed: u64) -> Result<Outcome> {
    let mut spec: SynthSpec = if a.toy {
        SynthSpec::toy(200)
    } else {
        read_json(a.spec.as_deref())?
    };
    if let Some(n) = a.n {
        spec.n = n;
    }
    let volumes = synth_generate(&spec, seed)?;
    let index = write_dataset(&volumes, &a.out_dir)?;
    let mut per_da: BTreeMap<String, usize> = BTreeMap::new();
    for v in &volumes {
        let key = if v.spacing.is_two_d() {
            "2d".to_string()
        } else {
            v.da().to_string()
        };
        *per_da.entry(key).or_default() += 1;
    }
    Outcome::ok(json!({ "spec": spec, "index": index, "volumes": volumes.len(), "per_da": per_da }))
}

fn cmd_preprocess(input: &Path, output: &Path, depth_axis: Option<usize>) -> Result<Outcome> {
    if depth_axis.is_some_and(|a| a > 2) {
        return Err(Error::Config("depth axis must be 0, 1 or 2".into()));
    }
    let v = load_volume(input)?;
    let before = v.shape();
    let out = preprocess(RawVolume::from(v), depth_axis)?;
    save_volume(&out, output)?;
    let out_path = volume_paths(output).0;
    Outcome::ok(json!({
        "input_shape": before,
        "output_shape": out.shape(),
        "spacing": out.spacing,
        "da": out.da(),
        "output": out_path,
    }))
}
