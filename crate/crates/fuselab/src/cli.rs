//! Command-line surface binding the library into batch pipelines.
//!
//! Every run writes a reproducibility record listing the effective
//! parameters, so outputs can be regenerated bit-exactly from it. Exit
//! codes: 0 success, 1 validation failure, 2 numerical failure.

use crate::analysis::{
    benjamini_hochberg, dice, mann_whitney_u, mann_whitney_u_one_sided, oracle_error_probs,
    tscore_map, DiceReport, MethodComparison, OracleConfig, OracleMode,
};
use crate::calibration::{platt_fit, prob_to_logit, CalibrationSample, PlattParams};
use crate::error::{Error, Result};
use crate::fusion::{FuseInputs, FusionConfig, FusionMethod, PipelineConfig};
use crate::probsource::{
    intensity_error_score, network_error_prob, patch_search_refine, IntensityScoreConfig,
    PatchSearchConfig,
};
use crate::synth::{synth_dataset, SynthSpec};
use crate::volume::{
    read_volume, Dims, IntensityVolume, LabelVolume, MaskVolume, ProbabilityVolume, UNASSIGNED,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fuselab",
    version,
    about = "Multi-atlas label fusion and evaluation over MAF volume files"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse atlas segmentations into a consensus segmentation.
    Fuse(FuseArgs),
    /// Fit Platt calibration scalars on validation data.
    Calibrate(CalibrateArgs),
    /// Generate oracle error probability maps from ground truth.
    Oracle(OracleArgs),
    /// Per-voxel t-scores of incorrect versus correct atlas errors.
    Tscore(TscoreArgs),
    /// Dice overlap between two segmentations.
    Dice(DiceArgs),
    /// Significance testing across Dice reports.
    Stats(StatsArgs),
    /// Generate a synthetic target/atlas dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Jlf,
    Pv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    G,
    Gs,
}

#[derive(Args)]
struct FuseArgs {
    /// Target intensity volume.
    #[arg(long)]
    target: PathBuf,
    /// Warped atlas segmentation (repeat per atlas).
    #[arg(long = "atlas-seg", required = true)]
    atlas_seg: Vec<PathBuf>,
    /// Warped atlas image (repeat per atlas; intensity error route).
    #[arg(long = "atlas-img")]
    atlas_img: Vec<PathBuf>,
    /// Per-atlas correctness probability map; its complement is the
    /// error probability.
    #[arg(long = "prob-map")]
    prob_map: Vec<PathBuf>,
    /// Per-atlas error probability map consumed as-is (what `oracle`
    /// emits); mutually exclusive with --prob-map.
    #[arg(long = "error-map")]
    error_map: Vec<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long = "pv-threshold", default_value_t = 0.5)]
    pv_threshold: f64,
    #[arg(long = "ridge", default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long = "jlf-fallback-threshold", default_value_t = 0.5)]
    jlf_fallback_threshold: f64,
    /// JSON file with calibration scalars {"a": .., "b": ..}.
    #[arg(long = "platt-params")]
    platt_params: Option<PathBuf>,
    /// Fallback segmentation for voxels with no trusted atlas.
    #[arg(long)]
    fallback: Option<PathBuf>,
    /// Re-align atlas labels by local patch search before scoring.
    #[arg(long = "patch-search")]
    patch_search: bool,
    #[arg(long = "search-radius", default_value_t = 3)]
    search_radius: usize,
    #[arg(long = "patch-radius", default_value_t = 2)]
    patch_radius: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Reproducibility record path (default: <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long = "prob-map", required = true)]
    prob_map: Vec<PathBuf>,
    #[arg(long = "atlas-seg", required = true)]
    atlas_seg: Vec<PathBuf>,
    #[arg(long = "target-seg")]
    target_seg: PathBuf,
    /// Mask restricting the fit to relevant voxels.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long = "out-params")]
    out_params: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long = "target-seg")]
    target_seg: PathBuf,
    #[arg(long = "atlas-seg", required = true)]
    atlas_seg: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long = "p-correct", default_value_t = 0.4)]
    p_correct: f64,
    #[arg(long = "p-incorrect", default_value_t = 0.6)]
    p_incorrect: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TscoreArgs {
    #[arg(long = "target-seg")]
    target_seg: PathBuf,
    #[arg(long = "atlas-seg", required = true)]
    atlas_seg: Vec<PathBuf>,
    #[arg(long = "prob-map")]
    prob_map: Vec<PathBuf>,
    #[arg(long = "error-map")]
    error_map: Vec<PathBuf>,
    #[arg(long = "atlas-img")]
    atlas_img: Vec<PathBuf>,
    /// Target intensity volume (required with --atlas-img).
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long = "patch-search")]
    patch_search: bool,
    #[arg(long = "search-radius", default_value_t = 3)]
    search_radius: usize,
    #[arg(long = "patch-radius", default_value_t = 2)]
    patch_radius: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DiceArgs {
    #[arg(long = "seg-a")]
    seg_a: PathBuf,
    #[arg(long = "seg-b")]
    seg_b: PathBuf,
    /// Comma-separated label ids; defaults to every non-background label
    /// present in either input.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u16>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Dice report files; the first is the reference every other method
    /// is compared against.
    #[arg(long = "dice-json", required = true)]
    dice_json: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    fdr: f64,
    #[arg(long = "one-sided")]
    one_sided: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Voxel grid as X,Y,Z.
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    labels: usize,
    #[arg(long)]
    atlases: usize,
    #[arg(long)]
    corruption: f64,
    #[arg(long)]
    noise: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension {p:?}: {e}"))?;
    }
    Ok(out)
}

/// Parse and dispatch. Accepts the full argv including the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            return 1;
        }
    };
    let result = match cli.command {
        Command::Fuse(args) => cmd_fuse(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Tscore(args) => cmd_tscore(args),
        Command::Dice(args) => cmd_dice(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn reformat(path: &Path, e: Error) -> Error {
    match e {
        Error::InvalidValue(reason) => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

fn load_intensity(path: &Path) -> Result<IntensityVolume> {
    read_volume(path)?
        .into_intensity()
        .map_err(|e| reformat(path, e))
}

fn load_prob(path: &Path) -> Result<ProbabilityVolume> {
    read_volume(path)?
        .into_prob()
        .map_err(|e| reformat(path, e))
}

fn load_mask(path: &Path) -> Result<MaskVolume> {
    read_volume(path)?
        .into_mask()
        .map_err(|e| reformat(path, e))
}

fn load_labels(path: &Path) -> Result<LabelVolume> {
    read_volume(path)?
        .into_labels()
        .map_err(|e| reformat(path, e))
}

/// Atlas and ground-truth inputs must not carry the sentinel.
fn load_labels_strict(path: &Path) -> Result<LabelVolume> {
    let seg = load_labels(path)?;
    if seg.contains_unassigned() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "contains the reserved unassigned label".into(),
        });
    }
    Ok(seg)
}

fn load_many<T>(paths: &[PathBuf], f: impl Fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    paths.iter().map(|p| f(p)).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("JSON serialization");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json_paths(paths: &[PathBuf]) -> serde_json::Value {
    json!(paths
        .iter()
        .map(|p| p.to_string_lossy())
        .collect::<Vec<_>>())
}

fn default_report(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.report.json", out.display()))
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn ensure_count(n: usize, len: usize, flag: &str) -> Result<()> {
    if len != 0 && len != n {
        return Err(Error::Config(format!(
            "{flag} given {len} times but there are {n} atlases (--atlas-seg)"
        )));
    }
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let n = args.atlas_seg.len();
    ensure_count(n, args.atlas_img.len(), "--atlas-img")?;
    ensure_count(n, args.prob_map.len(), "--prob-map")?;
    ensure_count(n, args.error_map.len(), "--error-map")?;
    if !args.prob_map.is_empty() && !args.error_map.is_empty() {
        return Err(Error::Config(
            "--prob-map and --error-map are mutually exclusive".into(),
        ));
    }
    let method = match args.method {
        MethodArg::Jlf => FusionMethod::Jlf,
        MethodArg::Pv => FusionMethod::Pv,
    };
    if matches!(method, FusionMethod::Pv) && args.prob_map.is_empty() && args.error_map.is_empty() {
        return Err(Error::Config(
            "--method pv requires --prob-map or --error-map: raw intensity scores \
             have no calibrated trust threshold"
                .into(),
        ));
    }
    if args.prob_map.is_empty() && args.error_map.is_empty() && args.atlas_img.is_empty() {
        return Err(Error::Config(
            "the intensity route needs --atlas-img, or provide --prob-map/--error-map".into(),
        ));
    }
    if args.platt_params.is_some() && args.prob_map.is_empty() {
        return Err(Error::Config("--platt-params requires --prob-map".into()));
    }

    let cfg = PipelineConfig {
        fusion: FusionConfig {
            method,
            pv_threshold: args.pv_threshold,
            ridge_alpha: args.ridge,
            jlf_fallback_threshold: args.jlf_fallback_threshold,
        },
        score: IntensityScoreConfig {
            beta: args.beta,
            radius: args.radius,
        },
        patch_search: args.patch_search.then_some(PatchSearchConfig {
            search_radius: args.search_radius,
            patch_radius: args.patch_radius,
        }),
    };
    cfg.fusion.validate()?;
    cfg.score.validate()?;
    let pool = build_pool(args.threads)?;

    let target = load_intensity(&args.target)?;
    let atlas_segs = load_many(&args.atlas_seg, load_labels_strict)?;
    let atlas_imgs = if args.atlas_img.is_empty() {
        None
    } else {
        Some(load_many(&args.atlas_img, load_intensity)?)
    };
    let prob_maps = if args.prob_map.is_empty() {
        None
    } else {
        Some(load_many(&args.prob_map, load_prob)?)
    };
    let error_maps = if args.error_map.is_empty() {
        None
    } else {
        Some(load_many(&args.error_map, load_prob)?)
    };
    let fallback = args
        .fallback
        .as_deref()
        .map(load_labels_strict)
        .transpose()?;
    let platt = args
        .platt_params
        .as_deref()
        .map(load_platt_params)
        .transpose()?;

    let inputs = FuseInputs {
        target: &target,
        atlas_segs: &atlas_segs,
        atlas_imgs: atlas_imgs.as_deref(),
        prob_maps: prob_maps.as_deref(),
        error_maps: error_maps.as_deref(),
        platt,
        fallback: fallback.as_ref(),
    };
    let fused = pool.install(|| crate::fusion::fuse_pipeline(&cfg, &inputs))?;
    fused.save(&args.out)?;

    let record = json!({
        "command": "fuse",
        "target": args.target.to_string_lossy(),
        "atlas_seg": json_paths(&args.atlas_seg),
        "atlas_img": json_paths(&args.atlas_img),
        "prob_map": json_paths(&args.prob_map),
        "error_map": json_paths(&args.error_map),
        "method": match method { FusionMethod::Jlf => "jlf", FusionMethod::Pv => "pv" },
        "beta": args.beta,
        "radius": args.radius,
        "pv_threshold": args.pv_threshold,
        "ridge": args.ridge,
        "jlf_fallback_threshold": args.jlf_fallback_threshold,
        "platt_params": args.platt_params.as_ref().map(|p| p.to_string_lossy().to_string()),
        "platt": platt.map(|p| json!({"a": p.a, "b": p.b})),
        "fallback": args.fallback.as_ref().map(|p| p.to_string_lossy().to_string()),
        "patch_search": args.patch_search,
        "search_radius": args.search_radius,
        "patch_radius": args.patch_radius,
        "threads": args.threads,
        "out": args.out.to_string_lossy(),
    });
    write_json(
        &args.report.unwrap_or_else(|| default_report(&args.out)),
        &record,
    )
}

fn load_platt_params(path: &Path) -> Result<PlattParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params: PlattParams = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("invalid calibration params: {e}"),
    })?;
    if !params.a.is_finite() || !params.b.is_finite() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "calibration params must be finite".into(),
        });
    }
    Ok(params)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    if !(args.epsilon > 0.0 && args.epsilon < 0.5) {
        return Err(Error::Config(format!(
            "--epsilon must lie in (0, 0.5), got {}",
            args.epsilon
        )));
    }
    let n = args.atlas_seg.len();
    if args.prob_map.len() != n {
        return Err(Error::Config(format!(
            "--prob-map given {} times but there are {n} atlases (--atlas-seg)",
            args.prob_map.len()
        )));
    }
    let target_seg = load_labels_strict(&args.target_seg)?;
    let atlas_segs = load_many(&args.atlas_seg, load_labels_strict)?;
    let prob_maps = load_many(&args.prob_map, load_prob)?;
    let mask = load_mask(&args.mask)?;

    let dims = target_seg.dims();
    for (what, d) in std::iter::once(("--mask", mask.dims()))
        .chain(atlas_segs.iter().map(|s| ("--atlas-seg", s.dims())))
        .chain(prob_maps.iter().map(|p| ("--prob-map", p.dims())))
    {
        if d != dims {
            return Err(Error::DimsMismatch(format!("{what}: {d} vs {dims}")));
        }
    }

    let mut samples = Vec::new();
    for (seg, probs) in atlas_segs.iter().zip(&prob_maps) {
        for v in 0..dims.voxel_count() {
            if mask.data()[v] {
                samples.push(CalibrationSample {
                    logit: prob_to_logit(probs.data()[v] as f64, args.epsilon),
                    correct: seg.data()[v] == target_seg.data()[v],
                });
            }
        }
    }
    let params = platt_fit(&samples)?;
    write_json(&args.out_params, &json!({"a": params.a, "b": params.b}))?;

    let record = json!({
        "command": "calibrate",
        "prob_map": json_paths(&args.prob_map),
        "atlas_seg": json_paths(&args.atlas_seg),
        "target_seg": args.target_seg.to_string_lossy(),
        "mask": args.mask.to_string_lossy(),
        "epsilon": args.epsilon,
        "samples": samples.len(),
        "fitted": {"a": params.a, "b": params.b},
        "out_params": args.out_params.to_string_lossy(),
    });
    write_json(
        &args
            .report
            .unwrap_or_else(|| default_report(&args.out_params)),
        &record,
    )
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let cfg = OracleConfig {
        mode: match args.mode {
            ModeArg::G => OracleMode::G,
            ModeArg::Gs => OracleMode::Gs,
        },
        sigma: args.sigma,
        p_correct: args.p_correct,
        p_incorrect: args.p_incorrect,
        seed: args.seed,
    };
    cfg.validate()?;
    let target_seg = load_labels_strict(&args.target_seg)?;
    let atlas_segs = load_many(&args.atlas_seg, load_labels_strict)?;
    let probs = oracle_error_probs(&target_seg, &atlas_segs, &cfg)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut files = Vec::new();
    for (i, p) in probs.iter().enumerate() {
        let path = args.out_dir.join(format!("errprob_{i:03}.maf"));
        p.save(&path)?;
        files.push(path);
    }
    write_json(
        &args.out_dir.join("manifest.json"),
        &json!({"files": json_paths(&files)}),
    )?;

    let record = json!({
        "command": "oracle",
        "target_seg": args.target_seg.to_string_lossy(),
        "atlas_seg": json_paths(&args.atlas_seg),
        "mode": match cfg.mode { OracleMode::G => "g", OracleMode::Gs => "gs" },
        "sigma": cfg.sigma,
        "p_correct": cfg.p_correct,
        "p_incorrect": cfg.p_incorrect,
        "seed": cfg.seed,
        "out_dir": args.out_dir.to_string_lossy(),
        "files": json_paths(&files),
    });
    write_json(
        &args
            .report
            .unwrap_or_else(|| args.out_dir.join("report.json")),
        &record,
    )
}

fn cmd_tscore(args: TscoreArgs) -> Result<()> {
    let n = args.atlas_seg.len();
    let sources = [
        !args.prob_map.is_empty(),
        !args.error_map.is_empty(),
        !args.atlas_img.is_empty(),
    ];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(Error::Config(
            "exactly one error source is required: --prob-map, --error-map, or --atlas-img".into(),
        ));
    }
    ensure_count(n, args.prob_map.len(), "--prob-map")?;
    ensure_count(n, args.error_map.len(), "--error-map")?;
    ensure_count(n, args.atlas_img.len(), "--atlas-img")?;
    if args.patch_search && args.atlas_img.is_empty() {
        return Err(Error::Config(
            "--patch-search requires the intensity route (--atlas-img)".into(),
        ));
    }
    let score_cfg = IntensityScoreConfig {
        beta: args.beta,
        radius: args.radius,
    };
    score_cfg.validate()?;
    let pool = build_pool(args.threads)?;

    let target_seg = load_labels_strict(&args.target_seg)?;
    let atlas_segs = load_many(&args.atlas_seg, load_labels_strict)?;

    let tmap = if !args.prob_map.is_empty() {
        let probs = load_many(&args.prob_map, load_prob)?;
        let errors: Vec<ProbabilityVolume> = probs.iter().map(network_error_prob).collect();
        pool.install(|| tscore_map(&target_seg, &atlas_segs, &errors))?
    } else if !args.error_map.is_empty() {
        let errors = load_many(&args.error_map, load_prob)?;
        pool.install(|| tscore_map(&target_seg, &atlas_segs, &errors))?
    } else {
        let target = args.target.as_deref().ok_or_else(|| {
            Error::Config("--target (intensity volume) is required with --atlas-img".into())
        })?;
        let target = load_intensity(target)?;
        let atlas_imgs = load_many(&args.atlas_img, load_intensity)?;
        if args.patch_search {
            let search_cfg = PatchSearchConfig {
                search_radius: args.search_radius,
                patch_radius: args.patch_radius,
            };
            pool.install(|| -> Result<_> {
                let mut segs = Vec::with_capacity(n);
                let mut scores = Vec::with_capacity(n);
                for (img, seg) in atlas_imgs.iter().zip(&atlas_segs) {
                    let (s, sc) = patch_search_refine(&target, img, seg, &score_cfg, &search_cfg)?;
                    segs.push(s);
                    scores.push(sc);
                }
                tscore_map(&target_seg, &segs, &scores)
            })?
        } else {
            pool.install(|| -> Result<_> {
                let scores = atlas_imgs
                    .iter()
                    .map(|img| intensity_error_score(&target, img, &score_cfg))
                    .collect::<Result<Vec<_>>>()?;
                tscore_map(&target_seg, &atlas_segs, &scores)
            })?
        }
    };
    tmap.save(&args.out)?;

    let record = json!({
        "command": "tscore",
        "target_seg": args.target_seg.to_string_lossy(),
        "atlas_seg": json_paths(&args.atlas_seg),
        "prob_map": json_paths(&args.prob_map),
        "error_map": json_paths(&args.error_map),
        "atlas_img": json_paths(&args.atlas_img),
        "target": args.target.as_ref().map(|p| p.to_string_lossy().to_string()),
        "beta": args.beta,
        "radius": args.radius,
        "patch_search": args.patch_search,
        "search_radius": args.search_radius,
        "patch_radius": args.patch_radius,
        "threads": args.threads,
        "out": args.out.to_string_lossy(),
    });
    write_json(
        &args.report.unwrap_or_else(|| default_report(&args.out)),
        &record,
    )
}

fn cmd_dice(args: DiceArgs) -> Result<()> {
    let seg_a = load_labels(&args.seg_a)?;
    let seg_b = load_labels(&args.seg_b)?;
    let labels: BTreeSet<u16> = match &args.labels {
        Some(list) => list.iter().copied().collect(),
        None => seg_a
            .data()
            .iter()
            .chain(seg_b.data())
            .copied()
            .filter(|&l| l != 0 && l != UNASSIGNED)
            .collect(),
    };
    if labels.is_empty() {
        return Err(Error::InvalidValue(
            "no labels to evaluate: both inputs are background-only and --labels was not given"
                .into(),
        ));
    }
    let report = dice(&seg_a, &seg_b, &labels)?;
    let value = serde_json::to_value(&report).expect("report serialization");
    write_json(&args.out, &value)?;
    println!("average dice: {:.6}", report.average);

    let record = json!({
        "command": "dice",
        "seg_a": args.seg_a.to_string_lossy(),
        "seg_b": args.seg_b.to_string_lossy(),
        "labels": labels.iter().copied().collect::<Vec<u16>>(),
        "out": args.out.to_string_lossy(),
    });
    write_json(
        &args.report.unwrap_or_else(|| default_report(&args.out)),
        &record,
    )
}

fn read_dice_report(path: &Path) -> Result<DiceReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("invalid dice report: {e}"),
    })
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    if args.dice_json.len() < 2 {
        return Err(Error::Config(
            "--dice-json must be given at least twice: a reference and one comparison".into(),
        ));
    }
    if !(args.fdr > 0.0 && args.fdr < 1.0) {
        return Err(Error::Config(format!(
            "--fdr must lie in (0, 1), got {}",
            args.fdr
        )));
    }
    let reports = load_many(&args.dice_json, read_dice_report)?;
    let samples: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| r.per_label.values().copied().collect())
        .collect();

    let mut p_values = Vec::new();
    for other in &samples[1..] {
        let r = if args.one_sided {
            mann_whitney_u_one_sided(&samples[0], other)?
        } else {
            mann_whitney_u(&samples[0], other)?
        };
        p_values.push(r.p);
    }
    let rejected = benjamini_hochberg(&p_values, args.fdr)?;
    let rows: Vec<MethodComparison> = args.dice_json[1..]
        .iter()
        .zip(p_values.iter().zip(&rejected))
        .map(|(path, (&p_value, &rej))| MethodComparison {
            method: path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| path.to_string_lossy().to_string()),
            p_value,
            rejected: rej,
        })
        .collect();
    write_json(&args.out, &serde_json::to_value(&rows).expect("rows"))?;

    let record = json!({
        "command": "stats",
        "dice_json": json_paths(&args.dice_json),
        "fdr": args.fdr,
        "one_sided": args.one_sided,
        "out": args.out.to_string_lossy(),
    });
    write_json(
        &args.report.unwrap_or_else(|| default_report(&args.out)),
        &record,
    )
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        dims: Dims::new(args.dims[0], args.dims[1], args.dims[2])?,
        n_labels: args.labels,
        n_atlases: args.atlases,
        corruption_rate: args.corruption,
        intensity_noise_sigma: args.noise,
        seed: args.seed,
    };
    spec.validate()?;
    let ds = synth_dataset(&spec)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut files = Vec::new();
    let target_img = args.out_dir.join("target_img.maf");
    ds.target_image.save(&target_img)?;
    files.push(target_img);
    let target_seg = args.out_dir.join("target_seg.maf");
    ds.target_labels.save(&target_seg)?;
    files.push(target_seg);
    for (i, atlas) in ds.atlases.iter().enumerate() {
        let img = args.out_dir.join(format!("atlas_{i:03}_img.maf"));
        atlas.image.save(&img)?;
        files.push(img);
        let seg = args.out_dir.join(format!("atlas_{i:03}_seg.maf"));
        atlas.labels.save(&seg)?;
        files.push(seg);
    }
    write_json(
        &args.out_dir.join("manifest.json"),
        &json!({"files": json_paths(&files)}),
    )?;

    let record = json!({
        "command": "synth",
        "dims": args.dims,
        "labels": args.labels,
        "atlases": args.atlases,
        "corruption": args.corruption,
        "noise": args.noise,
        "seed": args.seed,
        "out_dir": args.out_dir.to_string_lossy(),
    });
    write_json(
        &args
            .report
            .unwrap_or_else(|| args.out_dir.join("report.json")),
        &record,
    )
}
