use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use splatpose::coarse::{coarse_estimate, nocs_to_correspondences, write_correspondences_csv};
use splatpose::experiment::{
    ground_truth_for_seed, synthetic_id, AblationTable, Experiment, Manifest, Suite, SuiteResult, TrialOutcome,
};
use splatpose::io::{
    load_kv, load_pose, load_rgb, overlay, read_json, save_frame, save_image, save_pose, save_rgb, write_json,
    ViewRecord, ViewSet,
};
use splatpose::metrics::{success_report, SuccessReport};
use splatpose::render::{rasterize, Frame, RenderMode};
use splatpose::scene::ply::{load_ply, save_ply};
use splatpose::GaussianModel;

/// Worker threads for frame and pixel parallelism; unset means one per core.
const THREADS_ENV: &str = "SPLATPOSE_THREADS";
const OVERLAY_ALPHA: f64 = 0.5;
const FAILURE_BORDER_PX: usize = 3;

#[derive(Parser)]
#[command(name = "splatpose", version, about = "Pose refinement for Gaussian-splat object models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic model and a set of ground-truth views.
    Synth(SynthArgs),
    /// Render a model at a pose.
    Render(RenderArgs),
    /// Coarse pose from a NOCS image.
    Coarse(CoarseArgs),
    /// Refine every view of a frame set, or a synthetic suite.
    Refine(RunArgs),
    /// Recompute a report from a results file.
    Eval(EvalArgs),
    /// Run refinement under each stage combination.
    Ablate(RunArgs),
    /// Summarize the reports found in an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; the seed list keeps its length.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Number of views; defaults to the length of the seed list.
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Pose JSON with a `T_m_c` matrix.
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "render")]
    stem: String,
}

#[derive(Args)]
struct CoarseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    nocs: PathBuf,
    /// Output pose JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also dump the decoded correspondences.
    #[arg(long)]
    correspondences: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Model PLY; synthesized from the config when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory written by `synth`; without it the suite is rendered in memory.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// `results.json` written by `refine`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of `refine`, `eval` or `ablate`.
    #[arg(long)]
    input: PathBuf,
}

/// Contents of `report.json`.
#[derive(Serialize, Deserialize)]
struct RunReport {
    label: String,
    frames: usize,
    failures: usize,
    failed_ids: Vec<String>,
    accepted: bool,
    mean_photometric_loss: Option<f64>,
    success: SuccessReport,
}

fn experiment(common: &Common) -> Result<Experiment> {
    let mut exp = Experiment::default();
    if let Some(p) = &common.config {
        let kv = load_kv(p)?;
        exp.apply(&kv).with_context(|| format!("in {}", p.display()))?;
    }
    if let Some(s) = common.seed {
        let n = exp.seeds.len() as u64;
        exp.seeds = (s..s + n).collect();
    }
    Ok(exp)
}

fn out_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<ExitCode> {
    let mut exp = experiment(&a.common)?;
    if let Some(n) = a.views {
        let s = exp.seeds[0];
        exp.seeds = (s..s + n as u64).collect();
    }
    exp.validate()?;
    out_dir(&a.out)?;
    let model = exp.model()?;
    let k = exp.intrinsics()?;
    save_ply(&model, a.out.join("model.ply"))?;
    let mut views = Vec::new();
    for &seed in &exp.seeds {
        let gt = ground_truth_for_seed(&exp, seed);
        let id = synthetic_id(seed);
        let frame = rasterize(&model, &gt, &k, RenderMode::All)?;
        save_frame(&frame, &a.out, &id)?;
        let nocs = rasterize(&model, &gt, &k, RenderMode::Nocs)?;
        save_rgb(&nocs, &a.out.join(format!("{id}_nocs.png")))?;
        views.push(ViewRecord { id, seed, t_m_c: gt });
    }
    let aabb = model.aabb().context("model is empty")?;
    write_json(
        &ViewSet {
            intrinsics: k,
            aabb,
            views,
        },
        &a.out.join("views.json"),
    )?;
    write_json(&exp.manifest(), &a.out.join("manifest.json"))?;
    println!("wrote {} views to {}", exp.seeds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(a: &RenderArgs) -> Result<ExitCode> {
    let exp = experiment(&a.common)?;
    let model = load_ply(&a.model)?;
    let k = exp.intrinsics()?;
    let t = load_pose(&a.pose)?;
    out_dir(&a.out)?;
    let frame = rasterize(&model, &t, &k, RenderMode::All)?;
    save_frame(&frame, &a.out, &a.stem)?;
    let nocs = rasterize(&model, &t, &k, RenderMode::Nocs)?;
    save_rgb(&nocs, &a.out.join(format!("{}_nocs.png", a.stem)))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_coarse(a: &CoarseArgs) -> Result<ExitCode> {
    let exp = experiment(&a.common)?;
    let model = load_ply(&a.model)?;
    let k = exp.intrinsics()?;
    let (w, h, rgb) = load_rgb(&a.nocs)?;
    let mut nocs = Frame::blank(w, h);
    nocs.rgb = rgb;
    let aabb = model.aabb().context("model is empty")?;
    if let Some(p) = &a.correspondences {
        let corrs = nocs_to_correspondences(&nocs, None, &aabb, exp.coarse.threshold)?;
        write_correspondences_csv(&corrs, BufWriter::new(File::create(p)?))?;
    }
    let res = coarse_estimate(&model, &nocs, &k, &exp.coarse)?;
    save_pose(&res.pose, Some(&aabb), &a.out)?;
    println!("{} inliers, reprojection rms {:.3} px", res.inliers.len(), res.rms_px);
    Ok(ExitCode::SUCCESS)
}

fn load_suite(exp: &Experiment, a: &RunArgs) -> Result<Suite> {
    let model: GaussianModel = match &a.model {
        Some(p) => load_ply(p)?,
        None => exp.model()?,
    };
    Ok(match &a.frames {
        Some(dir) => {
            let views: ViewSet = read_json(&dir.join("views.json"))?;
            Suite::from_views(exp, model, &views, dir)?
        }
        None => Suite::with_model(exp, model)?,
    })
}

fn is_success(o: &TrialOutcome, exp: &Experiment) -> bool {
    o.error
        .is_some_and(|e| o.failure.is_none() && e.rotation_deg < exp.thresholds.rotation_deg)
}

fn write_overlays(suite: &Suite, res: &SuiteResult, exp: &Experiment, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    for (trial, o) in suite.trials.iter().zip(&res.outcomes) {
        let img = match trial {
            Ok(setup) => {
                let pose = o.estimate.unwrap_or(setup.init);
                let render = rasterize(&suite.model, &pose, &suite.intrinsics, RenderMode::Color)?;
                let border = if is_success(o, exp) { 0 } else { FAILURE_BORDER_PX };
                overlay(&setup.frame, &render, OVERLAY_ALPHA, border)?
            }
            Err(_) => {
                let k = &suite.intrinsics;
                let blank = Frame::blank(k.width, k.height);
                overlay(&blank, &blank, OVERLAY_ALPHA, FAILURE_BORDER_PX)?
            }
        };
        save_image(&img, &dir.join(format!("{}.png", o.id)))?;
    }
    Ok(())
}

fn run_report(res: &SuiteResult, exp: &Experiment) -> RunReport {
    RunReport {
        label: res.label.clone(),
        frames: res.outcomes.len(),
        failures: res.failures,
        failed_ids: res
            .outcomes
            .iter()
            .filter(|o| o.failure.is_some())
            .map(|o| o.id.clone())
            .collect(),
        accepted: res.failures == 0 && exp.acceptance.met(&res.report),
        mean_photometric_loss: res.mean_photometric_loss,
        success: res.report.clone(),
    }
}

fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_json(report, &dir.join("report.json"))?;
    report
        .success
        .write_histogram_csv(BufWriter::new(File::create(dir.join("histogram.csv"))?))?;
    Ok(())
}

fn exit(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_refine(a: &RunArgs) -> Result<ExitCode> {
    let exp = experiment(&a.common)?;
    let suite = load_suite(&exp, a)?;
    out_dir(&a.out)?;
    let res = suite.run(&exp.refine, &exp.thresholds)?;
    write_json(&res, &a.out.join("results.json"))?;
    write_json(&exp.manifest(), &a.out.join("manifest.json"))?;
    res.write_timings_csv(BufWriter::new(File::create(a.out.join("timings.csv"))?))?;
    let traces = a.out.join("traces");
    out_dir(&traces)?;
    for o in &res.outcomes {
        o.trace
            .write_jsonl(BufWriter::new(File::create(traces.join(format!("{}.jsonl", o.id)))?))?;
    }
    write_overlays(&suite, &res, &exp, &a.out.join("overlays"))?;
    let report = run_report(&res, &exp);
    write_report(&report, &a.out)?;
    print_report(&report);
    for o in res.outcomes.iter().filter(|o| o.failure.is_some()) {
        eprintln!("{}: {}", o.id, o.failure.as_deref().unwrap_or_default());
    }
    Ok(exit(report.accepted))
}

fn cmd_eval(a: &EvalArgs) -> Result<ExitCode> {
    let exp = experiment(&a.common)?;
    let res: SuiteResult = read_json(&a.results)?;
    if res.outcomes.is_empty() {
        bail!("{} has no outcomes", a.results.display());
    }
    let errors: Vec<_> = res.outcomes.iter().map(TrialOutcome::scored_error).collect();
    let res = SuiteResult {
        report: success_report(&errors, res.report.diameter, &exp.thresholds)?,
        ..res
    };
    out_dir(&a.out)?;
    let report = run_report(&res, &exp);
    write_report(&report, &a.out)?;
    print_report(&report);
    Ok(exit(report.accepted))
}

fn cmd_ablate(a: &RunArgs) -> Result<ExitCode> {
    let exp = experiment(&a.common)?;
    let suite = load_suite(&exp, a)?;
    out_dir(&a.out)?;
    let table = AblationTable::run(&suite, &exp.refine, &exp.ablation_rows, &exp.thresholds)?;
    write_json(&table, &a.out.join("ablation.json"))?;
    table.write_csv(BufWriter::new(File::create(a.out.join("ablation.csv"))?))?;
    fs::write(a.out.join("ablation.txt"), table.to_text())?;
    write_json(&exp.manifest(), &a.out.join("manifest.json"))?;
    print!("{}", table.to_text());
    let failures: usize = table.rows.iter().map(|r| r.failures).sum();
    Ok(exit(failures == 0 && table.full_row_dominates() != Some(false)))
}

fn print_report(r: &RunReport) {
    let s = &r.success;
    println!("{}: {} frames, {} failed", r.label, r.frames, r.failures);
    println!(
        "  ADD(-S) < {:.0}% diam: {:.1}%   R < {} deg: {:.1}%   R < {} deg & t < {} m: {:.1}%",
        100.0 * s.thresholds.add_fraction,
        100.0 * s.add_rate,
        s.thresholds.rotation_deg,
        100.0 * s.rotation_rate,
        s.thresholds.rotation_deg,
        s.thresholds.translation_m,
        100.0 * s.rotation_translation_rate
    );
    if let (Some(mean), Some(med)) = (s.mean_rotation_deg, s.median_rotation_deg) {
        println!("  rotation error mean {mean:.3} deg, median {med:.3} deg");
    }
    if let Some(l) = r.mean_photometric_loss {
        println!("  mean photometric loss {l:.5}");
    }
    println!("  accepted: {}", r.accepted);
}

fn cmd_report(a: &ReportArgs) -> Result<ExitCode> {
    let mut found = false;
    let manifest = a.input.join("manifest.json");
    if manifest.exists() {
        let m: Manifest = read_json(&manifest)?;
        println!("config {} (version {}, {} seeds)", &m.config_hash[..12], m.version, m.seeds.len());
    }
    let report = a.input.join("report.json");
    if report.exists() {
        print_report(&read_json(&report)?);
        found = true;
    }
    let ablation = a.input.join("ablation.json");
    if ablation.exists() {
        let t: AblationTable = read_json(&ablation)?;
        print!("{}", t.to_text());
        if let Some(d) = t.full_row_dominates() {
            println!("full pipeline row best: {d}");
        }
        found = true;
    }
    if !found {
        bail!("no report.json or ablation.json in {}", a.input.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<ExitCode> {
        init_threads()?;
        match &cli.command {
            Command::Synth(a) => cmd_synth(a),
            Command::Render(a) => cmd_render(a),
            Command::Coarse(a) => cmd_coarse(a),
            Command::Refine(a) => cmd_refine(a),
            Command::Eval(a) => cmd_eval(a),
            Command::Ablate(a) => cmd_ablate(a),
            Command::Report(a) => cmd_report(a),
        }
    };
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
