//! Seeded trial suites: scene setup, ground-truth sampling, pose
//! perturbation, refinement runs, success reports and stage ablations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarse::{coarse_estimate, CoarseConfig};
use crate::error::{Error, Result};
use crate::io::{load_frame, load_rgb, ViewSet};
use crate::lie::exp_so3;
use crate::metrics::{full_errors, success_report, PoseError, SuccessReport, Thresholds};
use crate::refine::{refine_pipeline, RefineConfig, RefineTrace, StageReport};
use crate::render::{rasterize, CameraIntrinsics, Frame, RenderMode};
use crate::scene::ply::load_ply;
use crate::scene::synth::{synth_scene, Shape, SynthSpec};
use crate::{GaussianModel, RigidTransform};

/// Bounds of the random offset applied to the ground truth. The rotation
/// is composed on the object side; the translation offset is added and the
/// result scaled by `1 + depth_bias` along the camera ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    /// Fraction of the model diameter.
    pub translation_frac: f64,
    pub depth_bias: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translation_frac: 0.1,
            depth_bias: 0.05,
        }
    }
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.translation_frac >= 0.0 && self.depth_bias > -1.0) {
            return Err(Error::Config(format!("bad perturbation bounds {self:?}")));
        }
        Ok(())
    }

    /// Rotation angle and translation magnitude are uniform in their
    /// bounds; axis and direction are uniform on the sphere.
    pub fn apply(&self, gt: &RigidTransform, diameter: f64, rng: &mut impl Rng) -> RigidTransform {
        let axis = unit_vector(rng);
        let angle = rng.random::<f64>() * self.rotation_deg.to_radians();
        let dir = unit_vector(rng);
        let mag = rng.random::<f64>() * self.translation_frac * diameter;
        RigidTransform::from_parts(
            gt.rotation * exp_so3(&(axis * angle)),
            (gt.translation + dir * mag) * (1.0 + self.depth_bias),
        )
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    loop {
        let q = Vector4::<f64>::from_fn(|_, _| StandardNormal.sample(rng));
        if q.norm() > 1e-9 {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q));
            return *q.to_rotation_matrix().matrix();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    /// Perturbed ground truth.
    Perturb,
    /// PnP on a rendered NOCS image with per-channel Gaussian noise.
    Nocs { noise: f64 },
}

/// Minimum rates for an experiment to count as passing. Unset rates are
/// not checked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub add_rate: Option<f64>,
    pub rotation_rate: Option<f64>,
    pub rotation_translation_rate: Option<f64>,
}

impl Acceptance {
    pub fn met(&self, r: &SuccessReport) -> bool {
        let ok = |min: Option<f64>, got: f64| min.is_none_or(|m| got >= m);
        ok(self.add_rate, r.add_rate)
            && ok(self.rotation_rate, r.rotation_rate)
            && ok(self.rotation_translation_rate, r.rotation_translation_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub synth: SynthSpec,
    /// Loaded instead of synthesizing when set.
    pub model_path: Option<PathBuf>,
    pub resolution: usize,
    pub focal: f64,
    pub distance: f64,
    /// Ground-truth centers are offset laterally by up to this much.
    pub lateral: f64,
    pub perturbation: Perturbation,
    pub init: InitMode,
    /// Observed colors are scaled by a factor drawn from this range.
    pub brightness: Option<[f64; 2]>,
    pub seeds: Vec<u64>,
    pub refine: RefineConfig,
    pub coarse: CoarseConfig,
    pub thresholds: Thresholds,
    pub acceptance: Acceptance,
    pub ablation_rows: Vec<StageToggles>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            synth: SynthSpec {
                shape: Shape::Cube { side: 0.1 },
                count: 2000,
                seed: 1,
                textureless: false,
            },
            model_path: None,
            resolution: 128,
            focal: 160.0,
            distance: 0.5,
            lateral: 0.02,
            perturbation: Perturbation::default(),
            init: InitMode::Perturb,
            brightness: None,
            seeds: (0..50).collect(),
            refine: RefineConfig::default(),
            coarse: CoarseConfig::default(),
            thresholds: Thresholds::default(),
            acceptance: Acceptance::default(),
            ablation_rows: ABLATION_ROWS.to_vec(),
        }
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{v}`"));
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    v.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn parse_range(v: &str) -> Result<[f64; 2]> {
    let bad = || Error::Config(format!("bad range `{v}`, expected `lo,hi`"));
    let (a, b) = v.split_once(',').ok_or_else(bad)?;
    let r = [a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?];
    if !(r[0] <= r[1]) {
        return Err(bad());
    }
    Ok(r)
}

impl Experiment {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let c = (self.resolution as f64 - 1.0) / 2.0;
        CameraIntrinsics::new(self.focal, self.focal, c, c, self.resolution, self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        self.perturbation.validate()?;
        self.refine.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !(self.distance > 0.0) || !(self.lateral >= 0.0) {
            return Err(Error::Config("distance must be positive and lateral non-negative".into()));
        }
        if let InitMode::Nocs { noise } = self.init {
            if !(noise >= 0.0) {
                return Err(Error::Config("nocs_noise must be non-negative".into()));
            }
        }
        self.intrinsics().map(|_| ())
    }

    /// Overrides fields from flat `key = value` entries. Keys prefixed with
    /// `refine.` go to the refinement config.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<f64>> {
            if v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        self.refine.apply(entries, Some("refine."))?;
        let mut nocs_noise = None;
        for (k, v) in entries {
            let v = v.as_str();
            match k.as_str() {
                k if k.starts_with("refine.") => {}
                "shape" => self.synth.shape = v.parse()?,
                "count" => self.synth.count = num(k, v)?,
                "model_seed" => self.synth.seed = num(k, v)?,
                "textureless" => self.synth.textureless = num(k, v)?,
                "model" => self.model_path = Some(PathBuf::from(v)),
                "resolution" => self.resolution = num(k, v)?,
                "focal" => self.focal = num(k, v)?,
                "distance" => self.distance = num(k, v)?,
                "lateral" => self.lateral = num(k, v)?,
                "rotation_deg" => self.perturbation.rotation_deg = num(k, v)?,
                "translation_frac" => self.perturbation.translation_frac = num(k, v)?,
                "depth_bias" => self.perturbation.depth_bias = num(k, v)?,
                "init" => match v {
                    "perturb" => self.init = InitMode::Perturb,
                    "nocs" => self.init = InitMode::Nocs { noise: 0.0 },
                    _ => return Err(Error::Config(format!("unknown init mode `{v}`"))),
                },
                "nocs_noise" => nocs_noise = Some(num(k, v)?),
                "brightness" => self.brightness = if v == "none" { None } else { Some(parse_range(v)?) },
                "seeds" => self.seeds = parse_seeds(v)?,
                "coarse.threshold" => self.coarse.threshold = num(k, v)?,
                "coarse.hypotheses" => self.coarse.pnp.hypotheses = num(k, v)?,
                "coarse.gate_px" => self.coarse.pnp.gate_px = num(k, v)?,
                "coarse.min_inliers" => self.coarse.pnp.min_inliers = num(k, v)?,
                "coarse.refine_iters" => self.coarse.pnp.refine_iters = num(k, v)?,
                "coarse.seed" => self.coarse.pnp.seed = num(k, v)?,
                "threshold.add_fraction" => self.thresholds.add_fraction = num(k, v)?,
                "threshold.rotation_deg" => self.thresholds.rotation_deg = num(k, v)?,
                "threshold.translation_m" => self.thresholds.translation_m = num(k, v)?,
                "symmetric" => self.thresholds.symmetric = num(k, v)?,
                "accept.add_rate" => self.acceptance.add_rate = opt(k, v)?,
                "accept.rotation_rate" => self.acceptance.rotation_rate = opt(k, v)?,
                "accept.rotation_translation_rate" => self.acceptance.rotation_translation_rate = opt(k, v)?,
                "ablation.rows" => {
                    self.ablation_rows = v
                        .split(';')
                        .map(|s| StageToggles::parse(s.trim()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(Error::Config(format!("unknown experiment key `{k}`"))),
            }
        }
        if let Some(n) = nocs_noise {
            self.init = InitMode::Nocs { noise: n };
        }
        self.validate()
    }

    /// Loads the model file or synthesizes the scene.
    pub fn model(&self) -> Result<GaussianModel> {
        match &self.model_path {
            Some(p) => load_ply(p),
            None => synth_scene(&self.synth),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("experiment serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config_hash: self.config_hash(),
            seeds: self.seeds.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: self.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub experiment: Experiment,
}

/// One seeded trial before refinement.
#[derive(Clone, Debug)]
pub struct TrialSetup {
    pub id: String,
    pub seed: u64,
    pub gt: RigidTransform,
    pub init: RigidTransform,
    pub brightness: f64,
    pub frame: Frame,
}

/// A trial whose observation or initial pose could not be produced.
#[derive(Clone, Debug)]
pub struct FailedSetup {
    pub id: String,
    pub seed: u64,
    pub message: String,
}

pub fn synthetic_id(seed: u64) -> String {
    format!("seed_{seed:04}")
}

/// Ground-truth pose: uniform rotation, center at `distance` on the
/// optical axis offset laterally.
pub fn sample_ground_truth(exp: &Experiment, rng: &mut impl Rng) -> RigidTransform {
    let r = random_rotation(rng);
    let l = exp.lateral;
    let x = rng.random_range(-l..=l);
    let y = rng.random_range(-l..=l);
    RigidTransform::from_parts(r, Vector3::new(x, y, exp.distance))
}

/// The ground truth [`setup_trial`] uses for `seed`.
pub fn ground_truth_for_seed(exp: &Experiment, seed: u64) -> RigidTransform {
    sample_ground_truth(exp, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Renders the observation at the sampled ground truth and draws the
/// initial pose for one seed.
pub fn setup_trial(exp: &Experiment, model: &GaussianModel, k: &CameraIntrinsics, seed: u64) -> Result<TrialSetup> {
    let gt = ground_truth_for_seed(exp, seed);
    let frame = rasterize(model, &gt, k, RenderMode::All)?;
    let nocs = match exp.init {
        InitMode::Nocs { .. } => Some(rasterize(model, &gt, k, RenderMode::Nocs)?),
        InitMode::Perturb => None,
    };
    finish_setup(exp, model, k, synthetic_id(seed), seed, gt, frame, nocs)
}

/// Brightness change and initial pose for an observation with known
/// ground truth. The random stream matches [`setup_trial`] for the same
/// seed, so files written from a synthetic suite reproduce it.
#[allow(clippy::too_many_arguments)]
pub fn finish_setup(
    exp: &Experiment,
    model: &GaussianModel,
    k: &CameraIntrinsics,
    id: String,
    seed: u64,
    gt: RigidTransform,
    mut frame: Frame,
    nocs: Option<Frame>,
) -> Result<TrialSetup> {
    frame.check_size(k)?;
    if frame.mask_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_ground_truth(exp, &mut rng);
    let brightness = match exp.brightness {
        Some([lo, hi]) if hi > lo => rng.random_range(lo..=hi),
        Some([lo, _]) => lo,
        None => 1.0,
    };
    frame.rebrighten(brightness);
    let init = match exp.init {
        InitMode::Perturb => exp.perturbation.apply(&gt, model.diameter(), &mut rng),
        InitMode::Nocs { noise } => {
            let mut nocs = nocs.ok_or_else(|| Error::Config("NOCS initialization needs a NOCS image".into()))?;
            add_nocs_noise(&mut nocs, noise, &mut rng);
            coarse_estimate(model, &nocs, k, &exp.coarse)
                .map_err(|e| e.in_stage("coarse"))?
                .pose
        }
    };
    Ok(TrialSetup {
        id,
        seed,
        gt,
        init,
        brightness,
        frame,
    })
}

/// Adds zero-mean Gaussian noise to the covered pixels of a NOCS render.
pub fn add_nocs_noise(nocs: &mut Frame, sigma: f64, rng: &mut impl Rng) {
    if !(sigma > 0.0) {
        return;
    }
    let dist = Normal::new(0.0, sigma).expect("positive sigma");
    for i in 0..nocs.pixel_count() {
        if nocs.in_mask(i) {
            for c in &mut nocs.rgb[3 * i..3 * i + 3] {
                *c = (*c + dist.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub id: String,
    pub seed: u64,
    #[serde(with = "crate::io::pose_serde")]
    pub gt: RigidTransform,
    #[serde(with = "crate::io::pose_serde")]
    pub init: RigidTransform,
    pub brightness: f64,
    pub init_error: PoseError,
    /// Absent when the trial failed.
    #[serde(default, with = "opt_pose")]
    pub estimate: Option<RigidTransform>,
    pub error: Option<PoseError>,
    /// `lambda * L1 + (1 - lambda) * DSSIM` at the final pose.
    pub photometric_loss: Option<f64>,
    pub stages: Vec<StageReport>,
    /// The refined pose scored worse than the initial one, which was kept.
    #[serde(default)]
    pub kept_input: bool,
    pub failure: Option<String>,
    /// Wall time; kept out of reports so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub trace: RefineTrace,
}

mod opt_pose {
    use super::RigidTransform;
    use crate::io::pose_serde::{from_rows, to_rows};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<RigidTransform>, s: S) -> Result<S::Ok, S::Error> {
        t.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<RigidTransform>, D::Error> {
        match Option::<[[f64; 4]; 4]>::deserialize(d)? {
            Some(rows) => from_rows(&rows).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

impl TrialOutcome {
    /// Error used for success rates; failures never pass.
    pub fn scored_error(&self) -> PoseError {
        self.error.unwrap_or(PoseError {
            rotation_deg: f64::INFINITY,
            translation_m: f64::INFINITY,
            add: f64::INFINITY,
            add_s: f64::INFINITY,
        })
    }
}

fn failed_outcome(f: &FailedSetup) -> TrialOutcome {
    let id = RigidTransform::identity();
    TrialOutcome {
        id: f.id.clone(),
        seed: f.seed,
        gt: id,
        init: id,
        brightness: 1.0,
        init_error: PoseError::default(),
        estimate: None,
        error: None,
        photometric_loss: None,
        stages: Vec::new(),
        kept_input: false,
        failure: Some(f.message.clone()),
        seconds: 0.0,
        trace: RefineTrace::default(),
    }
}

/// Refines one prepared trial.
pub fn run_trial(
    model: &GaussianModel,
    k: &CameraIntrinsics,
    setup: &TrialSetup,
    cfg: &RefineConfig,
) -> TrialOutcome {
    let start = Instant::now();
    let init_error = full_errors(&model.positions, &setup.gt, &setup.init).unwrap_or_default();
    let mut out = TrialOutcome {
        id: setup.id.clone(),
        seed: setup.seed,
        gt: setup.gt,
        init: setup.init,
        brightness: setup.brightness,
        init_error,
        estimate: None,
        error: None,
        photometric_loss: None,
        stages: Vec::new(),
        kept_input: false,
        failure: None,
        seconds: 0.0,
        trace: RefineTrace::default(),
    };
    match refine_pipeline(model, &setup.frame, k, &setup.init, cfg) {
        Ok(res) => {
            out.error = full_errors(&model.positions, &setup.gt, &res.pose).ok();
            out.estimate = Some(res.pose);
            out.photometric_loss = res
                .final_loss
                .map(|l| cfg.lambda * l.image + (1.0 - cfg.lambda) * l.dssim);
            out.stages = res.stages;
            out.kept_input = res.kept_input;
            out.trace = res.trace;
        }
        Err(e) => out.failure = Some(e.to_string()),
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub label: String,
    pub outcomes: Vec<TrialOutcome>,
    pub report: SuccessReport,
    pub failures: usize,
    /// Over trials that produced a loss.
    pub mean_photometric_loss: Option<f64>,
}

impl SuiteResult {
    pub fn write_timings_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        writeln!(w, "id,seed,seconds").map_err(io)?;
        for o in &self.outcomes {
            writeln!(w, "{},{},{:.4}", o.id, o.seed, o.seconds).map_err(io)?;
        }
        Ok(())
    }
}

/// A model, its camera and the prepared trials of an experiment.
pub struct Suite {
    pub model: GaussianModel,
    pub intrinsics: CameraIntrinsics,
    pub diameter: f64,
    /// Sorted by id.
    pub trials: Vec<std::result::Result<TrialSetup, FailedSetup>>,
}

impl Suite {
    pub fn prepare(exp: &Experiment) -> Result<Self> {
        exp.validate()?;
        let model = exp.model()?;
        Self::with_model(exp, model)
    }

    pub fn with_model(exp: &Experiment, model: GaussianModel) -> Result<Self> {
        let k = exp.intrinsics()?;
        let trials = exp
            .seeds
            .par_iter()
            .map(|&s| {
                setup_trial(exp, &model, &k, s).map_err(|e| FailedSetup {
                    id: synthetic_id(s),
                    seed: s,
                    message: e.to_string(),
                })
            })
            .collect();
        Ok(Self::sorted(model, k, trials))
    }

    /// Trials from a view set on disk. Each view needs `<id>_rgb.png`,
    /// `<id>_depth.png` and `<id>_mask.png` in `dir`, plus `<id>_nocs.png`
    /// for NOCS initialization. A view with missing or broken files fails
    /// alone.
    pub fn from_views(exp: &Experiment, model: GaussianModel, views: &ViewSet, dir: &Path) -> Result<Self> {
        exp.validate()?;
        let k = views.intrinsics;
        k.validate()?;
        let trials = views
            .views
            .par_iter()
            .map(|v| {
                let file = |kind: &str| dir.join(format!("{}_{kind}.png", v.id));
                let frame = load_frame(&file("rgb"), Some(&file("depth")), Some(&file("mask")))?;
                let nocs = match exp.init {
                    InitMode::Nocs { .. } => {
                        let (w, h, rgb) = load_rgb(&file("nocs"))?;
                        let mut f = Frame::blank(w, h);
                        f.rgb = rgb;
                        Some(f)
                    }
                    InitMode::Perturb => None,
                };
                finish_setup(exp, &model, &k, v.id.clone(), v.seed, v.t_m_c, frame, nocs)
            })
            .zip(&views.views)
            .map(|(r, v)| {
                r.map_err(|e| FailedSetup {
                    id: v.id.clone(),
                    seed: v.seed,
                    message: e.to_string(),
                })
            })
            .collect();
        Ok(Self::sorted(model, k, trials))
    }

    fn sorted(
        model: GaussianModel,
        intrinsics: CameraIntrinsics,
        mut trials: Vec<std::result::Result<TrialSetup, FailedSetup>>,
    ) -> Self {
        let key = |t: &std::result::Result<TrialSetup, FailedSetup>| match t {
            Ok(s) => s.id.clone(),
            Err(f) => f.id.clone(),
        };
        trials.sort_by_key(key);
        Self {
            diameter: model.diameter(),
            model,
            intrinsics,
            trials,
        }
    }

    /// Runs every trial under `cfg`; trials are independent and results
    /// come back in seed order.
    pub fn run(&self, cfg: &RefineConfig, thresholds: &Thresholds) -> Result<SuiteResult> {
        let outcomes: Vec<TrialOutcome> = self
            .trials
            .par_iter()
            .map(|t| match t {
                Ok(setup) => run_trial(&self.model, &self.intrinsics, setup, cfg),
                Err(f) => failed_outcome(f),
            })
            .collect();
        summarize(cfg.stage_label(), outcomes, self.diameter, thresholds)
    }
}

pub fn summarize(label: String, outcomes: Vec<TrialOutcome>, diameter: f64, th: &Thresholds) -> Result<SuiteResult> {
    let errors: Vec<PoseError> = outcomes.iter().map(TrialOutcome::scored_error).collect();
    let report = success_report(&errors, diameter, th)?;
    let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.photometric_loss).collect();
    Ok(SuiteResult {
        label,
        failures: outcomes.iter().filter(|o| o.failure.is_some()).count(),
        mean_photometric_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        report,
        outcomes,
    })
}

/// Which refinement stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub gs_icp: bool,
    pub camera: bool,
    pub object: bool,
    pub gs_light: bool,
}

const fn row(gs_icp: bool, camera: bool, object: bool, gs_light: bool) -> StageToggles {
    StageToggles {
        gs_icp,
        camera,
        object,
        gs_light,
    }
}

/// Coarse only, each stage alone, every pair, every triple with GS-ICP,
/// then everything.
pub const ABLATION_ROWS: [StageToggles; 15] = [
    row(false, false, false, false),
    row(true, false, false, false),
    row(false, true, false, false),
    row(false, false, true, false),
    row(false, false, false, true),
    row(true, true, false, false),
    row(true, false, true, false),
    row(true, false, false, true),
    row(false, true, true, false),
    row(false, true, false, true),
    row(false, false, true, true),
    row(true, true, true, false),
    row(true, true, false, true),
    row(true, false, true, true),
    row(true, true, true, true),
];

impl StageToggles {
    pub const ALL: Self = row(true, true, true, true);

    pub fn configure(&self, base: &RefineConfig) -> RefineConfig {
        RefineConfig {
            gs_icp_enabled: self.gs_icp,
            camera_enabled: self.camera,
            object_enabled: self.object,
            gs_light_enabled: self.gs_light,
            ..*base
        }
    }

    pub fn label(&self) -> String {
        self.configure(&RefineConfig::default()).stage_label()
    }

    /// Inverse of [`StageToggles::label`].
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = row(false, false, false, false);
        if s == "coarse" {
            return Ok(t);
        }
        for part in s.split('+') {
            match part.trim() {
                "icp" => t.gs_icp = true,
                "cam" => t.camera = true,
                "obj" => t.object = true,
                "light" => t.gs_light = true,
                p => return Err(Error::Config(format!("unknown stage `{p}` in `{s}`"))),
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: StageToggles,
    pub label: String,
    pub report: SuccessReport,
    pub failures: usize,
    pub mean_photometric_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn run(suite: &Suite, base: &RefineConfig, rows: &[StageToggles], th: &Thresholds) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|t| {
                let res = suite.run(&t.configure(base), th)?;
                Ok(AblationRow {
                    toggles: *t,
                    label: t.label(),
                    report: res.report,
                    failures: res.failures,
                    mean_photometric_loss: res.mean_photometric_loss,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Whether the all-stages row scores at least as well as every other
    /// row on ADD(-S) and on rotation. `None` without such a row.
    pub fn full_row_dominates(&self) -> Option<bool> {
        let full = self.rows.iter().find(|r| r.toggles == StageToggles::ALL)?;
        Some(self.rows.iter().all(|r| {
            full.report.add_rate >= r.report.add_rate && full.report.rotation_rate >= r.report.rotation_rate
        }))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        writeln!(w, "gs_icp,camera,object,gs_light,label,add_rate,rotation_rate,rotation_translation_rate,failures")
            .map_err(io)?;
        for r in &self.rows {
            let t = r.toggles;
            writeln!(
                w,
                "{},{},{},{},{},{:.4},{:.4},{:.4},{}",
                t.gs_icp as u8,
                t.camera as u8,
                t.object as u8,
                t.gs_light as u8,
                r.label,
                r.report.add_rate,
                r.report.rotation_rate,
                r.report.rotation_translation_rate,
                r.failures
            )
            .map_err(io)?;
        }
        Ok(())
    }

    /// Fixed-width text table with one bullet column per stage.
    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "." };
        let mut s = String::from("icp cam obj light | ADD(-S)   R<5deg  R<5deg&t<1cm | label\n");
        for r in &self.rows {
            let t = r.toggles;
            s += &format!(
                " {}   {}   {}    {}   | {:6.1}%  {:6.1}%  {:6.1}%       | {}\n",
                mark(t.gs_icp),
                mark(t.camera),
                mark(t.object),
                mark(t.gs_light),
                100.0 * r.report.add_rate,
                100.0 * r.report.rotation_rate,
                100.0 * r.report.rotation_translation_rate,
                r.label
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rotation_error;

    #[test]
    fn perturbation_respects_bounds() {
        let p = Perturbation {
            rotation_deg: 15.0,
            translation_frac: 0.1,
            depth_bias: 0.0,
        };
        let gt = RigidTransform::from_parts(random_rotation(&mut ChaCha8Rng::seed_from_u64(3)), Vector3::new(0.0, 0.0, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = p.apply(&gt, 0.2, &mut rng);
            assert!(rotation_error(&gt.rotation, &t.rotation).to_degrees() <= 15.0 + 1e-9);
            assert!((t.translation - gt.translation).norm() <= 0.02 + 1e-12);
        }
    }

    #[test]
    fn labels_roundtrip_and_rows_are_distinct() {
        for (i, r) in ABLATION_ROWS.iter().enumerate() {
            assert_eq!(StageToggles::parse(&r.label()).unwrap(), *r);
            assert!(ABLATION_ROWS[..i].iter().all(|q| q != r));
        }
        assert!(StageToggles::parse("icp+warp").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3..6").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_seeds("1, 9").unwrap(), vec![1, 9]);
        assert!(parse_seeds("a").is_err());
    }
}
