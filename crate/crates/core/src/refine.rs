//! Render-and-compare refinement on SE(3): a camera stage (left
//! perturbation), an object stage (right perturbation) with optional
//! spherical-harmonic color adaptation, and the pipeline that runs them
//! after ray-cast ICP.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{gs_icp, GsIcpConfig, GsIcpResult, GsIcpStatus};
use crate::render::{evaluate, CameraIntrinsics, Frame, GradientRequest, LossOutput, LossWeights, Side};
use crate::scene::sh::{ShCoeffs, SH_COEFFS};
use crate::{GaussianModel, RigidTransform, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: AdamParams, len: usize) -> Self {
        Self {
            lr,
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Descent step for gradient `g` (to be added to the parameters).
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.m.len(), "gradient length");
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        g.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                -self.lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub learning_rate: f64,
    pub camera_iters: usize,
    pub object_iters: usize,
    pub lambda: f64,
    pub beta: f64,
    pub gs_icp_enabled: bool,
    pub camera_enabled: bool,
    pub object_enabled: bool,
    pub gs_light_enabled: bool,
    pub gs_light_lr: f64,
    /// Camera stage moves only the rotation part of the twist.
    pub camera_rotation_only: bool,
    pub convergence_tol: f64,
    /// Consecutive small steps that end a stage early.
    pub patience: usize,
    pub adam: AdamParams,
    pub icp: GsIcpConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            camera_iters: 75,
            object_iters: 100,
            lambda: 0.8,
            beta: 0.1,
            gs_icp_enabled: true,
            camera_enabled: true,
            object_enabled: true,
            gs_light_enabled: true,
            gs_light_lr: 0.01,
            camera_rotation_only: false,
            convergence_tol: 1e-7,
            patience: 5,
            adam: AdamParams::default(),
            icp: GsIcpConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn total_iters(&self) -> usize {
        self.camera_iters + self.object_iters
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.gs_light_lr > 0.0) {
            return bad(format!("gs_light_lr must be positive, got {}", self.gs_light_lr));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.beta >= 0.0) {
            return bad(format!("bad loss weights lambda={} beta={}", self.lambda, self.beta));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative".into());
        }
        if self.icp.pixel_stride == 0 {
            return bad("icp_pixel_stride must be at least 1".into());
        }
        Ok(())
    }

    /// Sets one `key = value` entry. `total_iters` keeps the 75:100 split
    /// unless the stage counts are also given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad flag `{v}` for `{key}`"))),
            }
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "total_iters" => {
                let n: usize = num(key, value)?;
                self.camera_iters = (n * 75 + 87) / 175;
                self.object_iters = n - self.camera_iters;
            }
            "camera_iters" => self.camera_iters = num(key, value)?,
            "object_iters" => self.object_iters = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gs_icp" | "gs_icp_enabled" => self.gs_icp_enabled = flag(key, value)?,
            "camera" | "camera_enabled" => self.camera_enabled = flag(key, value)?,
            "object" | "object_enabled" => self.object_enabled = flag(key, value)?,
            "gs_light" | "gs_light_enabled" => self.gs_light_enabled = flag(key, value)?,
            "gs_light_lr" => self.gs_light_lr = num(key, value)?,
            "camera_rotation_only" => self.camera_rotation_only = flag(key, value)?,
            "convergence_tol" => self.convergence_tol = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "adam_beta1" => self.adam.beta1 = num(key, value)?,
            "adam_beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "icp_epsilon" => {
                self.icp.epsilon = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "icp_pixel_stride" => self.icp.pixel_stride = num(key, value)?,
            "icp_max_iters" => self.icp.icp.max_iters = num(key, value)?,
            "icp_tol" => self.icp.icp.tol = num(key, value)?,
            "icp_gate" => self.icp.icp.gate = num(key, value)?,
            "icp_max_rotation_deg" => self.icp.max_rotation_deg = num(key, value)?,
            "icp_max_residual_frac" => self.icp.max_residual_frac = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown refine key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every entry of a parsed config, ignoring keys without the
    /// given prefix when one is set.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>, prefix: Option<&str>) -> Result<()> {
        for (k, v) in entries {
            let key = match prefix {
                Some(p) => match k.strip_prefix(p) {
                    Some(rest) => rest,
                    None => continue,
                },
                None => k,
            };
            self.set(key, v)?;
        }
        self.validate()
    }

    /// The stage toggles as a short label, e.g. `icp+cam+obj+light`.
    pub fn stage_label(&self) -> String {
        let parts: Vec<&str> = [
            (self.gs_icp_enabled, "icp"),
            (self.camera_enabled, "cam"),
            (self.object_enabled, "obj"),
            (self.gs_light_enabled, "light"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "coarse".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Camera,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub iter: usize,
    /// Loss at the pose before this iteration's step.
    pub loss: f64,
    pub best_loss: f64,
    pub step_norm: f64,
    pub sh_updated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub records: Vec<TraceRecord>,
}

impl RefineTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: RefineTrace) {
        self.records.extend(other.records);
    }

    /// One JSON object per record.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

/// Adam state for all SH coefficients of a model.
#[derive(Clone, Debug)]
pub struct GsLight {
    adam: Adam,
}

impl GsLight {
    pub fn new(model: &GaussianModel, lr: f64, params: AdamParams) -> Self {
        Self {
            adam: Adam::new(lr, params, model.len() * 3 * SH_COEFFS),
        }
    }

    /// Applies one update from an SH gradient. Only `model.sh` changes.
    pub fn apply(&mut self, model: &mut GaussianModel, grad: &[ShCoeffs<f64>]) {
        let flat: Vec<f64> = grad.iter().flat_map(|g| g.iter().flatten().copied()).collect();
        let step = self.adam.step(&flat);
        for (coeffs, s) in model.sh.iter_mut().zip(step.chunks_exact(3 * SH_COEFFS)) {
            for c in 0..3 {
                for j in 0..SH_COEFFS {
                    coeffs[c][j] += s[c * SH_COEFFS + j];
                }
            }
        }
    }
}

/// One color-adaptation step at pose `t`. Returns the loss before the step.
pub fn gs_light_step(
    model: &mut GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t: &RigidTransform,
    weights: &LossWeights,
    state: &mut GsLight,
) -> Result<LossOutput> {
    let e = evaluate(model, t, k, frame, weights, GradientRequest { pose: None, sh: true })?;
    state.apply(model, e.sh_grad.as_deref().expect("sh gradient requested"));
    Ok(e.loss)
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub pose: RigidTransform,
    pub loss: f64,
    pub trace: RefineTrace,
}

fn descend(
    model: &mut GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t_in: &RigidTransform,
    cfg: &RefineConfig,
    stage: Stage,
    light: Option<&mut GsLight>,
) -> Result<StageOutput> {
    let (side, iters) = match stage {
        Stage::Camera => (Side::Left, cfg.camera_iters),
        Stage::Object => (Side::Right, cfg.object_iters),
    };
    let weights = cfg.weights();
    let mut light = light;
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam, 6);
    let mut t = *t_in;
    let mut best: Option<(f64, RigidTransform)> = None;
    let mut trace = RefineTrace::default();
    let mut quiet = 0;
    for iter in 0..iters {
        let request = GradientRequest {
            pose: Some(side),
            sh: light.is_some(),
        };
        let e = evaluate(model, &t, k, frame, &weights, request)?;
        let loss = e.loss.total;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, t));
        }
        let mut g = e.pose_grad.expect("pose gradient requested");
        if stage == Stage::Camera && cfg.camera_rotation_only {
            g.fixed_rows_mut::<3>(0).fill(0.0);
        }
        let step = Vector6::from_vec(adam.step(g.as_slice()));
        let tau = Twist::from_vector(&step);
        t = side.perturb(&t, &tau).orthonormalized();
        let sh_updated = if let (Some(l), Some(sg)) = (light.as_deref_mut(), e.sh_grad.as_deref()) {
            l.apply(model, sg);
            true
        } else {
            false
        };
        let step_norm = step.norm();
        trace.records.push(TraceRecord {
            stage,
            iter,
            loss,
            best_loss: best.as_ref().map_or(loss, |b| b.0),
            step_norm,
            sh_updated,
        });
        quiet = if step_norm < cfg.convergence_tol { quiet + 1 } else { 0 };
        if cfg.patience > 0 && quiet >= cfg.patience {
            break;
        }
    }
    if !trace.is_empty() || best.is_none() {
        let e = evaluate(model, &t, k, frame, &weights, GradientRequest::default())?;
        if best.as_ref().is_none_or(|(b, _)| e.loss.total < *b) {
            best = Some((e.loss.total, t));
        }
    }
    let (loss, pose) = best.expect("at least one evaluation");
    Ok(StageOutput { pose, loss, trace })
}

/// Moves the camera: `T <- exp(step) * T` on left-perturbation gradients.
/// Returns the lowest-loss pose visited.
pub fn camera_refine(
    model: &GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t_in: &RigidTransform,
    cfg: &RefineConfig,
) -> Result<StageOutput> {
    let mut m = model.clone();
    descend(&mut m, frame, k, t_in, cfg, Stage::Camera, None)
}

/// Moves the object: `T <- T * exp(step)` on right-perturbation gradients,
/// with one color step after every pose step when `light` is given.
pub fn object_refine(
    model: &mut GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t_in: &RigidTransform,
    cfg: &RefineConfig,
    light: Option<&mut GsLight>,
) -> Result<StageOutput> {
    descend(model, frame, k, t_in, cfg, Stage::Object, light)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    GsIcp,
    Camera,
    Object,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    #[serde(with = "crate::io::pose_serde")]
    pub pose: RigidTransform,
    /// Set when the stage failed and the previous pose was kept.
    pub error: Option<String>,
    pub icp_status: Option<GsIcpStatus>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub pose: RigidTransform,
    pub stages: Vec<StageReport>,
    pub trace: RefineTrace,
    /// Loss of `pose` under the final (possibly color-adapted) model.
    pub final_loss: Option<LossOutput>,
    /// The input pose scored better than every refined one and was returned.
    pub kept_input: bool,
    pub icp: Option<GsIcpResult>,
    /// SH coefficients after color adaptation, when it ran.
    pub adapted_sh: Option<Vec<ShCoeffs<f64>>>,
}

/// GS-ICP, then the camera stage, then the object stage, each toggled by
/// `cfg`. A failing stage is recorded and the previous pose carried on.
/// The result is the lower-loss of the final and the input pose.
/// Color adaptation runs alongside the object stage, or the camera stage
/// when the object stage is off, on a private copy of the model.
pub fn refine_pipeline(
    model: &GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t_coarse: &RigidTransform,
    cfg: &RefineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    frame.check_size(k)?;
    let mut pose = *t_coarse;
    let mut stages = Vec::new();
    let mut trace = RefineTrace::default();
    let mut icp = None;

    if cfg.gs_icp_enabled {
        match gs_icp(model, frame, k, &pose, &cfg.icp) {
            Ok(r) => {
                pose = r.pose;
                stages.push(StageReport {
                    stage: StageName::GsIcp,
                    pose,
                    error: None,
                    icp_status: Some(r.status),
                });
                icp = Some(r);
            }
            Err(e) => stages.push(StageReport {
                stage: StageName::GsIcp,
                pose,
                error: Some(e.to_string()),
                icp_status: None,
            }),
        }
    }

    let mut adapted = cfg.gs_light_enabled.then(|| model.clone());
    let mut light = adapted.as_ref().map(|m| GsLight::new(m, cfg.gs_light_lr, cfg.adam));
    let light_on_camera = !cfg.object_enabled;
    let mut run = |stage: Stage, pose: RigidTransform, with_light: bool| -> (RigidTransform, StageReport, RefineTrace) {
        let res = match (with_light, adapted.as_mut(), light.as_mut()) {
            (true, Some(m), Some(l)) => descend(m, frame, k, &pose, cfg, stage, Some(l)),
            _ => {
                let mut m = model.clone();
                descend(&mut m, frame, k, &pose, cfg, stage, None)
            }
        };
        let name = match stage {
            Stage::Camera => StageName::Camera,
            Stage::Object => StageName::Object,
        };
        match res {
            Ok(out) => (
                out.pose,
                StageReport {
                    stage: name,
                    pose: out.pose,
                    error: None,
                    icp_status: None,
                },
                out.trace,
            ),
            Err(e) => (
                pose,
                StageReport {
                    stage: name,
                    pose,
                    error: Some(e.to_string()),
                    icp_status: None,
                },
                RefineTrace::default(),
            ),
        }
    };

    if cfg.camera_enabled {
        let (p, rep, tr) = run(Stage::Camera, pose, light_on_camera);
        pose = p;
        stages.push(rep);
        trace.extend(tr);
    }
    if cfg.object_enabled {
        let (p, rep, tr) = run(Stage::Object, pose, true);
        pose = p;
        stages.push(rep);
        trace.extend(tr);
    }

    let final_model = adapted.as_ref().unwrap_or(model);
    let score = |t: &RigidTransform| {
        evaluate(final_model, t, k, frame, &cfg.weights(), GradientRequest::default())
            .ok()
            .map(|e| e.loss)
    };
    let mut final_loss = score(&pose);
    let mut kept_input = false;
    if pose != *t_coarse {
        if let Some(l) = score(t_coarse) {
            if final_loss.as_ref().is_none_or(|f| l.total < f.total) {
                pose = *t_coarse;
                final_loss = Some(l);
                kept_input = true;
            }
        }
    }
    Ok(PipelineOutput {
        pose,
        stages,
        trace,
        final_loss,
        kept_input,
        icp,
        adapted_sh: adapted.map(|m| m.sh),
    })
}
