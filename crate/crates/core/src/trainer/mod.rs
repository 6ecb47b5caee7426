//! Optimization loop: canonical warmup, data losses, density control,
//! uncertainty refresh, and the uncertainty-aware phase fed by a cache of
//! refined unseen views.

pub mod adam;
pub mod model;
pub mod refine;
pub mod views;

use std::io::Write;
use std::sync::mpsc::{channel, Receiver, TryRecvError};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::formats::Image;
use crate::dataio::scene::{Frame, SceneBundle};
use crate::deformation::{Aabb, DeformationField, FieldConfig};
use crate::densify::{adaptive_density_control, DensityControlConfig, GradStats, UNKNOWN_FLOW};
use crate::error::{Error, Result};
use crate::losses::{
    loss_depth, loss_flow, loss_recon, loss_ua_diff, loss_ua_tv, total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::math::{quat_normalize, Vec3};
use crate::raster::{render, render_backward, Channels, PixelGrads, RenderGradients, RenderOptions};
use crate::scene::{Camera, Gaussian};
use crate::uncertainty::{refresh_uncertainty, UncertaintyParams};

pub use adam::{adam_step, AdamParams, AdamState};
pub use model::{primitives_from_cloud, Checkpoint, Model, OptimizerState};
pub use refine::{parse_refiner, RefinedCache, Refiner, RefinerSettings};
pub use views::sample_unseen_view;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
const NP: usize = Gaussian::<f32>::NUM_PARAMS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvWeighting {
    /// Weight depth differences by the rendered uncertainty map.
    Uncertainty,
    /// Weight every pixel equally.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent; decays exponentially to
    /// `position_final`.
    pub position: f64,
    pub position_final: f64,
    pub features: f64,
    pub opacity: f64,
    pub scaling: f64,
    pub rotation: f64,
    pub deformation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            features: 2.5e-3,
            opacity: 5e-2,
            scaling: 5e-3,
            rotation: 5e-3,
            deformation: 1.6e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySchedule {
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Average world-space positional-gradient norm that triggers
    /// densification.
    pub grad_threshold: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub split_fraction: f64,
    pub min_opacity: f64,
    pub max_primitives: usize,
}

impl Default for DensitySchedule {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop: 15_000,
            grad_threshold: 2e-4,
            split_fraction: 0.05,
            min_opacity: 0.005,
            max_primitives: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationSettings {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub space_resolution: usize,
    pub time_resolution: usize,
    /// Normalization box margin, as a fraction of the initial extent.
    pub margin: f64,
}

impl Default for DeformationSettings {
    fn default() -> Self {
        let f = FieldConfig::default();
        Self {
            feature_dim: f.feature_dim,
            hidden_dim: f.hidden_dim,
            space_resolution: f.space_resolution,
            time_resolution: f.time_resolution,
            margin: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub iterations: usize,
    /// First iteration of the uncertainty-aware phase.
    pub ua_start: usize,
    /// Iterations without deformation updates.
    pub warmup: usize,
    pub cache_size: usize,
    pub cache_refresh: usize,
    pub uncertainty_refresh: usize,
    pub weights: LossWeights,
    pub tv_weighting: TvWeighting,
    pub uncertainty_c0: f64,
    /// Defaults to `20 / L` for `L` training frames.
    pub uncertainty_c1: Option<f64>,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub density: DensitySchedule,
    /// `None` trains a static scene.
    pub deformation: Option<DeformationSettings>,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub refiner: RefinerSettings,
    pub init_opacity: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            iterations: 40_000,
            ua_start: 20_000,
            warmup: 1000,
            cache_size: 200,
            cache_refresh: 2000,
            uncertainty_refresh: 500,
            weights: LossWeights::default(),
            tv_weighting: TvWeighting::Uncertainty,
            uncertainty_c0: 0.25,
            uncertainty_c1: None,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            density: DensitySchedule::default(),
            deformation: Some(DeformationSettings::default()),
            sh_degree: 1,
            background: [0.0; 3],
            refiner: RefinerSettings::default(),
            init_opacity: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported config schema_version {}", self.schema_version));
        }
        if self.ua_start > self.iterations {
            return bad(format!("ua_start {} exceeds iterations {}", self.ua_start, self.iterations));
        }
        for (name, v) in [
            ("cache_refresh", self.cache_refresh),
            ("uncertainty_refresh", self.uncertainty_refresh),
            ("density.interval", self.density.interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        self.weights.validate()?;
        if self.sh_degree > crate::scene::MAX_SH_DEGREE {
            return bad(format!("sh_degree {} is not supported", self.sh_degree));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)".into());
        }
        if self.uncertainty_c1.is_some_and(|c| !(c > 0.0)) {
            return bad("uncertainty_c1 must be positive".into());
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub frame: usize,
    pub primitives: usize,
    pub ua_active: bool,
    pub loss: LossBreakdown,
    /// Set when a loss term was not finite; no update was applied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub non_finite: Option<String>,
}

struct Pending {
    cameras: Vec<Camera<f64>>,
    rendered: Vec<Image>,
    iteration: usize,
    rx: Receiver<Result<Vec<Image>>>,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    scene: &'a SceneBundle,
    pub model: Model,
    pub opt: OptimizerState,
    pub iteration: usize,
    pub cache: RefinedCache,
    /// Refiner invocations and failures so far.
    pub refiner_calls: usize,
    pub refiner_failures: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    refiner: Arc<dyn Refiner>,
    pending: Option<Pending>,
    stats: GradStats,
    extent: f64,
    train_cams: Vec<Camera<f64>>,
    cap_warned: bool,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Half the diagonal of the bounding box of the primitive centers.
fn scene_extent(prims: &[Gaussian<f32>]) -> f64 {
    let b = Aabb::around(prims.iter().map(|p| p.mean.cast::<f64>().0), 0.0);
    let d: f64 = (0..3).map(|k| (b.max[k] - b.min[k]).powi(2)).sum::<f64>().sqrt();
    (0.5 * d).max(1e-3)
}

impl<'a> Trainer<'a> {
    pub fn new(
        scene: &'a SceneBundle,
        config: TrainConfig,
        init: Vec<Gaussian<f32>>,
        refiner: Box<dyn Refiner>,
    ) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if scene.frames.len() < 2 {
            return Err(Error::InvalidParameter("training needs at least two frames".into()));
        }
        if init.is_empty() {
            return Err(Error::InvalidParameter("no initial primitives".into()));
        }
        let extent = scene_extent(&init);
        let field = match &config.deformation {
            Some(d) => {
                let bounds = Aabb::around(init.iter().map(|p| p.mean.cast::<f64>().0), d.margin);
                let cfg = FieldConfig {
                    feature_dim: d.feature_dim,
                    hidden_dim: d.hidden_dim,
                    space_resolution: d.space_resolution,
                    time_resolution: d.time_resolution,
                    bounds,
                };
                Some(DeformationField::new(cfg, config.seed)?)
            }
            None => None,
        };
        let model = Model { prims: init, field, sh_degree: config.sh_degree, background: config.background };
        Ok(Self::from_parts(scene, config, model, None, 0, refiner, extent))
    }

    /// Continues from a checkpoint.
    pub fn resume(scene: &'a SceneBundle, config: TrainConfig, ck: Checkpoint, refiner: Box<dyn Refiner>) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let extent = scene_extent(&ck.model.prims);
        Ok(Self::from_parts(scene, config, ck.model, ck.optimizer, ck.iteration as usize, refiner, extent))
    }

    fn from_parts(
        scene: &'a SceneBundle,
        config: TrainConfig,
        model: Model,
        opt: Option<OptimizerState>,
        iteration: usize,
        refiner: Box<dyn Refiner>,
        extent: f64,
    ) -> Self {
        let opt = opt.unwrap_or_else(|| OptimizerState::new(&model));
        let stats = GradStats::new(model.prims.len());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            train_cams: scene.train_cameras(),
            config,
            scene,
            model,
            opt,
            iteration,
            cache: RefinedCache::default(),
            refiner_calls: 0,
            refiner_failures: 0,
            rng,
            order: Vec::new(),
            refiner: Arc::from(refiner),
            pending: None,
            stats,
            extent,
            cap_warned: false,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { iteration: self.iteration as u64, model: self.model.clone(), optimizer: Some(self.opt.clone()) }
    }

    pub fn uncertainty_params(&self) -> UncertaintyParams {
        let mut p = UncertaintyParams::for_views(self.train_cams.len());
        p.c0 = self.config.uncertainty_c0;
        if let Some(c1) = self.config.uncertainty_c1 {
            p.c1 = c1;
        }
        p
    }

    fn next_frame(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.scene.frames.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().unwrap()
    }

    pub fn refresh_uncertainty(&mut self) -> Result<()> {
        let cams: Vec<Camera<f32>> = self.train_cams.iter().map(|c| c.cast()).collect();
        let opts = self.model.options(Channels::all());
        let params = self.uncertainty_params();
        refresh_uncertainty(&mut self.model.prims, self.model.field.as_ref(), &cams, params, &opts)
    }

    /// Renders `cache_size` fresh unseen views and refines them. A failing
    /// refiner leaves the previous cache in place; before any success the
    /// cache holds the renders themselves.
    pub fn refresh_cache(&mut self) -> Result<()> {
        if self.pending.is_some() {
            log::warn!("iteration {}: previous refinement still running; keeping the cache", self.iteration);
            return Ok(());
        }
        let cameras = (0..self.config.cache_size)
            .map(|_| sample_unseen_view(&self.train_cams, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let rendered = cameras.iter().map(|c| self.model.render_image(c)).collect::<Result<Vec<_>>>()?;
        let seed = self.config.seed.wrapping_add(self.iteration as u64);
        self.refiner_calls += 1;
        if self.cache.is_empty() {
            self.cache = RefinedCache::identity(cameras.clone(), rendered.clone(), self.iteration);
        }
        if self.config.refiner.async_mode {
            let (tx, rx) = channel();
            let refiner = Arc::clone(&self.refiner);
            let images = rendered.clone();
            std::thread::spawn(move || {
                let _ = tx.send(refiner.refine(&images, seed));
            });
            self.pending = Some(Pending { cameras, rendered, iteration: self.iteration, rx });
            return Ok(());
        }
        let result = self.refiner.refine(&rendered, seed);
        self.install(cameras, rendered, result, self.iteration);
        Ok(())
    }

    fn install(&mut self, cameras: Vec<Camera<f64>>, rendered: Vec<Image>, result: Result<Vec<Image>>, iteration: usize) {
        match result.and_then(|refined| RefinedCache::refined(cameras, rendered, refined, iteration)) {
            Ok(c) => self.cache = c,
            Err(e) => {
                self.refiner_failures += 1;
                log::warn!("iteration {iteration}: refiner `{}` failed ({e}); keeping the previous cache", self.refiner.name());
            }
        }
    }

    fn poll_pending(&mut self) {
        let Some(p) = self.pending.as_ref() else { return };
        let result = match p.rx.try_recv() {
            Ok(r) => r,
            Err(TryRecvError::Empty) => return,
            Err(TryRecvError::Disconnected) => Err(Error::Refiner("refiner thread exited".into())),
        };
        let p = self.pending.take().unwrap();
        self.install(p.cameras, p.rendered, result, p.iteration);
    }

    /// Blocks until a background refinement, if any, has finished.
    pub fn wait_for_refiner(&mut self) {
        if let Some(p) = self.pending.take() {
            let result = p.rx.recv().unwrap_or_else(|_| Err(Error::Refiner("refiner thread exited".into())));
            self.install(p.cameras, p.rendered, result, p.iteration);
        }
    }

    fn backward(
        &self,
        cam: &Camera<f64>,
        flow_cam: Option<&Camera<f64>>,
        state: &crate::raster::RenderState<f32>,
        grads: &PixelGrads<f32>,
        field_grad: bool,
    ) -> Result<RenderGradients<f32>> {
        let flow_cam = flow_cam.map(|c| c.cast::<f32>());
        render_backward(
            &self.model.prims,
            self.model.field.as_ref(),
            &cam.cast(),
            flow_cam.as_ref(),
            state,
            grads,
            field_grad,
        )
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LogRecord> {
        self.poll_pending();
        let it = self.iteration;
        let cfg = self.config.clone();
        let ua_active = it >= cfg.ua_start;
        if ua_active {
            let k = it - cfg.ua_start;
            if k % cfg.uncertainty_refresh == 0 {
                self.refresh_uncertainty()?;
            }
            if k % cfg.cache_refresh == 0 {
                self.refresh_cache()?;
            }
        }

        let fi = self.next_frame();
        let scene = self.scene;
        let frame: &Frame = &scene.frames[fi];
        let (w, h) = (frame.camera.width, frame.camera.height);
        let use_data = cfg.weights.data > 0.0;
        let depth_target = frame.depth_f64().filter(|_| use_data);
        let flow_target = frame.flow_f64().filter(|_| use_data && fi + 1 < scene.frames.len());
        let next_cam = flow_target.as_ref().map(|_| &scene.frames[fi + 1].camera);
        let field_grad = self.model.field.is_some() && it >= cfg.warmup;

        let n = self.model.prims.len();
        let mut gp = vec![[0f32; NP]; n];
        let mut gf = vec![0f32; if field_grad { self.model.field.as_ref().unwrap().params.len() } else { 0 }];
        let add = |gp: &mut Vec<[f32; NP]>, gf: &mut Vec<f32>, g: RenderGradients<f32>| {
            for (a, b) in gp.iter_mut().zip(&g.prims) {
                for k in 0..NP {
                    a[k] += b[k];
                }
            }
            for (a, b) in gf.iter_mut().zip(&g.field) {
                *a += *b;
            }
        };

        let channels = Channels {
            color: true,
            depth: depth_target.is_some(),
            flow: flow_target.is_some(),
            uncertainty: false,
        };
        let (out, state) = self.model.render(&frame.camera, next_cam, channels)?;
        let mut parts = LossParts::default();
        let mut pix = PixelGrads::default();
        let (recon, g) = loss_recon(&to_f64(&out.color), &frame.image.data, w, h)?;
        parts.recon = recon;
        pix.color = Some(to_f32(&g));
        if let Some(target) = &depth_target {
            let mask: Vec<bool> = target.iter().map(|d| *d > 0.0).collect();
            let (v, g) = loss_depth(&to_f64(&out.depth), target, Some(&mask))?;
            parts.depth = v;
            pix.depth = Some(g.iter().map(|x| (cfg.weights.data * x) as f32).collect());
        }
        if let Some(target) = &flow_target {
            let mask: Vec<bool> = (0..w * h)
                .map(|i| {
                    target[2 * i].abs() < UNKNOWN_FLOW
                        && target[2 * i + 1].abs() < UNKNOWN_FLOW
                        && depth_target.as_ref().map_or(true, |d| d[i] > 0.0)
                })
                .collect();
            let (v, g) = loss_flow(&to_f64(&out.flow), target, Some(&mask))?;
            parts.flow = v;
            pix.flow = Some(g.iter().map(|x| (cfg.weights.data * x) as f32).collect());
        }
        let g = self.backward(&frame.camera, next_cam, &state, &pix, field_grad)?;
        for (i, pg) in g.prims.iter().enumerate() {
            if out.contributions[i] > 0.0 {
                let norm = (0..3).map(|k| (pg[k] as f64).powi(2)).sum::<f64>().sqrt();
                self.stats.add(i, norm);
            }
        }
        add(&mut gp, &mut gf, g);

        if ua_active && cfg.weights.ua_diff > 0.0 && !self.cache.is_empty() {
            let k = self.rng.gen_range(0..self.cache.len());
            let entry = self.cache.entries[k].clone();
            let ch = Channels { color: true, depth: false, flow: false, uncertainty: true };
            let (o, st) = self.model.render(&entry.camera, None, ch)?;
            let (v, g) = loss_ua_diff(&to_f64(&o.color), &entry.refined.data, &to_f64(&o.uncertainty))?;
            parts.ua_diff = Some(v);
            let pix = PixelGrads { color: Some(g.iter().map(|x| (cfg.weights.ua_diff * x) as f32).collect()), ..Default::default() };
            let g = self.backward(&entry.camera, None, &st, &pix, field_grad)?;
            add(&mut gp, &mut gf, g);
        }
        if ua_active && cfg.weights.ua_tv > 0.0 {
            let cam = sample_unseen_view(&self.train_cams, &mut self.rng)?;
            let ch = Channels { color: false, depth: true, flow: false, uncertainty: true };
            let (o, st) = self.model.render(&cam, None, ch)?;
            let u = match cfg.tv_weighting {
                TvWeighting::Uncertainty => to_f64(&o.uncertainty),
                TvWeighting::Uniform => vec![1.0; cam.width * cam.height],
            };
            let (v, g) = loss_ua_tv(&to_f64(&o.depth), &u, cam.width, cam.height)?;
            parts.ua_tv = Some(v);
            let pix = PixelGrads { depth: Some(g.iter().map(|x| (cfg.weights.ua_tv * x) as f32).collect()), ..Default::default() };
            let g = self.backward(&cam, None, &st, &pix, field_grad)?;
            add(&mut gp, &mut gf, g);
        }
        if let Some(field) = &self.model.field {
            parts.grid = field.grid_smoothness() as f64;
            if field_grad && cfg.weights.grid > 0.0 {
                field.grid_smoothness_backward(cfg.weights.grid as f32, &mut gf);
            }
        }

        let loss = total_loss(&parts, &cfg.weights, ua_active);
        let mut record = LogRecord { iteration: it, frame: fi, primitives: n, ua_active, loss, non_finite: None };
        if let Some(term) = record.loss.non_finite_term() {
            record.non_finite = Some(term.to_string());
            return Ok(record);
        }

        self.apply_gradients(&gp, &gf, field_grad)?;
        self.iteration += 1;
        let d = &cfg.density;
        if self.iteration > d.start && self.iteration <= d.stop && self.iteration % d.interval == 0 {
            self.density_control()?;
        }
        Ok(record)
    }

    fn apply_gradients(&mut self, gp: &[[f32; NP]], gf: &[f32], field_grad: bool) -> Result<()> {
        let cfg = &self.config;
        let lr = &cfg.lr;
        let s = (self.iteration as f64 / cfg.iterations.max(1) as f64).min(1.0);
        let pos_lr = self.extent * (lr.position.ln() * (1.0 - s) + lr.position_final.max(1e-30).ln() * s).exp();
        let group = |k: usize| match k {
            0..=2 => pos_lr,
            3..=6 => lr.rotation,
            7..=9 => lr.scaling,
            10 => lr.opacity,
            _ => lr.features,
        };
        self.opt.step += 1;
        let mut flat: Vec<f32> = self.model.prims.iter().flat_map(|p| p.params()).collect();
        let grads: Vec<f32> = gp.iter().flatten().copied().collect();
        adam_step(&mut flat, &grads, &mut self.opt.prims, self.opt.step, |i| group(i % NP), &cfg.adam)?;
        for (p, chunk) in self.model.prims.iter_mut().zip(flat.chunks_exact(NP)) {
            p.set_params(chunk.try_into().unwrap());
            p.rotation = quat_normalize(&p.rotation);
        }
        if field_grad {
            let field = self.model.field.as_mut().unwrap();
            self.opt.field_step += 1;
            adam_step(&mut field.params, gf, &mut self.opt.field, self.opt.field_step, |_| lr.deformation, &cfg.adam)?;
        }
        Ok(())
    }

    fn density_control(&mut self) -> Result<()> {
        let d = &self.config.density;
        let dc = DensityControlConfig {
            grad_threshold: d.grad_threshold,
            split_scale: d.split_fraction * self.extent,
            min_opacity: d.min_opacity,
            max_primitives: d.max_primitives,
        };
        let r = adaptive_density_control(&self.model.prims, &self.stats, &dc)?;
        if r.cap_reached && !self.cap_warned {
            log::warn!("primitive cap {} reached; densification suspended", d.max_primitives);
            self.cap_warned = true;
        }
        let remap = |s: &AdamState<f32>| {
            let mut out = AdamState::zeros(r.origin.len() * NP);
            for (j, o) in r.origin.iter().enumerate() {
                if let Some(i) = o {
                    out.m[j * NP..(j + 1) * NP].copy_from_slice(&s.m[i * NP..(i + 1) * NP]);
                    out.v[j * NP..(j + 1) * NP].copy_from_slice(&s.v[i * NP..(i + 1) * NP]);
                }
            }
            out
        };
        self.opt.prims = remap(&self.opt.prims);
        self.model.prims = r.prims;
        self.stats = GradStats::new(self.model.prims.len());
        log::debug!(
            "iteration {}: cloned {}, split {}, pruned {}, {} primitives",
            self.iteration,
            r.cloned,
            r.split,
            r.pruned,
            self.model.prims.len()
        );
        Ok(())
    }

    /// Runs until `config.iterations`, writing one JSON line per step.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<()> {
        while self.iteration < self.config.iterations {
            let rec = self.step()?;
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            if let Some(term) = rec.non_finite {
                return Err(Error::NonFiniteLoss { term, iteration: rec.iteration });
            }
        }
        self.wait_for_refiner();
        log.flush().map_err(|e| Error::io("<training log>", e))
    }
}

/// Compares analytic gradients of the reconstruction loss against `f64`
/// central differences for `samples` random primitive parameters (and as
/// many field parameters when there is a field). Returns the norm-wise
/// relative error.
pub fn gradient_self_check(model: &Model, frame: &Frame, samples: usize, seed: u64) -> Result<f64> {
    let prims: Vec<Gaussian<f64>> = model.prims.iter().map(|p| p.cast()).collect();
    let field = model.field.as_ref().map(|f| f.cast::<f64>());
    let cam = &frame.camera;
    let opts = RenderOptions {
        background: model.background,
        sh_degree: model.sh_degree,
        exact: true,
        channels: Channels::color_only(),
    };
    let (w, h) = (cam.width, cam.height);
    let loss = |prims: &[Gaussian<f64>], field: Option<&DeformationField<f64>>| -> Result<f64> {
        let (o, _) = render(prims, field, cam, None, &opts)?;
        Ok(loss_recon(&o.color, &frame.image.data, w, h)?.0)
    };
    let (o, st) = render(&prims, field.as_ref(), cam, None, &opts)?;
    let (_, g) = loss_recon(&o.color, &frame.image.data, w, h)?;
    let grads = render_backward(
        &prims,
        field.as_ref(),
        cam,
        None,
        &st,
        &PixelGrads { color: Some(g), ..Default::default() },
        true,
    )?;
    let visible: Vec<usize> = (0..prims.len()).filter(|&i| o.contributions[i] > 1e-3).collect();
    if visible.is_empty() {
        return Err(Error::InvalidParameter("no visible primitive to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..samples {
        let i = visible[rng.gen_range(0..visible.len())];
        let k = rng.gen_range(0..NP);
        let mut p = prims.clone();
        let mut v = p[i].params();
        v[k] += eps;
        p[i].set_params(&v);
        let up = loss(&p, field.as_ref())?;
        v[k] -= 2.0 * eps;
        p[i].set_params(&v);
        let down = loss(&p, field.as_ref())?;
        let fd = (up - down) / (2.0 * eps);
        num += (grads.prims[i][k] - fd).powi(2);
        den += fd * fd;
    }
    if let Some(f) = &field {
        for _ in 0..samples {
            let k = rng.gen_range(0..f.params.len());
            let mut ff = f.clone();
            ff.params[k] += eps;
            let up = loss(&prims, Some(&ff))?;
            ff.params[k] -= 2.0 * eps;
            let down = loss(&prims, Some(&ff))?;
            let fd = (up - down) / (2.0 * eps);
            num += (grads.field[k] - fd).powi(2);
            den += fd * fd;
        }
    }
    Ok(num.sqrt() / den.sqrt().max(1e-12))
}

/// Mean primitive position, handy for logging.
pub fn centroid(prims: &[Gaussian<f32>]) -> Vec3<f64> {
    let mut c = Vec3::zero();
    for p in prims {
        c += p.mean.cast::<f64>();
    }
    c * (1.0 / prims.len().max(1) as f64)
}
