//! Verification oracles and reproductions of the qualitative studies:
//! ε/ε_φ correlation and variance curves, the KL quadrature oracle, the
//! bimodal mode-seeking benchmark, the degradation-design ablation and the
//! finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{Activation, DegradationOperator, OperatorVariant};
use crate::distill::{run_distillation, DistillConfig, LossKind};
use crate::error::{check_dim, Error, Result};
use crate::mixture::{diffuse, standard_normal_vec, ConditionedMixture, NULL_CONDITION};
use crate::renderer::{Canvas, PixelImage, Representation, Splat, SplatScene, View, ViewSampler};
use crate::schedule::{NoiseSchedule, WeightKind};
use crate::vecmath::{cosine, dot, norm, sub};

pub const MIN_TRIALS: usize = 30;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveReport {
    pub timesteps: Vec<usize>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub trials: usize,
}

impl CurveReport {
    pub const CSV_HEADER: &'static str = "t,value,stderr,trials";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for ((t, v), e) in self.timesteps.iter().zip(&self.values).zip(&self.stderrs) {
            s.push_str(&format!("{t},{v},{e},{}\n", self.trials));
        }
        s
    }

    pub fn value_at(&self, t: usize) -> Option<f64> {
        self.timesteps.iter().position(|&s| s == t).map(|i| self.values[i])
    }
}

/// Where clean samples come from in the curve studies.
#[derive(Debug, Clone, PartialEq)]
pub enum X0Source {
    Fixed(Vec<f64>),
    MixtureDraws,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCurves {
    /// Mean per-trial cosine between ε and ε_φ.
    pub cosine: CurveReport,
    /// Per-coordinate Pearson correlation across trials, averaged over
    /// coordinates.
    pub pearson: CurveReport,
}

fn check_curve_inputs(sched: &NoiseSchedule, trials: usize, t_grid: &[usize]) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidRange(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidRange("empty timestep grid".into()));
    }
    t_grid.iter().try_for_each(|&t| sched.check_t(t, 1))
}

/// (ε, ε_φ(x_t)) pairs at one timestep.
fn eps_pairs(
    model: &ConditionedMixture,
    sched: &NoiseSchedule,
    cond: &str,
    source: &X0Source,
    trials: usize,
    t: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = rng_for(seed, t as u64);
    (0..trials)
        .map(|_| {
            let x0 = match source {
                X0Source::Fixed(x) => {
                    check_dim(model.dim(), x.len())?;
                    x.clone()
                }
                X0Source::MixtureDraws => model.sample_clean(cond, &mut rng)?,
            };
            let eps = standard_normal_vec(&mut rng, model.dim());
            let xt = diffuse(sched, &x0, t, &eps)?;
            let pred = model.eps_predict(&xt, t, cond, sched)?;
            Ok((eps, pred))
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn correlation_curve(
    model: &ConditionedMixture,
    sched: &NoiseSchedule,
    cond: &str,
    source: &X0Source,
    trials: usize,
    t_grid: &[usize],
    seed: u64,
) -> Result<CorrelationCurves> {
    check_curve_inputs(sched, trials, t_grid)?;
    let rows: Vec<((f64, f64), (f64, f64))> = t_grid
        .par_iter()
        .map(|&t| {
            let pairs = eps_pairs(model, sched, cond, source, trials, t, seed)?;
            let cosines: Vec<f64> = pairs.iter().map(|(e, p)| cosine(e, p)).collect();
            let d = model.dim();
            let n = trials as f64;
            let (mut r_sum, mut se_sum) = (0.0, 0.0);
            for j in 0..d {
                let a: Vec<f64> = pairs.iter().map(|(e, _)| e[j]).collect();
                let b: Vec<f64> = pairs.iter().map(|(_, p)| p[j]).collect();
                let r = pearson(&a, &b);
                r_sum += r;
                se_sum += (1.0 - r * r) / (n - 1.0).sqrt();
            }
            Ok((mean_and_se(&cosines), (r_sum / d as f64, se_sum / d as f64)))
        })
        .collect::<Result<_>>()?;
    let report = |pick: fn(&((f64, f64), (f64, f64))) -> (f64, f64)| CurveReport {
        timesteps: t_grid.to_vec(),
        values: rows.iter().map(|r| pick(r).0).collect(),
        stderrs: rows.iter().map(|r| pick(r).1).collect(),
        trials,
    };
    Ok(CorrelationCurves {
        cosine: report(|r| r.0),
        pearson: report(|r| r.1),
    })
}

/// Per-coordinate variance of ε_φ(x_t) over trials, averaged over
/// coordinates. Standard errors use the Gaussian approximation
/// SE(s²) = s²·√(2/(n−1)).
pub fn variance_curve(
    model: &ConditionedMixture,
    sched: &NoiseSchedule,
    cond: &str,
    source: &X0Source,
    trials: usize,
    t_grid: &[usize],
    seed: u64,
) -> Result<CurveReport> {
    check_curve_inputs(sched, trials, t_grid)?;
    let n = trials as f64;
    let values: Vec<f64> = t_grid
        .par_iter()
        .map(|&t| {
            let pairs = eps_pairs(model, sched, cond, source, trials, t, seed)?;
            let d = model.dim();
            let mut total = 0.0;
            for j in 0..d {
                let mean = pairs.iter().map(|(_, p)| p[j]).sum::<f64>() / n;
                total += pairs.iter().map(|(_, p)| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            }
            Ok(total / d as f64)
        })
        .collect::<Result<_>>()?;
    Ok(CurveReport {
        timesteps: t_grid.to_vec(),
        stderrs: values.iter().map(|v| v * (2.0 / (n - 1.0)).sqrt()).collect(),
        values,
        trials,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Quadrature grid: `points` midpoint cells per axis spanning
/// mean ± `half_width_std` combined std, unless `bounds` pins them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub points: usize,
    pub half_width_std: f64,
    pub bounds: Option<[f64; 2]>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 4096,
            half_width_std: 8.0,
            bounds: None,
        }
    }
}

pub const MAX_TAIL_MASS: f64 = 1e-6;

fn gaussian_tail_outside(mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let s = std * std::f64::consts::SQRT_2;
    0.5 * libm::erfc((hi - mean) / s) + 0.5 * libm::erfc((mean - lo) / s)
}

/// ∫ q (log q − log p) over the box [lo, hi]^d by the midpoint rule, d ≤ 2.
pub fn kl_on_grid(
    dim: usize,
    lo: &[f64],
    hi: &[f64],
    points: usize,
    log_q: impl Fn(&[f64]) -> f64 + Sync,
    log_p: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<f64> {
    if !(1..=2).contains(&dim) || lo.len() != dim || hi.len() != dim {
        return Err(Error::InvalidRange(format!("quadrature supports d <= 2, got {dim}")));
    }
    if points < 2 || (0..dim).any(|j| !(lo[j] < hi[j])) {
        return Err(Error::InvalidRange("degenerate quadrature grid".into()));
    }
    let h: Vec<f64> = (0..dim).map(|j| (hi[j] - lo[j]) / points as f64).collect();
    let at = |j: usize, i: usize| lo[j] + (i as f64 + 0.5) * h[j];
    let cell = |x: &[f64]| {
        let lq = log_q(x);
        let q = lq.exp();
        if q == 0.0 {
            0.0
        } else {
            q * (lq - log_p(x))
        }
    };
    let sum: f64 = if dim == 1 {
        (0..points).map(|i| cell(&[at(0, i)])).sum()
    } else {
        (0..points)
            .into_par_iter()
            .map(|i| (0..points).map(|k| cell(&[at(0, i), at(1, k)])).sum::<f64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum()
    };
    Ok(sum * h.iter().product::<f64>())
}

/// KL( N(√ᾱ_t θ, (1−ᾱ_t) I) ‖ p_t(· | cond) ) by grid quadrature.
pub fn kl_quadrature(
    theta: &[f64],
    model: &ConditionedMixture,
    sched: &NoiseSchedule,
    t: usize,
    cond: &str,
    grid: &GridSpec,
) -> Result<f64> {
    check_dim(model.dim(), theta.len())?;
    sched.check_t(t, 1)?;
    let d = theta.len();
    let ab = sched.alpha_bar(t);
    let q_var = 1.0 - ab;
    let q_std = q_var.sqrt();
    let p_std = model.diffused_variance(sched, t).sqrt();
    let q_mean: Vec<f64> = theta.iter().map(|v| ab.sqrt() * v).collect();
    let mask = model.mask(cond)?.to_vec();
    let total_w: f64 = model.weights().iter().zip(&mask).filter(|(_, &m)| m).map(|(w, _)| w).sum();
    let comps: Vec<(f64, Vec<f64>)> = model
        .weights()
        .iter()
        .zip(model.means())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((w, mu), _)| (w / total_w, mu.iter().map(|v| ab.sqrt() * v).collect()))
        .collect();

    let mut lo = vec![0.0; d];
    let mut hi = vec![0.0; d];
    for j in 0..d {
        let (l, h) = match grid.bounds {
            Some([l, h]) => (l, h),
            None => {
                let k = grid.half_width_std;
                let mut l = q_mean[j] - k * q_std;
                let mut h = q_mean[j] + k * q_std;
                for (_, m) in &comps {
                    l = l.min(m[j] - k * p_std);
                    h = h.max(m[j] + k * p_std);
                }
                (l, h)
            }
        };
        lo[j] = l;
        hi[j] = h;
    }
    let mut tail: f64 = 0.0;
    for j in 0..d {
        tail = tail.max(gaussian_tail_outside(q_mean[j], q_std, lo[j], hi[j]));
        let p_tail: f64 = comps
            .iter()
            .map(|(w, m)| w * gaussian_tail_outside(m[j], p_std, lo[j], hi[j]))
            .sum();
        tail = tail.max(p_tail);
    }
    if tail > MAX_TAIL_MASS {
        return Err(Error::InsufficientCoverage(tail));
    }

    let log_q = |x: &[f64]| {
        let r2: f64 = x.iter().zip(&q_mean).map(|(a, m)| (a - m).powi(2)).sum();
        -0.5 * r2 / q_var - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * q_var).ln()
    };
    let log_p = |x: &[f64]| model.log_density(x, t, cond, sched).unwrap_or(f64::NEG_INFINITY);
    kl_on_grid(d, &lo, &hi, grid.points, log_q, log_p)
}

/// Central finite differences of `f` at `params`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidRange(format!("step must be positive, got {h}")));
    }
    let mut p = params.to_vec();
    Ok((0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let fp = f(&p);
            p[i] = params[i] - h;
            let fm = f(&p);
            p[i] = params[i];
            (fp - fm) / (2.0 * h)
        })
        .collect())
}

/// Distance from `x` to the nearest of `modes`.
pub fn mode_distance(x: &[f64], modes: &[Vec<f64>]) -> f64 {
    modes
        .iter()
        .map(|m| norm(&sub(x, m)))
        .fold(f64::INFINITY, f64::min)
}

/// The 1-D two-mode benchmark on the identity renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BimodalBenchmark {
    pub mode: f64,
    pub sigma: f64,
    pub init: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub scene_lr: f64,
    pub operator_lr: f64,
    pub cfg_scale: f64,
    pub dca_cutoff: usize,
    pub weight: WeightKind,
    pub hidden: Vec<usize>,
}

impl Default for BimodalBenchmark {
    fn default() -> Self {
        Self {
            mode: 2.0,
            sigma: 0.2,
            init: 0.0,
            iterations: 2000,
            batch_size: 4,
            scene_lr: 0.01,
            operator_lr: 0.01,
            cfg_scale: 7.5,
            dca_cutoff: 300,
            weight: WeightKind::OneMinusAlphaBar,
            hidden: DegradationOperator::default_hidden(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub theta: f64,
    pub mode_distance: f64,
    /// Mean operator loss over the last tenth of the run (VDM only).
    pub op_loss: Option<f64>,
}

impl BimodalBenchmark {
    pub fn model(&self) -> Result<ConditionedMixture> {
        let mut conds = BTreeMap::new();
        conds.insert("left".to_string(), vec![0]);
        conds.insert("right".to_string(), vec![1]);
        ConditionedMixture::new(
            vec![0.5, 0.5],
            vec![vec![-self.mode], vec![self.mode]],
            self.sigma,
            conds,
        )
    }

    pub fn run(
        &self,
        sched: &NoiseSchedule,
        kind: LossKind,
        variant: OperatorVariant,
        seed: u64,
    ) -> Result<BenchmarkRun> {
        let model = self.model()?;
        let cfg = DistillConfig {
            loss_kind: kind,
            cfg_scale: self.cfg_scale,
            dca_cutoff: self.dca_cutoff,
            iterations: self.iterations,
            batch_size: self.batch_size,
            scene_lr: self.scene_lr,
            operator_lr: self.operator_lr,
            condition: NULL_CONDITION.into(),
            seed,
            weight: self.weight,
            t_max: sched.max_t(),
            ..Default::default()
        };
        let mut op_rng = rng_for(seed, 1);
        let op = DegradationOperator::for_variant(variant, 1, &self.hidden, Activation::Tanh, &mut op_rng)?;
        let out = run_distillation(&cfg, &model, sched, &ViewSampler::fixed(), PixelImage::new(vec![self.init]), op)?;
        let tail = (self.iterations / 10).max(1);
        let recent: Vec<f64> = out.trajectory.records[self.iterations - tail..]
            .iter()
            .filter_map(|r| r.op_loss)
            .collect();
        let op_loss = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
        let theta = out.scene.theta[0];
        Ok(BenchmarkRun {
            theta,
            mode_distance: mode_distance(&[theta], model.means()),
            op_loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: OperatorVariant,
    pub final_mode_dist: f64,
    pub final_op_loss: f64,
    pub seed: u64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,final_mode_dist,final_op_loss,seed";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.variant.name(),
            r.final_mode_dist,
            r.final_op_loss,
            r.seed
        ));
    }
    s
}

/// VDM on the bimodal benchmark once per degradation design.
pub fn ablation_degradation(
    bench: &BimodalBenchmark,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    OperatorVariant::ALL
        .iter()
        .map(|&variant| {
            let run = bench.run(sched, LossKind::Vdm, variant, seed)?;
            Ok(AblationRow {
                variant,
                final_mode_dist: run.mode_distance,
                final_op_loss: run.op_loss.unwrap_or(f64::NAN),
                seed,
            })
        })
        .collect()
}

/// Operator regression on a fixed nonlinear degradation
/// target = 1.5·tanh(2u) + 0.25·u², with u ~ N(0, I).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationTask {
    pub dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for DegradationTask {
    fn default() -> Self {
        Self {
            dim: 2,
            steps: 3000,
            batch_size: 32,
            eval_size: 512,
            lr: 0.01,
            hidden: DegradationOperator::default_hidden(2),
        }
    }
}

impl DegradationTask {
    pub fn target(u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| 1.5 * (2.0 * v).tanh() + 0.25 * v * v).collect()
    }

    fn pairs(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|_| {
                let u = standard_normal_vec(rng, self.dim);
                let y = Self::target(&u);
                (u, y)
            })
            .collect()
    }

    /// Held-out operator loss after training one design. Data streams depend
    /// only on `seed`, so variants sharing a seed see identical batches.
    pub fn run(&self, variant: OperatorVariant, seed: u64) -> Result<f64> {
        let mut data_rng = rng_for(seed, 2);
        let eval = self.pairs(&mut data_rng, self.eval_size);
        let mut op = DegradationOperator::for_variant(
            variant,
            self.dim,
            &self.hidden,
            Activation::Tanh,
            &mut rng_for(seed, 3),
        )?;
        let mut opt = op.optimizer(self.lr);
        for _ in 0..self.steps {
            let batch = self.pairs(&mut data_rng, self.batch_size);
            let g = op.grad(&batch)?;
            op.step(&mut opt, &g)?;
        }
        op.batch_loss(&eval)
    }
}

/// Finite-difference checks run by `gradcheck`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckKind {
    Renderer,
    Operator,
    Score,
    Identity,
}

impl GradCheckKind {
    pub const ALL: [GradCheckKind; 4] = [
        GradCheckKind::Renderer,
        GradCheckKind::Operator,
        GradCheckKind::Score,
        GradCheckKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCheckKind::Renderer => "renderer",
            GradCheckKind::Operator => "operator",
            GradCheckKind::Score => "score",
            GradCheckKind::Identity => "identity",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradCheckKind::Renderer => 1e-4,
            GradCheckKind::Operator | GradCheckKind::Score => 1e-5,
            GradCheckKind::Identity => 1e-9,
        }
    }
}

/// Test hook: corrupts an analytic gradient before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    RenderGrad,
    OperatorGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub checks: Vec<GradCheckKind>,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            checks: GradCheckKind::ALL.to_vec(),
            probes: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub kind: GradCheckKind,
    pub probes: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:>5} probes  max_rel_err {:.3e}  tol {:.0e}  {}",
            self.kind.name(),
            self.probes,
            self.max_rel_err,
            self.kind.tolerance(),
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn coordinate_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn corrupt(g: &mut [f64]) {
    g.iter_mut().for_each(|v| *v = *v * 1.01 + 1e-3);
}

/// A random small splat scene for gradient probes.
pub fn random_probe_scene<R: Rng + ?Sized>(rng: &mut R, splats: usize, channels: usize) -> Result<SplatScene> {
    let canvas = Canvas {
        height: 8,
        width: 8,
        channels,
    };
    let splats = (0..splats)
        .map(|_| Splat {
            mu: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            log_scale: [rng.random_range(-2.2..-1.4), rng.random_range(-2.2..-1.4)],
            angle: rng.random_range(0.0..std::f64::consts::PI),
            color: (0..channels).map(|_| rng.random_range(0.1..0.5)).collect(),
            opacity_logit: rng.random_range(-1.0..1.0),
        })
        .collect();
    SplatScene::new(canvas, splats)
}

fn check_renderer(probes: usize, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let errs: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, 100 + i as u64);
            let channels = if i % 2 == 0 { 1 } else { 3 };
            let scene = random_probe_scene(&mut rng, 2, channels)?;
            let view = View {
                translation: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
                zoom: rng.random_range(0.8..1.25),
            };
            let up: Vec<f64> = (0..scene.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = scene.render_grad(&view, &up)?;
            if fault == Some(Fault::RenderGrad) {
                corrupt(&mut g);
            }
            let mut probe = scene.clone();
            let fd = finite_diff(
                |p| {
                    probe.set_params(p).expect("param length");
                    dot(&probe.render(&view), &up)
                },
                &scene.params(),
                1e-6,
            )?;
            Ok(coordinate_rel_err(&g, &fd, 1e-6))
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn check_operator(probes: usize, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let errs: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, 10_000 + i as u64);
            let variant = OperatorVariant::ALL[i % 3];
            let mut op = DegradationOperator::for_variant(variant, 4, &[9], Activation::Tanh, &mut rng)?;
            let p: Vec<f64> = standard_normal_vec(&mut rng, op.param_count()).iter().map(|v| 0.4 * v).collect();
            op.set_params(&p)?;
            let batch: Vec<_> = (0..3)
                .map(|_| (standard_normal_vec(&mut rng, 4), standard_normal_vec(&mut rng, 4)))
                .collect();
            let mut g = op.grad(&batch)?;
            if fault == Some(Fault::OperatorGrad) {
                corrupt(&mut g);
            }
            let mut probe = op.clone();
            let fd = finite_diff(
                |p| {
                    probe.set_params(p).expect("param length");
                    probe.batch_loss(&batch).expect("batch shape")
                },
                &p,
                1e-6,
            )?;
            Ok(coordinate_rel_err(&g, &fd, 1e-3))
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn check_score(probes: usize, seed: u64) -> Result<f64> {
    let sched = NoiseSchedule::default();
    let mut conds = BTreeMap::new();
    conds.insert("a".to_string(), vec![0, 2]);
    let model = ConditionedMixture::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![1.0, -1.0], vec![-0.5, 2.0], vec![0.0, 0.3]],
        0.4,
        conds,
    )?;
    let mut rng = rng_for(seed, 20_000);
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        let t = rng.random_range(1..=sched.max_t());
        let x = standard_normal_vec(&mut rng, 2);
        let cond = if i % 2 == 0 { "a" } else { NULL_CONDITION };
        let e = model.eps_predict(&x, t, cond, &sched)?;
        let fd = finite_diff(|p| model.log_density(p, t, cond, &sched).expect("valid"), &x, 1e-5)?;
        let c = -(1.0 - sched.alpha_bar(t)).sqrt();
        let err = norm(&e.iter().zip(&fd).map(|(a, g)| a - c * g).collect::<Vec<_>>());
        worst = worst.max(err / norm(&e).max(1e-6));
    }
    Ok(worst)
}

fn check_identity(probes: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 30_000);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let img = PixelImage::new(standard_normal_vec(&mut rng, 5));
        let up = standard_normal_vec(&mut rng, 5);
        let g = img.render_grad(&View::IDENTITY, &up)?;
        let mut probe = img.clone();
        let fd = finite_diff(
            |p| {
                probe.set_params(p).expect("param length");
                dot(&probe.render(&View::IDENTITY), &up)
            },
            &img.theta,
            1e-3,
        )?;
        worst = worst.max(coordinate_rel_err(&g, &fd, 1e-6));
    }
    Ok(worst)
}

/// Runs every configured check. An empty check list is a configuration
/// error.
pub fn run_gradchecks(cfg: &GradCheckConfig, fault: Option<Fault>) -> Result<Vec<GradCheckResult>> {
    if cfg.checks.is_empty() {
        return Err(Error::Config("gradcheck: empty check list".into()));
    }
    if cfg.probes == 0 {
        return Err(Error::Config("gradcheck: probes must be >= 1".into()));
    }
    cfg.checks
        .iter()
        .map(|&kind| {
            let err = match kind {
                GradCheckKind::Renderer => check_renderer(cfg.probes, cfg.seed, fault)?,
                GradCheckKind::Operator => check_operator(cfg.probes, cfg.seed, fault)?,
                GradCheckKind::Score => check_score(cfg.probes, cfg.seed)?,
                GradCheckKind::Identity => check_identity(cfg.probes, cfg.seed)?,
            };
            Ok(GradCheckResult {
                kind,
                probes: cfg.probes,
                max_rel_err: err,
                passed: err < kind.tolerance(),
            })
        })
        .collect()
}

/// K soft-disk templates on `canvas`, centers evenly spaced on a circle of
/// radius 0.25 around the canvas center. Pixel values lie in [0, 0.8].
pub fn disk_templates(canvas: Canvas, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / count.max(1) as f64;
            let c = [0.5 + 0.25 * a.cos(), 0.5 + 0.25 * a.sin()];
            let mut img = Vec::with_capacity(canvas.len());
            for row in 0..canvas.height {
                for col in 0..canvas.width {
                    let p = canvas.pixel_center(row, col);
                    let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                    let v = 0.8 * (-r2 / (2.0 * 0.12f64.powi(2))).exp();
                    img.extend(std::iter::repeat_n(v, canvas.channels));
                }
            }
            img
        })
        .collect()
}

/// Equal-weight mixture over [`disk_templates`], one condition
/// `template<k>` per component.
pub fn template_mixture(canvas: Canvas, count: usize, sigma: f64) -> Result<ConditionedMixture> {
    if count == 0 {
        return Err(Error::InvalidMixture("template count must be >= 1".into()));
    }
    let conds = (0..count).map(|k| (format!("template{k}"), vec![k])).collect();
    ConditionedMixture::new(vec![1.0 / count as f64; count], disk_templates(canvas, count), sigma, conds)
}
