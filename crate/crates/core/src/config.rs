//! Experiment configuration: a sectioned TOML document mirrored by the
//! resolved manifest written next to every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{template_mixture, BimodalBenchmark, DegradationTask, GradCheckConfig, GridSpec};
use crate::degradation::{Activation, DegradationOperator, OperatorInit, OperatorVariant};
use crate::distill::{DistillConfig, LossKind, OperatorInput};
use crate::error::{Error, Result};
use crate::mixture::{ConditionedMixture, NULL_CONDITION};
use crate::renderer::{Canvas, ViewSampler};
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub max_t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            max_t: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcaSection {
    pub cutoff: usize,
}

impl Default for DcaSection {
    fn default() -> Self {
        Self { cutoff: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSection {
    pub kind: WeightKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixturePreset {
    /// Components listed explicitly.
    Explicit,
    /// Two modes at ±`mode` in one dimension, conditions `left`/`right`.
    #[default]
    Bimodal,
    /// Soft-disk templates on the renderer canvas, conditions `template<k>`.
    Templates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub preset: MixturePreset,
    pub dim: Option<usize>,
    pub sigma: f64,
    pub mode: f64,
    pub template_count: usize,
    pub components: Vec<Component>,
    pub conditions: BTreeMap<String, Vec<usize>>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            preset: MixturePreset::Bimodal,
            dim: None,
            sigma: 0.2,
            mode: 2.0,
            template_count: 4,
            components: Vec::new(),
            conditions: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    /// Defaults to [4d, 4d].
    pub hidden_dims: Option<Vec<usize>>,
    pub activation: Activation,
    pub init: OperatorInit,
    pub variant: OperatorVariant,
    pub lr: f64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            hidden_dims: None,
            activation: Activation::Tanh,
            init: OperatorInit::ZeroOutput,
            variant: OperatorVariant::Nonlinear,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RendererKind {
    /// The optimized parameters are the sample itself.
    #[default]
    Pixel,
    Splat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererSection {
    pub kind: RendererKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub splats: usize,
    /// Std of splat centers around the canvas center.
    pub init_spread: f64,
    pub init_scale: f64,
    pub init_color: f64,
    /// Initial value of every pixel-renderer coordinate.
    pub init_value: f64,
}

impl Default for RendererSection {
    fn default() -> Self {
        Self {
            kind: RendererKind::Pixel,
            height: 16,
            width: 16,
            channels: 1,
            splats: 64,
            init_spread: 0.1,
            init_scale: 0.06,
            init_color: 0.3,
            init_value: 0.0,
        }
    }
}

impl RendererSection {
    pub fn canvas(&self) -> Canvas {
        Canvas {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub loss_kind: LossKind,
    pub cfg_scale: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub scene_lr: f64,
    pub condition: String,
    pub negative_condition: Option<String>,
    pub neg_weight: f64,
    pub t_min: usize,
    /// Defaults to T.
    pub t_max: Option<usize>,
    pub snapshot_every: usize,
    pub conditional_term: bool,
    pub through_noisy_sample: bool,
    pub operator_input: OperatorInput,
    pub record_wall_time: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            loss_kind: d.loss_kind,
            cfg_scale: d.cfg_scale,
            iterations: d.iterations,
            batch_size: d.batch_size,
            scene_lr: d.scene_lr,
            condition: d.condition,
            negative_condition: d.negative_condition,
            neg_weight: d.neg_weight,
            t_min: d.t_min,
            t_max: None,
            snapshot_every: d.snapshot_every,
            conditional_term: d.conditional_term,
            through_noisy_sample: d.through_noisy_sample,
            operator_input: d.operator_input,
            record_wall_time: d.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub trials: usize,
    /// Defaults to 1, 1%, 2.5%, 5% and every 10% of T.
    pub t_grid: Option<Vec<usize>>,
    pub condition: String,
    /// Fixed clean sample; draws from the mixture when absent.
    pub x0: Option<Vec<f64>>,
    pub kl_theta: Option<Vec<f64>>,
    /// Defaults to 10%, 50% and 90% of T.
    pub kl_t: Option<Vec<usize>>,
    pub grid: GridSpec,
    pub ablation_seeds: Vec<u64>,
    pub benchmark: BimodalBenchmark,
    pub degradation_task: DegradationTask,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            trials: 1000,
            t_grid: None,
            condition: NULL_CONDITION.into(),
            x0: None,
            kl_theta: None,
            kl_t: None,
            grid: GridSpec::default(),
            ablation_seeds: vec![0],
            benchmark: BimodalBenchmark::default(),
            degradation_task: DegradationTask::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleSection,
    pub dca: DcaSection,
    pub weight: WeightSection,
    pub mixture: MixtureSection,
    pub operator: OperatorSection,
    pub renderer: RendererSection,
    pub view: ViewSampler,
    pub distill: DistillSection,
    pub analysis: AnalysisSection,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            schedule: ScheduleSection::default(),
            dca: DcaSection::default(),
            weight: WeightSection::default(),
            mixture: MixtureSection::default(),
            operator: OperatorSection::default(),
            renderer: RendererSection::default(),
            view: ViewSampler::default(),
            distill: DistillSection::default(),
            analysis: AnalysisSection::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => cfg_err(other),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(cfg_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.max_t, s.beta_min, s.beta_max, s.kind).map_err(cfg_err)
    }

    pub fn mixture(&self) -> Result<ConditionedMixture> {
        let m = &self.mixture;
        let model = match m.preset {
            MixturePreset::Bimodal => BimodalBenchmark {
                mode: m.mode,
                sigma: m.sigma,
                ..Default::default()
            }
            .model(),
            MixturePreset::Templates => template_mixture(self.renderer.canvas(), m.template_count, m.sigma),
            MixturePreset::Explicit => {
                if m.components.is_empty() {
                    return Err(Error::Config("mixture.components is empty".into()));
                }
                if let Some(d) = m.dim {
                    if let Some(c) = m.components.iter().find(|c| c.mean.len() != d) {
                        return Err(Error::Config(format!(
                            "component mean has length {}, mixture.dim is {d}",
                            c.mean.len()
                        )));
                    }
                }
                ConditionedMixture::new(
                    m.components.iter().map(|c| c.weight).collect(),
                    m.components.iter().map(|c| c.mean.clone()).collect(),
                    m.sigma,
                    m.conditions.clone(),
                )
            }
        };
        model.map_err(cfg_err)
    }

    /// Dimension of the rendered sample.
    pub fn sample_dim(&self, model: &ConditionedMixture) -> usize {
        match self.renderer.kind {
            RendererKind::Pixel => model.dim(),
            RendererKind::Splat => self.renderer.canvas().len(),
        }
    }

    pub fn operator_hidden(&self, dim: usize) -> Vec<usize> {
        self.operator
            .hidden_dims
            .clone()
            .unwrap_or_else(|| DegradationOperator::default_hidden(dim))
    }

    pub fn distill_config(&self, sched: &NoiseSchedule) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            loss_kind: d.loss_kind,
            cfg_scale: d.cfg_scale,
            dca_cutoff: self.dca.cutoff,
            iterations: d.iterations,
            batch_size: d.batch_size,
            scene_lr: d.scene_lr,
            operator_lr: self.operator.lr,
            condition: d.condition.clone(),
            negative_condition: d.negative_condition.clone(),
            neg_weight: d.neg_weight,
            seed: self.seed,
            weight: self.weight.kind,
            t_min: d.t_min,
            t_max: d.t_max.unwrap_or(sched.max_t()),
            snapshot_every: d.snapshot_every,
            conditional_term: d.conditional_term,
            through_noisy_sample: d.through_noisy_sample,
            operator_input: d.operator_input,
            record_wall_time: d.record_wall_time,
        }
    }

    /// Checks every section and returns the config with all defaults that
    /// depend on other sections filled in.
    pub fn resolve(&self) -> Result<Self> {
        let sched = self.schedule()?;
        let model = self.mixture()?;
        let mut out = self.clone();
        out.mixture.dim = Some(model.dim());
        let dim = self.sample_dim(&model);
        if dim != model.dim() {
            return Err(Error::Config(format!(
                "renderer produces {dim} values but the mixture has dimension {}",
                model.dim()
            )));
        }
        if self.renderer.kind == RendererKind::Splat {
            let r = &self.renderer;
            if r.height == 0 || r.width == 0 || r.channels == 0 {
                return Err(Error::Config("renderer canvas must be non-empty".into()));
            }
            if !(r.init_scale > 0.0 && r.init_spread >= 0.0) {
                return Err(Error::Config("renderer init_scale must be > 0, init_spread >= 0".into()));
            }
        }
        out.operator.hidden_dims = Some(self.operator_hidden(dim));
        if !(self.operator.lr > 0.0) {
            return Err(Error::Config("operator.lr must be positive".into()));
        }
        out.distill.t_max = Some(self.distill.t_max.unwrap_or(sched.max_t()));
        self.view.validate().map_err(cfg_err)?;
        out.distill_config(&sched).validate(&model, &sched).map_err(as_config)?;
        if out.analysis.trials < crate::analysis::MIN_TRIALS {
            return Err(Error::Config(format!(
                "analysis.trials must be >= {}",
                crate::analysis::MIN_TRIALS
            )));
        }
        model.mask(&self.analysis.condition).map_err(cfg_err)?;
        let frac = |f: f64| ((f * sched.max_t() as f64).round() as usize).max(1);
        let t_grid = self.analysis.t_grid.clone().unwrap_or_else(|| {
            let mut g: Vec<usize> = [0.0, 0.01, 0.025, 0.05].iter().map(|&f| frac(f)).collect();
            g.extend((1..=10).map(|k| frac(k as f64 / 10.0)));
            g.dedup();
            g
        });
        let kl_t = self
            .analysis
            .kl_t
            .clone()
            .unwrap_or_else(|| vec![frac(0.1), frac(0.5), frac(0.9)]);
        if let Some(t) = t_grid.iter().chain(&kl_t).find(|&&t| t < 1 || t > sched.max_t()) {
            return Err(Error::Config(format!("analysis timestep {t} outside [1, T]")));
        }
        out.analysis.t_grid = Some(t_grid);
        out.analysis.kl_t = Some(kl_t);
        Ok(out)
    }

    /// TOML text of the config; parsing it back gives an equal config.
    pub fn to_manifest(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(cfg.operator.hidden_dims, Some(vec![4, 4]));
        assert_eq!(cfg.distill.t_max, Some(1000));
        assert_eq!(cfg.mixture.dim, Some(1));
        assert_eq!(
            cfg.analysis.t_grid,
            Some(vec![1, 10, 25, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000])
        );
        assert_eq!(cfg.analysis.kl_t, Some(vec![100, 500, 900]));
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = ExperimentConfig::default().resolve().unwrap();
        let text = cfg.to_manifest().unwrap();
        assert!(text.contains("T = 1000"));
        assert!(text.contains("[distill]"));
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.resolve().unwrap(), cfg);
    }

    #[test]
    fn parses_explicit_mixture() {
        let text = r#"
            seed = 7
            [schedule]
            kind = "scaled_linear"
            T = 500
            [mixture]
            preset = "explicit"
            dim = 2
            sigma = 0.3
            components = [{ weight = 0.25, mean = [1.0, 0.0] }, { weight = 0.75, mean = [-1.0, 0.5] }]
            conditions = { cat = [0], dog = [1] }
            [distill]
            loss_kind = "neg_prompt"
            condition = "cat"
            negative_condition = "dog"
            iterations = 3
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.kind, ScheduleKind::ScaledLinear);
        let m = cfg.mixture().unwrap();
        assert_eq!(m.dim(), 2);
        assert!(m.mask("dog").is_ok());
        let dc = cfg.distill_config(&cfg.schedule().unwrap());
        assert_eq!(dc.loss_kind, LossKind::NegPrompt);
        assert_eq!(dc.t_max, 500);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "unknown_key = 1",
            "[distill]\niterations = 0",
            "[distill]\nloss_kind = \"neg_prompt\"",
            "[distill]\ncondition = \"missing\"",
            "[schedule]\nbeta_min = 0.5\nbeta_max = 0.1",
            "[mixture]\npreset = \"explicit\"",
            "[mixture]\npreset = \"explicit\"\ndim = 2\ncomponents = [{ weight = 1.0, mean = [0.0] }]",
            "[renderer]\nkind = \"splat\"",
            "[analysis]\ntrials = 5",
            "[analysis]\nt_grid = [0]",
            "[dca]\ncutoff = 5000",
            "[view]\nzoom_min = 0.0",
            "[distill]\ncfg_scale = -1.0",
        ];
        for text in bad {
            let res = ExperimentConfig::from_toml_str(text).and_then(|c| c.resolve());
            assert!(matches!(res, Err(Error::Config(_))), "{text:?} gave {res:?}");
        }
    }

    #[test]
    fn templates_on_splat_canvas() {
        let text = "[mixture]\npreset = \"templates\"\nsigma = 0.1\n[renderer]\nkind = \"splat\"\nheight = 8\nwidth = 8\nchannels = 3\n[distill]\ncondition = \"template1\"";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.mixture.dim, Some(192));
        assert_eq!(cfg.operator.hidden_dims, Some(vec![768, 768]));
    }
}
