//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or usage
//! error, 3 numerical abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{
    ablation_degradation, ablation_to_csv, correlation_curve, kl_quadrature, run_gradchecks, variance_curve,
    Fault, X0Source,
};
use crate::config::{ExperimentConfig, RendererKind};
use crate::degradation::{DegradationOperator, OperatorVariant};
use crate::distill::{run_distillation, Trajectory};
use crate::error::{Error, Result};
use crate::mixture::ConditionedMixture;
use crate::renderer::{write_netpbm, PixelImage, Representation, SplatScene, View};
use crate::schedule::NoiseSchedule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdlab", version, about = "Desk-scale score distillation experiments")]
pub struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true, env = "SDLAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Correlation,
    Variance,
    Kl,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    RenderGrad,
    OperatorGrad,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the distillation loop and write trajectory, snapshots and final state.
    Distill,
    /// Draw reference samples from the score model.
    Sample {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Defaults to distill.condition.
        #[arg(long)]
        condition: Option<String>,
    },
    /// Write one of the analysis reports.
    Analyze {
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.gradcheck.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.resolve()
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(Error::from)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_row(prefix: &str, values: &[f64]) -> String {
    let mut s = prefix.to_string();
    for v in values {
        s.push(',');
        s.push_str(&v.to_string());
    }
    s.push('\n');
    s
}

fn coord_header(first: &str, dim: usize) -> String {
    let cols: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    format!("{first},{}\n", cols.join(","))
}

/// Runs `cli` and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = load_config(cli).and_then(|cfg| match &cli.command {
        Command::Distill => cmd_distill(&cfg),
        Command::Sample { count, condition } => cmd_sample(&cfg, *count, condition.as_deref()),
        Command::Analyze { which } => cmd_analyze(&cfg, *which),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(&cfg, *inject_fault),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

trait Artifact: Representation {
    fn save_final(&self, dir: &Path) -> Result<()>;
    fn save_snapshots(snapshots: &[(usize, Vec<f64>)], template: &Self, dir: &Path) -> Result<()>;
}

impl Artifact for PixelImage {
    fn save_final(&self, dir: &Path) -> Result<()> {
        let text = coord_header("name", self.theta.len()) + &csv_row("theta", &self.theta);
        write_file(&dir.join("scene.csv"), &text)
    }

    fn save_snapshots(snapshots: &[(usize, Vec<f64>)], template: &Self, dir: &Path) -> Result<()> {
        if snapshots.is_empty() {
            return Ok(());
        }
        let mut text = coord_header("iter", template.theta.len());
        for (iter, p) in snapshots {
            text.push_str(&csv_row(&iter.to_string(), p));
        }
        write_file(&dir.join("snapshots.csv"), &text)
    }
}

fn image_name(stem: &str, channels: usize) -> String {
    format!("{stem}.{}", if channels == 3 { "ppm" } else { "pgm" })
}

impl Artifact for SplatScene {
    fn save_final(&self, dir: &Path) -> Result<()> {
        self.write_to(create(&dir.join("scene.splat"))?)?;
        let img = self.render(&View::IDENTITY);
        write_netpbm(create(&dir.join(image_name("render", self.canvas.channels)))?, self.canvas, &img)
    }

    fn save_snapshots(snapshots: &[(usize, Vec<f64>)], template: &Self, dir: &Path) -> Result<()> {
        if snapshots.is_empty() {
            return Ok(());
        }
        let sub = dir.join("snapshots");
        create_out_dir(&sub)?;
        let mut scene = template.clone();
        for (iter, p) in snapshots {
            scene.set_params(p)?;
            scene.write_to(create(&sub.join(format!("iter_{iter:06}.splat")))?)?;
        }
        Ok(())
    }
}

fn distill_and_save<R: Artifact>(
    cfg: &ExperimentConfig,
    model: &ConditionedMixture,
    sched: &NoiseSchedule,
    scene: R,
    op: DegradationOperator,
) -> Result<Trajectory> {
    let dcfg = cfg.distill_config(sched);
    let template = scene.clone();
    let out = run_distillation(&dcfg, model, sched, &cfg.view, scene, op)?;
    let dir = &cfg.output_dir;
    write_file(&dir.join("trajectory.csv"), &out.trajectory.to_csv())?;
    out.scene.save_final(dir)?;
    R::save_snapshots(&out.trajectory.snapshots, &template, dir)?;
    out.operator.write_to(create(&dir.join("operator.vdmop"))?)?;
    Ok(out.trajectory)
}

pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<i32> {
    let sched = cfg.schedule()?;
    let model = cfg.mixture()?;
    create_out_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("manifest.toml"), &cfg.to_manifest()?)?;
    let dim = model.dim();
    let mut op_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    op_rng.set_stream(1);
    let hidden = cfg.operator_hidden(dim);
    // `init` applies to the plain nonlinear design; the ablation designs
    // always start from a zero output layer
    let op = match cfg.operator.variant {
        OperatorVariant::Nonlinear => {
            let dims: Vec<usize> = std::iter::once(dim).chain(hidden).chain([dim]).collect();
            DegradationOperator::new(&dims, cfg.operator.activation, cfg.operator.init, &mut op_rng)?
        }
        v => DegradationOperator::for_variant(v, dim, &hidden, cfg.operator.activation, &mut op_rng)?,
    };
    let trajectory = match cfg.renderer.kind {
        RendererKind::Pixel => {
            let scene = PixelImage::new(vec![cfg.renderer.init_value; dim]);
            distill_and_save(cfg, &model, &sched, scene, op)?
        }
        RendererKind::Splat => {
            let r = &cfg.renderer;
            let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            scene_rng.set_stream(2);
            let scene = SplatScene::init_random(r.canvas(), r.splats, r.init_spread, r.init_scale, r.init_color, &mut scene_rng)
                .map_err(|e| Error::Config(e.to_string()))?;
            distill_and_save(cfg, &model, &sched, scene, op)?
        }
    };
    if let Some(last) = trajectory.records.last() {
        println!(
            "distill: {} iterations, final loss {:.6e}, grad norm {:.6e} -> {}",
            last.iter,
            last.loss,
            last.grad_norm,
            cfg.output_dir.display()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_sample(cfg: &ExperimentConfig, count: usize, condition: Option<&str>) -> Result<i32> {
    let sched = cfg.schedule()?;
    let model = cfg.mixture()?;
    let cond = condition.unwrap_or(&cfg.distill.condition);
    model.mask(cond).map_err(|e| Error::Config(e.to_string()))?;
    if count == 0 {
        return Ok(EXIT_OK);
    }
    let samples: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + i as u64);
            model.ancestral_sample_with(cond, &sched, &mut rng)
        })
        .collect::<Result<_>>()?;
    create_out_dir(&cfg.output_dir)?;
    match cfg.renderer.kind {
        RendererKind::Pixel => {
            let mut text = coord_header("sample", model.dim());
            for (i, s) in samples.iter().enumerate() {
                text.push_str(&csv_row(&i.to_string(), s));
            }
            write_file(&cfg.output_dir.join("samples.csv"), &text)?;
        }
        RendererKind::Splat => {
            let canvas = cfg.renderer.canvas();
            for (i, s) in samples.iter().enumerate() {
                let name = image_name(&format!("sample_{i:03}"), canvas.channels);
                write_netpbm(create(&cfg.output_dir.join(name))?, canvas, s)?;
            }
        }
    }
    println!("sample: {count} draws for condition '{cond}' -> {}", cfg.output_dir.display());
    Ok(EXIT_OK)
}

pub fn cmd_analyze(cfg: &ExperimentConfig, which: Which) -> Result<i32> {
    let sched = cfg.schedule()?;
    let model = cfg.mixture()?;
    let a = &cfg.analysis;
    let dir = &cfg.output_dir;
    create_out_dir(dir)?;
    write_file(&dir.join("manifest.toml"), &cfg.to_manifest()?)?;
    let source = match &a.x0 {
        Some(x) => X0Source::Fixed(x.clone()),
        None => X0Source::MixtureDraws,
    };
    let t_grid = a.t_grid.clone().unwrap_or_default();
    match which {
        Which::Correlation => {
            let c = correlation_curve(&model, &sched, &a.condition, &source, a.trials, &t_grid, cfg.seed)?;
            write_file(&dir.join("correlation.csv"), &c.cosine.to_csv())?;
            write_file(&dir.join("correlation_pearson.csv"), &c.pearson.to_csv())?;
            print!("{}", c.cosine.to_csv());
        }
        Which::Variance => {
            let v = variance_curve(&model, &sched, &a.condition, &source, a.trials, &t_grid, cfg.seed)?;
            write_file(&dir.join("variance.csv"), &v.to_csv())?;
            print!("{}", v.to_csv());
        }
        Which::Kl => {
            let theta = a.kl_theta.clone().unwrap_or_else(|| vec![0.0; model.dim()]);
            let mut text = String::from("t,kl\n");
            for &t in a.kl_t.as_deref().unwrap_or_default() {
                let kl = kl_quadrature(&theta, &model, &sched, t, &a.condition, &a.grid)?;
                text.push_str(&format!("{t},{kl}\n"));
            }
            write_file(&dir.join("kl.csv"), &text)?;
            print!("{text}");
        }
        Which::Ablation => {
            let mut rows = Vec::new();
            let mut task = String::from("variant,final_op_loss,seed\n");
            for &seed in &a.ablation_seeds {
                rows.extend(ablation_degradation(&a.benchmark, &sched, seed)?);
                for v in OperatorVariant::ALL {
                    let loss = a.degradation_task.run(v, seed)?;
                    task.push_str(&format!("{},{loss},{seed}\n", v.name()));
                }
            }
            write_file(&dir.join("ablation.csv"), &ablation_to_csv(&rows))?;
            write_file(&dir.join("degradation_task.csv"), &task)?;
            print!("{}", ablation_to_csv(&rows));
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, fault: Option<FaultArg>) -> Result<i32> {
    let fault = fault.map(|f| match f {
        FaultArg::RenderGrad => Fault::RenderGrad,
        FaultArg::OperatorGrad => Fault::OperatorGrad,
    });
    let results = run_gradchecks(&cfg.gradcheck, fault)?;
    let mut out = std::io::stdout().lock();
    for r in &results {
        writeln!(out, "{r}")?;
    }
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}
