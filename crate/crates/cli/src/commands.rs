use amortized_transport::dataset::{generate, Experiment, JointDataset, JointSimulator, PriorConfig};
use amortized_transport::ensemble::{sample_std, PosteriorEnsemble};
use amortized_transport::evaluation::{
    append_jsonl, export_plot_data, histogram, per_mode_wasserstein, quadrature_posterior, scaling_study,
    spread_ratio, w1_quantile, HistogramRow, MetricsRecord, ModeW1Row, OverlayRow, PlotData,
};
use amortized_transport::grf::{CosineBasis, PriorSampler};
use amortized_transport::objective::{energy_distance_sq_1d, loss_gradient_check};
use amortized_transport::pcn::{misfit, run_chain, GaussianPrior, ScalarGaussianPrior};
use amortized_transport::rng::{component_rng, derive_seed};
use amortized_transport::training::{reference_sampler, train as fit, TrainReport};
use amortized_transport::transport::{pushforward, ReferenceKind, ReferenceSampler, TransportModel};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

use crate::config::{self, Metric, RunConfig};
use crate::manifest::{self, manifest_path, RunClock};
use crate::{CliError, Common, Observation};

pub struct Context {
    pub cfg: RunConfig,
    pub resolved: Value,
    pub seed: u64,
    argv: Vec<String>,
    clock: RunClock,
}

impl Context {
    pub fn new(common: &Common, overrides: &[(String, String)], argv: Vec<String>) -> Result<Self, CliError> {
        let clock = RunClock::start();
        let mut overrides = overrides.to_vec();
        if let Some(s) = common.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        let (cfg, resolved) = config::load(&common.config, &overrides)?;
        Ok(Self {
            seed: cfg.seed,
            cfg,
            resolved,
            argv,
            clock,
        })
    }

    fn finish(&self, command: &str, artifact: &Path, outputs: Vec<PathBuf>, results: Value) -> Result<(), CliError> {
        let path = manifest_path(artifact);
        manifest::write(&path, command, &self.argv, &self.resolved, self.seed, &self.clock, outputs, results)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn out_dir_join(&self, name: &str) -> Option<PathBuf> {
        self.cfg.paths.out_dir.as_ref().map(|d| d.join(name))
    }
}

fn need(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Schema(format!("no {what} path given on the command line or in the config")))
}

fn load_dataset(path: &Path) -> Result<JointDataset, CliError> {
    if !path.exists() {
        return Err(CliError::missing(path, "not found"));
    }
    Ok(JointDataset::load(path)?)
}

fn load_model(path: &Path) -> Result<TransportModel<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::missing(path, "not found"));
    }
    Ok(TransportModel::load(path)?)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| CliError::Runtime(e.into()))?;
    }
    Ok(())
}

fn check_dims(ctx: &Context, data: &JointDataset) -> Result<(), CliError> {
    let gen = ctx.cfg.generate_config();
    if data.d_u() != gen.d_u() || data.d_y() != gen.d_y() {
        return Err(CliError::Schema(format!(
            "dataset has d_u = {}, d_y = {} but the config expects {}, {}",
            data.d_u(),
            data.d_y(),
            gen.d_u(),
            gen.d_y()
        )));
    }
    Ok(())
}

/// The observation vector and a label for it.
fn observation(ctx: &Context, obs: &Observation) -> Result<(Vec<f64>, String), CliError> {
    if let Some(y) = &obs.y {
        let label = format!("y={}", y.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        return Ok((y.clone(), label));
    }
    let index = obs
        .y_index
        .ok_or_else(|| CliError::Schema("give either --y or --y-index with a dataset".into()))?;
    let path = need(obs.dataset.clone().or(ctx.cfg.paths.dataset.clone()), "dataset")?;
    let data = load_dataset(&path)?;
    if index >= data.len() {
        return Err(CliError::Schema(format!("--y-index {index} out of range for {} rows", data.len())));
    }
    Ok((data.y_row(index).to_vec(), format!("y_index={index}")))
}

fn check_obs_len(model: &TransportModel<f64>, y: &[f64]) -> Result<(), CliError> {
    let expected = match model.reference() {
        ReferenceKind::Prior => model.arch().cond_dim,
        ReferenceKind::Joint => model.arch().cond_dim / 2,
    };
    if y.len() != expected {
        return Err(CliError::Schema(format!("observation has {} entries, model expects {expected}", y.len())));
    }
    Ok(())
}

fn model_sampler(
    ctx: &Context,
    model: &TransportModel<f64>,
    obs: &Observation,
) -> Result<Box<dyn ReferenceSampler<f64>>, CliError> {
    let gen = ctx.cfg.generate_config();
    let joint = match model.reference() {
        ReferenceKind::Joint => {
            let path = need(
                ctx.cfg.paths.reference_data.clone().or(obs.dataset.clone()).or(ctx.cfg.paths.dataset.clone()),
                "joint reference data",
            )?;
            Some(load_dataset(&path)?)
        }
        ReferenceKind::Prior => None,
    };
    Ok(reference_sampler(&gen, model.reference(), joint.as_ref())?)
}

pub fn gen_data(ctx: Context, n: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need(out.or(ctx.cfg.paths.dataset.clone()).or(ctx.out_dir_join("data.atjd")), "output")?;
    let rows = n.unwrap_or(ctx.cfg.experiment.rows);
    let data = generate(&ctx.cfg.generate_config(), rows, ctx.seed)?;
    ensure_parent(&out)?;
    data.save(&out)?;
    let resampled = data.meta.as_ref().map_or(0, |m| m.resampled);
    log::info!("wrote {rows} rows to {}", out.display());
    ctx.finish("gen-data", &out, vec![out.clone()], json!({ "rows": rows, "resampled": resampled }))
}

pub fn train(ctx: Context, dataset: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let data_path = need(dataset.or(ctx.cfg.paths.dataset.clone()), "dataset")?;
    let out = need(out.or(ctx.cfg.paths.model.clone()).or(ctx.out_dir_join("model.atmc")), "output")?;
    let data = load_dataset(&data_path)?;
    check_dims(&ctx, &data)?;
    let gen = ctx.cfg.generate_config();
    let mut model = ctx.cfg.model.build(&gen, &data).map_err(CliError::Invalid)?;
    let joint = match &ctx.cfg.paths.reference_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let sampler = reference_sampler(&gen, ctx.cfg.model.reference, Some(joint.as_ref().unwrap_or(&data)))?;
    let report: TrainReport = fit(&mut model, &data, sampler.as_ref(), &ctx.cfg.training, ctx.seed, |e, l| {
        log::info!("epoch {e}: loss {l:.6}")
    })?;
    ensure_parent(&out)?;
    model.save(&out)?;
    ctx.finish(
        "train",
        &out,
        vec![out.clone()],
        json!({
            "final_loss": report.final_loss,
            "epoch_losses": report.epoch_losses,
            "steps": report.steps,
            "n_params": model.theta().len(),
            "dataset": data_path,
        }),
    )
}

pub fn sample(
    ctx: Context,
    model: Option<PathBuf>,
    obs: &Observation,
    n: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_model(&need(model.or(ctx.cfg.paths.model.clone()), "model")?)?;
    let (y, label) = observation(&ctx, obs)?;
    check_obs_len(&model, &y)?;
    let sampler = model_sampler(&ctx, &model, obs)?;
    let m = n.unwrap_or(ctx.cfg.eval.n_samples);
    let ens = pushforward(&model, &y, m, sampler.as_ref(), derive_seed(ctx.seed, "sample"))?;
    ensure_parent(out)?;
    ens.save(out)?;
    ctx.finish("sample", out, vec![out.to_path_buf()], json!({ "samples": m, "observation": label }))
}

pub fn pcn(ctx: Context, obs: &Observation, out: &Path) -> Result<(), CliError> {
    let (y, label) = observation(&ctx, obs)?;
    let gen = ctx.cfg.generate_config();
    if y.len() != gen.d_y() {
        return Err(CliError::Schema(format!("observation has {} entries, experiment expects {}", y.len(), gen.d_y())));
    }
    let sim = JointSimulator::new(gen.clone()).map_err(CliError::Invalid)?;
    let prior: Box<dyn GaussianPrior<f64>> = match &gen.prior {
        PriorConfig::Scalar { mean, std } => Box::new(ScalarGaussianPrior { mean: *mean, std: *std }),
        PriorConfig::Field { covariance } => Box::new(PriorSampler::new(*covariance, gen.d_u())?),
    };
    let sigma = gen.sigma_obs;
    let phi = |u: &[f64]| misfit(&sim.forward(u)?, &y, sigma);
    let pcfg = ctx.cfg.pcn.with_seed(derive_seed(ctx.seed, "pcn"));
    let res = run_chain(&y, &phi, prior.as_ref(), &pcfg)?;
    ensure_parent(out)?;
    res.ensemble.save(out)?;
    let trace_path = PathBuf::from(format!("{}.trace.csv", out.display()));
    let mut w = csv::Writer::from_path(&trace_path).map_err(|e| CliError::Runtime(e.into()))?;
    w.write_record(["step", "phi"]).map_err(|e| CliError::Runtime(e.into()))?;
    for (i, phi) in res.phi_trace.iter().enumerate().step_by(pcfg.thin) {
        w.write_record([i.to_string(), phi.to_string()]).map_err(|e| CliError::Runtime(e.into()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.into()))?;
    ctx.finish(
        "pcn",
        out,
        vec![out.to_path_buf(), trace_path],
        json!({
            "observation": label,
            "acceptance_rate": res.acceptance_rate,
            "burn_in_acceptance": res.burn_in_acceptance,
            "final_beta": res.final_beta,
            "forward_failures": res.forward_failures,
            "samples": res.ensemble.len(),
        }),
    )
}

pub fn eval(
    ctx: Context,
    model: Option<PathBuf>,
    obs: &Observation,
    reference: Option<PathBuf>,
    out: &Path,
    plot_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let model = load_model(&need(model.or(ctx.cfg.paths.model.clone()), "model")?)?;
    let (y, label) = observation(&ctx, obs)?;
    check_obs_len(&model, &y)?;
    let gen = ctx.cfg.generate_config();
    let reference = match &reference {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::missing(p, "not found"));
            }
            Some(PosteriorEnsemble::<f64>::load(p)?)
        }
        None => None,
    };
    let metrics = ctx.cfg.eval.metrics_for(gen.experiment, reference.is_some());
    let n = ctx.cfg.eval.n_samples;
    let sampler = model_sampler(&ctx, &model, obs)?;
    let push = pushforward(&model, &y, n, sampler.as_ref(), derive_seed(ctx.seed, "eval"))?;
    let experiment = format!("{:?}", gen.experiment).to_lowercase();
    let mut records = Vec::new();
    let mut plot = PlotData::default();
    let record = |metric: &str, mode: Option<usize>, value: f64, sizes: Vec<usize>| MetricsRecord {
        experiment: experiment.clone(),
        observation: label.clone(),
        metric: metric.to_string(),
        mode,
        value,
        sample_sizes: sizes,
        seed: ctx.seed,
    };

    match (&gen.prior, gen.experiment) {
        (PriorConfig::Scalar { mean, std }, Experiment::Quadratic) => {
            let q = quadrature_posterior(y[0], *mean, *std, gen.sigma_obs)?;
            let xs = push.scalars();
            for m in &metrics {
                match m {
                    Metric::W1 => records.push(record("w1", None, w1_quantile(|p| q.quantile(p), &xs)?, vec![n])),
                    Metric::EnergyDistance => {
                        let nt = ctx.cfg.eval.n_truth;
                        let truth = q.resample(y[0], nt, derive_seed(ctx.seed, "eval-truth"))?;
                        let ed = energy_distance_sq_1d(&xs, &truth.scalars())?;
                        records.push(record("energy_distance_sq", None, ed, vec![n, nt]));
                    }
                    Metric::PosteriorMean => {
                        records.push(record("posterior_mean", None, push.mean()[0], vec![n]));
                        records.push(record("posterior_mean_reference", None, q.mean(), vec![]));
                    }
                    other => return Err(CliError::Schema(format!("metric {other:?} needs a field experiment"))),
                }
            }
            for (x, d) in q.grid.iter().zip(q.density()).step_by(10) {
                plot.overlay.push(OverlayRow { observation: label.clone(), source: "quadrature".into(), x: *x, density: *d });
            }
            for (l, r, d) in histogram(&xs, q.grid[0], q.grid[q.grid.len() - 1], 120) {
                plot.overlay.push(OverlayRow {
                    observation: label.clone(),
                    source: "pushforward".into(),
                    x: 0.5 * (l + r),
                    density: d,
                });
            }
        }
        (PriorConfig::Field { covariance }, _) => {
            let modes = &ctx.cfg.eval.modes;
            for m in &metrics {
                match m {
                    Metric::PerModeW1 => {
                        let r = reference
                            .as_ref()
                            .ok_or_else(|| CliError::Schema("per_mode_w1 needs --reference".into()))?;
                        let w = per_mode_wasserstein(&push, r, modes)?;
                        for (&k, &v) in modes.iter().zip(&w) {
                            records.push(record("per_mode_w1", Some(k), v, vec![n, r.len()]));
                            plot.mode_w1.push(ModeW1Row {
                                observation: label.clone(),
                                pair: "model_vs_reference".into(),
                                mode: k,
                                w1: v,
                                prior_std: covariance.eigenvalue(k)?.sqrt(),
                            });
                        }
                    }
                    Metric::SpreadRatio => {
                        for (&k, v) in modes.iter().zip(spread_ratio(&push, covariance, modes)?) {
                            records.push(record("spread_ratio", Some(k), v, vec![n]));
                        }
                    }
                    Metric::ConstantModeStd => {
                        let basis = CosineBasis::<f64>::new(push.dim(), 0)?;
                        let c0 = push.mode_coefficients(&basis, 0)?;
                        records.push(record("constant_mode_std", Some(0), sample_std(&c0), vec![n]));
                    }
                    other => return Err(CliError::Schema(format!("metric {other:?} needs the scalar experiment"))),
                }
            }
            let k_max = modes.iter().copied().max().unwrap_or(0);
            let basis = CosineBasis::<f64>::new(push.dim(), k_max)?;
            for &k in modes {
                let s = 4.0 * covariance.eigenvalue(k)?.sqrt();
                let mut sources = vec![("pushforward", &push)];
                if let Some(r) = &reference {
                    sources.push(("reference", r));
                }
                for (name, e) in sources {
                    for (l, r, d) in histogram(&e.mode_coefficients(&basis, k)?, -s, s, 40) {
                        plot.histograms.push(HistogramRow {
                            observation: label.clone(),
                            source: name.into(),
                            mode: k,
                            bin_left: l,
                            bin_right: r,
                            density: d,
                        });
                    }
                }
            }
        }
        _ => return Err(CliError::Schema("prior kind does not match the experiment".into())),
    }

    ensure_parent(out)?;
    append_jsonl(out, &records)?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(dir) = plot_dir {
        outputs.extend(export_plot_data(&plot, &dir)?);
    }
    log::info!("wrote {} metric rows to {}", records.len(), out.display());
    ctx.finish("eval", out, outputs, json!({ "observation": label, "records": records.len() }))
}

pub fn scaling(ctx: Context, out_dir: &Path) -> Result<(), CliError> {
    let mut sc = ctx.cfg.eval.scaling.clone();
    sc.seeds = sc.seeds.iter().map(|s| ctx.seed.wrapping_add(*s)).collect();
    sc.data_seed = ctx.seed.wrapping_add(sc.data_seed);
    sc.validate().map_err(CliError::Invalid)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(e.into()))?;
    let report = scaling_study(&sc, |row| {
        log::info!(
            "{} K={} width={} reference={} error={:.4e}",
            row.curve,
            row.k,
            row.width,
            row.reference,
            row.error
        )
    })?;
    let records: Vec<MetricsRecord> = report
        .rows
        .iter()
        .map(|r| MetricsRecord {
            experiment: "quadratic".into(),
            observation: format!("panel:{}", r.curve),
            metric: format!("scaling_error_{}_k{}_w{}", r.reference, r.k, r.width),
            mode: None,
            value: r.error,
            sample_sizes: vec![r.k, sc.n_pushforward, sc.n_truth],
            seed: r.seed,
        })
        .collect();
    let jsonl = out_dir.join("scaling.jsonl");
    if jsonl.exists() {
        std::fs::remove_file(&jsonl).map_err(|e| CliError::Runtime(e.into()))?;
    }
    append_jsonl(&jsonl, &records)?;
    let mut outputs = vec![jsonl];
    outputs.extend(export_plot_data(&PlotData { scaling: report.rows.clone(), ..Default::default() }, out_dir)?);
    let report_path = out_dir.join("scaling_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.into()))?)
        .map_err(|e| CliError::Runtime(e.into()))?;
    outputs.push(report_path.clone());
    log::info!("data-size slope {:.3}", report.slope);
    ctx.finish(
        "scaling",
        &out_dir.join("scaling"),
        outputs,
        json!({
            "slope": report.slope,
            "prior_error_at_max": report.prior_error_at_max,
            "joint_error_at_max": report.joint_error_at_max,
        }),
    )
}

pub fn gradcheck(ctx: Context, tol: f64, coords: usize) -> Result<(), CliError> {
    let gen = ctx.cfg.generate_config();
    let rows = ctx.cfg.training.batch_size.clamp(2, 8);
    let data = generate(&gen, rows, derive_seed(ctx.seed, "gradcheck-data"))?;
    let mut model = ctx.cfg.model.build(&gen, &data).map_err(CliError::Invalid)?;
    model.init_params(&mut component_rng(ctx.seed, "init"));
    let sampler = reference_sampler(&gen, ctx.cfg.model.reference, Some(&data))?;
    let mut rng = component_rng(ctx.seed, "gradcheck-reference");
    let refs: Vec<Vec<_>> = (0..rows)
        .map(|_| (0..ctx.cfg.training.m).map(|_| sampler.draw(&mut rng)).collect())
        .collect();
    let u: Vec<&[f64]> = (0..rows).map(|i| data.u_row(i)).collect();
    let y: Vec<&[f64]> = (0..rows).map(|i| data.y_row(i)).collect();
    let n_params = model.theta().len();
    let stride = (n_params / coords.max(1)).max(1);
    let idx: Vec<usize> = (0..n_params).step_by(stride).take(coords).collect();
    let rep = loss_gradient_check(&model, &u, &y, &refs, ctx.cfg.training.norm_eps, &idx, 1e-5)?;
    println!(
        "gradcheck: {} coordinates, max relative error {:.3e} (worst index {:?})",
        rep.checked, rep.max_rel_err, rep.worst_index
    );
    let artifact = ctx
        .out_dir_join("gradcheck")
        .unwrap_or_else(|| PathBuf::from("gradcheck"));
    ensure_parent(&artifact)?;
    ctx.finish(
        "gradcheck",
        &artifact,
        vec![],
        json!({ "max_rel_err": rep.max_rel_err, "checked": rep.checked, "tolerance": tol }),
    )?;
    if rep.max_rel_err > tol {
        return Err(CliError::Runtime(amortized_transport::Error::InvalidParameter(format!(
            "gradient check failed: {:.3e} > {tol:.1e}",
            rep.max_rel_err
        ))));
    }
    Ok(())
}
