use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::diff::Mat;
use crate::error::Error;
use crate::gp::ObservationSet;
use crate::hmc::{map_estimate, run_hmc, ChainDiagnostics, MapConfig, MapResult, PosteriorModel, PosteriorTarget, SampleChain};
use crate::pde::{generate_observations, ProblemSpec};
use crate::predict::{bma_predict, grid_points, marginal_stats_of, MarginalSummary, PredictiveField};
use crate::pretrain::{run_pretraining, PretrainReport};

/// A failed pipeline stage.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

fn stage<T>(name: &'static str, r: crate::Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub artifacts: Vec<ArtifactEntry>,
    pub timings: Vec<StageTime>,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub max_abs_error: f64,
    pub rmse: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub phi_true: Vec<f64>,
    pub phi_pre: Vec<f64>,
    pub phi: MarginalSummary,
    pub psi: MarginalSummary,
    pub field: Option<FieldError>,
    pub map: Option<MapResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(flatten)]
    pub chains: ChainDiagnostics,
    pub fd_fallbacks: usize,
    pub prediction_failed_draws: Vec<usize>,
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub summary: RunSummary,
    pub chains: Vec<SampleChain>,
    pub pretrain: PretrainReport,
    pub field: Option<PredictiveField>,
    pub out_dir: PathBuf,
}

pub fn coordinate_names(problem: &ProblemSpec) -> Vec<String> {
    let d = problem.dx;
    let mut n: Vec<String> = if d == 1 {
        vec!["x".into()]
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    };
    n.push("t".into());
    n
}

fn observations_csv(obs: &ObservationSet, names: &[String]) -> String {
    let mut out = format!("kind,{},value\n", names.join(","));
    for (kind, pts, vals) in [("u", &obs.s_u, &obs.u), ("f", &obs.s_f, &obs.f)] {
        for (s, v) in pts.iter().zip(vals.iter()) {
            let coords: Vec<String> = s.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{kind},{},{v}\n", coords.join(",")));
        }
    }
    out
}

fn write(dir: &Path, name: &str, contents: &[u8], artifacts: &mut Vec<ArtifactEntry>) -> Result<(), StageError> {
    stage("write", std::fs::write(dir.join(name), contents).map_err(Error::from))?;
    artifacts.push(ArtifactEntry {
        file: name.to_string(),
        sha256: hex::encode(Sha256::digest(contents)),
        bytes: contents.len() as u64,
    });
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

/// Summary statistics of a pooled chain, as written to `summary.json`.
pub fn summarize_draws(names: &[String], draws: &[Vec<f64>], n_phi: usize) -> crate::Result<(MarginalSummary, MarginalSummary)> {
    let phi = marginal_stats_of(names, draws, &(0..n_phi).collect::<Vec<_>>())?;
    let psi = marginal_stats_of(names, draws, &(n_phi..names.len()).collect::<Vec<_>>())?;
    Ok((phi, psi))
}

/// Runs every stage and writes the artifacts into `config.output.dir`.
pub fn run_experiment(config: &ExperimentConfig, problem: &ProblemSpec) -> Result<RunOutput, StageError> {
    let out_dir = config.output.dir.clone();
    stage("output", std::fs::create_dir_all(&out_dir).map_err(Error::from))?;
    let mut artifacts = Vec::new();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<StageTime>| {
        timings.push(StageTime {
            stage: name.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };
    let names = coordinate_names(problem);

    log::info!("generating observations");
    let obs = stage(
        "generate",
        generate_observations(problem, config.data.n_u, config.n_f(), config.data.seed),
    )?;
    write(&out_dir, "observations.csv", observations_csv(&obs, &names).as_bytes(), &mut artifacts)?;
    lap("generate", &mut timings);

    log::info!("pretraining");
    let report = stage("pretrain", run_pretraining(problem, &obs, &config.pretrain_config()))?;
    write(&out_dir, "pretrain.json", &to_json(&report.to_json()), &mut artifacts)?;
    lap("pretrain", &mut timings);

    log::info!("sampling");
    let emb = report.embedding();
    let model = stage("hmc", PosteriorModel::new(&obs, &emb, problem))?;
    let mut target = stage(
        "hmc",
        PosteriorTarget::new(model, problem, &report.psi, config.hmc.psi_prior_sd),
    )?;
    target.gradient = config.hmc.gradient;
    let mut chains = Vec::with_capacity(config.hmc.n_chains);
    for c in 0..config.hmc.n_chains {
        chains.push(stage("hmc", run_hmc(&target, &report.phi, &report.psi, &config.hmc_config(c)))?);
    }
    let pooled = SampleChain {
        draws: chains.iter().flat_map(|c| c.draws.iter().cloned()).collect(),
        potentials: chains.iter().flat_map(|c| c.potentials.iter().copied()).collect(),
        ..chains[0].clone()
    };
    write(&out_dir, "chain.csv", pooled.to_csv().as_bytes(), &mut artifacts)?;
    let mut diagnostics = Diagnostics {
        chains: ChainDiagnostics::from_chains(&chains),
        fd_fallbacks: target.fd_fallbacks(),
        prediction_failed_draws: vec![],
    };
    lap("hmc", &mut timings);

    let map = if config.map.enabled {
        log::info!("MAP estimate");
        let k = problem.n_phi();
        let sigma = Mat::from_diagonal_element(k, k, config.map.prior_var);
        let cfg = MapConfig {
            max_iter: config.map.max_iter,
            ..MapConfig::default()
        };
        let r = stage("map", map_estimate(&target.model, &report.psi, &report.phi, &sigma, &cfg))?;
        lap("map", &mut timings);
        Some(r)
    } else {
        None
    };

    let field = if config.predict.enabled {
        log::info!("predicting");
        let test = grid_points(&problem.domain, config.predict.n_space, config.predict.n_time);
        let f = stage(
            "predict",
            bma_predict(&pooled, config.predict.thinning, &target.model, &emb, &test),
        )?;
        write(&out_dir, "field.csv", f.to_csv(&names).as_bytes(), &mut artifacts)?;
        diagnostics.prediction_failed_draws = f.failed.clone();
        lap("predict", &mut timings);
        Some(f)
    } else {
        None
    };

    let (phi, psi) = stage("summarize", summarize_draws(&pooled.names, &pooled.draws, pooled.n_phi))?;
    let field_error = field.as_ref().map(|f| {
        let errs: Vec<f64> = f
            .test
            .iter()
            .zip(&f.mean)
            .map(|(s, m)| (m - problem.solution_at(s)).abs())
            .collect();
        FieldError {
            max_abs_error: errs.iter().cloned().fold(0.0, f64::max),
            rmse: (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt(),
            n_points: errs.len(),
        }
    });
    let summary = RunSummary {
        problem: problem.name.as_str().to_string(),
        phi_true: problem.phi_true.clone(),
        phi_pre: report.phi.clone(),
        phi,
        psi,
        field: field_error,
        map,
    };
    write(&out_dir, "summary.json", &to_json(&summary), &mut artifacts)?;
    write(&out_dir, "diagnostics.json", &to_json(&diagnostics), &mut artifacts)?;
    lap("summarize", &mut timings);

    let manifest = RunManifest {
        config: config.clone(),
        artifacts,
        timings,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    stage(
        "write",
        std::fs::write(out_dir.join("manifest.json"), to_json(&manifest)).map_err(Error::from),
    )?;
    Ok(RunOutput {
        manifest,
        summary,
        chains,
        pretrain: report,
        field,
        out_dir,
    })
}

/// Re-hashes every artifact listed in `manifest.json` under `dir`.
pub fn verify_manifest(dir: &Path) -> crate::Result<bool> {
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    for a in &m.artifacts {
        let bytes = std::fs::read(dir.join(&a.file))?;
        if hex::encode(Sha256::digest(&bytes)) != a.sha256 {
            return Ok(false);
        }
    }
    Ok(true)
}
