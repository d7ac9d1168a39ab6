use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, Metric};
use crate::atlas::{build_atlas, warp_member, AtlasMember};
use crate::bayes::{estimate_tissue_model, DEFAULT_BINS};
use crate::em::EmConfig;
use crate::error::{Error, Result};
pub use crate::pipeline::Method;
use crate::pipeline::{segment, SegmentInputs};
use crate::registration::{register_pair, RegistrationConfig};
use crate::scalar::Real;
use crate::seed;
use crate::volume::{nifti, ClassMap, Volume};

pub const IMAGE_SUFFIX: &str = "_image.nii.gz";
pub const LABEL_SUFFIX: &str = "_label.nii.gz";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooConfig {
    pub methods: Vec<Method>,
    pub registration: RegistrationConfig,
    pub lambda: f64,
    pub n_bins: usize,
    pub em: EmConfig,
    pub exclude_background_votes: bool,
    pub slice_mean: bool,
    pub seed: u64,
    /// Folds run concurrently on this many threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for LooConfig {
    fn default() -> Self {
        LooConfig {
            methods: Method::ALL.to_vec(),
            registration: RegistrationConfig::default(),
            lambda: 0.01,
            n_bins: DEFAULT_BINS,
            em: EmConfig::default(),
            exclude_background_votes: false,
            slice_mean: false,
            seed: 0,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub target: String,
    pub atlas_members: Vec<String>,
    pub registration_seconds: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single fold).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_folds: usize,
    pub mdsc: Stat,
    pub mvoe: Stat,
    pub msn: Stat,
    pub miou: Stat,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice_mdsc: Option<Stat>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LooResult {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MethodSummary>,
    pub seconds: f64,
}

impl LooResult {
    pub fn summary_for(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }
}

/// Reads `<id>_image.nii.gz` / `<id>_label.nii.gz` pairs, sorted by id.
pub fn load_dataset<T: Real>(
    dir: impl AsRef<Path>,
    class_map: &ClassMap,
) -> Result<Vec<AtlasMember<T>>> {
    let dir = dir.as_ref();
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix(IMAGE_SUFFIX))
        {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let label_path = dir.join(format!("{id}{LABEL_SUFFIX}"));
            if !label_path.exists() {
                return Err(Error::InvalidInput(format!(
                    "missing label file {}",
                    label_path.display()
                )));
            }
            let intensity: Volume<T> = nifti::load_scalar(dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
            let labels = nifti::load_labels(&label_path, class_map)?;
            AtlasMember::new(id, intensity, labels)
        })
        .collect()
}

fn run_fold<T: Real>(
    members: &[AtlasMember<T>],
    held_out: usize,
    cfg: &LooConfig,
) -> Result<FoldResult> {
    let target = &members[held_out];
    let training: Vec<(usize, &AtlasMember<T>)> = members
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .collect();
    let t0 = Instant::now();
    let deformed = training
        .iter()
        .map(|&(i, m)| {
            let mut reg = cfg.registration.clone();
            reg.asgd.seed = seed::derive(cfg.seed, &[held_out as u64, i as u64]);
            let (t, _) = register_pair(&target.intensity, &m.intensity, &reg)?;
            warp_member(m, &t, target.intensity.grid())
        })
        .collect::<Result<Vec<_>>>()?;
    let registration_seconds = t0.elapsed().as_secs_f64();

    let needs_atlas = cfg.methods.iter().any(|m| m.needs_atlas());
    let atlas = if needs_atlas {
        Some(build_atlas(&deformed)?.regularize_prior(cfg.lambda)?)
    } else {
        None
    };
    let model = if cfg.methods.iter().any(|m| m.needs_tissue_model()) {
        let pairs: Vec<_> = training
            .iter()
            .map(|(_, m)| (&m.intensity, &m.labels))
            .collect();
        Some(estimate_tissue_model(&pairs, cfg.n_bins)?)
    } else {
        None
    };
    let inputs = SegmentInputs {
        target: &target.intensity,
        deformed: &deformed,
        atlas: atlas.as_ref(),
        model: model.as_ref(),
        em: cfg.em.clone(),
        exclude_background_votes: cfg.exclude_background_votes,
    };
    let reports = cfg
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let seg = segment(method, &inputs)?;
            let mut r = evaluate(
                &seg.labels,
                &target.labels,
                cfg.slice_mean,
                method.name(),
                &target.id,
            )?;
            r.seconds = start.elapsed().as_secs_f64();
            log::info!("fold {}: {method} mDSC {:.4}", target.id, r.mean.dsc);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldResult {
        target: target.id.clone(),
        atlas_members: training.iter().map(|(_, m)| m.id.clone()).collect(),
        registration_seconds,
        reports,
    })
}

/// Holds out each member in turn and segments it from the others.
pub fn leave_one_out<T: Real>(members: &[AtlasMember<T>], cfg: &LooConfig) -> Result<LooResult> {
    if members.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-out needs at least 2 subjects, got {}",
            members.len()
        )));
    }
    if cfg.methods.is_empty() {
        return Err(Error::InvalidInput(
            "no segmentation methods selected".into(),
        ));
    }
    let start = Instant::now();
    let run = || -> Result<Vec<FoldResult>> {
        (0..members.len())
            .into_par_iter()
            .map(|i| run_fold(members, i, cfg))
            .collect()
    };
    let folds = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start {n} workers: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let summary = cfg
        .methods
        .iter()
        .map(|&method| {
            let reports: Vec<&EvalReport> = folds
                .iter()
                .filter_map(|f| f.reports.iter().find(|r| r.method == method.name()))
                .collect();
            let stat =
                |m: Metric| Stat::of(&reports.iter().map(|r| r.mean.get(m)).collect::<Vec<_>>());
            MethodSummary {
                method,
                n_folds: reports.len(),
                mdsc: stat(Metric::Dsc),
                mvoe: stat(Metric::Voe),
                msn: stat(Metric::Sn),
                miou: stat(Metric::Iou),
                slice_mdsc: cfg.slice_mean.then(|| {
                    Stat::of(
                        &reports
                            .iter()
                            .filter_map(|r| r.slice_mean.map(|s| s.dsc))
                            .collect::<Vec<_>>(),
                    )
                }),
            }
        })
        .collect();
    Ok(LooResult {
        folds,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}
