use std::io::Write;
use std::path::{Path, PathBuf};

use atlaseg::atlas::{build_atlas, warp_member};
use atlaseg::bayes::estimate_tissue_model;
use atlaseg::fusion::{fuse, FusionMethod, LabelStack};
use atlaseg::metrics::{self, leave_one_out, load_dataset, LooConfig, IMAGE_SUFFIX, LABEL_SUFFIX};
use atlaseg::phantom::{self, PerturbSpec, PhantomSpec};
use atlaseg::pipeline::{segment, Method, SegmentInputs};
use atlaseg::registration::register_pair;
use atlaseg::volume::{nifti, resample, resample_labels};
use atlaseg::{
    seed, AtlasMember, Error, Interpolator, ProbabilisticAtlas, ScalarVolume, TissueModel,
    TransformChain,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::{overlay, CliError, Command, FileConfig, RegistrationFlags};

type CmdResult = Result<(), CliError>;

pub(crate) fn dispatch(cmd: &Command, cfg: &FileConfig) -> CmdResult {
    match cmd {
        Command::Register {
            fixed,
            moving,
            out,
            report,
            reg,
        } => register(cfg, fixed, moving, out, report.as_deref(), reg),
        Command::Warp {
            input,
            transform,
            reference,
            out,
            interp,
            labels,
        } => warp(cfg, input, transform, reference, out, interp, *labels),
        Command::BuildAtlas {
            reference,
            data,
            exclude,
            register,
            out,
            reg,
        } => build(cfg, reference, data, exclude, *register, out, reg),
        Command::TissueModel {
            data,
            exclude,
            out,
            n_bins,
        } => tissue_model(cfg, data, exclude, out, n_bins.unwrap_or(cfg.n_bins)),
        Command::Fuse {
            method,
            inputs,
            out,
            exclude_background_votes,
        } => fuse_cmd(
            cfg,
            method,
            inputs,
            out,
            *exclude_background_votes || cfg.exclude_background_votes,
        ),
        Command::Segment { .. } => segment_cmd(cfg, cmd),
        Command::Evaluate {
            pred,
            gt,
            slice_mean,
            out,
        } => evaluate(cfg, pred, gt, *slice_mean, out.as_deref()),
        Command::Loo { .. } => loo(cfg, cmd),
        Command::Phantom {
            n,
            dims,
            seed,
            amplitude,
            out,
        } => phantom_cmd(*n, *dims, *seed, *amplitude, out),
        Command::Overlay {
            image,
            labels,
            slice,
            out,
        } => overlay_cmd(cfg, image, labels.as_deref(), *slice, out),
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &text)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_transform(path: &Path) -> Result<TransformChain, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(TransformChain::from_json(&text)?)
}

/// `<dir>/<stem>.report.json` for `<dir>/<stem>.json`.
fn default_report_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.report.json"))
}

fn load_members(
    cfg: &FileConfig,
    data: &Path,
    exclude: &[String],
) -> Result<Vec<AtlasMember>, CliError> {
    let members: Vec<AtlasMember> = load_dataset::<f64>(data, &cfg.class_map)?
        .into_iter()
        .filter(|m| !exclude.contains(&m.id))
        .collect();
    if members.is_empty() {
        return Err(
            Error::InvalidInput(format!("no usable subjects in {}", data.display())).into(),
        );
    }
    Ok(members)
}

fn register(
    cfg: &FileConfig,
    fixed: &Path,
    moving: &Path,
    out: &Path,
    report: Option<&Path>,
    flags: &RegistrationFlags,
) -> CmdResult {
    let reg = cfg.registration_with(flags)?;
    let fixed: ScalarVolume = nifti::load_scalar(fixed)?;
    let moving: ScalarVolume = nifti::load_scalar(moving)?;
    let (t, rep) = register_pair(&fixed, &moving, &reg)?;
    write_text(out, &t.to_json()?)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_report_path(out));
    write_json(
        &report_path,
        &serde_json::json!({ "config": reg, "report": rep }),
    )?;
    log::info!("registration finished in {:.1} s", rep.seconds);
    Ok(())
}

fn warp(
    cfg: &FileConfig,
    input: &Path,
    transform: &Path,
    reference: &Path,
    out: &Path,
    interp: &str,
    labels: bool,
) -> CmdResult {
    let t = load_transform(transform)?;
    let grid = *nifti::load_scalar::<f64>(reference)?.grid();
    if labels {
        let l = nifti::load_labels(input, &cfg.class_map)?;
        nifti::save_labels(&resample_labels(&l, &t, &grid, Interpolator::Nearest)?, out)?;
    } else {
        let kind: Interpolator = interp.parse().map_err(CliError::usage)?;
        let v: ScalarVolume = nifti::load_scalar(input)?;
        let background = v.min_max().0;
        nifti::save_scalar(&resample(&v, &t, &grid, kind, background), out)?;
    }
    Ok(())
}

fn build(
    cfg: &FileConfig,
    reference: &Path,
    data: &Path,
    exclude: &[String],
    register: bool,
    out: &Path,
    flags: &RegistrationFlags,
) -> CmdResult {
    let target: ScalarVolume = nifti::load_scalar(reference)?;
    let members = load_members(cfg, data, exclude)?;
    let reg = cfg.registration_with(flags)?;
    let deformed = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let t = if register {
                let mut r = reg.clone();
                r.asgd.seed = seed::derive(reg.asgd.seed, &[i as u64]);
                register_pair(&target, &m.intensity, &r)?.0
            } else {
                target
                    .grid()
                    .ensure_matches(m.intensity.grid(), &format!("member '{}'", m.id))?;
                TransformChain::identity()
            };
            Ok((warp_member(m, &t, target.grid())?, t))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let (deformed, transforms): (Vec<_>, Vec<_>) = deformed.into_iter().unzip();
    let atlas = build_atlas(&deformed)?;
    atlas.save(out)?;
    let ddir = out.join("deformed");
    create_dir(&ddir)?;
    for (d, t) in deformed.iter().zip(&transforms) {
        nifti::save_labels(&d.labels, ddir.join(format!("{}{LABEL_SUFFIX}", d.id)))?;
        nifti::save_scalar(&d.intensity, ddir.join(format!("{}{IMAGE_SUFFIX}", d.id)))?;
        if register {
            write_text(
                &ddir.join(format!("{}_transform.json", d.id)),
                &t.to_json()?,
            )?;
        }
    }
    log::info!(
        "atlas of {} members written to {}",
        deformed.len(),
        out.display()
    );
    Ok(())
}

fn tissue_model(
    cfg: &FileConfig,
    data: &Path,
    exclude: &[String],
    out: &Path,
    n_bins: usize,
) -> CmdResult {
    let members = load_members(cfg, data, exclude)?;
    let pairs: Vec<_> = members.iter().map(|m| (&m.intensity, &m.labels)).collect();
    let model = estimate_tissue_model(&pairs, n_bins)?;
    write_text(out, &model.to_json()?)
}

fn fuse_cmd(
    cfg: &FileConfig,
    method: &str,
    inputs: &[PathBuf],
    out: &Path,
    exclude_bg: bool,
) -> CmdResult {
    let method = match method {
        "mvf" => FusionMethod::Mvf,
        "median" => FusionMethod::Median,
        other => {
            return Err(CliError::usage(format!(
                "unknown fusion method '{other}' (expected mvf or median)"
            )))
        }
    };
    let labels = inputs
        .iter()
        .map(|p| nifti::load_labels(p, &cfg.class_map))
        .collect::<Result<Vec<_>, _>>()?;
    let stack = LabelStack::new(labels)?;
    nifti::save_labels(&fuse(&stack, method, exclude_bg), out)?;
    Ok(())
}

fn segment_cmd(cfg: &FileConfig, cmd: &Command) -> CmdResult {
    let Command::Segment {
        method,
        atlas,
        tissue_model,
        target,
        out,
        lambda,
        tol,
        max_iter,
        register_atlas,
        posterior,
        trace,
        reg,
    } = cmd
    else {
        unreachable!()
    };
    let method: Method = method.parse().map_err(CliError::usage)?;
    if !matches!(method, Method::Pas | Method::Em | Method::PasEm) {
        return Err(CliError::usage(format!(
            "segment supports pas, em and pas+em; use `fuse` for {method}"
        )));
    }
    if method.needs_tissue_model() && tissue_model.is_none() {
        return Err(CliError::usage(format!(
            "--tissue-model is required for {method}"
        )));
    }
    if trace.is_some() && method == Method::Pas {
        return Err(CliError::usage("--trace needs an EM-based method"));
    }
    let target: ScalarVolume = nifti::load_scalar(target)?;
    let mut atlas = ProbabilisticAtlas::load(atlas)?;
    if *register_atlas {
        let r = cfg.registration_with(reg)?;
        let (t, _) = register_pair(&target, atlas.mean_intensity(), &r)?;
        atlas = atlas.warped(&t, target.grid())?;
    }
    let atlas = atlas.regularize_prior(lambda.unwrap_or(cfg.lambda))?;
    let model = tissue_model.as_deref().map(TissueModel::load).transpose()?;
    let mut em = cfg.em.clone();
    if let Some(t) = tol {
        em.tol = *t;
    }
    if let Some(m) = max_iter {
        em.max_iter = *m;
    }
    let inputs = SegmentInputs {
        target: &target,
        deformed: &[],
        atlas: Some(&atlas),
        model: model.as_ref(),
        em,
        exclude_background_votes: cfg.exclude_background_votes,
    };
    let seg = segment(method, &inputs)?;
    nifti::save_labels(&seg.labels, out)?;
    if let Some(p) = posterior {
        let field = match (&seg.posterior, &seg.gmm) {
            (Some(f), _) => f.clone(),
            (None, Some(g)) => g.memberships_field(*target.grid(), atlas.class_map().clone())?,
            (None, None) => unreachable!("every segment method yields probabilities"),
        };
        field.save(p)?;
    }
    if let (Some(p), Some(g)) = (trace, &seg.gmm) {
        write_text(p, &g.trace_json()?)?;
    }
    Ok(())
}

fn evaluate(
    cfg: &FileConfig,
    pred: &Path,
    gt: &Path,
    slice_mean: bool,
    out: Option<&Path>,
) -> CmdResult {
    let p = nifti::load_labels(pred, &cfg.class_map)?;
    let g = nifti::load_labels(gt, &cfg.class_map)?;
    let name = pred
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let target = gt
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = metrics::evaluate(&p, &g, slice_mean, &name, &target)?;
    match out {
        Some(path) => write_json(path, &report),
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                // A closed reader (e.g. `| head`) is not a failure of the command.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                }
                .into()),
                _ => Ok(()),
            }
        }
    }
}

fn loo(cfg: &FileConfig, cmd: &Command) -> CmdResult {
    let Command::Loo {
        data,
        method,
        out,
        slice_mean,
        n_bins,
        lambda,
        exclude_background_votes,
        reg,
    } = cmd
    else {
        unreachable!()
    };
    let methods = method
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::usage)?;
    let registration = cfg.registration_with(reg)?;
    let lcfg = LooConfig {
        methods,
        seed: registration.asgd.seed,
        registration,
        lambda: lambda.unwrap_or(cfg.lambda),
        n_bins: n_bins.unwrap_or(cfg.n_bins),
        em: cfg.em.clone(),
        exclude_background_votes: *exclude_background_votes || cfg.exclude_background_votes,
        slice_mean: *slice_mean,
        workers: None,
    };
    let members = load_members(cfg, data, &[])?;
    let result = leave_one_out(&members, &lcfg)?;
    create_dir(out)?;
    for fold in &result.folds {
        write_json(&out.join(format!("fold_{}.json", fold.target)), fold)?;
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "config": lcfg,
            "subjects": members.iter().map(|m| &m.id).collect::<Vec<_>>(),
            "summary": result.summary,
            "seconds": result.seconds,
        }),
    )?;
    for s in &result.summary {
        log::info!("{}: mDSC {:.4} ± {:.4}", s.method, s.mdsc.mean, s.mdsc.std);
    }
    Ok(())
}

fn phantom_cmd(n: usize, dims: usize, seed: u64, amplitude: Option<f64>, out: &Path) -> CmdResult {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let spec = PhantomSpec {
        dims: [dims; 3],
        seed,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    let mut deform = PerturbSpec::moderate();
    if let Some(a) = amplitude {
        deform.amplitude = a;
    }
    let population = phantom::population::<f64>(&spec, &deform, n)?;
    create_dir(out)?;
    for (m, t) in &population {
        nifti::save_scalar(&m.intensity, out.join(format!("{}{IMAGE_SUFFIX}", m.id)))?;
        nifti::save_labels(&m.labels, out.join(format!("{}{LABEL_SUFFIX}", m.id)))?;
        write_text(&out.join(format!("{}_transform.json", m.id)), &t.to_json()?)?;
    }
    write_json(
        &out.join("phantom.json"),
        &serde_json::json!({ "n": n, "spec": spec, "deformation": deform }),
    )
}

fn overlay_cmd(
    cfg: &FileConfig,
    image: &Path,
    labels: Option<&Path>,
    slice: Option<usize>,
    out: &Path,
) -> CmdResult {
    let img: ScalarVolume = nifti::load_scalar(image)?;
    let labels = labels
        .map(|p| nifti::load_labels(p, &cfg.class_map))
        .transpose()?;
    let z = slice.unwrap_or(img.dims()[2] / 2);
    overlay::export_overlay(&img, labels.as_ref(), z, out)?;
    Ok(())
}
