//! Segmentation by any of the supported methods from prepared inputs.

use serde::{Deserialize, Serialize};

use crate::atlas::{DeformedMember, ProbabilisticAtlas};
use crate::bayes::{map_classify, PosteriorField, TissueModel};
use crate::em::{fit_em_volume, pas_em_combine, EmConfig, GmmState};
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, median_fuse, LabelStack};
use crate::scalar::Real;
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mvf")]
    Mvf,
    #[serde(rename = "median")]
    Median,
    #[serde(rename = "pas")]
    Pas,
    #[serde(rename = "em")]
    Em,
    #[serde(rename = "pas+em")]
    PasEm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mvf,
        Method::Median,
        Method::Pas,
        Method::Em,
        Method::PasEm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mvf => "mvf",
            Method::Median => "median",
            Method::Pas => "pas",
            Method::Em => "em",
            Method::PasEm => "pas+em",
        }
    }

    pub fn needs_tissue_model(self) -> bool {
        matches!(self, Method::Pas | Method::PasEm)
    }

    pub fn needs_atlas(self) -> bool {
        matches!(self, Method::Pas | Method::Em | Method::PasEm)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown method '{s}' (expected mvf, median, pas, em or pas+em)")
            })
    }
}

/// Everything a method may draw on, already in target space.
pub struct SegmentInputs<'a, T> {
    pub target: &'a Volume<T>,
    pub deformed: &'a [DeformedMember<T>],
    /// Regularised atlas.
    pub atlas: Option<&'a ProbabilisticAtlas<T>>,
    pub model: Option<&'a TissueModel<T>>,
    pub em: EmConfig,
    pub exclude_background_votes: bool,
}

/// Result of one segmentation with the intermediate fields that produced it.
pub struct Segmentation<T> {
    pub labels: LabelVolume,
    pub posterior: Option<PosteriorField<T>>,
    pub gmm: Option<GmmState<T>>,
}

pub fn segment<T: Real>(method: Method, inp: &SegmentInputs<'_, T>) -> Result<Segmentation<T>> {
    let atlas = || {
        inp.atlas
            .ok_or_else(|| Error::InvalidInput(format!("method {method} needs an atlas")))
    };
    let model = || {
        inp.model
            .ok_or_else(|| Error::InvalidInput(format!("method {method} needs a tissue model")))
    };
    let plain = |labels| Segmentation {
        labels,
        posterior: None,
        gmm: None,
    };
    match method {
        Method::Mvf | Method::Median => {
            let stack = LabelStack::new(inp.deformed.iter().map(|d| d.labels.clone()).collect())?;
            stack
                .grid()
                .ensure_matches(inp.target.grid(), "deformed labels vs target")?;
            Ok(plain(if method == Method::Mvf {
                majority_vote(&stack, inp.exclude_background_votes)
            } else {
                median_fuse(&stack)
            }))
        }
        Method::Pas => {
            let (labels, posterior) = map_classify(atlas()?, model()?, inp.target)?;
            Ok(Segmentation {
                labels,
                posterior: Some(posterior),
                gmm: None,
            })
        }
        Method::Em => {
            let a = atlas()?;
            let gmm = fit_em_volume(inp.target, a, &inp.em)?;
            let labels = gmm.labels(*inp.target.grid(), a.class_map().clone())?;
            Ok(Segmentation {
                labels,
                posterior: None,
                gmm: Some(gmm),
            })
        }
        Method::PasEm => {
            let a = atlas()?;
            let (_, posterior) = map_classify(a, model()?, inp.target)?;
            let gmm = fit_em_volume(inp.target, a, &inp.em)?;
            let (labels, combined) = pas_em_combine(&gmm.memberships, &posterior)?;
            Ok(Segmentation {
                labels,
                posterior: Some(combined),
                gmm: Some(gmm),
            })
        }
    }
}
