//! Post-processing choices and their empirical selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{fill_holes, largest_component};
use crate::stats::dsc;
use crate::volume::Mask3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostprocChoice {
    #[default]
    None,
    FillHoles,
    LargestComponent,
    Both,
}

impl PostprocChoice {
    /// In tie-break order, simplest first.
    pub const ALL: [PostprocChoice; 4] = [
        PostprocChoice::None,
        PostprocChoice::FillHoles,
        PostprocChoice::LargestComponent,
        PostprocChoice::Both,
    ];
}

/// `Both` keeps the largest component first, then fills its holes.
pub fn apply_postproc(mask: &Mask3D, choice: PostprocChoice) -> Mask3D {
    match choice {
        PostprocChoice::None => mask.clone(),
        PostprocChoice::FillHoles => fill_holes(mask),
        PostprocChoice::LargestComponent => largest_component(mask),
        PostprocChoice::Both => fill_holes(&largest_component(mask)),
    }
}

/// Mean DSC of each choice over `(prediction, reference)` pairs.
pub fn postproc_scores(pairs: &[(Mask3D, Mask3D)]) -> Result<Vec<(PostprocChoice, f64)>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no cross-validation predictions".into()));
    }
    PostprocChoice::ALL
        .iter()
        .map(|&c| {
            let mut sum = 0.0;
            for (pred, reference) in pairs {
                sum += dsc(&apply_postproc(pred, c), reference)?;
            }
            Ok((c, sum / pairs.len() as f64))
        })
        .collect()
}

/// Choice with the highest mean DSC; ties go to the simpler choice.
pub fn select_postprocessing(pairs: &[(Mask3D, Mask3D)]) -> Result<PostprocChoice> {
    let scores = postproc_scores(pairs)?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(best.0)
}
