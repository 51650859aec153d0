use diffcore::ParamStore;
use serde::{Deserialize, Serialize};

use crate::body::BodyTemplate;
use crate::error::{Error, Result};
use crate::metrics::{sequence_report, JointSeq, MetricReport};
use crate::satn::SatnConfig;
use crate::synth::{Dataset, Split};
use crate::train::satn::{satn_predict_sequence, FeatureStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seed: u64,
    pub dsd: MetricReport,
    pub satn: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsd: MetricReport,
    pub satn: Option<MetricReport>,
    pub sequences: Vec<SequenceReport>,
}

const MM: f64 = 1000.0;

fn to_mm(j3d: &[f64], fps: f64) -> Result<JointSeq> {
    JointSeq::new(j3d.iter().map(|v| v * MM).collect(), 14, fps)
}

/// Metrics of single-frame and, when `satn` is given, temporal predictions
/// on `split`. Joint positions are reported in millimeters.
pub fn evaluate(
    ds: &Dataset,
    features: &FeatureStore,
    template: &BodyTemplate,
    satn: Option<(&ParamStore, &SatnConfig)>,
    split: Split,
) -> Result<EvalReport> {
    let name = format!("{split:?}").to_lowercase();
    let mut dsd_pairs = Vec::new();
    let mut satn_pairs = Vec::new();
    let mut sequences = Vec::new();
    for (i, (s, f)) in ds.sequences.iter().zip(&features.sequences).enumerate() {
        if Split::of_seed(s.seed) != split {
            continue;
        }
        if f.seed != s.seed || f.frame_count() != s.frame_count() {
            return Err(Error::MissingData("features were computed for a different dataset".into()));
        }
        let gt = to_mm(&s.gt_j3d, s.fps)?;
        let dsd = (to_mm(&f.dsd_j3d, s.fps)?, gt.clone());
        let dsd_report = sequence_report(std::slice::from_ref(&dsd), &name)?;
        let satn_report = match satn {
            Some((params, cfg)) => {
                let (_, j3d) = satn_predict_sequence(params, cfg, template, features, i)?;
                let pair = (to_mm(&j3d, s.fps)?, gt);
                let r = sequence_report(std::slice::from_ref(&pair), &name)?;
                satn_pairs.push(pair);
                Some(r)
            }
            None => None,
        };
        dsd_pairs.push(dsd);
        sequences.push(SequenceReport {
            seed: s.seed,
            dsd: dsd_report,
            satn: satn_report,
        });
    }
    if sequences.is_empty() {
        return Err(Error::MissingData(format!("the dataset has no {name} sequences")));
    }
    Ok(EvalReport {
        dsd: sequence_report(&dsd_pairs, &name)?,
        satn: satn.is_some().then(|| sequence_report(&satn_pairs, &name)).transpose()?,
        sequences,
    })
}
