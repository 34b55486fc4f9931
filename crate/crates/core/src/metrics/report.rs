use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    binary_accuracy_map, detection_auroc, error_detection_set, ood_flags, sparsification_curve, validate_fractions,
    ConfusionMatrix, TimingReport, UncertaintyAccumulator,
};
use crate::binio::write_file_atomic;
use crate::ensemble::{teacher_predict, Ensemble};
use crate::error::{Error, Result};
use crate::segnet::{forward, ModelParams};
use crate::synthdata::{write_pgm, write_ppm, Rgb, Sample};
use crate::VOID;

/// Per-image output of a model under evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pred_map: Vec<u8>,
    pub uncertainty: Vec<f32>,
}

fn argmax_maps(probs: &[f32], classes: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for k in 1..classes {
                if probs[k * plane + px] > probs[best * plane + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Runs a dual-head model on each sample.
pub fn predict_model(params: &ModelParams, data: &[Sample]) -> Result<Vec<Prediction>> {
    if !params.dual_head() {
        return Err(Error::Config("evaluation needs a model with an uncertainty head".into()));
    }
    let classes = params.config().classes;
    data.iter()
        .map(|s| {
            let out = forward(params, &s.image_tensor())?;
            Ok(Prediction {
                pred_map: argmax_maps(out.probs.data(), classes, s.height * s.width),
                uncertainty: out.uncertainty.expect("dual head").into_data(),
            })
        })
        .collect()
}

pub fn predict_ensemble(ensemble: &Ensemble, data: &[Sample]) -> Result<Vec<Prediction>> {
    data.iter()
        .map(|s| {
            let out = teacher_predict(ensemble, &s.image_tensor())?;
            Ok(Prediction {
                pred_map: out.pred_map,
                uncertainty: out.uncertainty.into_data(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub uncertainty_head: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub classes: usize,
    pub images: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub per_class_uncertainty: Vec<Option<f64>>,
    pub munc: Option<f64>,
    pub sparsification: Vec<CurvePoint>,
    pub error_auroc: Option<f64>,
    pub ood_auroc: Option<f64>,
    pub timing: Option<TimingReport>,
    pub params: Option<ParamReport>,
}

/// Computes every dataset-level metric. Images are reduced in dataset order.
pub fn evaluate(model: &str, data: &[Sample], predictions: &[Prediction], classes: usize, fractions: &[f64]) -> Result<MetricReport> {
    if data.len() != predictions.len() {
        return Err(Error::shape("evaluate", &[data.len()], &[predictions.len()]));
    }
    validate_fractions(fractions)?;
    let mut cm = ConfusionMatrix::new(classes);
    let mut unc = UncertaintyAccumulator::new(classes);
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    let mut all_unc = Vec::new();
    for (s, p) in data.iter().zip(predictions) {
        if p.pred_map.len() != s.labels.len() || p.uncertainty.len() != s.labels.len() {
            return Err(Error::shape("evaluate", &[s.labels.len()], &[p.pred_map.len(), p.uncertainty.len()]));
        }
        cm.add_maps(&p.pred_map, &s.labels)?;
        unc.add(&p.pred_map, &p.uncertainty)?;
        all_pred.extend_from_slice(&p.pred_map);
        all_gt.extend_from_slice(&s.labels);
        all_unc.extend_from_slice(&p.uncertainty);
    }
    let iou = cm.iou();
    let cu = unc.finish();
    let curve = sparsification_curve(&all_pred, &all_gt, &all_unc, classes, fractions)?;
    let (err_scores, err_flags) = error_detection_set(&all_pred, &all_gt, &all_unc);
    Ok(MetricReport {
        model: model.to_string(),
        classes,
        images: data.len(),
        per_class_iou: iou.per_class,
        miou: iou.miou,
        per_class_uncertainty: cu.per_class,
        munc: cu.munc,
        sparsification: curve
            .into_iter()
            .map(|(fraction, miou)| CurvePoint { fraction, miou })
            .collect(),
        error_auroc: detection_auroc(&err_scores, &err_flags)?,
        ood_auroc: detection_auroc(&all_unc, &ood_flags(&all_gt))?,
        timing: None,
        params: None,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    /// One row per class: `class,iou,uncertainty`, then a `mean` row.
    pub fn class_csv(&self) -> String {
        let mut s = String::from("class,iou,uncertainty\n");
        for c in 0..self.classes {
            let _ = writeln!(s, "{c},{},{}", cell(self.per_class_iou[c]), cell(self.per_class_uncertainty[c]));
        }
        let _ = writeln!(s, "mean,{},{}", cell(self.miou), cell(self.munc));
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("fraction,miou\n");
        for p in &self.sparsification {
            let _ = writeln!(s, "{:.2},{}", p.fraction, cell(p.miou));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `{stem}_classes.csv`, `{stem}_sparsification.csv` and
    /// `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file_atomic(&dir.join(format!("{stem}_classes.csv")), self.class_csv().as_bytes())?;
        write_file_atomic(&dir.join(format!("{stem}_sparsification.csv")), self.curve_csv().as_bytes())?;
        write_file_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<MetricReport> {
        let bytes = crate::binio::read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            offset: e.column() as u64,
            detail: e.to_string(),
        })
    }
}

fn label_rgb(labels: &[u8], palette: &[Rgb]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| match palette.get(l as usize) {
            Some(c) if l != VOID => c.map(crate::synthdata::quantize),
            _ => [0, 0, 0],
        })
        .collect()
}

/// Qualitative panels per sample: image, ground truth, prediction, binary
/// accuracy map and uncertainty (0.5 maps to white).
pub fn write_panels(dir: &Path, data: &[Sample], predictions: &[Prediction], palette: &[Rgb]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, p) in data.iter().zip(predictions) {
        let (w, h) = (s.width, s.height);
        let rgb: Vec<u8> = s.image.iter().map(|&v| crate::synthdata::quantize(v)).collect();
        write_ppm(&dir.join(format!("{}_image.ppm", s.id)), w, h, &rgb)?;
        write_ppm(&dir.join(format!("{}_gt.ppm", s.id)), w, h, &label_rgb(&s.labels, palette))?;
        write_ppm(&dir.join(format!("{}_pred.ppm", s.id)), w, h, &label_rgb(&p.pred_map, palette))?;
        write_pgm(&dir.join(format!("{}_accuracy.pgm", s.id)), w, h, &binary_accuracy_map(&p.pred_map, &s.labels)?)?;
        let unc: Vec<u8> = p.uncertainty.iter().map(|&u| crate::synthdata::quantize(u * 2.0)).collect();
        write_pgm(&dir.join(format!("{}_uncertainty.pgm", s.id)), w, h, &unc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneConfig};

    #[test]
    fn perfect_predictions_report() {
        let data = generate_dataset(&SceneConfig::with_classes(32, 4), 1, 3, "e").unwrap();
        let preds: Vec<Prediction> = data
            .iter()
            .map(|s| Prediction {
                pred_map: s.labels.iter().map(|&l| if l == VOID { 0 } else { l }).collect(),
                uncertainty: s.labels.iter().map(|&l| if l == VOID { 0.4 } else { 0.1 }).collect(),
            })
            .collect();
        let r = evaluate("oracle", &data, &preds, 4, &super::super::DEFAULT_FRACTIONS).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.error_auroc, None);
        assert_eq!(r.ood_auroc, Some(1.0));
        assert!(r.sparsification.iter().all(|p| p.miou == Some(1.0)));
        assert!(r.class_csv().starts_with("class,iou,uncertainty\n0,1.000000,"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn panels_are_written() {
        let cfg = SceneConfig::with_classes(32, 3);
        let data = generate_dataset(&cfg, 2, 1, "p").unwrap();
        let preds = vec![Prediction {
            pred_map: vec![0; 1024],
            uncertainty: vec![0.25; 1024],
        }];
        let dir = tempfile::tempdir().unwrap();
        write_panels(dir.path(), &data, &preds, &cfg.palette).unwrap();
        let (_, _, unc) = crate::synthdata::read_pgm(&dir.path().join("p_00000_uncertainty.pgm")).unwrap();
        assert!(unc.iter().all(|&v| v == 128));
    }
}
