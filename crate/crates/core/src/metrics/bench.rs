use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{teacher_predict, Ensemble};
use crate::error::{Error, Result};
use crate::segnet::{forward, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub std_ms: f64,
}

impl Timing {
    fn from_samples(ms: &mut [f64]) -> Timing {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            (ms[n / 2 - 1] + ms[n / 2]) / 2.0
        };
        let mean = ms.iter().sum::<f64>() / n as f64;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Timing {
            median_ms: median,
            std_ms: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub runs: usize,
    pub members: usize,
    pub baseline: Timing,
    pub teacher: Timing,
    pub student: Timing,
    /// Teacher median over student median.
    pub speedup: f64,
    /// Student median over baseline median.
    pub student_overhead: f64,
}

fn time_ms(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Single-image wall-clock for the baseline (first member), the full
/// teacher and the student. The three are timed round-robin within each
/// run so slow drifts affect them equally; warm-up runs are discarded.
pub fn bench_inference(
    student: &ModelParams,
    ensemble: &Ensemble,
    image: &Tensor<f32>,
    runs: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if runs < 5 {
        return Err(Error::Config(format!("bench needs at least 5 runs, got {runs}")));
    }
    if image.shape().0[0] != 1 {
        return Err(Error::Invalid("bench expects a single image".into()));
    }
    let baseline = &ensemble.members()[0];
    let (mut b, mut t, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..warmup + runs {
        let tb = time_ms(|| forward(baseline, image).map(drop))?;
        let tt = time_ms(|| teacher_predict(ensemble, image).map(drop))?;
        let ts = time_ms(|| forward(student, image).map(drop))?;
        if i >= warmup {
            b.push(tb);
            t.push(tt);
            s.push(ts);
        }
    }
    let baseline = Timing::from_samples(&mut b);
    let teacher = Timing::from_samples(&mut t);
    let student = Timing::from_samples(&mut s);
    Ok(TimingReport {
        warmup,
        runs,
        members: ensemble.len(),
        baseline,
        teacher,
        student,
        speedup: teacher.median_ms / student.median_ms,
        student_overhead: student.median_ms / baseline.median_ms,
    })
}
