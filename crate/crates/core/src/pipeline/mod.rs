//! Stage-wise experiment driver. Each stage writes into its own directory
//! under the output root, together with the resolved config and a record of
//! the content hashes of its inputs and outputs. A stage whose record still
//! matches is skipped unless forced.

mod plot;

pub use plot::{render_curves, SERIES_COLORS};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file_atomic};
use crate::checks::{grad_check_suite, suite_csv};
use crate::config::ExperimentConfig;
use crate::distiller::{train, train_with, TargetMaps, Targets};
use crate::ensemble::{aggregate, read_target, train_ensemble, train_member, Ensemble};
use crate::error::{Error, Result};
use crate::metrics::{
    bench_inference, class_uncertainty_by_ground_truth, evaluate, predict_ensemble, predict_model, sparsification_curve, write_panels, CurvePoint,
    MetricReport, ParamReport, Prediction, TimingReport, UncertaintyAccumulator,
};
use crate::segnet::{build, forward, load_checkpoint, param_count, save_checkpoint, ModelParams};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, write_ppm, Sample};

pub const STAGE_RECORD: &str = "stage.json";
pub const RESOLVED_CONFIG: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainTeacher,
    DistillTargets,
    TrainStudent,
    Eval,
    Sparsify,
    AblateMembers,
    Bench,
    GradCheck,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::TrainTeacher,
        Stage::DistillTargets,
        Stage::TrainStudent,
        Stage::Eval,
        Stage::Sparsify,
        Stage::AblateMembers,
        Stage::Bench,
        Stage::GradCheck,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainTeacher => "train-teacher",
            Stage::DistillTargets => "distill-targets",
            Stage::TrainStudent => "train-student",
            Stage::Eval => "eval",
            Stage::Sparsify => "sparsify",
            Stage::AblateMembers => "ablate-members",
            Stage::Bench => "bench",
            Stage::GradCheck => "grad-check",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainTeacher => "teacher",
            Stage::DistillTargets => "targets",
            Stage::TrainStudent => "student",
            Stage::Eval => "eval",
            Stage::Sparsify => "sparsify",
            Stage::AblateMembers => "ablation",
            Stage::Bench => "bench",
            Stage::GradCheck => "grad_check",
            Stage::Report => "report",
        }
    }

    fn artifact(self) -> (&'static str, &'static str) {
        match self {
            Stage::GenData => ("dataset", "train/manifest.txt"),
            Stage::TrainTeacher => ("teacher checkpoint", "member_00.ckpt"),
            Stage::DistillTargets => ("teacher targets", STAGE_RECORD),
            Stage::TrainStudent => ("student checkpoint", "student.ckpt"),
            Stage::Eval => ("evaluation report", "student.json"),
            Stage::Sparsify => ("sparsification curve", "sparsification.csv"),
            Stage::AblateMembers => ("ablation results", "ablation_summary.csv"),
            Stage::Bench => ("timing report", "timing.json"),
            Stage::GradCheck => ("gradient check", "grad_check.csv"),
            Stage::Report => ("report", "summary.json"),
        }
    }

    /// Whether `key` influences this stage's own outputs.
    fn owns_key(self, key: &str) -> bool {
        let training = key == "seed" || key.starts_with("model.") || key.starts_with("train.");
        match self {
            Stage::GenData => key == "seed" || key.starts_with("scene.") || key.starts_with("data."),
            Stage::TrainTeacher => (training && key != "train.epochs") || key.starts_with("teacher."),
            Stage::DistillTargets | Stage::Report => false,
            Stage::TrainStudent => training,
            Stage::Eval => key.starts_with("eval."),
            Stage::Sparsify => key == "eval.fractions",
            Stage::AblateMembers => {
                (training && key != "train.epochs") || key == "teacher.epochs" || key.starts_with("ablation.")
            }
            Stage::Bench => key.starts_with("bench."),
            Stage::GradCheck => key == "seed",
        }
    }

    /// Required upstream stages.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::GenData | Stage::GradCheck => &[],
            Stage::TrainTeacher => &[Stage::GenData],
            Stage::DistillTargets => &[Stage::GenData, Stage::TrainTeacher],
            Stage::TrainStudent => &[Stage::GenData, Stage::DistillTargets],
            Stage::Eval | Stage::Sparsify | Stage::Bench => &[Stage::GenData, Stage::TrainTeacher, Stage::TrainStudent],
            Stage::AblateMembers => &[Stage::GenData, Stage::TrainTeacher],
            Stage::Report => &[Stage::Eval],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Resolved `key = value` lines of the keys this stage depends on.
    pub config: String,
    /// Output hash of each upstream stage at the time this stage ran.
    pub inputs: BTreeMap<String, String>,
    pub outputs: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let top_level_meta = rel == Path::new(STAGE_RECORD) || rel == Path::new(RESOLVED_CONFIG);
            let partial = path.extension().is_some_and(|e| e == "partial");
            if !top_level_meta && !partial {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// SHA-256 over every file below `dir` (relative path, length, bytes) in
/// sorted path order, excluding the stage record and resolved config.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = read_file(&dir.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn read_record(dir: &Path) -> Result<Option<StageRecord>> {
    let path = dir.join(STAGE_RECORD);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Parse {
        file: path,
        offset: e.column() as u64,
        detail: e.to_string(),
    })
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file_atomic(path, text.as_bytes())
}

fn member_file(i: usize) -> String {
    format!("member_{i:02}.ckpt")
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>) -> Self {
        Pipeline {
            config,
            root: root.into(),
            force: false,
        }
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    fn owned_config(&self, stage: Stage) -> String {
        self.config.render_keys(|k| stage.owns_key(k))
    }

    fn missing(&self, stage: Stage) -> Error {
        let (what, file) = stage.artifact();
        Error::MissingArtifact {
            what: what.to_string(),
            path: self.dir(stage).join(file),
        }
    }

    /// Checks that `stage` completed under the current config, that its
    /// outputs are intact and that its own inputs are still current.
    /// Returns its output hash.
    pub fn verify(&self, stage: Stage) -> Result<String> {
        let dir = self.dir(stage);
        let record = read_record(&dir)?.ok_or_else(|| self.missing(stage))?;
        let config = self.owned_config(stage);
        if record.config != config {
            return Err(Error::HashMismatch {
                what: format!("{} config (re-run the stage)", stage.name()),
                expected: sha_hex(config.as_bytes()),
                found: sha_hex(record.config.as_bytes()),
            });
        }
        let actual = hash_dir(&dir)?;
        if actual != record.outputs {
            return Err(Error::HashMismatch {
                what: format!("{} outputs in {}", stage.name(), dir.display()),
                expected: record.outputs,
                found: actual,
            });
        }
        for (name, recorded) in &record.inputs {
            let upstream = Stage::from_name(name)
                .ok_or_else(|| Error::Invalid(format!("unknown stage `{name}` in {}", dir.display())))?;
            let current = self.verify(upstream)?;
            if &current != recorded {
                return Err(Error::HashMismatch {
                    what: format!("{} input from {name} (re-run {})", stage.name(), stage.name()),
                    expected: recorded.clone(),
                    found: current,
                });
            }
        }
        Ok(record.outputs)
    }

    fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &up in stage.inputs() {
            inputs.insert(up.name().to_string(), self.verify(up)?);
        }
        if stage == Stage::Report {
            for up in [Stage::AblateMembers, Stage::Bench] {
                if self.dir(up).join(STAGE_RECORD).exists() {
                    inputs.insert(up.name().to_string(), self.verify(up)?);
                }
            }
        }
        Ok(inputs)
    }

    fn execute(&self, stage: Stage, body: impl FnOnce(&Path) -> Result<()>) -> Result<StageStatus> {
        let inputs = self.input_hashes(stage)?;
        let dir = self.dir(stage);
        let config = self.owned_config(stage);
        if !self.force {
            if let Ok(Some(existing)) = read_record(&dir) {
                if existing.config == config && existing.inputs == inputs && hash_dir(&dir)? == existing.outputs {
                    info!("{}: up to date", stage.name());
                    return Ok(StageStatus::UpToDate);
                }
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let record_path = dir.join(STAGE_RECORD);
        if record_path.exists() {
            std::fs::remove_file(&record_path).map_err(|e| Error::io(&record_path, e))?;
        }
        info!("{}: running", stage.name());
        body(&dir)?;
        let record = StageRecord {
            stage: stage.name().to_string(),
            config,
            inputs,
            outputs: hash_dir(&dir)?,
        };
        write_text(&dir.join(RESOLVED_CONFIG), &self.config.to_text())?;
        write_text(&record_path, &serde_json::to_string_pretty(&record).expect("record serializes"))?;
        Ok(StageStatus::Ran)
    }

    pub fn run(&self, stage: Stage) -> Result<StageStatus> {
        match stage {
            Stage::GenData => self.execute(stage, |d| self.gen_data(d)),
            Stage::TrainTeacher => self.execute(stage, |d| self.train_teacher(d)),
            Stage::DistillTargets => self.execute(stage, |d| self.distill(d)),
            Stage::TrainStudent => self.execute(stage, |d| self.train_student(d)),
            Stage::Eval => self.execute(stage, |d| self.eval(d)),
            Stage::Sparsify => self.execute(stage, |d| self.sparsify(d)),
            Stage::AblateMembers => self.execute(stage, |d| self.ablate(d)),
            Stage::Bench => self.execute(stage, |d| self.bench(d)),
            Stage::GradCheck => self.execute(stage, |d| self.grad_check(d)),
            Stage::Report => self.execute(stage, |d| self.report(d)),
        }
    }

    /// Data, teacher, targets, student, evaluation, sparsification,
    /// ablation, benchmark and report, in order.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            if stage != Stage::GradCheck {
                self.run(stage)?;
            }
        }
        Ok(())
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        let dir = self.dir(Stage::GenData).join(split);
        let data = read_dataset(&dir)?;
        if data.is_empty() {
            return Err(self.missing(Stage::GenData));
        }
        Ok(data)
    }

    pub fn load_teacher(&self) -> Result<Ensemble> {
        let dir = self.dir(Stage::TrainTeacher);
        let m = self.config.teacher_members;
        let members = (0..m)
            .map(|i| {
                let path = dir.join(member_file(i));
                if !path.exists() {
                    return Err(Error::MissingArtifact {
                        what: "teacher checkpoint".into(),
                        path,
                    });
                }
                load_checkpoint(&path)
            })
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members, (0..m).map(|i| self.config.member_seed(i)).collect())
    }

    pub fn load_student(&self) -> Result<ModelParams> {
        let path = self.dir(Stage::TrainStudent).join("student.ckpt");
        if !path.exists() {
            return Err(self.missing(Stage::TrainStudent));
        }
        load_checkpoint(&path)
    }

    fn gen_data(&self, dir: &Path) -> Result<()> {
        let scene = self.config.scene_config();
        for (split, count, seed) in [
            ("train", self.config.data_train, self.config.train_data_seed()),
            ("test", self.config.data_test, self.config.test_data_seed()),
        ] {
            let out = dir.join(split);
            clear_dir(&out)?;
            write_dataset(&generate_dataset(&scene, seed, count, split)?, &out)?;
        }
        Ok(())
    }

    fn train_teacher(&self, dir: &Path) -> Result<()> {
        let data = self.load_split("train")?;
        clear_dir(dir)?;
        let seeds: Vec<u64> = (0..self.config.teacher_members).map(|i| self.config.member_seed(i)).collect();
        let ensemble = train_ensemble(&self.config.model_config(), &seeds, &data, &self.config.teacher_train_config())?;
        for (i, m) in ensemble.members().iter().enumerate() {
            save_checkpoint(m, &dir.join(member_file(i)))?;
        }
        Ok(())
    }

    fn distill(&self, dir: &Path) -> Result<()> {
        let data = self.load_split("train")?;
        let ensemble = self.load_teacher()?;
        let keep: std::collections::HashSet<String> = data.iter().map(|s| format!("{}.tgt", s.id)).collect();
        if dir.exists() {
            for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if name.ends_with(".tgt") && !keep.contains(&name) {
                    std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        let set = crate::ensemble::distill_targets(&ensemble, &data, dir)?;
        info!("distill-targets: {} of {} samples recomputed", set.recomputed.len(), data.len());
        Ok(())
    }

    fn load_targets(&self, data: &[Sample]) -> Result<TargetMaps> {
        let dir = self.dir(Stage::DistillTargets);
        let hash = self.load_teacher()?.content_hash();
        let mut maps = TargetMaps::new();
        for s in data {
            let path = dir.join(format!("{}.tgt", s.id));
            if path.exists() {
                if let Some(t) = read_target(&path, &s.id, &hash)? {
                    maps.insert(s.id.clone(), t.uncertainty);
                }
            }
        }
        Ok(maps)
    }

    fn train_student(&self, dir: &Path) -> Result<()> {
        let data = self.load_split("train")?;
        let init = build(&self.config.model_config(), self.config.student_seed(), true)?;
        let tc = self.config.student_train_config();
        let (student, log) = if self.config.distill_recompute_targets {
            let teacher = self.load_teacher()?;
            train_with(init, &data, Some(Targets::Teacher(&teacher)), &tc)?
        } else {
            let targets = self.load_targets(&data)?;
            train(init, &data, Some(&targets), &tc)?
        };
        save_checkpoint(&student, &dir.join("student.ckpt"))?;
        log.write_csv(&dir.join("train_log.csv"))
    }

    fn predictions(&self, test: &[Sample]) -> Result<(Ensemble, ModelParams, Vec<Prediction>, Vec<Prediction>)> {
        let ensemble = self.load_teacher()?;
        let student = self.load_student()?;
        let tp = predict_ensemble(&ensemble, test)?;
        let sp = predict_model(&student, test)?;
        Ok((ensemble, student, tp, sp))
    }

    fn eval(&self, dir: &Path) -> Result<()> {
        let test = self.load_split("test")?;
        let (ensemble, student, tp, sp) = self.predictions(&test)?;
        let classes = self.config.scene_classes;
        let fractions = &self.config.eval_fractions;
        let mut teacher = evaluate("teacher", &test, &tp, classes, fractions)?;
        let mut stud = evaluate("student", &test, &sp, classes, fractions)?;
        if self.config.eval_gt_class_uncertainty {
            let gt: Vec<u8> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
            for (report, preds) in [(&mut teacher, &tp), (&mut stud, &sp)] {
                let unc: Vec<f32> = preds.iter().flat_map(|p| p.uncertainty.iter().copied()).collect();
                let cu = class_uncertainty_by_ground_truth(&gt, &unc, classes)?;
                report.per_class_uncertainty = cu.per_class;
                report.munc = cu.munc;
            }
        }
        teacher.params = Some(ParamReport {
            total: param_count(&ensemble.members()[0]).0 * ensemble.len(),
            uncertainty_head: 0,
        });
        let (total, overhead) = param_count(&student);
        stud.params = Some(ParamReport {
            total,
            uncertainty_head: overhead,
        });
        teacher.write(dir, "teacher")?;
        stud.write(dir, "student")?;
        let n = self.config.eval_panels.min(test.len());
        let palette = self.config.scene_config().palette;
        write_panels(&dir.join("panels/teacher"), &test[..n], &tp[..n], &palette)?;
        write_panels(&dir.join("panels/student"), &test[..n], &sp[..n], &palette)
    }

    fn sparsify(&self, dir: &Path) -> Result<()> {
        let test = self.load_split("test")?;
        let (_, _, tp, sp) = self.predictions(&test)?;
        let curve = |preds: &[Prediction]| -> Result<Vec<CurvePoint>> {
            let pred: Vec<u8> = preds.iter().flat_map(|p| p.pred_map.iter().copied()).collect();
            let unc: Vec<f32> = preds.iter().flat_map(|p| p.uncertainty.iter().copied()).collect();
            let gt: Vec<u8> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
            Ok(sparsification_curve(&pred, &gt, &unc, self.config.scene_classes, &self.config.eval_fractions)?
                .into_iter()
                .map(|(fraction, miou)| CurvePoint { fraction, miou })
                .collect())
        };
        write_curves(dir, &curve(&tp)?, &curve(&sp)?)
    }

    fn ablate(&self, dir: &Path) -> Result<()> {
        let test = self.load_split("test")?;
        let teacher = self.load_teacher()?;
        let pool = *self.config.ablation_sizes.iter().max().unwrap();
        clear_dir(dir)?;
        let mut members: Vec<ModelParams> = teacher.members().iter().take(pool).cloned().collect();
        if members.len() < pool {
            let data = self.load_split("train")?;
            let tc = self.config.teacher_train_config();
            for i in members.len()..pool {
                info!("ablate-members: training extra member {i}");
                let m = train_member(&self.config.model_config(), self.config.member_seed(i), &data, &tc)?;
                save_checkpoint(&m, &dir.join(member_file(i)))?;
                members.push(m);
            }
        }
        let draws: Vec<Vec<usize>> = (0..self.config.ablation_draws)
            .map(|d| {
                let mut order: Vec<usize> = (0..pool).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.ablation_draw_seed(d)));
                order
            })
            .collect();
        let sizes = &self.config.ablation_sizes;
        let classes = self.config.scene_classes;
        let mut acc: Vec<Vec<UncertaintyAccumulator>> = draws
            .iter()
            .map(|_| sizes.iter().map(|_| UncertaintyAccumulator::new(classes)).collect())
            .collect();
        for s in &test {
            let image = s.image_tensor();
            let probs = members
                .iter()
                .map(|m| forward(m, &image).map(|o| o.probs))
                .collect::<Result<Vec<_>>>()?;
            for (d, order) in draws.iter().enumerate() {
                for (k, &m) in sizes.iter().enumerate() {
                    let subset: Vec<_> = order[..m].iter().map(|&i| probs[i].clone()).collect();
                    let out = aggregate(&subset)?;
                    acc[d][k].add(&out.pred_map, out.uncertainty.data())?;
                }
            }
        }
        let mut rows = String::from("members,draw,munc\n");
        let mut summary = String::from("members,mean_munc,std_munc\n");
        for (k, &m) in sizes.iter().enumerate() {
            let values: Vec<f64> = acc.iter().map(|a| a[k].finish().munc.unwrap_or(f64::NAN)).collect();
            for (d, v) in values.iter().enumerate() {
                let _ = writeln!(rows, "{m},{d},{v:.6}");
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
            let _ = writeln!(summary, "{m},{mean:.6},{std:.6}");
        }
        write_text(&dir.join("ablation.csv"), &rows)?;
        write_text(&dir.join("ablation_summary.csv"), &summary)
    }

    fn bench(&self, dir: &Path) -> Result<()> {
        let test = self.load_split("test")?;
        let ensemble = self.load_teacher()?;
        let student = self.load_student()?;
        let timing = bench_inference(
            &student,
            &ensemble,
            &test[0].image_tensor(),
            self.config.bench_runs,
            self.config.bench_warmup,
        )?;
        let baseline_params = param_count(&ensemble.members()[0]).0;
        let (student_params, overhead) = param_count(&student);
        let mut csv = String::from("model,median_ms,std_ms,params\n");
        for (name, t, params) in [
            ("baseline", timing.baseline, baseline_params),
            ("teacher", timing.teacher, baseline_params * ensemble.len()),
            ("student", timing.student, student_params),
        ] {
            let _ = writeln!(csv, "{name},{:.3},{:.3},{params}", t.median_ms, t.std_ms);
        }
        let _ = writeln!(csv, "# warmup {} runs {} uncertainty head params {overhead}", timing.warmup, timing.runs);
        write_text(&dir.join("efficiency.csv"), &csv)?;
        write_text(&dir.join("timing.json"), &serde_json::to_string_pretty(&timing).expect("timing serializes"))
    }

    fn grad_check(&self, dir: &Path) -> Result<()> {
        let results = grad_check_suite(self.config.seed)?;
        write_text(&dir.join("grad_check.csv"), &suite_csv(&results))?;
        if let Some(bad) = results.iter().find(|r| !r.passed()) {
            return Err(Error::Invalid(format!(
                "gradient check failed for {} ({:?}): {:.3e}",
                bad.case, bad.precision, bad.max_rel_error
            )));
        }
        Ok(())
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let eval_dir = self.dir(Stage::Eval);
        let teacher = MetricReport::read_json(&eval_dir.join("teacher.json"))?;
        let student = MetricReport::read_json(&eval_dir.join("student.json"))?;
        clear_dir(dir)?;
        write_text(&dir.join("table1_iou.csv"), &paired_table(&teacher.per_class_iou, &student.per_class_iou, teacher.miou, student.miou))?;
        write_text(
            &dir.join("table2_uncertainty.csv"),
            &paired_table(&teacher.per_class_uncertainty, &student.per_class_uncertainty, teacher.munc, student.munc),
        )?;
        write_curves(dir, &teacher.sparsification, &student.sparsification)?;
        let ablation = self.dir(Stage::AblateMembers).join("ablation_summary.csv");
        if ablation.exists() {
            write_file_atomic(&dir.join("ablation.csv"), &read_file(&ablation)?)?;
        }
        let timing_path = self.dir(Stage::Bench).join("timing.json");
        let timing: Option<TimingReport> = if timing_path.exists() {
            serde_json::from_slice(&read_file(&timing_path)?).ok()
        } else {
            None
        };
        if timing.is_some() {
            write_file_atomic(&dir.join("efficiency.csv"), &read_file(&self.dir(Stage::Bench).join("efficiency.csv"))?)?;
        }
        let summary = Summary::new(&teacher, &student, timing);
        write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `class,teacher,student,abs_diff` rows plus a `mean` row.
fn paired_table(teacher: &[Option<f64>], student: &[Option<f64>], t_mean: Option<f64>, s_mean: Option<f64>) -> String {
    let mut s = String::from("class,teacher,student,abs_diff\n");
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| (a - b).abs());
    for (c, (&t, &st)) in teacher.iter().zip(student).enumerate() {
        let _ = writeln!(s, "{c},{},{},{}", cell(t), cell(st), cell(diff(t, st)));
    }
    let _ = writeln!(s, "mean,{},{},{}", cell(t_mean), cell(s_mean), cell(diff(t_mean, s_mean)));
    s
}

/// `sparsification.csv` (fraction, teacher, student) and a matching plot:
/// teacher in red, student in blue.
fn write_curves(dir: &Path, teacher: &[CurvePoint], student: &[CurvePoint]) -> Result<()> {
    let mut csv = String::from("fraction,teacher,student\n");
    for (t, s) in teacher.iter().zip(student) {
        let _ = writeln!(csv, "{:.2},{},{}", t.fraction, cell(t.miou), cell(s.miou));
    }
    write_text(&dir.join("sparsification.csv"), &csv)?;
    let (w, h, rgb) = render_curves(&[teacher, student]);
    write_ppm(&dir.join("sparsification.ppm"), w, h, &rgb)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub miou: Option<f64>,
    pub munc: Option<f64>,
    pub error_auroc: Option<f64>,
    pub ood_auroc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub teacher: ModelSummary,
    pub student: ModelSummary,
    pub munc_abs_diff: Option<f64>,
    pub max_class_uncertainty_abs_diff: Option<f64>,
    pub timing: Option<TimingReport>,
}

impl Summary {
    fn new(teacher: &MetricReport, student: &MetricReport, timing: Option<TimingReport>) -> Self {
        let model = |r: &MetricReport| ModelSummary {
            miou: r.miou,
            munc: r.munc,
            error_auroc: r.error_auroc,
            ood_auroc: r.ood_auroc,
        };
        let max_class = teacher
            .per_class_uncertainty
            .iter()
            .zip(&student.per_class_uncertainty)
            .filter_map(|(a, b)| a.zip(*b).map(|(a, b)| (a - b).abs()))
            .reduce(f64::max);
        Summary {
            teacher: model(teacher),
            student: model(student),
            munc_abs_diff: teacher.munc.zip(student.munc).map(|(a, b)| (a - b).abs()),
            max_class_uncertainty_abs_diff: max_class,
            timing,
        }
    }
}
